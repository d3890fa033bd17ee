#include "halo/cli.hpp"

#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "halo/data_model.hpp"
#include "halo/error.hpp"
#include "halo/io.hpp"
#include "halo/reconstruct.hpp"

namespace halo::cli {

namespace {

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

std::optional<fs::path> optional_path(const json& section, const char* key, const fs::path& base) {
  auto it = section.find(key);
  if (it == section.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw Error(ErrorCode::InvalidConfig, std::string(key) + " must be a path string");
  return resolve(base, it->get<std::string>());
}

std::vector<std::string> read_candidates_file(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::IoError, "no such file: " + path.string());
  const std::string text = read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  std::vector<std::string> out;
  if (first != std::string::npos && text[first] == '[') {
    try {
      out = json::parse(text).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
    }
  } else {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
    }
  }
  return out;
}

const fs::path& require_path(const std::optional<fs::path>& path, const char* what) {
  if (!path) throw Error(ErrorCode::InvalidConfig, std::string("config names no ") + what);
  if (!fs::exists(*path)) throw Error(ErrorCode::IoError, std::string(what) + " not found: " + path->string());
  return *path;
}

// Flags shared by every subcommand.
struct GlobalFlags {
  std::string config;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
};

struct Context {
  PipelineConfig config;
  fs::path run_dir;
};

Context make_context(const GlobalFlags& flags, bool config_required) {
  Context ctx;
  if (!flags.config.empty()) {
    ctx.config = load_pipeline_config(flags.config);
  } else if (config_required) {
    throw Error(ErrorCode::InvalidConfig, "--config is required for this command");
  } else {
    ctx.config.base_dir = fs::current_path();
  }
  if (!flags.run_dir.empty()) {
    ctx.run_dir = flags.run_dir;
  } else if (ctx.config.run_dir) {
    ctx.run_dir = *ctx.config.run_dir;
  } else {
    throw Error(ErrorCode::InvalidConfig, "no run directory: pass --run-dir or set run_dir in the config");
  }
  if (flags.seed) ctx.config.prompt.seed = *flags.seed;
  return ctx;
}

int cmd_label(const Context& ctx, bool resume, std::optional<std::size_t> limit, std::ostream& err) {
  const fs::path& train = require_path(ctx.config.train, "data.train");
  const Dataset dataset = load_dataset(train);
  const PromptConfig prompt = resolve_prompt(ctx.config.prompt);
  DirectoryLock lock(ctx.run_dir);
  auto backend = make_backend(ctx.config.backend);

  LabelOptions options;
  options.resume = resume;
  options.failure_threshold = ctx.config.failure_threshold;
  options.limit = limit;
  try {
    const LabelRunResult result = generate_weak_labels(dataset, prompt, *backend, ctx.run_dir, options);
    err << "label: " << result.processed << " new items, " << result.labeled.size() << " labeled, "
        << result.failures.size() << " failed of " << dataset.size() << "; backend calls " << backend->calls() << "\n";
  } catch (const Error& e) {
    if (e.code() != ErrorCode::FailureRateExceeded) throw;
    err << "label: " << e.what() << "; backend calls " << backend->calls() << "\n";
    return kPartialFailure;
  }
  return kSuccess;
}

int cmd_optimize(const Context& ctx, std::ostream& out, std::ostream& err) {
  const auto& cfg = ctx.config;
  const Dataset valset = load_dataset(require_path(cfg.val, "data.val"));
  if (cfg.stages.empty() && (!cfg.candidates || cfg.candidates->empty())) {
    throw Error(ErrorCode::NoCandidates, "optimize needs stages or a non-empty candidate list");
  }
  DirectoryLock lock(ctx.run_dir);
  auto backend = make_backend(cfg.backend);
  ResponseCache cache(ctx.run_dir / "cache");

  StageLedger ledger;
  std::optional<PromptConfig> best;
  if (!cfg.stages.empty()) {
    Dataset pool;
    for (const auto& stage : cfg.stages) {
      if (stage.k > 0 && pool.empty()) pool = load_dataset(require_path(cfg.prompt.shot_pool_path, "prompt.shot_pool_path"));
    }
    const StageLedger staged = run_stages(valset, *backend, cache, cfg.stages, pool.points,
                                          UserTemplate(cfg.prompt.user_template), cfg.prompt.seed,
                                          cfg.prompt.strategy, ctx.run_dir);
    for (const auto& row : staged.rows()) ledger.add(row);
  }
  if (cfg.candidates) {
    if (cfg.candidates->empty()) throw Error(ErrorCode::NoCandidates, "candidate list is empty");
    const PromptConfig base = resolve_prompt(cfg.prompt);
    const OptimizeResult search = optimize_instruction(*cfg.candidates, base, valset, *backend, cache, ctx.run_dir);
    for (const auto& row : search.ledger.rows()) ledger.add(row);
    best = search.best_config;
  }

  write_file_atomic(ctx.run_dir / "ledger.json", ledger.to_json().dump(2) + "\n");
  const StageRow& winner = ledger.rows()[ledger.best_index()];
  write_file_atomic(ctx.run_dir / "best_prompt.json", (best ? to_json(*best) : winner.prompt_config).dump(2) + "\n");
  ledger.print(out);
  out << "best: " << winner.stage_name << "\n";
  err << "optimize: " << ledger.size() << " rows, backend calls " << backend->calls() << ", cache hits "
      << cache.hits() << "\n";
  return kSuccess;
}

int cmd_reconstruct(const Context& ctx, const std::string& labels_flag, const std::string& output_flag,
                    std::optional<std::uint64_t> seed, std::ostream& err) {
  const auto& cfg = ctx.config;
  const Dataset dataset = load_dataset(require_path(cfg.train, "data.train"));
  const std::string source = labels_flag.empty() ? cfg.reconstruct_labels : labels_flag;
  DirectoryLock lock(ctx.run_dir);

  std::vector<std::pair<DataPoint, Label>> labeled;
  std::size_t unlabeled = 0;
  if (source == "weak") {
    const fs::path manifest_path = ctx.run_dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw Error(ErrorCode::IoError, "no label run in " + ctx.run_dir.string());
    const RunManifest manifest = run_manifest_from_json(json::parse(read_file(manifest_path)));
    if (manifest.dataset_digest != dataset.digest) {
      throw Error(ErrorCode::DigestMismatch, "labels in " + ctx.run_dir.string() + " belong to another dataset");
    }
    std::vector<std::optional<Label>> by_id(dataset.size());
    for (const auto& row : read_jsonl(ctx.run_dir / "labels.jsonl")) {
      const LabelOutcome outcome = label_outcome_from_json(row.value);
      if (outcome.labeled && outcome.id < by_id.size()) by_id[outcome.id] = outcome.labeled->predicted;
    }
    for (const auto& dp : dataset.points) {
      if (by_id[dp.id]) {
        labeled.emplace_back(dp, *by_id[dp.id]);
      } else {
        ++unlabeled;
      }
    }
  } else if (source == "gold") {
    for (const auto& dp : dataset.points) {
      if (dp.gold_label) {
        labeled.emplace_back(dp, *dp.gold_label);
      } else {
        ++unlabeled;
      }
    }
  } else {
    throw Error(ErrorCode::InvalidConfig, "reconstruct labels must be \"weak\" or \"gold\", got \"" + source + "\"");
  }

  const ReconstructResult result = to_chat_records(labeled);
  const fs::path output = output_flag.empty() ? ctx.run_dir / cfg.training_file : fs::path(output_flag);
  const std::size_t written = write_training_jsonl(result.records, output);
  json overrides = cfg.manifest_overrides;
  if (seed) overrides["seed"] = *seed;
  const fs::path manifest_path = emit_manifest(overrides, output);
  err << "reconstruct: " << written << " records, " << result.skipped.size() << " skipped, " << unlabeled
      << " without a label -> " << output.string() << " (+ " << manifest_path.filename().string() << ")\n";
  return kSuccess;
}

std::vector<PredictionSet> load_sets(const std::vector<fs::path>& paths, std::ostream& err) {
  std::vector<PredictionSet> sets;
  for (const auto& path : paths) {
    LoadedPredictions loaded = load_prediction_set(path);
    for (const auto& warning : loaded.warnings) err << "warning: " << warning << "\n";
    sets.push_back(std::move(loaded.set));
  }
  // Name the offending file rather than only its model tag.
  for (std::size_t s = 1; s < sets.size(); ++s) {
    const auto& a = sets.front().records;
    const auto& b = sets[s].records;
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].id == b[i].id;
    if (!same) {
      try {
        majority_vote(std::vector<PredictionSet>{sets.front(), sets[s]});
      } catch (const Error& e) {
        throw Error(ErrorCode::MisalignedIds, paths[s].string() + " vs " + paths.front().string() + ": " + e.detail());
      }
    }
  }
  return sets;
}

int cmd_vote(const Context& ctx, std::vector<std::string> input_flags, const std::string& policy_flag,
             const std::string& gold_flag, const std::string& output_flag, std::ostream& out, std::ostream& err) {
  std::vector<fs::path> inputs;
  for (const auto& p : input_flags) inputs.emplace_back(p);
  if (inputs.empty()) inputs = ctx.config.vote_inputs;
  if (inputs.empty()) throw Error(ErrorCode::NoSets, "no prediction files given");

  TiePolicy policy = ctx.config.tie_policy;
  if (!policy_flag.empty()) {
    auto parsed = tie_policy_from_string(policy_flag);
    if (!parsed) throw Error(ErrorCode::InvalidConfig, "unknown tie policy \"" + policy_flag + "\"");
    policy = *parsed;
  }
  std::optional<fs::path> gold_path = gold_flag.empty() ? ctx.config.test : std::optional<fs::path>(gold_flag);
  DirectoryLock lock(ctx.run_dir);

  const std::vector<PredictionSet> sets = load_sets(inputs, err);
  const VoteResult vote = majority_vote(sets, policy);
  const PredictionSet ensemble = vote.as_prediction_set("ensemble");
  const fs::path output = output_flag.empty() ? ctx.run_dir / "ensemble.jsonl" : fs::path(output_flag);
  write_prediction_set(ensemble, output);

  std::size_t ties = 0;
  for (const auto& v : vote.votes) ties += v.tiebreak_used ? 1 : 0;
  json report{{"n_models", vote.n_models}, {"n_ids", vote.votes.size()}, {"ties", ties}};
  json agreement = json::array();
  for (const auto& row : pairwise_agreement(sets)) agreement.push_back(row);
  report["agreement"] = std::move(agreement);
  json tags = json::array();
  for (const auto& set : sets) tags.push_back(set.model_tag);
  report["model_tags"] = std::move(tags);

  if (gold_path) {
    const Dataset gold = load_dataset(require_path(gold_path, "gold dataset"));
    EvalReport ensemble_report = score(ensemble, gold);
    std::vector<std::pair<std::string, double>> members;
    for (const auto& set : sets) members.emplace_back(set.model_tag, score(set, gold).accuracy);
    ensemble_report.member_accuracies = std::move(members);
    report["evaluation"] = to_json(ensemble_report);
    print_report_table(out, ensemble_report);
  } else {
    out << "voted " << vote.votes.size() << " ids over " << vote.n_models << " sets, " << ties << " ties\n";
  }
  write_file_atomic(ctx.run_dir / "vote_report.json", report.dump(2) + "\n");
  err << "vote: wrote " << output.string() << "\n";
  return kSuccess;
}

int cmd_score(const Context& ctx, const std::string& pred_flag, const std::string& gold_flag,
              const std::string& output_flag, std::ostream& out, std::ostream& err) {
  const fs::path pred_path = pred_flag.empty() ? ctx.run_dir / "ensemble.jsonl" : fs::path(pred_flag);
  std::optional<fs::path> gold_path = gold_flag.empty() ? ctx.config.test : std::optional<fs::path>(gold_flag);
  const Dataset gold = load_dataset(require_path(gold_path, "gold dataset"));
  DirectoryLock lock(ctx.run_dir);

  LoadedPredictions loaded = load_prediction_set(pred_path);
  for (const auto& warning : loaded.warnings) err << "warning: " << warning << "\n";
  const EvalReport report = score(loaded.set, gold);
  const fs::path output = output_flag.empty() ? ctx.run_dir / "score_report.json" : fs::path(output_flag);
  write_file_atomic(output, to_json(report).dump(2) + "\n");
  print_report_table(out, report);
  return kSuccess;
}

int cmd_report(const Context& ctx, std::ostream& out) {
  bool any = false;
  if (const fs::path p = ctx.run_dir / "manifest.json"; fs::exists(p)) {
    const RunManifest manifest = run_manifest_from_json(json::parse(read_file(p)));
    out << "label run " << manifest.run_id << ": " << manifest.counts.labeled << " labeled, " << manifest.counts.failed
        << " failed of " << manifest.counts.total << (manifest.finished() ? "" : " (unfinished)") << "\n\n";
    any = true;
  }
  if (const fs::path p = ctx.run_dir / "ledger.json"; fs::exists(p)) {
    StageLedger::from_json(json::parse(read_file(p))).print(out);
    out << "\n";
    any = true;
  }
  for (const char* name : {"vote_report.json", "score_report.json"}) {
    const fs::path p = ctx.run_dir / name;
    if (!fs::exists(p)) continue;
    json doc = json::parse(read_file(p));
    if (doc.contains("evaluation")) doc = doc["evaluation"];
    if (!doc.contains("accuracy")) continue;
    EvalReport report;
    report.accuracy = doc.at("accuracy").get<double>();
    report.n = doc.value("n", std::size_t{0});
    report.model_tag = doc.value("model_tag", "");
    if (doc.contains("member_accuracies")) {
      std::vector<std::pair<std::string, double>> members;
      for (const auto& m : doc["member_accuracies"]) {
        members.emplace_back(m.at("model_tag").get<std::string>(), m.at("accuracy").get<double>());
      }
      report.member_accuracies = std::move(members);
    }
    print_report_table(out, report);
    out << "\n";
    any = true;
  }
  if (!any) throw Error(ErrorCode::IoError, "nothing to report in " + ctx.run_dir.string());
  return kSuccess;
}

}  // namespace

PipelineConfig load_pipeline_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::IoError, "config not found: " + path.string());
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::InvalidConfig, path.string() + ": top level must be an object");

  PipelineConfig config;
  config.base_dir = fs::absolute(path).parent_path();
  const fs::path& base = config.base_dir;
  try {
    config.run_dir = optional_path(doc, "run_dir", base);
    if (auto data = doc.find("data"); data != doc.end()) {
      config.train = optional_path(*data, "train", base);
      config.val = optional_path(*data, "val", base);
      config.test = optional_path(*data, "test", base);
    }
    if (auto prompt = doc.find("prompt"); prompt != doc.end()) config.prompt = prompt_spec_from_json(*prompt, base);
    if (auto backend = doc.find("backend"); backend != doc.end()) config.backend = backend_config_from_json(*backend);
    if (auto label = doc.find("label"); label != doc.end()) {
      config.failure_threshold = label->value("failure_threshold", 0.2);
      if (!(config.failure_threshold >= 0.0 && config.failure_threshold <= 1.0)) {
        throw Error(ErrorCode::InvalidConfig, "label.failure_threshold must be in [0,1]");
      }
    }
    if (auto optimize = doc.find("optimize"); optimize != doc.end()) {
      for (const auto& stage : optimize->value("stages", json::array())) {
        StageSpec spec;
        spec.name = stage.at("name").get<std::string>();
        spec.system_instruction = stage.value("system_instruction", std::string(kDefaultSystemInstruction));
        const long long k = stage.value("k", 0LL);
        if (k < 0) throw Error(ErrorCode::InvalidConfig, "stage k must be >= 0");
        spec.k = static_cast<std::size_t>(k);
        config.stages.push_back(std::move(spec));
      }
      if (auto it = optimize->find("candidates"); it != optimize->end()) {
        config.candidates = it->get<std::vector<std::string>>();
      } else if (auto cp = optional_path(*optimize, "candidates_path", base)) {
        config.candidates = read_candidates_file(*cp);
      }
    }
    if (auto recon = doc.find("reconstruct"); recon != doc.end()) {
      config.reconstruct_labels = recon->value("labels", "weak");
      config.training_file = recon->value("output", "train_chat.jsonl");
      config.manifest_overrides = recon->value("manifest", json::object());
    }
    if (auto vote = doc.find("vote"); vote != doc.end()) {
      for (const auto& p : vote->value("inputs", json::array())) config.vote_inputs.push_back(resolve(base, p.get<std::string>()));
      const std::string policy = vote->value("tie_policy", "mean_confidence");
      auto parsed = tie_policy_from_string(policy);
      if (!parsed) throw Error(ErrorCode::InvalidConfig, "unknown tie_policy \"" + policy + "\"");
      config.tie_policy = *parsed;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  return config;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weak-label, prompt-search and ensemble-scoring pipeline for hallucination detection", "halo"};
  app.require_subcommand(1);

  GlobalFlags flags;
  std::uint64_t seed_value = 0;
  app.add_option("--config", flags.config, "pipeline config (JSON)");
  app.add_option("--run-dir", flags.run_dir, "run directory (overrides run_dir in the config)");
  auto* seed_opt = app.add_option("--seed", seed_value, "seed for shot selection and the training manifest");

  bool resume = false;
  std::size_t limit = 0;
  auto* label = app.add_subcommand("label", "weakly label the training split");
  label->add_flag("--resume", resume, "continue an interrupted run in the same run directory");
  auto* limit_opt = label->add_option("--limit", limit, "label at most N new items in this invocation");

  auto* optimize = app.add_subcommand("optimize", "evaluate prompt stages / candidate instructions on the validation split");

  std::string labels_source;
  std::string recon_output;
  auto* reconstruct = app.add_subcommand("reconstruct", "turn labeled data into chat-format training records");
  reconstruct->add_option("--labels", labels_source, "weak (default) or gold");
  reconstruct->add_option("--output", recon_output, "training JSONL path");

  std::vector<std::string> vote_inputs;
  std::string tie_policy;
  std::string gold;
  std::string vote_output;
  auto* vote = app.add_subcommand("vote", "majority-vote several prediction files");
  vote->add_option("predictions", vote_inputs, "prediction JSONL files");
  vote->add_option("--tie-policy", tie_policy, "mean_confidence or flag_hallucination");
  vote->add_option("--gold", gold, "labeled dataset for member and ensemble accuracies");
  vote->add_option("--output", vote_output, "ensemble prediction JSONL path");

  std::string pred;
  std::string score_gold;
  std::string score_output;
  auto* score_cmd = app.add_subcommand("score", "score a prediction file against gold labels");
  score_cmd->add_option("--pred", pred, "prediction JSONL (default: <run-dir>/ensemble.jsonl)");
  score_cmd->add_option("--gold", score_gold, "labeled dataset (default: data.test)");
  score_cmd->add_option("--output", score_output, "report JSON path");

  auto* report = app.add_subcommand("report", "print the tables recorded in a run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }
  if (seed_opt->count() > 0) flags.seed = seed_value;

  try {
    if (label->parsed()) {
      const Context ctx = make_context(flags, true);
      std::optional<std::size_t> lim;
      if (limit_opt->count() > 0) lim = limit;
      return cmd_label(ctx, resume, lim, err);
    }
    if (optimize->parsed()) return cmd_optimize(make_context(flags, true), out, err);
    if (reconstruct->parsed()) return cmd_reconstruct(make_context(flags, true), labels_source, recon_output, flags.seed, err);
    if (vote->parsed()) return cmd_vote(make_context(flags, false), vote_inputs, tie_policy, gold, vote_output, out, err);
    if (score_cmd->parsed()) return cmd_score(make_context(flags, false), pred, score_gold, score_output, out, err);
    if (report->parsed()) return cmd_report(make_context(flags, false), out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::FailureRateExceeded ? kPartialFailure : kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace halo::cli
