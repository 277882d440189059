#pragma once

// One-command reproduction: corpus -> pretrain -> safety vector -> fine-tune
// every strategy -> red-team evaluation -> feature sweep -> scatter plots.
//
// Every stage records the hashes of the artifacts it read and wrote in
// <run>/manifest.json. A rerun skips a stage when its parameters and input
// hashes are unchanged and its outputs still match, so deleting an artifact
// resumes from the stage that produced it.

#include "rrs/corpus.hpp"
#include "rrs/eval.hpp"
#include "rrs/finetune.hpp"
#include "rrs/model.hpp"
#include "rrs/pretrain.hpp"
#include "rrs/safety_vector.hpp"
#include "rrs/viz.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace rrs {

inline constexpr const char* kToolVersion = "0.1.0";

namespace fs = std::filesystem;

class StageFailure : public Error {
 public:
  StageFailure(std::string stage, const std::string& what)
      : Error("stage " + stage + " failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  int n_per_category = 50;
  int basic_pairs = 1400;
  int redteam_harmful = 350;
  int redteam_benign = 350;
  int gate_harmful = 140;
  PretrainHyper pretrain;
  FinetuneHyper finetune;
  std::vector<Strategy> strategies = {Strategy::rrs, Strategy::sft_full, Strategy::sft_shallow_mirror,
                                      Strategy::sft_shallow_parallel, Strategy::sft_deep};
  bool penalty_ablation = true;
  double m = 51;
  std::vector<double> m_list = {12.5, 25, 51};
  EvalSpec eval;
  std::vector<Mode> modes = {Mode::audio_text, Mode::text_only, Mode::audio_only};
  std::vector<int> snapshot_epochs = {0, 1, 3, 10};
  std::string viz_method = "tsne";
  TsneParams tsne;

  /// key = value lines; '#' starts a comment. Unknown keys are rejected.
  static PipelineConfig parse(const std::string& text) {
    PipelineConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (key.empty() && eq == std::string::npos) continue;
      if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
      try {
        c.set(key, trim(line.substr(eq + 1)));
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config line " + std::to_string(lineno) + " (" + key + "): " + e.what());
      }
    }
    c.model.validate();
    c.finetune.validate();
    if (c.strategies.empty()) throw std::invalid_argument("config: no strategies");
    return c;
  }

  static PipelineConfig load(const fs::path& path) { return parse(read_file_bytes(path)); }

  /// Canonical key/value view; also the config snapshot stored in the manifest.
  std::map<std::string, std::string> entries() const {
    std::map<std::string, std::string> e;
    e["seed"] = std::to_string(seed);
    e["model.hidden"] = std::to_string(model.hidden);
    e["model.layers"] = std::to_string(model.layers);
    e["model.heads"] = std::to_string(model.heads);
    e["model.ff"] = std::to_string(model.ff);
    e["model.max_positions"] = std::to_string(model.max_positions);
    e["corpus.n_per_category"] = std::to_string(n_per_category);
    e["corpus.basic_pairs"] = std::to_string(basic_pairs);
    e["corpus.redteam_harmful"] = std::to_string(redteam_harmful);
    e["corpus.redteam_benign"] = std::to_string(redteam_benign);
    e["corpus.gate_harmful"] = std::to_string(gate_harmful);
    e["pretrain.max_epochs"] = std::to_string(pretrain.max_epochs);
    e["pretrain.batch"] = std::to_string(pretrain.batch);
    e["pretrain.lr"] = num(pretrain.lr);
    e["pretrain.align_weight"] = num(pretrain.align_weight);
    e["finetune.epochs"] = std::to_string(finetune.epochs);
    e["finetune.batch"] = std::to_string(finetune.batch);
    e["finetune.lr"] = num(finetune.lr);
    e["finetune.lambda"] = num(finetune.lambda);
    e["finetune.rank"] = std::to_string(finetune.rank);
    e["finetune.alpha"] = num(finetune.alpha);
    std::string s;
    for (auto st : strategies) s += (s.empty() ? "" : ",") + std::string(to_string(st));
    e["strategies"] = s;
    e["ablation.lambda0"] = penalty_ablation ? "true" : "false";
    e["m"] = num(m);
    s.clear();
    for (double x : m_list) s += (s.empty() ? "" : ",") + num(x);
    e["m_list"] = s;
    e["eval.n_inferences"] = std::to_string(eval.n_inferences);
    e["eval.temperature"] = num(eval.sampling.temperature);
    e["eval.greedy"] = eval.sampling.greedy ? "true" : "false";
    s.clear();
    for (Mode md : modes) s += (s.empty() ? "" : ",") + std::string(to_string(md));
    e["eval.modes"] = s;
    s.clear();
    for (int ep : snapshot_epochs) s += (s.empty() ? "" : ",") + std::to_string(ep);
    e["viz.epochs"] = s;
    e["viz.method"] = viz_method;
    e["viz.perplexity"] = num(tsne.perplexity);
    e["viz.iters"] = std::to_string(tsne.iters);
    return e;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static std::string num(double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  }

  static std::vector<std::string> split(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string cell;
    while (std::getline(ss, cell, ','))
      if (!trim(cell).empty()) out.push_back(trim(cell));
    return out;
  }

  static bool boolean(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("expected a boolean, got '" + v + "'");
  }

  void set(const std::string& k, const std::string& v) {
    auto i = [&] { return std::stoi(v); };
    auto d = [&] { return std::stod(v); };
    if (k == "seed") seed = std::stoull(v);
    else if (k == "model.hidden") model.hidden = i();
    else if (k == "model.layers") model.layers = i();
    else if (k == "model.heads") model.heads = i();
    else if (k == "model.ff") model.ff = i();
    else if (k == "model.max_positions") model.max_positions = i();
    else if (k == "corpus.n_per_category") n_per_category = i();
    else if (k == "corpus.basic_pairs") basic_pairs = i();
    else if (k == "corpus.redteam_harmful") redteam_harmful = i();
    else if (k == "corpus.redteam_benign") redteam_benign = i();
    else if (k == "corpus.gate_harmful") gate_harmful = i();
    else if (k == "pretrain.max_epochs") pretrain.max_epochs = i();
    else if (k == "pretrain.batch") pretrain.batch = i();
    else if (k == "pretrain.lr") pretrain.lr = d();
    else if (k == "pretrain.align_weight") pretrain.align_weight = d();
    else if (k == "finetune.epochs") finetune.epochs = i();
    else if (k == "finetune.batch") finetune.batch = i();
    else if (k == "finetune.lr") finetune.lr = d();
    else if (k == "finetune.lambda") finetune.lambda = d();
    else if (k == "finetune.rank") finetune.rank = i();
    else if (k == "finetune.alpha") finetune.alpha = d();
    else if (k == "strategies") {
      strategies.clear();
      for (const auto& s : split(v)) strategies.push_back(strategy_from_string(s));
    } else if (k == "ablation.lambda0") penalty_ablation = boolean(v);
    else if (k == "m") m = d();
    else if (k == "m_list") {
      m_list.clear();
      for (const auto& s : split(v)) m_list.push_back(std::stod(s));
    } else if (k == "eval.n_inferences") eval.n_inferences = i();
    else if (k == "eval.temperature") eval.sampling.temperature = d();
    else if (k == "eval.greedy") eval.sampling.greedy = boolean(v);
    else if (k == "eval.modes") {
      modes.clear();
      if (v == "all") modes = {Mode::audio_text, Mode::text_only, Mode::audio_only};
      else
        for (const auto& s : split(v)) modes.push_back(mode_from_string(s));
    } else if (k == "viz.epochs") {
      snapshot_epochs.clear();
      for (const auto& s : split(v)) snapshot_epochs.push_back(std::stoi(s));
    } else if (k == "viz.method") {
      if (v != "tsne" && v != "pca") throw std::invalid_argument("viz.method must be tsne or pca");
      viz_method = v;
    } else if (k == "viz.perplexity") tsne.perplexity = d();
    else if (k == "viz.iters") tsne.iters = i();
    else throw std::invalid_argument("unknown key");
  }
};

/// Run directory: explicit path, else $RRS_RUN_ROOT/<config stem>, else
/// ./runs/<config stem>.
inline fs::path default_run_dir(const fs::path& config_path) {
  const char* root = std::getenv("RRS_RUN_ROOT");
  return fs::path(root && *root ? root : "runs") / config_path.stem();
}

struct PipelineResult {
  fs::path run_dir;
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
};

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct StageDef {
  std::string name;
  std::vector<std::string> inputs;   // paths relative to the run dir
  std::vector<std::string> outputs;
  nlohmann::json params;
  std::function<void()> run;
};

class Manifest {
 public:
  explicit Manifest(fs::path run_dir) : dir_(std::move(run_dir)) {
    const auto p = dir_ / "manifest.json";
    if (fs::exists(p)) {
      try {
        doc_ = nlohmann::json::parse(read_file_bytes(p));
      } catch (const nlohmann::json::exception&) {
        doc_ = nlohmann::json::object();
      }
    }
    if (!doc_.contains("stages")) doc_["stages"] = nlohmann::json::object();
  }

  nlohmann::json& doc() { return doc_; }

  std::map<std::string, std::string> hashes(const std::vector<std::string>& rel) const {
    std::map<std::string, std::string> out;
    for (const auto& r : rel) out[r] = fs::exists(dir_ / r) ? sha256_tree(dir_ / r) : "";
    return out;
  }

  /// Producer-recorded hash of an artifact, if any stage recorded it.
  std::optional<std::string> recorded_output(const std::string& rel) const {
    for (const auto& [name, st] : doc_["stages"].items())
      if (st.contains("outputs") && st["outputs"].contains(rel)) return st["outputs"][rel].get<std::string>();
    return std::nullopt;
  }

  bool up_to_date(const StageDef& s, const std::map<std::string, std::string>& inputs) const {
    const auto& stages = doc_["stages"];
    if (!stages.contains(s.name)) return false;
    const auto& st = stages[s.name];
    if (st.value("params", nlohmann::json()) != s.params) return false;
    if (st.value("inputs", nlohmann::json()) != nlohmann::json(inputs)) return false;
    for (const auto& out : s.outputs) {
      if (!fs::exists(dir_ / out)) return false;
      if (!st["outputs"].contains(out) || st["outputs"][out] != sha256_tree(dir_ / out)) return false;
    }
    return true;
  }

  void record(const StageDef& s, const std::map<std::string, std::string>& inputs, const std::string& started) {
    nlohmann::json st;
    st["params"] = s.params;
    st["inputs"] = inputs;
    st["outputs"] = hashes(s.outputs);
    st["started"] = started;
    st["finished"] = utc_now();
    doc_["stages"][s.name] = st;
    save();
  }

  void save() const { write_file_bytes(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

 private:
  fs::path dir_;
  nlohmann::json doc_;
};

}  // namespace detail

inline std::vector<Mode> all_modes() { return {Mode::audio_text, Mode::text_only, Mode::audio_only}; }

/// Runs every stage of the configured experiment under run_dir.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const fs::path& run_dir, std::ostream* log = nullptr) {
  fs::create_directories(run_dir);
  PipelineResult result;
  result.run_dir = run_dir;
  detail::Manifest manifest(run_dir);
  auto& doc = manifest.doc();
  nlohmann::json cfg_json = cfg.entries();
  doc["tool_version"] = kToolVersion;
  doc["seed"] = cfg.seed;
  doc["config"] = cfg_json;
  if (!doc.contains("created")) doc["created"] = detail::utc_now();
  doc["updated"] = detail::utc_now();
  manifest.save();

  const auto path = [&](const std::string& rel) { return run_dir / rel; };
  const auto sub = [&](const std::string& purpose) { return derive_seed(cfg.seed, purpose); };
  const auto say = [&](const std::string& msg) {
    if (log) *log << msg << std::endl;
  };

  // Lazily loaded artifacts shared between stages.
  std::map<std::string, AlignmentDataset> datasets;
  auto dataset = [&](const std::string& name) -> const AlignmentDataset& {
    auto it = datasets.find(name);
    if (it == datasets.end()) it = datasets.emplace(name, read_dataset(path("corpus/" + name))).first;
    return it->second;
  };
  std::optional<Checkpoint> base;
  auto base_ckpt = [&]() -> const Checkpoint& {
    if (!base) base = load_checkpoint(path("base"));
    return *base;
  };

  FinetuneHyper fh = cfg.finetune;
  fh.seed = sub("finetune");
  const nlohmann::json fh_json = {{"epochs", fh.epochs}, {"batch", fh.batch}, {"lr", fh.lr},
                                  {"lambda", fh.lambda}, {"rank", fh.rank},   {"alpha", fh.alpha},
                                  {"seed", fh.seed}};
  EvalSpec spec = cfg.eval;
  spec.seed = sub("eval");

  std::vector<detail::StageDef> stages;
  stages.push_back({"corpus",
                    {},
                    {"corpus/mirror", "corpus/parallel", "corpus/basic", "corpus/redteam", "corpus/gate"},
                    {{"n_per_category", cfg.n_per_category},
                     {"basic_pairs", cfg.basic_pairs},
                     {"redteam", {cfg.redteam_harmful, cfg.redteam_benign}},
                     {"gate_harmful", cfg.gate_harmful},
                     {"seed", cfg.seed}},
                    [&] {
                      const auto mirror = gen_mirror(cfg.n_per_category, sub("corpus/mirror"));
                      write_dataset(mirror, path("corpus/mirror"));
                      write_dataset(gen_parallel(mirror, sub("corpus/parallel")), path("corpus/parallel"));
                      write_dataset(gen_basic(cfg.basic_pairs, sub("corpus/basic")), path("corpus/basic"));
                      write_dataset(gen_redteam(cfg.redteam_harmful, cfg.redteam_benign, sub("corpus/redteam")),
                                    path("corpus/redteam"));
                      write_dataset(gen_redteam(cfg.gate_harmful, 0, sub("corpus/gate")), path("corpus/gate"));
                      datasets.clear();
                    }});

  stages.push_back({"pretrain",
                    {"corpus/mirror", "corpus/basic", "corpus/gate"},
                    {"base"},
                    {{"model", cfg.entries()["model.hidden"] + "/" + cfg.entries()["model.layers"] + "/" +
                                   cfg.entries()["model.heads"] + "/" + cfg.entries()["model.ff"]},
                     {"max_epochs", cfg.pretrain.max_epochs},
                     {"batch", cfg.pretrain.batch},
                     {"lr", cfg.pretrain.lr},
                     {"align_weight", cfg.pretrain.align_weight},
                     {"seed", sub("pretrain")}},
                    [&] {
                      PretrainReport rep;
                      auto ck = pretrain({&dataset("mirror"), &dataset("basic")}, cfg.model, cfg.pretrain,
                                         sub("pretrain"), dataset("gate"), &rep, [&](int e, const GateMetrics& g) {
                                           say("  pretrain epoch " + std::to_string(e) + ": answer " +
                                               fmt(100 * g.answer_rate) + "%, directive refusal " +
                                               fmt(100 * g.directive_refusal_rate) + "%");
                                         });
                      fs::remove_all(path("base"));
                      save_checkpoint(ck, path("base"));
                      base.reset();
                    }});

  stages.push_back({"safety",
                    {"base", "corpus/mirror"},
                    {"safety/sv.rrst", "safety/sv.rrst.json"},
                    {{"m", cfg.m}},
                    [&] {
                      write_safety_vector(extract_safety_vector(base_ckpt(), dataset("mirror"), cfg.m),
                                          path("safety/sv.rrst"));
                    }});

  // Fine-tuning runs: every configured strategy plus the penalty ablation.
  struct Run {
    std::string name;
    Strategy strategy;
    double lambda;
  };
  std::vector<Run> runs;
  for (Strategy s : cfg.strategies) runs.push_back({to_string(s), s, fh.lambda});
  if (cfg.penalty_ablation) runs.push_back({"rrs-lambda0", Strategy::rrs, 0.0});
  const std::set<int> snap_epochs(cfg.snapshot_epochs.begin(), cfg.snapshot_epochs.end());

  for (const auto& run : runs) {
    const std::string dir = "finetune/" + run.name;
    const std::string data_name = run.strategy == Strategy::sft_full               ? "basic"
                                  : run.strategy == Strategy::sft_shallow_parallel ? "parallel"
                                                                                   : "mirror";
    std::vector<std::string> inputs = {"base", "corpus/" + data_name};
    std::vector<std::string> outputs = {dir + "/ckpt", dir + "/trainlog.csv"};
    const bool snapshots = run.name == "rrs";
    if (run.strategy == Strategy::rrs) inputs.push_back("safety/sv.rrst");
    if (snapshots) {
      inputs.push_back("corpus/redteam");
      outputs.push_back(dir + "/snapshots");
      outputs.push_back(dir + "/cluster.csv");
    }
    nlohmann::json params = fh_json;
    params["strategy"] = to_string(run.strategy);
    params["lambda"] = run.lambda;
    if (snapshots) params["snapshot_epochs"] = cfg.snapshot_epochs;
    stages.push_back({"finetune:" + run.name, inputs, outputs, params, [&, run, dir, data_name, snapshots] {
                        FinetuneHyper h = fh;
                        h.strategy = run.strategy;
                        h.lambda = run.lambda;
                        std::optional<SafetyVector> sv;
                        if (run.strategy == Strategy::rrs) sv = read_safety_vector(path("safety/sv.rrst"));
                        std::string cluster_csv = "epoch,centroid_distance,silhouette\n";
                        EpochObserver obs;
                        if (snapshots) {
                          fs::remove_all(path(dir + "/snapshots"));
                          obs = [&](int epoch, const Checkpoint& ck) -> std::string {
                            if (!snap_epochs.count(epoch)) return "";
                            const auto reps = dataset_representations(Inference(ck), dataset("redteam"),
                                                                      Mode::audio_text,
                                                                      "epoch " + std::to_string(epoch));
                            const auto cs = cluster_stats(reps);
                            cluster_csv += std::to_string(epoch) + ',' + fmt(cs.centroid_distance, 6) + ',' +
                                           fmt(cs.silhouette, 6) + '\n';
                            const auto rel = "epoch_" + std::to_string(epoch) + ".reps";
                            write_representations(reps, path(dir + "/snapshots/" + rel));
                            return rel;
                          };
                        }
                        const auto res = finetune(base_ckpt(), dataset(data_name), sv ? &*sv : nullptr, h, obs);
                        fs::remove_all(path(dir + "/ckpt"));
                        save_checkpoint(res.ckpt, path(dir + "/ckpt"));
                        write_file_bytes(path(dir + "/trainlog.csv"), res.log.to_csv());
                        if (snapshots) write_file_bytes(path(dir + "/cluster.csv"), cluster_csv);
                        say("  " + run.name + ": final epoch loss " + fmt(res.log.epochs.back().total, 4));
                      }});
  }

  {
    std::vector<std::string> inputs = {"base", "corpus/redteam"};
    for (const auto& run : runs) inputs.push_back("finetune/" + run.name + "/ckpt");
    nlohmann::json params = {{"n_inferences", spec.n_inferences},
                             {"temperature", spec.sampling.temperature},
                             {"greedy", spec.sampling.greedy},
                             {"seed", spec.seed},
                             {"modes", cfg.entries()["eval.modes"]}};
    stages.push_back({"eval", inputs, {"eval/table.csv", "eval/table.txt", "eval/reports"}, params, [&] {
                        const auto& red = dataset("redteam");
                        std::vector<std::pair<std::string, RedTeamReport>> rows;
                        const auto vanilla = evaluate(base_ckpt(), red, cfg.modes, spec);
                        rows.emplace_back("vanilla", vanilla);
                        for (const auto& run : runs) {
                          const auto ck = load_checkpoint(path("finetune/" + run.name + "/ckpt"));
                          rows.emplace_back(run.name, evaluate(ck, red, cfg.modes, spec, &vanilla));
                          say("  evaluated " + run.name);
                        }
                        std::string csv = report_csv_header(cfg.modes);
                        fs::remove_all(path("eval/reports"));
                        for (const auto& [name, rep] : rows) {
                          csv += report_csv_row(name, rep);
                          write_file_bytes(path("eval/reports/" + name + ".json"), report_to_json(rep).dump(2) + "\n");
                        }
                        write_file_bytes(path("eval/table.csv"), csv);
                        write_file_bytes(path("eval/table.txt"), report_table(rows));
                        say(report_table(rows));
                      }});
  }

  {
    nlohmann::json params = fh_json;
    params["m_list"] = cfg.m_list;
    params["eval_seed"] = spec.seed;
    params["n_inferences"] = spec.n_inferences;
    stages.push_back({"sweep",
                      {"base", "corpus/mirror", "corpus/redteam"},
                      {"sweep/sweep.csv"},
                      params,
                      [&] {
                        FinetuneHyper h = fh;
                        h.strategy = Strategy::rrs;
                        const auto rows = feature_sweep(base_ckpt(), dataset("mirror"), dataset("redteam"),
                                                        cfg.m_list, h, spec);
                        write_file_bytes(path("sweep/sweep.csv"), sweep_csv(rows));
                        say(sweep_csv(rows));
                      }});
  }

  if (std::find(cfg.strategies.begin(), cfg.strategies.end(), Strategy::rrs) != cfg.strategies.end()) {
    std::vector<std::string> outputs;
    for (int e : cfg.snapshot_epochs)
      if (e <= fh.epochs) {
        outputs.push_back("viz/epoch_" + std::to_string(e) + ".svg");
        outputs.push_back("viz/epoch_" + std::to_string(e) + ".csv");
      }
    nlohmann::json params = {{"method", cfg.viz_method},
                             {"perplexity", cfg.tsne.perplexity},
                             {"iters", cfg.tsne.iters},
                             {"seed", sub("viz")},
                             {"mode", "audio-text"},
                             {"prompt", "t"}};
    stages.push_back({"viz", {"finetune/rrs/snapshots"}, outputs, params, [&] {
                        for (int e : cfg.snapshot_epochs) {
                          if (e > fh.epochs) continue;
                          const auto reps =
                              read_representations(path("finetune/rrs/snapshots/epoch_" + std::to_string(e) + ".reps"));
                          Embedding2D emb;
                          if (cfg.viz_method == "pca") {
                            emb = pca_2d(reps);
                          } else {
                            TsneParams tp = cfg.tsne;
                            tp.seed = sub("viz");
                            emb = tsne_2d(reps, tp);
                          }
                          emb.tag = "epoch " + std::to_string(e);
                          emit_scatter(emb, path("viz/epoch_" + std::to_string(e)));
                        }
                        write_file_bytes(path("viz/plot.json"),
                                         nlohmann::json{{"representations", "red-team set, audio-text, prompt t"},
                                                        {"method", cfg.viz_method},
                                                        {"epochs", cfg.snapshot_epochs}}
                                                 .dump(2) +
                                             "\n");
                      }});
  }

  for (const auto& s : stages) {
    // Inputs must match what their producing stage recorded.
    for (const auto& in : s.inputs) {
      const auto recorded = manifest.recorded_output(in);
      if (!fs::exists(path(in))) throw StageFailure(s.name, "missing input artifact " + in);
      if (recorded && *recorded != sha256_tree(path(in)))
        throw StageFailure(s.name, "input artifact " + in + " does not match its recorded hash");
    }
    const auto inputs = manifest.hashes(s.inputs);
    if (manifest.up_to_date(s, inputs)) {
      result.skipped.push_back(s.name);
      say("[skip] " + s.name);
      continue;
    }
    say("[run]  " + s.name);
    const std::string started = detail::utc_now();
    try {
      s.run();
    } catch (const StageFailure&) {
      throw;
    } catch (const std::exception& e) {
      doc["failed_stage"] = s.name;
      manifest.save();
      throw StageFailure(s.name, e.what());
    }
    doc.erase("failed_stage");
    manifest.record(s, inputs, started);
    result.executed.push_back(s.name);
  }
  doc["updated"] = detail::utc_now();
  manifest.save();
  return result;
}

inline PipelineResult run_pipeline(const fs::path& config_path, std::ostream* log = nullptr) {
  return run_pipeline(PipelineConfig::load(config_path), default_run_dir(config_path), log);
}

}  // namespace rrs
