// Command-line front end: dataset generation, pretraining, inference,
// safety-vector extraction, fine-tuning, evaluation, plots and the full
// pipeline.

#include "rrs/rrs.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace rrs;

namespace {

std::vector<Mode> parse_modes(const std::string& s) {
  if (s == "all") return all_modes();
  std::vector<Mode> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(mode_from_string(cell));
  return out;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

const std::vector<int>& prompt_by_name(const std::string& name) {
  const auto& pool = prompt_pool();
  if (name == "t") return pool.extraction();
  if (name == "t~") return pool.directive();
  if (name == "bos") return pool.get(PromptKind::minimal);
  if (name.rfind("pool:", 0) == 0) return pool.pool(std::stoul(name.substr(5)));
  throw std::invalid_argument("unknown prompt '" + name + "' (t, t~, bos, pool:N)");
}

PromptKind prompt_kind(const std::string& name) {
  if (name == "t") return PromptKind::extraction;
  if (name == "t~") return PromptKind::directive;
  if (name == "bos") return PromptKind::minimal;
  return PromptKind::pool;
}

/// {"ids": [...], "frames": [[...], ...]} with -1 marking audio slots.
ModelInput read_input_json(const fs::path& path) {
  const auto j = nlohmann::json::parse(read_file_bytes(path));
  ModelInput in;
  in.ids = j.at("ids").get<std::vector<int>>();
  const auto frames = j.value("frames", std::vector<std::vector<float>>{});
  in.frames.resize(static_cast<Eigen::Index>(frames.size()), frames.empty() ? kAudioDim : static_cast<Eigen::Index>(frames[0].size()));
  for (std::size_t r = 0; r < frames.size(); ++r)
    for (std::size_t c = 0; c < frames[r].size(); ++c) in.frames(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = frames[r][c];
  return in;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representation-reshaping safety laboratory"};
  app.require_subcommand(1);
  std::string stage = "cli";

  // corpus gen
  auto* corpus = app.add_subcommand("corpus", "Synthetic datasets");
  corpus->require_subcommand(1);
  auto* gen = corpus->add_subcommand("gen", "Generate a dataset");
  std::string variant = "mirror", out, mirror_dir;
  int n_per_category = 50, n_pairs = 1400, n_harmful = 350, n_benign = 350;
  std::uint64_t seed = 0;
  gen->add_option("--variant", variant, "basic | mirror | parallel | redteam")->required();
  gen->add_option("--n-per-category", n_per_category, "Mirror: queries per category");
  gen->add_option("--n-pairs", n_pairs, "Basic: number of samples");
  gen->add_option("--n-harmful", n_harmful, "RedTeam: harmful queries");
  gen->add_option("--n-benign", n_benign, "RedTeam: benign queries");
  gen->add_option("--mirror", mirror_dir, "Parallel: source Mirror dataset directory");
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();
  gen->callback([&] {
    stage = "corpus gen";
    AlignmentDataset ds;
    switch (variant_from_string(variant)) {
      case Variant::mirror: ds = gen_mirror(n_per_category, seed); break;
      case Variant::parallel:
        if (mirror_dir.empty()) throw std::invalid_argument("--mirror is required for the parallel variant");
        ds = gen_parallel(read_dataset(mirror_dir), seed);
        break;
      case Variant::basic: ds = gen_basic(n_pairs, seed); break;
      case Variant::redteam: ds = gen_redteam(n_harmful, n_benign, seed); break;
    }
    write_dataset(ds, out);
    std::cout << "wrote " << ds.samples.size() << " samples (" << ds.count(Label::harmful) << " harmful, "
              << ds.count(Label::benign) << " benign) to " << out << "\n";
  });

  // model pretrain / infer / reps
  auto* model = app.add_subcommand("model", "Toy model");
  model->require_subcommand(1);
  auto* pre = model->add_subcommand("pretrain", "Train the misaligned base");
  std::string config_path;
  pre->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", out)->required();
  pre->callback([&] {
    stage = "model pretrain";
    const auto cfg = PipelineConfig::load(config_path);
    const auto mirror = gen_mirror(cfg.n_per_category, derive_seed(cfg.seed, "corpus/mirror"));
    const auto basic = gen_basic(cfg.basic_pairs, derive_seed(cfg.seed, "corpus/basic"));
    const auto gate = gen_redteam(cfg.gate_harmful, 0, derive_seed(cfg.seed, "corpus/gate"));
    const auto ck = pretrain({&mirror, &basic}, cfg.model, cfg.pretrain, derive_seed(cfg.seed, "pretrain"), gate,
                             nullptr, [](int e, const GateMetrics& g) {
                               std::cout << "epoch " << e << ": answer " << fmt(100 * g.answer_rate)
                                         << "%, directive refusal " << fmt(100 * g.directive_refusal_rate) << "%\n";
                             });
    save_checkpoint(ck, out);
    std::cout << "checkpoint " << checkpoint_id(ck) << " -> " << out << "\n";
  });

  auto* infer = model->add_subcommand("infer", "First-token inference");
  std::string ckpt_dir, input_path, data_dir, sample_id, modality = "audio-text", prompt = "t", decode = "greedy";
  double temperature = 1.0;
  infer->add_option("--ckpt", ckpt_dir)->required();
  infer->add_option("--input", input_path, "JSON {ids, frames}; -1 ids are audio slots");
  infer->add_option("--data", data_dir, "Dataset directory (with --sample)");
  infer->add_option("--sample", sample_id);
  infer->add_option("--modality", modality, "audio-text | text-only | audio-only");
  infer->add_option("--prompt", prompt, "t | t~ | bos | pool:N");
  infer->add_option("--mode", decode, "greedy | sample");
  infer->add_option("--temperature", temperature);
  infer->add_option("--seed", seed);
  infer->callback([&] {
    stage = "model infer";
    const auto ck = load_checkpoint(ckpt_dir);
    ModelInput in;
    if (!input_path.empty()) {
      in = read_input_json(input_path);
    } else if (!data_dir.empty() && !sample_id.empty()) {
      in = render(read_dataset(data_dir).by_id(sample_id), mode_from_string(modality), prompt_by_name(prompt));
    } else {
      throw std::invalid_argument("give --input, or --data with --sample");
    }
    const Sampling s = decode == "greedy" ? Sampling::argmax() : Sampling::with_temperature(temperature);
    Rng rng = make_rng(seed, "cli/infer");
    const auto fr = forward(in, ck);
    const int tok = generate_first_token(in, ck, s, rng);
    nlohmann::json j = {{"token", tok},
                        {"refusal", tok == Vocabulary::kRefusalToken},
                        {"logit_refusal", fr.logits[Vocabulary::kRefusalToken]},
                        {"logit_token", fr.logits[tok]}};
    std::cout << j.dump(2) << "\n";
  });

  auto* reps = model->add_subcommand("reps", "Extract last-position representations of a dataset");
  reps->add_option("--ckpt", ckpt_dir)->required();
  reps->add_option("--data", data_dir)->required();
  reps->add_option("--modality", modality);
  reps->add_option("--prompt", prompt, "t | t~ | bos | pool:N");
  reps->add_option("--out", out)->required();
  reps->callback([&] {
    stage = "model reps";
    const auto ck = load_checkpoint(ckpt_dir);
    const auto ds = read_dataset(data_dir);
    const Inference inf(ck);
    std::vector<Representation> rs;
    for (const auto& s : ds.samples) {
      Representation r;
      r.v = inf.representation(render(s, mode_from_string(modality), prompt_by_name(prompt))).cast<double>();
      r.sample_id = s.id;
      r.mirror_id = s.mirror_id;
      r.label = s.label;
      r.prompt = prompt_kind(prompt);
      r.checkpoint_tag = to_string(ck.stage);
      rs.push_back(std::move(r));
    }
    write_representations(rs, out);
    std::cout << "wrote " << rs.size() << " representations to " << out << "\n";
  });

  // safety extract
  auto* safety = app.add_subcommand("safety", "Safety vectors");
  safety->require_subcommand(1);
  auto* extract = safety->add_subcommand("extract", "Mean-difference safety vector");
  double m = 51;
  int refusal = Vocabulary::kRefusalToken;
  extract->add_option("--ckpt", ckpt_dir)->required();
  extract->add_option("--mirror", mirror_dir)->required();
  extract->add_option("--m", m, "Percent of dimensions kept");
  extract->add_option("--refusal-token", refusal);
  extract->add_option("--out", out)->required();
  extract->callback([&] {
    stage = "safety extract";
    const auto sv = extract_safety_vector(load_checkpoint(ckpt_dir), read_dataset(mirror_dir), m, refusal);
    write_safety_vector(sv, out);
    std::cout << "kept " << sv.mask.size() << " of " << sv.delta.size() << " dimensions (positive fraction "
              << fmt(sv.positive_fraction, 4) << ") -> " << out << "\n";
  });

  // finetune
  auto* ft = app.add_subcommand("finetune", "Adapter fine-tuning");
  std::string strategy = "rrs", base_dir, sv_path;
  FinetuneHyper fh;
  ft->add_option("--strategy", strategy, "rrs | sft-full | sft-shallow-mirror | sft-shallow-parallel | sft-deep");
  ft->add_option("--base", base_dir)->required();
  ft->add_option("--data", data_dir)->required();
  ft->add_option("--safety-vector", sv_path);
  ft->add_option("--lambda", fh.lambda);
  ft->add_option("--epochs", fh.epochs);
  ft->add_option("--batch", fh.batch);
  ft->add_option("--lr", fh.lr);
  ft->add_option("--seed", fh.seed);
  ft->add_option("--out", out)->required();
  ft->callback([&] {
    stage = "finetune";
    fh.strategy = strategy_from_string(strategy);
    std::optional<SafetyVector> sv;
    if (!sv_path.empty()) sv = read_safety_vector(sv_path);
    const auto res = finetune(load_checkpoint(base_dir), read_dataset(data_dir), sv ? &*sv : nullptr, fh);
    save_checkpoint(res.ckpt, out);
    write_file_bytes(fs::path(out) / "trainlog.csv", res.log.to_csv());
    std::cout << res.log.to_csv();
  });

  // eval redteam / sweep
  auto* ev = app.add_subcommand("eval", "Red-team evaluation");
  ev->require_subcommand(1);
  auto* rt = ev->add_subcommand("redteam", "ASR / ORR / NSI report");
  std::string baseline_path, set_dir, modes = "all";
  int n_inferences = 5;
  rt->add_option("--ckpt", ckpt_dir)->required();
  rt->add_option("--baseline-report", baseline_path, "report.json of the vanilla checkpoint");
  rt->add_option("--set", set_dir)->required();
  rt->add_option("--modes", modes);
  rt->add_option("--n", n_inferences, "Inferences per query");
  rt->add_option("--temperature", temperature);
  rt->add_option("--seed", seed);
  rt->add_option("--out", out)->required();
  rt->callback([&] {
    stage = "eval redteam";
    EvalSpec spec{Sampling::with_temperature(temperature), n_inferences, seed};
    std::optional<RedTeamReport> baseline;
    if (!baseline_path.empty()) baseline = report_from_json(nlohmann::json::parse(read_file_bytes(baseline_path)));
    const auto rep = evaluate(load_checkpoint(ckpt_dir), read_dataset(set_dir), parse_modes(modes), spec,
                              baseline ? &*baseline : nullptr);
    write_file_bytes(fs::path(out) / "report.json", report_to_json(rep).dump(2) + "\n");
    write_file_bytes(fs::path(out) / "report.csv", report_csv_header(rep.modes) + report_csv_row("checkpoint", rep));
    const auto table = report_table({{"checkpoint", rep}});
    write_file_bytes(fs::path(out) / "report.txt", table);
    std::cout << table;
  });

  auto* sw = ev->add_subcommand("sweep", "Feature-fraction sweep");
  std::string m_list = "12.5,25,51";
  sw->add_option("--base", base_dir)->required();
  sw->add_option("--mirror", mirror_dir)->required();
  sw->add_option("--set", set_dir)->required();
  sw->add_option("--m-list", m_list);
  sw->add_option("--epochs", fh.epochs);
  sw->add_option("--batch", fh.batch);
  sw->add_option("--lambda", fh.lambda);
  sw->add_option("--seed", seed);
  sw->add_option("--out", out)->required();
  sw->callback([&] {
    stage = "eval sweep";
    fh.seed = seed;
    EvalSpec spec;
    spec.seed = seed;
    const auto rows = feature_sweep(load_checkpoint(base_dir), read_dataset(mirror_dir), read_dataset(set_dir),
                                    parse_list(m_list), fh, spec);
    write_file_bytes(fs::path(out) / "sweep.csv", sweep_csv(rows));
    std::cout << sweep_csv(rows);
  });

  // viz
  auto* viz = app.add_subcommand("viz", "2D scatter of a representation file");
  std::string reps_path, method = "tsne", tag;
  TsneParams tp;
  viz->add_option("--reps", reps_path)->required();
  viz->add_option("--method", method, "tsne | pca");
  viz->add_option("--perplexity", tp.perplexity);
  viz->add_option("--iters", tp.iters);
  viz->add_option("--seed", tp.seed);
  viz->add_option("--tag", tag, "Title tag, e.g. 'epoch 3'");
  viz->add_option("--out", out)->required();
  viz->callback([&] {
    stage = "viz";
    const auto rs = read_representations(reps_path);
    Embedding2D emb;
    if (method == "pca") emb = pca_2d(rs);
    else if (method == "tsne") emb = tsne_2d(rs, tp);
    else throw std::invalid_argument("unknown method " + method);
    emb.tag = tag;
    emit_scatter(emb, fs::path(out) / "scatter");
    std::cout << "wrote " << (fs::path(out) / "scatter.svg").string() << "\n";
  });

  // pipeline run
  auto* pipe = app.add_subcommand("pipeline", "Full reproduction");
  pipe->require_subcommand(1);
  auto* run = pipe->add_subcommand("run", "Run or resume every stage");
  std::string run_dir;
  run->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  run->add_option("--run-dir", run_dir, "Defaults to $RRS_RUN_ROOT/<config name>");
  run->callback([&] {
    stage = "pipeline";
    const auto cfg = PipelineConfig::load(config_path);
    const auto res = run_pipeline(cfg, run_dir.empty() ? default_run_dir(config_path) : fs::path(run_dir), &std::cout);
    std::cout << "run directory: " << res.run_dir.string() << " (" << res.executed.size() << " stages run, "
              << res.skipped.size() << " up to date)\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StageFailure& e) {
    std::cerr << "error [" << e.stage() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
