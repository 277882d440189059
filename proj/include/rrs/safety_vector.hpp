#pragma once

// Refusal-logit arithmetic and safety-feature selection.
//
// With logits = W_head * v, moving v by dv moves the refusal logit by
// w_r . dv. Dimensions where w_{r,p} * dv_p > 0 raise it (safety features).
// The safety vector keeps the mean harmful-minus-benign change on the
// top-m% of dimensions ranked by that product and zeroes the rest.

#include "rrs/corpus.hpp"
#include "rrs/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

namespace rrs {

struct DeltaStats {
  Eigen::VectorXd delta;     // mean per-pair difference
  Eigen::VectorXd products;  // w_{r,p} * delta_p
  double positive_fraction = 0;
  std::size_t pairs = 0;
  int refusal_token = Vocabulary::kRefusalToken;
};

struct SafetyVector {
  Eigen::VectorXd delta;  // zero outside mask
  std::vector<int> mask;  // selected dimensions, ordered by decreasing product
  double m = 0;
  std::size_t pairs = 0;
  double positive_fraction = 0;
  int refusal_token = Vocabulary::kRefusalToken;
  std::string source_checkpoint;
};

inline double delta_logit(const HeadRow& w, const Eigen::VectorXd& dv) {
  if (w.weights.size() != dv.size()) throw std::invalid_argument("delta_logit: length mismatch");
  return w.weights.dot(dv);
}

/// Mean of (harmful_i - benign_i) over index-aligned pairs. A harmful rep
/// carrying a mirror id must be paired with the benign rep of that id.
inline DeltaStats mean_delta(const std::vector<Representation>& harmful, const std::vector<Representation>& benign,
                             const HeadRow& w) {
  if (harmful.size() != benign.size()) throw std::invalid_argument("mean_delta: representation counts differ");
  if (harmful.empty()) throw std::invalid_argument("mean_delta: need at least one pair");
  const auto P = w.weights.size();
  DeltaStats s;
  s.refusal_token = w.token;
  s.pairs = harmful.size();
  s.delta = Eigen::VectorXd::Zero(P);
  for (std::size_t i = 0; i < harmful.size(); ++i) {
    if (harmful[i].v.size() != P || benign[i].v.size() != P)
      throw std::invalid_argument("mean_delta: representation length does not match head row");
    if (harmful[i].mirror_id && *harmful[i].mirror_id != benign[i].sample_id)
      throw std::invalid_argument("mean_delta: pair " + std::to_string(i) + " is not mirror-paired (" +
                                  harmful[i].sample_id + " vs " + benign[i].sample_id + ")");
    s.delta += harmful[i].v - benign[i].v;
  }
  s.delta /= static_cast<double>(harmful.size());
  s.products = w.weights.cwiseProduct(s.delta);
  s.positive_fraction = static_cast<double>((s.products.array() > 0).count()) / static_cast<double>(P);
  return s;
}

/// round-half-up of m% of P.
inline std::size_t selection_size(double m, Eigen::Index P) {
  return static_cast<std::size_t>(std::floor(m / 100.0 * static_cast<double>(P) + 0.5));
}

/// Dimension indices ordered by decreasing product, lower index first on ties.
inline std::vector<int> rank_by_product(const Eigen::VectorXd& products) {
  std::vector<int> idx(static_cast<std::size_t>(products.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return products[a] > products[b]; });
  return idx;
}

/// Sum of the k largest products.
inline double top_product_sum(const Eigen::VectorXd& products, std::size_t k) {
  const auto idx = rank_by_product(products);
  double sum = 0;
  for (std::size_t i = 0; i < k && i < idx.size(); ++i) sum += products[idx[i]];
  return sum;
}

inline SafetyVector select_features(const DeltaStats& stats, const HeadRow& w, double m) {
  if (!(m > 0 && m <= 100)) throw std::invalid_argument("select_features: m must be in (0, 100]");
  if (w.weights.size() != stats.delta.size()) throw std::invalid_argument("select_features: length mismatch");
  const Eigen::VectorXd products = w.weights.cwiseProduct(stats.delta);
  const auto order = rank_by_product(products);
  SafetyVector sv;
  sv.m = m;
  sv.pairs = stats.pairs;
  sv.positive_fraction = stats.positive_fraction;
  sv.refusal_token = w.token;
  sv.delta = Eigen::VectorXd::Zero(stats.delta.size());
  const std::size_t k = selection_size(m, stats.delta.size());
  sv.mask.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  for (int p : sv.mask) sv.delta[p] = stats.delta[p];
  return sv;
}

/// harmful -> v + delta, benign -> v - delta.
inline std::vector<Eigen::VectorXd> build_targets(const std::vector<Representation>& reps, const SafetyVector& sv,
                                                  const std::vector<Label>& labels) {
  if (reps.size() != labels.size()) throw std::invalid_argument("build_targets: one label per representation");
  std::vector<Eigen::VectorXd> out;
  out.reserve(reps.size());
  for (std::size_t i = 0; i < reps.size(); ++i) {
    if (reps[i].v.size() != sv.delta.size()) throw std::invalid_argument("build_targets: length mismatch");
    out.push_back(labels[i] == Label::harmful ? Eigen::VectorXd(reps[i].v + sv.delta)
                                              : Eigen::VectorXd(reps[i].v - sv.delta));
  }
  return out;
}

/// Representations for mean_delta: harmful under the directive prompt and
/// their benign mirrors under the extraction prompt, both audio-text.
inline std::pair<std::vector<Representation>, std::vector<Representation>> extraction_pairs(
    const Inference& inf, const AlignmentDataset& mirror, const std::string& tag) {
  if (mirror.variant != Variant::mirror) throw std::invalid_argument("safety extraction needs a Mirror dataset");
  std::vector<const QuerySample*> harmful, benign;
  for (const auto& [h, b] : mirror.mirror_pairs()) {
    harmful.push_back(h);
    benign.push_back(b);
  }
  return {extract_representations(inf, harmful, Mode::audio_text, PromptKind::directive, tag),
          extract_representations(inf, benign, Mode::audio_text, PromptKind::extraction, tag)};
}

inline SafetyVector extract_safety_vector(const Checkpoint& base, const AlignmentDataset& mirror, double m,
                                          int refusal_token = Vocabulary::kRefusalToken) {
  const Inference inf(base);
  const auto [harmful, benign] = extraction_pairs(inf, mirror, to_string(base.stage));
  const HeadRow w = head_row(base, refusal_token);
  SafetyVector sv = select_features(mean_delta(harmful, benign, w), w, m);
  sv.source_checkpoint = checkpoint_id(base);
  return sv;
}

/// Writes <path> (delta as a rank-1 tensor) and <path>.json (selection metadata).
inline void write_safety_vector(const SafetyVector& sv, const std::filesystem::path& path) {
  write_tensor(path, to_tensor(Vector<double>(sv.delta)));
  nlohmann::json j = {{"m", sv.m},
                      {"selected", sv.mask.size()},
                      {"mask", sv.mask},
                      {"refusal_token", sv.refusal_token},
                      {"pairs", sv.pairs},
                      {"positive_fraction", sv.positive_fraction},
                      {"source_checkpoint", sv.source_checkpoint},
                      {"dims", sv.delta.size()}};
  write_file_bytes(path.string() + ".json", j.dump(2) + "\n");
}

inline SafetyVector read_safety_vector(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_file_bytes(path.string() + ".json"));
  SafetyVector sv;
  sv.delta = to_vector<double>(read_tensor(path));
  sv.m = j.at("m");
  sv.mask = j.at("mask").get<std::vector<int>>();
  sv.refusal_token = j.at("refusal_token");
  sv.pairs = j.at("pairs");
  sv.positive_fraction = j.at("positive_fraction");
  sv.source_checkpoint = j.at("source_checkpoint");
  if (sv.mask.size() != j.at("selected").get<std::size_t>() || sv.delta.size() != j.at("dims").get<Eigen::Index>())
    throw FormatError(path.string() + ": safety vector sidecar does not match tensor");
  return sv;
}

}  // namespace rrs
