#pragma once

// Adapter fine-tuning: representation reshaping (RRS) and the supervised
// baselines. Every strategy trains only the low-rank factors on the
// attention projections; theta_0, including the audio encoder, stays fixed.

#include "rrs/corpus.hpp"
#include "rrs/model.hpp"
#include "rrs/optim.hpp"
#include "rrs/pretrain.hpp"
#include "rrs/safety_vector.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace rrs {

enum class Strategy : std::uint8_t { rrs, sft_full, sft_shallow_mirror, sft_shallow_parallel, sft_deep };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::rrs: return "rrs";
    case Strategy::sft_full: return "sft-full";
    case Strategy::sft_shallow_mirror: return "sft-shallow-mirror";
    case Strategy::sft_shallow_parallel: return "sft-shallow-parallel";
    case Strategy::sft_deep: return "sft-deep";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  for (Strategy x : {Strategy::rrs, Strategy::sft_full, Strategy::sft_shallow_mirror, Strategy::sft_shallow_parallel,
                     Strategy::sft_deep})
    if (s == to_string(x)) return x;
  throw std::invalid_argument("unknown strategy: " + s);
}

struct FinetuneHyper {
  Strategy strategy = Strategy::rrs;
  int epochs = 10;
  int batch = 16;
  double lr = 1e-3;
  double lambda = 1.0;
  int prefill_min = 0;
  int prefill_max = 10;
  int rank = 8;
  double alpha = 16.0;
  std::uint64_t seed = 0;

  static constexpr double kReferenceLr = 5e-5;

  void validate() const {
    if (epochs < 1 || batch < 1) throw std::invalid_argument("finetune: epochs and batch must be >= 1");
    if (!(lambda >= 0)) throw std::invalid_argument("finetune: lambda must be >= 0");
    if (prefill_min < 0 || prefill_max < prefill_min) throw std::invalid_argument("finetune: bad prefill range");
  }
};

struct StepLog {
  int epoch = 0;
  int step = 0;
  double data = 0;
  double penalty = 0;
  double total = 0;
};

struct EpochLog {
  int epoch = 0;
  double data = 0;     // means over the epoch's steps
  double penalty = 0;
  double total = 0;
};

struct TrainLog {
  double lambda = 1.0;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::vector<std::pair<int, std::string>> snapshots;  // (epoch, snapshot id)
  std::string target_hash_start;
  std::string target_hash_end;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "epoch,rep_loss,penalty,total\n";
    for (const auto& e : epochs) out << e.epoch << ',' << e.data << ',' << e.penalty << ',' << e.total << '\n';
    return out.str();
  }
};

struct ObjectiveValue {
  double data = 0;
  double penalty = 0;
  double total = 0;
};

// ---------------------------------------------------------------------------
// Objectives

/// Sum over adapted matrices of ||scale * B * A||_F^2.
template <typename T>
double rrs_penalty(const BasicCheckpoint<T>& ck) {
  if (!ck.adapter) throw std::invalid_argument("rrs_penalty: checkpoint has no adapter over a base snapshot");
  double pen = 0;
  for (std::size_t l = 0; l < ck.adapter->layers.size(); ++l)
    for (int i = 0; i < 4; ++i) pen += static_cast<double>(ck.adapter->delta(l, i).squaredNorm());
  return pen;
}

/// Sum of squared L2 distances between rows, plus lambda * penalty.
template <typename T>
double rrs_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, const BasicCheckpoint<T>& ck,
                double lambda) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw std::invalid_argument("rrs_loss: batch shapes differ");
  return (pred - target).squaredNorm() + lambda * rrs_penalty(ck);
}

template <typename T>
struct RepresentationItem {
  ModelInput input;
  Vector<T> target;
};

struct TokenItem {
  ModelInput input;
  std::vector<std::pair<int, int>> targets;  // (row, token)
};

/// Evaluates sum_i item_loss(i) + lambda * penalty on the effective
/// parameters and, when `grad` is non-null, writes d/dA and d/dB into it.
/// item_loss runs the forward pass, fills d_out and returns the input used.
template <typename T, typename ItemLoss>
ObjectiveValue adapter_objective(const BasicCheckpoint<T>& ck, std::size_t n_items, double lambda,
                                 AdapterDelta<T>* grad, ItemLoss&& item_loss) {
  if (!ck.adapter) throw std::invalid_argument("adapter objective needs an attached adapter");
  const auto& ad = *ck.adapter;
  const Params<T> eff = ck.effective_params();
  Params<T> g;
  g.layers.resize(eff.layers.size());
  for (std::size_t l = 0; l < eff.layers.size(); ++l)
    for (int i = 0; i < 4; ++i)
      g.layers[l].attn[static_cast<std::size_t>(i)] =
          Matrix<T>::Zero(eff.layers[l].attn[static_cast<std::size_t>(i)].rows(),
                          eff.layers[l].attn[static_cast<std::size_t>(i)].cols());
  ObjectiveValue val;
  Trace<T> tr;
  Matrix<T> d_out;
  for (std::size_t i = 0; i < n_items; ++i) {
    const ModelInput* in = nullptr;
    val.data += static_cast<double>(item_loss(i, eff, tr, d_out, in));
    if (grad) backward(eff, ck.config, *in, tr, d_out, g, GradScope::attention_only());
  }
  const T s = ad.scale();
  for (std::size_t l = 0; l < ad.layers.size(); ++l)
    for (int i = 0; i < 4; ++i) {
      const Matrix<T> delta = ad.delta(l, i);
      val.penalty += static_cast<double>(delta.squaredNorm());
      if (grad) {
        const auto& f = ad.layers[l][static_cast<std::size_t>(i)];
        const Matrix<T> G = g.layers[l].attn[static_cast<std::size_t>(i)] + static_cast<T>(2 * lambda) * delta;
        auto& gf = grad->layers[l][static_cast<std::size_t>(i)];
        gf.b = s * (G * f.a.transpose());
        gf.a = s * (f.b.transpose() * G);
      }
    }
  val.total = val.data + lambda * val.penalty;
  return val;
}

/// Sum of ||v_final(input) - target||^2 + lambda * penalty.
template <typename T>
ObjectiveValue rrs_objective(const BasicCheckpoint<T>& ck, const std::vector<RepresentationItem<T>>& items,
                             double lambda, AdapterDelta<T>* grad) {
  return adapter_objective(ck, items.size(), lambda, grad,
                           [&](std::size_t i, const Params<T>& eff, Trace<T>& tr, Matrix<T>& d_out,
                               const ModelInput*& in) {
                             in = &items[i].input;
                             forward(eff, ck.config, *in, tr);
                             const auto last = tr.out.rows() - 1;
                             const Vector<T> diff = tr.out.row(last).transpose() - items[i].target;
                             d_out.setZero(tr.out.rows(), tr.out.cols());
                             d_out.row(last) = T(2) * diff.transpose();
                             return diff.squaredNorm();
                           });
}

/// Sum over items of the item's mean cross-entropy + lambda * penalty.
template <typename T>
ObjectiveValue ce_objective(const BasicCheckpoint<T>& ck, const std::vector<TokenItem>& items, double lambda,
                            AdapterDelta<T>* grad) {
  return adapter_objective(ck, items.size(), lambda, grad,
                           [&](std::size_t i, const Params<T>& eff, Trace<T>& tr, Matrix<T>& d_out,
                               const ModelInput*& in) {
                             in = &items[i].input;
                             forward(eff, ck.config, *in, tr);
                             d_out.setZero(tr.out.rows(), tr.out.cols());
                             const T w = T(1) / static_cast<T>(items[i].targets.size());
                             return cross_entropy_rows(eff, tr.out, items[i].targets, w, d_out,
                                                       static_cast<Matrix<T>*>(nullptr));
                           });
}

// ---------------------------------------------------------------------------
// Training loop

struct FinetuneResult {
  Checkpoint ckpt;
  TrainLog log;
};

/// Called with epoch 0 before the first step and after every epoch. A
/// non-empty return value is recorded as that epoch's snapshot id.
using EpochObserver = std::function<std::string(int epoch, const Checkpoint&)>;

/// Produces the objective for one batch; the rng is the run's batch stream.
using BatchObjective = std::function<ObjectiveValue(const std::vector<const QuerySample*>& batch, Rng& rng,
                                                    const Checkpoint& ck, AdapterDelta<Real>* grad)>;

/// Label-stratified batches: half harmful, half benign (harmful takes the
/// odd slot). The shorter label list wraps around within an epoch.
inline FinetuneResult train_adapter(const Checkpoint& base, const std::vector<const QuerySample*>& harmful,
                                    const std::vector<const QuerySample*>& benign, const FinetuneHyper& hyper,
                                    const BatchObjective& objective, const EpochObserver& observer) {
  hyper.validate();
  if (base.stage != Stage::pretrained || base.adapter)
    throw std::invalid_argument("finetune: base must be a pretrained checkpoint without an adapter");
  if (harmful.empty() || benign.empty()) throw std::invalid_argument("finetune: need harmful and benign samples");
  FinetuneResult res;
  res.log.lambda = hyper.lambda;
  res.ckpt = attach_adapter(base, hyper.rank, hyper.alpha, derive_seed(hyper.seed, "finetune/adapter"));
  Checkpoint& ck = res.ckpt;
  AdapterDelta<Real> grad = ck.adapter->zeros_like();
  std::vector<Matrix<Real>*> params;
  std::vector<const Matrix<Real>*> grads;
  for (auto& [name, m] : ck.adapter->tensors()) params.push_back(m);
  for (auto& [name, m] : grad.tensors()) grads.push_back(m);
  Adam<Real> adam(params, {hyper.lr});

  if (observer) {
    const auto id = observer(0, ck);
    if (!id.empty()) res.log.snapshots.emplace_back(0, id);
  }
  Rng rng = make_rng(hyper.seed, "finetune/batches");
  const std::size_t n_harm = static_cast<std::size_t>((hyper.batch + 1) / 2);
  const std::size_t n_ben = static_cast<std::size_t>(hyper.batch) - n_harm;
  const std::size_t steps_per_epoch =
      std::max((harmful.size() + n_harm - 1) / n_harm, n_ben ? (benign.size() + n_ben - 1) / n_ben : 1);
  std::vector<const QuerySample*> h_order = harmful, b_order = benign;
  int step = 0;
  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::shuffle(h_order.begin(), h_order.end(), rng);
    std::shuffle(b_order.begin(), b_order.end(), rng);
    EpochLog el;
    el.epoch = epoch;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<const QuerySample*> batch;
      for (std::size_t j = 0; j < n_harm; ++j) batch.push_back(h_order[(s * n_harm + j) % h_order.size()]);
      for (std::size_t j = 0; j < n_ben; ++j) batch.push_back(b_order[(s * n_ben + j) % b_order.size()]);
      const ObjectiveValue v = objective(batch, rng, ck, &grad);
      if (!std::isfinite(v.total) || !std::isfinite(v.data) || !std::isfinite(v.penalty)) {
        std::ostringstream msg;
        msg << to_string(hyper.strategy) << ": non-finite loss at epoch " << epoch << " step " << s
            << " (data " << v.data << ", penalty " << v.penalty << ")";
        throw TrainingFailure(msg.str());
      }
      adam.step(grads);
      res.log.steps.push_back({epoch, step++, v.data, v.penalty, v.total});
      el.data += v.data;
      el.penalty += v.penalty;
      el.total += v.total;
    }
    const double n = static_cast<double>(steps_per_epoch);
    el.data /= n;
    el.penalty /= n;
    el.total /= n;
    res.log.epochs.push_back(el);
    if (observer) {
      const auto id = observer(epoch, ck);
      if (!id.empty()) res.log.snapshots.emplace_back(epoch, id);
    }
  }
  ck.stage = Stage::finetuned;
  ck.metadata["finetune"] = {{"strategy", to_string(hyper.strategy)}, {"epochs", hyper.epochs},
                             {"batch", hyper.batch},                  {"lr", hyper.lr},
                             {"reference_lr", FinetuneHyper::kReferenceLr},
                             {"lambda", hyper.lambda},                {"rank", hyper.rank},
                             {"alpha", hyper.alpha},                  {"seed", hyper.seed}};
  return res;
}

namespace detail {

inline const std::vector<int>& random_pool_prompt(Rng& rng) {
  return prompt_pool().pool(static_cast<std::size_t>(uniform_int(rng, 0, PromptPool::kPoolSize - 1)));
}

inline void split_labels(const AlignmentDataset& ds, std::vector<const QuerySample*>& harmful,
                         std::vector<const QuerySample*>& benign) {
  harmful = ds.with_label(Label::harmful);
  benign = ds.with_label(Label::benign);
}

}  // namespace detail

/// Frozen RRS targets: base representation under the extraction prompt in
/// audio-text mode, shifted by +delta (harmful) or -delta (benign).
inline std::map<std::string, Vector<Real>> rrs_targets(const Checkpoint& base, const AlignmentDataset& data,
                                                       const SafetyVector& sv) {
  const Inference inf(base);
  std::vector<const QuerySample*> all;
  std::vector<Label> labels;
  for (const auto& s : data.samples) {
    all.push_back(&s);
    labels.push_back(s.label);
  }
  const auto reps = extract_representations(inf, all, Mode::audio_text, PromptKind::extraction, "base");
  const auto targets = build_targets(reps, sv, labels);
  std::map<std::string, Vector<Real>> out;
  for (std::size_t i = 0; i < all.size(); ++i) out.emplace(all[i]->id, targets[i].cast<Real>());
  return out;
}

inline std::string hash_targets(const std::map<std::string, Vector<Real>>& targets) {
  std::string acc;
  for (const auto& [id, v] : targets) acc += id + encode_tensor(to_tensor(v));
  return sha256_hex(acc);
}

inline FinetuneResult rrs_finetune(const Checkpoint& base, const AlignmentDataset& mirror, const SafetyVector& sv,
                                   const FinetuneHyper& hyper, const EpochObserver& observer = {}) {
  if (mirror.variant != Variant::mirror) throw std::invalid_argument("rrs_finetune: data must be a Mirror dataset");
  if (sv.delta.size() != base.config.hidden) throw std::invalid_argument("rrs_finetune: safety vector length != P");
  const auto targets = rrs_targets(base, mirror, sv);
  const std::string hash_start = hash_targets(targets);
  std::vector<const QuerySample*> harmful, benign;
  detail::split_labels(mirror, harmful, benign);
  FinetuneHyper h = hyper;
  h.strategy = Strategy::rrs;
  BatchObjective obj = [&](const std::vector<const QuerySample*>& batch, Rng& rng, const Checkpoint& ck,
                           AdapterDelta<Real>* grad) {
    std::vector<RepresentationItem<Real>> items;
    items.reserve(batch.size());
    for (const auto* s : batch)
      items.push_back({render(*s, Mode::audio_text, detail::random_pool_prompt(rng)), targets.at(s->id)});
    return rrs_objective(ck, items, h.lambda, grad);
  };
  FinetuneResult res = train_adapter(base, harmful, benign, h, obj, observer);
  res.log.target_hash_start = hash_start;
  res.log.target_hash_end = hash_targets(targets);
  if (res.log.target_hash_end != res.log.target_hash_start)
    throw TrainingFailure("rrs_finetune: target vectors changed during training");
  res.ckpt.metadata["finetune"]["safety_vector"] = {{"m", sv.m}, {"source_checkpoint", sv.source_checkpoint}};
  res.ckpt.metadata["finetune"]["target_hash"] = hash_start;
  return res;
}

/// Teacher-forced CE over the whole response: refusal for harmful samples,
/// the category answer for benign ones.
inline FinetuneResult sft_full(const Checkpoint& base, const AlignmentDataset& basic, const FinetuneHyper& hyper,
                               const EpochObserver& observer = {}) {
  for (const auto& s : basic.samples)
    if (s.response.empty()) throw std::invalid_argument("sft_full: sample " + s.id + " has no response");
  std::vector<const QuerySample*> harmful, benign;
  detail::split_labels(basic, harmful, benign);
  FinetuneHyper h = hyper;
  h.strategy = Strategy::sft_full;
  BatchObjective obj = [&](const std::vector<const QuerySample*>& batch, Rng& rng, const Checkpoint& ck,
                           AdapterDelta<Real>* grad) {
    std::vector<TokenItem> items(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
      items[i].input = with_response(render(*batch[i], Mode::audio_text, detail::random_pool_prompt(rng)),
                                     batch[i]->response, items[i].targets);
    return ce_objective(ck, items, h.lambda, grad);
  };
  return train_adapter(base, harmful, benign, h, obj, observer);
}

/// Greedy first token of the base under the extraction prompt, audio-text.
inline std::map<std::string, int> vanilla_prefixes(const Checkpoint& base,
                                                   const std::vector<const QuerySample*>& samples) {
  const Inference inf(base);
  std::map<std::string, int> out;
  for (const auto* s : samples) out[s->id] = inf.greedy(render(*s, Mode::audio_text, prompt_pool().extraction()));
  return out;
}

/// CE on the first response position only: refusal token for harmful
/// samples, the base's own greedy first token for benign ones.
inline FinetuneResult sft_shallow(const Checkpoint& base, const AlignmentDataset& data, const FinetuneHyper& hyper,
                                  const EpochObserver& observer = {}) {
  if (data.variant != Variant::mirror && data.variant != Variant::parallel)
    throw std::invalid_argument("sft_shallow: data must be Mirror or Parallel");
  std::vector<const QuerySample*> harmful, benign;
  detail::split_labels(data, harmful, benign);
  const auto prefixes = vanilla_prefixes(base, benign);
  FinetuneHyper h = hyper;
  h.strategy = data.variant == Variant::mirror ? Strategy::sft_shallow_mirror : Strategy::sft_shallow_parallel;
  BatchObjective obj = [&](const std::vector<const QuerySample*>& batch, Rng& rng, const Checkpoint& ck,
                           AdapterDelta<Real>* grad) {
    std::vector<TokenItem> items(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto* s = batch[i];
      const int target = s->label == Label::harmful ? Vocabulary::kRefusalToken : prefixes.at(s->id);
      items[i].input = with_response(render(*s, Mode::audio_text, detail::random_pool_prompt(rng)), {target},
                                     items[i].targets);
    }
    return ce_objective(ck, items, h.lambda, grad);
  };
  return train_adapter(base, harmful, benign, h, obj, observer);
}

/// Harmful: k ~ U[prefill_min, prefill_max] answer-template tokens are
/// prefilled and the refusal response after them is supervised. Benign:
/// full answer-response CE.
inline FinetuneResult sft_deep(const Checkpoint& base, const AlignmentDataset& mirror, const FinetuneHyper& hyper,
                               const EpochObserver& observer = {}) {
  if (mirror.variant != Variant::mirror) throw std::invalid_argument("sft_deep: data must be a Mirror dataset");
  std::vector<const QuerySample*> harmful, benign;
  detail::split_labels(mirror, harmful, benign);
  FinetuneHyper h = hyper;
  h.strategy = Strategy::sft_deep;
  const auto refusal = Vocabulary::refusal_response();
  BatchObjective obj = [&, refusal](const std::vector<const QuerySample*>& batch, Rng& rng, const Checkpoint& ck,
                                    AdapterDelta<Real>* grad) {
    std::vector<TokenItem> items(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto* s = batch[i];
      ModelInput in = render(*s, Mode::audio_text, detail::random_pool_prompt(rng));
      if (s->label == Label::harmful) {
        const int k = uniform_int(rng, h.prefill_min, h.prefill_max);
        std::vector<int> seq = Vocabulary::answer_prefill(s->category, k);
        seq.insert(seq.end(), refusal.begin(), refusal.end());
        items[i].input = with_response(std::move(in), seq, items[i].targets, k);
      } else {
        items[i].input = with_response(std::move(in), Vocabulary::answer_response(s->category), items[i].targets);
      }
    }
    return ce_objective(ck, items, h.lambda, grad);
  };
  return train_adapter(base, harmful, benign, h, obj, observer);
}

/// Dispatch on hyper.strategy. `data` must match the strategy: Basic for
/// sft-full, Parallel for sft-shallow-parallel, Mirror otherwise.
inline FinetuneResult finetune(const Checkpoint& base, const AlignmentDataset& data, const SafetyVector* sv,
                               const FinetuneHyper& hyper, const EpochObserver& observer = {}) {
  switch (hyper.strategy) {
    case Strategy::rrs:
      if (!sv) throw std::invalid_argument("rrs strategy needs a safety vector");
      return rrs_finetune(base, data, *sv, hyper, observer);
    case Strategy::sft_full:
      if (data.variant != Variant::basic) throw std::invalid_argument("sft-full needs a Basic dataset");
      return sft_full(base, data, hyper, observer);
    case Strategy::sft_shallow_mirror:
      if (data.variant != Variant::mirror) throw std::invalid_argument("sft-shallow-mirror needs a Mirror dataset");
      return sft_shallow(base, data, hyper, observer);
    case Strategy::sft_shallow_parallel:
      if (data.variant != Variant::parallel)
        throw std::invalid_argument("sft-shallow-parallel needs a Parallel dataset");
      return sft_shallow(base, data, hyper, observer);
    case Strategy::sft_deep: return sft_deep(base, data, hyper, observer);
  }
  throw std::invalid_argument("unknown strategy");
}

/// Frobenius norm of all materialised adapter deltas.
template <typename T>
double adapter_delta_norm(const BasicCheckpoint<T>& ck) {
  return ck.adapter ? std::sqrt(rrs_penalty(ck)) : 0.0;
}

}  // namespace rrs
