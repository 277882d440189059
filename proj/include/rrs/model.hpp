#pragma once

// Tiny decoder-style sequence model with a linear modality encoder.
//
// Each position is either a token embedding or an encoded audio frame
// (W_enc * frame + b_enc), plus a learned position embedding. Blocks are
// pre-norm: h = x + Attn(LN1(x)), y = h + FF(LN2(h)). There is no final norm,
// so the last layer's output at the final position is the representation v
// and logits = W_head * v exactly.

#include "rrs/common.hpp"
#include "rrs/corpus.hpp"
#include "rrs/input.hpp"
#include "rrs/rng.hpp"
#include "rrs/tensor_io.hpp"
#include "rrs/vocab.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rrs {

struct ModelConfig {
  int hidden = 64;
  int layers = 2;
  int heads = 4;
  int ff = 128;
  int vocab = Vocabulary::kSize;
  int audio_dim = kAudioDim;
  int max_positions = 48;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden / heads; }

  void validate() const {
    if (hidden <= 0 || vocab <= 0 || layers <= 0 || heads <= 0 || ff <= 0 || audio_dim <= 0 || max_positions <= 0)
      throw std::invalid_argument("model config: sizes must be positive");
    if (hidden % heads != 0) throw std::invalid_argument("model config: hidden size must be divisible by heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"hidden", c.hidden}, {"layers", c.layers},       {"heads", c.heads},
       {"ff", c.ff},         {"vocab", c.vocab},         {"audio_dim", c.audio_dim},
       {"max_positions", c.max_positions}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.hidden = j.at("hidden");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.ff = j.at("ff");
  c.vocab = j.at("vocab");
  c.audio_dim = j.at("audio_dim");
  c.max_positions = j.at("max_positions");
  c.seed = j.at("seed");
}

enum class Proj : int { q = 0, k = 1, v = 2, o = 3 };
inline constexpr std::array<const char*, 4> kProjNames = {"q", "k", "v", "o"};

template <typename T>
struct LayerParams {
  Matrix<T> ln1_gain, ln1_bias;  // 1 x P
  std::array<Matrix<T>, 4> attn;  // q, k, v, o; each P x P, (out x in)
  Matrix<T> ln2_gain, ln2_bias;
  Matrix<T> ff_in, ff_in_bias;    // FF x P, 1 x FF
  Matrix<T> ff_out, ff_out_bias;  // P x FF, 1 x P
};

template <typename T>
struct Params {
  Matrix<T> tok_emb;     // K x P
  Matrix<T> pos_emb;     // max_positions x P
  Matrix<T> enc_weight;  // P x F
  Matrix<T> enc_bias;    // 1 x P
  std::vector<LayerParams<T>> layers;
  Matrix<T> head;  // K x P

  /// Named tensors in a fixed order.
  template <typename Self>
  static auto named(Self& self) {
    using M = std::conditional_t<std::is_const_v<Self>, const Matrix<T>, Matrix<T>>;
    std::vector<std::pair<std::string, M*>> out;
    out.emplace_back("embed.tokens", &self.tok_emb);
    out.emplace_back("embed.positions", &self.pos_emb);
    out.emplace_back("encoder.weight", &self.enc_weight);
    out.emplace_back("encoder.bias", &self.enc_bias);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gain", &L.ln1_gain);
      out.emplace_back(p + "ln1.bias", &L.ln1_bias);
      for (int i = 0; i < 4; ++i) out.emplace_back(p + "attn." + kProjNames[i], &L.attn[i]);
      out.emplace_back(p + "ln2.gain", &L.ln2_gain);
      out.emplace_back(p + "ln2.bias", &L.ln2_bias);
      out.emplace_back(p + "ff.in", &L.ff_in);
      out.emplace_back(p + "ff.in_bias", &L.ff_in_bias);
      out.emplace_back(p + "ff.out", &L.ff_out);
      out.emplace_back(p + "ff.out_bias", &L.ff_out_bias);
    }
    out.emplace_back("head", &self.head);
    return out;
  }
  auto tensors() { return named(*this); }
  auto tensors() const { return named(*this); }

  Params zeros_like() const {
    Params z = *this;
    for (auto& [name, m] : z.tensors()) m->setZero();
    return z;
  }

  template <typename U>
  Params<U> cast() const {
    Params<U> out;
    out.layers.resize(layers.size());
    auto dst = out.tensors();
    auto src = tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
  }
};

inline bool is_encoder_tensor(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

inline bool is_attention_projection(const std::string& name) { return name.find(".attn.") != std::string::npos; }

template <typename T>
Params<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, "model/init");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](int rows, int cols, double std) {
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * normal(rng));
    return m;
  };
  const int P = cfg.hidden;
  Params<T> p;
  p.tok_emb = randn(cfg.vocab, P, 0.5);
  p.pos_emb = randn(cfg.max_positions, P, 0.1);
  p.enc_weight = randn(P, cfg.audio_dim, 1.0 / std::sqrt(double(cfg.audio_dim)));
  p.enc_bias = Matrix<T>::Zero(1, P);
  const double proj_std = 1.0 / std::sqrt(double(P));
  const double out_std = proj_std / std::sqrt(2.0 * cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerParams<T> L;
    L.ln1_gain = Matrix<T>::Ones(1, P);
    L.ln1_bias = Matrix<T>::Zero(1, P);
    for (int i = 0; i < 3; ++i) L.attn[i] = randn(P, P, proj_std);
    L.attn[3] = randn(P, P, out_std);
    L.ln2_gain = Matrix<T>::Ones(1, P);
    L.ln2_bias = Matrix<T>::Zero(1, P);
    L.ff_in = randn(cfg.ff, P, proj_std);
    L.ff_in_bias = Matrix<T>::Zero(1, cfg.ff);
    L.ff_out = randn(P, cfg.ff, out_std * std::sqrt(double(P) / cfg.ff));
    L.ff_out_bias = Matrix<T>::Zero(1, P);
    p.layers.push_back(std::move(L));
  }
  p.head = randn(cfg.vocab, P, proj_std);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct LayerTrace {
  Matrix<T> x;
  Matrix<T> xhat1;
  Vector<T> rstd1;
  Matrix<T> a;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // per head, n x n, zero above the diagonal
  Matrix<T> ctx;
  Matrix<T> h;
  Matrix<T> xhat2;
  Vector<T> rstd2;
  Matrix<T> b;
  Matrix<T> u, g;
};

template <typename T>
struct Trace {
  std::vector<LayerTrace<T>> layers;
  Matrix<T> out;  // last layer output, n x P
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
void layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& xhat,
                        Vector<T>& rstd, Matrix<T>& y) {
  const auto n = x.rows();
  xhat.resize(n, x.cols());
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    auto centered = (x.row(r).array() - mean).eval();
    const T var = centered.square().mean();
    rstd[r] = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = centered * rstd[r];
  }
  y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

template <typename T>
void layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const Vector<T>& rstd, const Matrix<T>& gain,
                         Matrix<T>* dgain, Matrix<T>* dbias, Matrix<T>& dx) {
  if (dgain) dgain->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (dbias) dbias->row(0) += dy.colwise().sum();
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    auto dxhat = (dy.row(r).array() * gain.row(0).array()).eval();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * xhat.row(r).array()).mean();
    dx.row(r).array() += rstd[r] * (dxhat - m1 - xhat.row(r).array() * m2);
  }
}

template <typename T>
T gelu(T u) {
  const T c = T(kGeluC);
  return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T c = T(kGeluC);
  const T t = std::tanh(c * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * u * u);
}

}  // namespace detail

template <typename T>
Matrix<T> embed(const Params<T>& p, const ModelConfig& cfg, const ModelInput& in) {
  const auto n = static_cast<Eigen::Index>(in.size());
  if (n == 0) throw std::invalid_argument("empty model input");
  if (n > cfg.max_positions)
    throw std::invalid_argument("input length " + std::to_string(n) + " exceeds max positions " +
                                std::to_string(cfg.max_positions));
  if (static_cast<Eigen::Index>(in.audio_count()) != in.frames.rows())
    throw std::invalid_argument("audio slot count does not match frame count");
  if (in.frames.rows() > 0 && in.frames.cols() != cfg.audio_dim)
    throw std::invalid_argument("audio frame width does not match model config");
  Matrix<T> x(n, cfg.hidden);
  Eigen::Index frame = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = in.ids[static_cast<std::size_t>(i)];
    if (id == kAudioSlot) {
      x.row(i) = (p.enc_weight * in.frames.row(frame++).transpose().template cast<T>()).transpose() + p.enc_bias;
    } else {
      if (id < 0 || id >= cfg.vocab) throw std::invalid_argument("token id out of range: " + std::to_string(id));
      x.row(i) = p.tok_emb.row(id);
    }
    x.row(i) += p.pos_emb.row(i);
  }
  return x;
}

template <typename T>
void forward(const Params<T>& p, const ModelConfig& cfg, const ModelInput& in, Trace<T>& tr) {
  Matrix<T> x = embed(p, cfg, in);
  const auto n = x.rows();
  const int H = cfg.heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(dh));
  tr.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& t = tr.layers[l];
    t.x = std::move(x);
    detail::layer_norm_forward(t.x, L.ln1_gain, L.ln1_bias, t.xhat1, t.rstd1, t.a);
    t.q.noalias() = t.a * L.attn[0].transpose();
    t.k.noalias() = t.a * L.attn[1].transpose();
    t.v.noalias() = t.a * L.attn[2].transpose();
    t.ctx.resize(n, cfg.hidden);
    t.probs.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      auto& pm = t.probs[static_cast<std::size_t>(h)];
      pm.noalias() = (t.q.middleCols(h * dh, dh) * t.k.middleCols(h * dh, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = pm.row(i).head(i + 1);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
        pm.row(i).tail(n - i - 1).setZero();
      }
      t.ctx.middleCols(h * dh, dh).noalias() = pm * t.v.middleCols(h * dh, dh);
    }
    t.h = t.x;
    t.h.noalias() += t.ctx * L.attn[3].transpose();
    detail::layer_norm_forward(t.h, L.ln2_gain, L.ln2_bias, t.xhat2, t.rstd2, t.b);
    t.u.noalias() = t.b * L.ff_in.transpose();
    t.u.rowwise() += L.ff_in_bias.row(0);
    t.g = t.u.unaryExpr([](T z) { return detail::gelu(z); });
    x = t.h;
    x.noalias() += t.g * L.ff_out.transpose();
    x.rowwise() += L.ff_out_bias.row(0);
  }
  tr.out = std::move(x);
}

/// Which parameter gradients backward() accumulates. Activation gradients
/// always flow through every layer that has trainable tensors below it.
struct GradScope {
  bool embeddings = true;
  bool encoder = true;
  bool norms = true;
  bool attention = true;
  bool feed_forward = true;
  bool head = true;

  static GradScope all() { return {}; }
  static GradScope attention_only() { return {false, false, false, true, false, false}; }
};

template <typename T>
void backward(const Params<T>& p, const ModelConfig& cfg, const ModelInput& in, const Trace<T>& tr,
              const Matrix<T>& d_out, Params<T>& g, const GradScope& scope) {
  const auto n = d_out.rows();
  const int H = cfg.heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(dh));
  const bool need_input_grad = scope.embeddings || scope.encoder;
  Matrix<T> dy = d_out;
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    auto& G = g.layers[li];
    const auto& t = tr.layers[li];

    // Feed-forward sublayer.
    Matrix<T> dh_ = dy;
    if (scope.feed_forward) {
      G.ff_out.noalias() += dy.transpose() * t.g;
      G.ff_out_bias.row(0) += dy.colwise().sum();
    }
    Matrix<T> du = dy * L.ff_out;
    du.array() *= t.u.unaryExpr([](T z) { return detail::gelu_grad(z); }).array();
    if (scope.feed_forward) {
      G.ff_in.noalias() += du.transpose() * t.b;
      G.ff_in_bias.row(0) += du.colwise().sum();
    }
    Matrix<T> db = du * L.ff_in;
    detail::layer_norm_backward(db, t.xhat2, t.rstd2, L.ln2_gain, scope.norms ? &G.ln2_gain : nullptr,
                                scope.norms ? &G.ln2_bias : nullptr, dh_);

    // Attention sublayer.
    if (scope.attention) G.attn[3].noalias() += dh_.transpose() * t.ctx;
    Matrix<T> dctx = dh_ * L.attn[3];
    Matrix<T> dq(n, cfg.hidden), dk(n, cfg.hidden), dv(n, cfg.hidden);
    for (int h = 0; h < H; ++h) {
      const auto& pm = t.probs[static_cast<std::size_t>(h)];
      const auto dc = dctx.middleCols(h * dh, dh);
      Matrix<T> dp = dc * t.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = pm.transpose() * dc;
      Vector<T> rs = (dp.array() * pm.array()).rowwise().sum();
      Matrix<T> ds = (pm.array() * (dp.array().colwise() - rs.array())).matrix() * scale;
      dq.middleCols(h * dh, dh).noalias() = ds * t.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * t.q.middleCols(h * dh, dh);
    }
    if (scope.attention) {
      G.attn[0].noalias() += dq.transpose() * t.a;
      G.attn[1].noalias() += dk.transpose() * t.a;
      G.attn[2].noalias() += dv.transpose() * t.a;
    }
    const bool need_dx = li > 0 || need_input_grad;
    const bool need_ln1 = need_dx || scope.norms;
    if (need_ln1) {
      Matrix<T> da = dq * L.attn[0];
      da.noalias() += dk * L.attn[1];
      da.noalias() += dv * L.attn[2];
      Matrix<T> dx = dh_;
      detail::layer_norm_backward(da, t.xhat1, t.rstd1, L.ln1_gain, scope.norms ? &G.ln1_gain : nullptr,
                                  scope.norms ? &G.ln1_bias : nullptr, dx);
      dy = std::move(dx);
    }
    if (!need_dx) return;
  }
  Eigen::Index frame = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = in.ids[static_cast<std::size_t>(i)];
    if (scope.embeddings) g.pos_emb.row(i) += dy.row(i);
    if (id == kAudioSlot) {
      if (scope.encoder) {
        g.enc_weight.noalias() += dy.row(i).transpose() * in.frames.row(frame).template cast<T>();
        g.enc_bias.row(0) += dy.row(i);
      }
      ++frame;
    } else if (scope.embeddings) {
      g.tok_emb.row(id) += dy.row(i);
    }
  }
}

/// Softmax cross-entropy of head logits at the given (row, token) targets.
/// Accumulates weight * dCE into d_out (and d_head when non-null); returns
/// weight * sum of CE.
template <typename T>
T cross_entropy_rows(const Params<T>& p, const Matrix<T>& out, const std::vector<std::pair<int, int>>& targets,
                     T weight, Matrix<T>& d_out, Matrix<T>* d_head) {
  T loss = 0;
  for (const auto& [row, token] : targets) {
    Vector<T> logits = p.head * out.row(row).transpose();
    const T mx = logits.maxCoeff();
    Vector<T> e = (logits.array() - mx).exp().matrix();
    const T z = e.sum();
    loss += weight * (std::log(z) + mx - logits[token]);
    Vector<T> d = e / z;
    d[token] -= T(1);
    d *= weight;
    d_out.row(row) += (p.head.transpose() * d).transpose();
    if (d_head) d_head->noalias() += d * out.row(row);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Low-rank adapters and checkpoints

template <typename T>
struct LoraFactors {
  Matrix<T> a;  // r x in
  Matrix<T> b;  // out x r
};

/// Low-rank deltas on the four attention projections of every layer.
template <typename T>
struct AdapterDelta {
  int rank = 8;
  double alpha = 16.0;
  std::vector<std::array<LoraFactors<T>, 4>> layers;

  T scale() const { return static_cast<T>(alpha / rank); }
  Matrix<T> delta(std::size_t layer, int proj) const {
    const auto& f = layers[layer][static_cast<std::size_t>(proj)];
    return scale() * (f.b * f.a);
  }

  auto tensors() {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (int i = 0; i < 4; ++i) {
        const std::string p = "adapter.layers." + std::to_string(l) + ".attn." + kProjNames[i];
        out.emplace_back(p + ".A", &layers[l][i].a);
        out.emplace_back(p + ".B", &layers[l][i].b);
      }
    return out;
  }
  auto tensors() const { return const_cast<AdapterDelta*>(this)->tensors(); }

  AdapterDelta zeros_like() const {
    AdapterDelta z = *this;
    for (auto& [name, m] : z.tensors()) m->setZero();
    return z;
  }
};

enum class Stage : std::uint8_t { random, pretrained, finetuned };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::random: return "random";
    case Stage::pretrained: return "pretrained";
    case Stage::finetuned: return "finetuned";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  if (s == "random") return Stage::random;
  if (s == "pretrained") return Stage::pretrained;
  if (s == "finetuned") return Stage::finetuned;
  throw std::invalid_argument("unknown stage: " + s);
}

/// Model parameters plus an optional adapter. When an adapter is attached,
/// `params` is the frozen base snapshot and base_id names it.
template <typename T>
struct BasicCheckpoint {
  ModelConfig config;
  Stage stage = Stage::random;
  Params<T> params;
  std::optional<AdapterDelta<T>> adapter;
  std::string base_id;
  nlohmann::json metadata = nlohmann::json::object();

  /// theta_0 + scale * B * A on adapted matrices, theta_0 elsewhere.
  Params<T> effective_params() const {
    Params<T> p = params;
    if (adapter) apply_adapter(*adapter, p);
    return p;
  }

  static void apply_adapter(const AdapterDelta<T>& ad, Params<T>& p) {
    for (std::size_t l = 0; l < ad.layers.size(); ++l)
      for (int i = 0; i < 4; ++i) p.layers[l].attn[static_cast<std::size_t>(i)] += ad.delta(l, i);
  }
};

using Checkpoint = BasicCheckpoint<Real>;

/// Content id: SHA-256 prefix over the config and all tensors.
template <typename T>
std::string checkpoint_id(const BasicCheckpoint<T>& ck) {
  std::string acc = nlohmann::json(ck.config).dump();
  for (const auto& [name, m] : ck.params.tensors()) acc += name + encode_tensor(to_tensor(*m));
  if (ck.adapter)
    for (const auto& [name, m] : ck.adapter->tensors()) acc += name + encode_tensor(to_tensor(*m));
  return sha256_hex(acc).substr(0, 16);
}

template <typename T>
BasicCheckpoint<T> make_random_checkpoint(const ModelConfig& cfg) {
  BasicCheckpoint<T> ck;
  ck.config = cfg;
  ck.params = init_params<T>(cfg, cfg.seed);
  return ck;
}

/// Attaches a zero-initialised (B = 0) low-rank adapter. The encoder,
/// embeddings, norms, feed-forward and head receive no adapter entries.
template <typename T>
BasicCheckpoint<T> attach_adapter(const BasicCheckpoint<T>& ck, int rank, double alpha, std::uint64_t seed) {
  if (ck.adapter) throw std::invalid_argument("attach_adapter: checkpoint already has an adapter");
  if (ck.stage != Stage::pretrained) throw std::invalid_argument("attach_adapter: checkpoint is not pretrained");
  if (rank <= 0) throw std::invalid_argument("attach_adapter: rank must be positive");
  BasicCheckpoint<T> out = ck;
  out.base_id = checkpoint_id(ck);
  AdapterDelta<T> ad;
  ad.rank = rank;
  ad.alpha = alpha;
  Rng rng = make_rng(seed, "adapter/init");
  const int P = ck.config.hidden;
  const double bound = 1.0 / std::sqrt(double(P));
  std::uniform_real_distribution<double> uni(-bound, bound);
  ad.layers.resize(static_cast<std::size_t>(ck.config.layers));
  for (auto& layer : ad.layers)
    for (auto& f : layer) {
      f.a.resize(rank, P);
      for (Eigen::Index i = 0; i < f.a.size(); ++i) f.a.data()[i] = static_cast<T>(uni(rng));
      f.b = Matrix<T>::Zero(P, rank);
    }
  out.adapter = std::move(ad);
  return out;
}

/// Materialised effective parameters.
template <typename T>
Params<T> effective_params(const BasicCheckpoint<T>& ck) {
  return ck.effective_params();
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json manifest;
  manifest["config"] = ck.config;
  manifest["stage"] = to_string(ck.stage);
  manifest["seed"] = ck.config.seed;
  manifest["id"] = checkpoint_id(ck);
  manifest["base_id"] = ck.base_id.empty() ? nlohmann::json(nullptr) : nlohmann::json(ck.base_id);
  manifest["metadata"] = ck.metadata;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, m] : ck.params.tensors()) {
    write_tensor(dir / "tensors" / (name + ".rrst"), to_tensor(*m));
    names.push_back(name);
  }
  if (ck.adapter) {
    manifest["adapter"] = {{"rank", ck.adapter->rank}, {"alpha", ck.adapter->alpha}};
    for (const auto& [name, m] : ck.adapter->tensors()) {
      write_tensor(dir / "tensors" / (name + ".rrst"), to_tensor(*m));
      names.push_back(name);
    }
  } else {
    manifest["adapter"] = nullptr;
  }
  manifest["tensors"] = names;
  write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file_bytes(dir / "manifest.json"));
  Checkpoint ck;
  ck.config = manifest.at("config").get<ModelConfig>();
  ck.config.validate();
  ck.stage = stage_from_string(manifest.at("stage").get<std::string>());
  if (!manifest.at("base_id").is_null()) ck.base_id = manifest.at("base_id").get<std::string>();
  ck.metadata = manifest.value("metadata", nlohmann::json::object());
  ck.params.layers.resize(static_cast<std::size_t>(ck.config.layers));
  for (auto& [name, m] : ck.params.tensors()) *m = to_matrix<Real>(read_tensor(dir / "tensors" / (name + ".rrst")));
  if (!manifest.at("adapter").is_null()) {
    AdapterDelta<Real> ad;
    ad.rank = manifest["adapter"].at("rank");
    ad.alpha = manifest["adapter"].at("alpha");
    ad.layers.resize(static_cast<std::size_t>(ck.config.layers));
    for (auto& [name, m] : ad.tensors()) *m = to_matrix<Real>(read_tensor(dir / "tensors" / (name + ".rrst")));
    ck.adapter = std::move(ad);
  }
  const auto expected = manifest.at("id").get<std::string>();
  if (checkpoint_id(ck) != expected) throw FormatError(dir.string() + ": checkpoint content does not match its id");
  return ck;
}

// ---------------------------------------------------------------------------
// Inference

struct Representation {
  Eigen::VectorXd v;
  std::string sample_id;
  std::optional<std::string> mirror_id;
  Label label = Label::harmful;
  PromptKind prompt = PromptKind::extraction;
  std::string checkpoint_tag;
};

struct HeadRow {
  int token = 0;
  Eigen::VectorXd weights;
};

struct Sampling {
  bool greedy = true;
  double temperature = 1.0;

  static Sampling argmax() { return {true, 1.0}; }
  static Sampling with_temperature(double t) { return {false, t}; }
  bool operator==(const Sampling&) const = default;
};

/// Picks a token from logits: argmax (lowest index on ties) or a seeded
/// categorical draw from softmax(logits / temperature).
template <typename Derived>
int sample_token(const Eigen::MatrixBase<Derived>& logits, const Sampling& s, Rng& rng) {
  if (!s.greedy && !(s.temperature > 0)) throw std::invalid_argument("sampling temperature must be > 0");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  if (s.greedy) return static_cast<int>(best);
  const double mx = static_cast<double>(logits[best]);
  std::vector<double> w(static_cast<std::size_t>(logits.size()));
  double z = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    w[static_cast<std::size_t>(i)] = std::exp((static_cast<double>(logits[i]) - mx) / s.temperature);
    z += w[static_cast<std::size_t>(i)];
  }
  const double u = uniform_real(rng) * z;
  double acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc && w[i] > 0) return static_cast<int>(i);
  }
  return static_cast<int>(best);
}

/// Read-only view over a checkpoint's materialised effective parameters.
class Inference {
 public:
  explicit Inference(const Checkpoint& ck) : config_(ck.config), params_(ck.effective_params()) {}
  Inference(ModelConfig cfg, Params<Real> params) : config_(cfg), params_(std::move(params)) {}

  const ModelConfig& config() const { return config_; }
  const Params<Real>& params() const { return params_; }

  /// Last-layer hidden states for every position.
  Matrix<Real> hidden(const ModelInput& in) const {
    Trace<Real> tr;
    forward(params_, config_, in, tr);
    return std::move(tr.out);
  }

  Vector<Real> representation(const ModelInput& in) const {
    const Matrix<Real> h = hidden(in);
    return h.row(h.rows() - 1).transpose();
  }

  Vector<Real> logits_of(const Vector<Real>& v) const { return params_.head * v; }

  Vector<Real> logits(const ModelInput& in) const { return logits_of(representation(in)); }

  int next_token(const ModelInput& in, const Sampling& s, Rng& rng) const { return sample_token(logits(in), s, rng); }

  int greedy(const ModelInput& in) const {
    Rng unused(0);
    return next_token(in, Sampling::argmax(), unused);
  }

 private:
  ModelConfig config_;
  Params<Real> params_;
};

struct ForwardResult {
  Vector<Real> logits;   // K logits at the final position
  Matrix<Real> hidden;   // n x P last-layer hidden states
};

inline ForwardResult forward(const ModelInput& in, const Checkpoint& ck) {
  const Inference inf(ck);
  ForwardResult r;
  r.hidden = inf.hidden(in);
  r.logits = inf.logits_of(r.hidden.row(r.hidden.rows() - 1).transpose());
  return r;
}

inline Representation last_representation(const ModelInput& in, const Checkpoint& ck) {
  Representation rep;
  rep.v = Inference(ck).representation(in).cast<double>();
  rep.checkpoint_tag = to_string(ck.stage);
  return rep;
}

inline int generate_first_token(const ModelInput& in, const Checkpoint& ck, const Sampling& s, Rng& rng) {
  if (!s.greedy && !(s.temperature > 0)) throw std::invalid_argument("sampling temperature must be > 0");
  return Inference(ck).next_token(in, s, rng);
}

/// Copy of row k of the effective head projection.
inline HeadRow head_row(const Checkpoint& ck, int k) {
  if (k < 0 || k >= ck.config.vocab) throw std::out_of_range("head_row: token index out of range");
  return {k, ck.params.head.row(k).transpose().cast<double>()};
}

/// Representations of every sample in `samples` rendered with one prompt.
inline std::vector<Representation> extract_representations(const Inference& inf,
                                                            const std::vector<const QuerySample*>& samples,
                                                            Mode mode, PromptKind prompt, const std::string& tag) {
  std::vector<Representation> out;
  out.reserve(samples.size());
  const auto& tokens = prompt_pool().get(prompt);
  for (const auto* s : samples) {
    Representation r;
    r.v = inf.representation(render(*s, mode, tokens)).cast<double>();
    r.sample_id = s->id;
    r.mirror_id = s->mirror_id;
    r.label = s->label;
    r.prompt = prompt;
    r.checkpoint_tag = tag;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace rrs

namespace rrs {

/// Writes representations as an n x P tensor plus a <path>.json sidecar
/// with per-row provenance.
inline void write_representations(const std::vector<Representation>& reps, const std::filesystem::path& path) {
  if (reps.empty()) throw std::invalid_argument("write_representations: empty set");
  Matrix<double> m(static_cast<Eigen::Index>(reps.size()), reps.front().v.size());
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < reps.size(); ++i) {
    if (reps[i].v.size() != m.cols()) throw std::invalid_argument("write_representations: ragged vectors");
    m.row(static_cast<Eigen::Index>(i)) = reps[i].v.transpose();
    rows.push_back({{"id", reps[i].sample_id},
                    {"mirror_id", reps[i].mirror_id ? nlohmann::json(*reps[i].mirror_id) : nlohmann::json(nullptr)},
                    {"label", to_string(reps[i].label)},
                    {"prompt", to_string(reps[i].prompt)},
                    {"checkpoint", reps[i].checkpoint_tag}});
  }
  write_tensor(path, to_tensor(m));
  write_file_bytes(path.string() + ".json", nlohmann::json{{"rows", rows}}.dump(1) + "\n");
}

inline std::vector<Representation> read_representations(const std::filesystem::path& path) {
  const Matrix<double> m = to_matrix<double>(read_tensor(path));
  const auto meta = nlohmann::json::parse(read_file_bytes(path.string() + ".json"));
  const auto& rows = meta.at("rows");
  if (rows.size() != static_cast<std::size_t>(m.rows()))
    throw FormatError(path.string() + ": sidecar row count does not match tensor");
  std::vector<Representation> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Representation r;
    r.v = m.row(static_cast<Eigen::Index>(i)).transpose();
    r.sample_id = rows[i].at("id");
    if (!rows[i].at("mirror_id").is_null()) r.mirror_id = rows[i].at("mirror_id").get<std::string>();
    r.label = label_from_string(rows[i].at("label"));
    const std::string prompt = rows[i].at("prompt");
    for (PromptKind k : {PromptKind::extraction, PromptKind::directive, PromptKind::pool, PromptKind::minimal})
      if (prompt == to_string(k)) r.prompt = k;
    r.checkpoint_tag = rows[i].at("checkpoint");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace rrs
