#pragma once

// Two-dimensional embeddings of representation sets: PCA and exact t-SNE,
// with SVG scatter plots and CSV coordinates.

#include "rrs/model.hpp"
#include "rrs/rng.hpp"
#include "rrs/tensor_io.hpp"

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace rrs {

struct Embedding2D {
  Eigen::MatrixXd points;  // n x 2
  std::vector<std::string> ids;
  std::vector<Label> labels;
  std::string method;
  nlohmann::json params = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string tag;  // shown in the plot title, e.g. "epoch 3"

  // t-SNE only.
  std::vector<double> kl_trace;
  std::vector<double> perplexities;
  // PCA only: 2 x P principal axes and their variances.
  Eigen::MatrixXd components;
  Eigen::Vector2d variances = Eigen::Vector2d::Zero();
};

namespace detail {

inline Eigen::MatrixXd stack(const std::vector<Representation>& reps) {
  if (reps.empty()) throw std::invalid_argument("no representations");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(reps.size()), reps.front().v.size());
  for (std::size_t i = 0; i < reps.size(); ++i) {
    if (reps[i].v.size() != X.cols()) throw std::invalid_argument("representations differ in length");
    X.row(static_cast<Eigen::Index>(i)) = reps[i].v.transpose();
  }
  if (!X.allFinite()) throw std::invalid_argument("representations contain non-finite values");
  return X;
}

inline void copy_provenance(const std::vector<Representation>& reps, Embedding2D& e) {
  for (const auto& r : reps) {
    e.ids.push_back(r.sample_id);
    e.labels.push_back(r.label);
  }
}

inline Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& X) {
  const Eigen::VectorXd sq = X.rowwise().squaredNorm();
  Eigen::MatrixXd D = (-2.0 * X * X.transpose()).colwise() + sq;
  D.rowwise() += sq.transpose();
  D = D.cwiseMax(0.0);
  D.diagonal().setZero();
  return D;
}

}  // namespace detail

/// Projection onto the top two principal axes of the centred set. Each axis
/// is signed so its largest-magnitude loading is positive.
inline Embedding2D pca_2d(const std::vector<Representation>& reps) {
  if (reps.size() < 3) throw std::invalid_argument("pca_2d: need at least 3 representations");
  Eigen::MatrixXd X = detail::stack(reps);
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd C = X.transpose() * X / static_cast<double>(X.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  if (es.info() != Eigen::Success) throw Error("pca_2d: eigendecomposition failed");
  const auto P = C.rows();
  if (P < 2) throw std::invalid_argument("pca_2d: need at least 2 dimensions");
  const double l1 = es.eigenvalues()[P - 1], l2 = es.eigenvalues()[P - 2];
  const double tol = 1e-12 * std::max(1.0, std::abs(l1));
  if (l1 <= tol || l2 <= tol) throw std::invalid_argument("pca_2d: fewer than 2 directions with nonzero variance");
  Embedding2D e;
  e.method = "pca";
  e.components.resize(2, P);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd axis = es.eigenvectors().col(P - 1 - k);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < P; ++i)
      if (std::abs(axis[i]) > std::abs(axis[arg])) arg = i;
    if (axis[arg] < 0) axis = -axis;
    e.components.row(k) = axis.transpose();
  }
  e.variances = {l1, l2};
  e.points = X * e.components.transpose();
  detail::copy_provenance(reps, e);
  return e;
}

struct TsneParams {
  double perplexity = 30;
  int iters = 500;
  double learning_rate = 0;  // <= 0 selects max(n / exaggeration / 4, 50)
  double exaggeration = 12;
  int exaggeration_iters = 100;
  double momentum_initial = 0.5;
  double momentum_final = 0.8;
  int momentum_switch = 250;
  double init_std = 1e-4;
  double perplexity_tol = 1e-5;
  std::uint64_t seed = 0;
};

namespace detail {

/// Row-conditional affinities p_{j|i} whose perplexity matches the target.
/// Returns the achieved perplexity of every row.
inline std::vector<double> conditional_affinities(const Eigen::MatrixXd& D, double perplexity, double tol,
                                                  Eigen::MatrixXd& P) {
  const auto n = D.rows();
  P.setZero(n, n);
  std::vector<double> achieved(static_cast<std::size_t>(n));
  const double target = std::log(perplexity);
  Eigen::VectorXd row(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, D(i, j));
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double entropy = 0;
    for (int it = 0; it < 500; ++it) {
      double sum = 0, dot = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0;
          continue;
        }
        const double shifted = D(i, j) - dmin;
        row[j] = std::exp(-beta * shifted);
        sum += row[j];
        dot += row[j] * shifted;
      }
      entropy = std::log(sum) + beta * dot / sum;
      row /= sum;
      if (std::abs(std::exp(entropy) - perplexity) < tol) break;
      if (entropy > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
      } else {
        hi = beta;
        beta = (beta + lo) / 2;
      }
    }
    P.row(i) = row.transpose();
    achieved[static_cast<std::size_t>(i)] = std::exp(entropy);
  }
  return achieved;
}

}  // namespace detail

/// Exact O(n^2) t-SNE. After early exaggeration a step that raises KL is
/// undone, so the recorded KL trace is non-increasing from there on.
inline Embedding2D tsne_2d(const std::vector<Representation>& reps, const TsneParams& tp = {}) {
  const auto n = static_cast<Eigen::Index>(reps.size());
  if (!(tp.perplexity > 0) || 3.0 * tp.perplexity >= static_cast<double>(n))
    throw std::invalid_argument("tsne_2d: perplexity " + std::to_string(tp.perplexity) + " infeasible for " +
                                std::to_string(n) + " points (need 3 * perplexity < n)");
  if (tp.iters < 1) throw std::invalid_argument("tsne_2d: iters must be >= 1");
  const Eigen::MatrixXd X = detail::stack(reps);
  const double lr = tp.learning_rate > 0 ? tp.learning_rate
                                         : std::max(static_cast<double>(n) / tp.exaggeration / 4.0, 50.0);
  Eigen::MatrixXd Pc;
  Embedding2D e;
  e.method = "tsne";
  e.seed = tp.seed;
  e.params = {{"perplexity", tp.perplexity},     {"iters", tp.iters},
              {"learning_rate", lr}, {"exaggeration", tp.exaggeration},
              {"exaggeration_iters", tp.exaggeration_iters}, {"momentum_switch", tp.momentum_switch}};
  e.perplexities = detail::conditional_affinities(detail::squared_distances(X), tp.perplexity, tp.perplexity_tol, Pc);
  Eigen::MatrixXd P = (Pc + Pc.transpose()) / (2.0 * static_cast<double>(n));
  P = P.cwiseMax(1e-12);
  P.diagonal().setZero();

  Rng rng = make_rng(tp.seed, "tsne/init");
  std::normal_distribution<double> normal(0.0, tp.init_std);
  Eigen::MatrixXd Y(n, 2);
  for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] = normal(rng);
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n), grad(n, 2), accepted_y;
  double z = 0, accepted_kl = std::numeric_limits<double>::infinity(), step_scale = 1.0;
  // Student-t kernel of Y into num and z; returns KL(P || Q) with the unexaggerated P.
  const auto evaluate_layout = [&] {
    num = detail::squared_distances(Y);
    num = (1.0 + num.array()).inverse().matrix();
    num.diagonal().setZero();
    z = num.sum();
    double kl = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j) kl += P(i, j) * std::log(P(i, j) / std::max(num(i, j) / z, 1e-12));
    return kl;
  };

  for (int it = 0; it < tp.iters; ++it) {
    const bool exaggerated = it < tp.exaggeration_iters;
    // The unexaggerated phase starts from rest.
    if (it == tp.exaggeration_iters && it > 0) {
      update.setZero();
      gains.setOnes();
    }
    double kl = evaluate_layout();
    if (!exaggerated && kl > accepted_kl) {
      // Undo a step that raised KL and restart from rest at half the rate.
      Y = accepted_y;
      update.setZero();
      gains.setOnes();
      step_scale *= 0.5;
      kl = evaluate_layout();
    }
    if (!exaggerated) {
      accepted_kl = kl;
      accepted_y = Y;
    }
    e.kl_trace.push_back(kl);
    const double ex = exaggerated ? tp.exaggeration : 1.0;
    // dC/dy_i = 4 sum_j (p_ij - q_ij) (1 + |y_i - y_j|^2)^-1 (y_i - y_j)
    const Eigen::MatrixXd W = ((ex * P).array() - (num.array() / z).max(1e-12)).matrix().cwiseProduct(num);
    const Eigen::VectorXd wsum = W.rowwise().sum();
    grad = 4.0 * (wsum.asDiagonal() * Y - W * Y);
    const double momentum = it < tp.momentum_switch ? tp.momentum_initial : tp.momentum_final;
    for (Eigen::Index k = 0; k < Y.size(); ++k) {
      double& g = gains.data()[k];
      g = (grad.data()[k] > 0) != (update.data()[k] > 0) ? g + 0.2 : g * 0.8;
      g = std::max(g, 0.01);
      update.data()[k] = momentum * update.data()[k] - step_scale * lr * g * grad.data()[k];
    }
    Y += update;
    Y.rowwise() -= Y.colwise().mean();
  }
  e.points = Y;
  detail::copy_provenance(reps, e);
  return e;
}

// ---------------------------------------------------------------------------
// Output

/// Writes <stem>.svg (harmful red, benign blue) and <stem>.csv (id,x,y,label).
/// `path` may carry either extension or none.
inline void emit_scatter(const Embedding2D& emb, const std::filesystem::path& path) {
  std::filesystem::path stem = path;
  if (stem.extension() == ".svg" || stem.extension() == ".csv") stem.replace_extension();
  const auto n = emb.points.rows();
  if (static_cast<std::size_t>(n) != emb.labels.size() || emb.ids.size() != emb.labels.size())
    throw std::invalid_argument("emit_scatter: points, ids and labels differ in count");

  std::string csv = "id,x,y,label\n";
  char buf[256];
  for (Eigen::Index i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,", emb.points(i, 0), emb.points(i, 1));
    csv += emb.ids[static_cast<std::size_t>(i)] + buf + to_string(emb.labels[static_cast<std::size_t>(i)]) + '\n';
  }

  constexpr double kSize = 600, kMargin = 40;
  Eigen::Vector2d lo(0, 0), hi(1, 1);
  if (n > 0) {
    lo = emb.points.colwise().minCoeff().transpose();
    hi = emb.points.colwise().maxCoeff().transpose();
  }
  const Eigen::Vector2d span = (hi - lo).cwiseMax(1e-12);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize + 30
      << "\" viewBox=\"0 0 " << kSize << ' ' << kSize + 30 << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::string title = emb.method;
  if (!emb.tag.empty()) title += " - " + emb.tag;
  svg << "<text x=\"" << kSize / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n";
  svg << "<rect x=\"" << kSize - 120 << "\" y=\"34\" width=\"10\" height=\"10\" fill=\"red\"/>"
      << "<text x=\"" << kSize - 104 << "\" y=\"43\" font-family=\"sans-serif\" font-size=\"12\">harmful</text>\n";
  svg << "<rect x=\"" << kSize - 120 << "\" y=\"50\" width=\"10\" height=\"10\" fill=\"blue\"/>"
      << "<text x=\"" << kSize - 104 << "\" y=\"59\" font-family=\"sans-serif\" font-size=\"12\">benign</text>\n";
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = kMargin + (emb.points(i, 0) - lo[0]) / span[0] * (kSize - 2 * kMargin);
    const double y = 30 + kMargin + (hi[1] - emb.points(i, 1)) / span[1] * (kSize - 2 * kMargin);
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\" fill-opacity=\"0.7\"/>\n", x, y,
                  emb.labels[static_cast<std::size_t>(i)] == Label::harmful ? "red" : "blue");
    svg << buf;
  }
  svg << "</svg>\n";

  auto svg_path = stem;
  svg_path += ".svg";
  auto csv_path = stem;
  csv_path += ".csv";
  write_file_bytes(svg_path, svg.str());
  write_file_bytes(csv_path, csv);
}

/// Reads the CSV written by emit_scatter.
inline Embedding2D read_scatter_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file_bytes(path));
  std::string line;
  if (!std::getline(in, line) || line != "id,x,y,label") throw FormatError(path.string() + ": bad scatter header");
  std::vector<std::array<double, 2>> pts;
  Embedding2D e;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw FormatError(path.string() + ": expected 4 fields in '" + line + "'");
    e.ids.push_back(f[0]);
    pts.push_back({std::stod(f[1]), std::stod(f[2])});
    e.labels.push_back(label_from_string(f[3]));
  }
  e.points.resize(static_cast<Eigen::Index>(pts.size()), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    e.points(static_cast<Eigen::Index>(i), 0) = pts[i][0];
    e.points(static_cast<Eigen::Index>(i), 1) = pts[i][1];
  }
  return e;
}

}  // namespace rrs
