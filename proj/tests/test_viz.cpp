#include "test_support.hpp"

using namespace rrs;
using rrs::testing::make_rep;
using rrs::testing::random_vector;

namespace {

std::vector<Representation> blobs(std::mt19937_64& rng, int per_class, Eigen::Index P, double separation) {
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(P);
  offset[0] = separation;
  std::vector<Representation> out;
  for (int i = 0; i < per_class; ++i) {
    out.push_back(make_rep(random_vector(rng, P), "h" + std::to_string(i), Label::harmful));
    out.push_back(make_rep(random_vector(rng, P) + offset, "b" + std::to_string(i), Label::benign));
  }
  return out;
}

double embedded_silhouette(const Embedding2D& e) {
  std::vector<Eigen::VectorXd> pts;
  std::vector<int> cl;
  for (Eigen::Index i = 0; i < e.points.rows(); ++i) {
    pts.push_back(e.points.row(i).transpose());
    cl.push_back(e.labels[static_cast<std::size_t>(i)] == Label::harmful ? 0 : 1);
  }
  return silhouette_score(pts, cl);
}

}  // namespace

TEST(Pca, PlanarDataIsReconstructedExactly) {
  std::mt19937_64 rng(1);
  const Eigen::Index P = 10;
  const Eigen::VectorXd u = random_vector(rng, P), w = random_vector(rng, P), c = random_vector(rng, P);
  std::vector<Representation> reps;
  for (int i = 0; i < 30; ++i) {
    const Eigen::Vector2d t = random_vector(rng, 2);
    reps.push_back(make_rep(c + t[0] * u + t[1] * w, std::to_string(i), i % 2 ? Label::benign : Label::harmful));
  }
  const auto e = pca_2d(reps);
  Eigen::MatrixXd X(30, P);
  for (int i = 0; i < 30; ++i) X.row(i) = reps[i].v.transpose();
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd rebuilt = (e.points * e.components).rowwise() + mean;
  EXPECT_LT((rebuilt - X).norm(), 1e-9 * X.norm());
  EXPECT_EQ(e.ids.size(), 30u);
  EXPECT_EQ(e.labels[1], Label::benign);
}

TEST(Pca, AxesOrderedOrthonormalAndCovarianceMatches) {
  std::mt19937_64 rng(2);
  std::vector<Representation> reps;
  for (int i = 0; i < 60; ++i) {
    Eigen::VectorXd v = random_vector(rng, 6);
    v[2] *= 5;
    v[4] *= 3;
    reps.push_back(make_rep(v, std::to_string(i), Label::harmful));
  }
  const auto e = pca_2d(reps);
  EXPECT_GE(e.variances[0], e.variances[1]);
  EXPECT_LT((e.components * e.components.transpose() - Eigen::Matrix2d::Identity()).norm(), 1e-10);
  const Eigen::MatrixXd Y = e.points.rowwise() - e.points.colwise().mean();
  const Eigen::Matrix2d cov = Y.transpose() * Y / 59.0;
  EXPECT_NEAR(cov(0, 0), e.variances[0], 1e-9 * e.variances[0]);
  EXPECT_NEAR(cov(1, 1), e.variances[1], 1e-9 * e.variances[0]);
  EXPECT_NEAR(cov(0, 1), 0.0, 1e-9 * e.variances[0]);
  for (int k = 0; k < 2; ++k) {
    Eigen::Index arg;
    e.components.row(k).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(e.components(k, arg), 0.0);
  }
}

TEST(Pca, ProjectionNeverExpandsDistances) {
  std::mt19937_64 rng(3);
  std::vector<Representation> reps;
  for (int i = 0; i < 25; ++i) reps.push_back(make_rep(random_vector(rng, 7), std::to_string(i), Label::benign));
  const auto e = pca_2d(reps);
  for (int i = 0; i < 25; ++i)
    for (int j = i + 1; j < 25; ++j)
      EXPECT_LE((e.points.row(i) - e.points.row(j)).norm(), (reps[i].v - reps[j].v).norm() + 1e-9);
}

TEST(Pca, PermutingInputsPermutesOutputs) {
  std::mt19937_64 rng(4);
  std::vector<Representation> reps;
  for (int i = 0; i < 20; ++i) reps.push_back(make_rep(random_vector(rng, 5), std::to_string(i), Label::harmful));
  auto shuffled = reps;
  std::vector<int> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < 20; ++i) shuffled[i] = reps[perm[i]];
  const auto a = pca_2d(reps), b = pca_2d(shuffled);
  for (int i = 0; i < 20; ++i) EXPECT_LT((b.points.row(i) - a.points.row(perm[i])).norm(), 1e-9);
}

TEST(Pca, Rejections) {
  const Eigen::Vector3d v(1, 2, 3);
  EXPECT_THROW(pca_2d({make_rep(v, "a", Label::harmful), make_rep(v, "b", Label::benign)}), std::invalid_argument);
  // Collinear points have a single direction of variance.
  std::vector<Representation> line;
  for (int i = 0; i < 5; ++i) line.push_back(make_rep(v * i, std::to_string(i), Label::harmful));
  EXPECT_THROW(pca_2d(line), std::invalid_argument);
  auto bad = line;
  bad[1].v[0] = std::nan("");
  EXPECT_THROW(pca_2d(bad), std::invalid_argument);
}

TEST(Tsne, AchievesTargetPerplexity) {
  std::mt19937_64 rng(5);
  const auto reps = blobs(rng, 30, 8, 3.0);
  TsneParams tp;
  tp.perplexity = 10;
  tp.iters = 10;
  const auto e = tsne_2d(reps, tp);
  ASSERT_EQ(e.perplexities.size(), reps.size());
  for (double p : e.perplexities) EXPECT_NEAR(p, 10.0, 1e-4);
}

TEST(Tsne, ConditionalAffinitiesAreDistributions) {
  std::mt19937_64 rng(6);
  Eigen::MatrixXd X(20, 4);
  for (int i = 0; i < 20; ++i) X.row(i) = random_vector(rng, 4).transpose();
  Eigen::MatrixXd P;
  const auto achieved = detail::conditional_affinities(detail::squared_distances(X), 5.0, 1e-6, P);
  for (int i = 0; i < 20; ++i) {
    EXPECT_NEAR(P.row(i).sum(), 1.0, 1e-12);
    EXPECT_EQ(P(i, i), 0.0);
    // Perplexity from the definition, 2^H with H in bits.
    double h = 0;
    for (int j = 0; j < 20; ++j)
      if (P(i, j) > 0) h -= P(i, j) * std::log2(P(i, j));
    EXPECT_NEAR(std::exp2(h), 5.0, 1e-5);
    EXPECT_NEAR(achieved[i], 5.0, 1e-5);
  }
}

TEST(Tsne, KlDecreasesAfterExaggeration) {
  std::mt19937_64 rng(7);
  const auto reps = blobs(rng, 30, 8, 4.0);
  TsneParams tp;
  tp.perplexity = 10;
  tp.iters = 400;
  const auto e = tsne_2d(reps, tp);
  ASSERT_EQ(e.kl_trace.size(), 400u);
  const auto release = static_cast<std::size_t>(tp.exaggeration_iters);
  EXPECT_LT(e.kl_trace.back(), e.kl_trace[release]);
  for (std::size_t t = release + 1; t < e.kl_trace.size(); ++t) EXPECT_LE(e.kl_trace[t], e.kl_trace[t - 1] + 1e-3) << t;
}

TEST(Tsne, SeparatesWellSeparatedBlobs) {
  std::mt19937_64 rng(8);
  const auto reps = blobs(rng, 50, 16, 20.0);
  TsneParams tp;
  tp.perplexity = 15;
  tp.seed = 3;
  const auto e = tsne_2d(reps, tp);
  EXPECT_GT(embedded_silhouette(e), 0.5);
}

TEST(Tsne, DeterministicPerSeed) {
  std::mt19937_64 rng(9);
  const auto reps = blobs(rng, 15, 6, 5.0);
  TsneParams tp;
  tp.perplexity = 5;
  tp.iters = 100;
  tp.seed = 4;
  const auto a = tsne_2d(reps, tp), b = tsne_2d(reps, tp);
  EXPECT_EQ(a.points, b.points);
  tp.seed = 5;
  EXPECT_NE(tsne_2d(reps, tp).points, a.points);
}

TEST(Tsne, RejectsInfeasiblePerplexity) {
  std::mt19937_64 rng(10);
  const auto reps = blobs(rng, 5, 4, 1.0);
  TsneParams tp;
  tp.perplexity = 30;
  EXPECT_THROW(tsne_2d(reps, tp), std::invalid_argument);
  tp.perplexity = 0;
  EXPECT_THROW(tsne_2d(reps, tp), std::invalid_argument);
  tp.perplexity = 3;
  tp.iters = 0;
  EXPECT_THROW(tsne_2d(reps, tp), std::invalid_argument);
}

TEST(Scatter, SvgCirclesColoursAndCsvRoundTrip) {
  rrs::testing::TempDir dir("scatter");
  std::mt19937_64 rng(11);
  auto e = pca_2d(blobs(rng, 7, 5, 3.0));
  e.tag = "epoch 2";
  emit_scatter(e, dir / "plot.svg");
  const auto svg = read_file_bytes(dir / "plot.svg");
  std::size_t circles = 0, red = 0, blue = 0;
  for (std::size_t pos = 0; (pos = svg.find("<circle", pos)) != std::string::npos; ++pos) {
    ++circles;
    const auto end = svg.find("/>", pos);
    const auto tag = svg.substr(pos, end - pos);
    if (tag.find("fill=\"red\"") != std::string::npos) ++red;
    if (tag.find("fill=\"blue\"") != std::string::npos) ++blue;
  }
  EXPECT_EQ(circles, 14u);
  EXPECT_EQ(red, 7u);
  EXPECT_EQ(blue, 7u);
  EXPECT_NE(svg.find("epoch 2"), std::string::npos);

  const auto back = read_scatter_csv(dir / "plot.csv");
  EXPECT_EQ(back.ids, e.ids);
  EXPECT_EQ(back.labels, e.labels);
  EXPECT_EQ(back.points, e.points);
}

TEST(Scatter, RejectsMismatchedCountsAndBadCsv) {
  rrs::testing::TempDir dir("scatter_bad");
  Embedding2D e;
  e.points = Eigen::MatrixXd::Zero(2, 2);
  e.ids = {"a"};
  e.labels = {Label::harmful};
  EXPECT_THROW(emit_scatter(e, dir / "x"), std::invalid_argument);
  write_file_bytes(dir / "bad.csv", "id,x,y\n");
  EXPECT_THROW(read_scatter_csv(dir / "bad.csv"), FormatError);
}
