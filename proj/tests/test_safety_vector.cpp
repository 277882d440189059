#include "test_support.hpp"

using namespace rrs;
using rrs::testing::make_rep;
using rrs::testing::random_vector;

namespace {

HeadRow row_of(std::initializer_list<double> w, int token = 40) {
  HeadRow r;
  r.token = token;
  r.weights = Eigen::Map<const Eigen::VectorXd>(w.begin(), static_cast<Eigen::Index>(w.size()));
  return r;
}

DeltaStats stats_of(const Eigen::VectorXd& delta, const HeadRow& w) {
  DeltaStats s;
  s.delta = delta;
  s.products = w.weights.cwiseProduct(delta);
  s.positive_fraction = static_cast<double>((s.products.array() > 0).count()) / static_cast<double>(delta.size());
  s.pairs = 1;
  return s;
}

// Independent selection: repeatedly take the largest remaining product,
// scanning indices upward so the lower index wins ties.
std::vector<int> selection_oracle(const Eigen::VectorXd& products, std::size_t k) {
  std::vector<bool> used(static_cast<std::size_t>(products.size()), false);
  std::vector<int> out;
  for (std::size_t n = 0; n < k; ++n) {
    int best = -1;
    for (int i = 0; i < products.size(); ++i)
      if (!used[i] && (best < 0 || products[i] > products[best])) best = i;
    used[best] = true;
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST(DeltaLogit, WorkedExample) {
  const HeadRow w = row_of({1, -2, 0.5});
  const Eigen::Vector3d vb(1, 1, 1), vh(2, 0, 1);
  EXPECT_DOUBLE_EQ(delta_logit(w, vh - vb), 3.0);
  EXPECT_DOUBLE_EQ(w.weights.dot(vh), 2.5);
  EXPECT_DOUBLE_EQ(w.weights.dot(vb), -0.5);
  EXPECT_DOUBLE_EQ(delta_logit(w, vh - vb), w.weights.dot(vh) - w.weights.dot(vb));
}

TEST(DeltaLogit, ZeroLinearityAndMismatch) {
  const HeadRow w = row_of({1, -2, 0.5});
  EXPECT_EQ(delta_logit(w, Eigen::Vector3d::Zero()), 0.0);
  const Eigen::Vector3d dv(0.3, -1.2, 4);
  EXPECT_DOUBLE_EQ(delta_logit(w, 2 * dv), 2 * delta_logit(w, dv));
  EXPECT_THROW(delta_logit(w, Eigen::Vector2d(1, 2)), std::invalid_argument);
}

TEST(MeanDelta, SinglePairAndSelfDifference) {
  const HeadRow w = row_of({1, 2, 3, 4});
  const Eigen::Vector4d h(1, 2, 3, 4), b(0, 1, 5, -1);
  const auto s = mean_delta({make_rep(h, "h", Label::harmful)}, {make_rep(b, "b", Label::benign)}, w);
  EXPECT_EQ(s.delta, Eigen::VectorXd(h - b));
  EXPECT_EQ(s.pairs, 1u);
  const auto z = mean_delta({make_rep(h, "h", Label::harmful)}, {make_rep(h, "h2", Label::benign)}, w);
  EXPECT_EQ(z.delta, Eigen::VectorXd::Zero(4));
}

TEST(MeanDelta, BruteForceMean) {
  std::mt19937_64 rng(8);
  const HeadRow w{40, random_vector(rng, 4)};
  std::vector<Representation> hs, bs;
  double brute[4] = {0, 0, 0, 0};
  for (int i = 0; i < 3; ++i) {
    hs.push_back(make_rep(random_vector(rng, 4), "h" + std::to_string(i), Label::harmful, "b" + std::to_string(i)));
    bs.push_back(make_rep(random_vector(rng, 4), "b" + std::to_string(i), Label::benign));
    for (int p = 0; p < 4; ++p) brute[p] += (hs.back().v[p] - bs.back().v[p]) / 3.0;
  }
  const auto s = mean_delta(hs, bs, w);
  for (int p = 0; p < 4; ++p) {
    EXPECT_NEAR(s.delta[p], brute[p], 1e-12);
    EXPECT_NEAR(s.products[p], w.weights[p] * brute[p], 1e-12);
  }
  EXPECT_GE(s.positive_fraction, 0.0);
  EXPECT_LE(s.positive_fraction, 1.0);
}

TEST(MeanDelta, RejectsMismatchedInputs) {
  const HeadRow w = row_of({1, 1});
  const Eigen::Vector2d v(1, 2);
  EXPECT_THROW(mean_delta({make_rep(v, "h", Label::harmful)}, {}, w), std::invalid_argument);
  EXPECT_THROW(mean_delta({}, {}, w), std::invalid_argument);
  EXPECT_THROW(mean_delta({make_rep(v, "h", Label::harmful, "b1")}, {make_rep(v, "b2", Label::benign)}, w),
               std::invalid_argument);
}

TEST(SelectFeatures, WorkedExamples) {
  const HeadRow w = row_of({1, -2, 0.5, 0});
  const Eigen::Vector4d delta(2, 1, -4, 3);
  const auto st = stats_of(delta, w);
  EXPECT_EQ(st.products, Eigen::VectorXd(Eigen::Vector4d(2, -2, -2, 0)));

  const auto half = select_features(st, w, 50);
  EXPECT_EQ(std::set<int>(half.mask.begin(), half.mask.end()), (std::set<int>{0, 3}));
  EXPECT_EQ(half.delta, Eigen::VectorXd(Eigen::Vector4d(2, 0, 0, 3)));

  const auto quarter = select_features(st, w, 25);
  EXPECT_EQ(quarter.mask, std::vector<int>{0});
  EXPECT_EQ(quarter.delta, Eigen::VectorXd(Eigen::Vector4d(2, 0, 0, 0)));

  const auto all = select_features(st, w, 100);
  EXPECT_EQ(all.mask.size(), 4u);
  EXPECT_EQ(all.delta, Eigen::VectorXd(delta));
}

TEST(SelectFeatures, RangeChecks) {
  const HeadRow w = row_of({1, 2});
  const auto st = stats_of(Eigen::Vector2d(1, 1), w);
  EXPECT_THROW(select_features(st, w, 0), std::invalid_argument);
  EXPECT_THROW(select_features(st, w, -5), std::invalid_argument);
  EXPECT_THROW(select_features(st, w, 100.5), std::invalid_argument);
}

TEST(SelectFeatures, RoundHalfUpSize) {
  EXPECT_EQ(selection_size(51, 64), 33u);    // 32.64
  EXPECT_EQ(selection_size(12.5, 64), 8u);   // 8.0
  EXPECT_EQ(selection_size(50, 5), 3u);      // 2.5
  EXPECT_EQ(selection_size(25, 6), 2u);      // 1.5
  EXPECT_EQ(selection_size(100, 64), 64u);
}

TEST(SelectFeatures, MatchesIndependentOracleAndMaskConsistency) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index P = 1 + static_cast<Eigen::Index>(rng() % 40);
    HeadRow w{40, random_vector(rng, P)};
    Eigen::VectorXd delta = random_vector(rng, P);
    // Inject exact ties.
    if (P > 3) {
      w.weights[1] = w.weights[0];
      delta[1] = delta[0];
    }
    const auto st = stats_of(delta, w);
    const double m = 1 + static_cast<double>(rng() % 1000) / 10.0;
    const auto sv = select_features(st, w, std::min(m, 100.0));
    const auto k = selection_size(std::min(m, 100.0), P);
    EXPECT_EQ(sv.mask, selection_oracle(st.products, k));
    std::vector<bool> in(static_cast<std::size_t>(P), false);
    for (int p : sv.mask) in[p] = true;
    double min_in = std::numeric_limits<double>::infinity(), max_out = -min_in;
    for (Eigen::Index p = 0; p < P; ++p) {
      if (in[p]) {
        min_in = std::min(min_in, st.products[p]);
        EXPECT_EQ(sv.delta[p], delta[p]);
      } else {
        max_out = std::max(max_out, st.products[p]);
        EXPECT_EQ(sv.delta[p], 0.0);
      }
    }
    if (!sv.mask.empty() && static_cast<Eigen::Index>(sv.mask.size()) < P) EXPECT_GE(min_in, max_out);
  }
}

TEST(SelectFeatures, PermutationEquivariance) {
  std::mt19937_64 rng(4);
  const Eigen::Index P = 16;
  HeadRow w{40, random_vector(rng, P)};
  const Eigen::VectorXd delta = random_vector(rng, P);
  std::vector<int> perm(P);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  HeadRow pw{40, Eigen::VectorXd(P)};
  Eigen::VectorXd pd(P);
  for (Eigen::Index i = 0; i < P; ++i) {
    pw.weights[i] = w.weights[perm[i]];
    pd[i] = delta[perm[i]];
  }
  const auto a = select_features(stats_of(delta, w), w, 40);
  const auto b = select_features(stats_of(pd, pw), pw, 40);
  std::set<int> mapped;
  for (int i : b.mask) mapped.insert(perm[i]);
  EXPECT_EQ(mapped, std::set<int>(a.mask.begin(), a.mask.end()));
}

TEST(SelectFeatures, TopSumUnimodalWithPeakAtPositiveFraction) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index P = 64;
    const HeadRow w{40, random_vector(rng, P)};
    const auto st = stats_of(random_vector(rng, P), w);
    std::vector<double> g;
    for (Eigen::Index k = 0; k <= P; ++k) g.push_back(top_product_sum(st.products, static_cast<std::size_t>(k)));
    const auto positives = static_cast<std::size_t>((st.products.array() > 0).count());
    for (std::size_t k = 1; k < g.size(); ++k) {
      if (k <= positives)
        EXPECT_GE(g[k], g[k - 1]);
      else
        EXPECT_LE(g[k], g[k - 1]);
    }
    EXPECT_EQ(std::max_element(g.begin(), g.end()) - g.begin(), static_cast<std::ptrdiff_t>(positives));
  }
}

TEST(BuildTargets, ShiftsAndExactLogitChange) {
  std::mt19937_64 rng(12);
  const Eigen::Index P = 8;
  const HeadRow w{40, random_vector(rng, P)};
  const auto sv = select_features(stats_of(random_vector(rng, P), w), w, 51);
  const auto h = make_rep(random_vector(rng, P), "h", Label::harmful);
  const auto b = make_rep(random_vector(rng, P), "b", Label::benign);
  const auto t = build_targets({h, b}, sv, {Label::harmful, Label::benign});
  double shift = 0;
  for (int p : sv.mask) shift += w.weights[p] * sv.delta[p];
  EXPECT_NEAR(w.weights.dot(t[0]) - w.weights.dot(h.v), shift, 1e-12);
  EXPECT_NEAR(w.weights.dot(t[1]) - w.weights.dot(b.v), -shift, 1e-12);

  SafetyVector zero = sv;
  zero.delta.setZero();
  const auto same = build_targets({h, b}, zero, {Label::harmful, Label::benign});
  EXPECT_EQ(same[0], h.v);
  EXPECT_EQ(same[1], b.v);
}

TEST(SafetyVectorFile, RoundTrip) {
  rrs::testing::TempDir dir("sv");
  const HeadRow w = row_of({1, -2, 0.5, 0});
  auto sv = select_features(stats_of(Eigen::Vector4d(2, 1, -4, 3), w), w, 50);
  sv.source_checkpoint = "abc";
  write_safety_vector(sv, dir / "sv.rrst");
  const auto back = read_safety_vector(dir / "sv.rrst");
  EXPECT_EQ(back.mask, sv.mask);
  EXPECT_EQ(back.delta, sv.delta);
  EXPECT_EQ(back.m, 50);
  EXPECT_EQ(back.source_checkpoint, "abc");
}
