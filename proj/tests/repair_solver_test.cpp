#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace repair;
using namespace repair::testing;

namespace {

std::vector<double> random_omega(std::mt19937_64& rng, std::size_t n, double scale = 1.5) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> omega(n);
  for (auto& x : omega) x = normal(rng);
  return omega;
}

// Hand evaluation of the ratio objective over all examples from raw weights.
double hand_objective(const FeatureDataset& d, const std::vector<double>& w, const SoftmaxClassifier& clf) {
  const Matrix p = forward(clf, d.features());
  std::vector<double> mass(static_cast<std::size_t>(d.class_count()), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    mass[static_cast<std::size_t>(d.labels()[i])] += w[i];
    total += w[i];
  }
  double num = 0, den = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int y = d.labels()[i];
    num += w[i] * std::log(p(static_cast<Index>(i), y));
    den += w[i] * std::log(mass[static_cast<std::size_t>(y)] / total);
  }
  return 1 - num / den;
}

struct FdResult {
  double worst_theta = 0;
  double worst_omega = 0;
};

RepairConfig leaked_label_config() {
  RepairConfig c;
  c.iterations = 10000;
  c.batch_size = 64;
  c.lr_theta = 1e-2;
  c.lr_omega = 10;
  c.history_stride = 100;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// minibatch_rescale

TEST(MinibatchRescale, ConstantWeightsGiveOnes) {
  const std::vector<double> omega(5, 0.7);
  const std::vector<std::size_t> batch{0, 2, 4};
  for (double r : minibatch_rescale(omega, batch)) EXPECT_DOUBLE_EQ(r, 1.0);
}

TEST(MinibatchRescale, TwoWeightArithmetic) {
  const std::vector<double> omega{std::log(0.2 / 0.8), std::log(0.6 / 0.4)};
  const std::vector<std::size_t> batch{0, 1};
  const auto r = minibatch_rescale(omega, batch);
  EXPECT_NEAR(r[0], 0.5, 1e-15);
  EXPECT_NEAR(r[1], 1.5, 1e-15);
}

TEST(MinibatchRescale, MeanIsOne) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto omega = random_omega(rng, 40, 4.0);
    std::vector<std::size_t> batch(17);
    std::uniform_int_distribution<std::size_t> pick(0, 39);
    for (auto& i : batch) i = pick(rng);
    const auto r = minibatch_rescale(omega, batch);
    double mean = 0;
    for (double x : r) mean += x;
    EXPECT_NEAR(mean / 17.0, 1.0, 1e-12);
  }
}

TEST(MinibatchRescale, EmptyBatchIsAnError) {
  const std::vector<double> omega{0.0};
  EXPECT_THROW(minibatch_rescale(omega, {}), InputError);
}

// ---------------------------------------------------------------------------
// objective

TEST(Objective, ConstantWeightsMatchBiasFormula) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = random_instance(rng, 8, 3, 3);
    const auto clf = random_classifier(rng, 3, 3);
    const std::vector<double> omega(8, std::normal_distribution<double>(0, 2)(rng));
    const double v = objective(d, omega, clf);
    const double formula = 1 - weighted_risk(clf, d) / weighted_entropy(d.labels(), 3);
    EXPECT_NEAR(v, formula, 1e-12);
  }
}

TEST(Objective, ZeroClassifierOnBalancedLabelsIsZero) {
  const FeatureDataset d(Matrix::Random(6, 2), {0, 1, 0, 1, 1, 0}, 2, {"a", "b", "c", "d", "e", "f"});
  const std::vector<double> omega(6, 0.3);
  EXPECT_NEAR(objective(d, omega, SoftmaxClassifier::zeros(2, 2)), 0.0, 1e-12);
}

TEST(Objective, ThreeExampleHandInstance) {
  // x = (1, -1, 2), labels (0, 1, 0), W = (0.5, -0.5), b = (0.1, -0.1).
  const FeatureDataset d(Matrix{{1.0}, {-1.0}, {2.0}}, {0, 1, 0}, 2, {"a", "b", "c"});
  SoftmaxClassifier clf{Matrix{{0.5}, {-0.5}}, Vector{{0.1, -0.1}}};
  const std::vector<double> omega{0.0, 1.0, -2.0};
  const double w0 = 0.5, w1 = 1 / (1 + std::exp(-1.0)), w2 = 1 / (1 + std::exp(2.0));
  // logit gaps z0 - z1: 1.2, -0.8, 2.2; P(y_i) = sigmoid of the signed gap.
  const double p0 = 1 / (1 + std::exp(-1.2)), p1 = 1 / (1 + std::exp(-0.8)), p2 = 1 / (1 + std::exp(-2.2));
  const double m = w0 + w1 + w2;
  const double num = w0 * std::log(p0) + w1 * std::log(p1) + w2 * std::log(p2);
  const double den = w0 * std::log((w0 + w2) / m) + w1 * std::log(w1 / m) + w2 * std::log((w0 + w2) / m);
  EXPECT_NEAR(objective(d, omega, clf), 1 - num / den, 1e-12);
}

TEST(Objective, MatchesIndependentEvaluation) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = random_instance(rng, 8, 4, 3);
    const auto clf = random_classifier(rng, 3, 4);
    const auto omega = random_omega(rng, 8);
    std::vector<double> w;
    for (double o : omega) w.push_back(1 / (1 + std::exp(-o)));
    EXPECT_NEAR(objective(d, omega, clf), hand_objective(d, w, clf), 1e-12);
  }
}

TEST(Objective, ScalingWeightsLeavesBatchValueUnchanged) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = random_instance(rng, 8, 3, 3);
    const auto clf = random_classifier(rng, 3, 3);
    std::vector<double> w(8), scaled(8);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    const double c = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    for (std::size_t i = 0; i < 8; ++i) {
      w[i] = u(rng);
      scaled[i] = c * w[i];
    }
    const auto a = solver_detail::evaluate(d.features(), d.labels(), w, clf, 3, kDefaultEntropyFloor);
    const auto b = solver_detail::evaluate(d.features(), d.labels(), scaled, clf, 3, kDefaultEntropyFloor);
    EXPECT_NEAR(a.value, b.value, 1e-12);
  }
}

TEST(Objective, SingleClassBatchIsDegenerate) {
  const FeatureDataset d(Matrix::Random(4, 2), {0, 0, 1, 1}, 2, {"a", "b", "c", "d"});
  const std::vector<double> omega(4, 0.0);
  const std::vector<std::size_t> batch{0, 1};
  EXPECT_TRUE(evaluate_objective(d, omega, SoftmaxClassifier::zeros(2, 2), batch).degenerate);
  EXPECT_THROW(objective(d, omega, SoftmaxClassifier::zeros(2, 2), batch), NumericError);
  EXPECT_THROW(grad_omega(d, omega, SoftmaxClassifier::zeros(2, 2), batch), NumericError);
}

// ---------------------------------------------------------------------------
// gradients

TEST(Gradients, MatchCentralDifferencesOnRandomInstances) {
  std::mt19937_64 rng(25);
  std::uniform_int_distribution<int> n_dist(2, 8), d_dist(1, 5), c_dist(2, 4);
  const double h = 1e-5;
  FdResult worst;
  int checked = 0;
  while (checked < 100) {
    const int C = c_dist(rng);
    const int n = std::max(n_dist(rng), C);
    const int dim = d_dist(rng);
    const auto d = random_instance(rng, n, dim, C);
    const auto clf = random_classifier(rng, C, dim);
    const auto omega = random_omega(rng, static_cast<std::size_t>(n));
    if (evaluate_objective(d, omega, clf).degenerate) continue;
    ++checked;

    const auto gt = grad_theta(d, omega, clf);
    for (Index r = 0; r < C; ++r) {
      for (Index c = 0; c < dim; ++c) {
        auto plus = clf, minus = clf;
        plus.W(r, c) += h;
        minus.W(r, c) -= h;
        const double num = (objective(d, omega, plus) - objective(d, omega, minus)) / (2 * h);
        worst.worst_theta = std::max(worst.worst_theta, relative_error(gt.W(r, c), num));
      }
      auto plus = clf, minus = clf;
      plus.b(r) += h;
      minus.b(r) -= h;
      const double num = (objective(d, omega, plus) - objective(d, omega, minus)) / (2 * h);
      worst.worst_theta = std::max(worst.worst_theta, relative_error(gt.b(r), num));
    }

    const auto go = grad_omega(d, omega, clf);
    for (std::size_t i = 0; i < omega.size(); ++i) {
      auto plus = omega, minus = omega;
      plus[i] += h;
      minus[i] -= h;
      const double num = (objective(d, plus, clf) - objective(d, minus, clf)) / (2 * h);
      worst.worst_omega = std::max(worst.worst_omega, relative_error(go[i], num));
    }
  }
  EXPECT_LT(worst.worst_theta, 1e-4);
  EXPECT_LT(worst.worst_omega, 1e-4);
}

TEST(Gradients, DenominatorDependenceIsRequired) {
  // Holding the denominator fixed (dropping its w-dependence) breaks the match
  // with finite differences. The part that flows through p'_y alone,
  // sum_j w_j d(log p'_{y_j})/dw_i, vanishes identically, so the surviving
  // denominator term is log p'_{y_i}.
  std::mt19937_64 rng(26);
  const double h = 1e-5;
  double worst_frozen = 0;
  double largest_prior_chain = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = random_instance(rng, 6, 3, 3);
    const auto clf = random_classifier(rng, 3, 3);
    const auto omega = random_omega(rng, 6);
    std::vector<std::size_t> all(6);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto g = solver_detail::gather(d, omega, all);
    const auto t = solver_detail::evaluate(g.x, g.labels, g.w, clf, 3, kDefaultEntropyFloor);
    if (t.degenerate) continue;

    double occupied = 0, total = 0;
    for (double m : t.class_mass) occupied += m;
    for (double r : t.r) total += r;
    largest_prior_chain = std::max(largest_prior_chain, std::abs(1 - occupied / total));

    for (std::size_t i = 0; i < 6; ++i) {
      const double frozen = -t.log_prob[i] / t.denominator * t.r[i] * (1 - g.w[i]);
      auto plus = omega, minus = omega;
      plus[i] += h;
      minus[i] -= h;
      const double num = (objective(d, plus, clf) - objective(d, minus, clf)) / (2 * h);
      worst_frozen = std::max(worst_frozen, relative_error(frozen, num));
    }
  }
  EXPECT_GT(worst_frozen, 1e-2);
  EXPECT_LT(largest_prior_chain, 1e-14);
}

TEST(Gradients, ThetaGradientIsScaledCrossEntropyGradient) {
  std::mt19937_64 rng(27);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = random_instance(rng, 8, 3, 3);
    const auto clf = random_classifier(rng, 3, 3);
    const std::vector<double> omega(8, 0.4);
    const auto gv = grad_theta(d, omega, clf);
    const auto gr = weighted_risk_gradient(clf, d);
    double dot = 0, nv = 0, nr = 0;
    for (Index k = 0; k < gv.W.size(); ++k) {
      dot += gv.W.data()[k] * -gr.W.data()[k];
      nv += gv.W.data()[k] * gv.W.data()[k];
      nr += gr.W.data()[k] * gr.W.data()[k];
    }
    for (Index k = 0; k < gv.b.size(); ++k) {
      dot += gv.b(k) * -gr.b(k);
      nv += gv.b(k) * gv.b(k);
      nr += gr.b(k) * gr.b(k);
    }
    // Ascent on V is descent on the risk: the directions coincide.
    EXPECT_GE(dot / std::sqrt(nv * nr), 1 - 1e-9);
    // Magnitude: dV/dtheta = -dR/dtheta / H.
    const double h = weighted_entropy(d.labels(), 3);
    EXPECT_NEAR(std::sqrt(nv), std::sqrt(nr) / h, 1e-12);
  }
}

TEST(Gradients, ThetaStationaryAtSeparableOptimum) {
  // Far along the separating direction the predictor is saturated and the gradient vanishes.
  const FeatureDataset d(Matrix{{-1.0}, {-2.0}, {1.0}, {2.0}}, {0, 0, 1, 1}, 2, {"a", "b", "c", "d"});
  SoftmaxClassifier clf{Matrix{{-30.0}, {30.0}}, Vector::Zero(2)};
  const std::vector<double> omega(4, 0.0);
  EXPECT_LT(std::sqrt(grad_theta(d, omega, clf).squared_norm()), 1e-20);
}

TEST(Gradients, ConfidentCorrectExampleIsPushedDown) {
  // Example 0 is confidently correct, example 1 (class 1) is misclassified, and
  // example 2 (class 0) is misclassified.
  const FeatureDataset d(Matrix{{3.0}, {1.0}, {-1.0}}, {0, 1, 0}, 2, {"a", "b", "c"});
  SoftmaxClassifier clf{Matrix{{1.0}, {-1.0}}, Vector::Zero(2)};
  const std::vector<double> omega(3, 0.0);
  const auto g = grad_omega(d, omega, clf);
  EXPECT_GT(g[0], 0.0);
}

TEST(Gradients, OutOfBatchEntriesAreExactlyZero) {
  std::mt19937_64 rng(28);
  const auto d = random_instance(rng, 8, 2, 2);
  const auto clf = random_classifier(rng, 2, 2);
  const auto omega = random_omega(rng, 8);
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < 8; ++i) {
    if (d.labels()[i] == 0 && batch.size() < 2) batch.push_back(i);
  }
  for (std::size_t i = 0; i < 8; ++i) {
    if (d.labels()[i] == 1) {
      batch.push_back(i);
      break;
    }
  }
  std::sort(batch.begin(), batch.end());
  const auto g = grad_omega(d, omega, clf, batch);
  for (std::size_t i = 0; i < 8; ++i) {
    if (!std::binary_search(batch.begin(), batch.end(), i)) EXPECT_EQ(g[i], 0.0);
  }
}

// ---------------------------------------------------------------------------
// solver runs

TEST(RepairRun, NoiseFeaturesKeepWeightsNearHalf) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto d = noise_dataset(1000, 4, 5, 100 + seed);
    RepairConfig c;
    c.iterations = 2000;
    c.seed = seed;
    const auto result = repair_run(d, c);
    ASSERT_FALSE(result.aborted) << result.abort_reason;
    double dev = 0;
    for (double w : result.weights.weights()) dev += std::abs(w - 0.5);
    EXPECT_LT(dev / 1000.0, 0.15) << "seed " << seed;
  }
}

TEST(RepairRun, FrozenWeightsReduceToEstimatorTraining) {
  const auto d = leaked_label_dataset(600, 3, 2, 0.8, 5);
  RepairConfig c;
  c.iterations = 3000;
  c.lr_omega = 0;
  c.lr_theta = 0.5;
  c.batch_size = 64;
  const auto result = repair_run(d, c);
  ASSERT_FALSE(result.aborted);
  for (double o : result.weights.omega()) EXPECT_EQ(o, 0.0);
  EstimatorConfig est;
  est.weight_decay = 0;
  est.iterations = 3000;
  est.batch_size = 64;
  const double measured = measure_bias(d, est).bias;
  const double v = objective(d, result.weights.omega(), result.classifier);
  EXPECT_NEAR(v, measured, 0.05);
}

TEST(RepairRun, DeterministicHistories) {
  const auto d = leaked_label_dataset(300, 2, 2, 0.5, 6);
  auto c = leaked_label_config();
  c.iterations = 500;
  c.history_stride = 10;
  const auto a = repair_run(d, c);
  const auto b = repair_run(d, c);
  std::ostringstream ha, hb;
  write_history_csv(ha, a.history);
  write_history_csv(hb, b.history);
  EXPECT_EQ(ha.str(), hb.str());
  EXPECT_EQ(a.weights, b.weights);
}

TEST(RepairRun, HistoryIsFiniteAndStrided) {
  const auto d = leaked_label_dataset(300, 2, 2, 0.5, 7);
  auto c = leaked_label_config();
  c.iterations = 450;
  c.history_stride = 100;
  const auto r = repair_run(d, c);
  ASSERT_GE(r.history.entries.size(), 5u);
  EXPECT_EQ(r.history.entries.front().step, 0);
  for (const auto& e : r.history.entries) {
    EXPECT_TRUE(std::isfinite(e.objective));
    EXPECT_GE(e.frac_above_half, 0.0);
    EXPECT_LE(e.frac_above_half, 1.0);
  }
  std::ostringstream out;
  write_history_csv(out, r.history);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "step,V,risk,entropy,mean_w,frac_above_half");
}

TEST(RepairRun, LeakedLabelRankResampleRemovesMostBias) {
  const auto d = leaked_label_dataset(1000, 2, 3, 1.0, 8);
  EstimatorConfig est;
  est.decay_sweep = default_decay_sweep();
  const double before = measure_bias(d, est).bias;
  const auto r = repair_run(d, leaked_label_config());
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  const auto plan = resample(r.weights, d.labels(), Strategy::kRank, ResampleParams{}, 0);
  const double after = measure_bias(subset(d, plan), est).bias;
  EXPECT_LT(after, 0.3 * before) << "before " << before << " after " << after;
}

TEST(RepairRun, LeakedLabelWeightsSplitIntoTwoClusters) {
  const auto d = leaked_label_dataset(1000, 2, 3, 1.0, 9);
  const auto r = repair_run(d, leaked_label_config());
  ASSERT_FALSE(r.aborted);
  const auto w = r.weights.weights();
  std::size_t outside = 0;
  double mean = 0;
  for (double x : w) {
    outside += (x <= 0.25 || x >= 0.75) ? 1 : 0;
    mean += x;
  }
  EXPECT_GE(static_cast<double>(outside) / 1000.0, 0.6);
  EXPECT_GT(mean / 1000.0, 0.2);
}

TEST(RepairRun, RejectsSingleClassAndBadConfig) {
  const FeatureDataset one(Matrix::Random(4, 1), {0, 0, 0, 0}, 2, {"a", "b", "c", "d"});
  EXPECT_THROW(repair_run(one, RepairConfig{}), InputError);
  const auto d = noise_dataset(20, 2, 1, 1);
  RepairConfig c;
  c.entropy_floor = 0;
  EXPECT_THROW(repair_run(d, c), InputError);
  c = RepairConfig{};
  c.lr_theta = -1;
  EXPECT_THROW(repair_run(d, c), InputError);
}

TEST(RepairRun, RatePerExampleScalesWithSize) {
  RepairConfig c;
  c.lr_omega_per_example = 1e-3;
  EXPECT_DOUBLE_EQ(c.resolved_lr_omega(5000), 5.0);
  EXPECT_EQ(RepairConfig::iterations_for_epochs(2, 1000, 256), 8);
}

TEST(RepairRun, SingleClassBatchesSkipTheWeightUpdate) {
  // Every one-example batch holds a single class.
  const auto d = noise_dataset(40, 2, 2, 3);
  RepairConfig c;
  c.iterations = 50;
  c.batch_size = 1;
  const auto r = repair_run(d, c);
  EXPECT_FALSE(r.aborted);
  EXPECT_EQ(r.history.skipped_omega_updates, 50);
  for (double o : r.weights.omega()) EXPECT_EQ(o, 0.0);
}
