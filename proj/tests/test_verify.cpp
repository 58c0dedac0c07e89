#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "e2emil/error.hpp"
#include "e2emil/numeric.hpp"
#include "e2emil/verify.hpp"

using namespace e2emil;

TEST(NormalizedL1, Examples) {
  EXPECT_NEAR(normalized_l1(Tensor::vector({2, 0}), Tensor::vector({0, 2})), 2.0, 1e-11);
  EXPECT_EQ(normalized_l1(Tensor::vector({1, -3}), Tensor::vector({1, -3})), 0.0);
  EXPECT_NEAR(normalized_l1(Tensor::vector({1, 1}), Tensor::vector({1.5, 1})), 0.25, 1e-12);
  EXPECT_NEAR(normalized_l1(Tensor::vector({0, 0}), Tensor::vector({0, 1e-12})), 1.0, 1e-9);
  EXPECT_THROW(normalized_l1(Tensor::vector({1}), Tensor::vector({1, 2})), ShapeError);
}

TEST(NormalizedL1, ScaleInvariant) {
  Rng rng(3);
  for (int round = 0; round < 50; ++round) {
    std::vector<double> a(7), b(7);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double c = std::exp(rng.normal() * 3);
    std::vector<double> ca(a), cb(b);
    for (auto& v : ca) v *= c;
    for (auto& v : cb) v *= c;
    const double base = normalized_l1(Tensor::vector(a), Tensor::vector(b));
    EXPECT_NEAR(normalized_l1(Tensor::vector(ca), Tensor::vector(cb)), base, 1e-9 * base);
  }
}

TEST(CompareRuns, OneRecordPerLayerAndStep) {
  EquivalenceOptions o;
  o.steps = 3;
  const auto r = run_equivalence(o);
  ASSERT_EQ(r.reference.size(), 3u);
  const std::size_t layers = r.reference.front().layers.size();
  EXPECT_EQ(r.records.size(), 3 * layers);
  EXPECT_EQ(r.max_param_nl1, 0.0);
  EXPECT_DOUBLE_EQ(r.grad_ratio, 1.0);
  const auto csv = metrics_csv(r.records);
  EXPECT_EQ(csv.rfind("step,layer,param_nl1,grad_nl1,loss_absdiff\n", 0), 0u);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.records.size() + 1);
  EXPECT_THROW(compare_runs(r.reference, std::span<const StepTrace>(r.distributed).first(2)), VerificationError);
}

TEST(CompareRuns, MissingScaleShowsRatioN) {
  for (std::size_t n : {2u, 5u}) {
    EquivalenceOptions o;
    o.n_encoders = n;
    o.steps = 1;
    o.scale_pseudo_loss = false;
    const auto r = run_equivalence(o);
    EXPECT_NEAR(r.grad_ratio, static_cast<double>(n), 1e-9);
    EXPECT_GT(r.max_grad_nl1, 0.4);
  }
}

TEST(GradCheck, Quadratic) {
  const std::vector<double> c{1.0, -2.0, 0.5, 3.0};
  GradFn fn = [&](std::span<const Tensor> p, std::vector<Tensor>* grads) {
    double l = 0;
    std::vector<double> g(4);
    for (std::size_t i = 0; i < 4; ++i) {
      l += c[i] * p[0][i] * p[0][i];
      g[i] = 2 * c[i] * p[0][i];
    }
    if (grads != nullptr) *grads = {Tensor::vector(g)};
    return l;
  };
  const std::vector<Tensor> params{Tensor::vector({0.3, -1.2, 2.0, 0.7})};
  const std::vector<std::string> names{"x"};
  const auto r = finite_diff_gradcheck(fn, params, names, {});
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coords, 4u);
  GradCheckOptions bad;
  bad.epsilon = 0;
  EXPECT_THROW(finite_diff_gradcheck(fn, params, names, bad), ConfigError);
}

TEST(GradCheck, WrongGradientFails) {
  GradFn fn = [](std::span<const Tensor> p, std::vector<Tensor>* grads) {
    if (grads != nullptr) *grads = {Tensor::vector({3 * p[0][0]})};
    return p[0][0] * p[0][0];
  };
  const std::vector<Tensor> params{Tensor::vector({0.8})};
  const std::vector<std::string> names{"x"};
  const auto r = finite_diff_gradcheck(fn, params, names, {});
  EXPECT_FALSE(r.pass);
  EXPECT_NEAR(r.max_rel_error, 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, DefaultGridPasses) {
  const auto grid = default_gradcheck_grid();
  ASSERT_FALSE(grid.empty());
  bool has_distributed = false, has_bn = false;
  for (const auto& c : grid) {
    has_distributed |= c.distributed;
    has_bn |= c.dims.batch_norm;
    const auto r = gradcheck_model(c);
    EXPECT_TRUE(r.pass) << c.label << " max rel " << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-5) << c.label;
  }
  EXPECT_TRUE(has_distributed);
  EXPECT_TRUE(has_bn);
}

TEST(GradCheck, InjectedFaultIsCaught) {
  auto c = default_gradcheck_grid().front();
  c.distributed = false;
  c.inject_fault = true;
  const auto r = gradcheck_model(c);
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(GradCheck, JsonListsCases) {
  const auto grid = default_gradcheck_grid();
  std::vector<GradCheckReport> reports{gradcheck_model(grid.front())};
  const auto json = gradcheck_json(reports);
  EXPECT_NE(json.find(grid.front().label), std::string::npos);
  EXPECT_NE(json.find("max_rel_error"), std::string::npos);
}

TEST(RocAuc, Examples) {
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(roc_auc(y, std::vector<double>{0.1, 0.2, 0.8, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc(y, std::vector<double>{0.9, 0.8, 0.2, 0.1}), 0.0);
  EXPECT_DOUBLE_EQ(roc_auc(y, std::vector<double>{0.5, 0.5, 0.5, 0.5}), 0.5);
  EXPECT_DOUBLE_EQ(roc_auc(y, std::vector<double>{0.1, 0.4, 0.35, 0.8}), 0.75);
  EXPECT_THROW(roc_auc(std::vector<int>{1, 1}, std::vector<double>{0.1, 0.2}), ShapeError);
  EXPECT_THROW(roc_auc(y, std::vector<double>{0.1}), ShapeError);
}

// Brute-force pair count as an independent oracle.
TEST(RocAuc, MatchesPairCountAndIsMonotoneInvariant) {
  Rng rng(9);
  for (int round = 0; round < 40; ++round) {
    const std::size_t n = 5 + rng.below(40);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.below(2));
      s[i] = std::round(rng.normal() * 4) / 4;
    }
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          den += 1;
          num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    const double auc = roc_auc(y, s);
    EXPECT_NEAR(auc, num / den, 1e-12);
    std::vector<double> t(s);
    for (auto& v : t) v = std::exp(3 * v) + 7;
    EXPECT_DOUBLE_EQ(roc_auc(y, t), auc);
  }
}

TEST(Bootstrap, Properties) {
  std::vector<int> y;
  std::vector<double> perfect, noisy;
  Rng rng(4);
  for (int i = 0; i < 60; ++i) {
    y.push_back(i % 2);
    perfect.push_back(i % 2 + 0.01 * i);
    noisy.push_back(i % 2 + rng.normal());
  }
  const auto p = bootstrap_ci(y, perfect, 500, 0.05, 1);
  EXPECT_EQ(p.point, 1.0);
  EXPECT_GE(p.lo, 0.95);
  EXPECT_LE(p.hi, 1.0);
  const auto a = bootstrap_ci(y, noisy, 500, 0.05, 2);
  const auto b = bootstrap_ci(y, noisy, 500, 0.05, 2);
  EXPECT_LE(a.lo, a.point);
  EXPECT_LE(a.point, a.hi);
  EXPECT_LT(a.lo, a.hi);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_DOUBLE_EQ(a.point, roc_auc(y, noisy));
  const auto wide = bootstrap_ci(y, noisy, 500, 0.01, 2);
  EXPECT_LE(wide.lo, a.lo);
  EXPECT_GE(wide.hi, a.hi);
}
