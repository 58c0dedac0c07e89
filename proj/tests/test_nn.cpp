#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "e2emil/error.hpp"
#include "e2emil/fabric.hpp"
#include "e2emil/nn.hpp"
#include "e2emil/numeric.hpp"
#include "golden.hpp"

using namespace e2emil;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double bound = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

ModelDims tiny_dims(bool bn = false) {
  ModelDims d;
  d.tile_dim = 6;
  d.hidden = {8};
  d.feature_dim = 4;
  d.attention_dim = 3;
  d.batch_norm = bn;
  return d;
}

Tensor rows_of(const Tensor& x, const std::vector<std::size_t>& order) {
  Tensor out({order.size(), x.cols()});
  for (std::size_t r = 0; r < order.size(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(order[r], c);
  return out;
}

class CommReducer : public StatsReducer {
 public:
  CommReducer(Communicator& comm) : comm_(comm) {}
  Tensor all_reduce_sum(const Tensor& local) override {
    return comm_.all_reduce_sum({0, 0, "bn/" + std::to_string(n_++)}, local,
                                ReductionPlan::ascending(comm_.encoder_ranks()));
  }

 private:
  Communicator& comm_;
  int n_ = 0;
};

}  // namespace

TEST(InitParams, Deterministic) {
  const auto dims = tiny_dims();
  EXPECT_EQ(checksum(init_params(3, dims)), checksum(init_params(3, dims)));
  EXPECT_NE(checksum(init_params(3, dims)), checksum(init_params(4, dims)));
}

TEST(InitParams, GoldenChecksums) {
  EXPECT_EQ(checksum(init_params(1234, ModelDims{})), golden("init_params.seed1234.default"));
  ModelDims d;
  d.hidden = {32, 16};
  d.batch_norm = true;
  EXPECT_EQ(checksum(init_params(1234, d)), golden("init_params.seed1234.hidden32x16.batch_norm"));
}

TEST(InitParams, Shapes) {
  ModelDims d;
  d.tile_dim = 5;
  d.hidden = {7, 3};
  d.feature_dim = 10;
  const auto p = init_params(0, d);
  EXPECT_EQ(d.resolved_attention_dim(), 5u);
  ASSERT_EQ(p.encoder.layers.size(), 3u);
  EXPECT_EQ(p.encoder.layers[0].weight.shape(), (Shape{7, 5}));
  EXPECT_EQ(p.encoder.layers[2].weight.shape(), (Shape{10, 3}));
  EXPECT_EQ(p.aggregator.V.shape(), (Shape{5, 10}));
  EXPECT_EQ(p.aggregator.w.numel(), 5u);
  EXPECT_EQ(p.aggregator.classifier.weight.shape(), (Shape{1, 10}));
  d.feature_dim = 4;
  EXPECT_EQ(d.resolved_attention_dim(), 4u);
}

TEST(InitParams, NoBiasBeforeBatchNorm) {
  const auto p = init_params(0, tiny_dims(true));
  ASSERT_EQ(p.encoder.norms.size(), 1u);
  EXPECT_TRUE(p.encoder.layers[0].bias.empty());
  EXPECT_FALSE(p.encoder.layers[1].bias.empty());
  const auto names = parameter_names(p.encoder);
  EXPECT_EQ(names.size(), parameters(p.encoder).size());
  EXPECT_EQ(std::count(names.begin(), names.end(), "encoder.linear0.bias"), 0);
}

TEST(Encoder, RowwiseWithoutBatchNorm) {
  Rng rng(1);
  const auto p = init_params(2, tiny_dims());
  EXPECT_EQ(encoder_forward(p.encoder, random_tensor({1, 6}, rng)).shape(), (Shape{1, 4}));

  const Tensor x = random_tensor({5, 6}, rng);
  const Tensor f = encoder_forward(p.encoder, x);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  EXPECT_EQ(encoder_forward(p.encoder, rows_of(x, perm)).values(), rows_of(f, perm).values());
  const std::vector<std::size_t> dup{2, 2, 2};
  const Tensor fd = encoder_forward(p.encoder, rows_of(x, dup));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(fd.at(0, c), fd.at(1, c));
    EXPECT_EQ(fd.at(0, c), f.at(2, c));
  }
}

TEST(Gma, Examples) {
  Rng rng(4);
  const auto p = init_params(5, tiny_dims());
  Tensor same({4, 4});
  const Tensor row = random_tensor({4}, rng);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) same.at(r, c) = row[c];
  const auto a = gma_forward(p.aggregator, same);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.attention[i], 0.25, 1e-15);

  const Tensor one = random_tensor({1, 4}, rng);
  const auto b = gma_forward(p.aggregator, one);
  EXPECT_EQ(b.attention.item(), 1.0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(b.embedding[c], one[c]);

  auto zero_w = p.aggregator;
  for (auto& v : zero_w.w.mutable_data()) v = 0.0;
  const auto z = gma_forward(zero_w, random_tensor({6, 4}, rng, 5.0));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(z.attention[i], 1.0 / 6.0, 1e-15);
}

TEST(Gma, AttentionSumsToOne) {
  Rng rng(6);
  const auto p = init_params(7, tiny_dims());
  for (std::size_t k = 1; k <= 64; ++k) {
    const auto out = gma_forward(p.aggregator, random_tensor({k, 4}, rng, 3.0));
    double s = 0;
    for (double v : out.attention.data()) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12) << "K=" << k;
  }
}

TEST(Gma, PermutationEquivariance) {
  Rng rng(8);
  const auto p = init_params(9, tiny_dims());
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 2 + rng.below(20);
    const Tensor h = random_tensor({k, 4}, rng, 2.0);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = k; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const auto a = gma_forward(p.aggregator, h);
    const auto b = gma_forward(p.aggregator, rows_of(h, perm));
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(b.attention[i], a.attention[perm[i]], 1e-12);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b.embedding[c], a.embedding[c], 1e-12);
    EXPECT_NEAR(b.logit.item(), a.logit.item(), 1e-12);
  }
}

TEST(Bce, Examples) {
  EXPECT_NEAR(bce_with_logits(Tensor::scalar(0), 1).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_with_logits(Tensor::scalar(0), 0).item(), std::log(2.0), 1e-15);
  const double sat = bce_with_logits(Tensor::scalar(100), 1).item();
  EXPECT_TRUE(std::isfinite(sat));
  EXPECT_LT(sat, 1e-40);
  EXPECT_NEAR(bce_with_logits(Tensor::scalar(-800), 1).item(), 800.0, 1e-9);
  EXPECT_THROW(bce_with_logits(Tensor::scalar(0), 2), ShapeError);
}

TEST(SyncBnStats, TwoRanksHandExample) {
  auto group = spawn_group(2);
  std::vector<BatchStats> seen(3);
  group.run([&](Communicator& comm) {
    if (comm.is_aggregator()) return;
    CommReducer reducer(comm);
    const Tensor x = comm.rank() == 1 ? Tensor::matrix(2, 1, {0, 2}) : Tensor::matrix(2, 1, {4, 6});
    Tensor sum({1}), sq({1});
    for (std::size_t r = 0; r < 2; ++r) {
      sum[0] += x[r];
      sq[0] += x[r] * x[r];
    }
    seen[comm.rank()] = sync_bn_stats(&reducer, sum, sq, 2);
  });
  EXPECT_EQ(seen[1].mean[0], 3.0);
  EXPECT_EQ(seen[1].var[0], 5.0);
  EXPECT_EQ(seen[1].count, 4.0);
  EXPECT_EQ(seen[1].mean.values(), seen[2].mean.values());
  EXPECT_EQ(seen[1].var.values(), seen[2].var.values());
}

TEST(SyncBnStats, IdenticalBatchesAndEmptyRank) {
  Rng rng(11);
  const Tensor x = random_tensor({5, 3}, rng);
  Tensor sum({3}), sq({3});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      sum[c] += x.at(r, c);
      sq[c] += x.at(r, c) * x.at(r, c);
    }
  const auto local = sync_bn_stats(nullptr, sum, sq, 5);

  auto group = spawn_group(3);
  std::vector<BatchStats> same(4), with_empty(4);
  group.run([&](Communicator& comm) {
    if (comm.is_aggregator()) return;
    CommReducer reducer(comm);
    same[comm.rank()] = sync_bn_stats(&reducer, sum, sq, 5);
    if (comm.rank() == 3) {
      with_empty[3] = sync_bn_stats(&reducer, Tensor({3}), Tensor({3}), 0);
    } else {
      with_empty[comm.rank()] = sync_bn_stats(&reducer, sum, sq, 5);
    }
  });
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(same[1].mean[c], local.mean[c], 1e-14);
    EXPECT_NEAR(same[1].var[c], local.var[c], 1e-14);
    EXPECT_NEAR(with_empty[2].mean[c], local.mean[c], 1e-14);
  }
  for (int r = 2; r <= 3; ++r) {
    EXPECT_EQ(same[r].mean.values(), same[1].mean.values());
    EXPECT_EQ(with_empty[r].var.values(), with_empty[1].var.values());
  }
}

TEST(Optimizer, AdamWFirstStep) {
  Tensor p = Tensor::vector({0.7});
  Tensor* params[] = {&p};
  const Tensor g[] = {Tensor::vector({1.0})};
  OptState st;
  OptimizerConfig hp;
  hp.lr = 0.1;
  adamw_step(params, g, st, hp, 0.1);
  EXPECT_NEAR(p[0] - 0.7, -0.1, 1e-8);
}

TEST(Optimizer, ZeroGradientIsFixedPoint) {
  for (auto kind : {OptimizerKind::adamw, OptimizerKind::adam, OptimizerKind::sgd}) {
    Tensor p = Tensor::vector({0.3, -1.2});
    Tensor* params[] = {&p};
    const Tensor g[] = {Tensor::vector({0, 0})};
    OptState st;
    OptimizerConfig hp;
    hp.kind = kind;
    hp.momentum = 0.9;
    for (int i = 0; i < 3; ++i) optimizer_step(params, g, st, hp, 0.1);
    EXPECT_EQ(p[0], 0.3);
    EXPECT_EQ(p[1], -1.2);
  }
}

TEST(Optimizer, SgdStep) {
  Tensor p = Tensor::vector({1.0});
  Tensor* params[] = {&p};
  const Tensor g[] = {Tensor::vector({2.0})};
  OptState st;
  OptimizerConfig hp;
  hp.kind = OptimizerKind::sgd;
  sgd_step(params, g, st, hp, 0.5);
  EXPECT_EQ(p[0], 0.0);
}

TEST(Optimizer, AdamWWithoutDecayEqualsAdam) {
  Rng rng(12);
  Tensor a = random_tensor({4, 3}, rng), b = a;
  Tensor* pa[] = {&a};
  Tensor* pb[] = {&b};
  OptState sa, sb;
  OptimizerConfig hp;
  for (int step = 0; step < 25; ++step) {
    const Tensor g[] = {random_tensor({4, 3}, rng)};
    const double lr = 0.01 * (1 + step % 3);
    adamw_step(pa, g, sa, hp, lr);
    adam_step(pb, g, sb, hp, lr);
  }
  EXPECT_EQ(a.values(), b.values());
}

TEST(Optimizer, DecayVariantsDiffer) {
  Tensor a = Tensor::vector({1.0}), b = a;
  Tensor* pa[] = {&a};
  Tensor* pb[] = {&b};
  OptState sa, sb;
  OptimizerConfig hp;
  hp.weight_decay = 0.1;
  const Tensor g[] = {Tensor::vector({0.5})};
  for (int i = 0; i < 3; ++i) {
    adamw_step(pa, g, sa, hp, 0.1);
    adam_step(pb, g, sb, hp, 0.1);
  }
  EXPECT_NE(a[0], b[0]);
}

TEST(LrSchedule, Boundaries) {
  EXPECT_EQ(lr_schedule(10, 100, 10, 0.5), 0.5);
  EXPECT_EQ(lr_schedule(0, 100, 10, 0.5), 0.0);
  EXPECT_NEAR(lr_schedule(100, 100, 10, 0.5), 0.0, 1e-17);
  EXPECT_NEAR(lr_schedule(5, 100, 10, 0.5), 0.25, 1e-15);
  EXPECT_NEAR(lr_schedule(55, 100, 10, 0.5), 0.25, 1e-15);
  EXPECT_EQ(lr_schedule(0, 100, 0, 0.5), 0.5);
  for (std::int64_t s = 11; s <= 100; ++s) EXPECT_LE(lr_schedule(s, 100, 10, 0.5), lr_schedule(s - 1, 100, 10, 0.5));
}

TEST(Checkpoint, RoundTrip) {
  for (bool bn : {false, true}) {
    const auto p = init_params(21, tiny_dims(bn));
    const auto q = deserialize_params(serialize_params(p));
    EXPECT_EQ(checksum(p), checksum(q));
    EXPECT_EQ(q.dims.batch_norm, bn);
    EXPECT_EQ(serialize_params(q), serialize_params(p));
  }
  const auto path = std::filesystem::temp_directory_path() / "e2emil_ckpt_test.bin";
  const auto p = init_params(22, ModelDims{});
  save_params(p, path);
  EXPECT_EQ(checksum(load_params(path)), checksum(p));
  std::filesystem::remove(path);
  EXPECT_THROW(load_params(path), IoError);
}

TEST(Checkpoint, RejectsCorruption) {
  auto bytes = serialize_params(init_params(1, tiny_dims()));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_params(bad_magic), IoError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_params(truncated), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_params(trailing), IoError);
}
