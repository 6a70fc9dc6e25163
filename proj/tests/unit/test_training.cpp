#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "fmn/dataset.hpp"
#include "fmn/training.hpp"
#include "oracles/finite_difference.hpp"
#include "support.hpp"

using fmn::Graph;
using fmn::Shape;
using fmn::Tensor;
using fmn::Var;
using testing_support::random_tensor;
using testing_support::tiny_network;

namespace {

fmn::TrainingSet tiny_dataset(std::uint64_t seed, std::size_t per_class = 4) {
  fmn::Rng rng(seed);
  fmn::TrainingSet set;
  set.num_classes = 3;
  for (std::size_t c = 0; c < 3; ++c) {
    // Class-dependent brightness so the problem is learnable.
    for (std::size_t i = 0; i < per_class; ++i) {
      auto img = random_tensor<float>({3, 16, 8}, rng, 0.0, 0.3);
      for (std::size_t p = c * 128; p < (c + 1) * 128; ++p) img[p] += 0.6f;
      set.images.push_back(std::move(img));
      set.labels.push_back(c);
    }
  }
  return set;
}

fmn::TrainConfig quick_config() {
  fmn::TrainConfig c;
  c.batch_size = 4;
  c.epochs_stage1 = 2;
  c.epochs_stage2 = 2;
  c.seed = 17;
  return c;
}

std::vector<std::uint64_t> group_hashes(const fmn::NetworkParams<float>& p) {
  return {fmn::hash_group(p, fmn::ParamGroup::kGrn), fmn::hash_group(p, fmn::ParamGroup::kMask),
          fmn::hash_group(p, fmn::ParamGroup::kLan)};
}

}  // namespace

// ---- losses ---------------------------------------------------------------------------

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(fmn::cross_entropy(Tensor<double>(Shape{4}, 0.7), 2), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, HandExample) {
  const double expected = std::log(std::exp(2.0) + 2.0) - 2.0;
  EXPECT_NEAR(expected, 0.23954, 1e-5);
  EXPECT_NEAR(fmn::cross_entropy(Tensor<double>(Shape{3}, std::vector<double>{2, 0, 0}), 0), expected, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRangeIsContractError) {
  EXPECT_THROW(fmn::cross_entropy(Tensor<double>(Shape{3}, 0.0), 3), fmn::ContractError);
  Graph<double> g;
  const std::vector<std::size_t> labels{5};
  EXPECT_THROW(fmn::cross_entropy(g.input(Tensor<double>(Shape{1, 3}, 0.0)), labels), fmn::ContractError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  fmn::Rng rng(3);
  const auto logits = random_tensor<double>({2, 5}, rng, -3, 3);
  const std::vector<std::size_t> labels{1, 4};
  Graph<double> g;
  auto x = g.input(logits);
  g.backward(fmn::cross_entropy(x, labels));
  const auto ref = fmn::oracle::numeric_gradient(
      [&](const std::vector<double>& v) {
        // -log softmax, written out independently of the library.
        double total = 0;
        for (std::size_t r = 0; r < 2; ++r) {
          double mx = -1e300, s = 0;
          for (std::size_t k = 0; k < 5; ++k) mx = std::max(mx, v[r * 5 + k]);
          for (std::size_t k = 0; k < 5; ++k) s += std::exp(v[r * 5 + k] - mx);
          total += std::log(s) + mx - v[r * 5 + labels[r]];
        }
        return total / 2.0;
      },
      logits.storage(), 1e-6);
  EXPECT_LT(fmn::oracle::max_relative_error(g.grad(x), ref), 1e-5);
}

TEST(RankingLoss, HingeExamples) {
  EXPECT_EQ(fmn::ranking_loss(0.4, 0.4, 0.0), 0.0);
  EXPECT_EQ(fmn::ranking_loss(0.3, 0.9, 0.2), 0.0);
  EXPECT_NEAR(fmn::ranking_loss(0.9, 0.5, 0.2), 0.6, 1e-12);
}

TEST(RankingLoss, GradientIsMinusOneWhenActiveZeroOtherwise) {
  // Batch mean over two samples: one active, one inactive.
  Graph<double> g;
  auto p_local = g.input(Tensor<double>(Shape{2}, std::vector<double>{0.5, 0.9}));
  const std::vector<double> p_global{0.9, 0.3};
  auto loss = fmn::ranking_loss<double>(p_local, p_global, 0.2);
  EXPECT_NEAR(loss.value().item(), 0.6 / 2.0, 1e-12);
  g.backward(loss);
  EXPECT_NEAR(g.grad(p_local)[0], -0.5, 1e-15);
  EXPECT_EQ(g.grad(p_local)[1], 0.0);
}

TEST(RankingLoss, ZeroWhenLocalMatchesGlobalWithZeroMargin) {
  Graph<double> g;
  const std::vector<double> p{0.2, 0.7, 0.55};
  auto loss = fmn::ranking_loss<double>(g.input(Tensor<double>(Shape{3}, p)), p, 0.0);
  EXPECT_EQ(loss.value().item(), 0.0);
}

// ---- optimizer ------------------------------------------------------------------------

TEST(Sgd, PlainStepMovesAgainstGradient) {
  Tensor<double> w(Shape{2}, std::vector<double>{1.0, -2.0});
  w.set_requires_grad(true);
  w.grad()[0] = 0.5;
  w.grad()[1] = -1.0;
  fmn::OptimizerState<double> state;
  std::vector<Tensor<double>*> params{&w};
  fmn::sgd_step<double>(params, state, 0.1, 0.0);
  EXPECT_NEAR(w[0], 0.95, 1e-15);
  EXPECT_NEAR(w[1], -1.9, 1e-15);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  Tensor<double> w(Shape{3}, 0.25);
  w.set_requires_grad(true);
  w.zero_grad();
  fmn::OptimizerState<double> state;
  std::vector<Tensor<double>*> params{&w};
  fmn::sgd_step<double>(params, state, 0.1, 0.9);
  EXPECT_EQ(w.storage(), std::vector<double>(3, 0.25));
}

TEST(Sgd, MomentumRecursionOverTwoSteps) {
  Tensor<double> w(Shape{1}, 0.0);
  w.set_requires_grad(true);
  fmn::OptimizerState<double> state;
  std::vector<Tensor<double>*> params{&w};
  for (int step = 0; step < 2; ++step) {
    w.grad()[0] = 1.0;
    fmn::sgd_step<double>(params, state, 0.1, 0.9);
  }
  EXPECT_NEAR(-w[0], 0.29, 1e-15);
}

TEST(Sgd, FrozenTensorIsSkipped) {
  Tensor<double> w(Shape{2}, 1.0);
  w.grad()[0] = 5.0;
  fmn::OptimizerState<double> state;
  std::vector<Tensor<double>*> params{&w};
  fmn::sgd_step<double>(params, state, 0.1, 0.9);
  EXPECT_EQ(w.storage(), std::vector<double>(2, 1.0));
}

TEST(Sgd, VelocityShapeMismatchIsDimensionError) {
  Tensor<double> w(Shape{2}, 1.0);
  w.set_requires_grad(true);
  w.zero_grad();
  fmn::OptimizerState<double> state;
  state.velocity.emplace_back(Shape{3}, 0.0);
  std::vector<Tensor<double>*> params{&w};
  EXPECT_THROW(fmn::sgd_step<double>(params, state, 0.1, 0.9), fmn::DimensionError);
}

TEST(TrainConfig, LearningRateDropsAfterStageEpoch) {
  fmn::TrainConfig c;
  c.lr_initial = 0.1;
  c.lr_drop_epoch = 20;
  c.lr_drop_epoch_stage2 = 35;
  c.lr_drop_factor = 0.1;
  EXPECT_EQ(c.learning_rate(1, 20), 0.1);
  EXPECT_NEAR(c.learning_rate(1, 21), 0.01, 1e-15);
  EXPECT_EQ(c.learning_rate(2, 35), 0.1);
  EXPECT_NEAR(c.learning_rate(2, 36), 0.01, 1e-15);
}

TEST(TrainConfig, ValidateRejectsBadFields) {
  fmn::TrainConfig c;
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), fmn::ContractError);
  c = {};
  c.lr_initial = 0.0;
  EXPECT_THROW(c.validate(), fmn::ContractError);
  c = {};
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), fmn::ContractError);
}

TEST(MetricsLine, TabSeparatedFields) {
  const fmn::EpochMetrics m{3, 2, 1.5, 0.25, 0.75, 0.01};
  EXPECT_EQ(fmn::format_metrics_line(m), "3\t2\t1.5\t0.25\t0.75\t0.01\n");
}

// ---- augmentation ------------------------------------------------------------------------

TEST(Augment, FlipIsAnInvolution) {
  fmn::Rng rng(1);
  const auto img = random_tensor<float>({3, 5, 4}, rng);
  EXPECT_EQ(fmn::flip_horizontal(fmn::flip_horizontal(img)).storage(), img.storage());
  const auto f = fmn::flip_horizontal(img);
  EXPECT_EQ(f[0], img[3]);
}

TEST(Augment, DegenerateConfigIsIdentity) {
  fmn::Rng rng(2);
  const auto img = random_tensor<float>({3, 6, 4}, rng);
  const fmn::AugmentConfig none{0.0, 0};
  for (int i = 0; i < 5; ++i) EXPECT_EQ(fmn::augment(img, none, rng).storage(), img.storage());
}

TEST(Augment, ForcedFlipWithoutCropMirrors) {
  fmn::Rng rng(3);
  const auto img = random_tensor<float>({3, 6, 4}, rng);
  EXPECT_EQ(fmn::augment(img, {1.0, 0}, rng).storage(), fmn::flip_horizontal(img).storage());
}

TEST(Augment, CropIsAShiftOfTheEdgeReplicatedImage) {
  fmn::Rng src(4);
  const auto img = random_tensor<float>({2, 5, 4}, src);
  const std::size_t pad = 2;
  fmn::Rng rng(5);
  std::set<std::pair<int, int>> offsets;
  for (int trial = 0; trial < 40; ++trial) {
    const auto out = fmn::augment(img, {0.0, pad}, rng);
    ASSERT_EQ(out.shape(), img.shape());
    bool found = false;
    for (int dy = -2; dy <= 2 && !found; ++dy) {
      for (int dx = -2; dx <= 2 && !found; ++dx) {
        bool same = true;
        for (std::size_t c = 0; c < 2 && same; ++c) {
          for (int y = 0; y < 5 && same; ++y) {
            for (int x = 0; x < 4 && same; ++x) {
              const int sy = std::clamp(y + dy, 0, 4), sx = std::clamp(x + dx, 0, 3);
              same = out[(c * 5 + y) * 4 + x] == img[(c * 5 + sy) * 4 + sx];
            }
          }
        }
        if (same) found = true, offsets.insert({dy, dx});
      }
    }
    EXPECT_TRUE(found) << "trial " << trial;
  }
  EXPECT_GT(offsets.size(), 5u);
}

TEST(Augment, SeededReplayIsBitIdentical) {
  fmn::Rng src(6);
  std::vector<Tensor<float>> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_tensor<float>({3, 8, 6}, src));
  auto run = [&] {
    fmn::Rng rng(99);
    std::vector<float> all;
    for (const auto& img : batch) {
      const auto out = fmn::augment(img, {}, rng);
      all.insert(all.end(), out.storage().begin(), out.storage().end());
    }
    return all;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
}

// ---- stage loops ---------------------------------------------------------------------------

TEST(Stage1, ZeroEpochsLeavesParametersUntouched) {
  const auto net = tiny_network();
  auto p = fmn::init_params<float>(net, 1);
  const auto before = group_hashes(p);
  auto c = quick_config();
  c.epochs_stage1 = 0;
  EXPECT_TRUE(fmn::train_stage1(tiny_dataset(1), p, net, c).empty());
  EXPECT_EQ(group_hashes(p), before);
}

TEST(Stage1, OnlyGlobalBranchChanges) {
  const auto net = tiny_network();
  auto p = fmn::init_params<float>(net, 1);
  const auto before = group_hashes(p);
  std::vector<fmn::EpochMetrics> seen;
  const auto log = fmn::train_stage1(tiny_dataset(1), p, net, quick_config(),
                                     [&](const fmn::EpochMetrics& m) { seen.push_back(m); });
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(seen.size(), 2u);
  const auto after = group_hashes(p);
  EXPECT_NE(after[0], before[0]);
  EXPECT_EQ(after[1], before[1]);
  EXPECT_EQ(after[2], before[2]);
  for (const auto& m : log) {
    EXPECT_EQ(m.stage, 1);
    EXPECT_GE(m.mean_ce, 0.0);
    EXPECT_EQ(m.mean_rank_loss, 0.0);
  }
}

TEST(Stage1, EmptyDatasetIsContractError) {
  const auto net = tiny_network();
  auto p = fmn::init_params<float>(net, 1);
  fmn::TrainingSet empty;
  empty.num_classes = 3;
  EXPECT_THROW(fmn::train_stage1(empty, p, net, quick_config()), fmn::ContractError);
  EXPECT_THROW(fmn::train_stage2(empty, p, net, quick_config()), fmn::ContractError);
}

TEST(Stage1, StopsEarlyAtTargetAccuracy) {
  const auto net = tiny_network();
  auto p = fmn::init_params<float>(net, 1);
  auto c = quick_config();
  c.epochs_stage1 = 50;
  c.stage1_target_accuracy = 0.5;
  const auto log = fmn::train_stage1(tiny_dataset(1), p, net, c);
  ASSERT_FALSE(log.empty());
  EXPECT_GE(log.back().train_accuracy, 0.5);
  for (std::size_t i = 0; i + 1 < log.size(); ++i) EXPECT_LT(log[i].train_accuracy, 0.5);
}

TEST(Stage2, GlobalBranchFrozen) {
  const auto net = tiny_network();
  auto p = fmn::init_params<float>(net, 1);
  fmn::train_stage1(tiny_dataset(1), p, net, quick_config());
  const auto before = group_hashes(p);
  const auto log = fmn::train_stage2(tiny_dataset(1), p, net, quick_config());
  ASSERT_EQ(log.size(), 2u);
  const auto after = group_hashes(p);
  EXPECT_EQ(after[0], before[0]);
  EXPECT_NE(after[1], before[1]);
  EXPECT_NE(after[2], before[2]);
  for (const auto& m : log) {
    EXPECT_EQ(m.stage, 2);
    EXPECT_GE(m.mean_rank_loss, 0.0);
  }
}

TEST(Stage2, LossIsCrossEntropyPlusHinge) {
  const auto net = tiny_network();
  auto p = fmn::cast_params<double>(fmn::init_params<float>(net, 2));
  const auto data = tiny_dataset(2, 2);
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& img : data.images) ptrs.push_back(&img);
  const auto images = fmn::stack<float>(ptrs).cast<double>();
  const double margin = 0.3;
  Graph<double> g;
  const auto loss = fmn::stage2_loss(g, g.constant(images), data.labels, p, net, margin);
  EXPECT_EQ(loss.total.value().item(), loss.cross_entropy.value().item() + loss.ranking.value().item());

  // Hinge recomputed from the two branches' logits.
  const auto& lg = loss.outputs.grn.logits_g.value();
  const auto& ll = loss.outputs.lan.logits_l.value();
  const std::size_t b = data.labels.size(), r = net.num_identities;
  double hinge = 0.0, ce = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    auto prob = [&](const Tensor<double>& logits, std::size_t k) {
      double s = 0;
      for (std::size_t j = 0; j < r; ++j) s += std::exp(logits[i * r + j]);
      return std::exp(logits[i * r + k]) / s;
    };
    hinge += std::max(0.0, prob(lg, data.labels[i]) - prob(ll, data.labels[i]) + margin);
    ce += -std::log(prob(ll, data.labels[i]));
  }
  EXPECT_NEAR(loss.ranking.value().item(), hinge / b, 1e-12);
  EXPECT_NEAR(loss.cross_entropy.value().item(), ce / b, 1e-12);
}

TEST(Training, SeededRunsAreBitIdentical) {
  auto run = [] {
    const auto net = tiny_network();
    auto p = fmn::init_params<float>(net, 1);
    std::string log;
    for (const auto& m : fmn::train_stage1(tiny_dataset(1), p, net, quick_config())) log += fmn::format_metrics_line(m);
    for (const auto& m : fmn::train_stage2(tiny_dataset(1), p, net, quick_config())) log += fmn::format_metrics_line(m);
    auto h = group_hashes(p);
    return std::pair{log, h};
  };
  EXPECT_EQ(run(), run());
}

TEST(Stage2, RankingLossTrendsDownOnSyntheticSet) {
  const auto ds = fmn::generate_synthetic(fmn::SyntheticConfig::synth_reid_16(fmn::derive_seed(0, "dataset")));
  fmn::TrainingSet train;
  train.num_classes = 8;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    if (ds.manifest.entries[i].split != fmn::Split::kTrain) continue;
    train.images.push_back(fmn::image_to_tensor(ds.images[i]));
    train.labels.push_back(ds.manifest.entries[i].identity);
  }
  fmn::NetworkConfig net;
  net.stem_channels = 8;
  net.block_channels = {8, 16, 32, 64};
  net.blocks_per_stage = {1, 1, 1, 1};
  net.feature_dim = 64;
  auto p = fmn::init_params<float>(net, 1);
  fmn::TrainConfig c;
  c.lr_initial = 0.02;
  c.epochs_stage1 = 60;
  c.stage1_target_accuracy = 0.9;
  c.epochs_stage2 = 20;
  c.seed = 5;
  fmn::train_stage1(train, p, net, c);
  const auto log = fmn::train_stage2(train, p, net, c);
  ASSERT_EQ(log.size(), 20u);
  for (std::size_t i = 1; i < log.size(); ++i) {
    EXPECT_LE(log[i].mean_rank_loss, log[i - 1].mean_rank_loss + 0.05) << "epoch " << log[i].epoch;
  }
  EXPECT_LT(log.back().mean_rank_loss, log.front().mean_rank_loss);
}
