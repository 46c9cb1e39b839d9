#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "mmfs/error.hpp"
#include "mmfs/features.hpp"
#include "mmfs/models.hpp"

using namespace mmfs;

namespace {

ArchSpec small_arch() {
  ArchSpec a;
  a.latent_dim = 8;
  a.speech_layers = 1;
  a.speech_hidden = 12;
  a.decoder_hidden = 8;
  a.conv1_channels = 3;
  a.conv2_channels = 4;
  return a;
}

// Label-derived corpus: pivot class is the true visual class.
PairCorpus oracle_corpus(int n_per_class, std::uint64_t seed) {
  const SynthDigits d = synth_paired_digits(n_per_class, 0.3, seed);
  PairCorpus c;
  for (const auto& s : d.speech.items) {
    c.speech.push_back(s.frames);
    c.speech_class.push_back(d.labels.visual_class(*s.label));
  }
  for (const auto& v : d.images.items) {
    c.images.push_back(v.grid);
    c.image_class.push_back(std::stoi(*v.label));
  }
  auto same_class_other = [](const std::vector<int>& cls, std::size_t i) {
    for (std::size_t k = 1; k < cls.size(); ++k) {
      const std::size_t j = (i + k) % cls.size();
      if (cls[j] == cls[i]) return j;
    }
    return i;
  };
  for (std::size_t i = 0; i < c.speech.size(); ++i) c.speech_positive.push_back(same_class_other(c.speech_class, i));
  for (std::size_t i = 0; i < c.images.size(); ++i) c.image_positive.push_back(same_class_other(c.image_class, i));
  for (std::size_t i = 0; i < c.speech.size(); ++i) {
    for (std::size_t j = 0; j < c.images.size(); ++j) {
      if (c.image_class[j] == c.speech_class[i] && j % static_cast<std::size_t>(n_per_class) == i % static_cast<std::size_t>(n_per_class)) {
        c.pairs.push_back({i, j, c.speech_class[i]});
      }
    }
  }
  return c;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 4;
  cfg.patience = 10;
  cfg.k_sample = 20;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST(Losses, TripletExamples) {
  const Embedding e = Embedding::Constant(4, 1.0);
  EXPECT_NEAR(mtriplet_loss(e, e, e, e, 0.2), 0.4, 1e-12);
  Embedding a(2), n(2);
  a << 1, 0;
  n << -1, 0;
  EXPECT_EQ(mtriplet_loss(a, a, n, n, 0.2), 0.0);
  // One hinge active: d(a, v) = 1, d(a, v_neg) = 1, d(a_neg, v) = 2.
  Embedding v(2);
  v << 0, 1;
  EXPECT_NEAR(mtriplet_loss(a, v, Embedding(-v), Embedding(-v), 0.2), 0.2, 1e-12);
}

TEST(Losses, McaeWeights) {
  EXPECT_NEAR(mcae_loss(1.0, 2.0, 0.5, LossWeights{}), 1.1, 1e-12);
  EXPECT_EQ(mcae_loss(1.0, 2.0, 0.5, LossWeights{0.0, 0.0, 0.0}), 0.0);
  EXPECT_THROW((LossWeights{-0.1, 0.3, 0.4}.validate()), ArgumentError);
}

TEST(Losses, CaeExamples) {
  EXPECT_EQ(cae_loss(Eigen::MatrixXd::Zero(2, 3), Eigen::MatrixXd::Zero(2, 3)), 0.0);
  EXPECT_EQ(cae_loss(Eigen::MatrixXd::Ones(2, 3), Eigen::MatrixXd::Zero(2, 3)), 6.0);
  EXPECT_THROW(cae_loss(Eigen::MatrixXd::Ones(2, 3), Eigen::MatrixXd::Zero(2, 4)), ShapeError);
  ImageGrid a{}, b{};
  a.pixels[3] = 0.5;
  EXPECT_EQ(cae_loss(a, b), 0.25);
}

TEST(Losses, McaeForwardMatchesParts) {
  const ModelParams p = init_params(mcae_arch(small_arch()), 3);
  const SynthDigits d = synth_paired_digits(1, 0.3, 5);
  const auto& xa = d.speech.items[0].frames;
  const auto& xa2 = d.speech.items[1].frames;
  const auto& xv = d.images.items[0].grid;
  const auto& xv2 = d.images.items[1].grid;
  const Embedding za = encode_speech(p, xa), zv = encode_image(p, xv);
  const double la = cae_loss(decode_speech(p, za, xa2.length()), xa2);
  const double lv = cae_loss(decode_image(p, zv), xv2);
  const double lz = (za - zv).squaredNorm();
  EXPECT_NEAR(mcae_loss(p, xa, xa2, xv, xv2, LossWeights{}), mcae_loss(la, lv, lz, LossWeights{}), 1e-9);
}

namespace {

void expect_gradients(const std::string& family, std::uint64_t seed) {
  const auto r = mmfs::testing::run_gradient_checks(family, 5, seed);
  EXPECT_EQ(r.instances, 5);
  EXPECT_LT(r.worst, 1e-4);
  // Kink rejections should stay rare.
  EXPECT_LE(r.skipped, 5);
}

}  // namespace

TEST(Gradients, SpeechCae) { expect_gradients("speech_cae", 1); }
TEST(Gradients, VisionCae) { expect_gradients("vision_cae", 2); }
TEST(Gradients, Mcae) { expect_gradients("mcae", 3); }
TEST(Gradients, Mtriplet) { expect_gradients("mtriplet", 4); }

TEST(EarlyStop, Examples) {
  EXPECT_EQ(early_stop({1.0, 0.9, 0.95, 0.96, 0.97}, 3).action, StopAction::Stop);
  EXPECT_EQ(early_stop({1.0, 0.9, 0.95, 0.96, 0.97}, 3).best_epoch, 1u);
  EXPECT_EQ(early_stop({1.0, 0.9, 0.95, 0.96}, 3).action, StopAction::Continue);
  EXPECT_EQ(early_stop({1.0, 0.9, 0.9}, 1).best_epoch, 1u);
  EXPECT_EQ(early_stop({1.0, 0.9, 0.9}, 1).action, StopAction::Stop);
  EXPECT_EQ(early_stop({1.0, 1.1}, 0).action, StopAction::Stop);
  EXPECT_EQ(early_stop({}, 3).action, StopAction::Continue);
}

TEST(EarlyStop, Property) {
  Rng rng(6);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> h(1 + rng.below(15));
    for (double& v : h) v = static_cast<double>(rng.below(5));
    const int patience = static_cast<int>(rng.below(4));
    const StopDecision d = early_stop(h, patience);
    for (std::size_t i = 0; i < h.size(); ++i) {
      EXPECT_GE(h[i], h[d.best_epoch]);
      if (i < d.best_epoch) {
        EXPECT_GT(h[i], h[d.best_epoch]);
      }
    }
    const bool stop = h.size() - 1 - d.best_epoch >= static_cast<std::size_t>(std::max(patience, 1));
    EXPECT_EQ(d.action == StopAction::Stop, stop);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.patience = -1;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = TrainConfig{};
  c.margin = 0.0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(Corpus, Validation) {
  PairCorpus c = oracle_corpus(2, 1);
  EXPECT_NO_THROW(c.validate(true));
  c.pairs.push_back({c.speech.size(), 0, 0});
  EXPECT_THROW(c.validate(false), ArgumentError);
  PairCorpus e = oracle_corpus(2, 1);
  e.speech_positive.clear();
  EXPECT_THROW(e.validate(true), ArgumentError);
}

TEST(Negatives, CorpusNegativesUseOtherPivotClasses) {
  const PairCorpus c = oracle_corpus(3, 2);
  const ModelParams p = init_params(mtriplet_arch(small_arch()), 1);
  for (std::size_t k : {std::size_t{0}, std::size_t{5}}) {
    const auto neg = mine_corpus_negatives(p, c, k, 9);
    ASSERT_EQ(neg.size(), c.pairs.size());
    for (std::size_t i = 0; i < neg.size(); ++i) {
      EXPECT_NE(c.speech_class[neg[i].first], c.pairs[i].pivot_class);
      EXPECT_NE(c.image_class[neg[i].second], c.pairs[i].pivot_class);
    }
    EXPECT_EQ(mine_corpus_negatives(p, c, k, 9), neg);
  }
}

TEST(Negatives, CorpusNegativesAreNearestWithinModality) {
  const PairCorpus c = oracle_corpus(3, 2);
  const ModelParams p = init_params(mtriplet_arch(small_arch()), 4);
  std::vector<Embedding> zs, zv;
  for (const auto& s : c.speech) zs.push_back(encode_speech(p, s));
  for (const auto& v : c.images) zv.push_back(encode_image(p, v));
  auto closest = [](const std::vector<Embedding>& z, const std::vector<int>& classes, std::size_t anchor, int cls) {
    std::size_t best = z.size();
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (classes[j] == cls) continue;
      if (best == z.size() || cosine_distance(z[anchor], z[j]) < cosine_distance(z[anchor], z[best]) - 1e-12) best = j;
    }
    return best;
  };
  const auto neg = mine_corpus_negatives(p, c, 0, 1);
  for (std::size_t i = 0; i < c.pairs.size(); ++i) {
    const auto& pair = c.pairs[i];
    EXPECT_EQ(neg[i].first, closest(zs, c.speech_class, pair.speech, pair.pivot_class)) << i;
    EXPECT_EQ(neg[i].second, closest(zv, c.image_class, pair.image, pair.pivot_class)) << i;
  }
}

TEST(Training, MtripletLearnsAndIsDeterministic) {
  const PairCorpus train = oracle_corpus(6, 3), val = oracle_corpus(2, 4);
  const ArchSpec arch = mtriplet_arch(small_arch());
  const TrainConfig cfg = quick_config();
  std::vector<EpochLog> seen;
  const TrainResult a = train_mtriplet(train, val, init_params(arch, 1), cfg, [&](const EpochLog& l) { seen.push_back(l); });
  ASSERT_EQ(a.log.size(), 4u);
  EXPECT_EQ(seen.size(), a.log.size());
  EXPECT_LT(a.log.back().train_loss, a.log.front().train_loss);
  EXPECT_TRUE(a.params.finite());

  const TrainResult b = train_mtriplet(train, val, init_params(arch, 1), cfg);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].validation_loss, b.log[i].validation_loss);
  }
  for (const auto& [name, t] : a.params.tensors) EXPECT_EQ(t.value, b.params.at(name).value) << name;

  // Returned parameters are those of the best validation epoch.
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.log.size(); ++i) {
    if (a.log[i].validation_loss < a.log[best].validation_loss) best = i;
  }
  EXPECT_EQ(a.best_epoch, best);
}

TEST(Training, McaeLearns) {
  const PairCorpus train = oracle_corpus(4, 5), val = oracle_corpus(2, 6);
  TrainConfig cfg = quick_config();
  cfg.max_epochs = 3;
  const TrainResult r = train_mcae(train, val, init_params(mcae_arch(small_arch()), 2), cfg);
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
  EXPECT_LT(r.log.back().validation_loss, r.log.front().validation_loss);
}

TEST(Training, PatienceZeroStopsAtFirstNonImprovement) {
  const PairCorpus train = oracle_corpus(3, 3), val = oracle_corpus(1, 4);
  TrainConfig cfg = quick_config();
  cfg.patience = 0;
  cfg.max_epochs = 12;
  cfg.learning_rate = 0.05;  // large enough to overshoot
  const TrainResult r = train_mtriplet(train, val, init_params(mtriplet_arch(small_arch()), 5), cfg);
  std::vector<double> h;
  for (const auto& l : r.log) h.push_back(l.validation_loss);
  for (std::size_t i = 1; i + 1 < h.size(); ++i) {
    EXPECT_LT(h[i], *std::min_element(h.begin(), h.begin() + static_cast<long>(i)));
  }
  if (h.size() < 12) {
    EXPECT_GE(h.back(), *std::min_element(h.begin(), h.end() - 1));
  }
}

TEST(Training, Errors) {
  const PairCorpus c = oracle_corpus(2, 3);
  PairCorpus no_pos = c;
  no_pos.speech_positive.clear();
  EXPECT_THROW(train_mcae(no_pos, c, init_params(mcae_arch(small_arch()), 1), quick_config()), ArgumentError);
  EXPECT_THROW(train_mcae(c, c, init_params(mtriplet_arch(small_arch()), 1), quick_config()), StateError);
  TrainConfig bad = quick_config();
  bad.learning_rate = -1;
  EXPECT_THROW(train_mtriplet(c, c, init_params(mtriplet_arch(small_arch()), 1), bad), ArgumentError);
}
