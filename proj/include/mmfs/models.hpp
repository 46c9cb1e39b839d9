#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mmfs/early_stop.hpp"
#include "mmfs/networks.hpp"

namespace mmfs {

struct LossWeights {
  double alpha_a = 0.3;
  double alpha_v = 0.3;
  double alpha_z = 0.4;

  void validate() const;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  double margin = 0.2;
  int max_epochs = 30;
  int patience = 3;
  std::size_t k_sample = 100;  // 0 draws from every other-class item
  LossWeights weights;
  std::uint64_t seed = 0;

  void validate() const;
};

// Training data for the direct models. Items are copied in; pairs and
// positives are indices into them. Classes are pivot classes (visual digit
// of the support pair an item was assigned to), never ground truth.
struct PairCorpus {
  struct Pair {
    std::size_t speech = 0;
    std::size_t image = 0;
    int pivot_class = 0;
  };

  std::vector<FrameSequence> speech;
  std::vector<ImageGrid> images;
  std::vector<int> speech_class;
  std::vector<int> image_class;
  std::vector<std::size_t> speech_positive;  // required by the MCAE trainer
  std::vector<std::size_t> image_positive;
  std::vector<Pair> pairs;

  void validate(bool need_positives) const;
};

// ---- losses -----------------------------------------------------------------

// Sum of squared differences. Shapes must match.
double cae_loss(const Eigen::MatrixXd& y_hat, const Eigen::MatrixXd& target);
double cae_loss(const FrameSequence& y_hat, const FrameSequence& target);
double cae_loss(const ImageGrid& y_hat, const ImageGrid& target);

double mcae_loss(double loss_a, double loss_v, double loss_z, const LossWeights& w);
// Full forward pass of one MCAE example.
double mcae_loss(const ModelParams& params, const FrameSequence& x_a, const FrameSequence& x_a_pair,
                 const ImageGrid& x_v, const ImageGrid& x_v_pair, const LossWeights& w);

double mtriplet_loss(const Embedding& z_a, const Embedding& z_v, const Embedding& z_a_neg, const Embedding& z_v_neg,
                     double margin);

// Batched forms on the tape (1 x batch). v_targets is (side*side) x batch.
ad::Var mcae_loss_from_latents(Bound& net, ad::Var z_a, ad::Var z_v, std::span<const FrameSequence* const> a_targets,
                               ad::Var v_targets, const LossWeights& w);
ad::Var mtriplet_loss_vars(ad::Var z_a, ad::Var z_v, ad::Var z_a_neg, ad::Var z_v_neg, double margin);

// ---- training ---------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  ModelParams params;  // best-validation parameters
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Architecture flags for each model family.
ArchSpec mcae_arch(ArchSpec base);
ArchSpec mtriplet_arch(ArchSpec base);

TrainResult train_mcae(const PairCorpus& train, const PairCorpus& validation, ModelParams init,
                       const TrainConfig& cfg, const EpochCallback& on_epoch = {});
TrainResult train_mtriplet(const PairCorpus& train, const PairCorpus& validation, ModelParams init,
                           const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Hard negatives for every pair of `corpus`, mined within each modality in
// the space of `params`.
std::vector<std::pair<std::size_t, std::size_t>> mine_corpus_negatives(const ModelParams& params,
                                                                       const PairCorpus& corpus,
                                                                       std::size_t k_sample, std::uint64_t seed);

}  // namespace mmfs
