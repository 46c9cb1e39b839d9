#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "mmfs/autodiff.hpp"
#include "mmfs/data.hpp"

namespace mmfs {

using Embedding = Eigen::VectorXd;

// Layer-level description of every network in one model. The defaults are
// the reference architecture: a 3-layer LSTM speech encoder (width 200), a
// single-layer LSTM decoder unrolled on z, and a two-block CNN encoder
// (32, 64 channels) mirrored by a transposed-convolution decoder.
struct ArchSpec {
  int frame_dim = kSynthFrameDim;
  int latent_dim = 130;
  int speech_layers = 3;
  int speech_hidden = 200;
  int decoder_hidden = 200;
  int image_side = kImageSide;
  int conv1_channels = 32;
  int conv2_channels = 64;

  bool speech_encoder = true;
  bool speech_decoder = false;
  bool vision_encoder = true;
  bool vision_decoder = false;
  // Softmax head on top of the (single) encoder, 0 when absent.
  int head_classes = 0;
  std::string head_modality;  // "speech" or "vision"

  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);

class ModelParams {
 public:
  ArchSpec arch;
  std::map<std::string, ad::Parameter> tensors;
  // Class names for the head rows, in order.
  std::vector<std::string> head_labels;

  ad::Parameter& at(const std::string& name);
  const ad::Parameter& at(const std::string& name) const;
  bool has_head() const { return arch.head_classes > 0; }
  std::size_t parameter_count() const;
  bool finite() const;
  void zero_grad();
};

ModelParams init_params(const ArchSpec& arch, std::uint64_t seed);

// Binds a parameter set to a tape. Mutable params become trainable leaves,
// const params become constants.
class Bound {
 public:
  Bound(ad::Tape& tape, ModelParams& params) : tape_(tape), mutable_(&params), const_(&params) {}
  Bound(ad::Tape& tape, const ModelParams& params) : tape_(tape), const_(&params) {}

  ad::Var operator()(const std::string& name);
  ad::Tape& tape() { return tape_; }
  const ArchSpec& arch() const { return const_->arch; }

 private:
  ad::Tape& tape_;
  ModelParams* mutable_ = nullptr;
  const ModelParams* const_;
  std::map<std::string, ad::Var> constants_;
};

// ---- batched forward passes (features x batch) ----------------------------

ad::Var speech_encoder_forward(Bound& net, std::span<const FrameSequence* const> batch);
ad::Var vision_encoder_forward(Bound& net, std::span<const ImageGrid* const> batch);
// Same network on a (side*side) x batch pixel matrix; any image_side.
ad::Var vision_encoder_forward_raw(Bound& net, ad::Var pixels);
// Per-example squared reconstruction error against each target (1 x batch),
// unrolling the decoder for each target's own length.
ad::Var speech_decoder_loss(Bound& net, ad::Var z, std::span<const FrameSequence* const> targets);
// (side*side) x batch reconstructions in [0, 1].
ad::Var vision_decoder_forward(Bound& net, ad::Var z);
ad::Var classifier_logits(Bound& net, ad::Var z);

// ---- inference ------------------------------------------------------------

Embedding encode_speech(const ModelParams& params, const FrameSequence& x);
Embedding encode_image(const ModelParams& params, const ImageGrid& x);
FrameSequence decode_speech(const ModelParams& params, const Embedding& z, int target_len);
ImageGrid decode_image(const ModelParams& params, const Embedding& z);

// latent_dim x N, one column per item, encoded in fixed-size chunks.
Eigen::MatrixXd encode_speech_table(const ModelParams& params, std::span<const FrameSequence* const> items,
                                    int chunk = 64);
Eigen::MatrixXd encode_image_table(const ModelParams& params, std::span<const ImageGrid* const> items,
                                   int chunk = 64);

// Penultimate-layer (pre-softmax) activations. Throws StateError without a head.
Embedding classifier_embedding(const ModelParams& params, const FrameSequence& x);
Embedding classifier_embedding(const ModelParams& params, const ImageGrid& x);

// ---- optimisation ---------------------------------------------------------

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  // Applies one update from the accumulated gradients, then zeroes them.
  void step(ModelParams& params);

 private:
  struct Moments {
    Eigen::MatrixXd m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

// ---- transfer-learned classifiers -----------------------------------------

struct ClassifierConfig {
  ArchSpec arch;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 30;
  int patience = 3;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
  std::vector<std::string> excluded_labels = default_digit_exclusions();
};

struct ClassifierResult {
  ModelParams params;
  double validation_accuracy = 0.0;
  std::vector<double> validation_losses;
};

// Speech or vision classifier on labelled background data. Rejects digit
// labels (ContaminationError) and fewer than two classes (ArgumentError).
ClassifierResult train_classifier(const SpeechSet& background, const ClassifierConfig& config);
ClassifierResult train_classifier(const ImageSet& background, const ClassifierConfig& config);

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  ModelParams params;
  nlohmann::json config;
  std::uint64_t seed = 0;
};

// "MMCK", u32-LE version, u32-LE header length, JSON header (arch, tensor
// names and shapes, head labels, config, seed), then every tensor as f32-LE
// in column-major order.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const nlohmann::json& config, std::uint64_t seed);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mmfs
