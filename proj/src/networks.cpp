#include "mmfs/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "mmfs/early_stop.hpp"
#include "mmfs/error.hpp"
#include "mmfs/rng.hpp"

namespace mmfs {

using ad::Matrix;
using ad::Var;

// ---- architecture -----------------------------------------------------------

void ArchSpec::validate() const {
  if (latent_dim <= 0) throw ArgumentError("latent_dim must be positive");
  if (speech_encoder || speech_decoder) {
    if (frame_dim <= 0 || speech_hidden <= 0 || speech_layers <= 0 || decoder_hidden <= 0) {
      throw ArgumentError("speech network widths must be positive");
    }
  }
  if (vision_encoder || vision_decoder) {
    if (image_side <= 0 || image_side % 4 != 0) throw ArgumentError("image_side must be a positive multiple of 4");
    if (conv1_channels <= 0 || conv2_channels <= 0) throw ArgumentError("conv channels must be positive");
  }
  if (head_classes < 0) throw ArgumentError("head_classes must be >= 0");
  if (head_classes > 0) {
    if (head_modality == "speech" && !speech_encoder) throw ArgumentError("speech head needs a speech encoder");
    if (head_modality == "vision" && !vision_encoder) throw ArgumentError("vision head needs a vision encoder");
    if (head_modality != "speech" && head_modality != "vision") {
      throw ArgumentError("head_modality must be 'speech' or 'vision'");
    }
  }
}

void to_json(nlohmann::json& j, const ArchSpec& a) {
  j = nlohmann::json{{"frame_dim", a.frame_dim},
                     {"latent_dim", a.latent_dim},
                     {"speech_layers", a.speech_layers},
                     {"speech_hidden", a.speech_hidden},
                     {"decoder_hidden", a.decoder_hidden},
                     {"image_side", a.image_side},
                     {"conv1_channels", a.conv1_channels},
                     {"conv2_channels", a.conv2_channels},
                     {"speech_encoder", a.speech_encoder},
                     {"speech_decoder", a.speech_decoder},
                     {"vision_encoder", a.vision_encoder},
                     {"vision_decoder", a.vision_decoder},
                     {"head_classes", a.head_classes},
                     {"head_modality", a.head_modality}};
}

void from_json(const nlohmann::json& j, ArchSpec& a) {
  ArchSpec d;
  a.frame_dim = j.value("frame_dim", d.frame_dim);
  a.latent_dim = j.value("latent_dim", d.latent_dim);
  a.speech_layers = j.value("speech_layers", d.speech_layers);
  a.speech_hidden = j.value("speech_hidden", d.speech_hidden);
  a.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
  a.image_side = j.value("image_side", d.image_side);
  a.conv1_channels = j.value("conv1_channels", d.conv1_channels);
  a.conv2_channels = j.value("conv2_channels", d.conv2_channels);
  a.speech_encoder = j.value("speech_encoder", d.speech_encoder);
  a.speech_decoder = j.value("speech_decoder", d.speech_decoder);
  a.vision_encoder = j.value("vision_encoder", d.vision_encoder);
  a.vision_decoder = j.value("vision_decoder", d.vision_decoder);
  a.head_classes = j.value("head_classes", d.head_classes);
  a.head_modality = j.value("head_modality", d.head_modality);
}

// ---- parameters -------------------------------------------------------------

ad::Parameter& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw StateError("model has no parameter '" + name + "'");
  return it->second;
}

const ad::Parameter& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw StateError("model has no parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : tensors) n += static_cast<std::size_t>(p.value.size());
  return n;
}

bool ModelParams::finite() const {
  return std::all_of(tensors.begin(), tensors.end(),
                     [](const auto& kv) { return kv.second.value.allFinite(); });
}

void ModelParams::zero_grad() {
  for (auto& [name, p] : tensors) p.zero_grad();
}

namespace {

struct Initializer {
  Rng rng;
  ModelParams& params;

  void glorot(const std::string& name, int rows, int cols, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-limit, limit);
    }
    add(name, std::move(m));
  }
  void dense(const std::string& name, int out, int in) {
    glorot(name + ".w", out, in, in, out);
    add(name + ".b", Matrix::Zero(out, 1));
  }
  void lstm(const std::string& name, int in, int hidden) {
    glorot(name + ".wx", 4 * hidden, in, in, 4 * hidden);
    glorot(name + ".wh", 4 * hidden, hidden, hidden, 4 * hidden);
    Matrix b = Matrix::Zero(4 * hidden, 1);
    b.middleRows(hidden, hidden).setOnes();  // forget gate
    add(name + ".b", std::move(b));
  }
  void conv(const std::string& name, int out_ch, int in_ch, int k) {
    glorot(name + ".w", out_ch, in_ch * k * k, in_ch * k * k, out_ch * k * k);
    add(name + ".b", Matrix::Zero(out_ch, 1));
  }
  void add(const std::string& name, Matrix m) {
    ad::Parameter p;
    p.value = std::move(m);
    p.zero_grad();
    params.tensors.emplace(name, std::move(p));
  }
};

}  // namespace

ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  ModelParams params;
  params.arch = arch;
  Initializer init{Rng(derive_seed(seed, "init_params")), params};
  const int q = arch.image_side / 4;
  if (arch.speech_encoder) {
    for (int l = 0; l < arch.speech_layers; ++l) {
      init.lstm("speech_enc.l" + std::to_string(l), l == 0 ? arch.frame_dim : arch.speech_hidden,
                arch.speech_hidden);
    }
    init.dense("speech_enc.out", arch.latent_dim, arch.speech_hidden);
  }
  if (arch.speech_decoder) {
    init.lstm("speech_dec.rnn", arch.latent_dim, arch.decoder_hidden);
    init.dense("speech_dec.out", arch.frame_dim, arch.decoder_hidden);
  }
  if (arch.vision_encoder) {
    init.conv("vision_enc.conv1", arch.conv1_channels, 1, 3);
    init.conv("vision_enc.conv2", arch.conv2_channels, arch.conv1_channels, 3);
    init.dense("vision_enc.out", arch.latent_dim, arch.conv2_channels * q * q);
  }
  if (arch.vision_decoder) {
    init.dense("vision_dec.in", arch.conv2_channels * q * q, arch.latent_dim);
    // Transposed-conv weights are stored as in_channels x (out_channels*k*k).
    init.glorot("vision_dec.deconv1.w", arch.conv2_channels, arch.conv1_channels * 16,
                arch.conv2_channels * 16, arch.conv1_channels * 16);
    init.add("vision_dec.deconv1.b", Matrix::Zero(arch.conv1_channels, 1));
    init.glorot("vision_dec.deconv2.w", arch.conv1_channels, 16, arch.conv1_channels * 16, 16);
    init.add("vision_dec.deconv2.b", Matrix::Zero(1, 1));
  }
  if (arch.head_classes > 0) init.dense("head", arch.head_classes, arch.latent_dim);
  return params;
}

Var Bound::operator()(const std::string& name) {
  if (mutable_) return tape_.parameter(mutable_->at(name));
  auto it = constants_.find(name);
  if (it != constants_.end()) return it->second;
  Var v = tape_.constant_ref(const_->at(name).value);
  constants_.emplace(name, v);
  return v;
}

// ---- forward passes ---------------------------------------------------------

namespace {

struct LstmState {
  Var h, c;
};

LstmState lstm_cell(Bound& net, const std::string& name, Var input_proj, Var h, Var c, int hidden) {
  Var gates = ad::add_bias(ad::add(input_proj, ad::matmul(net(name + ".wh"), h)), net(name + ".b"));
  Var i = ad::sigmoid(ad::rows(gates, 0, hidden));
  Var f = ad::sigmoid(ad::rows(gates, hidden, hidden));
  Var g = ad::tanh(ad::rows(gates, 2 * hidden, hidden));
  Var o = ad::sigmoid(ad::rows(gates, 3 * hidden, hidden));
  Var c_next = ad::add(ad::mul(f, c), ad::mul(i, g));
  Var h_next = ad::mul(o, ad::tanh(c_next));
  return {h_next, c_next};
}

Var dense(Bound& net, const std::string& name, Var x) {
  return ad::add_bias(ad::matmul(net(name + ".w"), x), net(name + ".b"));
}

std::vector<Var> decoder_unroll(Bound& net, Var z, int steps) {
  const ArchSpec& a = net.arch();
  if (!a.speech_decoder) throw StateError("model has no speech decoder");
  const Eigen::Index batch = z.cols();
  ad::Tape& tape = net.tape();
  Var zx = ad::matmul(net("speech_dec.rnn.wx"), z);
  LstmState s{tape.constant(Matrix::Zero(a.decoder_hidden, batch)),
              tape.constant(Matrix::Zero(a.decoder_hidden, batch))};
  std::vector<Var> outputs;
  outputs.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    s = lstm_cell(net, "speech_dec.rnn", zx, s.h, s.c, a.decoder_hidden);
    outputs.push_back(dense(net, "speech_dec.out", s.h));
  }
  return outputs;
}

}  // namespace

Var speech_encoder_forward(Bound& net, std::span<const FrameSequence* const> batch) {
  const ArchSpec& a = net.arch();
  if (!a.speech_encoder) throw StateError("model has no speech encoder");
  if (batch.empty()) throw ArgumentError("empty speech batch");
  const auto b = static_cast<Eigen::Index>(batch.size());
  int max_len = 0;
  for (const FrameSequence* x : batch) {
    if (x->length() == 0) throw EmptyItemError("cannot encode an empty frame sequence");
    if (x->dim() != a.frame_dim) {
      throw ShapeError("frame dim " + std::to_string(x->dim()) + " does not match model dim " +
                       std::to_string(a.frame_dim));
    }
    max_len = std::max(max_len, x->length());
  }
  ad::Tape& tape = net.tape();
  const int hidden = a.speech_hidden;
  std::vector<LstmState> state;
  for (int l = 0; l < a.speech_layers; ++l) {
    state.push_back({tape.constant(Matrix::Zero(hidden, b)), tape.constant(Matrix::Zero(hidden, b))});
  }
  for (int t = 0; t < max_len; ++t) {
    Matrix xt = Matrix::Zero(a.frame_dim, b);
    std::vector<char> active(static_cast<std::size_t>(b));
    bool all_active = true;
    for (Eigen::Index j = 0; j < b; ++j) {
      const FrameSequence* x = batch[static_cast<std::size_t>(j)];
      active[static_cast<std::size_t>(j)] = t < x->length();
      if (t < x->length()) {
        xt.col(j) = x->frames.col(t);
      } else {
        all_active = false;
      }
    }
    Var input = tape.constant(std::move(xt));
    for (int l = 0; l < a.speech_layers; ++l) {
      const std::string name = "speech_enc.l" + std::to_string(l);
      Var proj = ad::matmul(net(name + ".wx"), input);
      LstmState next = lstm_cell(net, name, proj, state[l].h, state[l].c, hidden);
      if (all_active) {
        state[l] = next;
      } else {
        // Finished sequences keep their last state.
        state[l] = {ad::select_cols(active, next.h, state[l].h), ad::select_cols(active, next.c, state[l].c)};
      }
      input = state[l].h;
    }
  }
  return dense(net, "speech_enc.out", state.back().h);
}

Var vision_encoder_forward(Bound& net, std::span<const ImageGrid* const> batch) {
  const ArchSpec& a = net.arch();
  if (!a.vision_encoder) throw StateError("model has no vision encoder");
  if (batch.empty()) throw ArgumentError("empty image batch");
  const int side = a.image_side;
  Matrix x(side * side, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (side != kImageSide) throw ShapeError("ImageGrid inputs require image_side 28");
    x.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(batch[j]->pixels.data(), kImagePixels);
  }
  return vision_encoder_forward_raw(net, net.tape().constant(std::move(x)));
}

Var vision_encoder_forward_raw(Bound& net, Var x) {
  const ArchSpec& a = net.arch();
  const int side = a.image_side;
  ad::ConvShape c1{1, side, side, a.conv1_channels, 3, 1, 1};
  Var h = ad::relu(ad::conv2d(x, net("vision_enc.conv1.w"), net("vision_enc.conv1.b"), c1));
  h = ad::max_pool2(h, a.conv1_channels, side, side);
  ad::ConvShape c2{a.conv1_channels, side / 2, side / 2, a.conv2_channels, 3, 1, 1};
  h = ad::relu(ad::conv2d(h, net("vision_enc.conv2.w"), net("vision_enc.conv2.b"), c2));
  h = ad::max_pool2(h, a.conv2_channels, side / 2, side / 2);
  return dense(net, "vision_enc.out", h);
}

Var speech_decoder_loss(Bound& net, Var z, std::span<const FrameSequence* const> targets) {
  const ArchSpec& a = net.arch();
  if (static_cast<Eigen::Index>(targets.size()) != z.cols()) throw ShapeError("one target per latent column");
  int max_len = 0;
  for (const FrameSequence* y : targets) {
    if (y->length() == 0) throw EmptyItemError("empty reconstruction target");
    if (y->dim() != a.frame_dim) throw ShapeError("target frame dim does not match model");
    max_len = std::max(max_len, y->length());
  }
  const std::vector<Var> outputs = decoder_unroll(net, z, max_len);
  ad::Tape& tape = net.tape();
  const Eigen::Index b = z.cols();
  Var total;
  for (int t = 0; t < max_len; ++t) {
    Matrix target = Matrix::Zero(a.frame_dim, b);
    ad::RowVector weight = ad::RowVector::Ones(b);
    bool all_active = true;
    for (Eigen::Index j = 0; j < b; ++j) {
      const FrameSequence* y = targets[static_cast<std::size_t>(j)];
      if (t < y->length()) {
        target.col(j) = y->frames.col(t);
      } else {
        weight(j) = 0.0;
        all_active = false;
      }
    }
    Var diff = ad::sub(outputs[static_cast<std::size_t>(t)], tape.constant(std::move(target)));
    if (!all_active) diff = ad::scale_cols(diff, weight);
    Var step = ad::sum_squares_cols(diff);
    total = total.valid() ? ad::add(total, step) : step;
  }
  return total;
}

Var vision_decoder_forward(Bound& net, Var z) {
  const ArchSpec& a = net.arch();
  if (!a.vision_decoder) throw StateError("model has no vision decoder");
  const int side = a.image_side;
  Var h = ad::relu(dense(net, "vision_dec.in", z));
  ad::ConvShape up1{a.conv1_channels, side / 2, side / 2, a.conv2_channels, 4, 2, 1};
  h = ad::relu(ad::conv_transpose2d(h, net("vision_dec.deconv1.w"), net("vision_dec.deconv1.b"), up1));
  ad::ConvShape up2{1, side, side, a.conv1_channels, 4, 2, 1};
  h = ad::conv_transpose2d(h, net("vision_dec.deconv2.w"), net("vision_dec.deconv2.b"), up2);
  return ad::sigmoid(h);
}

Var classifier_logits(Bound& net, Var z) {
  if (net.arch().head_classes <= 0) throw StateError("model has no classifier head");
  return dense(net, "head", z);
}

// ---- inference --------------------------------------------------------------

Embedding encode_speech(const ModelParams& params, const FrameSequence& x) {
  ad::Tape tape(false);
  Bound net(tape, params);
  const FrameSequence* items[] = {&x};
  return speech_encoder_forward(net, items).value().col(0);
}

Embedding encode_image(const ModelParams& params, const ImageGrid& x) {
  ad::Tape tape(false);
  Bound net(tape, params);
  const ImageGrid* items[] = {&x};
  return vision_encoder_forward(net, items).value().col(0);
}

FrameSequence decode_speech(const ModelParams& params, const Embedding& z, int target_len) {
  if (target_len < 1) throw ArgumentError("target_len must be >= 1");
  if (z.size() != params.arch.latent_dim) throw ShapeError("latent size does not match model");
  ad::Tape tape(false);
  Bound net(tape, params);
  const auto outputs = decoder_unroll(net, tape.constant(z), target_len);
  Eigen::MatrixXd frames(params.arch.frame_dim, target_len);
  for (int t = 0; t < target_len; ++t) frames.col(t) = outputs[static_cast<std::size_t>(t)].value().col(0);
  return FrameSequence(std::move(frames));
}

ImageGrid decode_image(const ModelParams& params, const Embedding& z) {
  if (z.size() != params.arch.latent_dim) throw ShapeError("latent size does not match model");
  if (params.arch.image_side != kImageSide) throw ShapeError("decode_image requires image_side 28");
  ad::Tape tape(false);
  Bound net(tape, params);
  const Matrix& y = vision_decoder_forward(net, tape.constant(z)).value();
  ImageGrid out;
  for (int i = 0; i < kImagePixels; ++i) out.pixels[static_cast<std::size_t>(i)] = y(i, 0);
  return out;
}

Eigen::MatrixXd encode_speech_table(const ModelParams& params, std::span<const FrameSequence* const> items,
                                    int chunk) {
  Eigen::MatrixXd out(params.arch.latent_dim, static_cast<Eigen::Index>(items.size()));
  for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t n = std::min(items.size() - start, static_cast<std::size_t>(chunk));
    ad::Tape tape(false);
    Bound net(tape, params);
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        speech_encoder_forward(net, items.subspan(start, n)).value();
  }
  return out;
}

Eigen::MatrixXd encode_image_table(const ModelParams& params, std::span<const ImageGrid* const> items,
                                   int chunk) {
  Eigen::MatrixXd out(params.arch.latent_dim, static_cast<Eigen::Index>(items.size()));
  for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t n = std::min(items.size() - start, static_cast<std::size_t>(chunk));
    ad::Tape tape(false);
    Bound net(tape, params);
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        vision_encoder_forward(net, items.subspan(start, n)).value();
  }
  return out;
}

Embedding classifier_embedding(const ModelParams& params, const FrameSequence& x) {
  if (!params.has_head() || params.arch.head_modality != "speech") {
    throw StateError("params lack a speech classifier head");
  }
  return encode_speech(params, x);
}

Embedding classifier_embedding(const ModelParams& params, const ImageGrid& x) {
  if (!params.has_head() || params.arch.head_modality != "vision") {
    throw StateError("params lack a vision classifier head");
  }
  return encode_image(params, x);
}

// ---- Adam -------------------------------------------------------------------

void Adam::step(ModelParams& params) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (auto& [name, p] : params.tensors) {
    if (p.grad.size() != p.value.size()) p.zero_grad();
    Moments& mom = moments_[name];
    if (mom.m.size() == 0) {
      mom.m.setZero(p.value.rows(), p.value.cols());
      mom.v.setZero(p.value.rows(), p.value.cols());
    }
    mom.m = beta1_ * mom.m + (1.0 - beta1_) * p.grad;
    mom.v = beta2_ * mom.v + (1.0 - beta2_) * p.grad.cwiseAbs2();
    p.value.array() -= lr_ * (mom.m.array() / c1) / ((mom.v.array() / c2).sqrt() + eps_);
    p.grad.setZero();
  }
}

// ---- classifiers ------------------------------------------------------------

namespace {

template <class Item>
const auto* payload(const Item& item) {
  if constexpr (std::is_same_v<Item, SpeechItem>) {
    return &item.frames;
  } else {
    return &item.grid;
  }
}

template <class Set>
ClassifierResult train_classifier_impl(const Set& background, const ClassifierConfig& config,
                                       const char* modality) {
  using Item = typename decltype(Set::items)::value_type;
  using Payload = std::remove_cv_t<std::remove_pointer_t<decltype(payload(std::declval<const Item&>()))>>;

  std::set<std::string> class_set;
  for (const auto& item : background.items) {
    if (!item.label) throw ArgumentError("background item '" + item.id + "' has no label");
    class_set.insert(*item.label);
  }
  for (const auto& excluded : config.excluded_labels) {
    if (class_set.count(excluded)) {
      throw ContaminationError("background data contains excluded class '" + excluded + "'");
    }
  }
  if (class_set.size() < 2) throw ArgumentError("a classifier needs at least two background classes");
  const std::vector<std::string> classes(class_set.begin(), class_set.end());
  std::map<std::string, int> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<int>(i);

  ArchSpec arch = config.arch;
  arch.speech_decoder = arch.vision_decoder = false;
  arch.speech_encoder = std::string(modality) == "speech";
  arch.vision_encoder = !arch.speech_encoder;
  arch.head_classes = static_cast<int>(classes.size());
  arch.head_modality = modality;
  ClassifierResult result;
  result.params = init_params(arch, derive_seed(config.seed, "classifier_init"));
  result.params.head_labels = classes;

  // Per-class validation hold-out.
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < background.items.size(); ++i) members[*background.items[i].label].push_back(i);
  std::vector<std::size_t> train_idx, val_idx;
  for (auto& [name, idx] : members) {
    Rng rng(derive_seed(config.seed, name));
    rng.shuffle(idx);
    std::size_t n_val = static_cast<std::size_t>(std::lround(idx.size() * config.validation_fraction));
    if (idx.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    else n_val = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_val ? val_idx : train_idx).push_back(idx[k]);
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  if (val_idx.empty()) val_idx = train_idx;

  auto forward = [&](Bound& net, const std::vector<std::size_t>& idx) {
    std::vector<const Payload*> batch;
    std::vector<int> labels;
    for (std::size_t i : idx) {
      batch.push_back(payload(background.items[i]));
      labels.push_back(class_index.at(*background.items[i].label));
    }
    Var z;
    if constexpr (std::is_same_v<Payload, FrameSequence>) {
      z = speech_encoder_forward(net, batch);
    } else {
      z = vision_encoder_forward(net, batch);
    }
    Var logits = classifier_logits(net, z);
    return std::pair{ad::softmax_cross_entropy(logits, labels), logits.value()};
  };

  auto evaluate = [&](const ModelParams& params) {
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < val_idx.size(); start += 64) {
      std::vector<std::size_t> chunk(val_idx.begin() + static_cast<std::ptrdiff_t>(start),
                                     val_idx.begin() + static_cast<std::ptrdiff_t>(std::min(val_idx.size(), start + 64)));
      ad::Tape tape(false);
      Bound net(tape, params);
      auto [ce, logits] = forward(net, chunk);
      loss += ce.value().sum();
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        Eigen::Index arg;
        logits.col(j).maxCoeff(&arg);
        if (arg == class_index.at(*background.items[chunk[static_cast<std::size_t>(j)]].label)) ++correct;
      }
    }
    return std::pair{loss / static_cast<double>(val_idx.size()),
                     static_cast<double>(correct) / static_cast<double>(val_idx.size())};
  };

  Adam adam(config.learning_rate);
  ModelParams best = result.params;
  double best_accuracy = evaluate(result.params).second;
  const std::size_t batch_size = static_cast<std::size_t>(std::max(1, config.batch_size));
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch), 0xc1a55));
    std::vector<std::size_t> order = train_idx;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
      ad::Tape tape;
      Bound net(tape, result.params);
      Var loss = ad::mean(forward(net, chunk).first);
      tape.backward(loss);
      adam.step(result.params);
    }
    const auto [val_loss, val_acc] = evaluate(result.params);
    result.validation_losses.push_back(val_loss);
    const StopDecision decision = early_stop(result.validation_losses, config.patience);
    if (decision.best_epoch + 1 == result.validation_losses.size()) {
      best = result.params;
      best_accuracy = val_acc;
    }
    if (decision.action == StopAction::Stop) break;
  }
  result.params = std::move(best);
  result.validation_accuracy = best_accuracy;
  return result;
}

}  // namespace

ClassifierResult train_classifier(const SpeechSet& background, const ClassifierConfig& config) {
  background.validate();
  ClassifierConfig c = config;
  c.arch.frame_dim = background.frame_dim;
  return train_classifier_impl(background, c, "speech");
}

ClassifierResult train_classifier(const ImageSet& background, const ClassifierConfig& config) {
  background.validate();
  return train_classifier_impl(background, config, "vision");
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'M', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const nlohmann::json& config,
                     std::uint64_t seed) {
  nlohmann::json header;
  header["arch"] = params.arch;
  header["config"] = config;
  header["seed"] = seed;
  header["head_labels"] = params.head_labels;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, p] : params.tensors) {
    tensors.push_back({{"name", name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, p] : params.tensors) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const float f = static_cast<float>(p.value.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing checkpoint " + path.string());
  const std::string in{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (in.size() < 4 || in.compare(0, 4, kCheckpointMagic, 4) != 0) {
    throw FormatError(path.string() + ": not a checkpoint");
  }
  std::size_t pos = 4;
  if (get_u32(in, pos) != kCheckpointVersion) throw FormatError(path.string() + ": unsupported checkpoint version");
  const std::uint32_t header_len = get_u32(in, pos);
  if (pos + header_len > in.size()) throw FormatError(path.string() + ": truncated header");
  const nlohmann::json header = nlohmann::json::parse(in.substr(pos, header_len));
  pos += header_len;

  Checkpoint ck;
  ck.params.arch = header.at("arch").get<ArchSpec>();
  ck.params.head_labels = header.value("head_labels", std::vector<std::string>{});
  ck.config = header.value("config", nlohmann::json::object());
  ck.seed = header.value("seed", std::uint64_t{0});
  for (const auto& t : header.at("tensors")) {
    ad::Parameter p;
    p.value.resize(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const std::uint32_t bits = get_u32(in, pos);
      float v;
      std::memcpy(&v, &bits, 4);
      p.value.data()[i] = v;
    }
    p.zero_grad();
    ck.params.tensors.emplace(t.at("name").get<std::string>(), std::move(p));
  }
  if (pos != in.size()) throw FormatError(path.string() + ": trailing bytes");
  return ck;
}

}  // namespace mmfs
