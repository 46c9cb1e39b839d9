#include "mmfs/models.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mmfs/error.hpp"
#include "mmfs/features.hpp"
#include "mmfs/mining.hpp"
#include "mmfs/rng.hpp"

namespace mmfs {

using ad::Matrix;
using ad::Var;

StopDecision early_stop(const std::vector<double>& history, int patience) {
  StopDecision d;
  if (history.empty()) return d;
  d.best_epoch = static_cast<std::size_t>(std::min_element(history.begin(), history.end()) - history.begin());
  const std::size_t since = history.size() - 1 - d.best_epoch;
  if (since >= static_cast<std::size_t>(std::max(patience, 1))) d.action = StopAction::Stop;
  return d;
}

void LossWeights::validate() const {
  for (double a : {alpha_a, alpha_v, alpha_z}) {
    if (!std::isfinite(a) || a < 0.0) throw ArgumentError("loss weights must be finite and non-negative");
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be positive");
  if (batch_size < 1) throw ArgumentError("batch_size must be positive");
  if (!(margin > 0.0)) throw ArgumentError("margin must be positive");
  if (max_epochs < 1) throw ArgumentError("max_epochs must be >= 1");
  if (patience < 0) throw ArgumentError("patience must be >= 0");
  weights.validate();
}

void PairCorpus::validate(bool need_positives) const {
  if (pairs.empty()) throw ArgumentError("no training pairs");
  if (speech_class.size() != speech.size() || image_class.size() != images.size()) {
    throw ShapeError("one pivot class per corpus item is required");
  }
  for (const auto& p : pairs) {
    if (p.speech >= speech.size() || p.image >= images.size()) throw ArgumentError("pair index out of range");
  }
  if (need_positives) {
    if (speech_positive.size() != speech.size() || image_positive.size() != images.size()) {
      throw ArgumentError("MCAE training needs a positive for every item");
    }
  }
}

// ---- losses -------------------------------------------------------------------

double cae_loss(const Eigen::MatrixXd& y_hat, const Eigen::MatrixXd& target) {
  if (y_hat.rows() != target.rows() || y_hat.cols() != target.cols()) {
    throw ShapeError("reconstruction shape does not match target");
  }
  return (y_hat - target).squaredNorm();
}

double cae_loss(const FrameSequence& y_hat, const FrameSequence& target) {
  return cae_loss(y_hat.frames, target.frames);
}

double cae_loss(const ImageGrid& y_hat, const ImageGrid& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < y_hat.pixels.size(); ++i) {
    const double d = y_hat.pixels[i] - target.pixels[i];
    s += d * d;
  }
  return s;
}

double mcae_loss(double loss_a, double loss_v, double loss_z, const LossWeights& w) {
  return w.alpha_a * loss_a + w.alpha_v * loss_v + w.alpha_z * loss_z;
}

namespace {

Matrix pixel_matrix(std::span<const ImageGrid* const> images) {
  Matrix m(kImagePixels, static_cast<Eigen::Index>(images.size()));
  for (std::size_t j = 0; j < images.size(); ++j) {
    m.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(images[j]->pixels.data(), kImagePixels);
  }
  return m;
}

}  // namespace

double mcae_loss(const ModelParams& params, const FrameSequence& x_a, const FrameSequence& x_a_pair,
                 const ImageGrid& x_v, const ImageGrid& x_v_pair, const LossWeights& w) {
  ad::Tape tape(false);
  Bound net(tape, params);
  const FrameSequence* a[] = {&x_a};
  const FrameSequence* a_pair[] = {&x_a_pair};
  const ImageGrid* v[] = {&x_v};
  const ImageGrid* v_pair[] = {&x_v_pair};
  Var z_a = speech_encoder_forward(net, a);
  Var z_v = vision_encoder_forward(net, v);
  return mcae_loss_from_latents(net, z_a, z_v, a_pair, tape.constant(pixel_matrix(v_pair)), w).value()(0, 0);
}

double mtriplet_loss(const Embedding& z_a, const Embedding& z_v, const Embedding& z_a_neg, const Embedding& z_v_neg,
                     double margin) {
  const double pos = cosine_distance(z_a, z_v);
  return std::max(0.0, margin + pos - cosine_distance(z_a, z_v_neg)) +
         std::max(0.0, margin + pos - cosine_distance(z_a_neg, z_v));
}

Var mcae_loss_from_latents(Bound& net, Var z_a, Var z_v, std::span<const FrameSequence* const> a_targets,
                           Var v_targets, const LossWeights& w) {
  Var total;
  auto accumulate = [&](Var term, double alpha) {
    if (alpha == 0.0) return;
    Var scaled = ad::scale(term, alpha);
    total = total.valid() ? ad::add(total, scaled) : scaled;
  };
  if (w.alpha_a != 0.0) accumulate(speech_decoder_loss(net, z_a, a_targets), w.alpha_a);
  if (w.alpha_v != 0.0) {
    accumulate(ad::sum_squares_cols(ad::sub(vision_decoder_forward(net, z_v), v_targets)), w.alpha_v);
  }
  Var lz = ad::sum_squares_cols(ad::sub(z_a, z_v));
  if (!total.valid()) return ad::scale(lz, w.alpha_z);
  accumulate(lz, w.alpha_z);
  return total;
}

Var mtriplet_loss_vars(Var z_a, Var z_v, Var z_a_neg, Var z_v_neg, double margin) {
  Var pos = ad::cosine_distance_cols(z_a, z_v);
  Var t1 = ad::relu(ad::add_scalar(ad::sub(pos, ad::cosine_distance_cols(z_a, z_v_neg)), margin));
  Var t2 = ad::relu(ad::add_scalar(ad::sub(pos, ad::cosine_distance_cols(z_a_neg, z_v)), margin));
  return ad::add(t1, t2);
}

ArchSpec mcae_arch(ArchSpec base) {
  base.speech_encoder = base.speech_decoder = base.vision_encoder = base.vision_decoder = true;
  base.head_classes = 0;
  base.head_modality.clear();
  return base;
}

ArchSpec mtriplet_arch(ArchSpec base) {
  base.speech_encoder = base.vision_encoder = true;
  base.speech_decoder = base.vision_decoder = false;
  base.head_classes = 0;
  base.head_modality.clear();
  return base;
}

// ---- training -------------------------------------------------------------------

namespace {

using Negatives = std::vector<std::pair<std::size_t, std::size_t>>;

struct Gather {
  const PairCorpus& c;

  std::vector<const FrameSequence*> speech(std::span<const std::size_t> idx) const {
    std::vector<const FrameSequence*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(&c.speech[i]);
    return out;
  }
  std::vector<const ImageGrid*> images(std::span<const std::size_t> idx) const {
    std::vector<const ImageGrid*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(&c.images[i]);
    return out;
  }
};

Var mcae_batch(Bound& net, const PairCorpus& c, std::span<const std::size_t> pair_idx, const LossWeights& w) {
  std::vector<std::size_t> a, a_pos, v, v_pos;
  for (std::size_t p : pair_idx) {
    const auto& pr = c.pairs[p];
    a.push_back(pr.speech);
    a_pos.push_back(c.speech_positive[pr.speech]);
    v.push_back(pr.image);
    v_pos.push_back(c.image_positive[pr.image]);
  }
  Gather g{c};
  const auto a_items = g.speech(a);
  const auto a_targets = g.speech(a_pos);
  const auto v_items = g.images(v);
  const auto v_targets = g.images(v_pos);
  Var z_a = speech_encoder_forward(net, a_items);
  Var z_v = vision_encoder_forward(net, v_items);
  return mcae_loss_from_latents(net, z_a, z_v, a_targets, net.tape().constant(pixel_matrix(v_targets)), w);
}

Var mtriplet_batch(Bound& net, const PairCorpus& c, std::span<const std::size_t> pair_idx, const Negatives& neg,
                   double margin) {
  // Anchors and negatives share one encoder pass per modality.
  const std::size_t b = pair_idx.size();
  std::vector<std::size_t> a, v;
  for (std::size_t p : pair_idx) a.push_back(c.pairs[p].speech);
  for (std::size_t p : pair_idx) a.push_back(neg[p].first);
  for (std::size_t p : pair_idx) v.push_back(c.pairs[p].image);
  for (std::size_t p : pair_idx) v.push_back(neg[p].second);
  Gather g{c};
  Var za_all = speech_encoder_forward(net, g.speech(a));
  Var zv_all = vision_encoder_forward(net, g.images(v));
  auto half = [&](Var all, bool anchor) {
    // Columns [0, b) are anchors, [b, 2b) negatives.
    Matrix pick = Matrix::Zero(2 * b, b);
    for (std::size_t j = 0; j < b; ++j) pick(static_cast<Eigen::Index>(anchor ? j : b + j), static_cast<Eigen::Index>(j)) = 1.0;
    return ad::matmul(all, net.tape().constant(std::move(pick)));
  };
  return mtriplet_loss_vars(half(za_all, true), half(zv_all, true), half(za_all, false), half(zv_all, false), margin);
}

Matrix normalized_columns(const Matrix& table) {
  Matrix out = table;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double n = out.col(j).norm();
    if (n == 0.0) throw DegenerateVectorError("zero-norm embedding while mining negatives");
    out.col(j) /= n;
  }
  return out;
}

using BatchLoss = std::function<Var(Bound&, const PairCorpus&, std::span<const std::size_t>, bool validation)>;

double corpus_loss(const ModelParams& params, const PairCorpus& corpus, const BatchLoss& loss) {
  double total = 0.0;
  std::vector<std::size_t> idx(corpus.pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t start = 0; start < idx.size(); start += 64) {
    const std::size_t n = std::min<std::size_t>(64, idx.size() - start);
    ad::Tape tape(false);
    Bound net(tape, params);
    total += loss(net, corpus, std::span<const std::size_t>(idx).subspan(start, n), true).value().sum();
  }
  return total / static_cast<double>(corpus.pairs.size());
}

TrainResult run_training(const PairCorpus& train, const PairCorpus& validation, ModelParams params,
                         const TrainConfig& cfg, const std::function<void(int, const ModelParams&)>& prepare_epoch,
                         const std::function<void(const ModelParams&)>& prepare_validation, const BatchLoss& loss,
                         const EpochCallback& on_epoch) {
  TrainResult result;
  Adam adam(cfg.learning_rate);
  std::vector<double> history;
  ModelParams best = params;
  const std::uint64_t order_seed = derive_seed(cfg.seed, "batch_order");
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_epoch(epoch, params);
    Rng rng(derive_seed(order_seed, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> order = rng.permutation(train.pairs.size());
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      ad::Tape tape;
      Bound net(tape, params);
      Var per_example = loss(net, train, std::span<const std::size_t>(order).subspan(start, n), false);
      sum += per_example.value().sum();
      tape.backward(ad::mean(per_example));
      adam.step(params);
    }
    if (!params.finite()) throw StateError("training diverged: non-finite parameters at epoch " + std::to_string(epoch));
    EpochLog row;
    row.epoch = epoch;
    row.train_loss = sum / static_cast<double>(order.size());
    prepare_validation(params);
    row.validation_loss = corpus_loss(params, validation, loss);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(row.validation_loss);
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
    const StopDecision d = early_stop(history, cfg.patience);
    if (d.best_epoch + 1 == history.size()) best = params;
    result.best_epoch = d.best_epoch;
    if (d.action == StopAction::Stop) break;
  }
  result.params = std::move(best);
  return result;
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> mine_corpus_negatives(const ModelParams& params,
                                                                       const PairCorpus& corpus,
                                                                       std::size_t k_sample, std::uint64_t seed) {
  std::vector<const FrameSequence*> speech;
  std::vector<const ImageGrid*> images;
  for (const auto& s : corpus.speech) speech.push_back(&s);
  for (const auto& v : corpus.images) images.push_back(&v);
  const Matrix zs = normalized_columns(encode_speech_table(params, speech));
  const Matrix zv = normalized_columns(encode_image_table(params, images));
  auto dist = [](const Matrix& z) {
    return [&z](std::size_t i, std::size_t j) { return std::clamp(1.0 - z.col(i).dot(z.col(j)), 0.0, 2.0); };
  };
  const PairDistance ds = dist(zs), dv = dist(zv);
  Rng rng(seed);
  Negatives out;
  out.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) {
    const std::size_t a = mine_hard_negative(p.speech, p.pivot_class, corpus.speech_class, ds, k_sample, rng);
    const std::size_t v = mine_hard_negative(p.image, p.pivot_class, corpus.image_class, dv, k_sample, rng);
    out.emplace_back(a, v);
  }
  return out;
}

TrainResult train_mcae(const PairCorpus& train, const PairCorpus& validation, ModelParams init,
                       const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  train.validate(true);
  validation.validate(true);
  const LossWeights w = cfg.weights;
  auto loss = [w](Bound& net, const PairCorpus& c, std::span<const std::size_t> idx, bool) {
    return mcae_batch(net, c, idx, w);
  };
  return run_training(
      train, validation, std::move(init), cfg, [](int, const ModelParams&) {}, [](const ModelParams&) {}, loss,
      on_epoch);
}

TrainResult train_mtriplet(const PairCorpus& train, const PairCorpus& validation, ModelParams init,
                           const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  train.validate(false);
  validation.validate(false);
  Negatives train_neg, val_neg;
  const std::uint64_t neg_seed = derive_seed(cfg.seed, "train_negatives");
  const std::uint64_t val_seed = derive_seed(cfg.seed, "validation_negatives");
  auto prepare = [&](int epoch, const ModelParams& params) {
    train_neg = mine_corpus_negatives(params, train, cfg.k_sample, derive_seed(neg_seed, static_cast<std::uint64_t>(epoch)));
  };
  // Validation negatives follow the model too, drawn with a fixed seed.
  auto prepare_validation = [&](const ModelParams& params) {
    val_neg = mine_corpus_negatives(params, validation, cfg.k_sample, val_seed);
  };
  auto loss = [&](Bound& net, const PairCorpus& c, std::span<const std::size_t> idx, bool is_validation) {
    return mtriplet_batch(net, c, idx, is_validation ? val_neg : train_neg, cfg.margin);
  };
  return run_training(train, validation, std::move(init), cfg, prepare, prepare_validation, loss, on_epoch);
}

}  // namespace mmfs
