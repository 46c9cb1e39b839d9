#pragma once

// Finite-difference checks of the composed model losses on reduced-size
// networks. Shared by the unit tests and the acceptance binary.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmfs/models.hpp"
#include "mmfs/networks.hpp"
#include "mmfs/rng.hpp"

namespace mmfs::testing {

inline ArchSpec gradcheck_arch() {
  ArchSpec a;
  a.frame_dim = 3;
  a.latent_dim = 4;
  a.speech_layers = 2;
  a.speech_hidden = 3;
  a.decoder_hidden = 3;
  a.image_side = 8;
  a.conv1_channels = 2;
  a.conv2_channels = 2;
  return a;
}

struct GradInstance {
  std::vector<FrameSequence> speech;  // anchors, pairs, negatives
  Eigen::MatrixXd pixels;             // side*side x count
};

inline GradInstance random_instance(Rng& rng, const ArchSpec& arch, int count) {
  GradInstance g;
  for (int i = 0; i < count; ++i) {
    Eigen::MatrixXd f(arch.frame_dim, 2 + static_cast<int>(rng.below(3)));
    for (Eigen::Index k = 0; k < f.size(); ++k) f.data()[k] = rng.uniform(-1, 1);
    g.speech.emplace_back(f);
  }
  g.pixels.resize(arch.image_side * arch.image_side, count);
  for (Eigen::Index k = 0; k < g.pixels.size(); ++k) g.pixels.data()[k] = rng.uniform(0, 1);
  return g;
}

using LossBuilder = std::function<ad::Var(Bound&)>;

struct GradCheck {
  double relative_error = 0.0;
  // False when a ReLU or max-pool switch lies within +-h of some parameter,
  // detected by one-sided differences that disagree.
  bool smooth = true;
};

// Norm-wise relative error ||analytic - numeric|| / (||analytic|| + ||numeric||)
// over every parameter entry, with central differences of step h.
inline GradCheck gradient_relative_error(ModelParams& params, const LossBuilder& loss, double h = 1e-5) {
  params.zero_grad();
  {
    ad::Tape tape;
    Bound net(tape, params);
    tape.backward(ad::sum(loss(net)));
  }
  auto eval = [&] {
    ad::Tape tape(false);
    Bound net(tape, static_cast<const ModelParams&>(params));
    return ad::sum(loss(net)).value()(0, 0);
  };
  const double centre = eval();
  GradCheck out;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto& [name, t] : params.tensors) {
    for (Eigen::Index k = 0; k < t.value.size(); ++k) {
      const double keep = t.value.data()[k];
      t.value.data()[k] = keep + h;
      const double up = eval();
      t.value.data()[k] = keep - h;
      const double down = eval();
      t.value.data()[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double forward = (up - centre) / h, backward = (centre - down) / h;
      if (std::abs(forward - backward) > 1e-3 * std::max(1.0, std::abs(numeric))) out.smooth = false;
      const double analytic = t.grad.data()[k];
      diff2 += (numeric - analytic) * (numeric - analytic);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
  }
  const double denom = std::sqrt(a2) + std::sqrt(n2);
  out.relative_error = denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
  return out;
}

inline std::vector<const FrameSequence*> ptrs(const std::vector<FrameSequence>& v, std::size_t from, std::size_t n) {
  std::vector<const FrameSequence*> out;
  for (std::size_t i = from; i < from + n; ++i) out.push_back(&v[i]);
  return out;
}

inline ad::Var pixel_cols(Bound& net, const Eigen::MatrixXd& pixels, Eigen::Index from, Eigen::Index n) {
  return net.tape().constant(pixels.middleCols(from, n));
}

// Speech CAE: encode x, decode towards its pair.
inline LossBuilder speech_cae_builder(const GradInstance& g, std::size_t batch) {
  return [&g, batch](Bound& net) {
    ad::Var z = speech_encoder_forward(net, ptrs(g.speech, 0, batch));
    return speech_decoder_loss(net, z, ptrs(g.speech, batch, batch));
  };
}

// Vision CAE on raw pixel columns.
inline LossBuilder vision_cae_builder(const GradInstance& g, Eigen::Index batch) {
  return [&g, batch](Bound& net) {
    ad::Var z = vision_encoder_forward_raw(net, pixel_cols(net, g.pixels, 0, batch));
    return ad::sum_squares_cols(ad::sub(vision_decoder_forward(net, z), pixel_cols(net, g.pixels, batch, batch)));
  };
}

inline LossBuilder mcae_builder(const GradInstance& g, std::size_t batch, LossWeights w) {
  return [&g, batch, w](Bound& net) {
    const auto b = static_cast<Eigen::Index>(batch);
    ad::Var za = speech_encoder_forward(net, ptrs(g.speech, 0, batch));
    ad::Var zv = vision_encoder_forward_raw(net, pixel_cols(net, g.pixels, 0, b));
    return mcae_loss_from_latents(net, za, zv, ptrs(g.speech, batch, batch), pixel_cols(net, g.pixels, b, b), w);
  };
}

inline LossBuilder mtriplet_builder(const GradInstance& g, std::size_t batch, double margin) {
  return [&g, batch, margin](Bound& net) {
    const auto b = static_cast<Eigen::Index>(batch);
    ad::Var za = speech_encoder_forward(net, ptrs(g.speech, 0, batch));
    ad::Var zv = vision_encoder_forward_raw(net, pixel_cols(net, g.pixels, 0, b));
    ad::Var za_neg = speech_encoder_forward(net, ptrs(g.speech, batch, batch));
    ad::Var zv_neg = vision_encoder_forward_raw(net, pixel_cols(net, g.pixels, b, b));
    return mtriplet_loss_vars(za, zv, za_neg, zv_neg, margin);
  };
}

// Hinge arguments of the triplet loss, to keep instances away from the kink.
inline double min_hinge_gap(ModelParams& params, const GradInstance& g, std::size_t batch, double margin) {
  ad::Tape tape(false);
  Bound net(tape, static_cast<const ModelParams&>(params));
  const auto b = static_cast<Eigen::Index>(batch);
  ad::Var za = speech_encoder_forward(net, ptrs(g.speech, 0, batch));
  ad::Var zv = vision_encoder_forward_raw(net, pixel_cols(net, g.pixels, 0, b));
  ad::Var za_neg = speech_encoder_forward(net, ptrs(g.speech, batch, batch));
  ad::Var zv_neg = vision_encoder_forward_raw(net, pixel_cols(net, g.pixels, b, b));
  const Eigen::MatrixXd pos = ad::cosine_distance_cols(za, zv).value();
  const Eigen::MatrixXd n1 = ad::cosine_distance_cols(za, zv_neg).value();
  const Eigen::MatrixXd n2 = ad::cosine_distance_cols(za_neg, zv).value();
  double gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < pos.cols(); ++j) {
    gap = std::min(gap, std::abs(margin + pos(0, j) - n1(0, j)));
    gap = std::min(gap, std::abs(margin + pos(0, j) - n2(0, j)));
  }
  return gap;
}

struct GradReport {
  int instances = 0;
  int skipped = 0;  // draws rejected as non-differentiable
  double worst = 0.0;
};

// Runs `instances` random checks of one loss family: "speech_cae",
// "vision_cae", "mcae" or "mtriplet".
inline GradReport run_gradient_checks(const std::string& family, int instances, std::uint64_t seed) {
  Rng rng(seed);
  GradReport report;
  const ArchSpec base = gradcheck_arch();
  const ArchSpec arch = family == "mtriplet" ? mtriplet_arch(base) : mcae_arch(base);
  while (report.instances < instances) {
    ModelParams params = init_params(arch, rng.next_u64());
    // Zero-initialized biases put ReLUs fed only by zeros exactly on the kink.
    for (auto& [name, t] : params.tensors) {
      for (Eigen::Index k = 0; k < t.value.size(); ++k) t.value.data()[k] += rng.uniform(-0.1, 0.1);
    }
    const std::size_t batch = 1 + rng.below(2);
    const GradInstance g = random_instance(rng, arch, static_cast<int>(2 * batch));
    LossBuilder loss;
    if (family == "speech_cae") {
      loss = speech_cae_builder(g, batch);
    } else if (family == "vision_cae") {
      loss = vision_cae_builder(g, static_cast<Eigen::Index>(batch));
    } else if (family == "mcae") {
      loss = mcae_builder(g, batch, LossWeights{});
    } else {
      const double margin = 0.2;
      // Skip instances sitting on a hinge kink or with both hinges inactive.
      if (min_hinge_gap(params, g, batch, margin) < 1e-3) {
        ++report.skipped;
        continue;
      }
      loss = mtriplet_builder(g, batch, margin);
      ad::Tape probe(false);
      Bound net(probe, static_cast<const ModelParams&>(params));
      if (ad::sum(loss(net)).value()(0, 0) == 0.0) {
        ++report.skipped;
        continue;
      }
    }
    const GradCheck check = gradient_relative_error(params, loss);
    if (!check.smooth) {
      ++report.skipped;
      continue;
    }
    report.worst = std::max(report.worst, check.relative_error);
    ++report.instances;
  }
  return report;
}

}  // namespace mmfs::testing
