#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mmfs/error.hpp"
#include "mmfs/networks.hpp"
#include "test_util.hpp"

using namespace mmfs;
using mmfs::testing::TempDir;

namespace {

ArchSpec tiny_arch() {
  ArchSpec a;
  a.latent_dim = 6;
  a.speech_layers = 2;
  a.speech_hidden = 7;
  a.decoder_hidden = 5;
  a.conv1_channels = 2;
  a.conv2_channels = 3;
  a.speech_decoder = true;
  a.vision_decoder = true;
  return a;
}

std::vector<const FrameSequence*> frame_ptrs(const SpeechSet& s) {
  std::vector<const FrameSequence*> out;
  for (const auto& item : s.items) out.push_back(&item.frames);
  return out;
}

std::vector<const ImageGrid*> grid_ptrs(const ImageSet& s) {
  std::vector<const ImageGrid*> out;
  for (const auto& item : s.items) out.push_back(&item.grid);
  return out;
}

}  // namespace

TEST(Networks, ReferenceShapes) {
  const ModelParams p = init_params(ArchSpec{}, 1);
  EXPECT_EQ(p.at("speech_enc.l0.wx").value.rows(), 800);
  EXPECT_EQ(p.at("speech_enc.l0.wx").value.cols(), 13);
  EXPECT_EQ(p.at("speech_enc.l2.wh").value.cols(), 200);
  EXPECT_EQ(p.at("speech_enc.out.w").value.rows(), 130);
  EXPECT_EQ(p.at("vision_enc.conv1.w").value.rows(), 32);
  EXPECT_EQ(p.at("vision_enc.conv2.w").value.cols(), 32 * 9);
  EXPECT_EQ(p.at("vision_enc.out.w").value.cols(), 64 * 7 * 7);
  EXPECT_THROW(p.at("speech_dec.rnn.wx"), StateError);
  const SynthDigits d = synth_paired_digits(1, 0.1, 2);
  EXPECT_EQ(encode_speech(p, d.speech.items[0].frames).size(), 130);
  EXPECT_EQ(encode_image(p, d.images.items[0].grid).size(), 130);
}

TEST(Networks, InitDeterministicAndForgetBias) {
  const ModelParams a = init_params(tiny_arch(), 5), b = init_params(tiny_arch(), 5), c = init_params(tiny_arch(), 6);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) EXPECT_EQ(t.value, b.at(name).value) << name;
  EXPECT_NE(a.at("speech_enc.l0.wx").value, c.at("speech_enc.l0.wx").value);
  const auto& bias = a.at("speech_enc.l0.b").value;
  for (int i = 0; i < 7; ++i) {
    EXPECT_EQ(bias(i, 0), 0.0);
    EXPECT_EQ(bias(7 + i, 0), 1.0);
  }
  EXPECT_TRUE(a.finite());
}

TEST(Networks, BatchedEncodingMatchesSingle) {
  const ModelParams p = init_params(tiny_arch(), 3);
  const SynthDigits d = synth_paired_digits(2, 0.3, 4);
  const auto speech = frame_ptrs(d.speech);
  const auto images = grid_ptrs(d.images);
  // Variable-length sequences share one padded batch.
  const Eigen::MatrixXd st = encode_speech_table(p, speech, 5);
  const Eigen::MatrixXd it = encode_image_table(p, images, 7);
  ASSERT_EQ(st.cols(), static_cast<Eigen::Index>(speech.size()));
  for (std::size_t i = 0; i < speech.size(); ++i) {
    EXPECT_LT((st.col(static_cast<Eigen::Index>(i)) - encode_speech(p, *speech[i])).norm(), 1e-12);
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    EXPECT_LT((it.col(static_cast<Eigen::Index>(i)) - encode_image(p, *images[i])).norm(), 1e-12);
  }
}

TEST(Networks, DecoderOutputs) {
  const ModelParams p = init_params(tiny_arch(), 3);
  const Embedding z = Embedding::Constant(6, 0.2);
  const FrameSequence f = decode_speech(p, z, 9);
  EXPECT_EQ(f.length(), 9);
  EXPECT_EQ(f.dim(), 13);
  const ImageGrid g = decode_image(p, z);
  for (double v : g.pixels) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(decode_speech(p, z, 0), ArgumentError);
}

TEST(Networks, SpeechDecoderLossMatchesDecode) {
  const ModelParams p = init_params(tiny_arch(), 8);
  const SynthDigits d = synth_paired_digits(1, 0.3, 4);
  const FrameSequence& t0 = d.speech.items[0].frames;
  const FrameSequence& t1 = d.speech.items[5].frames;
  Eigen::MatrixXd z(6, 2);
  z.col(0) = Embedding::Constant(6, 0.1);
  z.col(1) = Embedding::Constant(6, -0.3);
  ad::Tape tape(false);
  Bound net(tape, p);
  const std::vector<const FrameSequence*> targets{&t0, &t1};
  const Eigen::MatrixXd loss = speech_decoder_loss(net, tape.constant(z), targets).value();
  ASSERT_EQ(loss.cols(), 2);
  const FrameSequence r0 = decode_speech(p, z.col(0), t0.length());
  const FrameSequence r1 = decode_speech(p, z.col(1), t1.length());
  EXPECT_NEAR(loss(0, 0), (r0.frames - t0.frames).squaredNorm(), 1e-9);
  EXPECT_NEAR(loss(0, 1), (r1.frames - t1.frames).squaredNorm(), 1e-9);
}

TEST(Networks, ArchValidation) {
  ArchSpec a;
  a.image_side = 30;
  EXPECT_THROW(a.validate(), ArgumentError);
  ArchSpec h;
  h.head_classes = 3;
  h.head_modality = "touch";
  EXPECT_THROW(h.validate(), ArgumentError);
  ArchSpec j = tiny_arch();
  nlohmann::json js = j;
  EXPECT_EQ(js.get<ArchSpec>(), j);
}

TEST(Networks, AdamStepMovesAgainstGradient) {
  ModelParams p = init_params(tiny_arch(), 1);
  auto& w = p.at("vision_enc.out.b");
  const Eigen::MatrixXd before = w.value;
  p.zero_grad();
  w.grad.setConstant(2.0);
  Adam adam(0.01);
  adam.step(p);
  // First Adam step is lr * sign(g) up to epsilon.
  EXPECT_LT(((before.array() - 0.01) - w.value.array()).abs().maxCoeff(), 1e-8);
  EXPECT_EQ(w.grad.norm(), 0.0);
}

TEST(Checkpoint, RoundTrip) {
  TempDir dir("ck");
  ArchSpec a = tiny_arch();
  a.head_classes = 3;
  a.head_modality = "vision";
  ModelParams p = init_params(a, 11);
  p.head_labels = {"a", "b", "c"};
  save_checkpoint(dir / "m.ck", p, {{"note", "x"}}, 42);
  const Checkpoint ck = load_checkpoint(dir / "m.ck");
  EXPECT_EQ(ck.seed, 42u);
  EXPECT_EQ(ck.config["note"], "x");
  EXPECT_EQ(ck.params.arch, a);
  EXPECT_EQ(ck.params.head_labels, p.head_labels);
  for (const auto& [name, t] : p.tensors) {
    const auto& back = ck.params.at(name).value;
    ASSERT_EQ(back.rows(), t.value.rows());
    for (Eigen::Index k = 0; k < back.size(); ++k) {
      EXPECT_EQ(back.data()[k], static_cast<double>(static_cast<float>(t.value.data()[k])));
    }
  }
  // Saving the loaded model reproduces the file.
  save_checkpoint(dir / "n.ck", ck.params, ck.config, ck.seed);
  EXPECT_EQ(mmfs::testing::read_bytes(dir / "m.ck"), mmfs::testing::read_bytes(dir / "n.ck"));
  EXPECT_FALSE(std::filesystem::exists(dir / "m.ck.tmp"));
}

TEST(Checkpoint, Errors) {
  TempDir dir("ck");
  EXPECT_THROW(load_checkpoint(dir / "missing.ck"), IoError);
  mmfs::testing::write_bytes(dir / "bad.ck", std::vector<std::uint8_t>{'N', 'O', 'P', 'E', 1, 0, 0, 0});
  EXPECT_THROW(load_checkpoint(dir / "bad.ck"), FormatError);
  save_checkpoint(dir / "ok.ck", init_params(tiny_arch(), 1), nlohmann::json::object(), 1);
  auto bytes = mmfs::testing::read_bytes(dir / "ok.ck");
  bytes.resize(bytes.size() - 5);
  mmfs::testing::write_bytes(dir / "short.ck", bytes);
  EXPECT_THROW(load_checkpoint(dir / "short.ck"), FormatError);
}

TEST(Classifier, RejectsDigitLabels) {
  SynthBackground bg = synth_background(3, 4, 0.1, 1);
  bg.images.items[0].label = "7";
  bg.speech.items[0].label = "seven";
  ClassifierConfig cfg;
  cfg.arch = tiny_arch();
  cfg.max_epochs = 1;
  EXPECT_THROW(train_classifier(bg.images, cfg), ContaminationError);
  EXPECT_THROW(train_classifier(bg.speech, cfg), ContaminationError);
  const SynthBackground one = synth_background(1, 4, 0.1, 1);
  EXPECT_THROW(train_classifier(one.images, cfg), ArgumentError);
}

TEST(Classifier, LearnsSeparableBackground) {
  const SynthBackground bg = synth_background(4, 20, 0.2, 3);
  ClassifierConfig cfg;
  cfg.arch = tiny_arch();
  cfg.arch.conv1_channels = 4;
  cfg.arch.conv2_channels = 6;
  cfg.arch.speech_hidden = 16;
  cfg.arch.latent_dim = 16;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  cfg.max_epochs = 15;
  cfg.seed = 3;
  const ClassifierResult vision = train_classifier(bg.images, cfg);
  EXPECT_GE(vision.validation_accuracy, 0.9);
  EXPECT_EQ(vision.params.head_labels.size(), 4u);
  EXPECT_FALSE(vision.params.arch.speech_encoder);
  EXPECT_EQ(classifier_embedding(vision.params, bg.images.items[0].grid).size(), 16);
  EXPECT_THROW(classifier_embedding(vision.params, bg.speech.items[0].frames), StateError);

  const ClassifierResult speech = train_classifier(bg.speech, cfg);
  EXPECT_GE(speech.validation_accuracy, 0.9);

  const ClassifierResult again = train_classifier(bg.images, cfg);
  EXPECT_EQ(again.validation_losses, vision.validation_losses);
}
