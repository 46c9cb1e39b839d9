#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

namespace mmfs {

inline constexpr int kImageSide = 28;
inline constexpr int kImagePixels = kImageSide * kImageSide;

// 28x28 grayscale image, row-major, pixels in [0, 1].
struct ImageGrid {
  std::array<double, kImagePixels> pixels{};

  double& at(int row, int col) { return pixels[row * kImageSide + col]; }
  double at(int row, int col) const { return pixels[row * kImageSide + col]; }
  bool operator==(const ImageGrid&) const = default;
};

// Variable-length sequence of speech feature frames. Stored dim x length:
// column t is frame t.
struct FrameSequence {
  Eigen::MatrixXd frames;

  FrameSequence() = default;
  explicit FrameSequence(Eigen::MatrixXd f) : frames(std::move(f)) {}
  int length() const { return static_cast<int>(frames.cols()); }
  int dim() const { return static_cast<int>(frames.rows()); }
  bool operator==(const FrameSequence& o) const {
    return frames.rows() == o.frames.rows() && frames.cols() == o.frames.cols() &&
           frames == o.frames;
  }
};

struct ImageItem {
  std::string id;
  ImageGrid grid;
  std::optional<std::string> label;
};

struct SpeechItem {
  std::string id;
  FrameSequence frames;
  std::optional<std::string> label;
};

struct ImageSet {
  std::vector<ImageItem> items;

  std::size_t size() const { return items.size(); }
  // Throws ShapeError / ArgumentError when the set invariants do not hold.
  void validate() const;
};

struct SpeechSet {
  int frame_dim = 0;
  std::vector<SpeechItem> items;

  std::size_t size() const { return items.size(); }
  void validate() const;
};

// Ground-truth class structure for the paired digits task. Only used for
// oracle pairing, episode construction and scoring.
struct PairLabels {
  std::vector<std::string> class_names;            // spoken classes
  std::map<std::string, int> visual_of_class;      // spoken class -> visual digit
  std::map<std::string, std::string> speech_to_class;
  std::map<std::string, int> image_to_class;

  int visual_class(const std::string& spoken_class) const;
  bool has_class(const std::string& spoken_class) const;
};

struct SplitSpec {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

template <class Set>
struct SplitResult {
  Set train;
  Set validation;
  Set test;
};

// The eleven spoken digit classes and their visual digits.
const std::vector<std::string>& digit_class_names();
int digit_visual_class(const std::string& spoken_class);
PairLabels digit_pair_labels();
// Labels that must never appear in background (transfer) data.
const std::vector<std::string>& default_digit_exclusions();

// ---- IDX ------------------------------------------------------------------

struct RawImages {
  int rows = 0;
  int cols = 0;
  std::vector<std::vector<double>> images;  // row-major, values in [0, 1]
};

RawImages load_idx_raw(const std::filesystem::path& path);
ImageSet load_idx_images(const std::filesystem::path& path,
                         const std::optional<std::filesystem::path>& labels = std::nullopt);
std::vector<std::uint8_t> load_idx_labels(const std::filesystem::path& path);
// Pixels are quantized with round(p * 255).
void write_idx_images(const std::filesystem::path& path, const ImageSet& set);
void write_idx_raw(const std::filesystem::path& path, const RawImages& raw);
// Labels must be integers in [0, 255].
void write_idx_labels(const std::filesystem::path& path, const ImageSet& set);

// ---- MFCA feature archives ------------------------------------------------

SpeechSet load_feature_archive(const std::filesystem::path& path);
void write_feature_archive(const std::filesystem::path& path, const SpeechSet& set);
std::vector<std::uint8_t> encode_feature_archive(const SpeechSet& set);
SpeechSet decode_feature_archive(const std::vector<std::uint8_t>& bytes);

// "id<TAB>label" per line.
void write_label_table(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, std::string>>& rows);
std::map<std::string, std::string> load_label_table(const std::filesystem::path& path);
void attach_labels(SpeechSet& set, const std::map<std::string, std::string>& labels);

// ---- transforms -----------------------------------------------------------

// Inverts (p -> 1 - p) then area-averages down to 28x28.
ImageGrid preprocess_background_image(const std::vector<double>& raw, int side);

ImageSet strip_labels(const ImageSet& set);
SpeechSet strip_labels(const SpeechSet& set);

SplitResult<ImageSet> split(const ImageSet& set, const SplitSpec& spec);
SplitResult<SpeechSet> split(const SpeechSet& set, const SplitSpec& spec);

// Index-level split used by both overloads above. Stratified by label when
// every item has one; remainders go to train.
std::array<std::vector<std::size_t>, 3> split_indices(
    const std::vector<std::optional<std::string>>& labels, const SplitSpec& spec);

// ---- synthetic data -------------------------------------------------------

inline constexpr int kSynthFrameDim = 13;

struct SynthDigits {
  SpeechSet speech;
  ImageSet images;
  PairLabels labels;
};

// Paired digits stand-in: 11 spoken classes (one..nine, zero, oh) and 10
// visual classes, each item a fixed class prototype plus uniform noise.
SynthDigits synth_paired_digits(int n_per_class, double noise, std::uint64_t seed);

struct SynthBackground {
  SpeechSet speech;
  ImageSet images;
};

// Non-digit labelled background data for transfer learning. Class names are
// "bg00", "bg01", ...; glyphs always contain a diagonal stroke so they can
// never coincide with a digit.
SynthBackground synth_background(int n_classes, int n_per_class, double noise,
                                 std::uint64_t seed);

// Prototype accessors (noise-free), exposed for tests.
FrameSequence speech_prototype(const std::string& spoken_class);
ImageGrid digit_glyph(int digit);

}  // namespace mmfs
