#include "mmfs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include "mmfs/error.hpp"
#include "mmfs/rng.hpp"

namespace mmfs {

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr char kMfcaMagic[4] = {'M', 'F', 'C', 'A'};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(what_ + ": truncated payload");
  }
  std::uint32_t u32_be() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  std::uint32_t u32_le() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint16_t u16_le() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  float f32_le() {
    const std::uint32_t bits = u32_le();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16_le(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32_le(out, bits);
}

std::string padded_index(std::size_t index, std::size_t count) {
  std::size_t width = 1;
  for (std::size_t n = count; n >= 10; n /= 10) ++width;
  std::string s = std::to_string(index);
  if (s.size() < width) s.insert(0, width - s.size(), '0');
  return s;
}

std::string padded3(int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", k);
  return buf;
}

template <class Set>
void check_unique_ids(const Set& set) {
  std::set<std::string> seen;
  for (const auto& item : set.items) {
    if (!seen.insert(item.id).second) throw ArgumentError("duplicate item id '" + item.id + "'");
  }
}

}  // namespace

// ---- types ----------------------------------------------------------------

void ImageSet::validate() const {
  check_unique_ids(*this);
  for (const auto& item : items) {
    for (double p : item.grid.pixels) {
      if (!(p >= 0.0 && p <= 1.0)) throw ShapeError("pixel outside [0,1] in image '" + item.id + "'");
    }
  }
}

void SpeechSet::validate() const {
  if (frame_dim <= 0) throw ShapeError("frame_dim must be positive");
  check_unique_ids(*this);
  for (const auto& item : items) {
    if (item.frames.length() == 0) throw EmptyItemError("speech item '" + item.id + "' has no frames");
    if (item.frames.dim() != frame_dim) {
      throw ShapeError("speech item '" + item.id + "' has frame dim " +
                       std::to_string(item.frames.dim()) + ", expected " + std::to_string(frame_dim));
    }
  }
}

int PairLabels::visual_class(const std::string& spoken_class) const {
  auto it = visual_of_class.find(spoken_class);
  if (it == visual_of_class.end()) throw ArgumentError("unknown spoken class '" + spoken_class + "'");
  return it->second;
}

bool PairLabels::has_class(const std::string& spoken_class) const {
  return visual_of_class.count(spoken_class) != 0;
}

void SplitSpec::validate() const {
  for (double f : {train, validation, test}) {
    if (!(f > 0.0 && f < 1.0)) throw ArgumentError("split fractions must lie in (0,1)");
  }
  if (std::abs(train + validation + test - 1.0) > 1e-9) {
    throw ArgumentError("split fractions must sum to 1");
  }
}

const std::vector<std::string>& digit_class_names() {
  static const std::vector<std::string> names = {"one", "two",   "three", "four", "five", "six",
                                                 "seven", "eight", "nine", "zero", "oh"};
  return names;
}

int digit_visual_class(const std::string& spoken_class) {
  const auto& names = digit_class_names();
  for (std::size_t i = 0; i < 9; ++i) {
    if (names[i] == spoken_class) return static_cast<int>(i) + 1;
  }
  if (spoken_class == "zero" || spoken_class == "oh") return 0;
  throw ArgumentError("not a spoken digit class: '" + spoken_class + "'");
}

PairLabels digit_pair_labels() {
  PairLabels labels;
  labels.class_names = digit_class_names();
  for (const auto& name : labels.class_names) labels.visual_of_class[name] = digit_visual_class(name);
  return labels;
}

const std::vector<std::string>& default_digit_exclusions() {
  static const std::vector<std::string> excluded = [] {
    std::vector<std::string> v = digit_class_names();
    for (int d = 0; d <= 9; ++d) v.push_back(std::to_string(d));
    return v;
  }();
  return excluded;
}

// ---- IDX ------------------------------------------------------------------

RawImages load_idx_raw(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader in(bytes, path.string());
  if (in.u32_be() != kIdxImageMagic) throw FormatError(path.string() + ": bad IDX image magic");
  const std::uint32_t count = in.u32_be();
  RawImages raw;
  raw.rows = static_cast<int>(in.u32_be());
  raw.cols = static_cast<int>(in.u32_be());
  const std::size_t per_image = static_cast<std::size_t>(raw.rows) * raw.cols;
  in.need(per_image * count);
  raw.images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<double> img(per_image);
    for (auto& p : img) p = in.u8() / 255.0;
    raw.images.push_back(std::move(img));
  }
  return raw;
}

std::vector<std::uint8_t> load_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader in(bytes, path.string());
  if (in.u32_be() != kIdxLabelMagic) throw FormatError(path.string() + ": bad IDX label magic");
  const std::uint32_t count = in.u32_be();
  in.need(count);
  std::vector<std::uint8_t> labels(count);
  for (auto& l : labels) l = in.u8();
  return labels;
}

ImageSet load_idx_images(const std::filesystem::path& path,
                         const std::optional<std::filesystem::path>& labels) {
  RawImages raw = load_idx_raw(path);
  if (raw.rows != kImageSide || raw.cols != kImageSide) {
    throw ShapeError(path.string() + ": expected 28x28 images, found " + std::to_string(raw.rows) +
                     "x" + std::to_string(raw.cols));
  }
  std::vector<std::uint8_t> label_bytes;
  if (labels) {
    label_bytes = load_idx_labels(*labels);
    if (label_bytes.size() != raw.images.size()) {
      throw FormatError(labels->string() + ": label count does not match image count");
    }
  }
  ImageSet set;
  set.items.reserve(raw.images.size());
  for (std::size_t i = 0; i < raw.images.size(); ++i) {
    ImageItem item;
    item.id = padded_index(i, raw.images.size());
    std::copy(raw.images[i].begin(), raw.images[i].end(), item.grid.pixels.begin());
    if (labels) item.label = std::to_string(label_bytes[i]);
    set.items.push_back(std::move(item));
  }
  return set;
}

void write_idx_raw(const std::filesystem::path& path, const RawImages& raw) {
  std::vector<std::uint8_t> out;
  put_u32_be(out, kIdxImageMagic);
  put_u32_be(out, static_cast<std::uint32_t>(raw.images.size()));
  put_u32_be(out, static_cast<std::uint32_t>(raw.rows));
  put_u32_be(out, static_cast<std::uint32_t>(raw.cols));
  for (const auto& img : raw.images) {
    for (double p : img) {
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0)));
    }
  }
  write_file(path, out);
}

void write_idx_images(const std::filesystem::path& path, const ImageSet& set) {
  RawImages raw;
  raw.rows = raw.cols = kImageSide;
  for (const auto& item : set.items) raw.images.emplace_back(item.grid.pixels.begin(), item.grid.pixels.end());
  write_idx_raw(path, raw);
}

void write_idx_labels(const std::filesystem::path& path, const ImageSet& set) {
  std::vector<std::uint8_t> out;
  put_u32_be(out, kIdxLabelMagic);
  put_u32_be(out, static_cast<std::uint32_t>(set.items.size()));
  for (const auto& item : set.items) {
    if (!item.label) throw ArgumentError("image '" + item.id + "' has no label to write");
    int value = -1;
    try {
      std::size_t used = 0;
      value = std::stoi(*item.label, &used);
      if (used != item.label->size()) value = -1;
    } catch (const std::exception&) {
      value = -1;
    }
    if (value < 0 || value > 255) throw ArgumentError("IDX labels must be integers in [0,255]");
    out.push_back(static_cast<std::uint8_t>(value));
  }
  write_file(path, out);
}

// ---- MFCA -----------------------------------------------------------------

SpeechSet decode_feature_archive(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes, "MFCA archive");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMfcaMagic, 4) != 0) {
    throw FormatError("MFCA archive: magic mismatch");
  }
  in.str(4);
  const std::uint32_t count = in.u32_le();
  SpeechSet set;
  set.frame_dim = static_cast<int>(in.u32_le());
  if (set.frame_dim <= 0) throw ShapeError("MFCA archive: frame_dim must be positive");
  set.items.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    SpeechItem item;
    item.id = in.str(in.u16_le());
    const std::uint32_t frames = in.u32_le();
    if (frames == 0) throw EmptyItemError("MFCA item '" + item.id + "' has zero frames");
    in.need(static_cast<std::size_t>(frames) * set.frame_dim * 4);
    item.frames.frames.resize(set.frame_dim, frames);
    for (std::uint32_t t = 0; t < frames; ++t) {
      for (int d = 0; d < set.frame_dim; ++d) item.frames.frames(d, t) = in.f32_le();
    }
    set.items.push_back(std::move(item));
  }
  if (in.remaining() != 0) throw FormatError("MFCA archive: trailing bytes after last item");
  return set;
}

std::vector<std::uint8_t> encode_feature_archive(const SpeechSet& set) {
  for (const auto& item : set.items) {
    if (item.frames.length() == 0) throw EmptyItemError("speech item '" + item.id + "' has no frames");
    if (item.frames.dim() != set.frame_dim) {
      throw ShapeError("speech item '" + item.id + "' frame dim differs from archive dim");
    }
    if (item.id.size() > 0xffff) throw ArgumentError("speech id too long for MFCA");
  }
  std::vector<std::uint8_t> out(kMfcaMagic, kMfcaMagic + 4);
  put_u32_le(out, static_cast<std::uint32_t>(set.items.size()));
  put_u32_le(out, static_cast<std::uint32_t>(set.frame_dim));
  for (const auto& item : set.items) {
    put_u16_le(out, static_cast<std::uint16_t>(item.id.size()));
    out.insert(out.end(), item.id.begin(), item.id.end());
    put_u32_le(out, static_cast<std::uint32_t>(item.frames.length()));
    for (int t = 0; t < item.frames.length(); ++t) {
      for (int d = 0; d < set.frame_dim; ++d) put_f32_le(out, static_cast<float>(item.frames.frames(d, t)));
    }
  }
  return out;
}

SpeechSet load_feature_archive(const std::filesystem::path& path) {
  try {
    return decode_feature_archive(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_feature_archive(const std::filesystem::path& path, const SpeechSet& set) {
  write_file(path, encode_feature_archive(set));
}

void write_label_table(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, std::string>>& rows) {
  std::string text;
  for (const auto& [id, label] : rows) text += id + "\t" + label + "\n";
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::map<std::string, std::string> load_label_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ": expected id<TAB>label");
    labels[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return labels;
}

void attach_labels(SpeechSet& set, const std::map<std::string, std::string>& labels) {
  for (auto& item : set.items) {
    auto it = labels.find(item.id);
    if (it == labels.end()) throw ArgumentError("no label for speech item '" + item.id + "'");
    item.label = it->second;
  }
}

// ---- transforms -----------------------------------------------------------

ImageGrid preprocess_background_image(const std::vector<double>& raw, int side) {
  if (side <= 0 || raw.size() != static_cast<std::size_t>(side) * side) {
    throw ShapeError("background image must be square with side " + std::to_string(side));
  }
  // Each output cell covers a (scale x scale) window of the input; partial
  // overlaps are weighted by their area.
  const double scale = static_cast<double>(side) / kImageSide;
  ImageGrid out;
  for (int r = 0; r < kImageSide; ++r) {
    const double y0 = r * scale, y1 = (r + 1) * scale;
    for (int c = 0; c < kImageSide; ++c) {
      const double x0 = c * scale, x1 = (c + 1) * scale;
      double acc = 0.0;
      for (int iy = static_cast<int>(std::floor(y0)); iy < side && iy < y1; ++iy) {
        const double oy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
        if (oy <= 0) continue;
        for (int ix = static_cast<int>(std::floor(x0)); ix < side && ix < x1; ++ix) {
          const double ox = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
          if (ox <= 0) continue;
          acc += oy * ox * (1.0 - raw[static_cast<std::size_t>(iy) * side + ix]);
        }
      }
      out.at(r, c) = std::clamp(acc / (scale * scale), 0.0, 1.0);
    }
  }
  return out;
}

ImageSet strip_labels(const ImageSet& set) {
  ImageSet out = set;
  for (auto& item : out.items) item.label.reset();
  return out;
}

SpeechSet strip_labels(const SpeechSet& set) {
  SpeechSet out = set;
  for (auto& item : out.items) item.label.reset();
  return out;
}

std::array<std::vector<std::size_t>, 3> split_indices(
    const std::vector<std::optional<std::string>>& labels, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = labels.size();
  if (n == 0) throw ArgumentError("cannot split an empty set");

  // Half-way cases round down so the remainder lands in train.
  auto target = [](double x) { return static_cast<std::size_t>(std::floor(x + 0.5 - 1e-9)); };
  const std::size_t n_val = target(n * spec.validation);
  const std::size_t n_test = std::min(n - n_val, target(n * spec.test));

  std::array<std::vector<std::size_t>, 3> parts;  // train, validation, test
  const bool stratified =
      std::all_of(labels.begin(), labels.end(), [](const auto& l) { return l.has_value(); });

  if (!stratified) {
    Rng rng(derive_seed(spec.seed, "split"));
    const auto perm = rng.permutation(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t part = i < n_val ? 1 : (i < n_val + n_test ? 2 : 0);
      parts[part].push_back(perm[i]);
    }
  } else {
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < n; ++i) members[*labels[i]].push_back(i);

    struct Quota {
      std::size_t val = 0, test = 0;
    };
    std::map<std::string, Quota> quota;

    // Largest-remainder allocation so totals hit the global targets while
    // every class keeps at least one training item whenever possible.
    auto allocate = [&](double fraction, std::size_t total, std::size_t Quota::*slot) {
      std::vector<std::pair<double, std::string>> remainders;
      std::size_t assigned = 0;
      for (const auto& [name, idx] : members) {
        const double exact = idx.size() * fraction;
        std::size_t base = static_cast<std::size_t>(std::floor(exact + 1e-9));
        const std::size_t used = quota[name].val + quota[name].test;
        base = std::min(base, idx.size() > used + 1 ? idx.size() - used - 1 : 0);
        quota[name].*slot = base;
        assigned += base;
        remainders.emplace_back(exact - std::floor(exact + 1e-9), name);
      }
      std::stable_sort(remainders.begin(), remainders.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      bool progress = true;
      while (assigned < total && progress) {
        progress = false;
        for (const auto& [rem, name] : remainders) {
          if (assigned >= total) break;
          auto& q = quota[name];
          if (q.val + q.test + 1 >= members[name].size()) continue;
          ++(q.*slot);
          ++assigned;
          progress = true;
        }
      }
    };
    allocate(spec.validation, n_val, &Quota::val);
    allocate(spec.test, n_test, &Quota::test);

    for (const auto& [name, idx] : members) {
      Rng rng(derive_seed(spec.seed, name));
      std::vector<std::size_t> shuffled = idx;
      rng.shuffle(shuffled);
      const auto& q = quota[name];
      for (std::size_t i = 0; i < shuffled.size(); ++i) {
        const std::size_t part = i < q.val ? 1 : (i < q.val + q.test ? 2 : 0);
        parts[part].push_back(shuffled[i]);
      }
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

namespace {

template <class Set>
SplitResult<Set> split_set(const Set& set, const SplitSpec& spec) {
  std::vector<std::optional<std::string>> labels;
  labels.reserve(set.items.size());
  for (const auto& item : set.items) labels.push_back(item.label);
  const auto parts = split_indices(labels, spec);
  SplitResult<Set> result;
  Set* outs[3] = {&result.train, &result.validation, &result.test};
  for (int p = 0; p < 3; ++p) {
    if constexpr (std::is_same_v<Set, SpeechSet>) outs[p]->frame_dim = set.frame_dim;
    for (std::size_t i : parts[p]) outs[p]->items.push_back(set.items[i]);
  }
  return result;
}

}  // namespace

SplitResult<ImageSet> split(const ImageSet& set, const SplitSpec& spec) { return split_set(set, spec); }
SplitResult<SpeechSet> split(const SpeechSet& set, const SplitSpec& spec) { return split_set(set, spec); }

// ---- synthetic data -------------------------------------------------------

namespace {

constexpr std::uint64_t kPrototypeSeed = 0x5eed0f1d2c3b4a59ULL;

int speech_prototype_length(const std::string& spoken_class) {
  static const std::map<std::string, int> lengths = {
      {"one", 6},  {"two", 7},   {"three", 8}, {"four", 9}, {"five", 10}, {"six", 11},
      {"seven", 12}, {"eight", 7}, {"nine", 9}, {"zero", 10}, {"oh", 6}};
  if (auto it = lengths.find(spoken_class); it != lengths.end()) return it->second;
  return 6 + static_cast<int>(fnv1a64(spoken_class) % 7);
}

struct Stroke {
  double x0, y0, x1, y1;
};

// Seven straight segments a..g followed by seven extra strokes (diagonals and
// a centre bar) used only by background glyphs.
const std::array<Stroke, 14>& strokes() {
  static const std::array<Stroke, 14> s = {{
      {9, 5, 18, 5},        // a top
      {18, 5, 18, 13.5},    // b top right
      {18, 13.5, 18, 22},   // c bottom right
      {9, 22, 18, 22},      // d bottom
      {9, 13.5, 9, 22},     // e bottom left
      {9, 5, 9, 13.5},      // f top left
      {9, 13.5, 18, 13.5},  // g middle
      {9, 5, 18, 13.5},     // diagonals
      {18, 5, 9, 13.5},
      {9, 13.5, 18, 22},
      {18, 13.5, 9, 22},
      {9, 5, 18, 22},
      {18, 5, 9, 22},
      {13.5, 5, 13.5, 22},  // centre bar
  }};
  return s;
}

ImageGrid render_strokes(const std::vector<int>& which) {
  ImageGrid g;
  for (int r = 0; r < kImageSide; ++r) {
    for (int c = 0; c < kImageSide; ++c) {
      double best = 1e9;
      for (int k : which) {
        const Stroke& s = strokes()[k];
        const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
        const double len2 = dx * dx + dy * dy;
        double t = ((c - s.x0) * dx + (r - s.y0) * dy) / len2;
        t = std::clamp(t, 0.0, 1.0);
        const double px = s.x0 + t * dx - c, py = s.y0 + t * dy - r;
        best = std::min(best, std::sqrt(px * px + py * py));
      }
      g.at(r, c) = std::clamp(1.8 - best, 0.0, 1.0);
    }
  }
  return g;
}

std::vector<int> digit_segments(int digit) {
  static const char* const patterns[10] = {"abcdef", "bc",   "abdeg", "abcdg",   "bcfg",
                                           "acdfg",  "acdefg", "abc", "abcdefg", "abcdfg"};
  std::vector<int> out;
  for (const char* p = patterns[digit]; *p; ++p) out.push_back(*p - 'a');
  return out;
}

FrameSequence make_speech_prototype(const std::string& spoken_class) {
  const int length = speech_prototype_length(spoken_class);
  Rng rng(derive_seed(kPrototypeSeed, spoken_class));
  Eigen::MatrixXd frames(kSynthFrameDim, length);
  for (int d = 0; d < kSynthFrameDim; ++d) {
    const double amplitude = rng.uniform(0.3, 0.9) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    const double freq = rng.uniform(0.25, 1.5);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int t = 0; t < length; ++t) {
      const double v = amplitude * std::cos(2.0 * std::numbers::pi * freq * (t + 0.5) / length + phase);
      frames(d, t) = std::clamp(v, -1.0, 1.0);
    }
  }
  return FrameSequence(std::move(frames));
}

FrameSequence perturb(const FrameSequence& proto, double noise, Rng& rng) {
  FrameSequence out = proto;
  for (int t = 0; t < out.length(); ++t) {
    for (int d = 0; d < out.dim(); ++d) {
      out.frames(d, t) = std::clamp(out.frames(d, t) + rng.uniform(-noise, noise), -1.0, 1.0);
    }
  }
  return out;
}

ImageGrid perturb(const ImageGrid& proto, double noise, Rng& rng) {
  ImageGrid out = proto;
  for (auto& p : out.pixels) p = std::clamp(p + rng.uniform(-noise, noise), 0.0, 1.0);
  return out;
}

std::string background_name(int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "bg%02d", k);
  return buf;
}

}  // namespace

FrameSequence speech_prototype(const std::string& spoken_class) {
  return make_speech_prototype(spoken_class);
}

ImageGrid digit_glyph(int digit) {
  if (digit < 0 || digit > 9) throw ArgumentError("digit must be in 0..9");
  return render_strokes(digit_segments(digit));
}

SynthDigits synth_paired_digits(int n_per_class, double noise, std::uint64_t seed) {
  if (n_per_class < 1) throw ArgumentError("n_per_class must be >= 1");
  if (!(noise >= 0.0)) throw ArgumentError("noise must be non-negative");
  SynthDigits out;
  out.labels = digit_pair_labels();
  out.speech.frame_dim = kSynthFrameDim;
  Rng rng(derive_seed(seed, "synth_paired_digits"));
  for (const auto& name : digit_class_names()) {
    const FrameSequence proto = make_speech_prototype(name);
    for (int k = 0; k < n_per_class; ++k) {
      SpeechItem item{"s_" + name + "_" + padded3(k), perturb(proto, noise, rng), name};
      out.labels.speech_to_class[item.id] = name;
      out.speech.items.push_back(std::move(item));
    }
  }
  for (int digit = 0; digit <= 9; ++digit) {
    const ImageGrid proto = digit_glyph(digit);
    for (int k = 0; k < n_per_class; ++k) {
      ImageItem item{"v_" + std::to_string(digit) + "_" + padded3(k), perturb(proto, noise, rng),
                     std::to_string(digit)};
      out.labels.image_to_class[item.id] = digit;
      out.images.items.push_back(std::move(item));
    }
  }
  return out;
}

SynthBackground synth_background(int n_classes, int n_per_class, double noise, std::uint64_t seed) {
  if (n_classes < 1 || n_per_class < 1) throw ArgumentError("background needs >= 1 class and item");
  if (!(noise >= 0.0)) throw ArgumentError("noise must be non-negative");
  SynthBackground out;
  out.speech.frame_dim = kSynthFrameDim;

  // Distinct stroke subsets, each containing at least one diagonal.
  Rng glyph_rng(derive_seed(kPrototypeSeed, "background_glyphs"));
  std::set<std::vector<int>> used;
  std::vector<std::vector<int>> glyphs;
  while (static_cast<int>(glyphs.size()) < n_classes) {
    std::vector<int> pick;
    pick.push_back(7 + static_cast<int>(glyph_rng.below(6)));
    const int extra = 2 + static_cast<int>(glyph_rng.below(3));
    for (int i = 0; i < extra; ++i) pick.push_back(static_cast<int>(glyph_rng.below(14)));
    std::sort(pick.begin(), pick.end());
    pick.erase(std::unique(pick.begin(), pick.end()), pick.end());
    if (used.insert(pick).second) glyphs.push_back(pick);
    if (used.size() > 20000) throw ArgumentError("too many background classes requested");
  }

  Rng rng(derive_seed(seed, "synth_background"));
  for (int c = 0; c < n_classes; ++c) {
    const std::string name = background_name(c);
    const FrameSequence proto = make_speech_prototype(name);
    for (int k = 0; k < n_per_class; ++k) {
      out.speech.items.push_back({"bs_" + name + "_" + padded3(k), perturb(proto, noise, rng), name});
    }
  }
  for (int c = 0; c < n_classes; ++c) {
    const std::string name = background_name(c);
    const ImageGrid proto = render_strokes(glyphs[c]);
    for (int k = 0; k < n_per_class; ++k) {
      out.images.items.push_back({"bv_" + name + "_" + padded3(k), perturb(proto, noise, rng), name});
    }
  }
  return out;
}

}  // namespace mmfs
