#include "mmfs/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mmfs/error.hpp"
#include "mmfs/features.hpp"
#include "mmfs/mining.hpp"
#include "mmfs/rng.hpp"

namespace mmfs {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config -------------------------------------------------------------------

const std::vector<std::string>& known_arms() {
  static const std::vector<std::string> arms = {
      "dtw_pixels",       "indirect_classifier", "indirect_cae",     "mcae_transfer",   "mcae_cosine",
      "mcae_oracle",      "mtriplet_transfer",   "mtriplet_cosine",  "mtriplet_oracle"};
  return arms;
}

bool is_trained_arm(const std::string& arm) {
  return arm == "indirect_cae" || arm.rfind("mcae_", 0) == 0 || arm.rfind("mtriplet_", 0) == 0;
}

namespace {

const std::set<int> kGridBatchSizes = {16, 32, 64, 128, 256};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string hash_json(const json& j) { return hex64(fnv1a64(j.dump())); }

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError((where.empty() ? "" : where + ".") + key + ": unknown key");
  }
}

template <class T>
T get_or(const json& j, const std::string& key, const T& fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

std::string corpus_metric(const std::string& arm) {
  if (arm == "indirect_cae") return "cosine";
  return arm.substr(arm.find('_') + 1);
}

}  // namespace

bool ExperimentConfig::wants(const std::string& arm) const {
  return std::find(arms.begin(), arms.end(), arm) != arms.end();
}

bool ExperimentConfig::needs_classifiers() const {
  return std::any_of(arms.begin(), arms.end(), [](const auto& a) {
    return a == "indirect_classifier" || a.find("_transfer") != std::string::npos;
  });
}

std::vector<std::string> ExperimentConfig::mining_metrics() const {
  std::vector<std::string> out;
  for (const char* m : {"transfer", "cosine", "oracle"}) {
    const bool used = std::any_of(arms.begin(), arms.end(),
                                  [&](const auto& a) { return is_trained_arm(a) && corpus_metric(a) == m; });
    if (used) out.push_back(m);
  }
  return out;
}

void ExperimentConfig::validate() const {
  if (data.source != "synthetic" && data.source != "files") throw ConfigError("data.source: must be synthetic or files");
  if (data.source == "synthetic") {
    if (data.n_per_class < 1) throw ConfigError("data.n_per_class: must be >= 1");
    if (data.noise < 0) throw ConfigError("data.noise: must be >= 0");
  } else {
    for (const auto& [field, path] : {std::pair{"speech_archive", data.speech_archive},
                                      {"speech_labels", data.speech_labels},
                                      {"images_idx", data.images_idx},
                                      {"image_labels", data.image_labels}}) {
      if (path.empty() || !fs::exists(path)) throw ConfigError(std::string("data.") + field + ": file not found: " + path);
    }
  }
  try {
    SplitSpec{data.split[0], data.split[1], data.split[2], 0}.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("data.split: ") + e.what());
  }
  if (needs_classifiers()) {
    if (background.source != "synthetic" && background.source != "files") {
      throw ConfigError("background.source: must be synthetic or files");
    }
    if (background.source == "synthetic" && (background.n_classes < 2 || background.n_per_class < 2)) {
      throw ConfigError("background: need >= 2 classes and >= 2 items per class");
    }
    if (background.source == "files") {
      for (const auto& [field, path] : {std::pair{"speech_archive", background.speech_archive},
                                        {"speech_labels", background.speech_labels},
                                        {"images_idx", background.images_idx},
                                        {"image_labels", background.image_labels}}) {
        if (path.empty() || !fs::exists(path)) {
          throw ConfigError(std::string("background.") + field + ": file not found: " + path);
        }
      }
    }
  }
  try {
    arch.validate();
    train.validate();
    episodes.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (support_k < 1) throw ConfigError("mining.support_k: must be >= 1");
  if (arms.empty()) throw ConfigError("arms: empty");
  for (const auto& a : arms) {
    if (std::find(known_arms().begin(), known_arms().end(), a) == known_arms().end()) {
      throw ConfigError("arms: unknown arm '" + a + "'");
    }
  }
  if (batch_sizes.empty() || seeds.empty()) throw ConfigError("grid: batch_sizes and seeds must be non-empty");
  for (int b : batch_sizes) {
    if (!kGridBatchSizes.count(b)) throw ConfigError("grid.batch_sizes: " + std::to_string(b) + " is not in {16,32,64,128,256}");
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["data"] = {{"source", data.source}, {"n_per_class", data.n_per_class}, {"noise", data.noise},
               {"split", data.split}, {"speech_archive", data.speech_archive},
               {"speech_labels", data.speech_labels}, {"images_idx", data.images_idx},
               {"image_labels", data.image_labels}};
  j["background"] = {{"source", background.source}, {"n_classes", background.n_classes},
                     {"n_per_class", background.n_per_class}, {"noise", background.noise},
                     {"speech_archive", background.speech_archive}, {"speech_labels", background.speech_labels},
                     {"images_idx", background.images_idx}, {"image_labels", background.image_labels}};
  j["arch"] = arch;
  j["classifier"] = {{"learning_rate", classifier.learning_rate}, {"batch_size", classifier.batch_size},
                     {"max_epochs", classifier.max_epochs}, {"patience", classifier.patience},
                     {"validation_fraction", classifier.validation_fraction},
                     {"excluded_labels", classifier.excluded_labels}};
  j["train"] = {{"learning_rate", train.learning_rate}, {"margin", train.margin},
                {"max_epochs", train.max_epochs}, {"patience", train.patience},
                {"k_sample", train.k_sample},
                {"weights", {train.weights.alpha_a, train.weights.alpha_v, train.weights.alpha_z}}};
  j["mining"] = {{"support_k", support_k}};
  j["arms"] = arms;
  j["grid"] = {{"batch_sizes", batch_sizes}, {"seeds", seeds}};
  j["episodes"] = {{"L", episodes.L}, {"K", episodes.K}, {"N", episodes.N}, {"queries", episodes.queries},
                   {"count", episodes.episodes}};
  return j;
}

std::string ExperimentConfig::hash() const { return hash_json(to_json()); }

json default_config_json() {
  ExperimentConfig cfg;
  cfg.arms = known_arms();
  json j = cfg.to_json();
  j["out_dir"] = cfg.out_dir.string();
  return j;
}

ExperimentConfig parse_config(const json& j) {
  check_keys(j, "", {"seed", "out_dir", "data", "background", "arch", "classifier", "train", "mining", "arms",
                     "grid", "episodes"});
  ExperimentConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed, "");
  cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir.string(), "");

  const json data = j.value("data", json::object());
  check_keys(data, "data", {"source", "n_per_class", "noise", "split", "speech_archive", "speech_labels",
                            "images_idx", "image_labels"});
  auto& d = cfg.data;
  d.source = get_or(data, "source", d.source, "data");
  d.n_per_class = get_or(data, "n_per_class", d.n_per_class, "data");
  d.noise = get_or(data, "noise", d.noise, "data");
  d.split = get_or(data, "split", d.split, "data");
  d.speech_archive = get_or(data, "speech_archive", d.speech_archive, "data");
  d.speech_labels = get_or(data, "speech_labels", d.speech_labels, "data");
  d.images_idx = get_or(data, "images_idx", d.images_idx, "data");
  d.image_labels = get_or(data, "image_labels", d.image_labels, "data");

  const json bg = j.value("background", json::object());
  check_keys(bg, "background", {"source", "n_classes", "n_per_class", "noise", "speech_archive", "speech_labels",
                                "images_idx", "image_labels"});
  auto& b = cfg.background;
  b.source = get_or(bg, "source", b.source, "background");
  b.n_classes = get_or(bg, "n_classes", b.n_classes, "background");
  b.n_per_class = get_or(bg, "n_per_class", b.n_per_class, "background");
  b.noise = get_or(bg, "noise", b.noise, "background");
  b.speech_archive = get_or(bg, "speech_archive", b.speech_archive, "background");
  b.speech_labels = get_or(bg, "speech_labels", b.speech_labels, "background");
  b.images_idx = get_or(bg, "images_idx", b.images_idx, "background");
  b.image_labels = get_or(bg, "image_labels", b.image_labels, "background");

  if (j.contains("arch")) {
    check_keys(j["arch"], "arch", {"frame_dim", "latent_dim", "speech_layers", "speech_hidden", "decoder_hidden",
                                   "image_side", "conv1_channels", "conv2_channels", "speech_encoder",
                                   "speech_decoder", "vision_encoder", "vision_decoder", "head_classes",
                                   "head_modality"});
    try {
      cfg.arch = j["arch"].get<ArchSpec>();
    } catch (const json::exception&) {
      throw ConfigError("arch: wrong type");
    }
  }

  const json cl = j.value("classifier", json::object());
  check_keys(cl, "classifier", {"learning_rate", "batch_size", "max_epochs", "patience", "validation_fraction",
                                "excluded_labels"});
  auto& c = cfg.classifier;
  c.learning_rate = get_or(cl, "learning_rate", c.learning_rate, "classifier");
  c.batch_size = get_or(cl, "batch_size", c.batch_size, "classifier");
  c.max_epochs = get_or(cl, "max_epochs", c.max_epochs, "classifier");
  c.patience = get_or(cl, "patience", c.patience, "classifier");
  c.validation_fraction = get_or(cl, "validation_fraction", c.validation_fraction, "classifier");
  c.excluded_labels = get_or(cl, "excluded_labels", c.excluded_labels, "classifier");

  const json tr = j.value("train", json::object());
  check_keys(tr, "train", {"learning_rate", "margin", "max_epochs", "patience", "k_sample", "weights"});
  auto& t = cfg.train;
  t.learning_rate = get_or(tr, "learning_rate", t.learning_rate, "train");
  t.margin = get_or(tr, "margin", t.margin, "train");
  t.max_epochs = get_or(tr, "max_epochs", t.max_epochs, "train");
  t.patience = get_or(tr, "patience", t.patience, "train");
  t.k_sample = get_or(tr, "k_sample", t.k_sample, "train");
  if (tr.contains("weights")) {
    const auto w = get_or<std::vector<double>>(tr, "weights", {}, "train");
    if (w.size() != 3) throw ConfigError("train.weights: expected [alpha_a, alpha_v, alpha_z]");
    t.weights = {w[0], w[1], w[2]};
  }

  const json mn = j.value("mining", json::object());
  check_keys(mn, "mining", {"support_k", "metric"});
  cfg.support_k = get_or(mn, "support_k", cfg.support_k, "mining");
  const std::string default_metric = get_or<std::string>(mn, "metric", "transfer", "mining");

  std::vector<std::string> arms = get_or(j, "arms", known_arms(), "");
  for (auto& a : arms) {
    if (a == "mcae" || a == "mtriplet") a += "_" + default_metric;
  }
  cfg.arms = arms;

  const json grid = j.value("grid", json::object());
  check_keys(grid, "grid", {"batch_sizes", "seeds"});
  cfg.batch_sizes = get_or(grid, "batch_sizes", cfg.batch_sizes, "grid");
  cfg.seeds = get_or(grid, "seeds", cfg.seeds, "grid");

  const json ep = j.value("episodes", json::object());
  check_keys(ep, "episodes", {"L", "K", "N", "queries", "count"});
  auto& e = cfg.episodes;
  e.L = get_or(ep, "L", e.L, "episodes");
  e.K = get_or(ep, "K", e.K, "episodes");
  e.N = get_or(ep, "N", e.N, "episodes");
  e.queries = get_or(ep, "queries", e.queries, "episodes");
  e.episodes = get_or(ep, "count", e.episodes, "episodes");

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

std::pair<std::vector<int>, std::vector<std::uint64_t>> parse_grid(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("--grid: expected BATCHES:SEEDS, e.g. 16,32:1,2");
  auto split_list = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) out.push_back(item);
    }
    return out;
  };
  std::pair<std::vector<int>, std::vector<std::uint64_t>> grid;
  try {
    for (const auto& b : split_list(text.substr(0, colon))) grid.first.push_back(std::stoi(b));
    for (const auto& s : split_list(text.substr(colon + 1))) grid.second.push_back(std::stoull(s));
  } catch (const std::exception&) {
    throw ConfigError("--grid: not a list of integers: " + text);
  }
  if (grid.first.empty() || grid.second.empty()) throw ConfigError("--grid: empty batch or seed list");
  return grid;
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.arms) cfg.arms = *o.arms;
  if (o.grid) {
    cfg.batch_sizes = o.grid->first;
    cfg.seeds = o.grid->second;
  }
  cfg.validate();
}

// ---- data ---------------------------------------------------------------------

namespace {

struct Source {
  SpeechSet speech;
  ImageSet images;
  PairLabels labels;
};

Source load_source(const ExperimentConfig& cfg) {
  Source s;
  if (cfg.data.source == "synthetic") {
    SynthDigits d = synth_paired_digits(cfg.data.n_per_class, cfg.data.noise, derive_seed(cfg.seed, "data"));
    s.speech = std::move(d.speech);
    s.images = std::move(d.images);
    s.labels = std::move(d.labels);
    return s;
  }
  s.speech = load_feature_archive(cfg.data.speech_archive);
  attach_labels(s.speech, load_label_table(cfg.data.speech_labels));
  s.images = load_idx_images(cfg.data.images_idx, fs::path(cfg.data.image_labels));
  s.labels = digit_pair_labels();
  for (const auto& item : s.speech.items) {
    if (!item.label || !s.labels.has_class(*item.label)) {
      throw ConfigError("data.speech_labels: item '" + item.id + "' lacks a spoken digit label");
    }
    s.labels.speech_to_class[item.id] = *item.label;
  }
  for (const auto& item : s.images.items) {
    const int digit = item.label ? std::stoi(*item.label) : -1;
    if (digit < 0 || digit > 9) throw ConfigError("data.image_labels: item '" + item.id + "' lacks a digit label");
    s.labels.image_to_class[item.id] = digit;
  }
  return s;
}

struct Background {
  SpeechSet speech;
  ImageSet images;
};

Background load_background(const ExperimentConfig& cfg) {
  const auto& b = cfg.background;
  if (b.source == "synthetic") {
    SynthBackground bg = synth_background(b.n_classes, b.n_per_class, b.noise, derive_seed(cfg.seed, "background"));
    return {std::move(bg.speech), std::move(bg.images)};
  }
  Background out;
  out.speech = load_feature_archive(b.speech_archive);
  attach_labels(out.speech, load_label_table(b.speech_labels));
  const RawImages raw = load_idx_raw(b.images_idx);
  if (raw.rows != raw.cols) throw ShapeError("background images must be square");
  const auto labels = load_label_table(b.image_labels);
  const std::size_t width = std::to_string(raw.images.empty() ? 0 : raw.images.size() - 1).size();
  for (std::size_t i = 0; i < raw.images.size(); ++i) {
    std::string id = std::to_string(i);
    id.insert(0, width - id.size(), '0');
    ImageItem item{id, preprocess_background_image(raw.images[i], raw.rows), std::nullopt};
    if (auto it = labels.find(id); it != labels.end()) item.label = it->second;
    out.images.items.push_back(std::move(item));
  }
  return out;
}

fs::path stamp_path(const ExperimentConfig& cfg, const std::string& stage) {
  return cfg.out_dir / "stamps" / (stage + ".json");
}

bool stamp_matches(const ExperimentConfig& cfg, const std::string& stage, const std::string& hash) {
  std::ifstream in(stamp_path(cfg, stage));
  if (!in) return false;
  try {
    return json::parse(in).value("hash", std::string()) == hash;
  } catch (const json::exception&) {
    return false;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

void write_stamp(const ExperimentConfig& cfg, const std::string& stage, const std::string& hash) {
  write_text(stamp_path(cfg, stage), json{{"hash", hash}, {"master_seed", cfg.seed}}.dump() + "\n");
}

json prepare_key(const ExperimentConfig& cfg) {
  const json j = cfg.to_json();
  return {{"seed", cfg.seed},
          {"data", j["data"]},
          {"background", cfg.needs_classifiers() ? j["background"] : json()},
          {"arch", cfg.needs_classifiers() ? j["arch"] : json()},
          {"classifier", cfg.needs_classifiers() ? j["classifier"] : json()}};
}

json mine_key(const ExperimentConfig& cfg, const std::string& metric) {
  return {{"prepare", prepare_key(cfg)}, {"support_k", cfg.support_k}, {"metric", metric}};
}

void say(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

std::string provenance_header(const ExperimentConfig& cfg) {
  return "# master_seed=" + std::to_string(cfg.seed) + " config_hash=" + cfg.hash() + "\n";
}

}  // namespace

PreparedData load_prepared(const ExperimentConfig& cfg) {
  const fs::path manifest = cfg.out_dir / "data" / "splits.tsv";
  std::ifstream in(manifest);
  if (!in) throw StateError("missing " + manifest.string() + "; run prepare first");
  Source src = load_source(cfg);
  std::map<std::string, std::string> speech_split, image_split;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string modality, part, id;
    fields >> modality >> part >> id;
    (modality == "speech" ? speech_split : image_split)[id] = part;
  }
  PreparedData out;
  out.speech.train.frame_dim = out.speech.validation.frame_dim = out.speech.test.frame_dim = src.speech.frame_dim;
  for (auto& item : src.speech.items) {
    auto it = speech_split.find(item.id);
    if (it == speech_split.end()) throw FormatError(manifest.string() + ": no split for speech item " + item.id);
    auto& set = it->second == "train" ? out.speech.train : it->second == "validation" ? out.speech.validation : out.speech.test;
    set.items.push_back(std::move(item));
  }
  for (auto& item : src.images.items) {
    auto it = image_split.find(item.id);
    if (it == image_split.end()) throw FormatError(manifest.string() + ": no split for image " + item.id);
    auto& set = it->second == "train" ? out.images.train : it->second == "validation" ? out.images.validation : out.images.test;
    set.items.push_back(std::move(item));
  }
  out.labels = std::move(src.labels);
  return out;
}

// ---- prepare ------------------------------------------------------------------

void cmd_prepare(const ExperimentConfig& cfg, const LogFn& log) {
  const std::string key = hash_json(prepare_key(cfg));
  if (stamp_matches(cfg, "prepare", key)) {
    say(log, "prepare: up to date");
    return;
  }
  Source src = load_source(cfg);
  const SplitSpec speech_spec{cfg.data.split[0], cfg.data.split[1], cfg.data.split[2], derive_seed(cfg.seed, "split_speech")};
  const SplitSpec image_spec{cfg.data.split[0], cfg.data.split[1], cfg.data.split[2], derive_seed(cfg.seed, "split_images")};
  const auto s = split(src.speech, speech_spec);
  const auto v = split(src.images, image_spec);
  std::string manifest = provenance_header(cfg);
  auto emit = [&manifest](const char* modality, const char* part, const auto& set) {
    for (const auto& item : set.items) manifest += std::string(modality) + "\t" + part + "\t" + item.id + "\n";
  };
  emit("speech", "train", s.train);
  emit("speech", "validation", s.validation);
  emit("speech", "test", s.test);
  emit("image", "train", v.train);
  emit("image", "validation", v.validation);
  emit("image", "test", v.test);
  write_text(cfg.out_dir / "data" / "splits.tsv", manifest);
  say(log, "prepare: split " + std::to_string(src.speech.size()) + " spoken words and " +
               std::to_string(src.images.size()) + " images");

  json info = {{"master_seed", cfg.seed}, {"config_hash", cfg.hash()},
               {"speech", {{"train", s.train.size()}, {"validation", s.validation.size()}, {"test", s.test.size()}}},
               {"images", {{"train", v.train.size()}, {"validation", v.validation.size()}, {"test", v.test.size()}}}};
  if (cfg.needs_classifiers()) {
    const Background bg = load_background(cfg);
    for (const char* modality : {"speech", "vision"}) {
      ClassifierConfig cc = cfg.classifier;
      cc.arch = cfg.arch;
      cc.arch.frame_dim = src.speech.frame_dim;
      cc.seed = derive_seed(cfg.seed, std::string("classifier_") + modality);
      say(log, std::string("prepare: training ") + modality + " classifier");
      const ClassifierResult r = std::string(modality) == "speech" ? train_classifier(bg.speech, cc)
                                                                   : train_classifier(bg.images, cc);
      save_checkpoint(cfg.out_dir / "classifiers" / (std::string(modality) + ".ck"), r.params,
                      {{"kind", "classifier"}, {"modality", modality}, {"validation_accuracy", r.validation_accuracy},
                       {"epochs", r.validation_losses.size()}},
                      cc.seed);
      info["classifiers"][modality] = {{"validation_accuracy", r.validation_accuracy},
                                       {"epochs", r.validation_losses.size()}};
      say(log, std::string("prepare: ") + modality + " classifier validation accuracy " +
                   std::to_string(r.validation_accuracy));
    }
  }
  write_text(cfg.out_dir / "data" / "prepare.json", info.dump(2) + "\n");
  write_stamp(cfg, "prepare", key);
}

// ---- mine ---------------------------------------------------------------------

namespace {

// Items of one modality as seen by the miner: pool items first, then the
// support items.
template <class Item>
struct View {
  std::vector<const Item*> items;
  std::vector<std::string> ids;
  std::size_t pool = 0;
  PairDistance distance;
};

Eigen::MatrixXd unit_columns(Eigen::MatrixXd m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n == 0.0) throw DegenerateVectorError("zero-norm classifier embedding");
    m.col(j) /= n;
  }
  return m;
}

PairDistance table_distance(const Eigen::MatrixXd& table) {
  auto t = std::make_shared<Eigen::MatrixXd>(unit_columns(table));
  return [t](std::size_t i, std::size_t j) { return std::clamp(1.0 - t->col(i).dot(t->col(j)), 0.0, 2.0); };
}

struct MinedSplit {
  std::vector<std::string> speech_ids, image_ids;
  std::vector<int> speech_class, image_class;
  std::vector<std::size_t> speech_positive, image_positive;
  std::vector<MinedPair> pairs;
};

void write_mined(const fs::path& dir, const std::string& split_name, const MinedSplit& m, const json& sidecar,
                 const std::string& header) {
  std::string items = header;
  for (std::size_t i = 0; i < m.speech_ids.size(); ++i) {
    items += "speech\t" + m.speech_ids[i] + "\t" + std::to_string(m.speech_class[i]) + "\t" +
             m.speech_ids[m.speech_positive[i]] + "\n";
  }
  for (std::size_t i = 0; i < m.image_ids.size(); ++i) {
    items += "image\t" + m.image_ids[i] + "\t" + std::to_string(m.image_class[i]) + "\t" +
             m.image_ids[m.image_positive[i]] + "\n";
  }
  write_text(dir / (split_name + "_items.tsv"), items);
  PairManifest manifest;
  manifest.sidecar = sidecar;
  for (const auto& p : m.pairs) {
    manifest.rows.push_back({m.speech_ids[p.speech], m.image_ids[p.image], p.pivot_index, p.pivot_class});
  }
  write_pair_manifest(dir / (split_name + "_pairs.tsv"), manifest);
}

double pair_precision(const MinedSplit& m, const PairLabels& labels) {
  if (m.pairs.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& p : m.pairs) {
    const int a = labels.visual_class(labels.speech_to_class.at(m.speech_ids[p.speech]));
    const int v = labels.image_to_class.at(m.image_ids[p.image]);
    ok += a == v;
  }
  return static_cast<double>(ok) / static_cast<double>(m.pairs.size());
}

}  // namespace

void cmd_mine(const ExperimentConfig& cfg, const LogFn& log) {
  const auto metrics = cfg.mining_metrics();
  std::vector<std::string> todo;
  for (const auto& m : metrics) {
    if (!stamp_matches(cfg, "mine_" + m, hash_json(mine_key(cfg, m)))) todo.push_back(m);
  }
  if (todo.empty()) {
    say(log, "mine: up to date");
    return;
  }
  const PreparedData data = load_prepared(cfg);
  const auto& train_s = data.speech.train;
  const auto& train_v = data.images.train;

  // The labelled support set that acts as the pivot.
  Rng support_rng(derive_seed(cfg.seed, "mining_support"));
  std::vector<char> taken_s, taken_v;
  const SupportSet support = sample_support(train_s, train_v, data.labels, data.labels.class_names, cfg.support_k,
                                            support_rng, taken_s, taken_v);

  std::optional<ModelParams> speech_clf, vision_clf;
  for (const auto& metric : todo) {
    const fs::path dir = cfg.out_dir / "mined" / metric;
    const std::string header = provenance_header(cfg);
    json sidecar = {{"metric", metric}, {"master_seed", cfg.seed}, {"config_hash", cfg.hash()},
                    {"support_k", cfg.support_k}};
    if (metric == "transfer" && !speech_clf) {
      const fs::path sp = cfg.out_dir / "classifiers" / "speech.ck";
      const fs::path vp = cfg.out_dir / "classifiers" / "vision.ck";
      if (!fs::exists(sp) || !fs::exists(vp)) throw StateError("missing classifier checkpoints; run prepare first");
      speech_clf = load_checkpoint(sp).params;
      vision_clf = load_checkpoint(vp).params;
    }
    for (const std::string split_name : {"train", "validation"}) {
      const SpeechSet& sset = split_name == "train" ? train_s : data.speech.validation;
      const ImageSet& vset = split_name == "train" ? train_v : data.images.validation;
      const std::uint64_t seed = derive_seed(cfg.seed, "pairs:" + metric + ":" + split_name);
      MinedSplit m;
      if (metric == "oracle") {
        for (const auto& it : sset.items) m.speech_ids.push_back(it.id);
        for (const auto& it : vset.items) m.image_ids.push_back(it.id);
        for (const auto& id : m.speech_ids) {
          m.speech_class.push_back(data.labels.visual_class(data.labels.speech_to_class.at(id)));
        }
        for (const auto& id : m.image_ids) m.image_class.push_back(data.labels.image_to_class.at(id));
        m.pairs = mine_oracle_pairs(sset, vset, data.labels, seed);
        // Positives: a random other item of the same spoken or visual class.
        Rng prng(derive_seed(seed, "positives"));
        auto same_class = [&](const std::vector<std::string>& ids, auto class_of) {
          std::map<std::string, std::vector<std::size_t>> groups;
          for (std::size_t i = 0; i < ids.size(); ++i) groups[class_of(ids[i])].push_back(i);
          std::vector<std::size_t> pos(ids.size());
          for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto& g = groups[class_of(ids[i])];
            if (g.size() == 1) {
              pos[i] = i;
              continue;
            }
            std::size_t k = g[prng.below(g.size() - 1)];
            if (k == i) k = g.back();
            pos[i] = k;
          }
          return pos;
        };
        m.speech_positive = same_class(m.speech_ids, [&](const std::string& id) { return data.labels.speech_to_class.at(id); });
        m.image_positive =
            same_class(m.image_ids, [&](const std::string& id) { return std::to_string(data.labels.image_to_class.at(id)); });
      } else {
        View<FrameSequence> sv;
        View<ImageGrid> vv;
        for (std::size_t i = 0; i < sset.size(); ++i) {
          if (split_name == "train" && taken_s[i]) continue;
          sv.items.push_back(&sset.items[i].frames);
          sv.ids.push_back(sset.items[i].id);
        }
        for (std::size_t i = 0; i < vset.size(); ++i) {
          if (split_name == "train" && taken_v[i]) continue;
          vv.items.push_back(&vset.items[i].grid);
          vv.ids.push_back(vset.items[i].id);
        }
        sv.pool = sv.items.size();
        vv.pool = vv.items.size();
        for (const auto& p : support.pairs) {
          sv.items.push_back(&train_s.items[p.speech].frames);
          sv.ids.push_back(train_s.items[p.speech].id);
          vv.items.push_back(&train_v.items[p.image].grid);
          vv.ids.push_back(train_v.items[p.image].id);
        }
        if (metric == "transfer") {
          sv.distance = table_distance(encode_speech_table(*speech_clf, sv.items));
          vv.distance = table_distance(encode_image_table(*vision_clf, vv.items));
        } else {
          sv.distance = [&sv](std::size_t i, std::size_t j) { return dtw_distance(*sv.items[i], *sv.items[j]); };
          vv.distance = [&vv](std::size_t i, std::size_t j) { return pixel_distance(*vv.items[i], *vv.items[j]); };
        }
        const auto sa = assign_to_support(sv.pool, support.size(),
                                          [&](std::size_t i, std::size_t j) { return sv.distance(i, sv.pool + j); });
        const auto va = assign_to_support(vv.pool, support.size(),
                                          [&](std::size_t i, std::size_t j) { return vv.distance(i, vv.pool + j); });
        m.pairs = mine_cross_modal_pairs(sa, va, support, seed);
        m.speech_ids = sv.ids;
        m.image_ids = vv.ids;
        for (const auto& a : sa) m.speech_class.push_back(support.pairs[a.support_index].visual_class);
        for (const auto& a : va) m.image_class.push_back(support.pairs[a.support_index].visual_class);
        for (const auto& p : support.pairs) {
          m.speech_class.push_back(p.visual_class);
          m.image_class.push_back(p.visual_class);
        }
        m.speech_positive = mine_within_modality_positives(sv.items.size(), sv.distance);
        m.image_positive = mine_within_modality_positives(vv.items.size(), vv.distance);
      }
      json side = sidecar;
      side["split"] = split_name;
      side["seed"] = seed;
      side["pairs"] = m.pairs.size();
      // Diagnostic only; the trainers never see labels.
      side["pair_precision"] = pair_precision(m, data.labels);
      write_mined(dir, split_name, m, side, header);
      say(log, "mine: " + metric + "/" + split_name + " " + std::to_string(m.pairs.size()) + " pairs, precision " +
                   std::to_string(side["pair_precision"].get<double>()));
    }
    write_stamp(cfg, "mine_" + metric, hash_json(mine_key(cfg, metric)));
  }
}

PairCorpus load_corpus(const ExperimentConfig& cfg, const PreparedData& data, const std::string& metric,
                       const std::string& split_name) {
  const fs::path dir = cfg.out_dir / "mined" / metric;
  std::ifstream in(dir / (split_name + "_items.tsv"));
  if (!in) throw StateError("missing mined " + metric + " corpus; run mine first");
  std::map<std::string, const FrameSequence*> speech;
  std::map<std::string, const ImageGrid*> images;
  for (const auto* set : {&data.speech.train, &data.speech.validation}) {
    for (const auto& it : set->items) speech[it.id] = &it.frames;
  }
  for (const auto* set : {&data.images.train, &data.images.validation}) {
    for (const auto& it : set->items) images[it.id] = &it.grid;
  }
  PairCorpus c;
  std::map<std::string, std::size_t> s_index, v_index;
  std::vector<std::string> s_pos, v_pos;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream f(line);
    std::string modality, id, cls, pos;
    std::getline(f, modality, '\t');
    std::getline(f, id, '\t');
    std::getline(f, cls, '\t');
    std::getline(f, pos);
    if (modality == "speech") {
      s_index[id] = c.speech.size();
      c.speech.push_back(*speech.at(id));
      c.speech_class.push_back(std::stoi(cls));
      s_pos.push_back(pos);
    } else {
      v_index[id] = c.images.size();
      c.images.push_back(*images.at(id));
      c.image_class.push_back(std::stoi(cls));
      v_pos.push_back(pos);
    }
  }
  for (const auto& p : s_pos) c.speech_positive.push_back(s_index.at(p));
  for (const auto& p : v_pos) c.image_positive.push_back(v_index.at(p));
  const PairManifest manifest = load_pair_manifest(dir / (split_name + "_pairs.tsv"));
  for (const auto& r : manifest.rows) {
    c.pairs.push_back({s_index.at(r.speech_id), v_index.at(r.image_id), data.labels.visual_class(r.pivot_class)});
  }
  return c;
}

// ---- train --------------------------------------------------------------------

fs::path checkpoint_path(const ExperimentConfig& cfg, const std::string& arm, int batch_size, std::uint64_t seed) {
  return cfg.out_dir / "checkpoints" / arm / ("bs" + std::to_string(batch_size) + "_seed" + std::to_string(seed) + ".ck");
}

namespace {

struct CellPlan {
  TrainConfig train;
  ArchSpec arch;
  bool mcae = false;
  std::string hash;
};

CellPlan plan_cell(const ExperimentConfig& cfg, const std::string& arm, int batch_size, std::uint64_t seed,
                   int frame_dim) {
  CellPlan p;
  p.mcae = arm == "indirect_cae" || arm.rfind("mcae_", 0) == 0;
  p.train = cfg.train;
  p.train.batch_size = batch_size;
  p.train.seed = derive_seed(cfg.seed, "train:" + arm + ":" + std::to_string(batch_size) + ":" + std::to_string(seed));
  if (arm == "indirect_cae") p.train.weights = {0.5, 0.5, 0.0};
  p.arch = cfg.arch;
  p.arch.frame_dim = frame_dim;
  p.arch = p.mcae ? mcae_arch(p.arch) : mtriplet_arch(p.arch);
  const json j = cfg.to_json();
  p.hash = hash_json({{"mine", mine_key(cfg, corpus_metric(arm))},
                      {"arm", arm},
                      {"arch", p.arch},
                      {"train", j["train"]},
                      {"batch_size", batch_size},
                      {"seed", seed}});
  return p;
}

}  // namespace

void cmd_train(const ExperimentConfig& cfg, const LogFn& log) {
  std::optional<PreparedData> data;
  std::map<std::string, std::pair<PairCorpus, PairCorpus>> corpora;
  for (const auto& arm : cfg.arms) {
    if (!is_trained_arm(arm)) continue;
    const std::string metric = corpus_metric(arm);
    for (int bs : cfg.batch_sizes) {
      for (std::uint64_t seed : cfg.seeds) {
        const fs::path ck = checkpoint_path(cfg, arm, bs, seed);
        if (!data) data = load_prepared(cfg);
        const CellPlan plan = plan_cell(cfg, arm, bs, seed, data->speech.train.frame_dim);
        if (fs::exists(ck)) {
          try {
            if (load_checkpoint(ck).config.value("cell_hash", std::string()) == plan.hash) {
              say(log, "train: " + arm + " bs" + std::to_string(bs) + " seed" + std::to_string(seed) + " done");
              continue;
            }
          } catch (const Error&) {
            // Unreadable checkpoint: retrain.
          }
        }
        if (!corpora.count(metric)) {
          corpora.emplace(metric, std::pair{load_corpus(cfg, *data, metric, "train"),
                                            load_corpus(cfg, *data, metric, "validation")});
        }
        const auto& [train_c, val_c] = corpora.at(metric);
        std::string log_text;
        auto on_epoch = [&](const EpochLog& e) {
          log_text += json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_loss", e.validation_loss},
                           {"seconds", e.seconds}}.dump() + "\n";
          say(log, "train: " + arm + " bs" + std::to_string(bs) + " seed" + std::to_string(seed) + " epoch " +
                       std::to_string(e.epoch) + " train " + std::to_string(e.train_loss) + " val " +
                       std::to_string(e.validation_loss) + " (" + std::to_string(e.seconds) + " s)");
        };
        ModelParams init = init_params(plan.arch, plan.train.seed);
        const TrainResult r = plan.mcae ? train_mcae(train_c, val_c, std::move(init), plan.train, on_epoch)
                                        : train_mtriplet(train_c, val_c, std::move(init), plan.train, on_epoch);
        write_text(fs::path(ck.string() + ".log.jsonl"), log_text);
        save_checkpoint(ck, r.params,
                        {{"kind", arm}, {"cell_hash", plan.hash}, {"batch_size", bs}, {"grid_seed", seed},
                         {"best_epoch", r.best_epoch}, {"epochs", r.log.size()}, {"master_seed", cfg.seed}},
                        plan.train.seed);
      }
    }
  }
}

// ---- evaluate -----------------------------------------------------------------

json arm_report_to_json(const ArmReport& arm) {
  json grid = json::array();
  for (const auto& g : arm.grid) grid.push_back({{"batch_size", g.batch_size}, {"seed", g.seed}, {"accuracy", g.accuracy}});
  json j = {{"name", arm.name},
            {"grid", grid},
            {"confusion",
             {{"rows", arm.confusion.rows},
              {"row_visual", arm.confusion.row_visual},
              {"columns", arm.confusion.columns},
              {"counts", arm.confusion.counts}}}};
  if (arm.unimodal_accuracy) j["unimodal_accuracy"] = *arm.unimodal_accuracy;
  return j;
}

ArmReport arm_report_from_json(const json& j) {
  ArmReport a;
  a.name = j.at("name").get<std::string>();
  for (const auto& g : j.at("grid")) {
    a.grid.push_back({g.at("batch_size").get<int>(), g.at("seed").get<std::uint64_t>(), g.at("accuracy").get<double>()});
  }
  const auto& c = j.at("confusion");
  a.confusion.rows = c.at("rows").get<std::vector<std::string>>();
  a.confusion.row_visual = c.at("row_visual").get<std::vector<int>>();
  a.confusion.columns = c.at("columns").get<std::vector<int>>();
  a.confusion.counts = c.at("counts").get<std::vector<std::vector<long>>>();
  if (j.contains("unimodal_accuracy")) a.unimodal_accuracy = j["unimodal_accuracy"].get<double>();
  return a;
}

namespace {

struct ArmAccumulator {
  ArmReport report;
  std::vector<double> unimodal;

  void add(int bs, std::uint64_t seed, const std::vector<MatchResult>& results, const PairLabels& labels,
           std::optional<double> unimodal_acc) {
    report.grid.push_back({bs, seed, accuracy(results)});
    if (report.grid.size() == 1) report.confusion = confusion(results, labels);
    if (unimodal_acc) unimodal.push_back(*unimodal_acc);
  }
  ArmReport finish() {
    if (!unimodal.empty()) {
      double s = 0.0;
      for (double u : unimodal) s += u;
      report.unimodal_accuracy = s / static_cast<double>(unimodal.size());
    }
    return report;
  }
};

double unimodal_accuracy(const MatchingSpace& space, const std::vector<Episode>& episodes, const SpeechSet& speech,
                         const PairLabels& labels) {
  std::size_t ok = 0, total = 0;
  for (const auto& ep : episodes) {
    for (std::size_t q : ep.queries) {
      ok += classify_unimodal(space.speech_speech, ep.support, q) == labels.speech_to_class.at(speech.items[q].id);
      ++total;
    }
  }
  return static_cast<double>(ok) / static_cast<double>(total);
}

void write_evaluation(const ExperimentConfig& cfg, const std::vector<ArmReport>& arms) {
  json j = {{"master_seed", cfg.seed}, {"config_hash", cfg.hash()}, {"config", cfg.to_json()}, {"arms", json::array()}};
  for (const auto& a : arms) j["arms"].push_back(arm_report_to_json(a));
  write_text(cfg.out_dir / "evaluation.json", j.dump(2) + "\n");
}

}  // namespace

void cmd_evaluate(const ExperimentConfig& cfg, const LogFn& log) {
  const std::string key = cfg.hash();
  if (stamp_matches(cfg, "evaluate", key) && fs::exists(cfg.out_dir / "evaluation.json")) {
    say(log, "evaluate: up to date");
    cmd_report(cfg);
    return;
  }
  const PreparedData data = load_prepared(cfg);
  const SpeechSet& ts = data.speech.test;
  const ImageSet& tv = data.images.test;
  const std::vector<Episode> episodes =
      sample_episodes(ts, tv, data.labels, cfg.episodes, derive_seed(cfg.seed, "episodes"));
  write_episode_manifest(cfg.out_dir / "episodes.tsv", episodes, ts, tv);

  std::vector<const FrameSequence*> s_items;
  std::vector<const ImageGrid*> v_items;
  for (const auto& it : ts.items) s_items.push_back(&it.frames);
  for (const auto& it : tv.items) v_items.push_back(&it.grid);

  auto direct = [](const MatchingSpace& space) {
    return [&space](const Episode& ep, std::size_t q) { return match_direct(space, ep, q); };
  };
  auto indirect = [](const MatchingSpace& space) {
    return [&space](const Episode& ep, std::size_t q) { return match_indirect(space, ep, q); };
  };

  std::vector<ArmReport> reports;
  for (const auto& arm : cfg.arms) {
    say(log, "evaluate: " + arm);
    if (arm == "dtw_pixels") {
      const MatchingSpace space = raw_space(ts, tv);
      ArmAccumulator acc;
      acc.report.name = arm;
      acc.add(0, 0, run_episodes(indirect(space), episodes, ts, tv, data.labels), data.labels,
              unimodal_accuracy(space, episodes, ts, data.labels));
      reports.push_back(acc.finish());
      continue;
    }
    if (arm == "indirect_classifier") {
      const fs::path sp = cfg.out_dir / "classifiers" / "speech.ck";
      const fs::path vp = cfg.out_dir / "classifiers" / "vision.ck";
      if (!fs::exists(sp) || !fs::exists(vp)) throw StateError("missing classifier checkpoints; run prepare first");
      const MatchingSpace space = embedding_space(encode_speech_table(load_checkpoint(sp).params, s_items),
                                                  encode_image_table(load_checkpoint(vp).params, v_items));
      ArmAccumulator acc;
      acc.report.name = arm;
      acc.add(0, 0, run_episodes(indirect(space), episodes, ts, tv, data.labels), data.labels,
              unimodal_accuracy(space, episodes, ts, data.labels));
      reports.push_back(acc.finish());
      continue;
    }
    const bool cross_modal = arm != "indirect_cae";
    ArmAccumulator direct_acc, indirect_acc;
    direct_acc.report.name = arm;
    indirect_acc.report.name = cross_modal ? arm + "_indirect" : arm;
    for (int bs : cfg.batch_sizes) {
      for (std::uint64_t seed : cfg.seeds) {
        const fs::path ck = checkpoint_path(cfg, arm, bs, seed);
        if (!fs::exists(ck)) throw StateError("missing checkpoint " + ck.string() + "; run train first");
        const ModelParams params = load_checkpoint(ck).params;
        const MatchingSpace space =
            embedding_space(encode_speech_table(params, s_items), encode_image_table(params, v_items));
        const double uni = unimodal_accuracy(space, episodes, ts, data.labels);
        if (cross_modal) {
          direct_acc.add(bs, seed, run_episodes(direct(space), episodes, ts, tv, data.labels), data.labels, uni);
        }
        indirect_acc.add(bs, seed, run_episodes(indirect(space), episodes, ts, tv, data.labels), data.labels, uni);
      }
    }
    if (cross_modal) reports.push_back(direct_acc.finish());
    reports.push_back(indirect_acc.finish());
  }
  write_evaluation(cfg, reports);
  cmd_report(cfg);
  write_stamp(cfg, "evaluate", key);
}

void cmd_report(const ExperimentConfig& cfg, const std::optional<fs::path>& out) {
  std::ifstream in(cfg.out_dir / "evaluation.json");
  if (!in) throw StateError("missing " + (cfg.out_dir / "evaluation.json").string() + "; run evaluate first");
  const json j = json::parse(in);
  std::vector<ArmReport> arms;
  for (const auto& a : j.at("arms")) arms.push_back(arm_report_from_json(a));
  Provenance p{j.at("master_seed").get<std::uint64_t>(), j.at("config_hash").get<std::string>(), j.at("config")};
  emit_report(arms, p, out.value_or(cfg.out_dir / "report"));
}

void run_pipeline(const ExperimentConfig& cfg, const LogFn& log) {
  cmd_prepare(cfg, log);
  cmd_mine(cfg, log);
  cmd_train(cfg, log);
  cmd_evaluate(cfg, log);
}

}  // namespace mmfs
