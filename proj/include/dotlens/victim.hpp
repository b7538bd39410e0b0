#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dotlens/checkpoint.hpp"
#include "dotlens/common.hpp"
#include "dotlens/image.hpp"
#include "dotlens/nn.hpp"
#include "dotlens/optics.hpp"
#include "dotlens/rng.hpp"
#include "json.hpp"

namespace dotlens {

enum class SignShape { octagon, triangle_up, triangle_down, circle, rectangle, diamond };

struct SignClass {
  int id = 0;
  SignShape shape = SignShape::circle;
  std::array<double, 3> color = {1.0, 1.0, 1.0};
  int glyph = 0;  // 0 none, 1 hbar, 2 vbar, 3 ring, 4 cross
};

inline const std::array<SignClass, 17>& sign_classes() {
  static const std::array<double, 3> R = {0.85, 0.08, 0.08};
  static const std::array<double, 3> B = {0.08, 0.15, 0.85};
  static const std::array<double, 3> Y = {0.95, 0.80, 0.05};
  static const std::array<double, 3> G = {0.05, 0.60, 0.15};
  static const std::array<double, 3> O = {0.95, 0.45, 0.05};
  static const std::array<SignClass, 17> table = {{
      {0, SignShape::octagon, R, 0},
      {1, SignShape::octagon, B, 1},
      {2, SignShape::triangle_up, Y, 0},
      {3, SignShape::triangle_up, R, 3},
      {4, SignShape::triangle_down, R, 0},
      {5, SignShape::triangle_down, B, 2},
      {6, SignShape::circle, B, 0},
      {7, SignShape::circle, R, 1},
      {8, SignShape::circle, Y, 4},
      {9, SignShape::rectangle, G, 0},
      {10, SignShape::rectangle, O, 2},
      {11, SignShape::rectangle, B, 4},
      {12, SignShape::diamond, Y, 0},
      {13, SignShape::diamond, G, 1},
      {14, SignShape::diamond, O, 3},
      {15, SignShape::octagon, G, 4},
      {16, SignShape::circle, G, 2},
  }};
  return table;
}

namespace detail {

inline bool in_shape(SignShape s, double u, double v) {
  switch (s) {
    case SignShape::octagon:
      return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 && std::abs(u) + std::abs(v) <= 1.27;
    case SignShape::triangle_up:
      return v >= -0.85 && v <= 0.8 && std::abs(u) <= 0.9 * (v + 0.85) / 1.65;
    case SignShape::triangle_down:
      return v >= -0.8 && v <= 0.85 && std::abs(u) <= 0.9 * (0.85 - v) / 1.65;
    case SignShape::circle:
      return u * u + v * v <= 0.81;
    case SignShape::rectangle:
      return std::abs(u) <= 0.85 && std::abs(v) <= 0.6;
    case SignShape::diamond:
      return std::abs(u) + std::abs(v) <= 0.95;
  }
  return false;
}

inline bool in_glyph(int glyph, double u, double v) {
  switch (glyph) {
    case 1: return std::abs(v) <= 0.16 && std::abs(u) <= 0.5;
    case 2: return std::abs(u) <= 0.16 && std::abs(v) <= 0.5;
    case 3: {
      const double r2 = u * u + v * v;
      return r2 >= 0.10 && r2 <= 0.30;
    }
    case 4:
      return (std::abs(v) <= 0.14 && std::abs(u) <= 0.5) ||
             (std::abs(u) <= 0.14 && std::abs(v) <= 0.5);
    default: return false;
  }
}

}  // namespace detail

// Bright plate, filled shape, contrasting glyph. 2x2 supersampling.
inline Image render_sign(const SignClass& cls, int side) {
  Image img(side, side);
  const double lum = 0.299 * cls.color[0] + 0.587 * cls.color[1] + 0.114 * cls.color[2];
  const std::array<double, 3> glyph_color =
      lum < 0.5 ? std::array<double, 3>{0.95, 0.95, 0.95} : std::array<double, 3>{0.05, 0.05, 0.05};
  const std::array<double, 3> plate = {0.97, 0.97, 0.92};
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      std::array<double, 3> acc = {0, 0, 0};
      for (int si = 0; si < 2; ++si)
        for (int sj = 0; sj < 2; ++sj) {
          const double v = 2.0 * (i + 0.25 + 0.5 * si) / side - 1.0;
          const double u = 2.0 * (j + 0.25 + 0.5 * sj) / side - 1.0;
          const std::array<double, 3>* c = &plate;
          if (detail::in_shape(cls.shape, u, v))
            c = detail::in_glyph(cls.glyph, u, v) ? &glyph_color : &cls.color;
          for (int k = 0; k < 3; ++k) acc[k] += (*c)[k];
        }
      for (int k = 0; k < 3; ++k) img.at(i, j, k) = static_cast<float>(acc[k] / 4.0);
    }
  return img;
}

// Labeled frames rendered through the scene channel (no perturbation),
// quantized to the camera's 8-bit output.
struct SignDataset {
  std::vector<Image> frames;
  std::vector<int> labels;
  std::vector<ScenePlacement> placements;
  nlohmann::json meta;

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& f : frames) h = fnv1a(f.data().data(), f.size() * sizeof(float), h);
    h = fnv1a(labels.data(), labels.size() * sizeof(int), h);
    return h;
  }

  void save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json entries = nlohmann::json::array();
    std::vector<int> counter(17, 0);
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const int c = labels[i];
      const std::string sub = "class_" + std::to_string(c);
      std::filesystem::create_directories(dir + "/" + sub);
      const std::string file = sub + "/frame_" + std::to_string(counter[c]++) + ".png";
      save_png(frames[i], dir + "/" + file);
      entries.push_back({{"file", file},
                         {"label", c},
                         {"top", placements[i].top},
                         {"left", placements[i].left},
                         {"side", placements[i].side}});
    }
    nlohmann::json j = {{"meta", meta}, {"frames", entries}};
    std::ofstream f(dir + "/labels.json");
    f << j.dump(2) << "\n";
  }

  static SignDataset load(const std::string& dir) {
    std::ifstream f(dir + "/labels.json");
    if (!f) throw LookupError("sign dataset labels.json missing: " + dir);
    nlohmann::json j = nlohmann::json::parse(f);
    SignDataset ds;
    ds.meta = j.value("meta", nlohmann::json::object());
    for (const auto& e : j.at("frames")) {
      ds.frames.push_back(load_png(dir + "/" + e.at("file").get<std::string>()));
      ds.labels.push_back(e.at("label").get<int>());
      ds.placements.push_back({e.at("top").get<int>(), e.at("left").get<int>(),
                               e.at("side").get<int>()});
    }
    return ds;
  }
};

inline SignDataset gen_sign_dataset(int per_class, const EnvRanges& ranges, std::uint64_t seed,
                                    const OpticsConfig& cfg = {}, int frame_side = 64,
                                    int sign_side = 64) {
  if (per_class < 1) throw DomainError("gen_sign_dataset: per_class must be >= 1");
  cfg.validate();
  BackgroundPool pool(ranges.n_backgrounds, frame_side, frame_side, derive_seed(seed, "bgpool"));
  const Image none(frame_side, frame_side, 0.0f);
  SignDataset ds;
  for (const SignClass& cls : sign_classes()) {
    const Image sign = render_sign(cls, sign_side);
    for (int k = 0; k < per_class; ++k) {
      const std::uint64_t sk =
          derive_seed(seed, "frame-" + std::to_string(cls.id) + "-" + std::to_string(k));
      const EnvSample env = sample_env(ranges, sk);
      ScenePlacement place;
      const Image scene = transform_scene(sign, pool.get(env.background_id), env, &place);
      Image frame = compose_frame(scene, none, env, cfg, derive_seed(sk, "compose"));
      ds.frames.push_back(quantize8(frame));
      ds.labels.push_back(cls.id);
      ds.placements.push_back(place);
    }
  }
  ds.meta = {{"per_class", per_class},
             {"seed", seed},
             {"frame_side", frame_side},
             {"env", ranges.to_json()},
             {"optics_hash", cfg.hash()}};
  return ds;
}

enum class VictimKind { classifier, detector };

struct Detection {
  int cell_i = 0, cell_j = 0;
  double objectness = 0.0;
  std::vector<float> class_scores;
};

// Small CNN victim. Classifier: 3 stride-2 conv blocks, average pool, linear
// head over softmax. Detector: same trunk with a per-cell head emitting
// objectness (sigmoid) plus class scores (per-cell softmax) on an 8x8 grid.
class VictimModel {
 public:
  static constexpr int kGrid = 8;

  VictimModel(VictimKind kind, int num_classes, int height, int width, std::uint64_t seed,
              double threshold = 0.6)
      : kind_(kind), num_classes_(num_classes), height_(height), width_(width), seed_(seed),
        threshold_(threshold) {
    if (height % 16 != 0 || width % 16 != 0)
      throw ShapeError("VictimModel: resolution must be a multiple of 16");
    if (num_classes < 2) throw DomainError("VictimModel: need at least 2 classes");
    Rng rng(seed);
    c1_ = std::make_unique<nn::Conv>(3, 8, 3, 2, rng);
    c2_ = std::make_unique<nn::Conv>(8, 16, 3, 2, rng);
    c3_ = std::make_unique<nn::Conv>(16, 32, 3, 2, rng);
    if (kind == VictimKind::classifier) {
      fc_in_ = (height / 16) * (width / 16) * 32;
      fc_ = std::make_unique<nn::Dense>(fc_in_, num_classes, rng);
    } else {
      if (height / 8 != kGrid || width / 8 != kGrid)
        throw ShapeError("VictimModel: detector grid expects resolution 64");
      head_ = std::make_unique<nn::Conv>(32, 1 + num_classes, 3, 1, rng);
    }
    collect();
  }

  VictimKind kind() const { return kind_; }
  int num_classes() const { return num_classes_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::uint64_t seed() const { return seed_; }
  double threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }

  std::vector<nn::Param*>& params() { return params_; }
  std::size_t n_params() const { return nn::params_count(params_); }
  std::uint64_t weights_hash() const { return nn::params_hash(params_); }

  std::vector<float> class_probabilities(const Image& frame) {
    require(VictimKind::classifier, "class_probabilities");
    return nn::softmax(logits(frame));
  }

  std::vector<float> logits(const Image& frame) {
    require(VictimKind::classifier, "logits");
    check_frame(frame);
    nn::Tensor t = pool_.forward(trunk_forward(nn::from_image(frame)));
    return fc_->forward(t.v);
  }

  // d(scalar)/d(frame) given d(scalar)/d(probabilities) of the last forward.
  Image class_grad(const Image& frame, const std::vector<float>& upstream_probs) {
    require(VictimKind::classifier, "class_grad");
    check_frame(frame);
    if (static_cast<int>(upstream_probs.size()) != num_classes_)
      throw ShapeError("class_grad: upstream length mismatch");
    nn::Tensor t = trunk_forward(nn::from_image(frame));
    t = pool_.forward(t);
    const std::vector<float> p = nn::softmax(fc_->forward(t.v));
    // softmax backward: g_i = p_i (u_i - sum_j u_j p_j)
    double mix = 0.0;
    for (int i = 0; i < num_classes_; ++i) mix += static_cast<double>(upstream_probs[i]) * p[i];
    std::vector<float> glogits(num_classes_);
    for (int i = 0; i < num_classes_; ++i)
      glogits[i] = static_cast<float>(p[i] * (upstream_probs[i] - mix));
    std::vector<float> gflat = fc_->backward(glogits);
    nn::Tensor gt(height_ / 16, width_ / 16, 32);
    gt.v = gflat;
    return nn::to_image(trunk_backward(pool_.backward(gt)));
  }

  // All grid cells with objectness and per-cell class scores.
  std::vector<Detection> detect(const Image& frame) {
    require(VictimKind::detector, "detect");
    check_frame(frame);
    const nn::Tensor raw = head_->forward(trunk_forward(nn::from_image(frame)));
    std::vector<Detection> out;
    for (int i = 0; i < raw.h; ++i)
      for (int j = 0; j < raw.w; ++j) {
        Detection d;
        d.cell_i = i;
        d.cell_j = j;
        d.objectness = 1.0 / (1.0 + std::exp(-raw.at(i, j, 0)));
        std::vector<float> logits(num_classes_);
        for (int c = 0; c < num_classes_; ++c) logits[c] = raw.at(i, j, 1 + c);
        d.class_scores = nn::softmax(logits);
        out.push_back(std::move(d));
      }
    return out;
  }

  // Class scores of cells whose objectness exceeds the threshold.
  std::vector<double> box_scores(const Image& frame, int class_id) {
    require(VictimKind::detector, "box_scores");
    if (class_id < 0 || class_id >= num_classes_) throw DomainError("box_scores: class out of range");
    std::vector<double> out;
    for (const Detection& d : detect(frame))
      if (d.objectness > threshold_) out.push_back(d.class_scores[class_id]);
    return out;
  }

  // d(mean above-threshold score)/d(frame); the threshold set is frozen.
  Image box_scores_grad(const Image& frame, int class_id, double upstream = 1.0) {
    require(VictimKind::detector, "box_scores_grad");
    check_frame(frame);
    if (class_id < 0 || class_id >= num_classes_) throw DomainError("box_scores_grad: class out of range");
    const nn::Tensor raw = head_->forward(trunk_forward(nn::from_image(frame)));
    std::vector<std::pair<int, int>> active;
    for (int i = 0; i < raw.h; ++i)
      for (int j = 0; j < raw.w; ++j)
        if (1.0 / (1.0 + std::exp(-raw.at(i, j, 0))) > threshold_) active.emplace_back(i, j);
    nn::Tensor gy(raw.h, raw.w, raw.c);
    if (!active.empty()) {
      const double scale = upstream / static_cast<double>(active.size());
      for (auto [i, j] : active) {
        std::vector<float> logits(num_classes_);
        for (int c = 0; c < num_classes_; ++c) logits[c] = raw.at(i, j, 1 + c);
        const std::vector<float> p = nn::softmax(logits);
        for (int c = 0; c < num_classes_; ++c) {
          const double onehot = c == class_id ? 1.0 : 0.0;
          gy.at(i, j, 1 + c) = static_cast<float>(scale * p[class_id] * (onehot - p[c]));
        }
      }
    }
    return nn::to_image(trunk_backward(head_->backward(gy)));
  }

  // Raw detector grid for training.
  nn::Tensor detector_forward(const Image& frame) {
    require(VictimKind::detector, "detector_forward");
    check_frame(frame);
    return head_->forward(trunk_forward(nn::from_image(frame)));
  }

  Image detector_backward(const nn::Tensor& gy) {
    return nn::to_image(trunk_backward(head_->backward(gy)));
  }

  std::vector<float> classifier_forward(const Image& frame) {
    require(VictimKind::classifier, "classifier_forward");
    check_frame(frame);
    nn::Tensor t = pool_.forward(trunk_forward(nn::from_image(frame)));
    return fc_->forward(t.v);
  }

  Image classifier_backward(const std::vector<float>& glogits) {
    nn::Tensor gt(height_ / 16, width_ / 16, 32);
    gt.v = fc_->backward(glogits);
    return nn::to_image(trunk_backward(pool_.backward(gt)));
  }

  void save(const std::string& path) const {
    nlohmann::json header = {{"magic", "dotlens-model"},
                             {"kind", kind_ == VictimKind::classifier ? "classifier" : "detector"},
                             {"num_classes", num_classes_},
                             {"height", height_},
                             {"width", width_},
                             {"seed", seed_},
                             {"threshold", threshold_},
                             {"n_params", n_params()}};
    write_checkpoint(path, header, nn::pack_params(params_));
  }

  static VictimModel load(const std::string& path) {
    auto [header, flat] = read_checkpoint(path);
    const std::string kind = header.at("kind").get<std::string>();
    if (kind != "classifier" && kind != "detector")
      throw ConfigError("checkpoint is not a victim model");
    VictimModel m(kind == "classifier" ? VictimKind::classifier : VictimKind::detector,
                  header.at("num_classes").get<int>(), header.at("height").get<int>(),
                  header.at("width").get<int>(), header.at("seed").get<std::uint64_t>(),
                  header.at("threshold").get<double>());
    nn::unpack_params(m.params_, flat);
    return m;
  }

 private:
  void require(VictimKind k, const char* op) const {
    if (kind_ != k) throw ConfigError(std::string(op) + ": wrong model kind");
  }
  void check_frame(const Image& f) const {
    if (f.height() != height_ || f.width() != width_) throw ShapeError("victim: resolution mismatch");
  }

  nn::Tensor trunk_forward(const nn::Tensor& x) {
    return r3_.forward(c3_->forward(r2_.forward(c2_->forward(r1_.forward(c1_->forward(x))))));
  }
  nn::Tensor trunk_backward(const nn::Tensor& g) {
    return c1_->backward(r1_.backward(c2_->backward(r2_.backward(c3_->backward(r3_.backward(g))))));
  }

  void collect() {
    c1_->collect(params_);
    c2_->collect(params_);
    c3_->collect(params_);
    if (fc_) fc_->collect(params_);
    if (head_) head_->collect(params_);
  }

  VictimKind kind_;
  int num_classes_, height_, width_;
  std::uint64_t seed_;
  double threshold_;
  int fc_in_ = 0;
  std::unique_ptr<nn::Conv> c1_, c2_, c3_, head_;
  std::unique_ptr<nn::Dense> fc_;
  nn::Relu r1_, r2_, r3_;
  nn::AvgPool2 pool_;
  std::vector<nn::Param*> params_;
};

struct VictimTrainOpts {
  int epochs = 12;
  int batch = 32;
  double learning_rate = 0.003;
  double train_fraction = 0.8;
  double min_quality = 0.90;
};

struct VictimTrainResult {
  VictimModel model;
  double quality = 0.0;  // held-out accuracy (classifier) or detection rate (detector)
  std::vector<double> loss_history;
};

namespace detail {

inline void split_dataset(const SignDataset& data, double train_fraction, std::uint64_t seed,
                          std::vector<std::size_t>& train_idx, std::vector<std::size_t>& val_idx) {
  std::vector<std::size_t> order(data.frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  const std::size_t n_train =
      std::max<std::size_t>(1, static_cast<std::size_t>(train_fraction * order.size()));
  train_idx.assign(order.begin(), order.begin() + n_train);
  val_idx.assign(order.begin() + n_train, order.end());
  if (val_idx.empty()) val_idx.push_back(train_idx.back());
}

// Cell occupancy from the sign bounding box: a cell is positive when its
// center falls inside the placed square.
inline bool cell_occupied(const ScenePlacement& p, int cell_i, int cell_j, int frame_side) {
  const double cell = static_cast<double>(frame_side) / VictimModel::kGrid;
  const double ci = (cell_i + 0.5) * cell;
  const double cj = (cell_j + 0.5) * cell;
  return ci >= p.top && ci < p.top + p.side && cj >= p.left && cj < p.left + p.side;
}

}  // namespace detail

inline VictimTrainResult train_classifier(const SignDataset& data, std::uint64_t seed,
                                          const VictimTrainOpts& opts = {}) {
  if (data.frames.empty()) throw DomainError("train_classifier: empty dataset");
  std::vector<bool> seen(17, false);
  for (int l : data.labels) seen[l] = true;
  for (bool s : seen)
    if (!s) throw DomainError("train_classifier: dataset does not cover all classes");

  const int side = data.frames[0].height();
  VictimTrainResult res{VictimModel(VictimKind::classifier, 17, side, side,
                                    derive_seed(seed, "init")),
                        0.0,
                        {}};
  VictimModel& model = res.model;
  nn::Adam opt;
  opt.lr = static_cast<float>(opts.learning_rate);

  std::vector<std::size_t> train_idx, val_idx;
  detail::split_dataset(data, opts.train_fraction, seed, train_idx, val_idx);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng erng(derive_seed(seed, "epoch-" + std::to_string(epoch)));
    erng.shuffle(train_idx);
    double loss = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += opts.batch) {
      const std::size_t end = std::min(train_idx.size(), start + opts.batch);
      for (auto* p : model.params()) p->zero_grad();
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t i = train_idx[s];
        const std::vector<float> logits = model.classifier_forward(data.frames[i]);
        const std::vector<float> probs = nn::softmax(logits);
        loss += nn::cross_entropy(probs, data.labels[i]);
        std::vector<float> g(probs);
        g[data.labels[i]] -= 1.0f;
        model.classifier_backward(g);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto* p : model.params())
        for (auto& g : p->g) g *= inv;
      opt.step(model.params());
    }
    loss /= static_cast<double>(train_idx.size());
    if (!std::isfinite(loss)) throw TrainError("classifier diverged at epoch " + std::to_string(epoch));
    res.loss_history.push_back(loss);
  }

  int correct = 0;
  for (std::size_t i : val_idx) {
    const std::vector<float> p = model.class_probabilities(data.frames[i]);
    int arg = 0;
    for (int c = 1; c < 17; ++c)
      if (p[c] > p[arg]) arg = c;
    if (arg == data.labels[i]) ++correct;
  }
  res.quality = static_cast<double>(correct) / static_cast<double>(val_idx.size());
  if (res.quality < opts.min_quality)
    throw TrainError("classifier held-out accuracy " + std::to_string(res.quality) +
                     " below the quality bar");
  return res;
}

inline VictimTrainResult train_detector(const SignDataset& data, std::uint64_t seed,
                                        const VictimTrainOpts& opts = {}, double threshold = 0.6) {
  if (data.frames.empty()) throw DomainError("train_detector: empty dataset");
  const int side = data.frames[0].height();
  VictimTrainResult res{VictimModel(VictimKind::detector, 17, side, side,
                                    derive_seed(seed, "init"), threshold),
                        0.0,
                        {}};
  VictimModel& model = res.model;
  nn::Adam opt;
  opt.lr = static_cast<float>(opts.learning_rate);

  std::vector<std::size_t> train_idx, val_idx;
  detail::split_dataset(data, opts.train_fraction, seed, train_idx, val_idx);
  const int S = VictimModel::kGrid;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng erng(derive_seed(seed, "epoch-" + std::to_string(epoch)));
    erng.shuffle(train_idx);
    double loss = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += opts.batch) {
      const std::size_t end = std::min(train_idx.size(), start + opts.batch);
      for (auto* p : model.params()) p->zero_grad();
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t i = train_idx[s];
        const nn::Tensor raw = model.detector_forward(data.frames[i]);
        nn::Tensor gy(raw.h, raw.w, raw.c);
        const double cell_norm = 1.0 / (S * S);
        for (int ci = 0; ci < S; ++ci)
          for (int cj = 0; cj < S; ++cj) {
            const bool occ = detail::cell_occupied(data.placements[i], ci, cj, side);
            const double sig = 1.0 / (1.0 + std::exp(-raw.at(ci, cj, 0)));
            loss += -cell_norm * (occ ? std::log(std::max(sig, 1e-12))
                                      : std::log(std::max(1.0 - sig, 1e-12)));
            gy.at(ci, cj, 0) = static_cast<float>(cell_norm * (sig - (occ ? 1.0 : 0.0)));
            if (occ) {
              std::vector<float> logits(17);
              for (int c = 0; c < 17; ++c) logits[c] = raw.at(ci, cj, 1 + c);
              const std::vector<float> p = nn::softmax(logits);
              loss += cell_norm * nn::cross_entropy(p, data.labels[i]);
              for (int c = 0; c < 17; ++c)
                gy.at(ci, cj, 1 + c) = static_cast<float>(
                    cell_norm * (p[c] - (c == data.labels[i] ? 1.0 : 0.0)));
            }
          }
        model.detector_backward(gy);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto* p : model.params())
        for (auto& g : p->g) g *= inv;
      opt.step(model.params());
    }
    loss /= static_cast<double>(train_idx.size());
    if (!std::isfinite(loss)) throw TrainError("detector diverged at epoch " + std::to_string(epoch));
    res.loss_history.push_back(loss);
  }

  int hit = 0;
  for (std::size_t i : val_idx) {
    bool ok = false;
    for (const Detection& d : model.detect(data.frames[i])) {
      if (d.objectness <= threshold) continue;
      int arg = 0;
      for (int c = 1; c < 17; ++c)
        if (d.class_scores[c] > d.class_scores[arg]) arg = c;
      if (arg == data.labels[i]) {
        ok = true;
        break;
      }
    }
    if (ok) ++hit;
  }
  res.quality = static_cast<double>(hit) / static_cast<double>(val_idx.size());
  if (res.quality < opts.min_quality)
    throw TrainError("detector held-out detection rate " + std::to_string(res.quality) +
                     " below the quality bar");
  return res;
}

}  // namespace dotlens
