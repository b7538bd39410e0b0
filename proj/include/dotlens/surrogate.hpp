#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dotlens/checkpoint.hpp"
#include "dotlens/common.hpp"
#include "dotlens/dots.hpp"
#include "dotlens/image.hpp"
#include "dotlens/metrics.hpp"
#include "dotlens/nn.hpp"
#include "dotlens/optics.hpp"
#include "dotlens/rng.hpp"
#include "json.hpp"

namespace dotlens {

enum class SurrogateArch { skip_unet, plain_autoencoder, mlp };

inline std::string arch_name(SurrogateArch a) {
  switch (a) {
    case SurrogateArch::skip_unet: return "skip-unet";
    case SurrogateArch::plain_autoencoder: return "plain-autoencoder";
    case SurrogateArch::mlp: return "mlp";
  }
  throw DomainError("unknown architecture");
}

inline SurrogateArch arch_from_name(const std::string& s) {
  if (s == "skip-unet") return SurrogateArch::skip_unet;
  if (s == "plain-autoencoder") return SurrogateArch::plain_autoencoder;
  if (s == "mlp") return SurrogateArch::mlp;
  throw ConfigError("unknown architecture: " + s);
}

struct SurrogateHyper {
  double loss_mix = 0.0004;  // perceptual weight in the combined loss
  double learning_rate = 0.003;
  int batch = 32;
  int epochs = 100;
  double train_fraction = 0.8;

  void validate() const {
    if (loss_mix < 0.0 || loss_mix > 1.0) throw ConfigError("SurrogateHyper: loss_mix out of [0,1]");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
      throw ConfigError("SurrogateHyper: train_fraction out of (0,1)");
    if (learning_rate <= 0.0 || batch < 1 || epochs < 1)
      throw ConfigError("SurrogateHyper: nonpositive budget");
  }

  nlohmann::json to_json() const {
    return {{"loss_mix", loss_mix},
            {"learning_rate", learning_rate},
            {"batch", batch},
            {"epochs", epochs},
            {"train_fraction", train_fraction}};
  }

  static SurrogateHyper from_json(const nlohmann::json& j) {
    SurrogateHyper h;
    h.loss_mix = j.value("loss_mix", h.loss_mix);
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.batch = j.value("batch", h.batch);
    h.epochs = j.value("epochs", h.epochs);
    h.train_fraction = j.value("train_fraction", h.train_fraction);
    return h;
  }
};

// Paired (digital perturbation, camera-side appearance) samples.
struct PairDataset {
  std::vector<std::pair<Image, Image>> pairs;
  nlohmann::json meta;

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [d, p] : pairs) {
      h = fnv1a(d.data().data(), d.size() * sizeof(float), h);
      h = fnv1a(p.data().data(), p.size() * sizeof(float), h);
    }
    return h;
  }

  void save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      save_png(pairs[i].first, dir + "/digital_" + std::to_string(i) + ".png");
      save_png(pairs[i].second, dir + "/physical_" + std::to_string(i) + ".png");
    }
    nlohmann::json m = meta;
    m["count"] = pairs.size();
    std::ofstream f(dir + "/manifest.json");
    f << m.dump(2) << "\n";
  }

  static PairDataset load(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw LookupError("pair dataset manifest missing: " + dir);
    PairDataset ds;
    ds.meta = nlohmann::json::parse(f);
    const std::size_t count = ds.meta.at("count").get<std::size_t>();
    for (std::size_t i = 0; i < count; ++i)
      ds.pairs.emplace_back(load_png(dir + "/digital_" + std::to_string(i) + ".png"),
                            load_png(dir + "/physical_" + std::to_string(i) + ".png"));
    return ds;
  }
};

// Random perturbations pushed through the ground-truth channel. Dot counts
// cycle through {10, 30, 50}.
inline PairDataset gen_pairs(int count, const DotSpec& dot_spec, const OpticsConfig& cfg,
                             std::uint64_t seed) {
  if (count < 1) throw DomainError("gen_pairs: count must be >= 1");
  dot_spec.validate();
  cfg.validate();
  static constexpr int kDotCounts[3] = {10, 30, 50};
  PairDataset ds;
  for (int i = 0; i < count; ++i) {
    DotSpec spec = dot_spec;
    spec.n = kDotCounts[i % 3];
    const std::uint64_t si = derive_seed(seed, "pair-" + std::to_string(i));
    Image digital = render(sample_random(spec, si), spec.canvas_h, spec.canvas_w);
    Image physical = oracle_cdtf(digital, cfg, derive_seed(si, "cdtf"));
    ds.pairs.emplace_back(std::move(digital), std::move(physical));
  }
  ds.meta = {{"seed", seed},
             {"dot_counts", {10, 30, 50}},
             {"canvas", {dot_spec.canvas_h, dot_spec.canvas_w}},
             {"optics_hash", cfg.hash()}};
  return ds;
}

namespace detail {

struct SurrogateBody {
  virtual ~SurrogateBody() = default;
  virtual nn::Tensor forward(const nn::Tensor& x) = 0;
  virtual nn::Tensor backward(const nn::Tensor& gy) = 0;
  virtual void collect(std::vector<nn::Param*>& out) = 0;
};

// Three stride-2 encoder stages, a bottleneck, three nearest-upsample decoder
// stages, sigmoid head. Skips concat the pre-downsample activations.
class EncoderDecoder : public SurrogateBody {
 public:
  EncoderDecoder(bool skips, Rng& rng)
      : skips_(skips),
        d1_(3, 8, 3, 2, rng), d2_(8, 16, 3, 2, rng), d3_(16, 32, 3, 2, rng),
        mid_(32, 32, 3, 1, rng),
        u3_(skips ? 48 : 32, 16, 3, 1, rng),
        u2_(skips ? 24 : 16, 8, 3, 1, rng),
        u1_(skips ? 11 : 8, 8, 3, 1, rng),
        head_(8, 3, 3, 1, rng) {
    // head bias starts near the dim channel output level, not sigmoid(0)=0.5
    std::fill(head_.bias().w.begin(), head_.bias().w.end(), -2.0f);
  }

  nn::Tensor forward(const nn::Tensor& x) override {
    if (x.h % 8 != 0 || x.w % 8 != 0) throw ShapeError("surrogate: resolution must be a multiple of 8");
    x0_ = x;
    a1_ = r1_.forward(d1_.forward(x));
    a2_ = r2_.forward(d2_.forward(a1_));
    nn::Tensor a3 = r3_.forward(d3_.forward(a2_));
    nn::Tensor m = rm_.forward(mid_.forward(a3));
    nn::Tensor t = up3_.forward(m);
    if (skips_) t = nn::concat_channels(t, a2_);
    t = ru3_.forward(u3_.forward(t));
    t = up2_.forward(t);
    if (skips_) t = nn::concat_channels(t, a1_);
    t = ru2_.forward(u2_.forward(t));
    t = up1_.forward(t);
    if (skips_) t = nn::concat_channels(t, x0_);
    t = ru1_.forward(u1_.forward(t));
    return sig_.forward(head_.forward(t));
  }

  nn::Tensor backward(const nn::Tensor& gy) override {
    nn::Tensor g = u1_.backward(ru1_.backward(head_.backward(sig_.backward(gy))));
    nn::Tensor gskip_x;
    if (skips_) {
      nn::Tensor ga;
      nn::split_channels_grad(g, ga, gskip_x, 8);
      g = ga;
    }
    g = up1_.backward(g);
    g = u2_.backward(ru2_.backward(g));
    nn::Tensor gskip_a1;
    if (skips_) {
      nn::Tensor ga;
      nn::split_channels_grad(g, ga, gskip_a1, 16);
      g = ga;
    }
    g = up2_.backward(g);
    g = u3_.backward(ru3_.backward(g));
    nn::Tensor gskip_a2;
    if (skips_) {
      nn::Tensor ga;
      nn::split_channels_grad(g, ga, gskip_a2, 32);
      g = ga;
    }
    g = up3_.backward(g);
    g = d3_.backward(r3_.backward(mid_.backward(rm_.backward(g))));
    if (skips_)
      for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += gskip_a2.v[i];
    g = d2_.backward(r2_.backward(g));
    if (skips_)
      for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += gskip_a1.v[i];
    g = d1_.backward(r1_.backward(g));
    if (skips_)
      for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += gskip_x.v[i];
    return g;
  }

  void collect(std::vector<nn::Param*>& out) override {
    d1_.collect(out); d2_.collect(out); d3_.collect(out); mid_.collect(out);
    u3_.collect(out); u2_.collect(out); u1_.collect(out); head_.collect(out);
  }

 private:
  bool skips_;
  nn::Conv d1_, d2_, d3_, mid_, u3_, u2_, u1_, head_;
  nn::Relu r1_, r2_, r3_, rm_, ru3_, ru2_, ru1_;
  nn::Upsample2 up3_, up2_, up1_;
  nn::Sigmoid sig_;
  nn::Tensor x0_, a1_, a2_;
};

// Shared two-layer perceptron applied to non-overlapping 8x8 patches.
class PatchMlp : public SurrogateBody {
 public:
  static constexpr int kPatch = 8;

  PatchMlp(int hidden, Rng& rng)
      : hidden_(hidden),
        w1_(static_cast<std::size_t>(kIn) * hidden), b1_(hidden),
        w2_(static_cast<std::size_t>(hidden) * kIn), b2_(kIn) {
    const double s1 = std::sqrt(2.0 / kIn);
    for (auto& w : w1_.w) w = static_cast<float>(rng.normal(0.0, s1));
    const double s2 = std::sqrt(2.0 / hidden);
    for (auto& w : w2_.w) w = static_cast<float>(rng.normal(0.0, s2));
  }

  nn::Tensor forward(const nn::Tensor& x) override {
    if (x.h % kPatch != 0 || x.w % kPatch != 0 || x.c != 3)
      throw ShapeError("surrogate mlp: resolution must be a multiple of 8");
    h_ = x.h; w_ = x.w;
    const long np = patches();
    p_.resize(np, kIn);
    to_patches(x.v, p_);
    hid_.noalias() = p_ * nn::CMapMat(w1_.w.data(), kIn, hidden_);
    hid_.rowwise() += nn::CMapMat(b1_.w.data(), 1, hidden_).row(0);
    hid_ = hid_.cwiseMax(0.0f);
    out_.noalias() = hid_ * nn::CMapMat(w2_.w.data(), hidden_, kIn);
    out_.rowwise() += nn::CMapMat(b2_.w.data(), 1, kIn).row(0);
    out_ = (1.0f + (-out_.array()).exp()).inverse().matrix();
    nn::Tensor y(h_, w_, 3);
    from_patches(out_, y.v);
    return y;
  }

  nn::Tensor backward(const nn::Tensor& gy) override {
    const long np = patches();
    nn::Mat go(np, kIn);
    to_patches(gy.v, go);
    go.array() *= out_.array() * (1.0f - out_.array());
    nn::MapMat(w2_.g.data(), hidden_, kIn).noalias() += hid_.transpose() * go;
    nn::MapMat(b2_.g.data(), 1, kIn).noalias() += go.colwise().sum();
    nn::Mat gh = go * nn::CMapMat(w2_.w.data(), hidden_, kIn).transpose();
    gh.array() *= (hid_.array() > 0.0f).cast<float>();
    nn::MapMat(w1_.g.data(), kIn, hidden_).noalias() += p_.transpose() * gh;
    nn::MapMat(b1_.g.data(), 1, hidden_).noalias() += gh.colwise().sum();
    nn::Mat gp = gh * nn::CMapMat(w1_.w.data(), kIn, hidden_).transpose();
    nn::Tensor gx(h_, w_, 3);
    from_patches(gp, gx.v);
    return gx;
  }

  void collect(std::vector<nn::Param*>& out) override {
    out.push_back(&w1_);
    out.push_back(&b1_);
    out.push_back(&w2_);
    out.push_back(&b2_);
  }

 private:
  static constexpr int kIn = kPatch * kPatch * 3;

  long patches() const { return static_cast<long>(h_ / kPatch) * (w_ / kPatch); }

  void to_patches(const std::vector<float>& img, nn::Mat& m) const {
    long p = 0;
    for (int bi = 0; bi < h_; bi += kPatch)
      for (int bj = 0; bj < w_; bj += kPatch, ++p) {
        long q = 0;
        for (int i = 0; i < kPatch; ++i)
          for (int j = 0; j < kPatch; ++j)
            for (int c = 0; c < 3; ++c, ++q)
              m(p, q) = img[(static_cast<std::size_t>(bi + i) * w_ + bj + j) * 3 + c];
      }
  }

  void from_patches(const nn::Mat& m, std::vector<float>& img) const {
    long p = 0;
    for (int bi = 0; bi < h_; bi += kPatch)
      for (int bj = 0; bj < w_; bj += kPatch, ++p) {
        long q = 0;
        for (int i = 0; i < kPatch; ++i)
          for (int j = 0; j < kPatch; ++j)
            for (int c = 0; c < 3; ++c, ++q)
              img[(static_cast<std::size_t>(bi + i) * w_ + bj + j) * 3 + c] = m(p, q);
      }
  }

  int hidden_;
  int h_ = 0, w_ = 0;
  nn::Param w1_, b1_, w2_, b2_;
  nn::Mat p_, hid_, out_;
};

}  // namespace detail

// Trainable stand-in for the optical channel. Output resolution equals input
// resolution; inference is deterministic.
class SurrogateModel {
 public:
  SurrogateModel(SurrogateArch arch, int height, int width, std::uint64_t seed)
      : arch_(arch), height_(height), width_(width), seed_(seed) {
    if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0)
      throw ShapeError("SurrogateModel: resolution must be a positive multiple of 8");
    Rng rng(seed);
    switch (arch) {
      case SurrogateArch::skip_unet:
        body_ = std::make_unique<detail::EncoderDecoder>(true, rng);
        break;
      case SurrogateArch::plain_autoencoder:
        body_ = std::make_unique<detail::EncoderDecoder>(false, rng);
        break;
      case SurrogateArch::mlp:
        body_ = std::make_unique<detail::PatchMlp>(30, rng);
        break;
    }
    body_->collect(params_);
  }

  SurrogateArch arch() const { return arch_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t optics_hash = 0;

  std::vector<nn::Param*>& params() { return params_; }
  std::size_t n_params() const { return nn::params_count(params_); }
  std::uint64_t weights_hash() const { return nn::params_hash(params_); }

  Image predict(const Image& x) {
    check_resolution(x);
    return nn::to_image(body_->forward(nn::from_image(x)));
  }

  // Forward then backward with frozen semantics left to the caller (grads
  // accumulate into params; zero or discard them when only the input gradient
  // is wanted). Returns d(scalar)/d(input) given upstream = d(scalar)/d(output).
  Image predict_with_grad(const Image& x, const Image& upstream, Image* prediction = nullptr) {
    check_resolution(x);
    check_resolution(upstream);
    nn::Tensor y = body_->forward(nn::from_image(x));
    if (prediction) *prediction = nn::to_image(y);
    return nn::to_image(body_->backward(nn::from_image(upstream)));
  }

  nn::Tensor forward(const nn::Tensor& x) { return body_->forward(x); }
  nn::Tensor backward(const nn::Tensor& gy) { return body_->backward(gy); }

  void save(const std::string& path) const {
    nlohmann::json header = {{"magic", "dotlens-model"},
                             {"kind", "surrogate"},
                             {"architecture", arch_name(arch_)},
                             {"height", height_},
                             {"width", width_},
                             {"seed", seed_},
                             {"optics_hash", optics_hash},
                             {"n_params", n_params()}};
    write_checkpoint(path, header, nn::pack_params(params_));
  }

  static SurrogateModel load(const std::string& path) {
    auto [header, flat] = read_checkpoint(path);
    if (header.value("kind", "") != "surrogate") throw ConfigError("checkpoint is not a surrogate model");
    SurrogateModel m(arch_from_name(header.at("architecture").get<std::string>()),
                     header.at("height").get<int>(), header.at("width").get<int>(),
                     header.at("seed").get<std::uint64_t>());
    m.optics_hash = header.value("optics_hash", 0ull);
    nn::unpack_params(m.params_, flat);
    return m;
  }

 private:
  void check_resolution(const Image& x) const {
    if (x.height() != height_ || x.width() != width_)
      throw ShapeError("surrogate: resolution mismatch");
  }

  SurrogateArch arch_;
  int height_, width_;
  std::uint64_t seed_;
  std::unique_ptr<detail::SurrogateBody> body_;
  std::vector<nn::Param*> params_;
};

struct TrainHistoryEntry {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct SurrogateTrainResult {
  SurrogateModel model;
  std::vector<TrainHistoryEntry> history;
  int best_epoch = -1;
};

namespace detail {

inline double combined_loss_grad(PerceptualNet& perc, double a, const Image& pred,
                                 const Image& target, Image& grad) {
  const double m = mse(pred, target);
  const std::size_t n = pred.size();
  if (a == 0.0) {
    grad = Image(pred.height(), pred.width());
    for (std::size_t i = 0; i < n; ++i)
      grad.data()[i] = static_cast<float>(2.0 * (static_cast<double>(pred.data()[i]) - target.data()[i]) / n);
    return m;
  }
  Image pgrad(pred.height(), pred.width());
  const double p = perc.distance_with_grad(pred, target, pgrad);
  grad = Image(pred.height(), pred.width());
  for (std::size_t i = 0; i < n; ++i)
    grad.data()[i] = static_cast<float>(
        (1.0 - a) * 2.0 * (static_cast<double>(pred.data()[i]) - target.data()[i]) / n +
        a * pgrad.data()[i]);
  return (1.0 - a) * m + a * p;
}

inline double combined_loss(PerceptualNet& perc, double a, const Image& pred, const Image& target) {
  const double m = mse(pred, target);
  if (a == 0.0) return m;
  return (1.0 - a) * m + a * perc.distance(pred, target);
}

}  // namespace detail

// l = (1-a)*MSE + a*perceptual, adaptive-moment updates, 80/20 split, and the
// checkpoint from the epoch with the lowest validation loss.
inline SurrogateTrainResult train_surrogate(const PairDataset& data, SurrogateArch arch,
                                            const SurrogateHyper& hyper, std::uint64_t seed) {
  hyper.validate();
  if (data.pairs.empty()) throw DomainError("train_surrogate: empty dataset");
  const int h = data.pairs[0].first.height();
  const int w = data.pairs[0].first.width();
  for (const auto& [d, p] : data.pairs)
    if (d.height() != h || d.width() != w || p.height() != h || p.width() != w)
      throw ShapeError("train_surrogate: mixed resolutions in dataset");

  std::vector<std::size_t> order(data.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(seed, "split"));
  split_rng.shuffle(order);
  const std::size_t n_train =
      std::max<std::size_t>(1, static_cast<std::size_t>(hyper.train_fraction * order.size()));
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> val_idx(order.begin() + n_train, order.end());
  if (val_idx.empty()) val_idx.push_back(train_idx.back());

  SurrogateTrainResult res{SurrogateModel(arch, h, w, derive_seed(seed, "init")), {}, -1};
  SurrogateModel& model = res.model;
  if (data.meta.contains("optics_hash")) model.optics_hash = data.meta.at("optics_hash").get<std::uint64_t>();
  nn::Adam opt;
  opt.lr = static_cast<float>(hyper.learning_rate);
  PerceptualNet perc;

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<float> best_weights = nn::pack_params(model.params());

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(seed, "epoch-" + std::to_string(epoch)));
    epoch_rng.shuffle(train_idx);

    double train_loss = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += hyper.batch) {
      const std::size_t end = std::min(train_idx.size(), start + hyper.batch);
      for (auto* p : model.params()) p->zero_grad();
      for (std::size_t s = start; s < end; ++s) {
        const auto& [digital, physical] = data.pairs[train_idx[s]];
        nn::Tensor y = model.forward(nn::from_image(digital));
        Image grad;
        train_loss += detail::combined_loss_grad(perc, hyper.loss_mix, nn::to_image(y),
                                                 physical, grad);
        model.backward(nn::from_image(grad));
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto* p : model.params())
        for (auto& g : p->g) g *= inv;
      opt.step(model.params());
    }
    train_loss /= static_cast<double>(train_idx.size());

    double val_loss = 0.0;
    for (std::size_t idx : val_idx)
      val_loss += detail::combined_loss(perc, hyper.loss_mix,
                                        model.predict(data.pairs[idx].first),
                                        data.pairs[idx].second);
    val_loss /= static_cast<double>(val_idx.size());

    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      throw TrainError("surrogate training diverged at epoch " + std::to_string(epoch));
    res.history.push_back({train_loss, val_loss});
    if (val_loss < best_val) {
      best_val = val_loss;
      best_weights = nn::pack_params(model.params());
      res.best_epoch = epoch;
    }
  }
  nn::unpack_params(model.params(), best_weights);
  return res;
}

inline MetricReport eval_surrogate(SurrogateModel& model, const PairDataset& data) {
  if (data.pairs.empty()) throw DomainError("eval_surrogate: empty dataset");
  PerceptualNet perc;
  MetricReport r;
  for (const auto& [digital, physical] : data.pairs) {
    const Image pred = model.predict(digital);
    r.mse += mse(pred, physical);
    r.psnr += psnr(pred, physical);
    r.ssim += ssim(pred, physical);
    r.perceptual += perc.distance(pred, physical);
  }
  const double n = static_cast<double>(data.pairs.size());
  r.mse /= n;
  r.psnr /= n;
  r.ssim /= n;
  r.perceptual /= n;
  return r;
}

}  // namespace dotlens
