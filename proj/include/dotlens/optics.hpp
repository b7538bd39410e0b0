#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dotlens/common.hpp"
#include "dotlens/image.hpp"
#include "dotlens/rng.hpp"
#include "json.hpp"

namespace dotlens {

// Parametric stand-in for the display/beam-splitter/camera rig. Acts as the
// ground-truth channel the surrogate model learns.
struct OpticsConfig {
  double blur_sigma = 2.0;
  std::array<std::array<double, 3>, 3> color_matrix = {{{0.9, 0.05, 0.05},
                                                        {0.05, 0.9, 0.05},
                                                        {0.05, 0.05, 0.9}}};
  std::array<double, 3> channel_gains = {0.9, 1.0, 0.8};
  double beam_split = 0.5;
  double display_gamma = 1.2;
  double noise_sigma = 0.01;
  double e_half = 1000.0;     // lux at which perturbation visibility halves
  double e_nominal = 600.0;   // lux of nominal exposure
  double nd_transmission = 0.1;

  void validate() const {
    if (blur_sigma <= 0.0 || display_gamma <= 0.0 || noise_sigma < 0.0 ||
        e_half <= 0.0 || e_nominal <= 0.0)
      throw DomainError("OpticsConfig: scalars must be positive");
    if (beam_split <= 0.0 || beam_split > 1.0) throw DomainError("OpticsConfig: beam_split out of (0,1]");
    if (nd_transmission <= 0.0 || nd_transmission > 1.0)
      throw DomainError("OpticsConfig: nd_transmission out of (0,1]");
  }

  nlohmann::json to_json() const {
    return {{"blur_sigma", blur_sigma},
            {"color_matrix", color_matrix},
            {"channel_gains", channel_gains},
            {"beam_split", beam_split},
            {"display_gamma", display_gamma},
            {"noise_sigma", noise_sigma},
            {"e_half", e_half},
            {"e_nominal", e_nominal},
            {"nd_transmission", nd_transmission}};
  }

  static OpticsConfig from_json(const nlohmann::json& j) {
    OpticsConfig c;
    c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
    if (j.contains("color_matrix")) c.color_matrix = j.at("color_matrix");
    if (j.contains("channel_gains")) c.channel_gains = j.at("channel_gains");
    c.beam_split = j.value("beam_split", c.beam_split);
    c.display_gamma = j.value("display_gamma", c.display_gamma);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.e_half = j.value("e_half", c.e_half);
    c.e_nominal = j.value("e_nominal", c.e_nominal);
    c.nd_transmission = j.value("nd_transmission", c.nd_transmission);
    return c;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

// One draw of the environmental state.
struct EnvSample {
  double perspective_deg = 0.0;  // [-30, 30]
  double rotation_deg = 0.0;     // [-5, 5]
  double scale = 1.0;            // sign size as fraction of frame height, [0.3, 1.0]
  int background_id = 0;
  double illuminance = 600.0;    // lux
  bool nd_filter = false;

  void validate() const {
    if (perspective_deg < -30.0 || perspective_deg > 30.0)
      throw DomainError("EnvSample: perspective outside [-30, 30] degrees");
    if (rotation_deg < -5.0 || rotation_deg > 5.0)
      throw DomainError("EnvSample: rotation outside [-5, 5] degrees");
    if (scale < 0.3 || scale > 1.0) throw DomainError("EnvSample: scale outside [0.3, 1.0]");
    if (illuminance < 30.0 || illuminance > 60000.0)
      throw DomainError("EnvSample: illuminance outside [30, 60000] lux");
  }
};

struct EnvRanges {
  double perspective_min = -30.0, perspective_max = 30.0;
  double rotation_min = -5.0, rotation_max = 5.0;
  double scale_min = 0.3, scale_max = 1.0;
  double lux_min = 30.0, lux_max = 3000.0;
  int n_backgrounds = 8;
  bool nd_filter = false;

  nlohmann::json to_json() const {
    return {{"perspective", {perspective_min, perspective_max}},
            {"rotation", {rotation_min, rotation_max}},
            {"scale", {scale_min, scale_max}},
            {"lux", {lux_min, lux_max}},
            {"n_backgrounds", n_backgrounds},
            {"nd_filter", nd_filter}};
  }

  static EnvRanges from_json(const nlohmann::json& j) {
    EnvRanges r;
    auto pair = [&](const char* key, double& lo, double& hi) {
      if (j.contains(key)) {
        lo = j.at(key).at(0).get<double>();
        hi = j.at(key).at(1).get<double>();
      }
    };
    pair("perspective", r.perspective_min, r.perspective_max);
    pair("rotation", r.rotation_min, r.rotation_max);
    pair("scale", r.scale_min, r.scale_max);
    pair("lux", r.lux_min, r.lux_max);
    r.n_backgrounds = j.value("n_backgrounds", r.n_backgrounds);
    r.nd_filter = j.value("nd_filter", r.nd_filter);
    return r;
  }
};

inline EnvSample sample_env(const EnvRanges& ranges, std::uint64_t seed) {
  Rng rng(seed);
  EnvSample e;
  e.perspective_deg = rng.uniform(ranges.perspective_min, ranges.perspective_max);
  e.rotation_deg = rng.uniform(ranges.rotation_min, ranges.rotation_max);
  e.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
  e.background_id = static_cast<int>(rng.uniform_index(ranges.n_backgrounds));
  e.illuminance = rng.uniform(ranges.lux_min, ranges.lux_max);
  e.nd_filter = ranges.nd_filter;
  return e;
}

namespace detail {

// Separable Gaussian blur with replicate padding (constants stay constant).
inline Image gaussian_blur(const Image& x, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kern(2 * radius + 1);
  double sum = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    kern[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
    sum += kern[t + radius];
  }
  for (auto& v : kern) v /= sum;

  const int h = x.height(), w = x.width();
  Image tmp(h, w), out(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          int jj = std::clamp(j + t, 0, w - 1);
          acc += kern[t + radius] * x.at(i, jj, c);
        }
        tmp.at(i, j, c) = static_cast<float>(acc);
      }
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          int ii = std::clamp(i + t, 0, h - 1);
          acc += kern[t + radius] * tmp.at(ii, j, c);
        }
        out.at(i, j, c) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace detail

// Ground-truth camera-display transfer function. Stage order: display gamma,
// free-space blur, sensor color response, beam-splitter attenuation, sensor
// noise. Output is the perturbation's camera-side appearance before scene
// composition.
inline Image oracle_cdtf(const Image& i_d, const OpticsConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Image x = i_d;
  for (auto& v : x.data()) v = static_cast<float>(std::pow(static_cast<double>(v), cfg.display_gamma));
  x = detail::gaussian_blur(x, cfg.blur_sigma);
  for (int i = 0; i < x.height(); ++i)
    for (int j = 0; j < x.width(); ++j) {
      const double r = x.at(i, j, 0), g = x.at(i, j, 1), b = x.at(i, j, 2);
      for (int c = 0; c < 3; ++c) {
        const double mixed = cfg.color_matrix[c][0] * r + cfg.color_matrix[c][1] * g +
                             cfg.color_matrix[c][2] * b;
        x.at(i, j, c) = static_cast<float>(mixed * cfg.channel_gains[c] * cfg.beam_split);
      }
    }
  if (cfg.noise_sigma > 0.0) {
    Rng rng(seed);
    for (auto& v : x.data()) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
  }
  x.clamp();
  return x;
}

// Effective lux after the optional ND filter (which sits in front of the
// display and attenuates only scene light).
inline double effective_lux(const EnvSample& env, const OpticsConfig& cfg) {
  return env.illuminance * (env.nd_filter ? cfg.nd_transmission : 1.0);
}

inline double scene_brightness(double lux_eff, const OpticsConfig& cfg) {
  return std::clamp(lux_eff / cfg.e_nominal, 0.3, 1.0);
}

// Perturbation visibility: saturating decay in ambient light.
inline double perturb_visibility(double lux_eff, const OpticsConfig& cfg) {
  return 1.0 / (1.0 + lux_eff / cfg.e_half);
}

// frame = clamp( b(E')*scene + v(E')*i_p + noise ). clamp_mask (optional)
// receives 1 where the clamp is inactive, for subgradient propagation.
inline Image compose_frame(const Image& scene, const Image& i_p, const EnvSample& env,
                           const OpticsConfig& cfg, std::uint64_t seed,
                           Image* clamp_mask = nullptr) {
  check_same_shape(scene, i_p);
  const double lux = effective_lux(env, cfg);
  const double b = scene_brightness(lux, cfg);
  const double v = perturb_visibility(lux, cfg);
  Image out(scene.height(), scene.width());
  if (clamp_mask) *clamp_mask = Image(scene.height(), scene.width(), 0.0f);
  Rng rng(seed);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double val = b * scene.data()[k] + v * i_p.data()[k];
    if (cfg.noise_sigma > 0.0) val += rng.normal(0.0, cfg.noise_sigma);
    out.data()[k] = clamp01(static_cast<float>(val));
    if (clamp_mask && val > 0.0 && val < 1.0) clamp_mask->data()[k] = 1.0f;
  }
  return out;
}

struct ScenePlacement {
  int top = 0, left = 0, side = 0;
};

// Rotation, then a horizontal-foreshortening perspective homography, then
// scaling to env.scale of the frame height, composited at a deterministic
// position derived from the background id. Bilinear sampling.
inline Image transform_scene(const Image& sign, const Image& background, const EnvSample& env,
                             ScenePlacement* placement_out = nullptr) {
  env.validate();
  if (sign.height() != sign.width()) throw ShapeError("transform_scene: sign must be square");
  const int fh = background.height(), fw = background.width();
  const int side = std::max(1, static_cast<int>(std::lround(env.scale * fh)));
  if (side > fh || side > fw) throw ShapeError("transform_scene: sign larger than frame");

  // deterministic placement from the background id
  const std::uint64_t h = derive_seed(static_cast<std::uint64_t>(env.background_id), "placement");
  const int max_top = fh - side, max_left = fw - side;
  const int top = max_top > 0 ? static_cast<int>(h % (max_top + 1)) : 0;
  const int left = max_left > 0 ? static_cast<int>((h >> 20) % (max_left + 1)) : 0;
  if (placement_out) *placement_out = {top, left, side};

  const int s = sign.height();
  const double rot = env.rotation_deg * M_PI / 180.0;
  const double phi = env.perspective_deg * M_PI / 180.0;
  const double z0 = 3.0;  // camera distance in sign half-widths
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double cp = std::cos(phi), sp = std::sin(phi);

  Image out = background;
  for (int i = top; i < top + side; ++i) {
    for (int j = left; j < left + side; ++j) {
      // normalized coords in the target square, in [-1, 1]
      const double U = (2.0 * (j - left) / (side - 1)) - 1.0;
      const double V = (2.0 * (i - top) / (side - 1)) - 1.0;
      // invert the perspective projection: U = u*cp*z0/(z0 + u*sp)
      const double denom = cp * z0 - U * sp;
      if (std::abs(denom) < 1e-9) continue;
      const double u1 = U * z0 / denom;
      const double v1 = V * (z0 + u1 * sp) / z0;
      // invert the rotation
      const double u = cr * u1 + sr * v1;
      const double v = -sr * u1 + cr * v1;
      // back to sign pixel coordinates
      const double sj = (u + 1.0) * 0.5 * (s - 1);
      const double si = (v + 1.0) * 0.5 * (s - 1);
      if (si < 0.0 || si > s - 1 || sj < 0.0 || sj > s - 1) continue;
      const int i0 = static_cast<int>(si), j0 = static_cast<int>(sj);
      const int i1 = std::min(i0 + 1, s - 1), j1 = std::min(j0 + 1, s - 1);
      const double fi = si - i0, fj = sj - j0;
      for (int c = 0; c < 3; ++c) {
        const double val = (1 - fi) * ((1 - fj) * sign.at(i0, j0, c) + fj * sign.at(i0, j1, c)) +
                           fi * ((1 - fj) * sign.at(i1, j0, c) + fj * sign.at(i1, j1, c));
        out.at(i, j, c) = static_cast<float>(val);
      }
    }
  }
  return out;
}

// Procedurally generated background pool (smooth color gradients with a few
// soft blobs), deterministic per (seed, id).
class BackgroundPool {
 public:
  BackgroundPool(int count, int height, int width, std::uint64_t seed)
      : count_(count), height_(height), width_(width), seed_(seed) {}

  int count() const { return count_; }

  Image get(int id) const {
    if (id < 0 || id >= count_) throw LookupError("background id out of range");
    Rng rng(derive_seed(seed_, "background-" + std::to_string(id)));
    Image bg(height_, width_);
    std::array<double, 3> c0{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    std::array<double, 3> c1{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double gx = std::cos(angle), gy = std::sin(angle);
    for (int i = 0; i < height_; ++i)
      for (int j = 0; j < width_; ++j) {
        const double t = 0.5 + 0.5 * (gx * (2.0 * j / width_ - 1.0) + gy * (2.0 * i / height_ - 1.0));
        for (int c = 0; c < 3; ++c)
          bg.at(i, j, c) = static_cast<float>(c0[c] * (1 - t) + c1[c] * t);
      }
    const int blobs = 3 + static_cast<int>(rng.uniform_index(4));
    for (int b = 0; b < blobs; ++b) {
      const double bi = rng.uniform(0.0, height_), bj = rng.uniform(0.0, width_);
      const double br = rng.uniform(height_ / 8.0, height_ / 3.0);
      std::array<double, 3> bc{rng.uniform(), rng.uniform(), rng.uniform()};
      const double w = rng.uniform(0.2, 0.6);
      for (int i = 0; i < height_; ++i)
        for (int j = 0; j < width_; ++j) {
          const double d2 = ((i - bi) * (i - bi) + (j - bj) * (j - bj)) / (br * br);
          const double a = w * std::exp(-d2);
          for (int c = 0; c < 3; ++c)
            bg.at(i, j, c) = static_cast<float>((1 - a) * bg.at(i, j, c) + a * bc[c]);
        }
    }
    bg.clamp();
    return bg;
  }

  // Writes PNGs plus a JSON manifest listing the ids.
  void save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["count"] = count_;
    manifest["height"] = height_;
    manifest["width"] = width_;
    manifest["seed"] = seed_;
    nlohmann::json ids = nlohmann::json::array();
    for (int id = 0; id < count_; ++id) {
      const std::string name = "bg_" + std::to_string(id) + ".png";
      save_png(get(id), dir + "/" + name);
      ids.push_back({{"id", id}, {"file", name}});
    }
    manifest["backgrounds"] = ids;
    std::ofstream f(dir + "/manifest.json");
    f << manifest.dump(2) << "\n";
  }

 private:
  int count_, height_, width_;
  std::uint64_t seed_;
};

}  // namespace dotlens
