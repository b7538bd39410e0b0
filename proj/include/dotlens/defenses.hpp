#pragma once

#include <string>
#include <vector>

#include "dotlens/serving.hpp"

namespace dotlens {

enum class DefenseKind { squeeze, randomize };

inline std::string defense_kind_name(DefenseKind k) {
  return k == DefenseKind::squeeze ? "squeeze" : "randomize";
}

struct DefenseConfig {
  DefenseKind kind = DefenseKind::squeeze;
  int bits = 8;
  int scale_min = 64;
  int scale_max = 80;
  int pad_target = 80;

  void validate() const {
    if (bits < 1 || bits > 8) throw DomainError("DefenseConfig: bits outside [1, 8]");
    if (scale_min < 1 || scale_max < scale_min)
      throw DomainError("DefenseConfig: invalid scale range");
    if (pad_target < scale_max) throw DomainError("DefenseConfig: pad_target below max scale");
  }
};

inline Image feature_squeeze(const Image& x, int bits) {
  if (bits < 1 || bits > 8) throw DomainError("feature_squeeze: bits outside [1, 8]");
  const float levels = static_cast<float>((1 << bits) - 1);
  Image out(x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data()[i] = std::round(x.data()[i] * levels) / levels;
  return out;
}

namespace detail {

inline Image bilinear_resize(const Image& x, int side) {
  const int h = x.height(), w = x.width();
  Image out(side, side);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      const double sy = (i + 0.5) * h / side - 0.5;
      const double sx = (j + 0.5) * w / side - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, h - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double fy = std::clamp(sy - y0, 0.0, 1.0);
      const double fx = std::clamp(sx - x0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double top = x.at(y0, x0, c) * (1 - fx) + x.at(y0, x1, c) * fx;
        const double bot = x.at(y1, x0, c) * (1 - fx) + x.at(y1, x1, c) * fx;
        out.at(i, j, c) = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  return out;
}

}  // namespace detail

// Random rescale within [scale_min, scale_max] then random zero-pad out to
// pad_target square.
inline Image input_randomize(const Image& x, const DefenseConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int side = cfg.scale_min + static_cast<int>(rng.uniform_index(
                                       static_cast<std::size_t>(cfg.scale_max - cfg.scale_min + 1)));
  const Image scaled = detail::bilinear_resize(x, side);
  const int slack = cfg.pad_target - side;
  const int top = slack > 0 ? static_cast<int>(rng.uniform_index(slack + 1)) : 0;
  const int left = slack > 0 ? static_cast<int>(rng.uniform_index(slack + 1)) : 0;
  Image out(cfg.pad_target, cfg.pad_target);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      for (int c = 0; c < 3; ++c) out.at(top + i, left + j, c) = scaled.at(i, j, c);
  return out;
}

struct DefensePoint {
  double lux = 0.0;
  double asr = 0.0;           // defended
  double baseline_asr = 0.0;  // undefended
  double benign_acc = 0.0;    // clean accuracy under the defense
  int n_frames = 0;
};

// Applies the defense to every frame before inference; the randomize path
// feeds a victim trained at pad_target resolution while baseline and benign
// frames are produced at the attack resolution.
inline std::vector<DefensePoint> eval_defense(const DefenseConfig& cfg,
                                              const PerturbationRecord& rec,
                                              VictimModel& baseline_victim,
                                              VictimModel& defended_victim,
                                              const OpticsConfig& optics, const EnvRanges& ranges,
                                              const std::vector<double>& lux_levels,
                                              int frames_per_level, std::uint64_t seed,
                                              ObjectiveKind kind = ObjectiveKind::classifier) {
  cfg.validate();
  if (lux_levels.empty()) throw DomainError("eval_defense: no lux levels");
  if (frames_per_level < 1) throw DomainError("eval_defense: frames_per_level must be positive");
  const int side = baseline_victim.height();
  if (cfg.kind == DefenseKind::randomize) {
    if (defended_victim.height() != cfg.pad_target)
      throw ConfigError("eval_defense: randomize needs a victim trained at pad_target inputs");
  } else if (defended_victim.height() != side) {
    throw ConfigError("eval_defense: squeeze victim resolution mismatch");
  }

  BackgroundPool pool(ranges.n_backgrounds, side, side, derive_seed(seed, "bgpool"));
  std::vector<Image> signs;
  for (const SignClass& c : sign_classes()) signs.push_back(render_sign(c, side));
  const Image i_d = render(rec.dot_params, side, side);
  const Image i_p = oracle_cdtf(i_d, optics, derive_seed(seed, "cdtf"));
  const Image none(side, side);

  auto defend = [&](const Image& frame, std::uint64_t s) {
    return cfg.kind == DefenseKind::squeeze ? feature_squeeze(frame, cfg.bits)
                                            : input_randomize(frame, cfg, s);
  };

  std::vector<DefensePoint> out;
  for (double lux : lux_levels) {
    EnvRanges pinned = ranges;
    pinned.lux_min = lux;
    pinned.lux_max = lux;
    DefensePoint p;
    p.lux = lux;
    p.n_frames = frames_per_level;
    int def_success = 0, base_success = 0, benign_good = 0;
    for (int i = 0; i < frames_per_level; ++i) {
      const std::uint64_t fs =
          derive_seed(seed, "lux-" + std::to_string(lux) + "-frame-" + std::to_string(i));
      const EnvSample env = sample_env(pinned, derive_seed(fs, "env"));
      const int label = rec.target_class == kAllClasses
                            ? static_cast<int>(Rng(derive_seed(fs, "class")).uniform_index(17))
                            : rec.target_class;
      const Image scene = transform_scene(signs[label], pool.get(env.background_id), env);
      const Image adv = quantize8(compose_frame(scene, i_p, env, optics, derive_seed(fs, "noise")));
      const Image clean =
          quantize8(compose_frame(scene, none, env, optics, derive_seed(fs, "noise")));
      if (detail::frame_attack_success(adv, label, baseline_victim, kind)) ++base_success;
      if (detail::frame_attack_success(defend(adv, derive_seed(fs, "rand-adv")), label,
                                       defended_victim, kind))
        ++def_success;
      if (!detail::frame_attack_success(defend(clean, derive_seed(fs, "rand-clean")), label,
                                        defended_victim, kind))
        ++benign_good;
    }
    p.asr = static_cast<double>(def_success) / frames_per_level;
    p.baseline_asr = static_cast<double>(base_success) / frames_per_level;
    p.benign_acc = static_cast<double>(benign_good) / frames_per_level;
    out.push_back(p);
  }
  return out;
}

inline std::string defense_csv(const std::vector<DefensePoint>& table,
                               const std::string& defense_id) {
  std::string s = "defense,lux,asr,baseline_asr,benign_acc,n_frames\n";
  for (const DefensePoint& p : table)
    s += defense_id + "," + format_double(p.lux) + "," + format_double(p.asr) + "," +
         format_double(p.baseline_asr) + "," + format_double(p.benign_acc) + "," +
         std::to_string(p.n_frames) + "\n";
  return s;
}

}  // namespace dotlens
