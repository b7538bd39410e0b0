#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dotlens/common.hpp"
#include "dotlens/dots.hpp"
#include "dotlens/image.hpp"
#include "dotlens/optics.hpp"
#include "dotlens/rng.hpp"
#include "dotlens/surrogate.hpp"
#include "dotlens/victim.hpp"
#include "json.hpp"

namespace dotlens {

constexpr int kAllClasses = -1;

enum class AttackMode { full, no_tnet, random_search, static_env };
enum class ObjectiveKind { classifier, detector };

inline std::string attack_mode_name(AttackMode m) {
  switch (m) {
    case AttackMode::full: return "full";
    case AttackMode::no_tnet: return "no_tnet";
    case AttackMode::random_search: return "random";
    case AttackMode::static_env: return "static_env";
  }
  throw DomainError("unknown attack mode");
}

inline AttackMode attack_mode_from_name(const std::string& s) {
  if (s == "full") return AttackMode::full;
  if (s == "no_tnet") return AttackMode::no_tnet;
  if (s == "random") return AttackMode::random_search;
  if (s == "static_env") return AttackMode::static_env;
  throw ConfigError("unknown attack mode: " + s);
}

struct AttackConfig {
  int n_dots = 100;
  double radius_fraction = 0.1;
  double alpha_max = 1.0;
  double beta = 1.0;
  double lr_centers = 1.0;
  double lr_colors = 0.1;
  int lr_decay_every = 200;
  double lr_decay_factor = 10.0;
  int max_epochs = 500;
  int batch = 16;
  int greedy_batch = 4;
  int block_grid = 10;
  std::vector<std::array<double, 3>> palette;  // empty selects the 27 points of {0,0.5,1}^3
  double convergence_rel_change = 1e-4;
  int convergence_window = 20;
  AttackMode mode = AttackMode::full;
  ObjectiveKind objective_kind = ObjectiveKind::classifier;
  double ce_epsilon = 1e-6;
  int random_tries = 20;

  std::vector<std::array<double, 3>> effective_palette() const {
    if (!palette.empty()) return palette;
    std::vector<std::array<double, 3>> p;
    static const double level[3] = {0.0, 0.5, 1.0};
    for (double r : level)
      for (double g : level)
        for (double b : level) p.push_back({r, g, b});
    return p;
  }

  void validate() const {
    if (n_dots < 1 || block_grid < 1 || batch < 1 || greedy_batch < 1 || max_epochs < 1 ||
        random_tries < 1)
      throw ConfigError("AttackConfig: nonpositive budget");
    if (lr_centers < 0.0 || lr_colors < 0.0 || lr_decay_every < 1 || lr_decay_factor <= 1.0)
      throw ConfigError("AttackConfig: invalid rates");
    if (radius_fraction <= 0.0 || alpha_max <= 0.0 || alpha_max > 1.0 || beta <= 0.0)
      throw ConfigError("AttackConfig: invalid dot shape parameters");
    if (ce_epsilon <= 0.0 || convergence_rel_change <= 0.0 || convergence_window < 1)
      throw ConfigError("AttackConfig: invalid convergence settings");
  }

  nlohmann::json to_json() const {
    return {{"n_dots", n_dots},
            {"radius_fraction", radius_fraction},
            {"alpha_max", alpha_max},
            {"beta", beta},
            {"lr_centers", lr_centers},
            {"lr_colors", lr_colors},
            {"lr_decay_every", lr_decay_every},
            {"lr_decay_factor", lr_decay_factor},
            {"max_epochs", max_epochs},
            {"batch", batch},
            {"greedy_batch", greedy_batch},
            {"block_grid", block_grid},
            {"palette", effective_palette()},
            {"convergence_rel_change", convergence_rel_change},
            {"convergence_window", convergence_window},
            {"mode", attack_mode_name(mode)},
            {"objective_kind", objective_kind == ObjectiveKind::classifier ? "classifier" : "detector"},
            {"ce_epsilon", ce_epsilon},
            {"random_tries", random_tries}};
  }

  static AttackConfig from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.n_dots = j.value("n_dots", c.n_dots);
    c.radius_fraction = j.value("radius_fraction", c.radius_fraction);
    c.alpha_max = j.value("alpha_max", c.alpha_max);
    c.beta = j.value("beta", c.beta);
    c.lr_centers = j.value("lr_centers", c.lr_centers);
    c.lr_colors = j.value("lr_colors", c.lr_colors);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch = j.value("batch", c.batch);
    c.greedy_batch = j.value("greedy_batch", c.greedy_batch);
    c.block_grid = j.value("block_grid", c.block_grid);
    if (j.contains("palette")) c.palette = j.at("palette").get<std::vector<std::array<double, 3>>>();
    c.convergence_rel_change = j.value("convergence_rel_change", c.convergence_rel_change);
    c.convergence_window = j.value("convergence_window", c.convergence_window);
    if (j.contains("mode")) c.mode = attack_mode_from_name(j.at("mode").get<std::string>());
    if (j.contains("objective_kind"))
      c.objective_kind = j.at("objective_kind").get<std::string>() == "detector"
                             ? ObjectiveKind::detector
                             : ObjectiveKind::classifier;
    c.ce_epsilon = j.value("ce_epsilon", c.ce_epsilon);
    c.random_tries = j.value("random_tries", c.random_tries);
    return c;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

struct PerturbationRecord {
  int target_class = kAllClasses;  // kAllClasses for the static ALL record
  DotParams dot_params;
  double asr = 0.0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string mode = "full";
  std::string objective_kind = "classifier";

  nlohmann::json to_json() const {
    return {{"target_class", target_class},
            {"dot_params", dot_params.to_json()},
            {"asr", asr},
            {"config_hash", config_hash},
            {"seed", seed},
            {"mode", mode},
            {"objective_kind", objective_kind}};
  }

  static PerturbationRecord from_json(const nlohmann::json& j) {
    PerturbationRecord r;
    r.target_class = j.at("target_class").get<int>();
    r.dot_params = DotParams::from_json(j.at("dot_params"));
    r.asr = j.at("asr").get<double>();
    if (r.asr < 0.0 || r.asr > 1.0) throw DomainError("PerturbationRecord: asr out of [0,1]");
    r.config_hash = j.at("config_hash").get<std::uint64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mode = j.value("mode", r.mode);
    r.objective_kind = j.value("objective_kind", r.objective_kind);
    return r;
  }
};

// Mean over the batch of 1/(CE + eps); minimizing drives cross-entropy up.
inline double attack_objective_classifier(const std::vector<Image>& frames,
                                          const std::vector<int>& labels, VictimModel& model,
                                          double ce_epsilon = 1e-6) {
  if (frames.size() != labels.size() || frames.empty())
    throw DomainError("attack_objective_classifier: empty or mismatched batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= model.num_classes())
      throw DomainError("attack_objective_classifier: label out of range");
    const double ce = nn::cross_entropy(model.class_probabilities(frames[i]), labels[i]);
    acc += 1.0 / (ce + ce_epsilon);
  }
  return acc / static_cast<double>(frames.size());
}

// Mean over the batch of the mean above-threshold class score (0 when no
// boxes); minimized toward a missed detection.
inline double attack_objective_detector(const std::vector<Image>& frames, int class_id,
                                        VictimModel& model) {
  if (frames.empty()) throw DomainError("attack_objective_detector: empty batch");
  double acc = 0.0;
  for (const Image& f : frames) {
    const auto scores = model.box_scores(f, class_id);
    double m = 0.0;
    for (double s : scores) m += s;
    acc += scores.empty() ? 0.0 : m / static_cast<double>(scores.size());
  }
  return acc / static_cast<double>(frames.size());
}

namespace detail {

// One environmental condition with its pre-transformed scene.
struct EnvCase {
  EnvSample env;
  Image scene;
  int label = 0;
  std::uint64_t noise_seed = 0;
};

struct AttackContext {
  VictimModel* victim = nullptr;
  SurrogateModel* tnet = nullptr;  // null in no_tnet / random modes
  const OpticsConfig* optics = nullptr;
  const AttackConfig* cfg = nullptr;
  const EnvRanges* ranges = nullptr;
  const BackgroundPool* pool = nullptr;
  std::vector<Image> signs;  // one per class at victim resolution
};

inline AttackContext make_context(VictimModel& victim, SurrogateModel* tnet,
                                  const OpticsConfig& optics, const AttackConfig& cfg,
                                  const EnvRanges& ranges, const BackgroundPool& pool) {
  AttackContext ctx;
  ctx.victim = &victim;
  ctx.tnet = tnet;
  ctx.optics = &optics;
  ctx.cfg = &cfg;
  ctx.ranges = &ranges;
  ctx.pool = &pool;
  for (const SignClass& c : sign_classes()) ctx.signs.push_back(render_sign(c, victim.height()));
  return ctx;
}

inline EnvCase make_case(const AttackContext& ctx, int class_id, std::uint64_t seed,
                         const EnvSample* pinned_env) {
  EnvCase c;
  c.env = pinned_env ? *pinned_env : sample_env(*ctx.ranges, derive_seed(seed, "env"));
  c.label = class_id == kAllClasses
                ? static_cast<int>(Rng(derive_seed(seed, "class")).uniform_index(17))
                : class_id;
  c.scene = transform_scene(ctx.signs[c.label], ctx.pool->get(c.env.background_id), c.env);
  c.noise_seed = derive_seed(seed, "noise");
  return c;
}

inline std::vector<EnvCase> make_batch(const AttackContext& ctx, int class_id, int n,
                                       std::uint64_t seed, const EnvSample* pinned_env) {
  std::vector<EnvCase> batch;
  for (int i = 0; i < n; ++i)
    batch.push_back(make_case(ctx, class_id, derive_seed(seed, "case-" + std::to_string(i)),
                              pinned_env));
  return batch;
}

// Eq. 6 objective for one composed frame; grad_frame (optional) receives
// d(objective contribution)/d(frame) before batch averaging.
inline double case_objective(const AttackContext& ctx, const EnvCase& c, const Image& frame,
                             Image* grad_frame) {
  VictimModel& victim = *ctx.victim;
  if (ctx.cfg->objective_kind == ObjectiveKind::classifier) {
    const std::vector<float> probs = victim.class_probabilities(frame);
    const double ce = nn::cross_entropy(probs, c.label);
    const double obj = 1.0 / (ce + ctx.cfg->ce_epsilon);
    if (grad_frame) {
      // d(1/(CE+eps))/d p_label = 1 / ((CE+eps)^2 p_label)
      std::vector<float> up(victim.num_classes(), 0.0f);
      const double pl = std::max(static_cast<double>(probs[c.label]), 1e-30);
      up[c.label] = static_cast<float>(1.0 / ((ce + ctx.cfg->ce_epsilon) *
                                              (ce + ctx.cfg->ce_epsilon) * pl));
      *grad_frame = victim.class_grad(frame, up);
    }
    return obj;
  }
  const auto scores = victim.box_scores(frame, c.label);
  double m = 0.0;
  for (double s : scores) m += s;
  const double obj = scores.empty() ? 0.0 : m / static_cast<double>(scores.size());
  if (grad_frame) {
    if (scores.empty()) *grad_frame = Image(frame.height(), frame.width(), 0.0f);
    else *grad_frame = victim.box_scores_grad(frame, c.label, 1.0);
  }
  return obj;
}

// Full-chain objective for a digital perturbation already mapped to its
// camera-side appearance.
inline double batch_objective_from_ip(const AttackContext& ctx, const std::vector<EnvCase>& batch,
                                      const Image& i_p, Image* grad_ip) {
  if (grad_ip) *grad_ip = Image(i_p.height(), i_p.width(), 0.0f);
  double acc = 0.0;
  for (const EnvCase& c : batch) {
    Image mask;
    const Image frame = compose_frame(c.scene, i_p, c.env, *ctx.optics, c.noise_seed,
                                      grad_ip ? &mask : nullptr);
    Image gframe;
    acc += case_objective(ctx, c, frame, grad_ip ? &gframe : nullptr);
    if (grad_ip) {
      const double v = perturb_visibility(effective_lux(c.env, *ctx.optics), *ctx.optics);
      const double scale = v / static_cast<double>(batch.size());
      for (std::size_t k = 0; k < gframe.size(); ++k)
        grad_ip->data()[k] += static_cast<float>(scale * gframe.data()[k] * mask.data()[k]);
    }
  }
  return acc / static_cast<double>(batch.size());
}

inline double batch_objective(const AttackContext& ctx, const std::vector<EnvCase>& batch,
                              const DotParams& theta) {
  const int side = ctx.victim->height();
  const Image i_d = render(theta, side, side);
  const Image i_p = ctx.tnet ? ctx.tnet->predict(i_d) : i_d;
  return batch_objective_from_ip(ctx, batch, i_p, nullptr);
}

inline double batch_objective_grad(const AttackContext& ctx, const std::vector<EnvCase>& batch,
                                   const DotParams& theta, DotGrad& grad) {
  const int side = ctx.victim->height();
  const Image i_d = render(theta, side, side);
  Image grad_ip;
  double obj;
  Image grad_id;
  if (ctx.tnet) {
    nn::Tensor y = ctx.tnet->forward(nn::from_image(i_d));
    obj = batch_objective_from_ip(ctx, batch, nn::to_image(y), &grad_ip);
    // weights stay frozen: gradients accumulate but are discarded
    grad_id = nn::to_image(ctx.tnet->backward(nn::from_image(grad_ip)));
    for (auto* p : ctx.tnet->params()) p->zero_grad();
  } else {
    obj = batch_objective_from_ip(ctx, batch, i_d, &grad_ip);
    grad_id = grad_ip;
  }
  for (auto* p : ctx.victim->params()) p->zero_grad();
  grad = render_grad(theta, side, side, grad_id);
  return obj;
}

}  // namespace detail

struct GreedyResult {
  DotParams theta;
  std::vector<double> trace;  // objective after each accepted decision
};

// Coarse block-coordinate-descent initialization: dots placed one at a time,
// each chosen over every (block center, palette color) candidate plus a null
// "skip" candidate on a fixed EnvSample batch. First-encountered candidate
// wins ties; two consecutive null wins stop the search.
inline GreedyResult greedy_init(detail::AttackContext& ctx, int class_id, std::uint64_t seed,
                                const EnvSample* pinned_env = nullptr) {
  const AttackConfig& cfg = *ctx.cfg;
  cfg.validate();
  const int side = ctx.victim->height();
  const auto batch = detail::make_batch(ctx, class_id, cfg.greedy_batch,
                                        derive_seed(seed, "greedy"), pinned_env);
  const auto palette = cfg.effective_palette();
  const double radius = cfg.radius_fraction * side;
  const int B = cfg.block_grid;

  GreedyResult res;
  res.theta.alpha_max = cfg.alpha_max;
  res.theta.beta = cfg.beta;
  double cur = detail::batch_objective(ctx, batch, res.theta);
  res.trace.push_back(cur);

  int null_wins = 0;
  for (int k = 0; k < cfg.n_dots; ++k) {
    double best = cur;
    bool found = false;
    std::array<double, 2> best_center{};
    std::array<double, 3> best_color{};
    DotParams cand = res.theta;
    cand.centers.push_back({0.0, 0.0});
    cand.radii.push_back(radius);
    cand.colors.push_back({0.0, 0.0, 0.0});
    for (int bi = 0; bi < B; ++bi) {
      for (int bj = 0; bj < B; ++bj) {
        cand.centers.back() = {(bi + 0.5) * side / B, (bj + 0.5) * side / B};
        for (const auto& color : palette) {
          cand.colors.back() = color;
          const double obj = detail::batch_objective(ctx, batch, cand);
          if (obj < best) {
            best = obj;
            found = true;
            best_center = cand.centers.back();
            best_color = color;
          }
        }
      }
    }
    if (!found) {
      if (++null_wins >= 2) break;
      res.trace.push_back(cur);
      continue;
    }
    null_wins = 0;
    res.theta.centers.push_back(best_center);
    res.theta.radii.push_back(radius);
    res.theta.colors.push_back(best_color);
    cur = best;
    res.trace.push_back(cur);
  }
  return res;
}

// Sign-gradient refinement with projection, step decay, and best-iterate
// return on a fixed held-out batch.
inline DotParams refine(const DotParams& theta0, detail::AttackContext& ctx, int class_id,
                        std::uint64_t seed, const EnvSample* pinned_env = nullptr) {
  const AttackConfig& cfg = *ctx.cfg;
  cfg.validate();
  const int side = ctx.victim->height();
  theta0.validate(side, side);

  const auto holdout = detail::make_batch(ctx, class_id, cfg.batch,
                                          derive_seed(seed, "holdout"), pinned_env);
  DotParams theta = theta0;
  DotParams best_theta = theta0;
  double best_obj = detail::batch_objective(ctx, holdout, theta0);

  double lr_c = cfg.lr_centers;
  double lr_g = cfg.lr_colors;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    if (epoch > 0 && epoch % cfg.lr_decay_every == 0) {
      lr_c /= cfg.lr_decay_factor;
      lr_g /= cfg.lr_decay_factor;
    }
    const auto batch = detail::make_batch(ctx, class_id, cfg.batch,
                                          derive_seed(seed, "epoch-" + std::to_string(epoch)),
                                          pinned_env);
    DotGrad grad;
    const double obj = detail::batch_objective_grad(ctx, batch, theta, grad);
    for (int k = 0; k < theta.n(); ++k) {
      for (int a = 0; a < 2; ++a) {
        const double g = grad.centers[k][a];
        if (!std::isfinite(g)) throw TrainError("refine: NaN gradient at epoch " + std::to_string(epoch));
        if (g != 0.0) theta.centers[k][a] -= lr_c * (g > 0.0 ? 1.0 : -1.0);
      }
      for (int c = 0; c < 3; ++c) {
        const double g = grad.colors[k][c];
        if (!std::isfinite(g)) throw TrainError("refine: NaN gradient at epoch " + std::to_string(epoch));
        if (g != 0.0) theta.colors[k][c] -= lr_g * (g > 0.0 ? 1.0 : -1.0);
      }
    }
    project(theta, side, side);

    const double hobj = detail::batch_objective(ctx, holdout, theta);
    if (hobj < best_obj) {
      best_obj = hobj;
      best_theta = theta;
    }

    history.push_back(obj);
    const int w = cfg.convergence_window;
    if (static_cast<int>(history.size()) > w) {
      const double prev = history[history.size() - 1 - w];
      const double rel = std::abs(obj - prev) / std::max(std::abs(prev), 1e-12);
      if (rel < cfg.convergence_rel_change) break;
    }
  }
  return best_theta;
}

// Oracle-channel success-rate estimate over fresh environmental samples.
inline double estimate_asr(const DotParams& theta, VictimModel& victim, const OpticsConfig& optics,
                           const EnvRanges& ranges, const BackgroundPool& pool, int target_class,
                           int n_frames, std::uint64_t seed,
                           ObjectiveKind kind = ObjectiveKind::classifier) {
  const int side = victim.height();
  const Image i_d = render(theta, side, side);
  const Image i_p = oracle_cdtf(i_d, optics, derive_seed(seed, "cdtf"));
  std::vector<Image> signs;
  for (const SignClass& c : sign_classes()) signs.push_back(render_sign(c, side));
  int success = 0;
  for (int i = 0; i < n_frames; ++i) {
    const std::uint64_t si = derive_seed(seed, "asr-" + std::to_string(i));
    const EnvSample env = sample_env(ranges, derive_seed(si, "env"));
    const int label = target_class == kAllClasses
                          ? static_cast<int>(Rng(derive_seed(si, "class")).uniform_index(17))
                          : target_class;
    const Image scene = transform_scene(signs[label], pool.get(env.background_id), env);
    const Image frame =
        quantize8(compose_frame(scene, i_p, env, optics, derive_seed(si, "noise")));
    if (kind == ObjectiveKind::classifier) {
      const auto p = victim.class_probabilities(frame);
      int arg = 0;
      for (int c = 1; c < victim.num_classes(); ++c)
        if (p[c] > p[arg]) arg = c;
      if (arg != label) ++success;
    } else {
      bool detected = false;
      for (const Detection& d : victim.detect(frame)) {
        if (d.objectness <= victim.threshold()) continue;
        int arg = 0;
        for (int c = 1; c < victim.num_classes(); ++c)
          if (d.class_scores[c] > d.class_scores[arg]) arg = c;
        if (arg == label) {
          detected = true;
          break;
        }
      }
      if (!detected) ++success;
    }
  }
  return static_cast<double>(success) / static_cast<double>(n_frames);
}

// Algorithm: greedy initialization then sign-gradient refinement; ablation
// modes replace pieces of the chain. The returned record carries a fresh
// oracle-channel ASR estimate.
inline PerturbationRecord craft_uap(int class_id, VictimModel& victim, SurrogateModel* tnet,
                                    const AttackConfig& cfg, const OpticsConfig& optics,
                                    const EnvRanges& ranges, std::uint64_t seed,
                                    int asr_frames = 100) {
  cfg.validate();
  optics.validate();
  if (class_id != kAllClasses && (class_id < 0 || class_id >= 17))
    throw DomainError("craft_uap: class out of range");
  if (cfg.mode == AttackMode::full && !tnet)
    throw ConfigError("craft_uap: full mode requires a surrogate model");

  const std::uint64_t before_victim = victim.weights_hash();
  const std::uint64_t before_tnet = tnet ? tnet->weights_hash() : 0;

  BackgroundPool pool(ranges.n_backgrounds, victim.height(), victim.width(),
                      derive_seed(seed, "bgpool"));
  SurrogateModel* used_tnet = cfg.mode == AttackMode::full ? tnet : nullptr;
  detail::AttackContext ctx = detail::make_context(victim, used_tnet, optics, cfg, ranges, pool);

  EnvSample pinned;
  const EnvSample* pinned_ptr = nullptr;
  if (cfg.mode == AttackMode::static_env) {
    pinned = sample_env(ranges, derive_seed(seed, "static-env"));
    pinned_ptr = &pinned;
  }

  DotParams theta;
  if (cfg.mode == AttackMode::random_search) {
    DotSpec spec;
    spec.n = cfg.n_dots;
    spec.radius_fraction = cfg.radius_fraction;
    spec.alpha_max = cfg.alpha_max;
    spec.beta = cfg.beta;
    spec.canvas_h = victim.height();
    spec.canvas_w = victim.width();
    const auto batch = detail::make_batch(ctx, class_id, cfg.batch,
                                          derive_seed(seed, "random-batch"), nullptr);
    double best = std::numeric_limits<double>::infinity();
    for (int t = 0; t < cfg.random_tries; ++t) {
      const DotParams cand = sample_random(spec, derive_seed(seed, "try-" + std::to_string(t)));
      const double obj = detail::batch_objective(ctx, batch, cand);
      if (obj < best) {
        best = obj;
        theta = cand;
      }
    }
  } else {
    GreedyResult g = greedy_init(ctx, class_id, seed, pinned_ptr);
    theta = refine(g.theta, ctx, class_id, seed, pinned_ptr);
  }

  if (victim.weights_hash() != before_victim || (tnet && tnet->weights_hash() != before_tnet))
    throw TrainError("craft_uap: frozen weights were mutated");

  PerturbationRecord rec;
  rec.target_class = class_id;
  rec.dot_params = theta;
  rec.config_hash = cfg.hash();
  rec.seed = seed;
  rec.mode = attack_mode_name(cfg.mode);
  rec.objective_kind = cfg.objective_kind == ObjectiveKind::classifier ? "classifier" : "detector";
  rec.asr = estimate_asr(theta, victim, optics, ranges, pool, class_id, asr_frames,
                         derive_seed(seed, "asr"), cfg.objective_kind);
  return rec;
}

}  // namespace dotlens
