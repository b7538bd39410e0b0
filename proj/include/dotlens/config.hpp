#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "dotlens/defenses.hpp"

namespace dotlens {

// One configuration drives every pipeline stage; the master seed fans out
// through stage-keyed derivation so stages can rerun independently.
struct ExperimentConfig {
  std::string workdir = "work";
  std::string db_dir;  // defaults to workdir/db
  OpticsConfig optics;
  DotSpec dot_spec;
  SurrogateHyper surrogate;
  AttackConfig attack;
  EnvRanges env;
  DefenseConfig defense;
  std::vector<double> lux_grid = {120.0, 180.0, 300.0, 600.0, 1500.0, 3000.0};
  std::uint64_t master_seed = 1;
  int frame_side = 64;
  int signs_per_class = 80;
  int victim_epochs = 25;
  int pair_count = 2000;
  int frames_per_sign = 20;
  int asr_frames = 100;

  std::string db() const { return db_dir.empty() ? workdir + "/db" : db_dir; }

  void validate() const {
    optics.validate();
    dot_spec.validate();
    surrogate.validate();
    attack.validate();
    defense.validate();
    if (lux_grid.empty()) throw ConfigError("ExperimentConfig: empty lux grid");
    if (frame_side < 16 || frame_side % 16 != 0)
      throw ConfigError("ExperimentConfig: frame_side must be a positive multiple of 16");
    if (signs_per_class < 1 || pair_count < 1 || frames_per_sign < 1 || asr_frames < 1 ||
        victim_epochs < 1)
      throw ConfigError("ExperimentConfig: nonpositive budget");
  }

  nlohmann::json to_json() const {
    return {{"workdir", workdir},
            {"db_dir", db_dir},
            {"optics", optics.to_json()},
            {"dot_spec",
             {{"n", dot_spec.n},
              {"radius_fraction", dot_spec.radius_fraction},
              {"alpha_max", dot_spec.alpha_max},
              {"beta", dot_spec.beta},
              {"canvas_h", dot_spec.canvas_h},
              {"canvas_w", dot_spec.canvas_w}}},
            {"surrogate", surrogate.to_json()},
            {"attack", attack.to_json()},
            {"env", env.to_json()},
            {"defense",
             {{"kind", defense_kind_name(defense.kind)},
              {"bits", defense.bits},
              {"scale_min", defense.scale_min},
              {"scale_max", defense.scale_max},
              {"pad_target", defense.pad_target}}},
            {"lux_grid", lux_grid},
            {"master_seed", master_seed},
            {"frame_side", frame_side},
            {"signs_per_class", signs_per_class},
            {"victim_epochs", victim_epochs},
            {"pair_count", pair_count},
            {"frames_per_sign", frames_per_sign},
            {"asr_frames", asr_frames}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.workdir = j.value("workdir", c.workdir);
    c.db_dir = j.value("db_dir", c.db_dir);
    if (j.contains("optics")) c.optics = OpticsConfig::from_json(j.at("optics"));
    if (j.contains("dot_spec")) {
      const auto& d = j.at("dot_spec");
      c.dot_spec.n = d.value("n", c.dot_spec.n);
      c.dot_spec.radius_fraction = d.value("radius_fraction", c.dot_spec.radius_fraction);
      c.dot_spec.alpha_max = d.value("alpha_max", c.dot_spec.alpha_max);
      c.dot_spec.beta = d.value("beta", c.dot_spec.beta);
      c.dot_spec.canvas_h = d.value("canvas_h", c.dot_spec.canvas_h);
      c.dot_spec.canvas_w = d.value("canvas_w", c.dot_spec.canvas_w);
    }
    if (j.contains("surrogate")) c.surrogate = SurrogateHyper::from_json(j.at("surrogate"));
    if (j.contains("attack")) c.attack = AttackConfig::from_json(j.at("attack"));
    if (j.contains("env")) c.env = EnvRanges::from_json(j.at("env"));
    if (j.contains("defense")) {
      const auto& d = j.at("defense");
      c.defense.kind = d.value("kind", std::string("squeeze")) == "randomize"
                           ? DefenseKind::randomize
                           : DefenseKind::squeeze;
      c.defense.bits = d.value("bits", c.defense.bits);
      c.defense.scale_min = d.value("scale_min", c.defense.scale_min);
      c.defense.scale_max = d.value("scale_max", c.defense.scale_max);
      c.defense.pad_target = d.value("pad_target", c.defense.pad_target);
    }
    if (j.contains("lux_grid")) c.lux_grid = j.at("lux_grid").get<std::vector<double>>();
    c.master_seed = j.value("master_seed", c.master_seed);
    c.frame_side = j.value("frame_side", c.frame_side);
    c.signs_per_class = j.value("signs_per_class", c.signs_per_class);
    c.victim_epochs = j.value("victim_epochs", c.victim_epochs);
    c.pair_count = j.value("pair_count", c.pair_count);
    c.frames_per_sign = j.value("frames_per_sign", c.frames_per_sign);
    c.asr_frames = j.value("asr_frames", c.asr_frames);
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config: " + path);
    return from_json(nlohmann::json::parse(f));
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write config: " + path);
    f << to_json().dump(2) << "\n";
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }

  std::uint64_t stage_seed(const std::string& stage) const {
    return derive_seed(master_seed, stage);
  }

  // first line of every CSV so provenance is reconstructible from the file
  std::string provenance_line() const {
    return "# config_hash=" + std::to_string(hash()) +
           " master_seed=" + std::to_string(master_seed) + "\n";
  }

  nlohmann::json provenance() const {
    return {{"config_hash", hash()}, {"master_seed", master_seed}};
  }
};

}  // namespace dotlens
