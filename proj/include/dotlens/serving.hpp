#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dotlens/attack.hpp"

namespace dotlens {

// Directory-backed store of perturbation records, one per target class plus
// an optional ALL record for static serving. A manifest tracks the key set.
class PerturbDB {
 public:
  explicit PerturbDB(std::string directory) : dir_(std::move(directory)) {
    std::filesystem::create_directories(dir_);
    const std::string mpath = manifest_path();
    if (std::filesystem::exists(mpath)) {
      std::ifstream f(mpath);
      manifest_ = nlohmann::json::parse(f);
      for (const auto& [key, file] : manifest_.at("records").items())
        if (!std::filesystem::exists(dir_ + "/" + file.get<std::string>()))
          throw LookupError("PerturbDB: manifest names a missing file: " + file.get<std::string>());
    } else {
      manifest_ = {{"records", nlohmann::json::object()}};
      write_manifest();
    }
  }

  static std::string key_for(int class_id) {
    return class_id == kAllClasses ? "ALL" : "class_" + std::to_string(class_id);
  }

  void put(const PerturbationRecord& rec) {
    const std::string key = key_for(rec.target_class);
    const std::string file = key + ".json";
    std::ofstream f(dir_ + "/" + file);
    if (!f) throw LookupError("PerturbDB: cannot write " + dir_ + "/" + file);
    f << rec.to_json().dump(2) << "\n";
    manifest_["records"][key] = file;
    write_manifest();
  }

  PerturbationRecord get(int class_id) const {
    const std::string key = key_for(class_id);
    if (!manifest_.at("records").contains(key))
      throw LookupError("PerturbDB: no record for key " + key);
    const std::string file = manifest_.at("records").at(key).get<std::string>();
    std::ifstream f(dir_ + "/" + file);
    if (!f) throw LookupError("PerturbDB: cannot read " + dir_ + "/" + file);
    return PerturbationRecord::from_json(nlohmann::json::parse(f));
  }

  bool has(int class_id) const { return manifest_.at("records").contains(key_for(class_id)); }
  std::size_t size() const { return manifest_.at("records").size(); }
  const std::string& directory() const { return dir_; }

 private:
  std::string manifest_path() const { return dir_ + "/manifest.json"; }

  void write_manifest() const {
    std::ofstream f(manifest_path());
    if (!f) throw LookupError("PerturbDB: cannot write manifest in " + dir_);
    f << manifest_.dump(2) << "\n";
  }

  std::string dir_;
  nlohmann::json manifest_;
};

inline void db_put(PerturbDB& db, const PerturbationRecord& rec) { db.put(rec); }
inline PerturbationRecord db_get(const PerturbDB& db, int class_id) { return db.get(class_id); }

// Positions along simulated roads; each position carries a ground-truth class.
struct SignMap {
  std::vector<int> class_ids;

  nlohmann::json to_json() const { return {{"class_ids", class_ids}}; }

  static SignMap from_json(const nlohmann::json& j) {
    SignMap m;
    m.class_ids = j.at("class_ids").get<std::vector<int>>();
    for (int c : m.class_ids)
      if (c < 0 || c >= 17) throw DomainError("SignMap: class id out of range");
    return m;
  }
};

// A sign map covering every class in order, tiled to the requested size.
inline SignMap full_sign_map(int positions = 17) {
  if (positions < 1) throw DomainError("full_sign_map: need at least one position");
  SignMap m;
  for (int i = 0; i < positions; ++i) m.class_ids.push_back(i % 17);
  return m;
}

struct Route {
  std::vector<int> stops;  // indices into the sign map

  nlohmann::json to_json() const { return {{"stops", stops}}; }

  static Route from_json(const nlohmann::json& j) {
    Route r;
    r.stops = j.at("stops").get<std::vector<int>>();
    if (r.stops.empty()) throw DomainError("Route: empty");
    return r;
  }
};

inline std::vector<Route> sample_routes(const SignMap& map, int n_routes, int route_len,
                                        std::uint64_t seed) {
  if (map.class_ids.empty()) throw DomainError("sample_routes: empty sign map");
  if (n_routes < 1 || route_len < 1) throw DomainError("sample_routes: need positive counts");
  Rng rng(seed);
  std::vector<Route> routes(n_routes);
  for (Route& r : routes) {
    r.stops.resize(route_len);
    for (int& s : r.stops) s = static_cast<int>(rng.uniform_index(map.class_ids.size()));
  }
  return routes;
}

enum class ServingMode { dynamic, static_all };

inline std::string serving_mode_name(ServingMode m) {
  return m == ServingMode::dynamic ? "dynamic" : "static";
}

struct RouteResult {
  std::vector<double> per_sign_asr;
  double asr = 0.0;
  int fallbacks = 0;  // signs served without a perturbation
  std::vector<std::string> log;
};

namespace detail {

inline bool frame_attack_success(const Image& frame, int label, VictimModel& victim,
                                 ObjectiveKind kind) {
  if (kind == ObjectiveKind::classifier) {
    const auto p = victim.class_probabilities(frame);
    int arg = 0;
    for (int c = 1; c < victim.num_classes(); ++c)
      if (p[c] > p[arg]) arg = c;
    return arg != label;
  }
  for (const Detection& d : victim.detect(frame)) {
    if (d.objectness <= victim.threshold()) continue;
    int arg = 0;
    for (int c = 1; c < victim.num_classes(); ++c)
      if (d.class_scores[c] > d.class_scores[arg]) arg = c;
    if (arg == label) return false;
  }
  return true;
}

}  // namespace detail

// Drives a route: at each stop the map lookup (the simulated auxiliary
// sensor) picks the served record; the record's pattern goes through the
// oracle channel and the victim judges the composed frames. The database is
// never written.
inline RouteResult simulate_route(const Route& route, const SignMap& map, ServingMode mode,
                                  const PerturbDB& db, VictimModel& victim,
                                  const OpticsConfig& optics, const EnvRanges& ranges,
                                  int frames_per_sign, std::uint64_t seed,
                                  ObjectiveKind kind = ObjectiveKind::classifier) {
  if (route.stops.empty()) throw DomainError("simulate_route: empty route");
  if (frames_per_sign < 1) throw DomainError("simulate_route: frames_per_sign must be positive");
  const int side = victim.height();
  BackgroundPool pool(ranges.n_backgrounds, side, victim.width(), derive_seed(seed, "bgpool"));
  std::vector<Image> signs;
  for (const SignClass& c : sign_classes()) signs.push_back(render_sign(c, side));

  RouteResult res;
  int total_success = 0;
  for (std::size_t si = 0; si < route.stops.size(); ++si) {
    const int stop = route.stops[si];
    if (stop < 0 || stop >= static_cast<int>(map.class_ids.size()))
      throw DomainError("simulate_route: stop index outside the sign map");
    const int label = map.class_ids[stop];
    const int key = mode == ServingMode::dynamic ? label : kAllClasses;

    Image i_p(side, side);  // zeros when no record is available
    bool served = false;
    if (db.has(key)) {
      const PerturbationRecord rec = db.get(key);
      const Image i_d = render(rec.dot_params, side, side);
      i_p = oracle_cdtf(i_d, optics, derive_seed(seed, "cdtf-" + std::to_string(si)));
      served = true;
    } else {
      ++res.fallbacks;
      res.log.push_back("stop " + std::to_string(si) + ": no record for key " +
                        PerturbDB::key_for(key) + ", serving no perturbation");
    }
    (void)served;

    int success = 0;
    for (int fi = 0; fi < frames_per_sign; ++fi) {
      const std::uint64_t fs =
          derive_seed(seed, "sign-" + std::to_string(si) + "-frame-" + std::to_string(fi));
      const EnvSample env = sample_env(ranges, derive_seed(fs, "env"));
      const Image scene = transform_scene(signs[label], pool.get(env.background_id), env);
      const Image frame = quantize8(compose_frame(scene, i_p, env, optics, derive_seed(fs, "noise")));
      if (detail::frame_attack_success(frame, label, victim, kind)) ++success;
    }
    res.per_sign_asr.push_back(static_cast<double>(success) / frames_per_sign);
    total_success += success;
  }
  res.asr = static_cast<double>(total_success) /
            (static_cast<double>(route.stops.size()) * frames_per_sign);
  return res;
}

struct AsrPoint {
  double lux = 0.0;
  double asr = 0.0;
  int n_frames = 0;
};

// ASR across illuminance with everything else sampled; nd pins the filter.
inline std::vector<AsrPoint> eval_asr(const PerturbationRecord& rec, VictimModel& victim,
                                      const OpticsConfig& optics, const EnvRanges& ranges,
                                      const std::vector<double>& lux_levels, int frames_per_level,
                                      std::uint64_t seed, bool nd_filter = false,
                                      ObjectiveKind kind = ObjectiveKind::classifier) {
  if (lux_levels.empty()) throw DomainError("eval_asr: no lux levels");
  if (frames_per_level < 1) throw DomainError("eval_asr: frames_per_level must be positive");
  BackgroundPool pool(ranges.n_backgrounds, victim.height(), victim.width(),
                      derive_seed(seed, "bgpool"));
  std::vector<AsrPoint> out;
  for (double lux : lux_levels) {
    EnvRanges pinned = ranges;
    pinned.lux_min = lux;
    pinned.lux_max = lux;
    pinned.nd_filter = nd_filter;
    AsrPoint p;
    p.lux = lux;
    p.n_frames = frames_per_level;
    p.asr = estimate_asr(rec.dot_params, victim, optics, pinned, pool, rec.target_class,
                         frames_per_level, derive_seed(seed, "lux-" + std::to_string(lux)), kind);
    out.push_back(p);
  }
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string asr_curve_csv(const std::vector<AsrPoint>& curve, const std::string& record_id) {
  std::string s = "lux,asr,n_frames,record_id\n";
  for (const AsrPoint& p : curve)
    s += format_double(p.lux) + "," + format_double(p.asr) + "," + std::to_string(p.n_frames) +
         "," + record_id + "\n";
  return s;
}

// Cross-model ASR at a fixed illuminance: rows are records, columns models.
inline std::vector<std::vector<double>> transfer_eval(
    const std::vector<PerturbationRecord>& records, std::vector<VictimModel*> models,
    const OpticsConfig& optics, const EnvRanges& ranges, double lux, int frames_per_cell,
    std::uint64_t seed, ObjectiveKind kind = ObjectiveKind::classifier) {
  if (records.empty() || models.size() < 2)
    throw DomainError("transfer_eval: need records and at least two models");
  std::vector<std::vector<double>> matrix(records.size(), std::vector<double>(models.size(), 0.0));
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto curve_seed = derive_seed(seed, "record-" + std::to_string(r));
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto curve =
          eval_asr(records[r], *models[m], optics, ranges, {lux}, frames_per_cell,
                   derive_seed(curve_seed, "model-" + std::to_string(m)), false, kind);
      matrix[r][m] = curve[0].asr;
    }
  }
  return matrix;
}

inline std::string transfer_csv(const std::vector<std::vector<double>>& matrix,
                                const std::vector<std::string>& record_ids,
                                const std::vector<std::string>& model_ids) {
  std::string s = "record";
  for (const auto& m : model_ids) s += "," + m;
  s += "\n";
  for (std::size_t r = 0; r < matrix.size(); ++r) {
    s += record_ids[r];
    for (double v : matrix[r]) s += "," + format_double(v);
    s += "\n";
  }
  return s;
}

}  // namespace dotlens
