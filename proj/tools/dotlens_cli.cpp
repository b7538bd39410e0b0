#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dotlens/config.hpp"

namespace fs = std::filesystem;
using namespace dotlens;

namespace {

// single-writer guard on the record database directory
class DbLock {
 public:
  explicit DbLock(const std::string& db_dir) : path_(db_dir + "/lock") {
    fs::create_directories(db_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw ConfigError("database is locked by another writer: " + path_);
  }
  ~DbLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      fs::remove(path_);
    }
  }
  DbLock(const DbLock&) = delete;
  DbLock& operator=(const DbLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

void write_text(const std::string& path, const std::string& text) {
  if (const fs::path dir = fs::path(path).parent_path(); !dir.empty())
    fs::create_directories(dir);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f << text;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

int parse_class(const std::string& s) {
  if (s == "ALL" || s == "all") return kAllClasses;
  const int c = std::stoi(s);
  if (c < 0 || c >= 17) throw DomainError("class must be 0..16 or ALL");
  return c;
}

std::string class_tag(int c) { return c == kAllClasses ? "ALL" : std::to_string(c); }

PerturbationRecord load_record(const ExperimentConfig& cfg, const std::string& cls) {
  PerturbDB db(cfg.db());
  return db.get(parse_class(cls));
}

VictimModel load_victim(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("victim checkpoint missing: " + path);
  return VictimModel::load(path);
}

// minimal polyline plot of an (x, y in [0,1]) series
void plot_curve(const std::vector<double>& xs, const std::vector<double>& ys,
                const std::string& path) {
  const int side = 128;
  Image img(side, side);
  for (auto& v : img.data()) v = 1.0f;
  const double x_lo = xs.front(), x_hi = xs.back();
  auto px = [&](double x) {
    return x_hi > x_lo ? static_cast<int>((x - x_lo) / (x_hi - x_lo) * (side - 9)) + 4 : side / 2;
  };
  auto py = [&](double y) { return side - 5 - static_cast<int>(y * (side - 9)); };
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const int x0 = px(xs[k - 1]), y0 = py(ys[k - 1]);
    const int x1 = px(xs[k]), y1 = py(ys[k]);
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    for (int t = 0; t <= steps; ++t) {
      const int i = y0 + (y1 - y0) * t / steps;
      const int j = x0 + (x1 - x0) * t / steps;
      img.at(i, j, 0) = 0.1f;
      img.at(i, j, 1) = 0.2f;
      img.at(i, j, 2) = 0.8f;
    }
  }
  save_png(img, path);
}

int cmd_gen_signs(const ExperimentConfig& cfg, const std::string& out) {
  const std::uint64_t seed = cfg.stage_seed("signs");
  SignDataset ds =
      gen_sign_dataset(cfg.signs_per_class, cfg.env, seed, cfg.optics, cfg.frame_side);
  ds.save(out);
  nlohmann::json manifest = cfg.provenance();
  manifest["stage"] = "gen-signs";
  manifest["seed"] = seed;
  manifest["frames"] = ds.frames.size();
  manifest["dataset_hash"] = ds.hash();
  write_json(out + "/run_manifest.json", manifest);
  std::cout << "signs: " << ds.frames.size() << " frames -> " << out << "\n";
  return 0;
}

int cmd_train_victim(const ExperimentConfig& cfg, const std::string& signs_dir,
                     const std::string& kind, std::uint64_t seed_override, bool has_seed,
                     const std::string& out) {
  if (!fs::exists(signs_dir)) throw ConfigError("sign dataset missing: " + signs_dir);
  SignDataset ds = SignDataset::load(signs_dir);
  const std::uint64_t seed = has_seed ? seed_override : cfg.stage_seed("victim-" + kind);
  VictimTrainOpts opts;
  opts.epochs = cfg.victim_epochs;
  if (kind != "classifier" && kind != "detector")
    throw ConfigError("unknown victim kind: " + kind);
  VictimTrainResult res = kind == "classifier" ? train_classifier(ds, seed, opts)
                                               : train_detector(ds, seed, opts);
  res.model.save(out);
  nlohmann::json report = cfg.provenance();
  report["stage"] = "train-victim";
  report["kind"] = kind;
  report["seed"] = seed;
  report["quality"] = res.quality;
  report["weights_hash"] = res.model.weights_hash();
  write_json(out + ".report.json", report);
  std::cout << "victim " << kind << ": quality " << res.quality << " -> " << out << "\n";
  return 0;
}

int cmd_gen_pairs(const ExperimentConfig& cfg, int count, int dots, const std::string& out) {
  DotSpec spec = cfg.dot_spec;
  if (dots > 0) spec.n = dots;
  spec.canvas_h = cfg.frame_side;
  spec.canvas_w = cfg.frame_side;
  const std::uint64_t seed = cfg.stage_seed("pairs");
  PairDataset ds = gen_pairs(count > 0 ? count : cfg.pair_count, spec, cfg.optics, seed);
  ds.save(out);
  nlohmann::json manifest = cfg.provenance();
  manifest["stage"] = "gen-pairs";
  manifest["seed"] = seed;
  manifest["pairs"] = ds.pairs.size();
  write_json(out + "/run_manifest.json", manifest);
  std::cout << "pairs: " << ds.pairs.size() << " -> " << out << "\n";
  return 0;
}

int cmd_train_tnet(const ExperimentConfig& cfg, const std::string& pairs_dir,
                   const std::string& arch, const std::string& out) {
  if (!fs::exists(pairs_dir)) throw ConfigError("pair dataset missing: " + pairs_dir);
  PairDataset ds = PairDataset::load(pairs_dir);
  const SurrogateArch a = arch_from_name(arch);
  const std::uint64_t seed = cfg.stage_seed("tnet-" + arch);
  SurrogateTrainResult res = train_surrogate(ds, a, cfg.surrogate, seed);
  res.model.save(out);
  MetricReport metrics = eval_surrogate(res.model, ds);
  nlohmann::json report = cfg.provenance();
  report["stage"] = "train-tnet";
  report["architecture"] = arch;
  report["seed"] = seed;
  report["best_epoch"] = res.best_epoch;
  report["mse"] = metrics.mse;
  report["psnr"] = metrics.psnr;
  report["ssim"] = metrics.ssim;
  report["perceptual"] = metrics.perceptual;
  write_json(out + ".report.json", report);
  std::cout << "tnet " << arch << ": mse " << metrics.mse << " -> " << out << "\n";
  return 0;
}

int cmd_craft(const ExperimentConfig& cfg, const std::string& cls, const std::string& mode,
              const std::string& victim_path, const std::string& tnet_path) {
  const int class_id = parse_class(cls);
  AttackConfig attack = cfg.attack;
  attack.mode = attack_mode_from_name(mode);
  VictimModel victim = load_victim(victim_path);
  SurrogateModel* tnet_ptr = nullptr;
  std::unique_ptr<SurrogateModel> tnet;
  if (attack.mode == AttackMode::full) {
    if (tnet_path.empty() || !fs::exists(tnet_path))
      throw ConfigError("full mode needs a surrogate checkpoint, missing: " +
                        (tnet_path.empty() ? std::string("(no --tnet given)") : tnet_path));
    tnet = std::make_unique<SurrogateModel>(SurrogateModel::load(tnet_path));
    tnet_ptr = tnet.get();
  }
  const std::uint64_t seed = cfg.stage_seed("craft-" + mode + "-" + class_tag(class_id));
  PerturbationRecord rec = craft_uap(class_id, victim, tnet_ptr, attack, cfg.optics, cfg.env,
                                     seed, cfg.asr_frames);
  DbLock lock(cfg.db());
  PerturbDB db(cfg.db());
  db.put(rec);
  std::cout << "record " << PerturbDB::key_for(class_id) << ": asr " << rec.asr << " -> "
            << cfg.db() << "\n";
  return 0;
}

int cmd_eval_asr(const ExperimentConfig& cfg, const std::string& cls,
                 const std::string& victim_path, const std::vector<double>& lux, bool nd,
                 const std::string& out) {
  PerturbationRecord rec = load_record(cfg, cls);
  VictimModel victim = load_victim(victim_path);
  const std::vector<double>& grid = lux.empty() ? cfg.lux_grid : lux;
  const auto curve = eval_asr(rec, victim, cfg.optics, cfg.env, grid, cfg.asr_frames,
                              cfg.stage_seed("eval-asr-" + cls), nd);
  write_text(out, cfg.provenance_line() + asr_curve_csv(curve, PerturbDB::key_for(rec.target_class)));
  std::cout << "asr curve (" << grid.size() << " lux levels) -> " << out << "\n";
  return 0;
}

int cmd_route_sim(const ExperimentConfig& cfg, int n_routes, int route_len,
                  const std::string& mode, const std::string& victim_path,
                  const std::string& out) {
  const ServingMode m = mode == "dynamic" ? ServingMode::dynamic : ServingMode::static_all;
  if (mode != "dynamic" && mode != "static") throw ConfigError("unknown route mode: " + mode);
  PerturbDB db(cfg.db());
  VictimModel victim = load_victim(victim_path);
  SignMap map = full_sign_map(17);
  const std::uint64_t seed = cfg.stage_seed("routes-" + mode);
  auto routes = sample_routes(map, n_routes, route_len, derive_seed(seed, "sample"));
  std::string csv = cfg.provenance_line() + "route,asr,fallbacks,n_signs\n";
  double mean = 0.0;
  for (std::size_t r = 0; r < routes.size(); ++r) {
    RouteResult res =
        simulate_route(routes[r], map, m, db, victim, cfg.optics, cfg.env, cfg.frames_per_sign,
                       derive_seed(seed, "route-" + std::to_string(r)));
    csv += std::to_string(r) + "," + format_double(res.asr) + "," +
           std::to_string(res.fallbacks) + "," + std::to_string(routes[r].stops.size()) + "\n";
    mean += res.asr;
  }
  mean /= routes.size();
  write_text(out, csv);
  std::cout << "route-sim " << mode << ": mean asr " << mean << " over " << n_routes
            << " routes -> " << out << "\n";
  return 0;
}

int cmd_transfer(const ExperimentConfig& cfg, const std::vector<std::string>& record_classes,
                 const std::vector<std::string>& victim_paths, double lux,
                 const std::string& out) {
  std::vector<PerturbationRecord> recs;
  std::vector<std::string> rec_ids;
  for (const std::string& c : record_classes) {
    recs.push_back(load_record(cfg, c));
    rec_ids.push_back(PerturbDB::key_for(recs.back().target_class));
  }
  std::vector<VictimModel> victims;
  victims.reserve(victim_paths.size());
  std::vector<VictimModel*> ptrs;
  std::vector<std::string> model_ids;
  for (const std::string& p : victim_paths) {
    victims.push_back(load_victim(p));
    model_ids.push_back(fs::path(p).stem().string());
  }
  for (VictimModel& v : victims) ptrs.push_back(&v);
  const auto matrix = transfer_eval(recs, ptrs, cfg.optics, cfg.env, lux, cfg.asr_frames,
                                    cfg.stage_seed("transfer"));
  write_text(out, cfg.provenance_line() + transfer_csv(matrix, rec_ids, model_ids));
  std::cout << "transfer matrix " << recs.size() << "x" << victims.size() << " -> " << out
            << "\n";
  return 0;
}

int cmd_defend(const ExperimentConfig& cfg, const std::string& cls, const std::string& defense,
               int bits, const std::string& victim_path, const std::string& defended_path,
               const std::string& out) {
  PerturbationRecord rec = load_record(cfg, cls);
  VictimModel baseline = load_victim(victim_path);
  DefenseConfig dcfg = cfg.defense;
  if (defense == "squeeze") {
    dcfg.kind = DefenseKind::squeeze;
    if (bits > 0) dcfg.bits = bits;
  } else if (defense == "randomize") {
    dcfg.kind = DefenseKind::randomize;
  } else {
    throw ConfigError("unknown defense: " + defense);
  }
  VictimModel defended =
      defended_path.empty() ? load_victim(victim_path) : load_victim(defended_path);
  const auto table =
      eval_defense(dcfg, rec, baseline, defended, cfg.optics, cfg.env, cfg.lux_grid,
                   cfg.asr_frames, cfg.stage_seed("defend-" + defense));
  const std::string id =
      dcfg.kind == DefenseKind::squeeze ? "squeeze" + std::to_string(dcfg.bits) : "randomize";
  write_text(out, cfg.provenance_line() + defense_csv(table, id));
  std::cout << "defense " << id << " over " << cfg.lux_grid.size() << " lux levels -> " << out
            << "\n";
  return 0;
}

int cmd_report(const std::string& workdir, const std::string& out) {
  if (!fs::exists(workdir)) throw ConfigError("workdir missing: " + workdir);
  std::string summary = "file,rows,kind\n";
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(workdir))
    if (e.is_regular_file() && e.path().extension() == ".csv" &&
        e.path().filename() != fs::path(out).filename())
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  for (const std::string& f : files) {
    std::ifstream in(f);
    std::string line, header;
    std::vector<double> lux, asr;
    int rows = 0;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (header.empty()) {
        header = line;
        continue;
      }
      ++rows;
      if (header.rfind("lux,asr", 0) == 0) {
        std::istringstream ss(line);
        std::string a, b;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        lux.push_back(std::stod(a));
        asr.push_back(std::stod(b));
      }
    }
    std::string kind = header.rfind("lux,asr", 0) == 0        ? "asr_curve"
                       : header.rfind("defense", 0) == 0      ? "defense"
                       : header.rfind("route", 0) == 0        ? "routes"
                       : header.rfind("record", 0) == 0       ? "transfer"
                                                              : "other";
    summary += fs::relative(f, workdir).string() + "," + std::to_string(rows) + "," + kind + "\n";
    if (lux.size() >= 2) plot_curve(lux, asr, fs::path(f).replace_extension(".png").string());
  }
  write_text(out, summary);
  std::cout << "summary over " << files.size() << " csv files -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dot perturbation pipeline"};
  app.require_subcommand(1);

  std::string config_path, out, signs_dir, pairs_dir, kind = "classifier", arch = "skip-unet";
  std::string cls = "ALL", mode = "full", route_mode = "dynamic", victim_path, tnet_path,
      defended_path, defense = "squeeze", workdir;
  std::vector<double> lux;
  std::vector<std::string> record_classes, victim_paths;
  std::uint64_t seed_override = 0;
  int count = 0, dots = 0, n_routes = 100, route_len = 100, bits = 0;
  double transfer_lux = 120.0;
  bool nd = false;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config json")->required();
  };

  auto* gen_signs = app.add_subcommand("gen-signs", "build the sign dataset");
  add_config(gen_signs);
  gen_signs->add_option("--out", out)->required();

  auto* train_victim = app.add_subcommand("train-victim", "train a victim model");
  add_config(train_victim);
  train_victim->add_option("--signs", signs_dir)->required();
  train_victim->add_option("--kind", kind)->check(CLI::IsMember({"classifier", "detector"}));
  auto* seed_opt = train_victim->add_option("--seed", seed_override);
  train_victim->add_option("--out", victim_path)->required();

  auto* gen_pairs_cmd = app.add_subcommand("gen-pairs", "build the channel pair dataset");
  add_config(gen_pairs_cmd);
  gen_pairs_cmd->add_option("--count", count);
  gen_pairs_cmd->add_option("--dots", dots);
  gen_pairs_cmd->add_option("--out", out)->required();

  auto* train_tnet = app.add_subcommand("train-tnet", "train the channel surrogate");
  add_config(train_tnet);
  train_tnet->add_option("--pairs", pairs_dir)->required();
  train_tnet->add_option("--arch", arch)
      ->check(CLI::IsMember({"skip-unet", "plain-autoencoder", "mlp"}));
  train_tnet->add_option("--out", out)->required();

  auto* craft = app.add_subcommand("craft", "craft a perturbation record into the db");
  add_config(craft);
  craft->add_option("--class", cls, "0..16 or ALL");
  craft->add_option("--mode", mode)
      ->check(CLI::IsMember({"full", "no_tnet", "random", "static_env"}));
  craft->add_option("--victim", victim_path)->required();
  craft->add_option("--tnet", tnet_path);

  auto* eval_asr_cmd = app.add_subcommand("eval-asr", "asr across illuminance for a record");
  add_config(eval_asr_cmd);
  eval_asr_cmd->add_option("--record", cls, "record key: 0..16 or ALL")->required();
  eval_asr_cmd->add_option("--victim", victim_path)->required();
  eval_asr_cmd->add_option("--lux-grid", lux);
  eval_asr_cmd->add_flag("--nd", nd, "neutral-density filter on");
  eval_asr_cmd->add_option("--out", out)->required();

  auto* route_sim = app.add_subcommand("route-sim", "dynamic or static route serving");
  add_config(route_sim);
  route_sim->add_option("--routes", n_routes);
  route_sim->add_option("--route-len", route_len);
  route_sim->add_option("--mode", route_mode)->check(CLI::IsMember({"dynamic", "static"}));
  route_sim->add_option("--victim", victim_path)->required();
  route_sim->add_option("--out", out)->required();

  auto* transfer = app.add_subcommand("transfer", "cross-model asr matrix");
  add_config(transfer);
  transfer->add_option("--records", record_classes)->required();
  transfer->add_option("--victims", victim_paths)->required();
  transfer->add_option("--lux", transfer_lux);
  transfer->add_option("--out", out)->required();

  auto* defend = app.add_subcommand("defend", "input-transformation defense evaluation");
  add_config(defend);
  defend->add_option("--record", cls)->required();
  defend->add_option("--defense", defense)->check(CLI::IsMember({"squeeze", "randomize"}));
  defend->add_option("--bits", bits);
  defend->add_option("--victim", victim_path)->required();
  defend->add_option("--defended-victim", defended_path,
                     "victim trained at pad_target inputs (randomize)");
  defend->add_option("--out", out)->required();

  auto* report = app.add_subcommand("report", "aggregate csv outputs and plot curves");
  report->add_option("--workdir", workdir)->required();
  report->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = ExperimentConfig::load(config_path);
      cfg.validate();
    }
    if (gen_signs->parsed()) return cmd_gen_signs(cfg, out);
    if (train_victim->parsed())
      return cmd_train_victim(cfg, signs_dir, kind, seed_override, seed_opt->count() > 0,
                              victim_path);
    if (gen_pairs_cmd->parsed()) return cmd_gen_pairs(cfg, count, dots, out);
    if (train_tnet->parsed()) return cmd_train_tnet(cfg, pairs_dir, arch, out);
    if (craft->parsed()) return cmd_craft(cfg, cls, mode, victim_path, tnet_path);
    if (eval_asr_cmd->parsed()) return cmd_eval_asr(cfg, cls, victim_path, lux, nd, out);
    if (route_sim->parsed())
      return cmd_route_sim(cfg, n_routes, route_len, route_mode, victim_path, out);
    if (transfer->parsed())
      return cmd_transfer(cfg, record_classes, victim_paths, transfer_lux, out);
    if (defend->parsed()) return cmd_defend(cfg, cls, defense, bits, victim_path, defended_path, out);
    if (report->parsed()) return cmd_report(workdir, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
