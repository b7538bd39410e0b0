#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dotlens/config.hpp"

using namespace dotlens;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(DOTLENS_CLI_PATH) + " " + args + " >> cli_work/stdout.log 2>> cli_work/stderr.log";
  return std::system(cmd.c_str());
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("full pipeline smoke run with byte-identical reruns") {
  fs::remove_all("cli_work");
  fs::create_directories("cli_work");

  ExperimentConfig cfg;
  cfg.workdir = "cli_work";
  cfg.frame_side = 32;
  cfg.signs_per_class = 80;
  cfg.victim_epochs = 25;
  cfg.env.perspective_min = -10.0;
  cfg.env.perspective_max = 10.0;
  cfg.env.scale_min = 0.6;
  cfg.env.lux_min = 300.0;
  cfg.env.lux_max = 1500.0;
  cfg.env.n_backgrounds = 4;
  cfg.surrogate.epochs = 5;
  cfg.surrogate.batch = 8;
  cfg.attack.n_dots = 1;
  cfg.attack.block_grid = 2;
  cfg.attack.palette = {{1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}};
  cfg.attack.greedy_batch = 2;
  cfg.attack.batch = 2;
  cfg.attack.max_epochs = 2;
  cfg.attack.mode = AttackMode::no_tnet;
  cfg.asr_frames = 20;
  cfg.frames_per_sign = 4;
  cfg.save("cli_work/config.json");
  const std::string C = "--config cli_work/config.json";

  REQUIRE(run("gen-signs " + C + " --out cli_work/signs") == 0);
  CHECK(fs::exists("cli_work/signs/run_manifest.json"));

  REQUIRE(run("train-victim " + C + " --signs cli_work/signs --kind classifier"
                  " --out cli_work/victim.bin") == 0);
  CHECK(fs::exists("cli_work/victim.bin.report.json"));
  {
    std::ifstream f("cli_work/victim.bin.report.json");
    const auto report = nlohmann::json::parse(f);
    CHECK(report.at("quality").get<double>() >= 0.90);
    CHECK(report.at("config_hash").get<std::uint64_t>() == cfg.hash());
    CHECK(report.at("master_seed").get<std::uint64_t>() == cfg.master_seed);
  }

  REQUIRE(run("gen-pairs " + C + " --count 30 --dots 10 --out cli_work/pairs") == 0);
  REQUIRE(run("train-tnet " + C + " --pairs cli_work/pairs --arch mlp --out cli_work/tnet.bin") == 0);
  CHECK(fs::exists("cli_work/tnet.bin.report.json"));

  // crafting in full mode without a surrogate names the missing path
  CHECK(run("craft " + C + " --class 2 --mode full --victim cli_work/victim.bin"
                " --tnet cli_work/absent.bin") != 0);
  CHECK(slurp("cli_work/stderr.log").find("cli_work/absent.bin") != std::string::npos);

  REQUIRE(run("craft " + C + " --class 2 --mode no_tnet --victim cli_work/victim.bin") == 0);
  REQUIRE(run("craft " + C + " --class ALL --mode no_tnet --victim cli_work/victim.bin") == 0);
  REQUIRE(run("craft " + C + " --class 3 --mode full --victim cli_work/victim.bin"
                  " --tnet cli_work/tnet.bin") == 0);
  PerturbDB db("cli_work/db");
  CHECK(db.size() == 3);
  CHECK(db.get(3).mode == "full");

  REQUIRE(run("eval-asr " + C + " --record 2 --victim cli_work/victim.bin"
                  " --lux-grid 120 3000 --out cli_work/asr.csv") == 0);
  const std::string asr_csv = slurp("cli_work/asr.csv");
  CHECK(asr_csv.rfind("# config_hash=", 0) == 0);
  CHECK(asr_csv.find("lux,asr,n_frames,record_id") != std::string::npos);
  REQUIRE(run("eval-asr " + C + " --record 2 --victim cli_work/victim.bin"
                  " --lux-grid 120 3000 --out cli_work/asr_again.csv") == 0);
  CHECK(slurp("cli_work/asr_again.csv") == asr_csv);

  REQUIRE(run("route-sim " + C + " --routes 2 --route-len 5 --mode dynamic"
                  " --victim cli_work/victim.bin --out cli_work/routes_dyn.csv") == 0);
  REQUIRE(run("route-sim " + C + " --routes 2 --route-len 5 --mode static"
                  " --victim cli_work/victim.bin --out cli_work/routes_sta.csv") == 0);
  REQUIRE(run("route-sim " + C + " --routes 2 --route-len 5 --mode dynamic"
                  " --victim cli_work/victim.bin --out cli_work/routes_dyn2.csv") == 0);
  CHECK(slurp("cli_work/routes_dyn2.csv") == slurp("cli_work/routes_dyn.csv"));

  REQUIRE(run("train-victim " + C + " --signs cli_work/signs --kind classifier --seed 777"
                  " --out cli_work/victim2.bin") == 0);
  REQUIRE(run("transfer " + C + " --records 2 ALL --victims cli_work/victim.bin cli_work/victim2.bin"
                  " --out cli_work/transfer.csv") == 0);
  CHECK(slurp("cli_work/transfer.csv").find("record,victim,victim2") != std::string::npos);

  REQUIRE(run("defend " + C + " --record 2 --defense squeeze --bits 8 --victim cli_work/victim.bin"
                  " --out cli_work/defense.csv") == 0);
  const std::string def_csv = slurp("cli_work/defense.csv");
  CHECK(def_csv.find("defense,lux,asr,baseline_asr,benign_acc,n_frames") != std::string::npos);
  REQUIRE(run("defend " + C + " --record 2 --defense squeeze --bits 8 --victim cli_work/victim.bin"
                  " --out cli_work/defense2.csv") == 0);
  CHECK(slurp("cli_work/defense2.csv") == def_csv);

  REQUIRE(run("report --workdir cli_work --out cli_work/summary.csv") == 0);
  const std::string summary = slurp("cli_work/summary.csv");
  CHECK(summary.rfind("file,rows,kind\n", 0) == 0);
  CHECK(summary.find("asr.csv") != std::string::npos);
  CHECK(fs::exists("cli_work/asr.png"));

  // bad inputs fail with a nonzero status
  CHECK(run("eval-asr " + C + " --record 9 --victim cli_work/victim.bin --out cli_work/x.csv") != 0);
  CHECK(run("craft " + C + " --class 2 --mode no_tnet --victim cli_work/nope.bin") != 0);
  CHECK(run("gen-signs --config cli_work/nope.json --out cli_work/y") != 0);

  // the db lock blocks a second writer
  {
    std::ofstream lock("cli_work/db/lock");
  }
  CHECK(run("craft " + C + " --class 5 --mode no_tnet --victim cli_work/victim.bin") != 0);
  CHECK(slurp("cli_work/stderr.log").find("locked") != std::string::npos);
  fs::remove("cli_work/db/lock");

  fs::remove_all("cli_work");
}
