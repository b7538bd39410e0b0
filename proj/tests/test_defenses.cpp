#include <set>

#include "doctest.h"
#include "dotlens/defenses.hpp"

using namespace dotlens;

namespace {

Image random_frame(int side, std::uint64_t seed) {
  Rng rng(seed);
  Image img(side, side);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

PerturbationRecord make_record(int class_id, std::uint64_t seed) {
  DotSpec spec;
  spec.n = 3;
  spec.canvas_h = 64;
  spec.canvas_w = 64;
  PerturbationRecord rec;
  rec.target_class = class_id;
  rec.dot_params = sample_random(spec, seed);
  rec.seed = seed;
  return rec;
}

}  // namespace

TEST_CASE("feature squeeze rounding, idempotence, level count, bound") {
  Image x(8, 8);
  x.at(0, 0, 0) = 0.4f;
  x.at(0, 0, 1) = 0.6f;
  Image q1 = feature_squeeze(x, 1);
  CHECK(q1.at(0, 0, 0) == 0.0f);
  CHECK(q1.at(0, 0, 1) == 1.0f);

  const Image r = random_frame(16, 3);
  for (int bits : {1, 2, 4, 8}) {
    const Image q = feature_squeeze(r, bits);
    CHECK(feature_squeeze(q, bits).hash() == q.hash());
    std::set<float> values(q.data().begin(), q.data().end());
    CHECK(values.size() <= (1u << bits));
    const double bound = 1.0 / (2.0 * ((1 << bits) - 1));
    for (std::size_t i = 0; i < r.size(); ++i)
      CHECK(std::abs(q.data()[i] - r.data()[i]) <= bound + 1e-7);
  }

  // 8-bit squeeze is the identity on already 8-bit-quantized frames
  const Image q8 = quantize8(r);
  CHECK(feature_squeeze(q8, 8).hash() == q8.hash());

  CHECK_THROWS_AS(feature_squeeze(r, 0), DomainError);
  CHECK_THROWS_AS(feature_squeeze(r, 9), DomainError);
}

TEST_CASE("input randomization output shape, determinism, content recovery") {
  DefenseConfig cfg;
  cfg.kind = DefenseKind::randomize;
  const Image x = random_frame(64, 5);
  const Image y = input_randomize(x, cfg, 7);
  CHECK(y.height() == 80);
  CHECK(y.width() == 80);
  CHECK(input_randomize(x, cfg, 7).hash() == y.hash());
  CHECK(input_randomize(x, cfg, 8).hash() != y.hash());

  // max scale leaves no padding slack
  DefenseConfig maxed = cfg;
  maxed.scale_min = 80;
  maxed.scale_max = 80;
  const Image z = input_randomize(x, maxed, 9);
  int zero_rows = 0;
  for (int i = 0; i < 80; ++i)
    if (z.at(i, 40, 0) == 0.0f && z.at(i, 40, 1) == 0.0f && z.at(i, 40, 2) == 0.0f) ++zero_rows;
  CHECK(zero_rows == 0);

  // identity scale round trips a smooth image closely
  DefenseConfig same = cfg;
  same.scale_min = 64;
  same.scale_max = 64;
  same.pad_target = 64;
  Image smooth(64, 64);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      for (int c = 0; c < 3; ++c) smooth.at(i, j, c) = static_cast<float>((i + j + c) / 200.0);
  const Image back = input_randomize(smooth, same, 11);
  double mae = 0.0;
  for (std::size_t i = 0; i < smooth.size(); ++i)
    mae += std::abs(back.data()[i] - smooth.data()[i]);
  CHECK(mae / smooth.size() < 0.03);

  DefenseConfig bad = cfg;
  bad.pad_target = 70;
  CHECK_THROWS_AS(input_randomize(x, bad, 1), DomainError);
  bad = DefenseConfig{};
  bad.bits = 0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("eval_defense bits=8 squeeze reproduces the baseline exactly") {
  VictimModel victim(VictimKind::classifier, 17, 64, 64, 31);
  PerturbationRecord rec = make_record(4, 17);
  EnvRanges ranges;
  ranges.n_backgrounds = 4;
  OpticsConfig optics;
  DefenseConfig cfg;
  cfg.kind = DefenseKind::squeeze;
  cfg.bits = 8;
  auto table = eval_defense(cfg, rec, victim, victim, optics, ranges, {120.0, 600.0}, 12, 91);
  CHECK(table.size() == 2);
  for (const DefensePoint& p : table) {
    CHECK(p.asr == p.baseline_asr);
    CHECK(p.benign_acc >= 0.0);
    CHECK(p.benign_acc <= 1.0);
  }
  auto again = eval_defense(cfg, rec, victim, victim, optics, ranges, {120.0, 600.0}, 12, 91);
  CHECK(defense_csv(again, "squeeze8") == defense_csv(table, "squeeze8"));
  CHECK(defense_csv(table, "squeeze8").rfind("defense,lux,asr,baseline_asr,benign_acc,n_frames\n",
                                             0) == 0);
}

TEST_CASE("eval_defense randomize requires a pad_target victim") {
  VictimModel baseline(VictimKind::classifier, 17, 64, 64, 31);
  VictimModel padded(VictimKind::classifier, 17, 80, 80, 32);
  PerturbationRecord rec = make_record(2, 19);
  EnvRanges ranges;
  ranges.n_backgrounds = 4;
  OpticsConfig optics;
  DefenseConfig cfg;
  cfg.kind = DefenseKind::randomize;
  CHECK_THROWS_AS(
      eval_defense(cfg, rec, baseline, baseline, optics, ranges, {120.0}, 4, 1), ConfigError);
  auto table = eval_defense(cfg, rec, baseline, padded, optics, ranges, {120.0}, 8, 1);
  CHECK(table.size() == 1);
  CHECK(table[0].asr >= 0.0);
  CHECK(table[0].asr <= 1.0);

  CHECK_THROWS_AS(eval_defense(cfg, rec, baseline, padded, optics, ranges, {}, 4, 1), DomainError);
}
