#include <cmath>

#include "doctest.h"
#include "dotlens/optics.hpp"

using namespace dotlens;

TEST_CASE("oracle maps black to black and is deterministic") {
  OpticsConfig cfg;
  cfg.noise_sigma = 0.0;
  Image black(16, 16, 0.0f);
  Image out = oracle_cdtf(black, cfg, 1);
  for (float v : out.data()) CHECK(v == 0.0f);

  cfg.noise_sigma = 0.01;
  Image in(16, 16, 0.5f);
  Image a = oracle_cdtf(in, cfg, 99);
  Image b = oracle_cdtf(in, cfg, 99);
  CHECK(a.hash() == b.hash());
  Image c = oracle_cdtf(in, cfg, 100);
  CHECK(a.hash() != c.hash());
}

TEST_CASE("oracle analytic value on constant white input") {
  OpticsConfig cfg;
  cfg.display_gamma = 1.0;
  cfg.noise_sigma = 0.0;
  cfg.color_matrix = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Image white(32, 32, 1.0f);
  Image out = oracle_cdtf(white, cfg, 0);
  // gains (0.9, 1.0, 0.8) * beam_split 0.5; blur of constant = constant
  CHECK(out.at(16, 16, 0) == doctest::Approx(0.45).epsilon(1e-5));
  CHECK(out.at(16, 16, 1) == doctest::Approx(0.50).epsilon(1e-5));
  CHECK(out.at(16, 16, 2) == doctest::Approx(0.40).epsilon(1e-5));
  CHECK(out.in_unit_range());
}

TEST_CASE("compose_frame identities and monotone visibility") {
  OpticsConfig cfg;
  cfg.noise_sigma = 0.0;
  Image scene(16, 16, 0.8f);
  Image zeros(16, 16, 0.0f);
  EnvSample env;
  env.illuminance = 600.0;
  Image out = compose_frame(scene, zeros, env, cfg, 0);
  const double b = scene_brightness(600.0, cfg);
  for (float v : out.data()) CHECK(v == doctest::Approx(b * 0.8).epsilon(1e-6));

  Image ip(16, 16, 0.5f);
  EnvSample lo = env, hi = env;
  lo.illuminance = 30.0;
  hi.illuminance = 3000.0;
  Image black(16, 16, 0.0f);
  Image flo = compose_frame(black, ip, lo, cfg, 0);
  Image fhi = compose_frame(black, ip, hi, cfg, 0);
  double mlo = 0, mhi = 0;
  for (std::size_t i = 0; i < flo.size(); ++i) {
    mlo += flo.data()[i];
    mhi += fhi.data()[i];
  }
  CHECK(mlo > mhi);
}

TEST_CASE("nd filter strictly increases perturbation visibility") {
  OpticsConfig cfg;
  EnvSample env;
  env.illuminance = 3000.0;
  env.nd_filter = false;
  const double v_off = perturb_visibility(effective_lux(env, cfg), cfg);
  env.nd_filter = true;
  const double v_on = perturb_visibility(effective_lux(env, cfg), cfg);
  CHECK(v_on > v_off);
  CHECK(v_on == doctest::Approx(perturb_visibility(300.0, cfg)));
}

TEST_CASE("visibility decreasing, brightness non-decreasing") {
  OpticsConfig cfg;
  double prev_v = 1e9, prev_b = -1.0;
  for (double lux : {30.0, 120.0, 600.0, 1500.0, 3000.0, 60000.0}) {
    const double v = perturb_visibility(lux, cfg);
    const double b = scene_brightness(lux, cfg);
    CHECK(v < prev_v);
    CHECK(b >= prev_b);
    prev_v = v;
    prev_b = b;
  }
}

TEST_CASE("transform_scene identity env centers the sign unwarped") {
  BackgroundPool pool(4, 64, 64, 1);
  Image bg = pool.get(0);
  Image sign(64, 64);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      for (int c = 0; c < 3; ++c) sign.at(i, j, c) = static_cast<float>((i * 64 + j + c) % 97) / 97.0f;
  EnvSample env;  // 0 deg, 0 deg, scale 1.0
  Image out = transform_scene(sign, bg, env);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      for (int c = 0; c < 3; ++c)
        CHECK(out.at(i, j, c) == doctest::Approx(sign.at(i, j, c)).epsilon(1e-5));
}

TEST_CASE("transform_scene range checks") {
  BackgroundPool pool(1, 64, 64, 1);
  Image bg = pool.get(0);
  Image sign(32, 32, 0.5f);
  EnvSample env;
  env.scale = 0.5;
  env.perspective_deg = 31.0;
  CHECK_THROWS_AS(transform_scene(sign, bg, env), DomainError);
  env.perspective_deg = 0.0;
  env.rotation_deg = -6.0;
  CHECK_THROWS_AS(transform_scene(sign, bg, env), DomainError);
}

TEST_CASE("rotation there and back recovers the patch") {
  BackgroundPool pool(4, 64, 64, 2);
  Image bg = pool.get(1);
  Image sign(48, 48);
  for (int i = 0; i < 48; ++i)
    for (int j = 0; j < 48; ++j)
      for (int c = 0; c < 3; ++c)
        sign.at(i, j, c) = 0.5f + 0.4f * std::sin(0.3 * i + 0.2 * j + c);

  EnvSample fwd;
  fwd.rotation_deg = 5.0;
  fwd.scale = 0.75;
  ScenePlacement pl;
  Image rotated = transform_scene(sign, bg, fwd, &pl);
  // extract the patch, rotate it back, compare the interior
  Image patch(pl.side, pl.side);
  for (int i = 0; i < pl.side; ++i)
    for (int j = 0; j < pl.side; ++j)
      for (int c = 0; c < 3; ++c) patch.at(i, j, c) = rotated.at(pl.top + i, pl.left + j, c);
  Image neutral(pl.side, pl.side, 0.0f);
  EnvSample back;
  back.rotation_deg = -5.0;
  back.scale = 1.0;
  back.background_id = 0;
  Image restored = transform_scene(patch, neutral, back);

  // compare against the directly scaled sign over the interior
  EnvSample plain;
  plain.scale = 1.0;
  plain.background_id = 0;
  Image reference = transform_scene(sign, Image(pl.side, pl.side, 0.0f), plain);
  double mad = 0.0;
  long count = 0;
  const int m = pl.side / 5;  // interior only, borders lose pixels to the warp
  for (int i = m; i < pl.side - m; ++i)
    for (int j = m; j < pl.side - m; ++j)
      for (int c = 0; c < 3; ++c) {
        mad += std::abs(restored.at(i, j, c) - reference.at(i, j, c));
        ++count;
      }
  CHECK(mad / count < 0.02);
}

TEST_CASE("sample_env determinism, ranges, and mean perspective") {
  EnvRanges ranges;
  EnvSample a = sample_env(ranges, 7);
  EnvSample b = sample_env(ranges, 7);
  CHECK(a.perspective_deg == b.perspective_deg);
  CHECK(a.illuminance == b.illuminance);

  double mean_persp = 0.0;
  for (int s = 0; s < 10000; ++s) {
    EnvSample e = sample_env(ranges, 1000 + s);
    e.validate();
    CHECK(e.scale >= 0.3);
    CHECK(e.scale <= 1.0);
    CHECK(e.illuminance >= 30.0);
    CHECK(e.illuminance <= 3000.0);
    mean_persp += e.perspective_deg;
  }
  mean_persp /= 10000.0;
  CHECK(mean_persp > -1.0);
  CHECK(mean_persp < 1.0);
}

TEST_CASE("background pool is deterministic and saveable") {
  BackgroundPool pool(3, 32, 32, 11);
  CHECK(pool.get(0).hash() == pool.get(0).hash());
  CHECK(pool.get(0).hash() != pool.get(1).hash());
  CHECK_THROWS_AS(pool.get(5), LookupError);
}
