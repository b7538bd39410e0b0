#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "dotlens/surrogate.hpp"

using namespace dotlens;

namespace {

DotSpec small_spec() {
  DotSpec s;
  s.n = 10;
  s.canvas_h = 16;
  s.canvas_w = 16;
  return s;
}

}  // namespace

TEST_CASE("gen_pairs is reproducible and consistent with the oracle") {
  OpticsConfig cfg;
  PairDataset a = gen_pairs(10, small_spec(), cfg, 42);
  PairDataset b = gen_pairs(10, small_spec(), cfg, 42);
  CHECK(a.pairs.size() == 10);
  CHECK(a.hash() == b.hash());
  PairDataset c = gen_pairs(10, small_spec(), cfg, 43);
  CHECK(a.hash() != c.hash());

  // every physical image equals the oracle output under the recorded seeds
  const std::uint64_t seed = a.meta.at("seed").get<std::uint64_t>();
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    const std::uint64_t si = derive_seed(seed, "pair-" + std::to_string(i));
    Image redo = oracle_cdtf(a.pairs[i].first, cfg, derive_seed(si, "cdtf"));
    CHECK(redo.hash() == a.pairs[i].second.hash());
  }

  CHECK_THROWS_AS(gen_pairs(0, small_spec(), cfg, 1), DomainError);
}

TEST_CASE("pair dataset directory round trip") {
  OpticsConfig cfg;
  PairDataset ds = gen_pairs(4, small_spec(), cfg, 7);
  const std::string dir = "pairs_rt";
  ds.save(dir);
  PairDataset back = PairDataset::load(dir);
  CHECK(back.pairs.size() == ds.pairs.size());
  // PNG quantizes to 8 bits
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    CHECK(mse(back.pairs[i].first, ds.pairs[i].first) < 1e-5);
    CHECK(mse(back.pairs[i].second, ds.pairs[i].second) < 1e-5);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("predict determinism and shape checks for all architectures") {
  OpticsConfig cfg;
  PairDataset ds = gen_pairs(1, small_spec(), cfg, 11);
  for (SurrogateArch arch : {SurrogateArch::skip_unet, SurrogateArch::plain_autoencoder,
                             SurrogateArch::mlp}) {
    SurrogateModel m(arch, 16, 16, 99);
    Image y1 = m.predict(ds.pairs[0].first);
    Image y2 = m.predict(ds.pairs[0].first);
    CHECK(y1.hash() == y2.hash());
    CHECK(y1.height() == 16);
    Image wrong(24, 24);
    CHECK_THROWS_AS(m.predict(wrong), ShapeError);
  }
  CHECK_THROWS_AS(SurrogateModel(SurrogateArch::mlp, 20, 20, 1), ShapeError);
}

TEST_CASE("input gradient matches finite differences per architecture") {
  Rng rng(21);
  Image x(16, 16), up(16, 16);
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  for (auto& v : up.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  auto dot = [&](const Image& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y.data()[i]) * up.data()[i];
    return s;
  };

  for (SurrogateArch arch : {SurrogateArch::skip_unet, SurrogateArch::plain_autoencoder,
                             SurrogateArch::mlp}) {
    SurrogateModel m(arch, 16, 16, 5);
    Image zero_up(16, 16, 0.0f);
    Image gz = m.predict_with_grad(x, zero_up);
    for (float v : gz.data()) CHECK(v == 0.0f);

    Image g = m.predict_with_grad(x, up);
    Rng pick(31);
    // float32 forward noise dominates below h ~ 1e-2
    const double h = 1e-2;
    for (int t = 0; t < 5; ++t) {
      const std::size_t idx = pick.uniform_index(x.size());
      Image xp = x, xm = x;
      xp.data()[idx] += static_cast<float>(h);
      xm.data()[idx] -= static_cast<float>(h);
      const double fd = (dot(m.predict(xp)) - dot(m.predict(xm))) / (2 * h);
      // f32 forward noise caps FD accuracy near 1% on small entries
      CHECK(g.data()[idx] == doctest::Approx(fd).epsilon(1e-2).scale(1e-3));
    }
  }
}

TEST_CASE("pure-mse loss mode and combined loss gradient") {
  Rng rng(41);
  Image pred(16, 16), target(16, 16);
  for (auto& v : pred.data()) v = static_cast<float>(rng.uniform());
  for (auto& v : target.data()) v = static_cast<float>(rng.uniform());
  PerceptualNet perc;

  Image grad;
  const double l0 = detail::combined_loss_grad(perc, 0.0, pred, target, grad);
  CHECK(l0 == doctest::Approx(mse(pred, target)).epsilon(1e-12));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double expect = 2.0 * (static_cast<double>(pred.data()[i]) - target.data()[i]) / pred.size();
    CHECK(grad.data()[i] == doctest::Approx(expect).epsilon(1e-6));
  }

  const double a = 0.0004;
  const double lmix = detail::combined_loss(perc, a, pred, target);
  CHECK(lmix == doctest::Approx((1 - a) * mse(pred, target) + a * perc.distance(pred, target))
                    .epsilon(1e-9));
}

TEST_CASE("training learns, is deterministic, and beats identity") {
  OpticsConfig cfg;
  PairDataset ds = gen_pairs(60, small_spec(), cfg, 77);
  SurrogateHyper hyper;
  hyper.epochs = 12;
  hyper.batch = 8;

  auto res = train_surrogate(ds, SurrogateArch::skip_unet, hyper, 123);
  CHECK(res.history.size() == 12);
  CHECK(res.best_epoch >= 0);
  CHECK(res.history[res.best_epoch].val_loss < res.history[0].val_loss);

  // reproducible loss history
  auto res2 = train_surrogate(ds, SurrogateArch::skip_unet, hyper, 123);
  for (std::size_t e = 0; e < res.history.size(); ++e) {
    CHECK(res.history[e].train_loss == res2.history[e].train_loss);
    CHECK(res.history[e].val_loss == res2.history[e].val_loss);
  }
  CHECK(res.model.weights_hash() == res2.model.weights_hash());

  // identity baseline: T = id scores the digital input itself
  double id_mse = 0.0, model_mse = 0.0;
  for (const auto& [d, p] : ds.pairs) {
    id_mse += mse(d, p);
    model_mse += mse(res.model.predict(d), p);
  }
  CHECK(model_mse <= 0.5 * id_mse);

  PairDataset empty;
  CHECK_THROWS_AS(train_surrogate(empty, SurrogateArch::mlp, hyper, 1), DomainError);
}

TEST_CASE("eval_surrogate on a self-consistent dataset reports perfect scores") {
  OpticsConfig cfg;
  PairDataset ds = gen_pairs(3, small_spec(), cfg, 13);
  SurrogateModel m(SurrogateArch::plain_autoencoder, 16, 16, 3);
  for (auto& [d, p] : ds.pairs) p = m.predict(d);
  MetricReport r = eval_surrogate(m, ds);
  CHECK(r.mse == 0.0);
  CHECK(std::isinf(r.psnr));
  CHECK(r.ssim == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.perceptual == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip preserves weights and predictions") {
  SurrogateModel m(SurrogateArch::skip_unet, 16, 16, 55);
  m.optics_hash = 0xabcdef;
  const std::string path = "surrogate_rt.bin";
  m.save(path);
  SurrogateModel back = SurrogateModel::load(path);
  CHECK(back.weights_hash() == m.weights_hash());
  CHECK(back.arch() == SurrogateArch::skip_unet);
  CHECK(back.optics_hash == 0xabcdef);

  Rng rng(66);
  Image x(16, 16);
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  CHECK(back.predict(x).hash() == m.predict(x).hash());
  std::remove(path.c_str());
}
