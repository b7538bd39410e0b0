#include <cmath>

#include "doctest.h"
#include "dotlens/nn.hpp"

using namespace dotlens;
using namespace dotlens::nn;

namespace {

Tensor random_tensor(int h, int w, int c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(h, w, c);
  for (auto& v : t.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

double sum_mul(const Tensor& t, const Tensor& u) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += static_cast<double>(t.v[i]) * u.v[i];
  return s;
}

}  // namespace

TEST_CASE("conv input gradient matches finite differences") {
  Rng rng(1);
  for (int stride : {1, 2}) {
    Conv conv(2, 3, 3, stride, rng);
    Tensor x = random_tensor(8, 8, 2, 10 + stride);
    Tensor y = conv.forward(x);
    Tensor up = random_tensor(y.h, y.w, y.c, 20 + stride);
    Tensor gx = conv.backward(up);

    const double h = 1e-3;
    Rng pick(3);
    for (int t = 0; t < 5; ++t) {
      const std::size_t i = pick.uniform_index(x.size());
      Tensor xp = x, xm = x;
      xp.v[i] += static_cast<float>(h);
      xm.v[i] -= static_cast<float>(h);
      const double fd = (sum_mul(conv.forward(xp), up) - sum_mul(conv.forward(xm), up)) / (2 * h);
      CHECK(gx.v[i] == doctest::Approx(fd).epsilon(5e-3).scale(1e-3));
    }
  }
}

TEST_CASE("conv weight gradient matches finite differences") {
  Rng rng(2);
  Conv conv(2, 2, 3, 1, rng);
  Tensor x = random_tensor(6, 6, 2, 30);
  Tensor y = conv.forward(x);
  Tensor up = random_tensor(y.h, y.w, y.c, 31);
  conv.weight().zero_grad();
  conv.bias().zero_grad();
  conv.backward(up);

  const double h = 1e-3;
  Rng pick(4);
  for (int t = 0; t < 5; ++t) {
    const std::size_t i = pick.uniform_index(conv.weight().w.size());
    const float orig = conv.weight().w[i];
    conv.weight().w[i] = orig + static_cast<float>(h);
    const double up_val = sum_mul(conv.forward(x), up);
    conv.weight().w[i] = orig - static_cast<float>(h);
    const double dn_val = sum_mul(conv.forward(x), up);
    conv.weight().w[i] = orig;
    const double fd = (up_val - dn_val) / (2 * h);
    CHECK(conv.weight().g[i] == doctest::Approx(fd).epsilon(5e-3).scale(1e-3));
  }
}

TEST_CASE("pool, upsample, sigmoid backward sanity") {
  AvgPool2 pool;
  Tensor x = random_tensor(4, 4, 2, 40);
  Tensor y = pool.forward(x);
  CHECK(y.h == 2);
  Tensor up(2, 2, 2, 1.0f);
  Tensor gx = pool.backward(up);
  for (float v : gx.v) CHECK(v == doctest::Approx(0.25));

  Upsample2 ups;
  Tensor yu = ups.forward(x);
  CHECK(yu.h == 8);
  CHECK(yu.at(1, 1, 0) == x.at(0, 0, 0));
  Tensor gup(8, 8, 2, 1.0f);
  Tensor gxu = ups.backward(gup);
  for (float v : gxu.v) CHECK(v == doctest::Approx(4.0));

  Sigmoid sig;
  Tensor ys = sig.forward(x);
  for (float v : ys.v) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("dense gradient matches finite differences") {
  Rng rng(5);
  Dense dense(6, 4, rng);
  std::vector<float> x(6);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<float> up(4);
  for (auto& v : up) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  auto eval = [&](const std::vector<float>& in) {
    auto y = dense.forward(in);
    double s = 0.0;
    for (int i = 0; i < 4; ++i) s += static_cast<double>(y[i]) * up[i];
    return s;
  };
  dense.forward(x);
  auto gx = dense.backward(up);
  const double h = 1e-3;
  for (int i = 0; i < 6; ++i) {
    std::vector<float> xp = x, xm = x;
    xp[i] += static_cast<float>(h);
    xm[i] -= static_cast<float>(h);
    const double fd = (eval(xp) - eval(xm)) / (2 * h);
    CHECK(gx[i] == doctest::Approx(fd).epsilon(1e-3).scale(1e-3));
  }
}

TEST_CASE("softmax cross entropy basics") {
  std::vector<float> logits = {1.0f, 2.0f, 0.5f};
  auto p = softmax(logits);
  double sum = 0.0;
  for (float v : p) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(cross_entropy(p, 1) < cross_entropy(p, 2));
}

TEST_CASE("adam reduces a quadratic") {
  Param p(2);
  p.w = {5.0f, -3.0f};
  std::vector<Param*> params = {&p};
  Adam opt;
  opt.lr = 0.1f;
  for (int it = 0; it < 500; ++it) {
    p.g[0] = 2.0f * p.w[0];
    p.g[1] = 2.0f * p.w[1];
    opt.step(params);
  }
  CHECK(std::abs(p.w[0]) < 0.05f);
  CHECK(std::abs(p.w[1]) < 0.05f);
}

TEST_CASE("pack and unpack params round trip") {
  Rng rng(6);
  Conv conv(2, 3, 3, 1, rng);
  std::vector<Param*> ps;
  conv.collect(ps);
  auto flat = pack_params(ps);
  const auto h0 = params_hash(ps);
  for (auto* p : ps)
    for (auto& w : p->w) w = 0.0f;
  unpack_params(ps, flat);
  CHECK(params_hash(ps) == h0);
}
