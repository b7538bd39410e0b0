#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dotlens/common.hpp"
#include "dotlens/image.hpp"
#include "dotlens/rng.hpp"
#include "json.hpp"

namespace dotlens {

// Parameters of the dot-based perturbation: n dots with continuous-coordinate
// centers, per-dot radius and RGB color, shared alpha ceiling and decay rate.
struct DotParams {
  std::vector<std::array<double, 2>> centers;  // (row, col)
  std::vector<double> radii;
  std::vector<std::array<double, 3>> colors;
  double alpha_max = 1.0;
  double beta = 1.0;

  int n() const { return static_cast<int>(centers.size()); }

  void validate(int canvas_h, int canvas_w) const {
    if (centers.size() != radii.size() || centers.size() != colors.size())
      throw DomainError("DotParams: centers/radii/colors length mismatch");
    if (alpha_max <= 0.0 || alpha_max > 1.0) throw DomainError("DotParams: alpha_max out of (0,1]");
    if (beta <= 0.0) throw DomainError("DotParams: beta must be positive");
    for (int k = 0; k < n(); ++k) {
      if (radii[k] <= 0.0) throw DomainError("DotParams: nonpositive radius");
      const auto& c = centers[k];
      if (c[0] < 0.0 || c[0] >= canvas_h || c[1] < 0.0 || c[1] >= canvas_w)
        throw DomainError("DotParams: center outside canvas");
      for (double v : colors[k])
        if (v < 0.0 || v > 1.0) throw DomainError("DotParams: color channel out of [0,1]");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json dots = nlohmann::json::array();
    for (int k = 0; k < n(); ++k)
      dots.push_back({{"row", centers[k][0]},
                      {"col", centers[k][1]},
                      {"r", radii[k]},
                      {"rgb", colors[k]}});
    return {{"n", n()}, {"alpha_max", alpha_max}, {"beta", beta}, {"dots", dots}};
  }

  static DotParams from_json(const nlohmann::json& j) {
    DotParams p;
    p.alpha_max = j.at("alpha_max").get<double>();
    p.beta = j.at("beta").get<double>();
    for (const auto& d : j.at("dots")) {
      p.centers.push_back({d.at("row").get<double>(), d.at("col").get<double>()});
      p.radii.push_back(d.at("r").get<double>());
      auto rgb = d.at("rgb");
      p.colors.push_back({rgb.at(0).get<double>(), rgb.at(1).get<double>(), rgb.at(2).get<double>()});
    }
    if (j.at("n").get<int>() != p.n()) throw DomainError("DotParams json: n mismatch");
    return p;
  }
};

// Sampling spec: radius as a fraction of canvas height, fixed alpha/beta.
struct DotSpec {
  int n = 100;
  double radius_fraction = 0.1;
  double alpha_max = 1.0;
  double beta = 1.0;
  int canvas_h = 64;
  int canvas_w = 64;

  void validate() const {
    if (n < 0) throw DomainError("DotSpec: n must be >= 0");
    if (radius_fraction <= 0.0 || radius_fraction > 0.5)
      throw DomainError("DotSpec: radius_fraction out of (0, 0.5]");
  }
};

// I_d(i,j) = clamp_[0,1]( sum_k alpha_max * exp(-beta * d_k(i,j)) * gamma_k )
// with d_k(i,j) = ((i - i_k)^2 + (j - j_k)^2) / r_k^2.
inline Image render(const DotParams& params, int canvas_h, int canvas_w) {
  params.validate(canvas_h, canvas_w);
  // accumulate in double so dot order cannot perturb the result
  std::vector<double> acc(static_cast<std::size_t>(canvas_h) * canvas_w * 3, 0.0);
  for (int k = 0; k < params.n(); ++k) {
    const double ik = params.centers[k][0];
    const double jk = params.centers[k][1];
    const double inv_r2 = 1.0 / (params.radii[k] * params.radii[k]);
    for (int i = 0; i < canvas_h; ++i) {
      const double di = (i - ik) * (i - ik);
      for (int j = 0; j < canvas_w; ++j) {
        const double d = (di + (j - jk) * (j - jk)) * inv_r2;
        const double a = params.alpha_max * std::exp(-params.beta * d);
        double* px = acc.data() + (static_cast<std::size_t>(i) * canvas_w + j) * 3;
        for (int c = 0; c < 3; ++c) px[c] += a * params.colors[k][c];
      }
    }
  }
  Image out(canvas_h, canvas_w);
  for (std::size_t i = 0; i < acc.size(); ++i)
    out.data()[i] = static_cast<float>(std::min(std::max(acc[i], 0.0), 1.0));
  return out;
}

struct DotGrad {
  std::vector<std::array<double, 2>> centers;  // d/d(row), d/d(col)
  std::vector<std::array<double, 3>> colors;
};

// Exact analytic partials of the unclamped render through the chain rule.
// Pixels where the summed (pre-clamp) value exceeds 1 contribute zero gradient
// on that channel (subgradient convention at the clamp).
inline DotGrad render_grad(const DotParams& params, int canvas_h, int canvas_w,
                           const Image& upstream) {
  params.validate(canvas_h, canvas_w);
  if (upstream.height() != canvas_h || upstream.width() != canvas_w)
    throw ShapeError("render_grad: upstream shape mismatch");

  const int n = params.n();
  DotGrad grad;
  grad.centers.assign(n, {0.0, 0.0});
  grad.colors.assign(n, {0.0, 0.0, 0.0});

  // raw (unclamped) sums decide where the clamp kills the gradient
  std::vector<double> raw(static_cast<std::size_t>(canvas_h) * canvas_w * 3, 0.0);
  std::vector<double> act(static_cast<std::size_t>(canvas_h) * canvas_w * n);
  for (int k = 0; k < n; ++k) {
    const double ik = params.centers[k][0];
    const double jk = params.centers[k][1];
    const double inv_r2 = 1.0 / (params.radii[k] * params.radii[k]);
    for (int i = 0; i < canvas_h; ++i)
      for (int j = 0; j < canvas_w; ++j) {
        const double d = ((i - ik) * (i - ik) + (j - jk) * (j - jk)) * inv_r2;
        const double a = params.alpha_max * std::exp(-params.beta * d);
        act[(static_cast<std::size_t>(i) * canvas_w + j) * n + k] = a;
        for (int c = 0; c < 3; ++c)
          raw[(static_cast<std::size_t>(i) * canvas_w + j) * 3 + c] += a * params.colors[k][c];
      }
  }

  for (int k = 0; k < n; ++k) {
    const double ik = params.centers[k][0];
    const double jk = params.centers[k][1];
    const double inv_r2 = 1.0 / (params.radii[k] * params.radii[k]);
    for (int i = 0; i < canvas_h; ++i)
      for (int j = 0; j < canvas_w; ++j) {
        const std::size_t pix = static_cast<std::size_t>(i) * canvas_w + j;
        const double a = act[pix * n + k];
        // d(exp(-beta*d))/d(i_k) = a * 2*beta*(i - i_k)/r^2
        const double dA_di = a * 2.0 * params.beta * (i - ik) * inv_r2;
        const double dA_dj = a * 2.0 * params.beta * (j - jk) * inv_r2;
        for (int c = 0; c < 3; ++c) {
          if (raw[pix * 3 + c] > 1.0) continue;  // clamped: zero subgradient
          const double up = upstream.at(i, j, c);
          grad.centers[k][0] += up * dA_di * params.colors[k][c];
          grad.centers[k][1] += up * dA_dj * params.colors[k][c];
          grad.colors[k][c] += up * a;
        }
      }
  }
  return grad;
}

// Centers uniform over the canvas interior, colors uniform over [0,1]^3,
// radius/alpha/beta fixed from the spec.
inline DotParams sample_random(const DotSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  DotParams p;
  p.alpha_max = spec.alpha_max;
  p.beta = spec.beta;
  const double r = spec.radius_fraction * spec.canvas_h;
  for (int k = 0; k < spec.n; ++k) {
    p.centers.push_back({rng.uniform(0.0, spec.canvas_h), rng.uniform(0.0, spec.canvas_w)});
    p.radii.push_back(r);
    p.colors.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  return p;
}

// Projects drifting parameters back into the feasible box.
inline void project(DotParams& p, int canvas_h, int canvas_w) {
  for (int k = 0; k < p.n(); ++k) {
    auto& c = p.centers[k];
    c[0] = std::min(std::max(c[0], 0.0), std::nextafter(static_cast<double>(canvas_h), 0.0));
    c[1] = std::min(std::max(c[1], 0.0), std::nextafter(static_cast<double>(canvas_w), 0.0));
    for (double& v : p.colors[k]) v = std::min(std::max(v, 0.0), 1.0);
  }
}

}  // namespace dotlens
