#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "dotlens/image.hpp"
#include "dotlens/nn.hpp"

namespace dotlens {

struct MetricReport {
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
};

inline double mse(const Image& a, const Image& b) {
  check_same_shape(a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// For unit-range images: 10*log10(1/mse). +inf when the images are identical.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(m);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size) * size);
  const int half = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double di = i - half, dj = j - half;
      w[i * size + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      sum += w[i * size + j];
    }
  for (auto& v : w) v /= sum;
  return w;
}

}  // namespace detail

// Standard SSIM: Gaussian window 11, sigma 1.5, C1=0.01^2, C2=0.03^2,
// averaged over channels and all fully-interior window positions.
inline double ssim(const Image& a, const Image& b) {
  check_same_shape(a, b);
  constexpr int kWin = 11;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  if (a.height() < kWin || a.width() < kWin)
    throw ShapeError("ssim: image smaller than window");
  static const std::vector<double> win = detail::gaussian_window(kWin, 1.5);

  double total = 0.0;
  long count = 0;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i + kWin <= a.height(); ++i) {
      for (int j = 0; j + kWin <= a.width(); ++j) {
        double mu_a = 0.0, mu_b = 0.0;
        for (int di = 0; di < kWin; ++di)
          for (int dj = 0; dj < kWin; ++dj) {
            const double wgt = win[di * kWin + dj];
            mu_a += wgt * a.at(i + di, j + dj, c);
            mu_b += wgt * b.at(i + di, j + dj, c);
          }
        double var_a = 0.0, var_b = 0.0, cov = 0.0;
        for (int di = 0; di < kWin; ++di)
          for (int dj = 0; dj < kWin; ++dj) {
            const double wgt = win[di * kWin + dj];
            const double da = a.at(i + di, j + dj, c) - mu_a;
            const double db = b.at(i + di, j + dj, c) - mu_b;
            var_a += wgt * da * da;
            var_b += wgt * db * db;
            cov += wgt * da * db;
          }
        const double num = (2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2);
        const double den = (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

// Fixed, seed-initialized multi-scale convolutional feature pyramid used as a
// deterministic perceptual distance. Three stride-2 stages (16/32/64 channels);
// feature vectors are unit-normalized per position before comparison.
class PerceptualNet {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x70657263ull;  // recorded in configs

  explicit PerceptualNet(std::uint64_t seed = kDefaultSeed) : seed_(seed) {
    Rng rng(seed);
    convs_.emplace_back(3, 16, 3, 2, rng);
    convs_.emplace_back(16, 32, 3, 2, rng);
    convs_.emplace_back(32, 64, 3, 2, rng);
  }

  std::uint64_t seed() const { return seed_; }

  double distance(const Image& a, const Image& b) {
    return distance_impl(a, b, nullptr);
  }

  // Also returns d(distance)/d(a); b is treated as constant.
  double distance_with_grad(const Image& a, const Image& b, Image& grad_a) {
    return distance_impl(a, b, &grad_a);
  }

 private:
  static void normalize(const nn::Tensor& f, nn::Tensor& out, std::vector<float>& norms) {
    out = nn::Tensor(f.h, f.w, f.c);
    norms.assign(static_cast<std::size_t>(f.h) * f.w, 0.0f);
    for (int i = 0; i < f.h; ++i)
      for (int j = 0; j < f.w; ++j) {
        double s = 0.0;
        for (int c = 0; c < f.c; ++c) s += static_cast<double>(f.at(i, j, c)) * f.at(i, j, c);
        const float r = static_cast<float>(std::sqrt(s));
        norms[static_cast<std::size_t>(i) * f.w + j] = r;
        const float inv = 1.0f / (r + 1e-8f);
        for (int c = 0; c < f.c; ++c) out.at(i, j, c) = f.at(i, j, c) * inv;
      }
  }

  double distance_impl(const Image& a, const Image& b, Image* grad_a) {
    check_same_shape(a, b);
    // b-side first: Conv caches its im2col buffer from the most recent forward,
    // and the a-side backward needs its own.
    std::vector<nn::Tensor> feats_b(convs_.size());
    {
      std::vector<nn::Relu> relus_b(convs_.size());
      nn::Tensor t = nn::from_image(b);
      for (std::size_t s = 0; s < convs_.size(); ++s) {
        t = relus_b[s].forward(convs_[s].forward(t));
        feats_b[s] = t;
      }
    }
    std::vector<nn::Tensor> feats_a(convs_.size());
    std::vector<nn::Relu> relus_a(convs_.size());
    {
      nn::Tensor t = nn::from_image(a);
      for (std::size_t s = 0; s < convs_.size(); ++s) {
        t = relus_a[s].forward(convs_[s].forward(t));
        feats_a[s] = t;
      }
    }

    double total = 0.0;
    std::vector<nn::Tensor> layer_grads(convs_.size());
    for (std::size_t s = 0; s < convs_.size(); ++s) {
      nn::Tensor na, nb;
      std::vector<float> ra, rb;
      normalize(feats_a[s], na, ra);
      normalize(feats_b[s], nb, rb);
      const double scale = 1.0 / (static_cast<double>(convs_.size()) * na.size());
      double layer = 0.0;
      nn::Tensor gna(na.h, na.w, na.c);
      for (std::size_t i = 0; i < na.size(); ++i) {
        const double d = static_cast<double>(na.v[i]) - nb.v[i];
        layer += d * d;
        if (grad_a) gna.v[i] = static_cast<float>(2.0 * d * scale);
      }
      total += layer * scale;
      if (grad_a) {
        // through unit normalization: g_f = g_n/(r+eps) - f*(f.g_n)/(r*(r+eps)^2)
        nn::Tensor gf(na.h, na.w, na.c);
        const nn::Tensor& f = feats_a[s];
        for (int i = 0; i < na.h; ++i)
          for (int j = 0; j < na.w; ++j) {
            const float r = ra[static_cast<std::size_t>(i) * na.w + j];
            const float inv = 1.0f / (r + 1e-8f);
            double dot = 0.0;
            for (int c = 0; c < na.c; ++c)
              dot += static_cast<double>(f.at(i, j, c)) * gna.at(i, j, c);
            const float corr = (r > 1e-12f)
                ? static_cast<float>(dot) / (r * (r + 1e-8f) * (r + 1e-8f))
                : 0.0f;
            for (int c = 0; c < na.c; ++c)
              gf.at(i, j, c) = gna.at(i, j, c) * inv - f.at(i, j, c) * corr;
          }
        layer_grads[s] = gf;
      }
    }

    if (grad_a) {
      // every stage output feeds both the next stage and its own distance term
      nn::Tensor g = layer_grads.back();
      for (std::size_t s = convs_.size(); s-- > 0;) {
        g = convs_[s].backward(relus_a[s].backward(g));
        if (s > 0)
          for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += layer_grads[s - 1].v[i];
      }
      *grad_a = nn::to_image(g);
      // weight grads from the perceptual net are never used; drop them
      std::vector<nn::Param*> ps;
      for (auto& c : convs_) c.collect(ps);
      for (auto* p : ps) p->zero_grad();
    }
    return total;
  }

  std::uint64_t seed_;
  std::vector<nn::Conv> convs_;
};

inline double perceptual_distance(const Image& a, const Image& b,
                                  std::uint64_t seed = PerceptualNet::kDefaultSeed) {
  PerceptualNet net(seed);
  return net.distance(a, b);
}

}  // namespace dotlens
