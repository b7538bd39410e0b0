#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dotlens/common.hpp"
#include "dotlens/image.hpp"
#include "dotlens/rng.hpp"

namespace dotlens::nn {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;

// H x W x C feature map, row-major, channel-last.
struct Tensor {
  int h = 0, w = 0, c = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int h_, int w_, int c_, float fill = 0.0f)
      : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  float& at(int i, int j, int ch) {
    return v[(static_cast<std::size_t>(i) * w + j) * c + ch];
  }
  float at(int i, int j, int ch) const {
    return v[(static_cast<std::size_t>(i) * w + j) * c + ch];
  }
  std::size_t size() const { return v.size(); }
};

inline Tensor from_image(const Image& img) {
  Tensor t(img.height(), img.width(), 3);
  t.v = img.data();
  return t;
}

inline Image to_image(const Tensor& t) {
  if (t.c != 3) throw ShapeError("tensor is not 3-channel");
  Image img(t.h, t.w);
  img.data() = t.v;
  return img;
}

// Parameter blob with its gradient and Adam state.
struct Param {
  std::vector<float> w, g, m, v2;
  explicit Param(std::size_t n = 0) : w(n, 0.0f), g(n, 0.0f), m(n, 0.0f), v2(n, 0.0f) {}
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0f); }
};

struct Adam {
  float lr = 1e-3f;
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  long t = 0;

  void step(std::vector<Param*>& params) {
    ++t;
    const float b1c = 1.0f - std::pow(beta1, static_cast<float>(t));
    const float b2c = 1.0f - std::pow(beta2, static_cast<float>(t));
    for (Param* p : params) {
      for (std::size_t i = 0; i < p->w.size(); ++i) {
        const float g = p->g[i];
        p->m[i] = beta1 * p->m[i] + (1.0f - beta1) * g;
        p->v2[i] = beta2 * p->v2[i] + (1.0f - beta2) * g * g;
        const float mhat = p->m[i] / b1c;
        const float vhat = p->v2[i] / b2c;
        p->w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// 3x3 (or kxk) convolution, zero padding k/2, stride 1 or 2. im2col + GEMM.
class Conv {
 public:
  Conv(int cin, int cout, int k, int stride, Rng& rng)
      : cin_(cin), cout_(cout), k_(k), stride_(stride),
        weight_(static_cast<std::size_t>(k) * k * cin * cout), bias_(cout) {
    // He init
    const double s = std::sqrt(2.0 / (k * k * cin));
    for (auto& w : weight_.w) w = static_cast<float>(rng.normal(0.0, s));
  }

  Tensor forward(const Tensor& x) {
    in_h_ = x.h; in_w_ = x.w;
    const int oh = (x.h + stride_ - 1) / stride_;
    const int ow = (x.w + stride_ - 1) / stride_;
    build_col(x, oh, ow);
    Tensor y(oh, ow, cout_);
    CMapMat col(col_.data(), static_cast<long>(oh) * ow, static_cast<long>(k_) * k_ * cin_);
    CMapMat w(weight_.w.data(), static_cast<long>(k_) * k_ * cin_, cout_);
    MapMat out(y.v.data(), static_cast<long>(oh) * ow, cout_);
    out.noalias() = col * w;
    out.rowwise() += CMapMat(bias_.w.data(), 1, cout_).row(0);
    return y;
  }

  // Accumulates weight/bias grads; returns grad w.r.t. input.
  Tensor backward(const Tensor& gy) {
    const long P = static_cast<long>(gy.h) * gy.w;
    const long K = static_cast<long>(k_) * k_ * cin_;
    CMapMat col(col_.data(), P, K);
    CMapMat go(gy.v.data(), P, cout_);
    MapMat gw(weight_.g.data(), K, cout_);
    gw.noalias() += col.transpose() * go;
    MapMat gb(bias_.g.data(), 1, cout_);
    gb.noalias() += go.colwise().sum();

    Mat gcol = go * CMapMat(weight_.w.data(), K, cout_).transpose();
    Tensor gx(in_h_, in_w_, cin_);
    const int pad = k_ / 2;
    long p = 0;
    for (int oi = 0; oi < gy.h; ++oi) {
      for (int oj = 0; oj < gy.w; ++oj, ++p) {
        long q = 0;
        for (int di = 0; di < k_; ++di) {
          const int ii = oi * stride_ + di - pad;
          for (int dj = 0; dj < k_; ++dj) {
            const int jj = oj * stride_ + dj - pad;
            if (ii < 0 || ii >= in_h_ || jj < 0 || jj >= in_w_) {
              q += cin_;
              continue;
            }
            float* dst = &gx.at(ii, jj, 0);
            const float* src = gcol.data() + p * K + q;
            for (int ic = 0; ic < cin_; ++ic) dst[ic] += src[ic];
            q += cin_;
          }
        }
      }
    }
    return gx;
  }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  void collect(std::vector<Param*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  void build_col(const Tensor& x, int oh, int ow) {
    const int pad = k_ / 2;
    const long K = static_cast<long>(k_) * k_ * cin_;
    col_.assign(static_cast<std::size_t>(oh) * ow * K, 0.0f);
    long p = 0;
    for (int oi = 0; oi < oh; ++oi) {
      for (int oj = 0; oj < ow; ++oj, ++p) {
        long q = 0;
        for (int di = 0; di < k_; ++di) {
          const int ii = oi * stride_ + di - pad;
          for (int dj = 0; dj < k_; ++dj) {
            const int jj = oj * stride_ + dj - pad;
            if (ii >= 0 && ii < x.h && jj >= 0 && jj < x.w) {
              const float* src = x.v.data() + (static_cast<std::size_t>(ii) * x.w + jj) * cin_;
              float* dst = col_.data() + p * K + q;
              for (int ic = 0; ic < cin_; ++ic) dst[ic] = src[ic];
            }
            q += cin_;
          }
        }
      }
    }
  }

  int cin_, cout_, k_, stride_;
  int in_h_ = 0, in_w_ = 0;
  Param weight_, bias_;
  std::vector<float> col_;
};

class Relu {
 public:
  Tensor forward(const Tensor& x) {
    mask_.assign(x.size(), 0);
    Tensor y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x.v[i] > 0.0f) mask_[i] = 1;
      else y.v[i] = 0.0f;
    }
    return y;
  }
  Tensor backward(const Tensor& gy) {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (!mask_[i]) gx.v[i] = 0.0f;
    return gx;
  }

 private:
  std::vector<std::uint8_t> mask_;
};

class Sigmoid {
 public:
  Tensor forward(const Tensor& x) {
    y_ = x;
    for (auto& v : y_.v) v = 1.0f / (1.0f + std::exp(-v));
    return y_;
  }
  Tensor backward(const Tensor& gy) {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx.v[i] *= y_.v[i] * (1.0f - y_.v[i]);
    return gx;
  }

 private:
  Tensor y_;
};

// 2x2 average pooling, stride 2. Dimensions must be even.
class AvgPool2 {
 public:
  Tensor forward(const Tensor& x) {
    in_h_ = x.h; in_w_ = x.w;
    Tensor y(x.h / 2, x.w / 2, x.c);
    for (int i = 0; i < y.h; ++i)
      for (int j = 0; j < y.w; ++j)
        for (int c = 0; c < x.c; ++c)
          y.at(i, j, c) = 0.25f * (x.at(2 * i, 2 * j, c) + x.at(2 * i, 2 * j + 1, c) +
                                   x.at(2 * i + 1, 2 * j, c) + x.at(2 * i + 1, 2 * j + 1, c));
    return y;
  }
  Tensor backward(const Tensor& gy) {
    Tensor gx(in_h_, in_w_, gy.c);
    for (int i = 0; i < gy.h; ++i)
      for (int j = 0; j < gy.w; ++j)
        for (int c = 0; c < gy.c; ++c) {
          const float g = 0.25f * gy.at(i, j, c);
          gx.at(2 * i, 2 * j, c) = g;
          gx.at(2 * i, 2 * j + 1, c) = g;
          gx.at(2 * i + 1, 2 * j, c) = g;
          gx.at(2 * i + 1, 2 * j + 1, c) = g;
        }
    return gx;
  }

 private:
  int in_h_ = 0, in_w_ = 0;
};

// Nearest-neighbor 2x upsampling.
class Upsample2 {
 public:
  Tensor forward(const Tensor& x) {
    Tensor y(x.h * 2, x.w * 2, x.c);
    for (int i = 0; i < y.h; ++i)
      for (int j = 0; j < y.w; ++j)
        for (int c = 0; c < x.c; ++c) y.at(i, j, c) = x.at(i / 2, j / 2, c);
    return y;
  }
  Tensor backward(const Tensor& gy) {
    Tensor gx(gy.h / 2, gy.w / 2, gy.c);
    for (int i = 0; i < gy.h; ++i)
      for (int j = 0; j < gy.w; ++j)
        for (int c = 0; c < gy.c; ++c) gx.at(i / 2, j / 2, c) += gy.at(i, j, c);
    return gx;
  }
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.h != b.h || a.w != b.w) throw ShapeError("concat: spatial mismatch");
  Tensor y(a.h, a.w, a.c + b.c);
  for (int i = 0; i < a.h; ++i)
    for (int j = 0; j < a.w; ++j) {
      for (int c = 0; c < a.c; ++c) y.at(i, j, c) = a.at(i, j, c);
      for (int c = 0; c < b.c; ++c) y.at(i, j, a.c + c) = b.at(i, j, c);
    }
  return y;
}

inline void split_channels_grad(const Tensor& gy, Tensor& ga, Tensor& gb, int ca) {
  ga = Tensor(gy.h, gy.w, ca);
  gb = Tensor(gy.h, gy.w, gy.c - ca);
  for (int i = 0; i < gy.h; ++i)
    for (int j = 0; j < gy.w; ++j) {
      for (int c = 0; c < ca; ++c) ga.at(i, j, c) = gy.at(i, j, c);
      for (int c = ca; c < gy.c; ++c) gb.at(i, j, c - ca) = gy.at(i, j, c);
    }
}

// Fully connected layer on a flattened tensor.
class Dense {
 public:
  Dense(int in, int out, Rng& rng)
      : in_(in), out_(out), weight_(static_cast<std::size_t>(in) * out), bias_(out) {
    const double s = std::sqrt(2.0 / in);
    for (auto& w : weight_.w) w = static_cast<float>(rng.normal(0.0, s));
  }

  std::vector<float> forward(const std::vector<float>& x) {
    if (static_cast<int>(x.size()) != in_) throw ShapeError("dense: input size mismatch");
    x_ = x;
    std::vector<float> y(out_);
    CMapMat w(weight_.w.data(), in_, out_);
    CMapMat xv(x.data(), 1, in_);
    MapMat yv(y.data(), 1, out_);
    yv.noalias() = xv * w;
    yv += CMapMat(bias_.w.data(), 1, out_);
    return y;
  }

  std::vector<float> backward(const std::vector<float>& gy) {
    CMapMat go(gy.data(), 1, out_);
    CMapMat xv(x_.data(), 1, in_);
    MapMat gw(weight_.g.data(), in_, out_);
    gw.noalias() += xv.transpose() * go;
    MapMat gb(bias_.g.data(), 1, out_);
    gb += go;
    std::vector<float> gx(in_);
    MapMat gxv(gx.data(), 1, in_);
    gxv.noalias() = go * CMapMat(weight_.w.data(), in_, out_).transpose();
    return gx;
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  int in_, out_;
  Param weight_, bias_;
  std::vector<float> x_;
};

inline std::vector<float> softmax(const std::vector<float>& logits) {
  float mx = logits[0];
  for (float v : logits) mx = std::max(mx, v);
  std::vector<float> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v = static_cast<float>(v / sum);
  return p;
}

// Cross entropy of softmax probabilities against an integer label.
inline double cross_entropy(const std::vector<float>& probs, int label) {
  const double p = std::max(static_cast<double>(probs[label]), 1e-30);
  return -std::log(p);
}

// Serialization: flat weight stream in collection order.
inline std::vector<float> pack_params(const std::vector<Param*>& params) {
  std::vector<float> out;
  for (const Param* p : params) out.insert(out.end(), p->w.begin(), p->w.end());
  return out;
}

inline void unpack_params(const std::vector<Param*>& params, const std::vector<float>& flat) {
  std::size_t off = 0;
  for (Param* p : params) {
    if (off + p->w.size() > flat.size()) throw ShapeError("checkpoint: weight stream too short");
    std::copy(flat.begin() + off, flat.begin() + off + p->w.size(), p->w.begin());
    off += p->w.size();
  }
  if (off != flat.size()) throw ShapeError("checkpoint: weight stream size mismatch");
}

inline std::uint64_t params_hash(const std::vector<Param*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Param* p : params) h = fnv1a(p->w.data(), p->w.size() * sizeof(float), h);
  return h;
}

inline std::size_t params_count(const std::vector<Param*>& params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->w.size();
  return n;
}

}  // namespace dotlens::nn
