#pragma once

// Minimal dense/conv layers with hand-written backward passes.
//
// Activations are row-major matrices with one sample per row. Every layer
// offers two forward paths:
//   forward()  caches what backward() needs and uses Eigen's blocked GEMM;
//   infer()    is stateless and computes each output row from its own input
//              row only, so results never depend on batch composition.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fds/common.hpp"

namespace fds::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Param() = default;
  Param(std::string n, Mat<T> v) : name(std::move(n)), value(std::move(v)), grad(Mat<T>::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

// out(b,:) = bias + sum_k x(b,k) * w(k,:), accumulated in k order per row.
template <typename T>
void rowwise_affine(const Mat<T>& x, const Mat<T>& w, const Mat<T>* bias, Mat<T>& out) {
  const Eigen::Index rows = x.rows(), in = x.cols(), cols = w.cols();
  out.resize(rows, cols);
  for (Eigen::Index b = 0; b < rows; ++b) {
    T* y = out.data() + b * cols;
    if (bias) {
      const T* bb = bias->data();
      for (Eigen::Index o = 0; o < cols; ++o) y[o] = bb[o];
    } else {
      for (Eigen::Index o = 0; o < cols; ++o) y[o] = T(0);
    }
    const T* xr = x.data() + b * in;
    for (Eigen::Index k = 0; k < in; ++k) {
      const T xv = xr[k];
      const T* wr = w.data() + k * cols;
      for (Eigen::Index o = 0; o < cols; ++o) y[o] += xv * wr[o];
    }
  }
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
Mat<T> silu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return silu(v); });
}

template <typename T>
Mat<T> relu(const Mat<T>& x) {
  return x.cwiseMax(T(0));
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng, const std::string& name) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Mat<T> w(in, out), b(1, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(dist(rng));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<T>(dist(rng));
    weight = Param<T>(name + ".weight", std::move(w));
    bias = Param<T>(name + ".bias", std::move(b));
  }

  int in_features() const { return static_cast<int>(weight.value.rows()); }
  int out_features() const { return static_cast<int>(weight.value.cols()); }

  Mat<T> forward(const Mat<T>& x) {
    input_ = x;
    Mat<T> y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    weight.grad.noalias() += input_.transpose() * dy;
    bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value.transpose();
  }

  Mat<T> infer(const Mat<T>& x) const {
    Mat<T> y;
    rowwise_affine(x, weight.value, &bias.value, y);
    return y;
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Param<T> weight;
  Param<T> bias;

 private:
  Mat<T> input_;
};

struct ConvGeometry {
  int in_channels = 1;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  int out_height() const { return (in_height + 2 * padding - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * padding - kernel) / stride + 1; }
  int in_size() const { return in_channels * in_height * in_width; }
  int out_size() const { return out_channels * out_height() * out_width(); }
  int patch_size() const { return in_channels * kernel * kernel; }
};

// 2D convolution over CHW-flattened rows via im2col.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const ConvGeometry& g, Rng& rng, const std::string& name) : geom_(g) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(g.patch_size()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Mat<T> w(g.patch_size(), g.out_channels), b(1, g.out_channels);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(dist(rng));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<T>(dist(rng));
    weight = Param<T>(name + ".weight", std::move(w));
    bias = Param<T>(name + ".bias", std::move(b));
  }

  const ConvGeometry& geometry() const { return geom_; }

  Mat<T> forward(const Mat<T>& x) {
    batch_ = x.rows();
    im2col(x, cols_);
    Mat<T> res = cols_ * weight.value;
    res.rowwise() += bias.value.row(0);
    return scatter(res, batch_);
  }

  Mat<T> backward(const Mat<T>& dy) {
    const Mat<T> dres = gather(dy);
    weight.grad.noalias() += cols_.transpose() * dres;
    bias.grad.row(0) += dres.colwise().sum();
    const Mat<T> dcols = dres * weight.value.transpose();
    return col2im(dcols, batch_);
  }

  Mat<T> infer(const Mat<T>& x) const {
    Mat<T> cols, res;
    im2col(x, cols);
    rowwise_affine(cols, weight.value, &bias.value, res);
    return scatter(res, x.rows());
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Param<T> weight;
  Param<T> bias;

 private:
  void im2col(const Mat<T>& x, Mat<T>& cols) const {
    const auto& g = geom_;
    const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
    cols.setZero(x.rows() * ho * wo, g.patch_size());
    for (Eigen::Index b = 0; b < x.rows(); ++b) {
      const T* img = x.data() + b * x.cols();
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          T* row = cols.data() + ((b * ho + oy) * wo + ox) * g.patch_size();
          for (int c = 0; c < g.in_channels; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * g.stride - g.padding + ky;
              if (iy < 0 || iy >= g.in_height) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * g.stride - g.padding + kx;
                if (ix < 0 || ix >= g.in_width) continue;
                row[(c * k + ky) * k + kx] = img[(c * g.in_height + iy) * g.in_width + ix];
              }
            }
          }
        }
      }
    }
  }

  Mat<T> col2im(const Mat<T>& dcols, Eigen::Index batch) const {
    const auto& g = geom_;
    const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
    Mat<T> dx = Mat<T>::Zero(batch, g.in_size());
    for (Eigen::Index b = 0; b < batch; ++b) {
      T* img = dx.data() + b * dx.cols();
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const T* row = dcols.data() + ((b * ho + oy) * wo + ox) * g.patch_size();
          for (int c = 0; c < g.in_channels; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * g.stride - g.padding + ky;
              if (iy < 0 || iy >= g.in_height) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * g.stride - g.padding + kx;
                if (ix < 0 || ix >= g.in_width) continue;
                img[(c * g.in_height + iy) * g.in_width + ix] += row[(c * k + ky) * k + kx];
              }
            }
          }
        }
      }
    }
    return dx;
  }

  // (B*HoWo x Cout) patch-major -> (B x Cout*HoWo) CHW rows.
  Mat<T> scatter(const Mat<T>& res, Eigen::Index batch) const {
    const int hw = geom_.out_height() * geom_.out_width(), co = geom_.out_channels;
    Mat<T> out(batch, co * hw);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (int p = 0; p < hw; ++p)
        for (int c = 0; c < co; ++c) out(b, c * hw + p) = res(b * hw + p, c);
    return out;
  }

  Mat<T> gather(const Mat<T>& dy) const {
    const int hw = geom_.out_height() * geom_.out_width(), co = geom_.out_channels;
    Mat<T> res(dy.rows() * hw, co);
    for (Eigen::Index b = 0; b < dy.rows(); ++b)
      for (int p = 0; p < hw; ++p)
        for (int c = 0; c < co; ++c) res(b * hw + p, c) = dy(b, c * hw + p);
    return res;
  }

  ConvGeometry geom_;
  Mat<T> cols_;
  Eigen::Index batch_ = 0;
};

// --- parameter vectors ----------------------------------------------------

template <typename T>
std::size_t parameter_count(const ParamRefs<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename T>
std::vector<float> flatten_values(const ParamRefs<T>& params) {
  std::vector<float> out;
  out.reserve(parameter_count(params));
  for (const auto* p : params)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) out.push_back(static_cast<float>(p->value.data()[i]));
  return out;
}

template <typename T>
void assign_values(const ParamRefs<T>& params, std::span<const float> flat) {
  if (flat.size() != parameter_count(params)) throw Error("parameter vector size mismatch");
  std::size_t off = 0;
  for (auto* p : params)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<T>(flat[off++]);
}

template <typename T>
std::vector<double> flatten_grads(const ParamRefs<T>& params) {
  std::vector<double> out;
  for (const auto* p : params)
    for (Eigen::Index i = 0; i < p->grad.size(); ++i) out.push_back(static_cast<double>(p->grad.data()[i]));
  return out;
}

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace fds::nn
