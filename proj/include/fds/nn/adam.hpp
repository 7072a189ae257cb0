#pragma once

#include <cmath>

#include "fds/nn/layers.hpp"

namespace fds::nn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global L2 norm clip, 0 disables
};

template <typename T>
class Adam {
 public:
  Adam(ParamRefs<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto* p : params_) {
      m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() { zero_grads(params_); }

  void step() {
    ++t_;
    T scale = T(1);
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto* p : params_) sq += static_cast<double>(p->grad.squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) scale = static_cast<T>(cfg_.grad_clip / norm);
    }
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps), wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (Eigen::Index k = 0; k < p.value.size(); ++k) {
        T g = p.grad.data()[k] * scale;
        if (wd != T(0)) g += wd * p.value.data()[k];
        m.data()[k] = b1 * m.data()[k] + (T(1) - b1) * g;
        v.data()[k] = b2 * v.data()[k] + (T(1) - b2) * g * g;
        const T mh = m.data()[k] / c1;
        const T vh = v.data()[k] / c2;
        p.value.data()[k] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  ParamRefs<T> params_;
  AdamConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  long t_ = 0;
};

}  // namespace fds::nn
