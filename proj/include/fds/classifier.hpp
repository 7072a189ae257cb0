#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/checkpoint.hpp"
#include "fds/dataset.hpp"
#include "fds/nn/layers.hpp"

namespace fds::classifier {

using nn::Mat;

// linear: softmax regression on the raw payload (features = payload).
// mlp:    two hidden ReLU layers.
// conv:   two stride-2 3x3 convolutions, then a dense penultimate layer.
struct ClassifierConfig {
  std::string architecture = "mlp";
  int hidden = 64;
  int penultimate = 32;
  int conv1_channels = 8;
  int conv2_channels = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

template <typename T>
class Network {
 public:
  Network() = default;
  Network(const ClassifierConfig& cfg, data::PayloadMode mode, const std::vector<int>& shape, int n_classes, Rng& rng)
      : cfg_(cfg), n_classes_(n_classes) {
    cfg.validate();
    require(n_classes >= 2, "classifier needs at least two classes");
    int dim = 1;
    for (int s : shape) dim *= s;
    in_dim_ = dim;
    if (cfg.architecture == "linear") {
      feat_dim_ = dim;
      head_ = nn::Linear<T>(dim, n_classes, rng, "head");
    } else if (cfg.architecture == "mlp") {
      dense_.emplace_back(dim, cfg.hidden, rng, "fc0");
      dense_.emplace_back(cfg.hidden, cfg.penultimate, rng, "fc1");
      feat_dim_ = cfg.penultimate;
      head_ = nn::Linear<T>(cfg.penultimate, n_classes, rng, "head");
    } else {
      if (mode != data::PayloadMode::image || shape.size() != 3)
        throw ConfigError("conv classifier needs image payloads of shape C x H x W");
      nn::ConvGeometry g1{shape[0], shape[1], shape[2], cfg.conv1_channels, 3, 2, 1};
      nn::ConvGeometry g2{cfg.conv1_channels, g1.out_height(), g1.out_width(), cfg.conv2_channels, 3, 2, 1};
      convs_.emplace_back(g1, rng, "conv0");
      convs_.emplace_back(g2, rng, "conv1");
      dense_.emplace_back(g2.out_size(), cfg.penultimate, rng, "fc0");
      feat_dim_ = cfg.penultimate;
      head_ = nn::Linear<T>(cfg.penultimate, n_classes, rng, "head");
    }
  }

  int input_dim() const { return in_dim_; }
  int feature_dim() const { return feat_dim_; }
  int n_classes() const { return n_classes_; }
  const ClassifierConfig& config() const { return cfg_; }

  Mat<T> forward(const Mat<T>& x) {
    check(x);
    pre_.clear();
    Mat<T> h = x;
    for (auto& c : convs_) {
      pre_.push_back(c.forward(h));
      h = nn::relu(pre_.back());
    }
    for (auto& d : dense_) {
      pre_.push_back(d.forward(h));
      h = nn::relu(pre_.back());
    }
    return head_.forward(h);
  }

  void backward(const Mat<T>& d_logits) {
    Mat<T> dh = head_.backward(d_logits);
    std::size_t k = pre_.size();
    for (std::size_t i = dense_.size(); i-- > 0;) {
      --k;
      dh = dense_[i].backward(relu_mask(dh, pre_[k]));
    }
    for (std::size_t i = convs_.size(); i-- > 0;) {
      --k;
      dh = convs_[i].backward(relu_mask(dh, pre_[k]));
    }
  }

  // Row-independent penultimate features.
  Mat<T> features(const Mat<T>& x) const {
    check(x);
    Mat<T> h = x;
    for (const auto& c : convs_) h = nn::relu(c.infer(h));
    for (const auto& d : dense_) h = nn::relu(d.infer(h));
    return h;
  }

  Mat<T> logits(const Mat<T>& x) const { return head_.infer(features(x)); }

  nn::ParamRefs<T> params() {
    nn::ParamRefs<T> out;
    for (auto& c : convs_) c.collect(out);
    for (auto& d : dense_) d.collect(out);
    head_.collect(out);
    return out;
  }

 private:
  void check(const Mat<T>& x) const {
    if (x.cols() != in_dim_) throw std::invalid_argument("classifier input dimension mismatch");
  }
  static Mat<T> relu_mask(const Mat<T>& g, const Mat<T>& pre) {
    return (pre.array() > T(0)).select(g, Mat<T>::Zero(g.rows(), g.cols()));
  }

  ClassifierConfig cfg_;
  int n_classes_ = 0, in_dim_ = 0, feat_dim_ = 0;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::Linear<T>> dense_;
  nn::Linear<T> head_;
  std::vector<Mat<T>> pre_;
};

// Row-wise softmax in double precision.
template <typename T>
Mat<double> softmax(const Mat<T>& logits) {
  Mat<double> p = logits.template cast<double>();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Lowest index wins exact ties.
int argmax(std::span<const double> row);

// Anything that maps a payload batch to class probabilities.
class ProbabilisticModel {
 public:
  virtual ~ProbabilisticModel() = default;
  virtual int input_dim() const = 0;
  virtual int n_classes() const = 0;
  virtual Mat<double> predict_proba(const Mat<float>& x) const = 0;
};

class Classifier : public ProbabilisticModel {
 public:
  Classifier() = default;
  Classifier(const ClassifierConfig& cfg, data::PayloadMode mode, std::vector<int> shape, int n_classes,
             std::uint64_t seed);

  int input_dim() const override { return net_.input_dim(); }
  int n_classes() const override { return net_.n_classes(); }
  int feature_dim() const { return net_.feature_dim(); }
  const ClassifierConfig& config() const { return net_.config(); }
  data::PayloadMode mode() const { return mode_; }
  const std::vector<int>& shape() const { return shape_; }

  Mat<double> predict_proba(const Mat<float>& x) const override { return softmax(net_.logits(x)); }
  Mat<float> logits(const Mat<float>& x) const { return net_.logits(x); }
  Mat<float> features(const Mat<float>& x) const { return net_.features(x); }

  Network<float>& net() { return net_; }
  std::vector<float> weights() { return nn::flatten_values(net_.params()); }
  void set_weights(std::span<const float> w);
  std::size_t parameter_count() { return nn::parameter_count(net_.params()); }

  Checkpoint to_checkpoint() const;
  static Classifier from_checkpoint(const Checkpoint& ck);
  std::string content_hash() const;

 private:
  data::PayloadMode mode_ = data::PayloadMode::point;
  std::vector<int> shape_;
  std::uint64_t seed_ = 0;
  mutable Network<float> net_;
};

}  // namespace fds::classifier
