#include "fds/classifier.hpp"

namespace fds::classifier {

using nlohmann::json;

void ClassifierConfig::validate() const {
  if (architecture != "linear" && architecture != "mlp" && architecture != "conv")
    throw ConfigError("unknown classifier architecture: " + architecture);
  if (hidden < 1 || penultimate < 1 || conv1_channels < 1 || conv2_channels < 1)
    throw ConfigError("classifier widths must be >= 1");
}

json ClassifierConfig::to_json() const {
  return json{{"architecture", architecture},
              {"hidden", hidden},
              {"penultimate", penultimate},
              {"conv1_channels", conv1_channels},
              {"conv2_channels", conv2_channels}};
}

ClassifierConfig ClassifierConfig::from_json(const json& j) {
  ClassifierConfig c;
  c.architecture = j.value("architecture", c.architecture);
  c.hidden = j.value("hidden", c.hidden);
  c.penultimate = j.value("penultimate", c.penultimate);
  c.conv1_channels = j.value("conv1_channels", c.conv1_channels);
  c.conv2_channels = j.value("conv2_channels", c.conv2_channels);
  c.validate();
  return c;
}

int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  return best;
}

Classifier::Classifier(const ClassifierConfig& cfg, data::PayloadMode mode, std::vector<int> shape, int n_classes,
                       std::uint64_t seed)
    : mode_(mode), shape_(std::move(shape)), seed_(seed) {
  Rng rng(derive_seed(seed, 0xc1a55));
  net_ = Network<float>(cfg, mode_, shape_, n_classes, rng);
}

void Classifier::set_weights(std::span<const float> w) {
  const auto params = net_.params();
  if (w.size() != nn::parameter_count(params)) throw std::invalid_argument("classifier weight vector has wrong length");
  nn::assign_values(params, w);
}

Checkpoint Classifier::to_checkpoint() const {
  Checkpoint ck;
  ck.header = json{{"kind", "classifier"},
                   {"architecture", net_.config().architecture},
                   {"config", net_.config().to_json()},
                   {"n_classes", net_.n_classes()},
                   {"mode", data::to_string(mode_)},
                   {"shape", shape_},
                   {"seed", seed_}};
  for (auto* p : net_.params()) ck.add(p->name, std::vector<float>(p->value.data(), p->value.data() + p->value.size()));
  return ck;
}

Classifier Classifier::from_checkpoint(const Checkpoint& ck) {
  const auto& h = ck.header;
  if (h.value("kind", std::string()) != "classifier") throw IntegrityError("checkpoint is not a classifier");
  Classifier c(ClassifierConfig::from_json(h.at("config")), data::payload_mode_from_string(h.at("mode").get<std::string>()),
               h.at("shape").get<std::vector<int>>(), h.at("n_classes").get<int>(), h.at("seed").get<std::uint64_t>());
  for (auto* p : c.net_.params()) {
    const auto& v = ck.tensor(p->name);
    if (static_cast<Eigen::Index>(v.size()) != p->value.size()) throw IntegrityError("classifier tensor size mismatch: " + p->name);
    std::copy(v.begin(), v.end(), p->value.data());
  }
  return c;
}

std::string Classifier::content_hash() const { return sha256_hex(to_checkpoint().encode()); }

}  // namespace fds::classifier
