#include "fds/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "fds/nn/adam.hpp"

namespace fds::trainer {

using nlohmann::json;

void TrainConfig::validate() const {
  classifier.validate();
  if (steps < 0) throw ConfigError("trainer: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("trainer: lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("trainer: weight_decay must be >= 0");
  if (checkpoint_every < 1) throw ConfigError("trainer: checkpoint_every must be >= 1");
  if (ring_size < 1) throw ConfigError("trainer: ring_size must be >= 1");
}

json TrainConfig::to_json() const {
  return json{{"classifier", classifier.to_json()}, {"steps", steps},
              {"batch_size", batch_size},           {"lr", lr},
              {"weight_decay", weight_decay},       {"checkpoint_every", checkpoint_every},
              {"ring_size", ring_size},             {"record_test_trace", record_test_trace}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("classifier")) c.classifier = ClassifierConfig::from_json(j.at("classifier"));
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.ring_size = j.value("ring_size", c.ring_size);
  c.record_test_trace = j.value("record_test_trace", c.record_test_trace);
  c.validate();
  return c;
}

json TrainRun::log_json() const {
  json out = json::array();
  for (const auto& e : log) {
    json row{{"step", e.step}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}};
    row["test_accuracy"] = e.test_accuracy ? json(*e.test_accuracy) : json(nullptr);
    out.push_back(row);
  }
  return out;
}

namespace {

double accuracy_on(const Classifier& model, const Mat<float>& x, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const Mat<double> p = model.predict_proba(x);
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const int k = classifier::argmax(std::span<const double>(p.row(r).data(), static_cast<std::size_t>(p.cols())));
    if (k == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<int> labels_of(const data::MultiDomainDataset& ds, std::span<const SampleId> ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(ds.class_of(id));
  return out;
}

}  // namespace

TrainResult train_erm(const data::MultiDomainDataset& dataset, const data::SplitPlan& split, const TrainConfig& cfg,
                      std::uint64_t seed) {
  cfg.validate();
  split.check_disjoint();
  data::assert_no_domain(dataset, split.train_ids, split.target_domain, "train_erm (train)");
  if (split.mode != "oracle") data::assert_no_domain(dataset, split.val_ids, split.target_domain, "train_erm (val)");
  if (split.train_ids.empty() && cfg.steps > 0) throw std::invalid_argument("train_erm: empty training set");
  if (split.val_ids.empty()) throw std::invalid_argument("train_erm: empty validation set");

  std::map<int, std::vector<SampleId>> by_domain;
  for (auto id : split.train_ids) by_domain[dataset.domain_of(id)].push_back(id);
  std::vector<std::vector<SampleId>> groups;
  for (auto& [d, ids] : by_domain) groups.push_back(std::move(ids));

  TrainResult res;
  res.model = Classifier(cfg.classifier, dataset.mode(), dataset.shape(), dataset.n_classes(), derive_seed(seed, 1));
  res.run.seed = seed;
  res.run.config_echo = cfg.to_json();
  auto& net = res.model.net();
  const auto params = net.params();
  nn::Adam<float> opt(params, nn::AdamConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});

  const Mat<float> xval = dataset.gather(split.val_ids);
  const auto yval = labels_of(dataset, split.val_ids);
  Mat<float> xtest;
  std::vector<int> ytest;
  if (cfg.record_test_trace && !split.test_ids.empty()) {
    xtest = dataset.gather(split.test_ids);
    ytest = labels_of(dataset, split.test_ids);
  }

  auto checkpoint = [&](int step, double loss) {
    LogEntry e{step, loss, accuracy_on(res.model, xval, yval), std::nullopt};
    if (!ytest.empty()) e.test_accuracy = accuracy_on(res.model, xtest, ytest);
    res.run.log.push_back(e);
    RingCheckpoint ck{step, e.val_accuracy, nn::flatten_values(params)};
    if (res.run.best.weights.empty() || ck.val_accuracy > res.run.best.val_accuracy) res.run.best = ck;
    if (step > 0 || cfg.steps == 0) {
      res.run.ring.push_back(std::move(ck));
      if (static_cast<int>(res.run.ring.size()) > cfg.ring_size) res.run.ring.erase(res.run.ring.begin());
    }
  };

  checkpoint(0, 0.0);
  Rng rng(derive_seed(seed, 2));
  const int per_domain = groups.empty() ? 0 : std::max(1, cfg.batch_size / static_cast<int>(groups.size()));
  std::vector<SampleId> batch_ids;
  std::vector<int> labels;
  double loss_sum = 0.0;
  int loss_count = 0;
  for (int step = 1; step <= cfg.steps; ++step) {
    batch_ids.clear();
    for (const auto& g : groups) {
      std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
      for (int r = 0; r < per_domain; ++r) batch_ids.push_back(g[pick(rng)]);
    }
    const Mat<float> x = dataset.gather(batch_ids);
    labels = labels_of(dataset, batch_ids);
    opt.zero_grad();
    loss_sum += cross_entropy_loss<float>(net, x, labels, true);
    ++loss_count;
    opt.step();
    if (step % cfg.checkpoint_every == 0 || step == cfg.steps) {
      checkpoint(step, loss_sum / loss_count);
      loss_sum = 0.0;
      loss_count = 0;
    }
  }
  res.final_model = res.model;
  res.model.set_weights(res.run.best.weights);
  return res;
}

std::vector<float> average_weights(std::span<const std::vector<float>> checkpoints) {
  if (checkpoints.empty()) throw std::invalid_argument("average_weights: no checkpoints");
  const std::size_t n = checkpoints.front().size();
  std::vector<double> acc(n, 0.0);
  for (const auto& c : checkpoints) {
    if (c.size() != n) throw std::invalid_argument("average_weights: checkpoint size mismatch");
    for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(c[i]);
  }
  std::vector<float> out(n);
  const double k = static_cast<double>(checkpoints.size());
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] / k);
  return out;
}

SwadWindow swad_window(const TrainRun& run, const WindowPolicy& policy) {
  SwadWindow w;
  if (run.ring.empty()) {
    w.fallback = true;
    return w;
  }
  double global = -1.0;
  for (const auto& c : run.ring) global = std::max(global, c.val_accuracy);
  const int n = static_cast<int>(run.ring.size());
  for (int i = 0; i < n; ++i)
    if (run.ring[static_cast<std::size_t>(i)].val_accuracy >= global - policy.tol_start - 1e-12) {
      w.start_index = i;
      break;
    }
  double window_max = run.ring[static_cast<std::size_t>(w.start_index)].val_accuracy;
  w.end_index = w.start_index;
  for (int i = w.start_index + 1; i < n; ++i) {
    const double v = run.ring[static_cast<std::size_t>(i)].val_accuracy;
    if (v < window_max - policy.tol_end - 1e-12) break;
    window_max = std::max(window_max, v);
    w.end_index = i;
  }
  w.start_step = run.ring[static_cast<std::size_t>(w.start_index)].step;
  w.end_step = run.ring[static_cast<std::size_t>(w.end_index)].step;
  return w;
}

Classifier swad_average(const TrainRun& run, const Classifier& architecture, const WindowPolicy& policy,
                        SwadWindow* window) {
  const SwadWindow w = swad_window(run, policy);
  if (window) *window = w;
  Classifier out = architecture;
  if (w.fallback) {
    std::cerr << "warning: swad window empty, using the best single checkpoint\n";
    if (run.best.weights.empty()) throw StageError("swad_average: run has no checkpoints");
    out.set_weights(run.best.weights);
    return out;
  }
  std::vector<std::vector<float>> picked;
  for (int i = w.start_index; i <= w.end_index; ++i) picked.push_back(run.ring[static_cast<std::size_t>(i)].weights);
  out.set_weights(average_weights(picked));
  return out;
}

std::vector<int> predict_classes(const classifier::ProbabilisticModel& model, const data::MultiDomainDataset& dataset,
                                 std::span<const SampleId> ids, int batch_size) {
  require(batch_size >= 1, "predict_classes: batch_size must be >= 1");
  if (model.input_dim() != dataset.payload_dim()) throw std::invalid_argument("predict_classes: payload shape mismatch");
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = ids.subspan(start, std::min(ids.size() - start, static_cast<std::size_t>(batch_size)));
    const Mat<double> p = model.predict_proba(dataset.gather(chunk));
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      out.push_back(classifier::argmax(std::span<const double>(p.row(r).data(), static_cast<std::size_t>(p.cols()))));
  }
  return out;
}

double evaluate(const classifier::ProbabilisticModel& model, const data::MultiDomainDataset& dataset,
                std::span<const SampleId> ids, int batch_size) {
  if (ids.empty()) throw std::invalid_argument("evaluate: empty id set");
  const auto pred = predict_classes(model, dataset, ids, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (pred[i] == dataset.class_of(ids[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

// --- reports -------------------------------------------------------------

Aggregate mean_std(std::span<const double> values) {
  Aggregate a;
  a.count = static_cast<int>(values.size());
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

void RunReport::add(ReportRecord r) {
  const auto mode = split_mode();
  if (mode && *mode != r.split_mode)
    throw StageError("run report: refusing to mix split modes '" + *mode + "' and '" + r.split_mode + "'");
  records_.push_back(std::move(r));
}

void RunReport::merge(const RunReport& other) {
  for (const auto& r : other.records_) add(r);
}

std::optional<std::string> RunReport::split_mode() const {
  if (records_.empty()) return std::nullopt;
  return records_.front().split_mode;
}

std::vector<std::string> RunReport::methods() const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  return out;
}

std::vector<std::string> RunReport::domains() const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (std::find(out.begin(), out.end(), r.target_domain) == out.end()) out.push_back(r.target_domain);
  return out;
}

std::vector<double> RunReport::accuracies(const std::string& method, const std::string& domain) const {
  std::vector<double> out;
  for (const auto& r : records_)
    if (r.method == method && (domain.empty() || r.target_domain == domain) && r.accuracy) out.push_back(*r.accuracy);
  return out;
}

std::optional<Aggregate> RunReport::cell(const std::string& method, const std::string& domain) const {
  const auto v = accuracies(method, domain);
  if (v.empty()) return std::nullopt;
  return mean_std(v);
}

std::optional<Aggregate> RunReport::overall(const std::string& method) const {
  std::vector<double> domain_means;
  std::map<std::uint64_t, std::vector<double>> per_seed;
  const auto doms = domains();
  for (const auto& d : doms) {
    const auto c = cell(method, d);
    if (c) domain_means.push_back(c->mean);
  }
  if (domain_means.empty()) return std::nullopt;
  for (const auto& r : records_)
    if (r.method == method && r.accuracy) per_seed[r.seed].push_back(*r.accuracy);
  Aggregate a = mean_std(domain_means);
  std::vector<double> seed_avgs;
  for (const auto& [s, v] : per_seed)
    if (v.size() == domain_means.size()) seed_avgs.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
  a.std = mean_std(seed_avgs).std;
  a.count = static_cast<int>(domain_means.size());
  return a;
}

namespace {
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}
}  // namespace

std::string RunReport::to_csv() const {
  std::ostringstream out;
  out << "method,target_domain,seed,split_mode,accuracy\n";
  for (const auto& r : records_) {
    out << csv_field(r.method) << ',' << csv_field(r.target_domain) << ',' << r.seed << ',' << csv_field(r.split_mode) << ',';
    if (r.accuracy) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", *r.accuracy);
      out << buf;
    } else {
      out << "failed";
    }
    out << '\n';
  }
  return out.str();
}

namespace {
json aggregate_json(const std::optional<Aggregate>& a) {
  if (!a) return nullptr;
  return json{{"mean", a->mean}, {"std", a->std ? json(*a->std) : json(nullptr)}, {"n", a->count}};
}
}  // namespace

json RunReport::to_json() const {
  json recs = json::array();
  for (const auto& r : records_) {
    json j{{"method", r.method}, {"target_domain", r.target_domain}, {"seed", r.seed}, {"split_mode", r.split_mode}};
    j["accuracy"] = r.accuracy ? json(*r.accuracy) : json(nullptr);
    if (!r.error.empty()) j["error"] = r.error;
    j["artifacts"] = r.artifacts;
    recs.push_back(j);
  }
  json agg = json::object();
  for (const auto& m : methods()) {
    json d = json::object();
    for (const auto& dom : domains()) d[dom] = aggregate_json(cell(m, dom));
    agg[m] = json{{"domains", d}, {"overall", aggregate_json(overall(m))}};
  }
  return json{{"split_mode", split_mode() ? json(*split_mode()) : json(nullptr)},
              {"records", recs},
              {"aggregate", agg},
              {"metadata", metadata}};
}

RunReport RunReport::from_json(const json& j) {
  RunReport rep;
  for (const auto& r : j.at("records")) {
    ReportRecord rec;
    rec.method = r.at("method").get<std::string>();
    rec.target_domain = r.at("target_domain").get<std::string>();
    rec.seed = r.at("seed").get<std::uint64_t>();
    rec.split_mode = r.at("split_mode").get<std::string>();
    if (!r.at("accuracy").is_null()) rec.accuracy = r.at("accuracy").get<double>();
    rec.error = r.value("error", std::string());
    rec.artifacts = r.value("artifacts", json::object());
    rep.add(std::move(rec));
  }
  rep.metadata = j.value("metadata", json::object());
  return rep;
}

void RunReport::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "report.csv", to_csv());
  write_file_atomic(dir / "report.json", to_json().dump(2) + "\n");
}

}  // namespace fds::trainer
