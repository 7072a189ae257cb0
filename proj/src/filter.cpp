#include "fds/filter.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

namespace fds::filter {

using nlohmann::json;

double entropy(std::span<const double> p) {
  if (p.empty()) throw std::invalid_argument("entropy: empty probability vector");
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("entropy: probabilities must be finite and non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("entropy: probabilities must sum to 1");
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(std::max(v, 1e-12));
  return std::max(0.0, h);
}

std::vector<PredictionRecord> score_pool(const SamplePool& pool, const classifier::ProbabilisticModel& h, int batch_size) {
  require(batch_size >= 1, "score_pool: batch_size must be >= 1");
  std::vector<PredictionRecord> out;
  if (pool.entries.empty()) return out;
  const int dim = pool.payload_dim();
  if (dim != h.input_dim()) throw std::invalid_argument("score_pool: pool payload shape does not match the classifier");
  const std::size_t n = pool.entries.size();
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    Mat<float> x(static_cast<Eigen::Index>(end - start), dim);
    for (std::size_t i = start; i < end; ++i) {
      const auto& pl = pool.entries[i].payload;
      if (static_cast<int>(pl.size()) != dim) throw std::invalid_argument("score_pool: ragged pool payloads");
      std::copy(pl.begin(), pl.end(), x.row(static_cast<Eigen::Index>(i - start)).data());
    }
    const Mat<double> p = h.predict_proba(x);
    for (std::size_t i = start; i < end; ++i) {
      const auto r = static_cast<Eigen::Index>(i - start);
      PredictionRecord rec;
      rec.generation_id = pool.entries[i].generation_id;
      rec.probabilities.assign(p.row(r).data(), p.row(r).data() + p.cols());
      rec.predicted_class = classifier::argmax(rec.probabilities);
      rec.entropy = entropy(rec.probabilities);
      rec.correct = rec.predicted_class == pool.entries[i].class_id;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::string to_string(FilterMode m) {
  switch (m) {
    case FilterMode::entropy_only: return "entropy_only";
    case FilterMode::entropy_plus_reject: return "entropy_plus_reject";
    case FilterMode::random: return "random";
    case FilterMode::none: return "none";
  }
  return "unknown";
}

FilterMode filter_mode_from_string(const std::string& s) {
  if (s == "entropy_only") return FilterMode::entropy_only;
  if (s == "entropy_plus_reject") return FilterMode::entropy_plus_reject;
  if (s == "random") return FilterMode::random;
  if (s == "none") return FilterMode::none;
  throw ConfigError("unknown filter mode: " + s);
}

std::size_t FilterVerdict::selected_count() const {
  std::size_t n = 0;
  for (const auto& [k, c] : cells) n += c.selected_ids.size();
  return n;
}

std::vector<CellKey> FilterVerdict::shortfalls() const {
  std::vector<CellKey> out;
  for (const auto& [k, c] : cells)
    if (static_cast<int>(c.selected_ids.size()) < n_l) out.push_back(k);
  return out;
}

json FilterVerdict::to_json() const {
  json cj = json::array();
  for (const auto& [k, c] : cells) {
    cj.push_back(json{{"domain_i", std::get<0>(k)},
                      {"domain_j", std::get<1>(k)},
                      {"class_id", std::get<2>(k)},
                      {"correct_ids", c.correct_ids},
                      {"selected_ids", c.selected_ids},
                      {"rejected_semantic_ids", c.rejected_semantic_ids},
                      {"rejected_low_entropy_ids", c.rejected_low_entropy_ids}});
  }
  return json{{"n_l", n_l}, {"mode", to_string(mode)}, {"classifier_hash", classifier_hash}, {"cells", cj}};
}

FilterVerdict FilterVerdict::from_json(const json& j) {
  FilterVerdict v;
  v.n_l = j.at("n_l").get<int>();
  v.mode = filter_mode_from_string(j.at("mode").get<std::string>());
  v.classifier_hash = j.value("classifier_hash", std::string());
  for (const auto& c : j.at("cells")) {
    CellVerdict cv;
    cv.correct_ids = c.at("correct_ids").get<std::vector<std::uint64_t>>();
    cv.selected_ids = c.at("selected_ids").get<std::vector<std::uint64_t>>();
    cv.rejected_semantic_ids = c.at("rejected_semantic_ids").get<std::vector<std::uint64_t>>();
    cv.rejected_low_entropy_ids = c.at("rejected_low_entropy_ids").get<std::vector<std::uint64_t>>();
    v.cells[{c.at("domain_i").get<int>(), c.at("domain_j").get<int>(), c.at("class_id").get<int>()}] = std::move(cv);
  }
  return v;
}

void FilterVerdict::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, to_json().dump(1) + "\n");
}

FilterVerdict FilterVerdict::load(const std::filesystem::path& path) { return from_json(json::parse(read_text_file(path))); }

namespace {

struct Scored {
  std::uint64_t id;
  double entropy;
  bool correct;
};

bool by_entropy(const Scored& a, const Scored& b) {
  if (a.entropy != b.entropy) return a.entropy > b.entropy;
  return a.id < b.id;
}

}  // namespace

FilterVerdict filter_ablation_mode(std::span<const PredictionRecord> records, const SamplePool& pool, int n_l,
                                   FilterMode mode, std::uint64_t seed) {
  if (n_l < 1) throw std::invalid_argument("select: N_L must be >= 1");
  std::unordered_map<std::uint64_t, const PredictionRecord*> by_id;
  for (const auto& r : records)
    if (!by_id.emplace(r.generation_id, &r).second) throw std::invalid_argument("select: duplicate prediction record");
  FilterVerdict v;
  v.n_l = n_l;
  v.mode = mode;
  for (const auto& [key, idx] : pool.cells()) {
    std::vector<Scored> cell;
    for (auto i : idx) {
      const auto id = pool.entries[i].generation_id;
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw std::invalid_argument("select: no prediction record for generation " + std::to_string(id));
      cell.push_back({id, it->second->entropy, it->second->correct});
    }
    CellVerdict cv;
    for (const auto& s : cell)
      if (s.correct) cv.correct_ids.push_back(s.id);
    std::vector<Scored> ranked;
    if (mode == FilterMode::entropy_plus_reject) {
      for (const auto& s : cell) {
        if (s.correct) ranked.push_back(s);
        else cv.rejected_semantic_ids.push_back(s.id);
      }
      std::stable_sort(ranked.begin(), ranked.end(), by_entropy);
    } else if (mode == FilterMode::entropy_only) {
      ranked = cell;
      std::stable_sort(ranked.begin(), ranked.end(), by_entropy);
    } else if (mode == FilterMode::random) {
      ranked = cell;
      std::sort(ranked.begin(), ranked.end(), [](const Scored& a, const Scored& b) { return a.id < b.id; });
      Rng rng(derive_seed(seed, std::get<0>(key), std::get<1>(key), std::get<2>(key)));
      std::shuffle(ranked.begin(), ranked.end(), rng);
    } else {
      ranked = cell;
    }
    const std::size_t keep = std::min(ranked.size(), static_cast<std::size_t>(n_l));
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      if (r < keep) cv.selected_ids.push_back(ranked[r].id);
      else if (ranked[r].correct) cv.rejected_low_entropy_ids.push_back(ranked[r].id);
      else cv.rejected_semantic_ids.push_back(ranked[r].id);
    }
    v.cells[key] = std::move(cv);
  }
  return v;
}

FilterVerdict select(std::span<const PredictionRecord> records, const SamplePool& pool, int n_l) {
  return filter_ablation_mode(records, pool, n_l, FilterMode::entropy_plus_reject);
}

FilterVerdict keep_all(const SamplePool& pool) {
  FilterVerdict v;
  v.mode = FilterMode::none;
  for (const auto& [key, idx] : pool.cells()) {
    auto& cv = v.cells[key];
    for (auto i : idx) cv.selected_ids.push_back(pool.entries[i].generation_id);
    v.n_l = std::max(v.n_l, static_cast<int>(idx.size()));
  }
  return v;
}

std::string pseudo_domain_name(const data::MultiDomainDataset& original, int domain_i, int domain_j) {
  const auto& names = original.domain_names();
  const auto name = [&](int d) {
    if (d < 0 || d >= static_cast<int>(names.size())) throw std::out_of_range("pseudo_domain_name: domain id out of range");
    return names[static_cast<std::size_t>(d)];
  };
  if (domain_i == domain_j) return "gen_" + name(domain_i);
  return "mix_" + name(domain_i) + "_" + name(domain_j);
}

Augmented assemble_augmented(const data::MultiDomainDataset& original, const FilterVerdict& verdict, const SamplePool& pool,
                             int target_domain) {
  std::unordered_map<std::uint64_t, std::size_t> entry_of;
  for (std::size_t i = 0; i < pool.entries.size(); ++i)
    if (!entry_of.emplace(pool.entries[i].generation_id, i).second)
      throw std::invalid_argument("assemble_augmented: duplicate generation id " + std::to_string(pool.entries[i].generation_id));
  Augmented out{original, {}, {}};
  SampleId next = 0;
  for (auto id : original.sample_ids()) next = std::max(next, id + 1);
  std::set<std::uint64_t> used;
  for (const auto& [key, cv] : verdict.cells) {
    for (auto gid : cv.selected_ids) {
      if (!used.insert(gid).second) throw std::invalid_argument("assemble_augmented: duplicate generation id " + std::to_string(gid));
      const auto it = entry_of.find(gid);
      if (it == entry_of.end()) throw std::invalid_argument("assemble_augmented: verdict does not belong to this pool");
      const auto& e = pool.entries[it->second];
      if (CellKey{e.domain_i, e.domain_j, e.class_id} != key) throw std::invalid_argument("assemble_augmented: verdict cell mismatch");
      if (target_domain >= 0 && (e.domain_i == target_domain || e.domain_j == target_domain))
        throw LeakageError("assemble_augmented: synthetic sample conditioned on the target domain");
      auto [pd, fresh] = out.pseudo_domains.try_emplace({e.domain_i, e.domain_j}, -1);
      if (fresh) pd->second = out.dataset.add_domain(pseudo_domain_name(original, e.domain_i, e.domain_j));
      out.dataset.add(e.payload, e.class_id, pd->second, next);
      out.synthetic_ids.push_back(next);
      ++next;
    }
  }
  out.dataset.validate(false);
  return out;
}

data::SplitPlan augment_split(const data::SplitPlan& split, std::span<const SampleId> synthetic_ids) {
  data::SplitPlan s = split;
  s.train_ids.insert(s.train_ids.end(), synthetic_ids.begin(), synthetic_ids.end());
  return s;
}

trainer::TrainResult train_feedback_classifier(const data::MultiDomainDataset& original, const data::SplitPlan& split,
                                               const trainer::TrainConfig& config, std::uint64_t seed) {
  if (original.n_classes() < 2) throw ConfigError("feedback classifier needs at least two classes");
  config.validate();
  return trainer::train_erm(original, split, config, seed);
}

int default_n_l(const data::MultiDomainDataset& original, const data::SplitPlan& split, double scale) {
  if (!(scale > 0.0)) throw ConfigError("N_L scale must be > 0");
  std::set<int> domains;
  for (auto id : split.train_ids) domains.insert(original.domain_of(id));
  if (domains.empty()) throw std::invalid_argument("default_n_l: empty training set");
  const double per_class = static_cast<double>(split.train_ids.size()) / static_cast<double>(domains.size() * original.n_classes());
  return std::max(1, static_cast<int>(std::lround(scale * per_class)));
}

}  // namespace fds::filter
