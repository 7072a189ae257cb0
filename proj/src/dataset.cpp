#include "fds/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fds::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(PayloadMode mode) { return mode == PayloadMode::point ? "point" : "image"; }

PayloadMode payload_mode_from_string(const std::string& s) {
  if (s == "point") return PayloadMode::point;
  if (s == "image") return PayloadMode::image;
  throw ConfigError("unknown payload mode: " + s);
}

// --- MultiDomainDataset --------------------------------------------------

MultiDomainDataset::MultiDomainDataset(PayloadMode mode, std::vector<int> shape, std::vector<std::string> domain_names,
                                       std::vector<std::string> class_names)
    : mode_(mode), shape_(std::move(shape)), domain_names_(std::move(domain_names)), class_names_(std::move(class_names)) {
  require(!shape_.empty(), "payload shape must be non-empty");
  dim_ = 1;
  for (int s : shape_) {
    require(s > 0, "payload shape entries must be positive");
    dim_ *= s;
  }
}

void MultiDomainDataset::add(std::span<const float> payload, int class_id, int domain_id, SampleId id) {
  if (static_cast<int>(payload.size()) != dim_) throw std::invalid_argument("payload shape mismatch");
  if (class_id < 0 || class_id >= n_classes()) throw std::invalid_argument("class_id out of range");
  if (domain_id < 0 || domain_id >= n_domains()) throw std::invalid_argument("domain_id out of range");
  if (index_.count(id)) throw std::invalid_argument("duplicate sample_id " + std::to_string(id));
  index_.emplace(id, ids_.size());
  payloads_.insert(payloads_.end(), payload.begin(), payload.end());
  classes_.push_back(class_id);
  domains_.push_back(domain_id);
  ids_.push_back(id);
}

std::size_t MultiDomainDataset::index_of(SampleId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("unknown sample_id " + std::to_string(id));
  return it->second;
}

std::span<const float> MultiDomainDataset::payload(std::size_t index) const {
  if (observer_) observer_(domains_[index], ids_[index]);
  return {payloads_.data() + index * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
}

Sample MultiDomainDataset::sample(std::size_t index) const {
  const auto p = payload(index);
  return Sample{{p.begin(), p.end()}, classes_[index], domains_[index], ids_[index]};
}

nn::Mat<float> MultiDomainDataset::gather(std::span<const SampleId> ids) const {
  nn::Mat<float> out(static_cast<Eigen::Index>(ids.size()), dim_);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto p = payload(index_of(ids[r]));
    std::copy(p.begin(), p.end(), out.data() + r * static_cast<std::size_t>(dim_));
  }
  return out;
}

std::vector<SampleId> MultiDomainDataset::ids_in_domain(int domain) const {
  std::vector<SampleId> out;
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (domains_[i] == domain) out.push_back(ids_[i]);
  return out;
}

std::size_t MultiDomainDataset::cell_count(int domain, int class_id) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (domains_[i] == domain && classes_[i] == class_id) ++n;
  return n;
}

int MultiDomainDataset::add_domain(const std::string& name) {
  domain_names_.push_back(name);
  return n_domains() - 1;
}

MultiDomainDataset MultiDomainDataset::without_domain(int domain) const {
  MultiDomainDataset out(mode_, shape_, domain_names_, class_names_);
  out.observer_ = observer_;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (domains_[i] == domain) continue;
    out.add({payloads_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)}, classes_[i],
            domains_[i], ids_[i]);
  }
  return out;
}

void MultiDomainDataset::validate(bool require_all_cells) const {
  if (n_classes() < 1 || n_domains() < 1) throw std::invalid_argument("dataset needs at least one domain and class");
  if (mode_ == PayloadMode::image) {
    if (shape_.size() != 3) throw std::invalid_argument("image payloads must be CxHxW");
    for (float v : payloads_)
      if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("image payload outside [0,1]");
  }
  for (float v : payloads_)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite payload value");
  if (require_all_cells) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_domains() * n_classes()), 0);
    for (std::size_t i = 0; i < ids_.size(); ++i) ++counts[domains_[i] * n_classes() + classes_[i]];
    for (int d = 0; d < n_domains(); ++d)
      for (int k = 0; k < n_classes(); ++k)
        if (counts[d * n_classes() + k] == 0)
          throw std::invalid_argument("empty cell: domain " + domain_names_[d] + ", class " + class_names_[k]);
  }
}

std::string MultiDomainDataset::content_hash() const {
  std::ostringstream labels;
  for (std::size_t i = 0; i < ids_.size(); ++i) labels << ids_[i] << ',' << classes_[i] << ',' << domains_[i] << '\n';
  const auto pay = encode_f32_le(payloads_);
  return sha256_hex(sha256_hex(pay) + sha256_hex(labels.str()));
}

void MultiDomainDataset::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json meta{{"version", kDatasetFormat},
            {"n_domains", n_domains()},
            {"n_classes", n_classes()},
            {"domain_names", domain_names_},
            {"class_names", class_names_},
            {"mode", to_string(mode_)},
            {"shape", shape_},
            {"count", size()}};
  write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
  write_file_atomic(dir / "payloads.bin", encode_f32_le(payloads_));
  std::ostringstream csv;
  csv << "sample_id,class_id,domain_id\n";
  for (std::size_t i = 0; i < ids_.size(); ++i) csv << ids_[i] << ',' << classes_[i] << ',' << domains_[i] << '\n';
  write_file_atomic(dir / "labels.csv", csv.str());
}

MultiDomainDataset MultiDomainDataset::load(const fs::path& dir) {
  const auto meta = json::parse(read_text_file(dir / "meta.json"));
  if (meta.at("version").get<std::string>() != kDatasetFormat)
    throw IntegrityError("unsupported dataset version in " + (dir / "meta.json").string());
  MultiDomainDataset ds(payload_mode_from_string(meta.at("mode").get<std::string>()), meta.at("shape").get<std::vector<int>>(),
                        meta.at("domain_names").get<std::vector<std::string>>(),
                        meta.at("class_names").get<std::vector<std::string>>());
  const auto payloads = decode_f32_le(read_binary_file(dir / "payloads.bin"));
  std::istringstream csv(read_text_file(dir / "labels.csv"));
  std::string line;
  std::getline(csv, line);
  std::size_t row = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    std::getline(ls, a, ',');
    std::getline(ls, b, ',');
    std::getline(ls, c, ',');
    const std::size_t off = row * static_cast<std::size_t>(ds.dim_);
    if (off + ds.dim_ > payloads.size()) throw IntegrityError("payloads.bin shorter than labels.csv in " + dir.string());
    ds.add({payloads.data() + off, static_cast<std::size_t>(ds.dim_)}, std::stoi(b), std::stoi(c), std::stoull(a));
    ++row;
  }
  if (row * static_cast<std::size_t>(ds.dim_) != payloads.size())
    throw IntegrityError("payloads.bin size does not match labels.csv in " + dir.string());
  if (row != meta.at("count").get<std::size_t>()) throw IntegrityError("sample count mismatch in " + dir.string());
  return ds;
}

// --- Gaussian domains ----------------------------------------------------

std::array<double, 2> DomainGeometry::mean(int domain, int class_id, int n_classes) const {
  if (!explicit_means.empty()) return explicit_means.at(static_cast<std::size_t>(domain * n_classes + class_id));
  const double a = 2.0 * std::numbers::pi * class_id / n_classes + domain_rotation * domain;
  return {class_radius * std::cos(a) + domain_shift[0] * domain, class_radius * std::sin(a) + domain_shift[1] * domain};
}

namespace {

std::vector<std::string> numbered(const std::string& prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

}  // namespace

MultiDomainDataset make_gaussian_domains(int n_domains, int n_classes, int per_cell_count, const DomainGeometry& geometry,
                                         std::uint64_t seed) {
  require(n_domains >= 2, "make_gaussian_domains: n_domains must be >= 2");
  require(n_classes >= 2, "make_gaussian_domains: n_classes must be >= 2");
  require(per_cell_count >= 1, "make_gaussian_domains: per_cell_count must be >= 1");
  require(geometry.sigma > 0.0, "make_gaussian_domains: sigma must be positive");
  if (!geometry.explicit_means.empty())
    require(geometry.explicit_means.size() == static_cast<std::size_t>(n_domains * n_classes),
            "make_gaussian_domains: explicit_means needs n_domains * n_classes entries");

  std::vector<std::array<double, 2>> means;
  for (int d = 0; d < n_domains; ++d)
    for (int k = 0; k < n_classes; ++k) means.push_back(geometry.mean(d, k, n_classes));
  for (std::size_t a = 0; a < means.size(); ++a)
    for (std::size_t b = a + 1; b < means.size(); ++b)
      if (means[a] == means[b]) throw std::invalid_argument("make_gaussian_domains: two cell means coincide");

  MultiDomainDataset ds(PayloadMode::point, {2}, numbered("domain", n_domains), numbered("class", n_classes));
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SampleId next = 0;
  for (int d = 0; d < n_domains; ++d) {
    for (int k = 0; k < n_classes; ++k) {
      const auto mu = means[static_cast<std::size_t>(d * n_classes + k)];
      for (int r = 0; r < per_cell_count; ++r) {
        const float p[2] = {static_cast<float>(mu[0] + geometry.sigma * normal(rng)),
                            static_cast<float>(mu[1] + geometry.sigma * normal(rng))};
        ds.add(p, k, d, next++);
      }
    }
  }
  return ds;
}

MultiDomainDataset make_gaussian_cell(std::array<double, 2> mean, double sigma, int count, std::uint64_t seed) {
  require(count >= 1 && sigma > 0.0, "make_gaussian_cell: invalid arguments");
  MultiDomainDataset ds(PayloadMode::point, {2}, {"domain0"}, {"class0"});
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int r = 0; r < count; ++r) {
    const float p[2] = {static_cast<float>(mean[0] + sigma * normal(rng)), static_cast<float>(mean[1] + sigma * normal(rng))};
    ds.add(p, 0, 0, static_cast<SampleId>(r));
  }
  return ds;
}

// --- styled shapes -------------------------------------------------------

const std::vector<std::string>& shape_class_vocabulary() {
  static const std::vector<std::string> v{"circle", "square", "triangle", "cross", "diamond"};
  return v;
}

const std::vector<std::string>& style_vocabulary() {
  static const std::vector<std::string> v{"filled", "outline", "inverted", "textured", "thick", "faint"};
  return v;
}

namespace {

double box_sdf(double x, double y, double bx, double by) {
  const double dx = std::abs(x) - bx, dy = std::abs(y) - by;
  const double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
  return std::hypot(ox, oy) + std::min(std::max(dx, dy), 0.0);
}

double triangle_sdf(double x, double y) {
  // Equilateral triangle, apex up (image y grows downward).
  const double k = std::sqrt(3.0);
  y = -y;
  x = std::abs(x) - 1.0;
  y = y + 1.0 / k;
  if (x + k * y > 0.0) {
    const double nx = (x - k * y) / 2.0, ny = (-k * x - y) / 2.0;
    x = nx;
    y = ny;
  }
  x -= std::clamp(x, -2.0, 0.0);
  return -std::hypot(x, y) * (y < 0 ? -1.0 : 1.0);
}

// Signed distance in unit shape coordinates; negative inside.
double shape_sdf(int cls, double x, double y) {
  switch (cls) {
    case 0: return std::hypot(x, y) - 1.0;
    case 1: return box_sdf(x, y, 0.82, 0.82);
    case 2: return triangle_sdf(x * 0.95, y * 0.95 - 0.15);
    case 3: return std::min(box_sdf(x, y, 1.0, 0.34), box_sdf(x, y, 0.34, 1.0));
    case 4: return (std::abs(x) + std::abs(y) - 1.05) / std::sqrt(2.0);
    default: throw std::invalid_argument("unknown shape class");
  }
}

struct StyleSpec {
  double fg = 0.8, bg = 0.2, fg_alt = 0.8;
  bool outline = false, striped = false;
  double stroke = 0.0;  // stroke width as a fraction of the shape radius
};

StyleSpec style_spec(const std::string& name) {
  if (name == "filled") return {};
  if (name == "outline") return {0.8, 0.2, 0.8, true, false, 0.16};
  if (name == "inverted") return {0.2, 0.8, 0.2, false, false, 0.0};
  if (name == "textured") return {0.8, 0.2, 0.45, false, true, 0.0};
  if (name == "thick") return {0.8, 0.2, 0.8, true, false, 0.45};
  if (name == "faint") return {0.45, 0.2, 0.45, false, false, 0.0};
  throw std::invalid_argument("unknown style: " + name);
}

}  // namespace

MultiDomainDataset make_styled_shapes(int n_classes, const std::vector<std::string>& styles, int per_cell_count, int image_size,
                                      std::uint64_t seed, const ShapesOptions& options) {
  require(image_size >= 16, "make_styled_shapes: image_size must be >= 16");
  require(n_classes >= 2 && n_classes <= static_cast<int>(shape_class_vocabulary().size()),
          "make_styled_shapes: n_classes outside the shape vocabulary");
  require(styles.size() >= 1, "make_styled_shapes: need at least one style");
  require(per_cell_count >= 1, "make_styled_shapes: per_cell_count must be >= 1");
  require(options.channels == 1 || options.channels == 3, "make_styled_shapes: channels must be 1 or 3");
  std::vector<StyleSpec> specs;
  for (const auto& s : styles) specs.push_back(style_spec(s));

  const auto& vocab = shape_class_vocabulary();
  MultiDomainDataset ds(PayloadMode::image, {options.channels, image_size, image_size}, styles,
                        std::vector<std::string>(vocab.begin(), vocab.begin() + n_classes));
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int S = image_size;
  std::vector<float> img(static_cast<std::size_t>(options.channels * S * S));
  SampleId next = 0;
  for (std::size_t d = 0; d < specs.size(); ++d) {
    const auto& st = specs[d];
    for (int k = 0; k < n_classes; ++k) {
      for (int r = 0; r < per_cell_count; ++r) {
        const double radius = (0.26 + 0.10 * unit(rng)) * S;
        const double cx = (0.5 + 0.12 * (unit(rng) - 0.5)) * S;
        const double cy = (0.5 + 0.12 * (unit(rng) - 0.5)) * S;
        const double theta = k == 0 ? 0.0 : 0.5 * (unit(rng) - 0.5);
        const double jf = 0.08 * (unit(rng) - 0.5), jb = 0.08 * (unit(rng) - 0.5);
        const double fg = st.fg + jf, fg_alt = st.fg_alt + jf, bg = st.bg + jb;
        const double ct = std::cos(theta), sn = std::sin(theta);
        for (int y = 0; y < S; ++y) {
          for (int x = 0; x < S; ++x) {
            const double px = x + 0.5 - cx, py = y + 0.5 - cy;
            const double ux = (ct * px + sn * py) / radius, uy = (-sn * px + ct * py) / radius;
            const double dist = shape_sdf(k, ux, uy) * radius;  // pixels
            double cov;
            if (st.outline) {
              const double half = std::max(0.75, 0.5 * st.stroke * radius);
              cov = std::clamp(0.5 - (std::abs(dist) - half), 0.0, 1.0);
            } else {
              cov = std::clamp(0.5 - dist, 0.0, 1.0);
            }
            double ink = fg;
            if (st.striped && ((x + y) / 2) % 2 == 1) ink = fg_alt;
            double v = bg + (ink - bg) * cov + options.pixel_noise * normal(rng);
            v = std::clamp(v, 0.0, 1.0);
            for (int c = 0; c < options.channels; ++c) img[static_cast<std::size_t>((c * S + y) * S + x)] = static_cast<float>(v);
          }
        }
        ds.add(img, k, static_cast<int>(d), next++);
      }
    }
  }
  return ds;
}

// --- directory ingestion -------------------------------------------------

namespace {

std::vector<std::string> sorted_subdirs(const fs::path& p) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_directory() && e.path().filename().string().front() != '.') out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> sorted_files(const fs::path& p) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_regular_file() && e.path().filename().string().front() != '.') out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

MultiDomainDataset ingest_image_folder(const fs::path& root, int image_size) {
  require(image_size >= 1, "ingest_image_folder: image_size must be positive");
  if (!fs::is_directory(root)) throw std::invalid_argument("ingest_image_folder: not a directory: " + root.string());
  const auto domains = sorted_subdirs(root);
  if (domains.size() < 2) throw std::invalid_argument("ingest_image_folder: need at least 2 domain directories");
  const auto classes = sorted_subdirs(root / domains.front());
  if (classes.empty()) throw std::invalid_argument("ingest_image_folder: no class directories in " + domains.front());
  for (const auto& d : domains)
    if (sorted_subdirs(root / d) != classes)
      throw std::invalid_argument("ingest_image_folder: class set of domain '" + d + "' differs from '" + domains.front() + "'");

  MultiDomainDataset ds(PayloadMode::image, {3, image_size, image_size}, domains, classes);
  const int S = image_size;
  std::vector<float> chw(static_cast<std::size_t>(3 * S * S));
  SampleId next = 0;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    for (std::size_t k = 0; k < classes.size(); ++k) {
      for (const auto& file : sorted_files(root / domains[d] / classes[k])) {
        cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
        if (bgr.empty()) throw std::runtime_error("ingest_image_folder: unreadable image: " + file.string());
        cv::Mat resized;
        cv::resize(bgr, resized, cv::Size(S, S), 0, 0, cv::INTER_LINEAR);
        for (int y = 0; y < S; ++y) {
          const auto* row = resized.ptr<cv::Vec3b>(y);
          for (int x = 0; x < S; ++x)
            for (int c = 0; c < 3; ++c)
              chw[static_cast<std::size_t>((c * S + y) * S + x)] = static_cast<float>(row[x][2 - c]) / 255.0f;
        }
        ds.add(chw, static_cast<int>(k), static_cast<int>(d), next++);
      }
    }
  }
  ds.validate();
  return ds;
}

// --- splits --------------------------------------------------------------

void SplitPlan::check_disjoint() const {
  std::set<SampleId> seen;
  for (const auto* ids : {&train_ids, &val_ids, &test_ids})
    for (SampleId id : *ids)
      if (!seen.insert(id).second) throw LeakageError("split sets overlap at sample " + std::to_string(id));
}

json SplitPlan::to_json() const {
  return json{{"target_domain", target_domain}, {"val_fraction", val_fraction}, {"mode", mode},
              {"train_ids", train_ids},         {"val_ids", val_ids},           {"test_ids", test_ids}};
}

SplitPlan SplitPlan::from_json(const json& j) {
  SplitPlan p;
  p.target_domain = j.at("target_domain").get<int>();
  p.val_fraction = j.at("val_fraction").get<double>();
  p.mode = j.value("mode", std::string("standard"));
  p.train_ids = j.at("train_ids").get<std::vector<SampleId>>();
  p.val_ids = j.at("val_ids").get<std::vector<SampleId>>();
  p.test_ids = j.at("test_ids").get<std::vector<SampleId>>();
  return p;
}

namespace {

// Per-class (or per-cell) shuffled id buckets over the chosen domains.
std::vector<std::vector<SampleId>> cells(const MultiDomainDataset& ds, const std::vector<int>& domains) {
  std::vector<std::vector<SampleId>> out;
  for (int d : domains) {
    for (int k = 0; k < ds.n_classes(); ++k) {
      std::vector<SampleId> c;
      for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.domain_id(i) == d && ds.class_id(i) == k) c.push_back(ds.sample_id(i));
      out.push_back(std::move(c));
    }
  }
  return out;
}

// Moves round(fraction * |cell|) shuffled ids of every cell into `picked`.
void stratified_take(std::vector<std::vector<SampleId>>& buckets, double fraction, std::uint64_t seed,
                     std::vector<SampleId>& picked, std::vector<SampleId>& rest) {
  for (std::size_t c = 0; c < buckets.size(); ++c) {
    auto& b = buckets[c];
    Rng rng(derive_seed(seed, c));
    std::shuffle(b.begin(), b.end(), rng);
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(b.size())));
    picked.insert(picked.end(), b.begin(), b.begin() + static_cast<std::ptrdiff_t>(n));
    rest.insert(rest.end(), b.begin() + static_cast<std::ptrdiff_t>(n), b.end());
  }
}

std::vector<int> other_domains(const MultiDomainDataset& ds, int target) {
  std::vector<int> out;
  for (int d = 0; d < ds.n_domains(); ++d)
    if (d != target) out.push_back(d);
  return out;
}

void finish(SplitPlan& p) {
  std::sort(p.train_ids.begin(), p.train_ids.end());
  std::sort(p.val_ids.begin(), p.val_ids.end());
  std::sort(p.test_ids.begin(), p.test_ids.end());
  p.check_disjoint();
}

void check_split_args(const MultiDomainDataset& ds, int target, double fraction) {
  if (ds.n_domains() < 2) throw std::invalid_argument("split requires at least two domains");
  if (target < 0 || target >= ds.n_domains()) throw std::invalid_argument("target domain out of range");
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("fraction must lie in (0,1)");
}

}  // namespace

SplitPlan leave_one_out_split(const MultiDomainDataset& ds, int target, double val_fraction, std::uint64_t seed) {
  check_split_args(ds, target, val_fraction);
  SplitPlan p;
  p.target_domain = target;
  p.val_fraction = val_fraction;
  auto buckets = cells(ds, other_domains(ds, target));
  stratified_take(buckets, val_fraction, seed, p.val_ids, p.train_ids);
  p.test_ids = ds.ids_in_domain(target);
  finish(p);
  return p;
}

SplitPlan oracle_split(const MultiDomainDataset& ds, int target, double val_fraction, std::uint64_t seed) {
  check_split_args(ds, target, val_fraction);
  SplitPlan p;
  p.target_domain = target;
  p.val_fraction = val_fraction;
  p.mode = "oracle";
  for (int d : other_domains(ds, target)) {
    const auto ids = ds.ids_in_domain(d);
    p.train_ids.insert(p.train_ids.end(), ids.begin(), ids.end());
  }
  auto buckets = cells(ds, {target});
  stratified_take(buckets, val_fraction, seed, p.val_ids, p.test_ids);
  finish(p);
  return p;
}

SplitPlan in_domain_split(const MultiDomainDataset& ds, int excluded, double test_fraction, double val_fraction,
                          std::uint64_t seed) {
  check_split_args(ds, excluded, test_fraction);
  check_split_args(ds, excluded, val_fraction);
  SplitPlan p;
  p.target_domain = excluded;
  p.val_fraction = val_fraction;
  p.mode = "in_domain";
  auto buckets = cells(ds, other_domains(ds, excluded));
  for (std::size_t c = 0; c < buckets.size(); ++c) {
    auto& b = buckets[c];
    Rng rng(derive_seed(seed, c));
    std::shuffle(b.begin(), b.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(b.size())));
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(b.size() - n_test)));
    p.test_ids.insert(p.test_ids.end(), b.begin(), b.begin() + static_cast<std::ptrdiff_t>(n_test));
    p.val_ids.insert(p.val_ids.end(), b.begin() + static_cast<std::ptrdiff_t>(n_test),
                     b.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    p.train_ids.insert(p.train_ids.end(), b.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), b.end());
  }
  finish(p);
  return p;
}

void assert_no_domain(const MultiDomainDataset& ds, std::span<const SampleId> ids, int target, const std::string& context) {
  for (SampleId id : ids) {
    if (ds.domain_of(id) == target)
      throw LeakageError(context + ": target-domain sample " + std::to_string(id) + " reached the training stream");
  }
}

}  // namespace fds::data
