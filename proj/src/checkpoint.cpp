#include "fds/checkpoint.hpp"

#include <cstring>

#include "fds/common.hpp"

namespace fds {

namespace {

constexpr char kMagic[8] = {'F', 'D', 'S', 'C', 'K', 'P', 'T', '\0'};

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::byte>((v >> (8 * b)) & 0xff));
}

void put_bytes(std::vector<std::byte>& out, std::string_view s) {
  put_u64(out, s.size());
  for (char c : s) out.push_back(static_cast<std::byte>(c));
}

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= std::to_integer<std::uint64_t>(bytes_[pos_ + b]) << (8 * b);
    pos_ += 8;
    return v;
  }

  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::span<const std::byte> raw(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IntegrityError("checkpoint truncated");
  }
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::vector<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, v] : tensors)
    if (n == name) return v;
  throw Error("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, v] : tensors)
    if (n == name) return true;
  return false;
}

std::vector<std::byte> Checkpoint::encode() const {
  std::vector<std::byte> out;
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_bytes(out, kCheckpointFormat);
  put_bytes(out, header.dump());
  put_u64(out, tensors.size());
  for (const auto& [name, values] : tensors) {
    put_bytes(out, name);
    put_u64(out, values.size());
    const auto enc = encode_f32_le(values);
    out.insert(out.end(), enc.begin(), enc.end());
  }
  return out;
}

Checkpoint Checkpoint::decode(std::span<const std::byte> bytes) {
  Reader r(bytes);
  const auto magic = r.raw(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) throw IntegrityError("not an fds checkpoint");
  const auto tag = r.str();
  if (tag != kCheckpointFormat) throw IntegrityError("unsupported checkpoint format: " + tag);
  Checkpoint ck;
  ck.header = nlohmann::json::parse(r.str());
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = r.str();
    const auto n = r.u64();
    ck.tensors.emplace_back(std::move(name), decode_f32_le(r.raw(n * 4)));
  }
  if (!r.done()) throw IntegrityError("trailing bytes in checkpoint");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_atomic(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(read_binary_file(path)); }

}  // namespace fds
