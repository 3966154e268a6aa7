#include "pointlama/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace pointlama {

namespace {

template <class U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw std::runtime_error("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string out = "PLMA";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, kDtypeFloat64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) put<std::uint64_t>(out, d);
    for (double v : e.value.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(4) != "PLMA") throw std::runtime_error("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != kDtypeFloat64)
      throw std::runtime_error("checkpoint entry '" + e.name + "': unsupported dtype " + std::to_string(dtype));
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    DenseArray value(shape);
    for (double& v : value.data()) v = std::bit_cast<double>(r.get<std::uint64_t>());
    e.value = std::move(value);
    out.push_back(std::move(e));
  }
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes");
  return out;
}

std::vector<CheckpointEntry> snapshot(const ParamStore& store) {
  std::vector<CheckpointEntry> out;
  out.reserve(store.size());
  for (const auto& e : store.entries()) out.push_back({e.name, e.value.value()});
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  const std::string bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  save_checkpoint(path, snapshot(store));
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::size_t load_into(ParamStore& store, const std::vector<CheckpointEntry>& entries,
                      const std::string& prefix) {
  std::unordered_map<std::string, const DenseArray*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e.value;
  std::size_t loaded = 0;
  for (const auto& p : store.entries()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw CheckpointMismatch("checkpoint mismatch at '" + p.name + "': missing from checkpoint");
    if (it->second->shape() != p.value.shape())
      throw CheckpointMismatch("checkpoint mismatch at '" + p.name + "': checkpoint shape " +
                               to_string(it->second->shape()) + ", model shape " + to_string(p.value.shape()));
  }
  for (const auto& p : store.entries()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    Value v = p.value;
    v.mutable_value() = *by_name.at(p.name);
    ++loaded;
  }
  return loaded;
}

}  // namespace pointlama
