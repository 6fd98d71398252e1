#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "heightbins/errors.hpp"
#include "heightbins/tensor.hpp"

namespace heightbins {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered collection of trainable leaves, addressed by dotted names.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return items_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<NamedTensor>& items() const { return items_; }
  std::vector<NamedTensor>& items() { return items_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor> items_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   HEIGHTBINS-CHECKPOINT 1\n
//   tensors <count>\n
//   <name> <rank> <extent>... <byte offset>\n     (one line per tensor)
//   end\n
//   <payload: little-endian IEEE-754 float64 values>
//
// Offsets are relative to the first payload byte.

namespace detail {
inline void put_f64_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}
inline double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline constexpr const char* kCheckpointMagic = "HEIGHTBINS-CHECKPOINT 1";

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::ostringstream header;
  header << kCheckpointMagic << '\n' << "tensors " << tensors.size() << '\n';
  std::string payload;
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
      throw ContractViolation("checkpoint: tensor name must be non-empty without whitespace: '" + name + "'");
    }
    header << name << ' ' << t.dim();
    for (auto e : t.shape()) header << ' ' << e;
    header << ' ' << payload.size() << '\n';
    for (double v : t.data()) detail::put_f64_le(payload, v);
  }
  header << "end\n";
  return header.str() + payload;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ParseError("checkpoint: unterminated header line", pos);
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kCheckpointMagic) throw ParseError("checkpoint: bad magic", 0);
  std::size_t count = 0;
  {
    const std::size_t at = pos;
    std::istringstream ls(next_line());
    std::string key;
    if (!(ls >> key >> count) || key != "tensors") throw ParseError("checkpoint: expected 'tensors <count>'", at);
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = pos;
    std::istringstream ls(next_line());
    Entry e;
    std::size_t rank = 0;
    if (!(ls >> e.name >> rank)) throw ParseError("checkpoint: malformed tensor entry", at);
    e.shape.resize(rank);
    for (auto& d : e.shape)
      if (!(ls >> d)) throw ParseError("checkpoint: malformed shape for " + e.name, at);
    if (!(ls >> e.offset)) throw ParseError("checkpoint: missing offset for " + e.name, at);
    entries.push_back(std::move(e));
  }
  if (next_line() != "end") throw ParseError("checkpoint: expected 'end'", pos);
  const std::size_t payload_start = pos;
  std::vector<NamedTensor> out;
  for (const auto& e : entries) {
    const std::size_t n = numel_of(e.shape);
    const std::size_t begin = payload_start + e.offset;
    if (begin + 8 * n > bytes.size()) throw ParseError("checkpoint: payload truncated for " + e.name, bytes.size());
    std::vector<double> values(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + begin);
    for (std::size_t i = 0; i < n; ++i) values[i] = detail::get_f64_le(p + 8 * i);
    out.push_back({e.name, Tensor::from(e.shape, std::move(values))});
  }
  return out;
}

inline void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  const std::string bytes = encode_checkpoint(store.items());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

/// Copies checkpoint values into an existing store; names and shapes must
/// match exactly.
inline void load_checkpoint(ParameterStore& store, const std::string& path) {
  const auto tensors = read_checkpoint(path);
  if (tensors.size() != store.items().size()) {
    throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                    std::to_string(store.items().size()));
  }
  for (const auto& [name, t] : tensors) {
    if (!store.contains(name)) throw DataError("checkpoint tensor not in model: " + name);
    Tensor dst = store.get(name);
    if (dst.shape() != t.shape()) {
      throw DataError("checkpoint shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " +
                      shape_str(dst.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
  }
}

}  // namespace heightbins
