#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spider/core/error.hpp"
#include "spider/numerics/optimizer.hpp"
#include "spider/numerics/parameters.hpp"

namespace spider::encoder {

// Binary container, little-endian:
//   "SPIDERCK" | u32 version | u64 header length | header JSON
//   u64 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols, f32[rows*cols]
//   u8 has optimizer | [f64 lr, beta1, beta2, eps, weight_decay | u64 step |
//                       u64 count | per entry: u32 name length, name, u64 n, f32[n] first, f32[n] second]
// The header carries the encoder config, vocabulary and training metadata.
inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'I', 'D', 'E', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  nn::ParameterStore<float> params;
  bool has_optimizer = false;
  nn::OptimizerState<float> optimizer;
};

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

inline void put_floats(std::string& out, std::span<const float> values) {
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, data_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  std::vector<float> get_floats(std::size_t n) {
    if (n > (data_.size() - pos_) / sizeof(float)) throw DataError("checkpoint truncated");
    std::vector<float> v(n);
    std::memcpy(v.data(), data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return v;
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = ck.header.dump();
  detail::put<std::uint64_t>(out, header.size());
  out += header;
  detail::put<std::uint64_t>(out, ck.params.count());
  for (const auto& [name, t] : ck.params) {
    detail::put_string(out, name);
    detail::put<std::uint64_t>(out, t.rows());
    detail::put<std::uint64_t>(out, t.cols());
    detail::put_floats(out, t.data());
  }
  detail::put<std::uint8_t>(out, ck.has_optimizer ? 1 : 0);
  if (ck.has_optimizer) {
    const auto& h = ck.optimizer.hyper;
    for (double v : {h.lr, h.beta1, h.beta2, h.eps, h.weight_decay}) detail::put<double>(out, v);
    detail::put<std::uint64_t>(out, ck.optimizer.step);
    detail::put<std::uint64_t>(out, ck.optimizer.moments.size());
    for (const auto& [name, m] : ck.optimizer.moments) {
      detail::put_string(out, name);
      detail::put<std::uint64_t>(out, m.first.size());
      detail::put_floats(out, m.first);
      detail::put_floats(out, m.second);
    }
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.get_bytes(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto header_len = r.get<std::uint64_t>();
  try {
    ck.header = nlohmann::json::parse(r.get_bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    ck.params.add(name, rows, cols, r.get_floats(rows * cols));
  }
  ck.has_optimizer = r.get<std::uint8_t>() != 0;
  if (ck.has_optimizer) {
    auto& h = ck.optimizer.hyper;
    h.lr = r.get<double>();
    h.beta1 = r.get<double>();
    h.beta2 = r.get<double>();
    h.eps = r.get<double>();
    h.weight_decay = r.get<double>();
    ck.optimizer.step = r.get<std::uint64_t>();
    const auto entries = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < entries; ++i) {
      std::string name = r.get_string();
      const auto n = r.get<std::uint64_t>();
      auto& m = ck.optimizer.moments[name];
      m.first = r.get_floats(n);
      m.second = r.get_floats(n);
    }
  }
  if (!r.at_end()) throw DataError("trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace spider::encoder
