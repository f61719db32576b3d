#pragma once

// Versioned binary artifacts. Layout (all integers little-endian):
//   "MS3MPACK" | u32 version | u64 header length | JSON header |
//   u32 tensor count | per tensor: u32 name length, name, u32 rank,
//   u64 dims[rank], f64 payload (row-major) | 32-byte SHA-256 of all
//   preceding bytes.

#include "ms3m/common.hpp"
#include "ms3m/data.hpp"
#include "ms3m/model.hpp"
#include "ms3m/train.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace ms3m {

using json = nlohmann::json;

inline constexpr char kMagic[8] = {'M', 'S', '3', 'M', 'P', 'A', 'C', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

struct Container {
  json header;
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw DataError("artifact", "missing tensor '" + name + "'");
  }
};

inline std::array<unsigned char, 32> sha256(const void* data, std::size_t n) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(data, n, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw std::runtime_error("sha256: digest failed");
  return out;
}

inline std::string hex(std::span<const unsigned char> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned char b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

namespace detail {

template <class U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= U(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw DataError("artifact", "truncated file");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const Container& c) {
  std::string buf(kMagic, kMagic + 8);
  detail::put_le<std::uint32_t>(buf, kFormatVersion);
  const std::string header = c.header.dump();
  detail::put_le<std::uint64_t>(buf, header.size());
  buf += header;
  detail::put_le<std::uint32_t>(buf, std::uint32_t(c.tensors.size()));
  for (const auto& t : c.tensors) {
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size())
      throw ShapeError("encode: tensor '" + t.name + "' dims do not match payload");
    detail::put_le<std::uint32_t>(buf, std::uint32_t(t.name.size()));
    buf += t.name;
    detail::put_le<std::uint32_t>(buf, std::uint32_t(t.dims.size()));
    for (auto d : t.dims) detail::put_le<std::uint64_t>(buf, d);
    for (double v : t.data) detail::put_le<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
  }
  const auto digest = sha256(buf.data(), buf.size());
  buf.append(reinterpret_cast<const char*>(digest.data()), digest.size());
  return buf;
}

inline Container decode_container(const std::string& buf) {
  if (buf.size() < 8 + 4 + 8 + 4 + 32) throw DataError("artifact", "file too short");
  if (std::memcmp(buf.data(), kMagic, 8) != 0) throw DataError("artifact", "bad magic");
  const std::size_t body = buf.size() - 32;
  const auto digest = sha256(buf.data(), body);
  if (std::memcmp(digest.data(), buf.data() + body, 32) != 0)
    throw DataError("artifact", "content digest mismatch");
  detail::Reader rd(buf, body);
  rd.bytes(8);
  const auto version = rd.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw DataError("artifact", "unsupported format version " + std::to_string(version));
  Container c;
  const auto hlen = rd.get<std::uint64_t>();
  if (hlen > body) throw DataError("artifact", "truncated file");
  try {
    c.header = json::parse(rd.bytes(std::size_t(hlen)));
  } catch (const json::exception& e) {
    throw DataError("artifact", std::string("bad header: ") + e.what());
  }
  const auto count = rd.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = rd.bytes(rd.get<std::uint32_t>());
    const auto rank = rd.get<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(rd.get<std::uint64_t>());
      n *= t.dims.back();
    }
    if (n > (body - rd.pos()) / 8) throw DataError("artifact", "truncated file");
    t.data.resize(std::size_t(n));
    for (auto& v : t.data) v = std::bit_cast<double>(rd.get<std::uint64_t>());
    c.tensors.push_back(std::move(t));
  }
  if (rd.pos() != body) throw DataError("artifact", "trailing bytes before digest");
  return c;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("io", "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("io", "cannot write '" + path + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw DataError("io", "write failed for '" + path + "'");
}

// ---------------------------------------------------------------- tensors

inline NamedTensor to_tensor(std::string name, const Mat& m) {
  return {std::move(name), {std::uint64_t(m.rows()), std::uint64_t(m.cols())},
          std::vector<double>(m.data(), m.data() + m.size())};
}

inline NamedTensor to_tensor(std::string name, const Vec& v) {
  return {std::move(name), {std::uint64_t(v.size())},
          std::vector<double>(v.data(), v.data() + v.size())};
}

inline Mat mat_from(const NamedTensor& t) {
  if (t.dims.size() != 2) throw DataError("artifact", "tensor '" + t.name + "' is not rank 2");
  Mat m(Eigen::Index(t.dims[0]), Eigen::Index(t.dims[1]));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

inline Vec vec_from(const NamedTensor& t) {
  if (t.dims.size() != 1) throw DataError("artifact", "tensor '" + t.name + "' is not rank 1");
  return Eigen::Map<const Vec>(t.data.data(), Eigen::Index(t.data.size()));
}

// ---------------------------------------------------------------- configs

inline json to_json(const ModelConfig& c) {
  return {{"n_features", c.n_features}, {"window", c.window},
          {"output_dim", c.output_dim}, {"width", c.width},
          {"n_state", c.n_state},       {"n_components", c.n_components},
          {"n_layers", c.n_layers},     {"kernel_len", c.kernel_len},
          {"se_reduction", c.se_reduction}, {"glu_ratio", c.glu_ratio},
          {"dropout", c.dropout},       {"ln_epsilon", c.ln_epsilon},
          {"squeeze", to_string(c.squeeze)}};
}

inline json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"tol", c.tol},
          {"plateau_factor", c.plateau_factor},
          {"plateau_window", c.plateau_window},
          {"optimizer", to_string(c.optimizer)},
          {"seed", c.seed}};
}

namespace detail {

template <class T>
void take(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ShapeError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Overlays the keys present in `j` onto `c`.
inline void from_json(const json& j, ModelConfig& c) {
  detail::take(j, "n_features", c.n_features);
  detail::take(j, "window", c.window);
  detail::take(j, "output_dim", c.output_dim);
  detail::take(j, "width", c.width);
  detail::take(j, "n_state", c.n_state);
  detail::take(j, "n_components", c.n_components);
  detail::take(j, "n_layers", c.n_layers);
  detail::take(j, "kernel_len", c.kernel_len);
  detail::take(j, "se_reduction", c.se_reduction);
  detail::take(j, "glu_ratio", c.glu_ratio);
  detail::take(j, "dropout", c.dropout);
  detail::take(j, "ln_epsilon", c.ln_epsilon);
  if (j.contains("squeeze")) c.squeeze = squeeze_from_string(j.at("squeeze").get<std::string>());
}

inline void from_json(const json& j, TrainConfig& c) {
  detail::take(j, "lr0", c.lr0);
  detail::take(j, "weight_decay", c.weight_decay);
  detail::take(j, "clip_norm", c.clip_norm);
  detail::take(j, "batch_size", c.batch_size);
  detail::take(j, "max_epochs", c.max_epochs);
  detail::take(j, "patience", c.patience);
  detail::take(j, "tol", c.tol);
  detail::take(j, "plateau_factor", c.plateau_factor);
  detail::take(j, "plateau_window", c.plateau_window);
  detail::take(j, "seed", c.seed);
  if (j.contains("optimizer"))
    c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
}

// ---------------------------------------------------------------- scaler

inline void add_scaler(Container& c, const Scaler& sc) {
  c.tensors.push_back(to_tensor("scaler.mu_x", sc.mu_x));
  c.tensors.push_back(to_tensor("scaler.sigma_x", sc.sigma_x));
  c.tensors.push_back(to_tensor("scaler.mu_y", sc.mu_y));
  c.tensors.push_back(to_tensor("scaler.sigma_y", sc.sigma_y));
  c.header["scaler_floored"] = sc.floored;
}

inline Scaler read_scaler(const Container& c) {
  Scaler sc;
  sc.mu_x = vec_from(c.tensor("scaler.mu_x"));
  sc.sigma_x = vec_from(c.tensor("scaler.sigma_x"));
  sc.mu_y = vec_from(c.tensor("scaler.mu_y"));
  sc.sigma_y = vec_from(c.tensor("scaler.sigma_y"));
  sc.floored = c.header.value("scaler_floored", std::vector<int>{});
  sc.fitted = true;
  return sc;
}

// ---------------------------------------------------------------- model

struct ModelArtifact {
  ModelConfig config;
  ModelParams params;
  Scaler scaler;
  std::vector<std::string> columns;
  std::vector<int> target_columns;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  json config_echo = json::object();
};

inline std::string encode_model(const ModelArtifact& a) {
  Container c;
  c.header = {{"kind", "model"},
              {"format_version", kFormatVersion},
              {"model_config", to_json(a.config)},
              {"columns", a.columns},
              {"target_columns", a.target_columns},
              {"best_epoch", a.best_epoch},
              {"best_val_loss", a.best_val_loss},
              {"config_echo", a.config_echo}};
  for (const auto& t : tensor_refs(a.params))
    c.tensors.push_back({t.name, {std::uint64_t(t.rows), std::uint64_t(t.cols)},
                         std::vector<double>(t.data, t.data + t.size())});
  add_scaler(c, a.scaler);
  return encode_container(c);
}

inline ModelArtifact decode_model(const std::string& bytes) {
  const Container c = decode_container(bytes);
  if (c.header.value("kind", "") != "model") throw DataError("artifact", "not a model file");
  ModelArtifact a;
  from_json(c.header.at("model_config"), a.config);
  a.config.validate();
  a.columns = c.header.at("columns").get<std::vector<std::string>>();
  a.target_columns = c.header.at("target_columns").get<std::vector<int>>();
  a.best_epoch = c.header.at("best_epoch").get<int>();
  a.best_val_loss = c.header.at("best_val_loss").get<double>();
  a.config_echo = c.header.at("config_echo");
  a.params = zeros_like(a.config);
  for (const auto& t : tensor_refs(a.params)) {
    const NamedTensor& src = c.tensor(t.name);
    if (src.data.size() != std::size_t(t.size()))
      throw DataError("artifact", "tensor '" + t.name + "' has the wrong size");
    std::copy(src.data.begin(), src.data.end(), t.data);
  }
  a.scaler = read_scaler(c);
  return a;
}

inline void save_model(const std::string& path, const ModelArtifact& a) {
  write_file(path, encode_model(a));
}

inline ModelArtifact load_model(const std::string& path) { return decode_model(read_file(path)); }

// ---------------------------------------------------------------- dataset

inline std::string encode_dataset(const WindowDataset& ds, const json& config_echo) {
  if (ds.windows.empty()) throw DataError("artifact", "dataset has no windows");
  const Eigen::Index l = ds.windows[0].x.rows(), f = ds.windows[0].x.cols();
  const Eigen::Index o = ds.windows[0].y.size();
  Container c;
  c.header = {{"kind", "dataset"},
              {"format_version", kFormatVersion},
              {"columns", ds.columns},
              {"target_columns", ds.target_columns},
              {"window", ds.window},
              {"t0", ds.t0},
              {"stride", ds.stride},
              {"split", ds.split},
              {"n_train", ds.n_train},
              {"n_val", ds.n_val},
              {"n_test", ds.n_test},
              {"standardized", ds.standardized},
              {"config_echo", config_echo}};
  const std::uint64_t m = ds.windows.size();
  NamedTensor x{"x", {m, std::uint64_t(l), std::uint64_t(f)}, {}};
  NamedTensor y{"y", {m, std::uint64_t(o)}, {}};
  NamedTensor origin{"origin", {m}, {}};
  x.data.reserve(std::size_t(m * l * f));
  for (const auto& w : ds.windows) {
    x.data.insert(x.data.end(), w.x.data(), w.x.data() + w.x.size());
    y.data.insert(y.data.end(), w.y.data(), w.y.data() + w.y.size());
    origin.data.push_back(double(w.origin));
  }
  c.tensors = {std::move(x), std::move(y), std::move(origin)};
  if (ds.scaler.fitted) add_scaler(c, ds.scaler);
  return encode_container(c);
}

struct DatasetArtifact {
  WindowDataset dataset;
  json config_echo;
};

inline DatasetArtifact decode_dataset(const std::string& bytes) {
  const Container c = decode_container(bytes);
  if (c.header.value("kind", "") != "dataset") throw DataError("artifact", "not a dataset file");
  DatasetArtifact a;
  WindowDataset& ds = a.dataset;
  const json& h = c.header;
  ds.columns = h.at("columns").get<std::vector<std::string>>();
  ds.target_columns = h.at("target_columns").get<std::vector<int>>();
  ds.window = h.at("window").get<int>();
  ds.t0 = h.at("t0").get<double>();
  ds.stride = h.at("stride").get<double>();
  ds.split = h.at("split").get<bool>();
  ds.n_train = h.at("n_train").get<std::size_t>();
  ds.n_val = h.at("n_val").get<std::size_t>();
  ds.n_test = h.at("n_test").get<std::size_t>();
  ds.standardized = h.at("standardized").get<bool>();
  a.config_echo = h.at("config_echo");
  const NamedTensor& x = c.tensor("x");
  const NamedTensor& y = c.tensor("y");
  const NamedTensor& origin = c.tensor("origin");
  if (x.dims.size() != 3 || y.dims.size() != 2 || origin.dims.size() != 1 ||
      y.dims[0] != x.dims[0] || origin.dims[0] != x.dims[0])
    throw DataError("artifact", "inconsistent dataset tensors");
  const auto m = std::size_t(x.dims[0]);
  const auto l = Eigen::Index(x.dims[1]), f = Eigen::Index(x.dims[2]), o = Eigen::Index(y.dims[1]);
  if (ds.n_train + ds.n_val + ds.n_test != (ds.split ? m : 0))
    throw DataError("artifact", "split counts do not match window count");
  ds.windows.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    Window& w = ds.windows[i];
    w.x = Eigen::Map<const Mat>(x.data.data() + i * std::size_t(l * f), l, f);
    w.y = Eigen::Map<const Vec>(y.data.data() + i * std::size_t(o), o);
    w.origin = std::int64_t(origin.data[i]);
  }
  if (ds.standardized) ds.scaler = read_scaler(c);
  return a;
}

inline void save_dataset(const std::string& path, const WindowDataset& ds, const json& echo) {
  write_file(path, encode_dataset(ds, echo));
}

inline DatasetArtifact load_dataset(const std::string& path) {
  return decode_dataset(read_file(path));
}

}  // namespace ms3m
