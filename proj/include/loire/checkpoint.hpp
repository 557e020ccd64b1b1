#ifndef LOIRE_CHECKPOINT_HPP_
#define LOIRE_CHECKPOINT_HPP_

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "loire/core/params.hpp"

// Checkpoint archive: a POSIX ustar file whose first member is manifest.json,
// followed by one raw little-endian blob per named array (arrays/<name>.bin)
// in manifest order. All header fields that could vary (mtime, owner) are
// fixed, so saving the same parameters always yields the same bytes.

namespace loire {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "loire-checkpoint";

struct NamedArray {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" | "f64"
  std::vector<unsigned char> bytes;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();  ///< kind, config echo, vocab hash, seed, ...
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

template <typename T>
constexpr const char* dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace detail {

template <typename T>
void append_le(std::vector<unsigned char>& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T read_le(const unsigned char* p) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_octal(char* field, std::size_t width, std::uint64_t value) {
  std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(value));
}

inline void tar_member(std::string& out, const std::string& name, const std::string& data) {
  if (name.size() > 99) throw CheckpointError("archive member name too long: " + name);
  char header[512] = {};
  std::memcpy(header, name.data(), name.size());
  write_octal(header + 100, 8, 0644);
  write_octal(header + 108, 8, 0);
  write_octal(header + 116, 8, 0);
  write_octal(header + 124, 12, data.size());
  write_octal(header + 136, 12, 0);
  header[156] = '0';
  std::memcpy(header + 257, "ustar", 6);
  std::memcpy(header + 263, "00", 2);
  std::memset(header + 148, ' ', 8);
  unsigned sum = 0;
  for (unsigned char c : header) sum += c;
  std::snprintf(header + 148, 8, "%06o", sum);
  header[155] = ' ';
  out.append(header, 512);
  out.append(data);
  out.append((512 - data.size() % 512) % 512, '\0');
}

struct TarEntry {
  std::string name;
  std::string data;
  bool complete = true;
};

inline std::vector<TarEntry> read_tar(const std::string& bytes) {
  std::vector<TarEntry> out;
  std::size_t pos = 0;
  while (pos + 512 <= bytes.size()) {
    const char* h = bytes.data() + pos;
    if (std::all_of(h, h + 512, [](char c) { return c == 0; })) break;
    TarEntry e;
    e.name = std::string(h, strnlen(h, 100));
    const std::string size_field(h + 124, strnlen(h + 124, 12));
    std::size_t size = 0;
    try {
      size = std::stoull(size_field, nullptr, 8);
    } catch (const std::exception&) {
      throw CheckpointError("corrupt archive header for member '" + e.name + "'");
    }
    pos += 512;
    const std::size_t avail = pos <= bytes.size() ? bytes.size() - pos : 0;
    e.complete = avail >= size;
    e.data = bytes.substr(pos, std::min(size, avail));
    out.push_back(std::move(e));
    pos += size + (512 - size % 512) % 512;
  }
  return out;
}

}  // namespace detail

/// Flattens a parameter store into named little-endian arrays.
template <typename T>
Checkpoint make_checkpoint(const ParamStore<T>& params, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedArray a;
    a.name = params.names()[i];
    a.shape = params.at(i).shape();
    a.dtype = dtype_tag<T>();
    a.bytes.reserve(params.at(i).size() * sizeof(T));
    for (T v : params.at(i).value()) detail::append_le(a.bytes, v);
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

inline nlohmann::json manifest_of(const Checkpoint& ck) {
  nlohmann::json m;
  m["format"] = kCheckpointFormat;
  m["version"] = kCheckpointVersion;
  m["meta"] = ck.meta;
  m["arrays"] = nlohmann::json::array();
  for (const auto& a : ck.arrays)
    m["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"dtype", a.dtype}, {"bytes", a.bytes.size()}});
  return m;
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out;
  detail::tar_member(out, "manifest.json", manifest_of(ck).dump(1) + "\n");
  for (const auto& a : ck.arrays)
    detail::tar_member(out, "arrays/" + a.name + ".bin", std::string(a.bytes.begin(), a.bytes.end()));
  out.append(1024, '\0');
  return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
  auto entries = detail::read_tar(bytes);
  if (entries.empty() || entries[0].name != "manifest.json" || !entries[0].complete)
    throw CheckpointError("checkpoint '" + origin + "' has no manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(entries[0].data);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint '" + origin + "' manifest is not valid JSON: " + e.what());
  }
  if (m.value("format", std::string()) != kCheckpointFormat)
    throw CheckpointError("checkpoint '" + origin + "' has an unknown format");
  if (m.value("version", -1) != kCheckpointVersion)
    throw CheckpointError("checkpoint '" + origin + "' version " + m.value("version", nlohmann::json()).dump() +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.meta = m.at("meta");
  std::size_t next = 1;
  for (const auto& spec : m.at("arrays")) {
    NamedArray a;
    a.name = spec.at("name").get<std::string>();
    a.shape = spec.at("shape").get<Shape>();
    a.dtype = spec.at("dtype").get<std::string>();
    const auto nbytes = spec.at("bytes").get<std::size_t>();
    const std::size_t width = a.dtype == "f32" ? 4 : a.dtype == "f64" ? 8 : 0;
    if (width == 0) throw CheckpointError("array '" + a.name + "' has unknown dtype " + a.dtype);
    if (shape_size(a.shape) * width != nbytes)
      throw CheckpointError("array '" + a.name + "' shape " + shape_str(a.shape) + " does not match its " +
                            std::to_string(nbytes) + " bytes");
    if (next >= entries.size() || entries[next].name != "arrays/" + a.name + ".bin")
      throw CheckpointError("checkpoint '" + origin + "' is missing array '" + a.name + "'");
    const auto& e = entries[next++];
    if (!e.complete || e.data.size() != nbytes)
      throw CheckpointError("checkpoint '" + origin + "' is missing array '" + a.name + "' (truncated)");
    a.bytes.assign(e.data.begin(), e.data.end());
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

/**
 * Copies checkpoint arrays into `params`. Every parameter must be present
 * (optionally under `rename_from` instead of `rename_to` as its prefix) with
 * a matching shape; 32/64-bit storage converts on load.
 */
template <typename T>
void apply_checkpoint(const Checkpoint& ck, ParamStore<T>& params, const std::string& rename_to = "",
                      const std::string& rename_from = "") {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::string name = params.names()[i];
    if (!rename_to.empty() && name.rfind(rename_to, 0) == 0) name = rename_from + name.substr(rename_to.size());
    const NamedArray* a = ck.find(name);
    if (!a) throw CheckpointError("checkpoint is missing array '" + name + "'");
    if (a->shape != params.at(i).shape())
      throw CheckpointError("array '" + name + "' has shape " + shape_str(a->shape) + " but the model expects " +
                            shape_str(params.at(i).shape()));
    auto& dst = params.at(i).mutable_value();
    const unsigned char* p = a->bytes.data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      if (a->dtype == "f32") dst[k] = static_cast<T>(detail::read_le<float>(p + 4 * k));
      else dst[k] = static_cast<T>(detail::read_le<double>(p + 8 * k));
    }
  }
}

// ---------------------------------------------------------------------------
// Digests.

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

/**
 * SHA-256 over the canonical encoding of every parameter whose name starts
 * with `prefix`, in store order: name, NUL, rank and dims as u64, dtype tag,
 * then the little-endian values.
 */
template <typename T>
std::string param_digest(const ParamStore<T>& params, const std::string& prefix = "") {
  std::vector<unsigned char> buf;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    if (name.rfind(prefix, 0) != 0) continue;
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back(0);
    const auto& v = params.at(i);
    detail::append_le<std::uint64_t>(buf, v.shape().size());
    for (int d : v.shape()) detail::append_le<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
    const std::string tag = dtype_tag<T>();
    buf.insert(buf.end(), tag.begin(), tag.end());
    for (T x : v.value()) detail::append_le(buf, x);
  }
  return sha256_hex(buf.data(), buf.size());
}

/// Hash of a token list (one per line), used to tie checkpoints to vocabularies.
inline std::string vocab_hash(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) s += t + "\n";
  return sha256_hex(s);
}

}  // namespace loire

#endif  // LOIRE_CHECKPOINT_HPP_
