#pragma once

// Binary checkpoint, all integers and floats little-endian:
//
//   "XDRCKPT\0"   magic
//   u32           format version
//   u32           epoch
//   u32 + bytes   kind ("imitator", "extractor", "perception")
//   u32 + bytes   config snapshot (compact JSON)
//   u32           tensor count
//   per tensor:   u32 + bytes name, u32 rank, u32 dims[rank], f32 data[]
//   u8            optimizer present
//   if present:   u64 Adam step, then m and v for every tensor in order
//   32 bytes      SHA-256 of everything above
//
// Tensors are stored in the network's parameters() order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "xdr/core/adam.hpp"
#include "xdr/util/digest.hpp"
#include "xdr/util/io.hpp"

namespace xdr::train {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'X', 'D', 'R', 'C', 'K', 'P', 'T', '\0'};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::string kind;
  std::uint32_t epoch = 0;
  Json config = Json::object();
  std::vector<NamedTensor> tensors;
  bool has_optimizer = false;
  std::uint64_t adam_t = 0;
  std::vector<Tensor<float>> adam_m, adam_v;
};

namespace detail {

class Writer {
 public:
  void raw(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void floats(const Tensor<float>& t) { raw(t.data(), t.size() * sizeof(float)); }
  std::string buf;
};

class Reader {
 public:
  Reader(const std::string& b, std::size_t end, std::string where) : buf_(b), end_(end), where_(std::move(where)) {}
  void raw(void* p, std::size_t n) {
    if (n > end_ - pos_) throw ValidationError(where_ + ": checkpoint truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > end_ - pos_) throw ValidationError(where_ + ": checkpoint truncated");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void floats(Tensor<float>& t) {
    raw(t.data(), t.size() * sizeof(float));
    if (!t.all_finite()) throw ValidationError(where_ + ": checkpoint holds non-finite values");
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& buf_;
  std::size_t end_, pos_ = 0;
  std::string where_;
};

inline std::string raw_sha256(const std::string& data, std::size_t n) {
  const std::string hex = Sha256().update(data.data(), n).hex();
  std::string out(32, '\0');
  for (int i = 0; i < 32; ++i) out[i] = static_cast<char>(std::stoi(hex.substr(2 * i, 2), nullptr, 16));
  return out;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u32(c.epoch);
  w.str(c.kind);
  w.str(c.config.dump());
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (int d : t.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.floats(t.value);
  }
  w.u8(c.has_optimizer ? 1 : 0);
  if (c.has_optimizer) {
    if (c.adam_m.size() != c.tensors.size() || c.adam_v.size() != c.tensors.size())
      throw ValidationError("checkpoint: optimizer state does not match tensor count");
    w.u64(c.adam_t);
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      if (c.adam_m[i].shape() != c.tensors[i].value.shape() || c.adam_v[i].shape() != c.tensors[i].value.shape())
        throw ValidationError("checkpoint: optimizer moment shape differs for '" + c.tensors[i].name + "'");
      w.floats(c.adam_m[i]);
      w.floats(c.adam_v[i]);
    }
  }
  const std::string tail = detail::raw_sha256(w.buf, w.buf.size());
  w.raw(tail.data(), tail.size());
  return std::move(w.buf);
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  if (bytes.size() < 8 + 32 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw ValidationError(where + ": not a checkpoint file");
  const std::size_t body = bytes.size() - 32;
  if (detail::raw_sha256(bytes, body) != bytes.substr(body))
    throw ValidationError(where + ": checkpoint digest mismatch (file corrupted or modified)");
  detail::Reader r(bytes, body, where);
  char magic[8];
  r.raw(magic, 8);
  Checkpoint c;
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw ValidationError(where + ": unsupported checkpoint version " + std::to_string(v));
  c.epoch = r.u32();
  c.kind = r.str();
  try {
    c.config = Json::parse(r.str());
  } catch (const Json::exception& e) {
    throw ValidationError(where + ": bad config snapshot: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw ValidationError(where + ": bad tensor rank for '" + t.name + "'");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32();
      if (e == 0 || e > (1u << 24)) throw ValidationError(where + ": bad extent for '" + t.name + "'");
      shape.push_back(static_cast<int>(e));
    }
    t.value = Tensor<float>(shape);
    r.floats(t.value);
    c.tensors.push_back(std::move(t));
  }
  c.has_optimizer = r.u8() != 0;
  if (c.has_optimizer) {
    c.adam_t = r.u64();
    for (const auto& t : c.tensors) {
      c.adam_m.emplace_back(t.value.shape());
      c.adam_v.emplace_back(t.value.shape());
      r.floats(c.adam_m.back());
      r.floats(c.adam_v.back());
    }
  }
  if (!r.done()) throw ValidationError(where + ": trailing bytes in checkpoint");
  return c;
}

inline std::string checkpoint_digest(const Checkpoint& c) { return sha256_hex(encode_checkpoint(c)); }

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("missing checkpoint " + path.string());
  return decode_checkpoint(read_text(path), path.string());
}

/// SHA-256 over names, shapes and raw float bytes of a tensor list.
/// Used for the freeze contract, independent of epoch or optimizer state.
inline std::string weights_digest(const std::vector<NamedTensor>& tensors) {
  Sha256 h;
  for (const auto& t : tensors) {
    h.update(t.name).update("\0", 1);
    for (int d : t.value.shape()) {
      const std::uint32_t e = static_cast<std::uint32_t>(d);
      h.update(&e, 4);
    }
    h.update(t.value.data(), t.value.size() * sizeof(float));
  }
  return h.hex();
}

inline std::vector<NamedTensor> capture(const std::vector<Parameter<float>*>& params) {
  std::vector<NamedTensor> out;
  for (const auto* p : params) out.push_back({p->name, p->value});
  return out;
}

/// Copies checkpoint tensors into `params`; names, order and shapes must agree.
inline void restore(const std::vector<Parameter<float>*>& params, const Checkpoint& c) {
  if (c.tensors.size() != params.size())
    throw ValidationError(c.kind + " checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, network has " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (c.tensors[i].name != params[i]->name || c.tensors[i].value.shape() != params[i]->value.shape())
      throw ValidationError("checkpoint tensor '" + c.tensors[i].name + "' " + to_string(c.tensors[i].value.shape()) +
                            " does not match network tensor '" + params[i]->name + "' " +
                            to_string(params[i]->value.shape()));
    params[i]->value = c.tensors[i].value;
  }
}

inline Checkpoint snapshot(std::string kind, std::uint32_t epoch, Json config,
                           const std::vector<Parameter<float>*>& params, const Adam<float>* adam = nullptr) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.epoch = epoch;
  c.config = std::move(config);
  c.tensors = capture(params);
  if (adam) {
    c.has_optimizer = true;
    c.adam_t = adam->state().t;
    c.adam_m = adam->state().m;
    c.adam_v = adam->state().v;
  }
  return c;
}

inline std::string weights_digest(const std::vector<Parameter<float>*>& params) {
  return weights_digest(capture(params));
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  return p.replace_extension(".json");
}

/// Writes a checkpoint plus a JSON sidecar holding
/// its file digest and weight digest.
inline Json save_verified(const std::filesystem::path& path, const Checkpoint& c, Json extra = Json::object()) {
  const std::string bytes = encode_checkpoint(c);
  write_atomic(path, bytes);
  Json meta = std::move(extra);
  meta["kind"] = c.kind;
  meta["epoch"] = c.epoch;
  meta["checkpoint_sha256"] = sha256_hex(bytes);
  meta["weights_digest"] = weights_digest(c.tensors);
  write_json(sidecar_path(path), meta);
  return meta;
}

/// Loads a checkpoint, refusing it unless the sidecar digests match.
inline Checkpoint load_verified(const std::filesystem::path& path, const std::string& kind) {
  if (!std::filesystem::exists(path)) throw ValidationError("missing " + kind + " checkpoint " + path.string());
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) throw ValidationError("missing digest file " + side.string());
  const Json meta = read_json(side);
  const std::string bytes = read_text(path);
  if (meta.value("checkpoint_sha256", "") != sha256_hex(bytes))
    throw ValidationError(path.string() + ": digest does not match " + side.string());
  Checkpoint c = decode_checkpoint(bytes, path.string());
  if (c.kind != kind) throw ValidationError(path.string() + " is a " + c.kind + " checkpoint, expected " + kind);
  if (meta.value("weights_digest", "") != weights_digest(c.tensors))
    throw ValidationError(path.string() + ": weight digest mismatch");
  return c;
}

inline void restore_optimizer(Adam<float>& adam, const Checkpoint& c) {
  if (!c.has_optimizer) throw ValidationError(c.kind + " checkpoint has no optimizer state to resume from");
  if (c.adam_m.size() != adam.params().size()) throw ValidationError("optimizer state size mismatch");
  adam.state().t = c.adam_t;
  adam.state().m = c.adam_m;
  adam.state().v = c.adam_v;
}

}  // namespace xdr::train
