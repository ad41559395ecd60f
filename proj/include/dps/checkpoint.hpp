#pragma once

#include <cstring>
#include <fstream>

#include "dps/config.hpp"
#include "dps/image_io.hpp"
#include "dps/model.hpp"
#include "dps/optim.hpp"

namespace dps {

// Little-endian binary checkpoint:
//   8-byte magic "DPSNETCK", u32 version,
//   u64 config-text length + bytes,
//   u32 tensor count, then per tensor: u32 name length + bytes, u32 rank,
//   u64 extents, raw f64 scalars,
//   u8 moments flag, per tensor raw f64 m then v buffers,
//   u64 optimizer step counter.
inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'S', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

inline void put_u32(std::string& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, 8);
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError(path + ": truncated checkpoint");
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const TrainConfig& cfg, DpsNet& net, const Adam& adam) {
  using namespace ckpt_detail;
  std::string out;
  put_bytes(out, kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  const std::string cfg_text = serialize_config(cfg);
  put_u64(out, cfg_text.size());
  put_bytes(out, cfg_text.data(), cfg_text.size());

  std::vector<std::pair<std::string, Tensor*>> params;
  net.params([&params](const std::string& name, Tensor& t) { params.emplace_back(name, &t); });
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (real v : t->values()) put_f64(out, static_cast<double>(v));
  }
  const bool have_moments = adam.m.size() == params.size();
  out.push_back(have_moments ? 1 : 0);
  if (have_moments)
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (real v : adam.m[k]) put_f64(out, static_cast<double>(v));
      for (real v : adam.v[k]) put_f64(out, static_cast<double>(v));
    }
  put_u64(out, static_cast<std::uint64_t>(adam.step_count));
  return out;
}

inline void save_checkpoint(const std::string& path, const TrainConfig& cfg, DpsNet& net,
                            const Adam& adam) {
  const std::string blob = serialize_checkpoint(cfg, net, adam);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw IoError(path + ": write failed");
}

struct LoadedCheckpoint {
  TrainConfig cfg;
  DpsNet net;
  Adam adam;
};

/// Rebuilds the net from the embedded config snapshot and restores every
/// parameter and optimizer moment bit-exactly.
inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open checkpoint");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  ckpt_detail::Reader r{buf, 0, path};
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError(path + ": not a DPSNETCK checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(path + ": checkpoint version " + std::to_string(version) +
                  " does not match supported version " + std::to_string(kCheckpointVersion));
  const std::uint64_t cfg_len = r.u64();
  const std::string cfg_text = r.str(cfg_len);

  LoadedCheckpoint out;
  out.cfg = parse_config_text(cfg_text);
  CounterRng rng(out.cfg.seed);
  out.net = DpsNet(out.cfg.net, rng);

  std::vector<std::pair<std::string, Tensor*>> params;
  out.net.params([&params](const std::string& name, Tensor& t) { params.emplace_back(name, &t); });
  const std::uint32_t count = r.u32();
  if (count != params.size())
    throw IoError(path + ": checkpoint has " + std::to_string(count) + " tensors, net expects " +
                  std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const std::uint32_t name_len = r.u32();
    const std::string got = r.str(name_len);
    if (got != name)
      throw IoError(path + ": tensor name '" + got + "' does not match expected '" + name + "'");
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(r.u64());
    if (shape != t->shape())
      throw IoError(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                    ", net expects " + shape_str(t->shape()));
    for (real& v : t->values()) v = static_cast<real>(r.f64());
  }
  out.adam.beta1 = out.cfg.adam_beta1;
  out.adam.beta2 = out.cfg.adam_beta2;
  out.adam.eps = out.cfg.adam_eps;
  char have_moments;
  r.bytes(&have_moments, 1);
  if (have_moments) {
    for (auto& [name, t] : params) {
      (void)name;
      std::vector<real> mbuf(t->values().size()), vbuf(t->values().size());
      for (real& v : mbuf) v = static_cast<real>(r.f64());
      for (real& v : vbuf) v = static_cast<real>(r.f64());
      out.adam.m.push_back(std::move(mbuf));
      out.adam.v.push_back(std::move(vbuf));
    }
  }
  out.adam.step_count = static_cast<std::int64_t>(r.u64());
  return out;
}

}  // namespace dps
