#include "mergelab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mergelab {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'B', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f64_le(std::vector<uint8_t>& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  put_u64(out, bits);
}

void put_i32_le(std::vector<uint8_t>& out, int32_t v) {
  put_u32(out, static_cast<uint32_t>(v));
}

struct Reader {
  const std::vector<uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

double f64_from(uint64_t bits) {
  double d;
  std::memcpy(&d, &bits, sizeof(d));
  return d;
}

}  // namespace

uint32_t crc32(const void* data, std::size_t n, uint32_t crc) {
  static const auto table = [] {
    std::vector<uint32_t> t(256);
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const auto* p = static_cast<const uint8_t*>(data);
  crc ^= 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

void Checkpoint::put_f64(const std::string& name, std::vector<int> shape,
                         std::vector<double> data) {
  if (has(name)) throw std::invalid_argument("checkpoint: duplicate array " + name);
  Entry e;
  e.name = name;
  e.dtype = 1;
  e.f64 = F64Array{std::move(shape), std::move(data)};
  entries_.push_back(std::move(e));
}

void Checkpoint::put_i32(const std::string& name, std::vector<int> shape,
                         std::vector<int32_t> data) {
  if (has(name)) throw std::invalid_argument("checkpoint: duplicate array " + name);
  Entry e;
  e.name = name;
  e.dtype = 2;
  e.i32 = I32Array{std::move(shape), std::move(data)};
  entries_.push_back(std::move(e));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

const Checkpoint::Entry& Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::invalid_argument("checkpoint: no array named " + name);
}

const Checkpoint::F64Array& Checkpoint::f64(const std::string& name) const {
  const Entry& e = find(name);
  if (e.dtype != 1) throw std::invalid_argument("checkpoint: " + name + " is not f64");
  return e.f64;
}

const Checkpoint::I32Array& Checkpoint::i32(const std::string& name) const {
  const Entry& e = find(name);
  if (e.dtype != 2) throw std::invalid_argument("checkpoint: " + name + " is not i32");
  return e.i32;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

void Checkpoint::put_params(const std::string& prefix, const ParamSet& params) {
  for (const auto& e : params.entries()) {
    put_f64(prefix + e.name, e.tensor.shape(), e.tensor.data());
  }
}

ParamSet Checkpoint::params(const std::string& prefix) const {
  ParamSet out;
  for (const auto& e : entries_) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    if (e.dtype != 1) throw std::invalid_argument("checkpoint: parameter " + e.name + " not f64");
    out.add(e.name.substr(prefix.size()), Tensor::from_data(e.f64.shape, e.f64.data));
  }
  if (out.size() == 0) throw std::invalid_argument("checkpoint: no parameters under " + prefix);
  return out;
}

void Checkpoint::save(const std::string& path) const {
  std::vector<uint8_t> body;
  // data section first so the manifest can carry final offsets
  std::vector<uint8_t> data_section;
  std::vector<uint64_t> offsets;
  for (const auto& e : entries_) {
    offsets.push_back(data_section.size());
    if (e.dtype == 1) {
      for (double v : e.f64.data) put_f64_le(data_section, v);
    } else {
      for (int32_t v : e.i32.data) put_i32_le(data_section, v);
    }
  }

  body.insert(body.end(), kMagic, kMagic + 4);
  put_u32(body, kVersion);
  put_u32(body, static_cast<uint32_t>(entries_.size()));
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    put_u32(body, static_cast<uint32_t>(e.name.size()));
    body.insert(body.end(), e.name.begin(), e.name.end());
    body.push_back(e.dtype);
    const auto& shape = e.dtype == 1 ? e.f64.shape : e.i32.shape;
    put_u32(body, static_cast<uint32_t>(shape.size()));
    for (int d : shape) put_u64(body, static_cast<uint64_t>(d));
    put_u64(body, offsets[i]);
  }
  body.insert(body.end(), data_section.begin(), data_section.end());
  put_u32(body, crc32(body.data(), body.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot read " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 + 4) throw std::runtime_error("checkpoint: file too small");

  const std::size_t body_size = buf.size() - 4;
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<uint32_t>(buf[body_size + i]) << (8 * i);
  const uint32_t computed = crc32(buf.data(), body_size);
  if (stored != computed) throw std::runtime_error("checkpoint: CRC mismatch in " + path);

  Reader r{buf};
  if (r.str(4) != std::string(kMagic, 4)) throw std::runtime_error("checkpoint: bad magic");
  const uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint32_t count = r.u32();

  struct Meta {
    std::string name;
    uint8_t dtype;
    std::vector<int> shape;
    uint64_t offset;
    std::size_t numel;
  };
  std::vector<Meta> metas;
  for (uint32_t i = 0; i < count; ++i) {
    Meta m;
    const uint32_t name_len = r.u32();
    m.name = r.str(name_len);
    m.dtype = r.u8();
    if (m.dtype != 1 && m.dtype != 2) throw std::runtime_error("checkpoint: bad dtype");
    const uint32_t ndim = r.u32();
    m.numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      const auto dim = static_cast<int>(r.u64());
      if (dim <= 0) throw std::runtime_error("checkpoint: bad dimension");
      m.shape.push_back(dim);
      m.numel *= static_cast<std::size_t>(dim);
    }
    m.offset = r.u64();
    metas.push_back(std::move(m));
  }

  const std::size_t data_start = r.pos;
  Checkpoint ckpt;
  for (const auto& m : metas) {
    Reader dr{buf};
    dr.pos = data_start + m.offset;
    if (m.dtype == 1) {
      std::vector<double> data(m.numel);
      for (auto& v : data) v = f64_from(dr.u64());
      if (dr.pos > body_size) throw std::runtime_error("checkpoint: array past end");
      ckpt.put_f64(m.name, m.shape, std::move(data));
    } else {
      std::vector<int32_t> data(m.numel);
      for (auto& v : data) v = static_cast<int32_t>(dr.u32());
      if (dr.pos > body_size) throw std::runtime_error("checkpoint: array past end");
      ckpt.put_i32(m.name, m.shape, std::move(data));
    }
  }
  return ckpt;
}

}  // namespace mergelab
