#include "voxadapt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace voxadapt {

namespace {

constexpr std::size_t kMagicLen = 8;
constexpr std::uint8_t kF64 = 0;
constexpr std::uint8_t kU64 = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}

  void need(std::size_t n) const {
    if (buf.size() - pos < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[pos + i]) << (8 * i);
    pos += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }

  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

std::string key(const std::string& prefix, const std::string& name) { return prefix + "/" + name; }

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t, bool trainable) {
  if (t.rank() == 0 || t.size() != shape_numel(t.shape())) throw FormatError("cannot store empty tensor '" + name + "'");
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const Entry& e) { return e.name == name; });
  if (it != tensors.end()) {
    *it = Entry{name, t, trainable};
  } else {
    tensors.push_back(Entry{name, t, trainable});
  }
}

void Checkpoint::put_scalar(const std::string& name, double v) { put(name, Tensor::scalar(v)); }

void Checkpoint::put_counter(const std::string& name, std::uint64_t v) {
  auto it = std::find_if(counters.begin(), counters.end(), [&](const auto& c) { return c.first == name; });
  if (it != counters.end()) {
    it->second = v;
  } else {
    counters.emplace_back(name, v);
  }
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const Entry& e) { return e.name == name; });
  if (it == tensors.end()) throw FormatError("checkpoint has no tensor '" + name + "'");
  return it->tensor;
}

double Checkpoint::scalar(const std::string& name) const {
  const Tensor& t = tensor(name);
  if (t.size() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
  return t[0];
}

std::uint64_t Checkpoint::counter(const std::string& name) const {
  auto it = std::find_if(counters.begin(), counters.end(), [&](const auto& c) { return c.first == name; });
  if (it == counters.end()) throw FormatError("checkpoint has no counter '" + name + "'");
  return it->second;
}

void Checkpoint::put_parameters(const std::string& prefix, const ParameterSet& params) {
  for (const auto& p : params.entries()) put(key(prefix, p.name), p.value, p.trainable);
}

ParameterSet Checkpoint::parameters(const std::string& prefix) const {
  ParameterSet out(prefix);
  const std::string head = prefix + "/";
  for (const auto& e : tensors) {
    if (e.name.starts_with(head)) out.add(e.name.substr(head.size()), e.tensor, e.trainable);
  }
  if (out.size() == 0) throw FormatError("checkpoint has no parameters under '" + prefix + "'");
  return out;
}

void Checkpoint::put_adam(const std::string& prefix, const AdamState& state) {
  put_counter(key(prefix, "step"), state.step);
  put(key(prefix, "config"), Tensor({5}, {state.config.beta1, state.config.beta2, state.config.eps,
                                          state.config.base_rate, state.config.decay}));
  put_counter(key(prefix, "decay_steps"), state.config.decay_steps);
  for (const auto& [name, m] : state.m) put(key(prefix, "m/" + name), m);
  for (const auto& [name, v] : state.v) put(key(prefix, "v/" + name), v);
}

AdamState Checkpoint::adam(const std::string& prefix) const {
  AdamState s;
  s.step = counter(key(prefix, "step"));
  const Tensor& c = tensor(key(prefix, "config"));
  if (c.size() != 5) throw FormatError("malformed optimizer config under '" + prefix + "'");
  s.config = AdamConfig{c[0], c[1], c[2], c[3], c[4], counter(key(prefix, "decay_steps"))};
  const std::string mh = key(prefix, "m/"), vh = key(prefix, "v/");
  for (const auto& e : tensors) {
    if (e.name.starts_with(mh)) s.m.emplace(e.name.substr(mh.size()), e.tensor);
    if (e.name.starts_with(vh)) s.v.emplace(e.name.substr(vh.size()), e.tensor);
  }
  return s;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, kMagicLen);
  w.le(static_cast<std::uint32_t>(ckpt.tensors.size() + ckpt.counters.size()));
  auto name = [&](const std::string& n) {
    w.le(static_cast<std::uint32_t>(n.size()));
    w.bytes(n.data(), n.size());
  };
  for (const auto& e : ckpt.tensors) {
    name(e.name);
    w.le(kF64);
    w.le(static_cast<std::uint8_t>(e.trainable ? 1 : 0));
    w.le(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.le(static_cast<std::uint64_t>(d));
  }
  for (const auto& [n, v] : ckpt.counters) {
    name(n);
    w.le(kU64);
    w.le(std::uint8_t{0});
    w.le(std::uint32_t{0});
  }
  for (const auto& e : ckpt.tensors) {
    for (double v : e.tensor.values()) w.f64(v);
  }
  for (const auto& c : ckpt.counters) w.le(c.second);
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagicLen) throw FormatError("checkpoint truncated: missing header");
  const std::string magic(reinterpret_cast<const char*>(bytes.data()), kMagicLen);
  if (magic != kCheckpointMagic) {
    if (magic.starts_with("VXADAPT")) {
      throw FormatError(std::string("unsupported checkpoint version '") + magic[7] + "' (expected '1')");
    }
    throw FormatError("not a checkpoint file (bad magic)");
  }
  Reader r(bytes);
  r.pos = kMagicLen;
  const auto count = r.le<std::uint32_t>();
  struct Pending {
    std::string name;
    std::uint8_t dtype;
    bool trainable;
    Shape shape;
  };
  std::vector<Pending> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    p.name = r.str(r.le<std::uint32_t>());
    p.dtype = r.le<std::uint8_t>();
    p.trainable = (r.le<std::uint8_t>() & 1) != 0;
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8) throw FormatError("implausible rank for '" + p.name + "'");
    for (std::uint32_t d = 0; d < rank; ++d) p.shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>()));
    if (p.dtype != kF64 && p.dtype != kU64) throw FormatError("unknown dtype for '" + p.name + "'");
    if (p.dtype == kF64 && rank == 0) throw FormatError("tensor '" + p.name + "' has rank 0");
    manifest.push_back(std::move(p));
  }
  Checkpoint ckpt;
  for (const auto& p : manifest) {
    if (p.dtype != kF64) continue;
    const std::size_t n = shape_numel(p.shape);
    if (n > bytes.size() / 8) throw FormatError("checkpoint truncated in payload of '" + p.name + "'");
    r.need(n * 8);
    std::vector<double> vals(n);
    for (auto& v : vals) v = r.f64();
    ckpt.tensors.push_back(Checkpoint::Entry{p.name, Tensor(p.shape, std::move(vals)), p.trainable});
  }
  for (const auto& p : manifest) {
    if (p.dtype == kU64) ckpt.counters.emplace_back(p.name, r.le<std::uint64_t>());
  }
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void save_weights(const ParameterSet& params, const std::filesystem::path& path) {
  Checkpoint c;
  c.put_parameters(params.name(), params);
  write_checkpoint(path, c);
}

ParameterSet load_weights(const std::filesystem::path& path) {
  const Checkpoint c = read_checkpoint(path);
  if (c.tensors.empty()) throw FormatError("checkpoint holds no tensors");
  const auto& first = c.tensors.front().name;
  const auto slash = first.find('/');
  if (slash == std::string::npos) throw FormatError("weights file entries carry no network prefix");
  return c.parameters(first.substr(0, slash));
}

}  // namespace voxadapt
