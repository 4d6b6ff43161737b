#include "bmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace bmt {
inline namespace BMT_PRECISION_NS {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'B', 'M', 'T', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 0;
constexpr std::uint8_t kPacked = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot open '" + path + "' for writing");
  }
  template <class T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish(const std::string& path) {
    out_.flush();
    if (!out_) throw Error("write to '" + path + "' failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open checkpoint '" + path + "'");
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ConfigError("checkpoint '" + path_ + "' is truncated");
  }
  std::string str(std::size_t limit = 4096) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw ConfigError("checkpoint '" + path_ + "': implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::string path_;
  std::ifstream in_;
};

void write_config(Writer& w, const TransformerConfig& c) {
  for (int v : {c.encoder_layers, c.decoder_layers, c.d_model, c.d_ff, c.n_heads, c.vocab_size, c.max_len})
    w.put<std::int32_t>(v);
  w.put<double>(c.dropout);
  w.put<std::uint8_t>(c.sites.bits());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.scale_mode));
  w.put<double>(c.scale);
  w.put<double>(c.act_bound);
  w.put<double>(c.weight_bound);
  w.put<std::uint8_t>(static_cast<std::uint8_t>((c.attn_shortcut ? 1 : 0) | (c.ffn_inner_ln ? 2 : 0) |
                                                (c.ffn_outer_ln ? 4 : 0)));
}

TransformerConfig read_config(Reader& r) {
  TransformerConfig c;
  for (int* v : {&c.encoder_layers, &c.decoder_layers, &c.d_model, &c.d_ff, &c.n_heads, &c.vocab_size, &c.max_len})
    *v = r.get<std::int32_t>();
  c.dropout = r.get<double>();
  c.sites = SiteFlags::from_bits(r.get<std::uint8_t>());
  const auto mode = r.get<std::uint8_t>();
  if (mode > 2) throw ConfigError("checkpoint: unknown scale mode tag");
  c.scale_mode = static_cast<ScaleMode>(mode);
  c.scale = r.get<double>();
  c.act_bound = r.get<double>();
  c.weight_bound = r.get<double>();
  const auto toggles = r.get<std::uint8_t>();
  c.attn_shortcut = toggles & 1;
  c.ffn_inner_ln = toggles & 2;
  c.ffn_outer_ln = toggles & 4;
  c.validate();
  return c;
}

void write_float(Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.put<std::uint8_t>(kFloat32);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (Real v : t.values()) w.put<float>(static_cast<float>(v));
}

void write_packed(Writer& w, const std::string& name, const Shape& shape, const PackedBitMatrix& m) {
  w.str(name);
  w.put<std::uint8_t>(kPacked);
  w.put<std::uint32_t>(2);
  for (std::size_t d : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.bounds.size()));
  for (Real b : m.bounds) w.put<float>(static_cast<float>(b));
  for (std::uint64_t word : m.words) w.put<std::uint64_t>(word);
}

}  // namespace

void save_checkpoint(const std::string& path, const Transformer& model, bool packed_export, const ParamStore* extras) {
  const PackedWeights packed = packed_export ? model.export_packed() : PackedWeights{};
  Writer w(path);
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  write_config(w, model.config());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params().size() + (extras ? extras->size() : 0)));
  for (const auto& [name, t] : model.params()) {
    auto it = packed.find(name);
    if (it != packed.end())
      write_packed(w, name, t.shape(), it->second);
    else
      write_float(w, name, t);
  }
  if (extras)
    for (const auto& [name, t] : *extras) write_float(w, "extra:" + name, t);
  w.finish(path);
}

Checkpoint read_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ConfigError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config = read_config(r);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 4) throw ConfigError("checkpoint: tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const std::size_t n = shape_numel(shape);
    if (n > (std::size_t{1} << 31)) throw ConfigError("checkpoint: tensor '" + name + "' is implausibly large");
    Tensor t;
    if (dtype == kFloat32) {
      std::vector<float> raw(n);
      r.bytes(raw.data(), n * sizeof(float));
      t = Tensor::parameter(shape, std::vector<Real>(raw.begin(), raw.end()));
    } else if (dtype == kPacked) {
      if (rank != 2) throw ConfigError("checkpoint: packed tensor '" + name + "' must be a matrix");
      PackedBitMatrix m;
      m.n_rows = shape[1];
      m.n_cols = shape[0];
      const auto nb = r.get<std::uint32_t>();
      if (nb != m.n_rows) throw ConfigError("checkpoint: packed tensor '" + name + "' has wrong bound count");
      std::vector<float> bounds(nb);
      r.bytes(bounds.data(), nb * sizeof(float));
      m.bounds.assign(bounds.begin(), bounds.end());
      m.words.resize(m.n_rows * m.words_per_row());
      r.bytes(m.words.data(), m.words.size() * sizeof(std::uint64_t));
      m.validate();
      // Float copy at +-B: re-binarizing it reproduces exactly +-B/2.
      Tensor u = unpack(m, PackOrientation::kCols);
      std::vector<Real> v(u.values().begin(), u.values().end());
      for (auto& x : v) x *= 2;
      t = Tensor::parameter(shape, std::move(v));
      ck.packed.emplace(name, std::move(m));
    } else {
      throw ConfigError("checkpoint: tensor '" + name + "' has unknown dtype");
    }
    if (name.rfind("extra:", 0) == 0)
      ck.extras.add(name.substr(6), std::move(t));
    else
      ck.params.add(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw ConfigError("checkpoint '" + path + "' has trailing bytes");
  return ck;
}

Transformer load_checkpoint(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  return Transformer(ck.config, std::move(ck.params), std::move(ck.packed));
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
