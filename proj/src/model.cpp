#include "bmt/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "bmt/random.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

constexpr const char* kSiteNames[8] = {"a_qkv", "w_qkv", "a_out", "w_out", "qk", "scorev", "a_ffn", "w_ffn"};

bool* site_field(SiteFlags& f, std::size_t i) {
  bool* fields[8] = {&f.a_qkv, &f.w_qkv, &f.a_out, &f.w_out, &f.qk, &f.scorev, &f.a_ffn, &f.w_ffn};
  return fields[i];
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Dense-layer normalization for a site. A LayerNorm is architectural; the
// fixed divisor only applies while the layer actually binarizes.
ScaleMode site_mode(const DenseParams& p, ScaleMode mode, bool active) {
  if (p.ln_gamma.defined()) return ScaleMode::kLayerNorm;
  if (mode == ScaleMode::kFixed && active) return ScaleMode::kFixed;
  return ScaleMode::kNone;
}

// [B*T, H*dk] -> [B*H, T, dk]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t t = x.dim(0) / batch, dk = x.dim(1) / heads;
  return reshape(permute(reshape(x, {batch, t, heads, dk}), {0, 2, 1, 3}), {batch * heads, t, dk});
}

// [B*H, T, dk] -> [B*T, H*dk]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t t = x.dim(1), dk = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, t, dk}), {0, 2, 1, 3}), {batch * t, heads * dk});
}

// Row-wise binarized product of [G,N,D] and [G,K,D] through the bit kernel.
Tensor packed_group_matmul_nt(const Tensor& a, const Tensor& b, const BinarizeSpec& spec) {
  const std::size_t g = a.dim(0), n = a.dim(1), d = a.dim(2), k = b.dim(1);
  std::vector<Real> out(g * n * k);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < g; ++i) {
    Tensor ai(Shape{n, d}, std::vector<Real>(av.begin() + i * n * d, av.begin() + (i + 1) * n * d));
    Tensor bi(Shape{k, d}, std::vector<Real>(bv.begin() + i * k * d, bv.begin() + (i + 1) * k * d));
    Tensor ab = compute_bound(ai, spec), bb = compute_bound(bi, spec);
    Tensor r = binary_matmul(pack(binarize(ai, ab, spec), ab, PackOrientation::kRows),
                             pack(binarize(bi, bb, spec), bb, PackOrientation::kRows));
    std::copy(r.values().begin(), r.values().end(), out.begin() + i * n * k);
  }
  return Tensor(Shape{g, n, k}, std::move(out));
}

Tensor keep_tensor(std::span<const std::uint8_t> keep, std::size_t batch, std::size_t heads, std::size_t tq,
                   std::size_t tk) {
  std::vector<Real> m(batch * heads * tq * tk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < tq * tk; ++i) m[(b * heads + h) * tq * tk + i] = keep[b * tq * tk + i];
  return Tensor(Shape{batch * heads, tq, tk}, std::move(m));
}

}  // namespace

std::string_view scale_mode_name(ScaleMode mode) {
  switch (mode) {
    case ScaleMode::kNone: return "none";
    case ScaleMode::kFixed: return "fixed";
    case ScaleMode::kLayerNorm: return "layernorm";
  }
  return "?";
}

ScaleMode parse_scale_mode(std::string_view name) {
  if (name == "none") return ScaleMode::kNone;
  if (name == "fixed") return ScaleMode::kFixed;
  if (name == "layernorm" || name == "ln") return ScaleMode::kLayerNorm;
  throw ConfigError("unknown scale mode '" + std::string(name) + "' (none|fixed|layernorm)");
}

SiteFlags SiteFlags::parse(std::string_view list) {
  SiteFlags f;
  list = trim(list);
  if (list.empty() || list == "none") return f;
  if (list == "all") return from_bits(0xff);
  while (!list.empty()) {
    const auto comma = list.find(',');
    const std::string_view item = trim(list.substr(0, comma));
    list = comma == std::string_view::npos ? std::string_view{} : list.substr(comma + 1);
    if (item.empty()) continue;
    bool found = false;
    for (std::size_t i = 0; i < 8; ++i)
      if (item == kSiteNames[i]) {
        *site_field(f, i) = true;
        found = true;
      }
    if (!found) throw ConfigError("unknown binarization site '" + std::string(item) + "'");
  }
  return f;
}

std::string SiteFlags::str() const {
  std::string out;
  SiteFlags copy = *this;
  for (std::size_t i = 0; i < 8; ++i)
    if (*site_field(copy, i)) {
      if (!out.empty()) out += ',';
      out += kSiteNames[i];
    }
  return out.empty() ? "none" : out;
}

std::uint8_t SiteFlags::bits() const {
  std::uint8_t b = 0;
  SiteFlags copy = *this;
  for (std::size_t i = 0; i < 8; ++i)
    if (*site_field(copy, i)) b |= static_cast<std::uint8_t>(1u << i);
  return b;
}

SiteFlags SiteFlags::from_bits(std::uint8_t bits) {
  SiteFlags f;
  for (std::size_t i = 0; i < 8; ++i) *site_field(f, i) = (bits >> i) & 1u;
  return f;
}

void TransformerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (encoder_layers < 1 || decoder_layers < 1) fail("need at least one encoder and one decoder layer");
  if (d_model < 1 || d_ff < 1 || n_heads < 1) fail("d_model, d_ff and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (vocab_size <= kFirstContentToken) fail("vocab_size must exceed the reserved ids");
  if (max_len < 2) fail("max_len must be at least 2");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must lie in [0,1)");
  if (!(scale > 0)) fail("scale must be positive");
  if (!(act_bound >= 0) || !(weight_bound >= 0)) fail("bounds must be >= 0");
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<int>>& seqs, std::size_t len) {
  TokenBatch tb;
  tb.batch = seqs.size();
  std::size_t longest = 0;
  for (const auto& s : seqs) longest = std::max(longest, s.size());
  tb.len = len == 0 ? longest : len;
  if (longest > tb.len) throw ShapeError("sequence longer than the requested length");
  tb.ids.assign(tb.batch * tb.len, kPad);
  for (std::size_t b = 0; b < seqs.size(); ++b) std::copy(seqs[b].begin(), seqs[b].end(), tb.ids.begin() + b * tb.len);
  return tb;
}

std::vector<int> TokenBatch::sequence(std::size_t b) const {
  std::vector<int> out;
  for (std::size_t t = 0; t < len; ++t)
    if (at(b, t) != kPad) out.push_back(at(b, t));
  return out;
}

BinarizeSpec activation_spec(double act_bound, int axis) {
  return act_bound > 0 ? BinarizeSpec::fixed(act_bound, axis) : BinarizeSpec::dynamic(axis);
}

BinarizeSpec weight_spec(double weight_bound) {
  return weight_bound > 0 ? BinarizeSpec::fixed(weight_bound, 0) : BinarizeSpec::dynamic(0);
}

Tensor binarized_dense(const Tensor& a, const DenseParams& p, const DenseOptions& o) {
  if (a.rank() != 2) throw ShapeError("dense: expected [N, D] input, got " + shape_str(a.shape()));
  Tensor out;
  if (p.packed_w && o.binarize_w) {
    if (o.binarize_a) {
      const BinarizeSpec spec = activation_spec(o.act_bound);
      Tensor bound = compute_bound(a, spec);
      out = binary_matmul(pack(binarize(a, bound, spec), bound, PackOrientation::kRows), *p.packed_w);
    } else {
      out = sign_matmul(a, *p.packed_w);
    }
  } else {
    Tensor x = o.binarize_a ? binarize_ste(a, activation_spec(o.act_bound)) : a;
    Tensor w = o.binarize_w ? binarize_ste(p.w, weight_spec(o.weight_bound)) : p.w;
    out = matmul(x, w);
  }
  out = add(out, p.b);
  switch (o.scale_mode) {
    case ScaleMode::kNone: break;
    case ScaleMode::kFixed: out = scale(out, static_cast<Real>(1.0 / o.scale)); break;
    case ScaleMode::kLayerNorm:
      if (!p.ln_gamma.defined()) throw Error("dense: layernorm requested without parameters");
      out = layer_norm(out, p.ln_gamma, p.ln_beta);
      break;
  }
  return out;
}

Tensor bmt_ffn(const Tensor& a, const FfnParams& p, const FfnOptions& o, FfnTrace* trace) {
  const bool active = o.binarize_a || o.binarize_w;
  DenseOptions d1{o.binarize_a, o.binarize_w, site_mode(p.dense1, o.scale_mode, active), o.scale, o.act_bound,
                  o.weight_bound};
  Tensor h = relu(binarized_dense(a, p.dense1, d1));
  if (p.inner_gamma.defined()) h = layer_norm(h, p.inner_gamma, p.inner_beta);
  if (trace) {
    trace->hidden = h.detach();
    if (o.binarize_a) {
      const BinarizeSpec spec = activation_spec(o.act_bound);
      trace->hidden_binarized = binarize(h, compute_bound(h, spec), spec);
    } else {
      trace->hidden_binarized = Tensor();
    }
  }
  DenseOptions d2 = d1;
  d2.scale_mode = site_mode(p.dense2, o.scale_mode, active);
  return binarized_dense(h, p.dense2, d2);
}

bool ffn_has_inner_ln(const TransformerConfig& cfg) {
  return cfg.sites.ffn_site() && cfg.ffn_inner_ln &&
         (cfg.scale_mode == ScaleMode::kLayerNorm || cfg.sites.a_ffn);
}

bool ffn_has_outer_ln(const TransformerConfig& cfg) {
  return cfg.sites.ffn_site() && cfg.scale_mode == ScaleMode::kLayerNorm && cfg.ffn_outer_ln;
}

std::vector<std::uint8_t> padding_mask(const TokenBatch& queries, const TokenBatch& keys) {
  if (queries.batch != keys.batch) throw ShapeError("padding_mask: batch sizes differ");
  std::vector<std::uint8_t> keep(queries.batch * queries.len * keys.len);
  for (std::size_t b = 0; b < queries.batch; ++b)
    for (std::size_t i = 0; i < queries.len; ++i)
      for (std::size_t j = 0; j < keys.len; ++j)
        keep[(b * queries.len + i) * keys.len + j] = keys.at(b, j) != kPad;
  return keep;
}

std::vector<std::uint8_t> causal_mask(const TokenBatch& tokens) {
  const std::size_t t = tokens.len;
  std::vector<std::uint8_t> keep(tokens.batch * t * t);
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) keep[(b * t + i) * t + j] = j <= i && tokens.at(b, j) != kPad;
  return keep;
}

Tensor bmt_attention(const Tensor& x_q, const Tensor& x_kv, std::size_t batch, std::span<const std::uint8_t> keep,
                     const AttentionParams& p, const AttentionOptions& o, AttentionTrace* trace) {
  if (x_q.rank() != 2 || x_kv.rank() != 2 || batch == 0 || x_q.dim(0) % batch || x_kv.dim(0) % batch)
    throw ShapeError("attention: inputs must be [batch*T, d]");
  const std::size_t heads = o.heads, d = x_q.dim(1);
  if (d % heads) throw ShapeError("attention: d_model not divisible by heads");
  const std::size_t tq = x_q.dim(0) / batch, tk = x_kv.dim(0) / batch, dk = d / heads;
  if (keep.size() != batch * tq * tk) throw ShapeError("attention: mask size mismatch");

  const bool qkv_active = o.a_qkv || o.w_qkv;
  auto proj = [&](const Tensor& x, const DenseParams& dp) {
    DenseOptions dopt{o.a_qkv, o.w_qkv, site_mode(dp, o.scale_mode, qkv_active), o.scale, o.act_bound,
                      o.weight_bound};
    return split_heads(binarized_dense(x, dp, dopt), batch, heads);
  };
  Tensor q = proj(x_q, p.q), k = proj(x_kv, p.k), v = proj(x_kv, p.v);

  // Both einsum operands are binarized along their contraction axis.
  Tensor scores;
  if (o.qk) {
    const BinarizeSpec spec = activation_spec(o.act_bound, -1);
    if (o.packed_einsums)
      scores = packed_group_matmul_nt(q, k, spec);
    else
      scores = matmul(binarize_ste(q, spec), transpose(binarize_ste(k, spec), 1, 2));
  } else {
    scores = matmul(q, transpose(k, 1, 2));
  }
  scores = scale(scores, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dk))));
  Tensor probs = masked_softmax(scores, keep, heads);
  if (trace) trace->probs = probs.detach();

  Tensor ctx;
  if (o.scorev) {
    // Binarized zeros land on +B/2, so masked keys are cleared again.
    Tensor pb = mul(binarize_ste(probs, activation_spec(o.act_bound, -1)), keep_tensor(keep, batch, heads, tq, tk));
    ctx = matmul(pb, binarize_ste(v, activation_spec(o.act_bound, 1)));
  } else {
    ctx = matmul(probs, v);
  }
  ctx = merge_heads(ctx, batch, heads);

  const bool out_active = o.a_out || o.w_out;
  DenseOptions oo{o.a_out, o.w_out, site_mode(p.o, o.scale_mode, out_active), o.scale, o.act_bound,
                  o.weight_bound};
  Tensor out = binarized_dense(ctx, p.o, oo);
  if (o.shortcut) out = add(out, ctx);
  return out;
}

// ---- parameters -----------------------------------------------------------

void ParamStore::add(std::string name, Tensor t) {
  if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
  index_.emplace(name, items_.size());
  items_.emplace_back(std::move(name), std::move(t));
}

bool ParamStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const Tensor& ParamStore::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("missing parameter '" + std::string(name) + "'");
  return items_[it->second].second;
}

Tensor& ParamStore::get(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

std::size_t ParamStore::count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_)
    if (name.compare(0, prefix.size(), prefix) == 0) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

ParamCounts count_params(const TransformerConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model), ff = static_cast<std::size_t>(cfg.d_ff);
  const std::size_t ln = 2 * d, dense = d * d + d;
  const bool ln_mode = cfg.scale_mode == ScaleMode::kLayerNorm;
  std::size_t attn = 4 * dense;
  if (cfg.sites.qkv_site() && ln_mode) attn += 3 * ln;
  if (cfg.sites.out_site() && ln_mode) attn += ln;
  std::size_t ffn = 2 * d * ff + ff + d;
  if (ffn_has_inner_ln(cfg)) ffn += 2 * ff;
  if (ffn_has_outer_ln(cfg)) ffn += ln;
  ParamCounts c;
  c.encoder = static_cast<std::size_t>(cfg.encoder_layers) * (2 * ln + attn + ffn) + ln;
  c.decoder = static_cast<std::size_t>(cfg.decoder_layers) * (3 * ln + 2 * attn + ffn) + ln;
  c.embedding = static_cast<std::size_t>(cfg.vocab_size) * d;
  return c;
}

std::vector<std::pair<std::string, Shape>> param_shapes(const TransformerConfig& cfg) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model), ff = static_cast<std::size_t>(cfg.d_ff);
  const bool ln_mode = cfg.scale_mode == ScaleMode::kLayerNorm;
  std::vector<std::pair<std::string, Shape>> out;
  auto ln = [&](const std::string& p, std::size_t n) {
    out.emplace_back(p + ".g", Shape{n});
    out.emplace_back(p + ".b", Shape{n});
  };
  auto dense = [&](const std::string& p, std::size_t in, std::size_t o, bool with_ln) {
    out.emplace_back(p + ".w", Shape{in, o});
    out.emplace_back(p + ".b", Shape{o});
    if (with_ln) ln(p + ".ln", o);
  };
  auto attention = [&](const std::string& p) {
    const bool qkv_ln = cfg.sites.qkv_site() && ln_mode;
    dense(p + ".q", d, d, qkv_ln);
    dense(p + ".k", d, d, qkv_ln);
    dense(p + ".v", d, d, qkv_ln);
    dense(p + ".o", d, d, cfg.sites.out_site() && ln_mode);
  };
  auto ffn = [&](const std::string& p) {
    dense(p + ".fc1", d, ff, false);
    if (ffn_has_inner_ln(cfg)) ln(p + ".inner_ln", ff);
    dense(p + ".fc2", ff, d, ffn_has_outer_ln(cfg));
  };
  out.emplace_back("emb", Shape{static_cast<std::size_t>(cfg.vocab_size), d});
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    ln(p + ".ln1", d);
    attention(p + ".attn");
    ln(p + ".ln2", d);
    ffn(p + ".ffn");
  }
  ln("enc.ln", d);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    ln(p + ".ln1", d);
    attention(p + ".self");
    ln(p + ".ln2", d);
    attention(p + ".cross");
    ln(p + ".ln3", d);
    ffn(p + ".ffn");
  }
  ln("dec.ln", d);
  return out;
}

// ---- transformer ----------------------------------------------------------

Transformer::Transformer(TransformerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  init_params(seed);
  bind_params();
}

Transformer::Transformer(TransformerConfig cfg, ParamStore params, PackedWeights packed)
    : cfg_(std::move(cfg)), params_(std::move(params)), packed_(std::move(packed)) {
  const auto expected = param_shapes(cfg_);
  if (expected.size() != params_.size())
    throw ConfigError("parameter count mismatch: expected " + std::to_string(expected.size()) + " tensors, got " +
                      std::to_string(params_.size()));
  for (const auto& [name, shape] : expected) {
    if (!params_.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    if (params_.get(name).shape() != shape)
      throw ConfigError("parameter '" + name + "' has shape " + shape_str(params_.get(name).shape()) +
                        ", expected " + shape_str(shape));
  }
  for (const auto& [name, m] : packed_) {
    if (!params_.contains(name)) throw ConfigError("packed weight '" + name + "' has no parameter");
    const Shape& s = params_.get(name).shape();
    if (m.n_rows != s[1] || m.n_cols != s[0]) throw ConfigError("packed weight '" + name + "' has wrong shape");
    m.validate();
  }
  bind_params();
}

void Transformer::init_params(std::uint64_t seed) {
  Rng rng(seed);
  const double emb_sd = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  for (auto& [name, shape] : param_shapes(cfg_)) {
    std::vector<Real> v(shape_numel(shape));
    const bool is_g = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool is_w = name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
    if (name == "emb") {
      for (auto& x : v) x = static_cast<Real>(rng.normal(0, emb_sd));
    } else if (is_w) {
      // Xavier normal.
      const double sd = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& x : v) x = static_cast<Real>(rng.normal(0, sd));
    } else if (is_g) {
      std::fill(v.begin(), v.end(), Real(1));
    }
    params_.add(name, Tensor::parameter(shape, std::move(v)));
  }
}

DenseParams Transformer::bind_dense(const std::string& prefix, bool has_ln) const {
  DenseParams p;
  p.w = params_.get(prefix + ".w");
  p.b = params_.get(prefix + ".b");
  if (has_ln) {
    p.ln_gamma = params_.get(prefix + ".ln.g");
    p.ln_beta = params_.get(prefix + ".ln.b");
  }
  auto it = packed_.find(prefix + ".w");
  if (it != packed_.end()) p.packed_w = &it->second;
  return p;
}

AttentionParams Transformer::bind_attention(const std::string& prefix) const {
  AttentionParams a;
  a.q = bind_dense(prefix + ".q", params_.contains(prefix + ".q.ln.g"));
  a.k = bind_dense(prefix + ".k", params_.contains(prefix + ".k.ln.g"));
  a.v = bind_dense(prefix + ".v", params_.contains(prefix + ".v.ln.g"));
  a.o = bind_dense(prefix + ".o", params_.contains(prefix + ".o.ln.g"));
  return a;
}

FfnParams Transformer::bind_ffn(const std::string& prefix) const {
  FfnParams f;
  f.dense1 = bind_dense(prefix + ".fc1", false);
  f.dense2 = bind_dense(prefix + ".fc2", params_.contains(prefix + ".fc2.ln.g"));
  if (params_.contains(prefix + ".inner_ln.g")) {
    f.inner_gamma = params_.get(prefix + ".inner_ln.g");
    f.inner_beta = params_.get(prefix + ".inner_ln.b");
  }
  return f;
}

void Transformer::bind_params() {
  embedding_ = params_.get("emb");
  enc_ln_g_ = params_.get("enc.ln.g");
  enc_ln_b_ = params_.get("enc.ln.b");
  dec_ln_g_ = params_.get("dec.ln.g");
  dec_ln_b_ = params_.get("dec.ln.b");
  enc_.clear();
  dec_.clear();
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayer e;
    e.ln1_g = params_.get(p + ".ln1.g");
    e.ln1_b = params_.get(p + ".ln1.b");
    e.ln2_g = params_.get(p + ".ln2.g");
    e.ln2_b = params_.get(p + ".ln2.b");
    e.attn = bind_attention(p + ".attn");
    e.ffn = bind_ffn(p + ".ffn");
    enc_.push_back(std::move(e));
  }
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer e;
    e.ln1_g = params_.get(p + ".ln1.g");
    e.ln1_b = params_.get(p + ".ln1.b");
    e.ln2_g = params_.get(p + ".ln2.g");
    e.ln2_b = params_.get(p + ".ln2.b");
    e.ln3_g = params_.get(p + ".ln3.g");
    e.ln3_b = params_.get(p + ".ln3.b");
    e.self_attn = bind_attention(p + ".self");
    e.cross_attn = bind_attention(p + ".cross");
    e.ffn = bind_ffn(p + ".ffn");
    dec_.push_back(std::move(e));
  }
  const std::size_t d = static_cast<std::size_t>(cfg_.d_model), len = static_cast<std::size_t>(cfg_.max_len);
  positions_.assign(len * d, Real(0));
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / d);
      positions_[pos * d + i] = static_cast<Real>(std::sin(angle));
      if (i + 1 < d) positions_[pos * d + i + 1] = static_cast<Real>(std::cos(angle));
    }
}

AttentionOptions Transformer::attention_options() const {
  const SiteFlags& s = cfg_.sites;
  AttentionOptions o;
  o.heads = static_cast<std::size_t>(cfg_.n_heads);
  o.shortcut = s.out_site() && cfg_.attn_shortcut;
  o.a_qkv = s.a_qkv && quant_.activations;
  o.w_qkv = s.w_qkv && quant_.weights;
  o.a_out = s.a_out && quant_.activations;
  o.w_out = s.w_out && quant_.weights;
  o.qk = s.qk && quant_.activations;
  o.scorev = s.scorev && quant_.activations;
  o.scale_mode = cfg_.scale_mode;
  o.scale = cfg_.scale;
  o.act_bound = cfg_.act_bound;
  o.weight_bound = cfg_.weight_bound;
  o.packed_einsums = uses_packed_weights();
  return o;
}

FfnOptions Transformer::ffn_options() const {
  FfnOptions o;
  o.binarize_a = cfg_.sites.a_ffn && quant_.activations;
  o.binarize_w = cfg_.sites.w_ffn && quant_.weights;
  o.scale_mode = cfg_.scale_mode;
  o.scale = cfg_.scale;
  o.act_bound = cfg_.act_bound;
  o.weight_bound = cfg_.weight_bound;
  return o;
}

Tensor Transformer::maybe_dropout(const Tensor& x) {
  if (cfg_.dropout <= 0 || !dropout_seed_) return x;
  return dropout(x, static_cast<Real>(cfg_.dropout), splitmix64(*dropout_seed_ ^ splitmix64(dropout_counter_++)));
}

Tensor Transformer::embed(const TokenBatch& tokens) {
  if (tokens.len > static_cast<std::size_t>(cfg_.max_len))
    throw ShapeError("sequence length " + std::to_string(tokens.len) + " exceeds max_len " +
                     std::to_string(cfg_.max_len));
  if (tokens.batch == 0 || tokens.len == 0) throw ShapeError("empty token batch");
  const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
  Tensor e = scale(embedding(embedding_, tokens.ids), static_cast<Real>(std::sqrt(static_cast<double>(d))));
  Tensor pos(Shape{tokens.len, d}, std::vector<Real>(positions_.begin(), positions_.begin() + tokens.len * d));
  Tensor x = reshape(add(reshape(e, {tokens.batch, tokens.len, d}), pos), {tokens.batch * tokens.len, d});
  return maybe_dropout(x);
}

Tensor Transformer::encode(const TokenBatch& src) {
  const auto keep = padding_mask(src, src);
  const AttentionOptions ao = attention_options();
  const FfnOptions fo = ffn_options();
  Tensor x = embed(src);
  for (const auto& layer : enc_) {
    Tensor h = layer_norm(x, layer.ln1_g, layer.ln1_b);
    x = add(x, maybe_dropout(bmt_attention(h, h, src.batch, keep, layer.attn, ao)));
    h = layer_norm(x, layer.ln2_g, layer.ln2_b);
    x = add(x, maybe_dropout(bmt_ffn(h, layer.ffn, fo, ffn_trace_)));
  }
  return layer_norm(x, enc_ln_g_, enc_ln_b_);
}

Tensor Transformer::decode(const Tensor& memory, const TokenBatch& src, const TokenBatch& tgt_in) {
  if (src.batch != tgt_in.batch) throw ShapeError("decode: source and target batch sizes differ");
  if (memory.rank() != 2 || memory.dim(0) != src.batch * src.len)
    throw ShapeError("decode: memory does not match the source batch");
  const auto self_keep = causal_mask(tgt_in);
  const auto cross_keep = padding_mask(tgt_in, src);
  const AttentionOptions ao = attention_options();
  const FfnOptions fo = ffn_options();
  Tensor y = embed(tgt_in);
  bool first = true;
  for (const auto& layer : dec_) {
    Tensor h = layer_norm(y, layer.ln1_g, layer.ln1_b);
    y = add(y, maybe_dropout(bmt_attention(h, h, tgt_in.batch, self_keep, layer.self_attn, ao,
                                           first ? attn_trace_ : nullptr)));
    first = false;
    h = layer_norm(y, layer.ln2_g, layer.ln2_b);
    y = add(y, maybe_dropout(bmt_attention(h, memory, tgt_in.batch, cross_keep, layer.cross_attn, ao)));
    h = layer_norm(y, layer.ln3_g, layer.ln3_b);
    y = add(y, maybe_dropout(bmt_ffn(h, layer.ffn, fo)));
  }
  Tensor h = layer_norm(y, dec_ln_g_, dec_ln_b_);
  Tensor logits = matmul(h, transpose(embedding_, 0, 1));
  return reshape(logits, {tgt_in.batch, tgt_in.len, static_cast<std::size_t>(cfg_.vocab_size)});
}

Tensor Transformer::forward(const TokenBatch& src, const TokenBatch& tgt_in) {
  return decode(encode(src), src, tgt_in);
}

std::vector<std::string> Transformer::binarized_weight_names() const {
  std::vector<std::string> out;
  const SiteFlags& s = cfg_.sites;
  auto attention = [&](const std::string& p) {
    if (s.w_qkv)
      for (const char* m : {".q.w", ".k.w", ".v.w"}) out.push_back(p + m);
    if (s.w_out) out.push_back(p + ".o.w");
  };
  auto ffn = [&](const std::string& p) {
    if (s.w_ffn) {
      out.push_back(p + ".fc1.w");
      out.push_back(p + ".fc2.w");
    }
  };
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    attention(p + ".attn");
    ffn(p + ".ffn");
  }
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    attention(p + ".self");
    attention(p + ".cross");
    ffn(p + ".ffn");
  }
  return out;
}

PackedWeights Transformer::export_packed() const {
  PackedWeights out;
  const BinarizeSpec spec = weight_spec(cfg_.weight_bound);
  for (const auto& name : binarized_weight_names()) {
    const Tensor& w = params_.get(name);
    Tensor bound = compute_bound(w, spec);
    out.emplace(name, pack(binarize(w, bound, spec), bound, PackOrientation::kCols));
  }
  return out;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
