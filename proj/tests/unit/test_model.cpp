#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "bmt/checkpoint.hpp"
#include "bmt/model.hpp"
#include "bmt/random.hpp"
#include "doctest.h"

using namespace bmt;

namespace {

TransformerConfig tiny(SiteFlags sites = {}, ScaleMode mode = ScaleMode::kLayerNorm) {
  TransformerConfig c;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.n_heads = 2;
  c.vocab_size = 12;
  c.max_len = 10;
  c.sites = sites;
  c.scale_mode = mode;
  return c;
}

Tensor random_tensor(Shape s, Rng& rng, double mean = 0, double sd = 1) {
  std::vector<Real> v(shape_numel(s));
  for (auto& x : v) x = static_cast<Real>(rng.normal(mean, sd));
  return Tensor(std::move(s), std::move(v));
}

TokenBatch sample_batch(std::size_t batch, std::size_t len, int vocab, Rng& rng) {
  std::vector<std::vector<int>> seqs;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<int> s;
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(len)));
    for (std::size_t t = 0; t < n; ++t) s.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, vocab - 1)));
    seqs.push_back(s);
  }
  return TokenBatch::from_sequences(seqs, len);
}

std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / (std::string(stem) + std::to_string(::getpid()))).string();
}

}  // namespace

TEST_CASE("site flags parse, print and pack to bits") {
  SiteFlags f = SiteFlags::parse("w_ffn, a_qkv");
  CHECK(f.a_qkv);
  CHECK(f.w_ffn);
  CHECK_FALSE(f.qk);
  CHECK(f.str() == "a_qkv,w_ffn");
  CHECK(f.bits() == 0b10000001);
  CHECK(SiteFlags::from_bits(f.bits()) == f);
  CHECK(SiteFlags::parse("none").bits() == 0);
  CHECK(SiteFlags::parse("all").bits() == 0xff);
  CHECK_THROWS_AS(SiteFlags::parse("a_qkv,bogus"), ConfigError);
}

TEST_CASE("parameter counts match the enumerated tensors") {
  for (int mode = 0; mode < 3; ++mode)
    for (unsigned bits : {0u, 0x03u, 0x0cu, 0xc0u, 0x40u, 0x80u, 0xffu}) {
      TransformerConfig c = tiny(SiteFlags::from_bits(static_cast<std::uint8_t>(bits)), static_cast<ScaleMode>(mode));
      Transformer m(c, 1);
      const ParamCounts pc = count_params(c);
      CHECK(pc.encoder == m.params().count("enc."));
      CHECK(pc.decoder == m.params().count("dec."));
      CHECK(pc.embedding == m.params().count("emb"));
      CHECK(pc.total() == m.params().count());
    }
}

TEST_CASE("config validation") {
  TransformerConfig c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.vocab_size = 3;
  CHECK_THROWS_AS(Transformer(c, 1), ConfigError);
}

TEST_CASE("float FFN equals the plain ReLU network bit for bit") {
  Rng rng(3);
  FfnParams p;
  p.dense1.w = random_tensor({8, 12}, rng);
  p.dense1.b = random_tensor({12}, rng);
  p.dense2.w = random_tensor({12, 8}, rng);
  p.dense2.b = random_tensor({8}, rng);
  Tensor x = random_tensor({5, 8}, rng);
  Tensor ref = add(matmul(relu(add(matmul(x, p.dense1.w), p.dense1.b)), p.dense2.w), p.dense2.b);
  FfnOptions o;
  o.scale_mode = ScaleMode::kFixed;  // no effect while nothing binarizes
  o.scale = 64;
  CHECK(bmt_ffn(x, p, o).to_vector() == ref.to_vector());
}

TEST_CASE("fixed scale divides a binarized dense output") {
  Rng rng(4);
  DenseParams p;
  p.w = random_tensor({6, 3}, rng);
  p.b = Tensor(Shape{3}, Real(0));
  Tensor x = random_tensor({2, 6}, rng);
  DenseOptions o{true, true, ScaleMode::kNone, 1, 0, 0};
  Tensor plain = binarized_dense(x, p, o);
  o.scale_mode = ScaleMode::kFixed;
  o.scale = 8;
  Tensor scaled = binarized_dense(x, p, o);
  for (std::size_t i = 0; i < plain.numel(); ++i) CHECK(scaled[i] == doctest::Approx(plain[i] / 8));
}

TEST_CASE("without the inner LayerNorm the binarized post-ReLU tensor is constant") {
  Rng rng(5);
  FfnParams p;
  p.dense1.w = random_tensor({16, 32}, rng, 0, 0.25);
  p.dense1.b = random_tensor({32}, rng, 0.5, 0.1);
  p.dense2.w = random_tensor({32, 16}, rng);
  p.dense2.b = Tensor(Shape{16}, Real(0));
  Tensor x = random_tensor({8, 16}, rng, 0.3, 1);
  FfnOptions o{true, true, ScaleMode::kFixed, 64, 0, 0};
  FfnTrace t;
  bmt_ffn(x, p, o, &t);
  auto hb = t.hidden_binarized.values();
  auto bound = compute_bound(t.hidden, activation_spec(0));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 32; ++c) CHECK(hb[r * 32 + c] == doctest::Approx(bound[r] / 2));

  p.inner_gamma = Tensor(Shape{32}, Real(1));
  p.inner_beta = Tensor(Shape{32}, Real(0));
  bmt_ffn(x, p, o, &t);
  std::size_t negative = 0;
  for (Real v : t.hidden_binarized.values()) negative += v < 0;
  CHECK(negative > 0);
}

TEST_CASE("decoder self-attention is causal") {
  Transformer m(tiny(), 7);
  Rng rng(8);
  TokenBatch src = sample_batch(2, 6, 12, rng), tgt = sample_batch(2, 6, 12, rng);
  AttentionTrace trace;
  m.set_attention_trace(&trace);
  Tensor logits = m.forward(src, tgt);
  const std::size_t t = tgt.len;
  auto probs = trace.probs.values();
  for (std::size_t g = 0; g < trace.probs.dim(0); ++g)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) CHECK(probs[(g * t + i) * t + j] == 0);

  // Changing the last target token leaves earlier positions untouched.
  TokenBatch tgt2 = tgt;
  tgt2.ids[t - 1] = tgt2.ids[t - 1] == 5 ? 6 : 5;
  m.set_attention_trace(nullptr);
  Tensor logits2 = m.forward(src, tgt2);
  const std::size_t v = 12;
  for (std::size_t i = 0; i < (t - 1) * v; ++i) CHECK(logits[i] == logits2[i]);
}

TEST_CASE("extra padding does not change per-token outputs") {
  for (unsigned bits : {0u, 0xc3u}) {
    Transformer m(tiny(SiteFlags::from_bits(static_cast<std::uint8_t>(bits))), 9);
    std::vector<std::vector<int>> src = {{3, 4, 5}, {6, 7, 8, 9}}, tgt = {{kBos, 4, 5}, {kBos, 9, 8, 7}};
    TokenBatch s1 = TokenBatch::from_sequences(src), t1 = TokenBatch::from_sequences(tgt);
    TokenBatch s2 = TokenBatch::from_sequences(src, 8), t2 = TokenBatch::from_sequences(tgt, 7);
    Tensor a = m.forward(s1, t1), b = m.forward(s2, t2);
    const std::size_t v = 12;
    for (std::size_t bi = 0; bi < 2; ++bi)
      for (std::size_t t = 0; t < tgt[bi].size(); ++t)
        for (std::size_t k = 0; k < v; ++k)
          CHECK(a[(bi * t1.len + t) * v + k] == doctest::Approx(b[(bi * t2.len + t) * v + k]).epsilon(1e-5));
  }
}

TEST_CASE("float quant state never calls the binarizer") {
  Transformer m(tiny(SiteFlags::parse("all")), 11);
  m.set_quant_state(QuantState::none());
  Rng rng(12);
  reset_binarize_ste_calls();
  m.forward(sample_batch(2, 5, 12, rng), sample_batch(2, 5, 12, rng));
  CHECK(binarize_ste_calls() == 0);
  m.set_quant_state(QuantState::all());
  m.forward(sample_batch(2, 5, 12, rng), sample_batch(2, 5, 12, rng));
  CHECK(binarize_ste_calls() > 0);
}

TEST_CASE("gradients flow through every binarized site") {
  Transformer m(tiny(SiteFlags::parse("all")), 13);
  Rng rng(14);
  Tensor logits = m.forward(sample_batch(2, 5, 12, rng), sample_batch(2, 5, 12, rng));
  backward(mean(square(logits)));
  for (const auto& [name, t] : m.params()) {
    bool nonzero = false;
    for (Real g : t.grad()) nonzero |= g != 0;
    INFO(name);
    CHECK(nonzero);
  }
}

TEST_CASE("packed export reproduces fake-quant logits") {
  for (const char* sites : {"w_qkv,w_out,w_ffn", "w_ffn", "w_qkv", "w_out,w_ffn"}) {
    TransformerConfig c = tiny(SiteFlags::parse(sites));
    Transformer m(c, 15);
    Rng rng(16);
    TokenBatch src = sample_batch(3, 7, 12, rng), tgt = sample_batch(3, 6, 12, rng);
    Tensor ref = m.forward(src, tgt);
    const std::string path = temp_path("bmt_packed_");
    save_checkpoint(path, m, true);
    Transformer packed = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(packed.uses_packed_weights());
    CHECK(packed.packed_weights().size() == m.binarized_weight_names().size());
    Tensor got = packed.forward(src, tgt);
    const double err = max_relative_error(got.values(), ref.values());
    INFO(std::string(sites), " err=", err);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("fully binarized model runs from packed weights") {
  Transformer m(tiny(SiteFlags::parse("all")), 15);
  Rng rng(16);
  TokenBatch src = sample_batch(3, 7, 12, rng), tgt = sample_batch(3, 6, 12, rng);
  const std::string path = temp_path("bmt_packed_");
  save_checkpoint(path, m, true);
  Transformer packed = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(packed.uses_packed_weights());
  Tensor got = packed.forward(src, tgt);
  CHECK(got.shape() == m.forward(src, tgt).shape());
}

TEST_CASE("checkpoint round trip is exact") {
  TransformerConfig c = tiny(SiteFlags::parse("a_ffn,w_ffn"), ScaleMode::kFixed);
  c.scale = 8;
  c.act_bound = 2;
  Transformer m(c, 17);
  const std::string path = temp_path("bmt_ckpt_");
  ParamStore extras;
  extras.add("adam.step", Tensor(Shape{1}, Real(42)));
  save_checkpoint(path, m, false, &extras);
  Checkpoint ck = read_checkpoint(path);
  CHECK(ck.config.sites == c.sites);
  CHECK(ck.config.scale_mode == ScaleMode::kFixed);
  CHECK(ck.config.act_bound == 2);
  CHECK(ck.extras.get("adam.step").item() == 42);
  for (const auto& [name, t] : m.params()) CHECK(ck.params.get(name).to_vector() == t.to_vector());

  // Corruptions are reported, not silently accepted.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(read_checkpoint(path), ConfigError);
  std::filesystem::resize_file(path, 40);
  CHECK_THROWS_AS(read_checkpoint(path), ConfigError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_checkpoint(path), Error);
}

TEST_CASE("out-of-range inputs are rejected") {
  Transformer m(tiny(), 18);
  TokenBatch ok = TokenBatch::from_sequences({{3, 4}});
  TokenBatch bad = TokenBatch::from_sequences({{3, 40}});
  CHECK_THROWS_AS(m.forward(bad, ok), Error);
  TokenBatch long_batch = TokenBatch::from_sequences({std::vector<int>(11, 3)});
  CHECK_THROWS_AS(m.forward(long_batch, ok), ShapeError);
}
