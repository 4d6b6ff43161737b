#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bmt/binarizer.hpp"
#include "bmt/bitkernel.hpp"
#include "bmt/tensor.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

/// What follows a binarized dense layer: nothing, division by a fixed s, or a
/// learnable LayerNorm.
enum class ScaleMode { kNone = 0, kFixed = 1, kLayerNorm = 2 };

std::string_view scale_mode_name(ScaleMode mode);
ScaleMode parse_scale_mode(std::string_view name);

/// The eight matmul operands that can be binarized independently.
struct SiteFlags {
  bool a_qkv = false;
  bool w_qkv = false;
  bool a_out = false;
  bool w_out = false;
  bool qk = false;      ///< query-key einsum, both operands
  bool scorev = false;  ///< score-value einsum, both operands
  bool a_ffn = false;
  bool w_ffn = false;

  /// Comma list over {a_qkv,w_qkv,a_out,w_out,qk,scorev,a_ffn,w_ffn}; "" = none.
  static SiteFlags parse(std::string_view list);
  std::string str() const;
  /// Bit i follows the order of the names above (a_qkv = bit 0).
  std::uint8_t bits() const;
  static SiteFlags from_bits(std::uint8_t bits);

  bool any() const { return bits() != 0; }
  bool qkv_site() const { return a_qkv || w_qkv; }
  bool out_site() const { return a_out || w_out; }
  bool ffn_site() const { return a_ffn || w_ffn; }
  bool operator==(const SiteFlags&) const = default;
};

struct TransformerConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  int d_model = 64;
  int d_ff = 256;
  int n_heads = 4;
  int vocab_size = 32;
  int max_len = 32;
  double dropout = 0.0;
  SiteFlags sites;
  ScaleMode scale_mode = ScaleMode::kLayerNorm;
  double scale = 64.0;  ///< s for ScaleMode::kFixed
  /// Binarization bounds; 0 selects the dynamic per-slice max-abs bound.
  double act_bound = 0.0;
  double weight_bound = 0.0;
  /// Identity shortcut around a binarized attention output projection.
  bool attn_shortcut = true;
  /// LayerNorm between the FFN ReLU and the second binarized dense layer.
  bool ffn_inner_ln = true;
  /// LayerNorm on the FFN output (layernorm scale mode only).
  bool ffn_outer_ln = true;

  void validate() const;
  int d_head() const { return d_model / n_heads; }
};

/// Which classes of binarization are switched on by the training schedule.
struct QuantState {
  bool weights = true;
  bool activations = true;
  static QuantState none() { return {false, false}; }
  static QuantState all() { return {true, true}; }
};

/// Padded [batch, len] token ids; kPad marks padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> ids;

  int at(std::size_t b, std::size_t t) const { return ids[b * len + t]; }
  /// Pads every sequence to `len` (0 = longest sequence).
  static TokenBatch from_sequences(const std::vector<std::vector<int>>& seqs, std::size_t len = 0);
  std::vector<int> sequence(std::size_t b) const;  ///< row without padding
};

// ---- building blocks ------------------------------------------------------

struct DenseParams {
  Tensor w;  ///< [d_in, d_out]
  Tensor b;  ///< [d_out]
  Tensor ln_gamma, ln_beta;  ///< present when followed by a LayerNorm
  const PackedBitMatrix* packed_w = nullptr;  ///< exported weights (inference)
};

struct DenseOptions {
  bool binarize_a = false;
  bool binarize_w = false;
  ScaleMode scale_mode = ScaleMode::kNone;
  double scale = 1.0;
  double act_bound = 0.0;
  double weight_bound = 0.0;
};

BinarizeSpec activation_spec(double act_bound, int axis = -1);
BinarizeSpec weight_spec(double weight_bound);

/// binarize(A) . binarize(W) + b, then /s, LayerNorm, or nothing. Operands
/// are binarized only as requested; with packed weights the bit kernels are
/// used instead of the fake-quant float path.
Tensor binarized_dense(const Tensor& a, const DenseParams& p, const DenseOptions& o);

struct FfnParams {
  DenseParams dense1;
  DenseParams dense2;  ///< its LayerNorm, when present, is the FFN output norm
  Tensor inner_gamma, inner_beta;  ///< after the ReLU
};

/// Structural LayerNorms are implied by which tensors FfnParams carries.
struct FfnOptions {
  bool binarize_a = false;
  bool binarize_w = false;
  ScaleMode scale_mode = ScaleMode::kNone;
  double scale = 1.0;
  double act_bound = 0.0;
  double weight_bound = 0.0;
};

struct FfnTrace {
  Tensor hidden;            ///< input of the second dense layer
  Tensor hidden_binarized;  ///< that input after binarization (if binarized)
};

/// LN(LN(max(0, A_b W1_b + b1))_b W2_b + b2) with every LayerNorm present;
/// the plain ReLU FFN when nothing is binarized and no LayerNorm is present.
/// A fixed scale divides each dense output only while that layer binarizes.
Tensor bmt_ffn(const Tensor& a, const FfnParams& p, const FfnOptions& o, FfnTrace* trace = nullptr);

/// Which inner LayerNorms an FFN carries for a given configuration.
bool ffn_has_inner_ln(const TransformerConfig& cfg);
bool ffn_has_outer_ln(const TransformerConfig& cfg);

struct AttentionParams {
  DenseParams q, k, v, o;
};

struct AttentionOptions {
  std::size_t heads = 1;
  bool shortcut = false;  ///< identity around the output projection
  bool a_qkv = false, w_qkv = false, a_out = false, w_out = false, qk = false, scorev = false;
  ScaleMode scale_mode = ScaleMode::kLayerNorm;
  double scale = 1.0;
  double act_bound = 0.0;
  double weight_bound = 0.0;
  bool packed_einsums = false;  ///< bit kernel for the query-key einsum
};

struct AttentionTrace {
  Tensor probs;  ///< [batch*heads, Tq, Tk] softmax output
};

/// Multi-head attention. x_q is [batch*Tq, d], x_kv is [batch*Tk, d]; `keep`
/// is [batch, Tq, Tk] with 1 for visible keys.
Tensor bmt_attention(const Tensor& x_q, const Tensor& x_kv, std::size_t batch,
                     std::span<const std::uint8_t> keep, const AttentionParams& p,
                     const AttentionOptions& o, AttentionTrace* trace = nullptr);

/// [batch, Tq, Tk] key masks.
std::vector<std::uint8_t> padding_mask(const TokenBatch& queries, const TokenBatch& keys);
std::vector<std::uint8_t> causal_mask(const TokenBatch& tokens);

// ---- model ----------------------------------------------------------------

/// Ordered name -> tensor map; iteration order is insertion order.
class ParamStore {
 public:
  void add(std::string name, Tensor t);
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  /// Total element count of tensors whose name starts with `prefix`.
  std::size_t count(std::string_view prefix = "") const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct ParamCounts {
  std::size_t encoder = 0;    ///< N_e: encoder layers plus final LayerNorm
  std::size_t decoder = 0;    ///< N_d: decoder layers plus final LayerNorm
  std::size_t embedding = 0;  ///< shared embedding / readout table
  std::size_t total() const { return encoder + decoder + embedding; }
};

/// Closed-form parameter counts for a configuration.
ParamCounts count_params(const TransformerConfig& cfg);

/// Names and shapes of every parameter in construction order.
std::vector<std::pair<std::string, Shape>> param_shapes(const TransformerConfig& cfg);

using PackedWeights = std::map<std::string, PackedBitMatrix, std::less<>>;

/// Encoder-decoder transformer with pre-LayerNorm blocks, sinusoidal
/// positions and a readout tied to the shared embedding.
class Transformer {
 public:
  Transformer(TransformerConfig cfg, std::uint64_t seed);
  /// Adopts existing tensors (e.g. from a checkpoint); names must match.
  Transformer(TransformerConfig cfg, ParamStore params, PackedWeights packed = {});

  const TransformerConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void set_quant_state(QuantState q) { quant_ = q; }
  QuantState quant_state() const { return quant_; }

  /// Packed weights switch every weight-binarized dense layer to the bit
  /// kernels. Only valid for inference.
  bool uses_packed_weights() const { return !packed_.empty(); }
  const PackedWeights& packed_weights() const { return packed_; }

  /// Enables dropout with a per-forward seed (no-op while dropout == 0).
  void set_dropout_seed(std::optional<std::uint64_t> seed) { dropout_seed_ = seed; }

  /// [batch*S, d] final-LayerNorm encoder states.
  Tensor encode(const TokenBatch& src);
  /// Logits [batch, T, vocab] for teacher-forced decoder inputs.
  Tensor decode(const Tensor& memory, const TokenBatch& src, const TokenBatch& tgt_in);
  Tensor forward(const TokenBatch& src, const TokenBatch& tgt_in);

  /// Names of weight tensors that belong to weight-binarized dense sites.
  std::vector<std::string> binarized_weight_names() const;

  /// Snapshot of the dense sites as exported: binarized weights are packed
  /// with their current bounds.
  PackedWeights export_packed() const;

  void set_ffn_trace(FfnTrace* trace) { ffn_trace_ = trace; }
  void set_attention_trace(AttentionTrace* trace) { attn_trace_ = trace; }

 private:
  struct EncoderLayer {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionParams attn;
    FfnParams ffn;
  };
  struct DecoderLayer {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    AttentionParams self_attn, cross_attn;
    FfnParams ffn;
  };

  void init_params(std::uint64_t seed);
  void bind_params();
  DenseParams bind_dense(const std::string& prefix, bool has_ln) const;
  AttentionParams bind_attention(const std::string& prefix) const;
  FfnParams bind_ffn(const std::string& prefix) const;
  AttentionOptions attention_options() const;
  FfnOptions ffn_options() const;
  Tensor embed(const TokenBatch& tokens);
  Tensor maybe_dropout(const Tensor& x);

  TransformerConfig cfg_;
  ParamStore params_;
  PackedWeights packed_;
  QuantState quant_ = QuantState::all();
  std::optional<std::uint64_t> dropout_seed_;
  std::uint64_t dropout_counter_ = 0;
  Tensor embedding_, enc_ln_g_, enc_ln_b_, dec_ln_g_, dec_ln_b_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  std::vector<Real> positions_;  // [max_len, d_model]
  FfnTrace* ffn_trace_ = nullptr;
  AttentionTrace* attn_trace_ = nullptr;
};

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
