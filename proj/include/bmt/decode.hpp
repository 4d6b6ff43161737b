#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "bmt/data.hpp"
#include "bmt/model.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

struct Hypothesis {
  std::vector<int> tokens;  ///< generated content tokens, EOS excluded
  double log_prob = 0;      ///< model log-probability, including EOS when finished
  double score = 0;         ///< log_prob / lp(n) for beam search, log_prob otherwise
  bool finished = false;    ///< ended with EOS (false = stopped at max_len)

  /// Generated length counting the EOS.
  std::size_t length() const { return tokens.size() + (finished ? 1 : 0); }
};

/// Next-token distributions for a single source.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual int vocab_size() const = 0;
  /// Log-probabilities over the vocabulary for each prefix (content tokens
  /// generated so far, no BOS).
  virtual std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<int>>& prefixes) = 0;
};

/// Decodes a Transformer for one source sentence. Gradients are disabled.
class TransformerStepModel : public StepModel {
 public:
  TransformerStepModel(Transformer& model, const std::vector<int>& src);
  int vocab_size() const override;
  std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<int>>& prefixes) override;

 private:
  Transformer& model_;
  std::vector<int> src_;
  Tensor memory_;  ///< [S, d] for the single source
};

/// lp(n) = ((5 + n) / 6)^alpha
double length_penalty(std::size_t n, double alpha);

/// Beam search; returns the best finished hypothesis (hypotheses reaching
/// max_len without EOS count as finished candidates with finished=false).
/// Candidates with equal scores are ordered by their token sequence.
Hypothesis beam_search(StepModel& model, int beam_size, double alpha, int max_len);
Hypothesis greedy_decode(StepModel& model, int max_len);

/// Independent ancestral samples. temperature <= 0 selects the argmax.
std::vector<Hypothesis> sample(StepModel& model, int n_samples, double temperature, std::uint64_t seed,
                               int max_len);

// ---- MBR ------------------------------------------------------------------

enum class UtilityKind { kSentenceBleu, kTokenF1 };

struct UtilityFn {
  UtilityKind kind = UtilityKind::kSentenceBleu;
  int max_n = 4;  ///< sentence-BLEU order

  static UtilityFn parse(std::string_view name);
  std::string name() const;
  double operator()(const std::vector<int>& hyp, const std::vector<int>& ref) const;
};

/// Index of the row with the largest mean; the first wins ties.
std::size_t mbr_argmax(const std::vector<std::vector<double>>& utility);

/// argmax_h mean_y u(h, y) over all y in the set, h itself included.
Hypothesis mbr_decode(const std::vector<Hypothesis>& hypotheses, const UtilityFn& utility);

// ---- metrics --------------------------------------------------------------

/// Corpus BLEU in [0, 100] over token ids. Zero higher-order matches are
/// smoothed exponentially; orders longer than every hypothesis are skipped.
double bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
            int max_n = 4);
double sentence_bleu(const std::vector<int>& hyp, const std::vector<int>& ref, int max_n = 4);
double token_f1(const std::vector<int>& hyp, const std::vector<int>& ref);

struct DecodeOptions {
  int beam_size = 4;
  double alpha = 0.6;
  int max_len = 0;  ///< 0 = source length + 4, capped by the model
};

struct DecodedExample {
  std::vector<int> src;
  Hypothesis output;
};

std::vector<DecodedExample> decode_all(Transformer& model, const std::vector<std::vector<int>>& sources,
                                       const DecodeOptions& options);

struct GenerationEval {
  double bleu = 0;
  double token_acc = 0;  ///< teacher-forced
};

GenerationEval evaluate_generation(Transformer& model, const std::vector<Example>& data, const DecodeOptions& options);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
