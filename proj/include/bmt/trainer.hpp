#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bmt/data.hpp"
#include "bmt/model.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

struct QuantStage {
  int steps = 0;
  bool quantize_weights = false;
  bool quantize_activations = false;
};

/// Ordered training stages; a quantization event happens at each boundary.
struct QuantSchedule {
  std::vector<QuantStage> stages;

  /// "1000:none,1000:w,1000:wa" (flags: none | w | a | wa).
  static QuantSchedule parse(std::string_view text);
  std::string str() const;
  void validate() const;
  int total_steps() const;
};

struct TrainConfig {
  int batch_size = 64;
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int warmup_steps = 100;  ///< linear warmup at the start of every stage
  std::uint64_t seed = 1;
  bool kd_enabled = false;
  std::string teacher_checkpoint;  ///< required when kd_enabled
  double label_smoothing = 0.0;
  int eval_every = 100;

  void validate() const;
};

// ---- optimizer ------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update without weight decay. Throws NumericError
/// on a non-finite gradient before touching `w`.
void adam_step(std::span<Real> w, std::span<const Real> g, AdamState& s, double lr, double beta1, double beta2,
               double eps);

/// Adam over a ParamStore, with state keyed by parameter name.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  /// Checks every gradient before any parameter changes.
  void step(ParamStore& params, double lr);
  const std::map<std::string, AdamState>& state() const { return state_; }

 private:
  double beta1_, beta2_, eps_;
  std::map<std::string, AdamState> state_;
};

/// Linear warmup over `warmup` steps, then base * 0.5 * (1 + cos(pi t/T))
/// over the rest of the stage; t = stage_steps gives 0.
double cosine_lr(int step_in_stage, int stage_steps, double base, int warmup = 0);

// ---- loss -----------------------------------------------------------------

struct LossOutput {
  Tensor loss;                      ///< mean over non-pad tokens
  std::vector<double> token_losses;  ///< hard-target cross-entropy per non-pad token
  std::size_t tokens = 0;
  std::size_t correct = 0;  ///< argmax == target (lowest id wins ties)
};

/// Masked cross-entropy for logits [B,T,V] (or [N,V]) against `targets`
/// (kPad = ignored). With `teacher` the target distribution is its softmax;
/// otherwise the one-hot target smoothed by `label_smoothing`.
LossOutput sequence_loss(const Tensor& logits, std::span<const int> targets, const Tensor* teacher = nullptr,
                         double label_smoothing = 0.0);

// ---- training -------------------------------------------------------------

struct MetricRow {
  int step = 0;
  int stage = 0;
  double lr = 0;
  double train_loss = 0;  ///< mean over steps since the previous row
  double eval_loss = 0;
  double token_acc = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricRow& r);

/// Training loss over the last steps of a stage, where the cosine schedule
/// has nearly reached zero.
inline constexpr int kLateWindow = 10;

struct StageSummary {
  int stage = 0;
  int steps = 0;
  double final_lr = 0;
  double loss_before_late = 0;  ///< mean batch loss over the kLateWindow steps before the last ones
  double loss_late = 0;         ///< mean batch loss over the last kLateWindow steps
  double late_delta() const { return loss_late - loss_before_late; }
};

/// stage,steps,final_lr,loss_before_late,loss_late,late_delta
std::string stages_csv_header();
std::string stages_csv_row(const StageSummary& s);

struct EvalResult {
  double loss = 0;
  double token_acc = 0;
  std::vector<double> token_losses;
};

/// Teacher-forced per-token loss and accuracy over a dataset.
EvalResult evaluate(Transformer& model, const std::vector<Example>& data, int batch_size = 128);

struct TrainResult {
  std::vector<MetricRow> rows;
  std::shared_ptr<Transformer> model;
  EvalResult final_eval;
  double final_train_loss = 0;
  /// binarize_ste calls observed in each stage.
  std::vector<std::uint64_t> binarize_calls_per_stage;
  std::vector<StageSummary> stages;
};

/// Raised when training diverges; the last good checkpoint has been written
/// when an output directory was given.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct TrainOutputs {
  std::string dir;  ///< empty = keep everything in memory
  bool write_checkpoint = true;
};

TrainResult train(const TransformerConfig& model_cfg, const TrainConfig& train_cfg, const QuantSchedule& schedule,
                  const SyntheticTaskSpec& task, const TrainOutputs& outputs = {});

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
