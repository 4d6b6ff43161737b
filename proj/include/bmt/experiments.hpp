#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "bmt/config.hpp"
#include "bmt/scalelaw.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

/// Presets for the toy-task experiments.
RunConfig scale_sweep_preset();
RunConfig attention_ablation_preset();
RunConfig scaling_ladder_preset();

/// Trains one configuration; writes metrics (and a checkpoint when asked)
/// under `dir` unless it is empty.
TrainResult run_training(const RunConfig& cfg, const std::string& dir, bool write_checkpoint = true);

// ---- scale-factor sweep ---------------------------------------------------------

struct SweepRow {
  double s = 0;
  double final_train_loss = 0;
  double final_eval_loss = 0;
  std::string error;  ///< non-empty when the run failed
};

/// One run per s with a fixed scale. A failed run is recorded and the sweep
/// moves on. Requires a binarized FFN.
std::vector<SweepRow> sweep_scale_factor(const RunConfig& base, const std::vector<double>& values,
                                         const std::string& out_dir = {});
std::string sweep_csv(const std::vector<SweepRow>& rows);

// ---- attention output ablation ----------------------------------------------------

struct AttentionVariant {
  std::string name;  ///< none | scale | ln | ln+shortcut
  ScaleMode mode = ScaleMode::kNone;
  bool shortcut = false;

  static AttentionVariant parse(std::string_view name);
};

struct AblationCurve {
  std::string variant;
  std::vector<MetricRow> rows;
  std::string error;
};

/// Binarizes only the attention output projection and trains every variant.
std::vector<AblationCurve> ablate_attention(const RunConfig& base, const std::vector<std::string>& variants,
                                            const std::string& out_dir = {});
/// variant,step,stage,lr,train_loss,eval_loss,token_acc
std::string ablation_csv(const std::vector<AblationCurve>& curves);

// ---- scaling ladders --------------------------------------------------------------

struct LadderRun {
  int encoder_layers = 0;
  int decoder_layers = 0;
  ScalingPoint point;
};

/// Encoder depths over `depths` at a fixed decoder depth, then the reverse.
/// Shared configurations are trained once.
std::vector<LadderRun> scaling_ladders(const RunConfig& base, const std::vector<int>& depths, int fixed_depth,
                                       const std::string& out_dir = {});

/// Encoder and decoder parameter counts of `cfg` at the given depths.
ScalingPoint ladder_counts(const TransformerConfig& cfg, int encoder_layers, int decoder_layers);

std::vector<double> parse_double_list(std::string_view text);
std::vector<int> parse_int_list(std::string_view text);
std::vector<std::string> split_list(std::string_view text);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
