#include "bmt/experiments.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

std::string join(const std::string& dir, const std::string& name) {
  return dir.empty() ? std::string() : (std::filesystem::path(dir) / name).string();
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

RunConfig scale_sweep_preset() {
  RunConfig c;
  c.model.sites = SiteFlags::parse("a_ffn,w_ffn");
  c.model.scale_mode = ScaleMode::kFixed;
  c.schedule = QuantSchedule::parse("300:wa");
  c.train.base_lr = 3e-3;
  c.train.eval_every = 100;
  return c;
}

RunConfig attention_ablation_preset() {
  RunConfig c;
  c.model.sites = SiteFlags::parse("a_out,w_out");
  c.model.scale = 64;
  c.schedule = QuantSchedule::parse("400:none,300:wa");
  c.train.base_lr = 3e-3;
  c.train.eval_every = 50;
  return c;
}

RunConfig scaling_ladder_preset() {
  RunConfig c;
  c.schedule = QuantSchedule::parse("500:none");
  c.train.base_lr = 3e-3;
  c.train.eval_every = 500;
  return c;
}

TrainResult run_training(const RunConfig& cfg, const std::string& dir, bool write_checkpoint) {
  cfg.validate();
  return train(cfg.model, cfg.train, cfg.schedule, cfg.task, TrainOutputs{dir, write_checkpoint});
}

// ---- scale sweep --------------------------------------------------------------------

std::vector<SweepRow> sweep_scale_factor(const RunConfig& base, const std::vector<double>& values,
                                         const std::string& out_dir) {
  if (!base.model.sites.ffn_site()) throw ConfigError("sweep-scale-factor: the FFN must be binarized (a_ffn/w_ffn)");
  if (values.empty()) throw ConfigError("sweep-scale-factor: no values");
  std::vector<SweepRow> rows;
  for (double s : values) {
    SweepRow row{s, std::nan(""), std::nan(""), {}};
    try {
      RunConfig cfg = base;
      cfg.model.scale_mode = ScaleMode::kFixed;
      cfg.model.scale = s;
      const TrainResult r = run_training(cfg, join(out_dir, "s_" + format_double(s)), false);
      row.final_train_loss = r.final_train_loss;
      row.final_eval_loss = r.final_eval.loss;
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "s,final_train_loss,final_eval_loss\n";
  for (const auto& r : rows) out += format_double(r.s) + "," + fmt(r.final_train_loss) + "," + fmt(r.final_eval_loss) + "\n";
  return out;
}

// ---- attention ablation ---------------------------------------------------------------

AttentionVariant AttentionVariant::parse(std::string_view name) {
  if (name == "none") return {"none", ScaleMode::kNone, false};
  if (name == "scale") return {"scale", ScaleMode::kFixed, false};
  if (name == "ln") return {"ln", ScaleMode::kLayerNorm, false};
  if (name == "ln+shortcut") return {"ln+shortcut", ScaleMode::kLayerNorm, true};
  throw ConfigError("unknown attention variant '" + std::string(name) + "' (none|scale|ln|ln+shortcut)");
}

std::vector<AblationCurve> ablate_attention(const RunConfig& base, const std::vector<std::string>& variants,
                                            const std::string& out_dir) {
  if (variants.empty()) throw ConfigError("ablate-attention: no variants");
  std::vector<AttentionVariant> parsed;
  for (const auto& v : variants) parsed.push_back(AttentionVariant::parse(v));
  std::vector<AblationCurve> curves;
  for (const auto& v : parsed) {
    AblationCurve curve{v.name, {}, {}};
    try {
      RunConfig cfg = base;
      cfg.model.sites = SiteFlags::parse("a_out,w_out");
      cfg.model.scale_mode = v.mode;
      cfg.model.attn_shortcut = v.shortcut;
      curve.rows = run_training(cfg, join(out_dir, v.name), false).rows;
    } catch (const Error& e) {
      curve.error = e.what();
    }
    curves.push_back(std::move(curve));
  }
  return curves;
}

std::string ablation_csv(const std::vector<AblationCurve>& curves) {
  std::string out = "variant," + metrics_csv_header() + "\n";
  for (const auto& c : curves)
    for (const auto& r : c.rows) out += c.variant + "," + metrics_csv_row(r) + "\n";
  return out;
}

// ---- scaling ladders --------------------------------------------------------------------

ScalingPoint ladder_counts(const TransformerConfig& cfg, int encoder_layers, int decoder_layers) {
  TransformerConfig c = cfg;
  c.encoder_layers = encoder_layers;
  c.decoder_layers = decoder_layers;
  const ParamCounts pc = count_params(c);
  return {static_cast<double>(pc.encoder), static_cast<double>(pc.decoder), 0.0};
}

std::vector<LadderRun> scaling_ladders(const RunConfig& base, const std::vector<int>& depths, int fixed_depth,
                                       const std::string& out_dir) {
  if (depths.empty()) throw ConfigError("scaling ladders: no depths");
  std::vector<std::pair<int, int>> shapes;
  for (int d : depths) shapes.emplace_back(d, fixed_depth);
  for (int d : depths) shapes.emplace_back(fixed_depth, d);
  std::map<std::pair<int, int>, double> done;
  std::vector<LadderRun> out;
  for (const auto& [e, d] : shapes) {
    if (done.count({e, d})) continue;
    RunConfig cfg = base;
    cfg.model.encoder_layers = e;
    cfg.model.decoder_layers = d;
    const TrainResult r =
        run_training(cfg, join(out_dir, "e" + std::to_string(e) + "d" + std::to_string(d)), false);
    done[{e, d}] = r.final_eval.loss;
    LadderRun run{e, d, ladder_counts(cfg.model, e, d)};
    run.point.loss = r.final_eval.loss;
    out.push_back(run);
  }
  return out;
}

// ---- list parsing -------------------------------------------------------------------------

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<double> parse_double_list(std::string_view text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) {
    double v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) throw ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> out;
  for (const auto& item : split_list(text)) {
    int v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) throw ConfigError("not an integer: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
