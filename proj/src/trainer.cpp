#include "bmt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "bmt/checkpoint.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

// ---- schedule / config ----------------------------------------------------

QuantSchedule QuantSchedule::parse(std::string_view text) {
  QuantSchedule s;
  while (!text.empty()) {
    const auto comma = text.find(',');
    std::string item(text.substr(0, comma));
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }), item.end());
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("schedule: expected steps:flags, got '" + item + "'");
    QuantStage st;
    try {
      std::size_t used = 0;
      st.steps = std::stoi(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("schedule: bad step count in '" + item + "'");
    }
    const std::string flags = item.substr(colon + 1);
    if (flags == "none" || flags == "float") {
    } else if (flags == "w") {
      st.quantize_weights = true;
    } else if (flags == "a") {
      st.quantize_activations = true;
    } else if (flags == "wa" || flags == "aw") {
      st.quantize_weights = st.quantize_activations = true;
    } else {
      throw ConfigError("schedule: unknown flags '" + flags + "' (none|w|a|wa)");
    }
    s.stages.push_back(st);
  }
  s.validate();
  return s;
}

std::string QuantSchedule::str() const {
  std::string out;
  for (const auto& st : stages) {
    if (!out.empty()) out += ',';
    out += std::to_string(st.steps) + ':';
    if (st.quantize_weights && st.quantize_activations)
      out += "wa";
    else if (st.quantize_weights)
      out += "w";
    else if (st.quantize_activations)
      out += "a";
    else
      out += "none";
  }
  return out;
}

void QuantSchedule::validate() const {
  if (stages.empty()) throw ConfigError("schedule: no stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].steps < 1) throw ConfigError("schedule: every stage needs at least one step");
    if (i > 0 && ((stages[i - 1].quantize_weights && !stages[i].quantize_weights) ||
                  (stages[i - 1].quantize_activations && !stages[i].quantize_activations)))
      throw ConfigError("schedule: quantization flags must not switch off in a later stage");
  }
}

int QuantSchedule::total_steps() const {
  int n = 0;
  for (const auto& s : stages) n += s.steps;
  return n;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
  if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw ConfigError("train: betas must lie in (0,1)");
  if (!(adam_eps > 0)) throw ConfigError("train: adam_eps must be positive");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("train: eval_every must be positive");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("train: label_smoothing must lie in [0,1)");
  if (kd_enabled && teacher_checkpoint.empty()) throw ConfigError("train: kd needs a teacher checkpoint");
}

// ---- optimizer ------------------------------------------------------------

void adam_step(std::span<Real> w, std::span<const Real> g, AdamState& s, double lr, double beta1, double beta2,
               double eps) {
  if (w.size() != g.size()) throw ShapeError("adam: gradient size mismatch");
  for (Real x : g)
    if (!std::isfinite(x)) throw NumericError("adam: non-finite gradient");
  if (s.m.empty()) {
    s.m.assign(w.size(), 0.0);
    s.v.assign(w.size(), 0.0);
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    s.m[i] = beta1 * s.m[i] + (1 - beta1) * gi;
    s.v[i] = beta2 * s.v[i] + (1 - beta2) * gi * gi;
    w[i] = static_cast<Real>(w[i] - lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps));
  }
}

void Adam::step(ParamStore& params, double lr) {
  for (auto& [name, t] : params)
    for (Real x : t.grad())
      if (!std::isfinite(x)) throw NumericError("adam: non-finite gradient in '" + name + "'");
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    adam_step(t.mutable_values(), t.grad(), state_[name], lr, beta1_, beta2_, eps_);
  }
}

double cosine_lr(int step_in_stage, int stage_steps, double base, int warmup) {
  if (stage_steps < 1) throw ConfigError("cosine_lr: empty stage");
  const int t = std::clamp(step_in_stage, 0, stage_steps);
  warmup = std::min(warmup, stage_steps - 1);
  if (t < warmup) return base * (t + 1) / warmup;
  const double frac = static_cast<double>(t - warmup) / (stage_steps - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---- loss -----------------------------------------------------------------

LossOutput sequence_loss(const Tensor& logits, std::span<const int> targets, const Tensor* teacher,
                         double label_smoothing) {
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows)
    throw ShapeError("loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  if (teacher && teacher->numel() != logits.numel()) throw ShapeError("loss: teacher logits shape mismatch");

  LossOutput out;
  auto lv = logits.values();
  // Target distribution q and model softmax p, kept for backward.
  std::vector<Real> q(rows * v, Real(0)), p(rows * v, Real(0));
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = targets[r];
    if (y == kPad) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= v) throw Error("loss: target id out of range");
    const Real* row = lv.data() + r * v;
    double mx = row[0];
    std::size_t arg = 0;
    for (std::size_t k = 1; k < v; ++k)
      if (row[k] > mx) {
        mx = row[k];
        arg = k;
      }
    double z = 0;
    for (std::size_t k = 0; k < v; ++k) z += std::exp(row[k] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t k = 0; k < v; ++k) p[r * v + k] = static_cast<Real>(std::exp(row[k] - log_z));
    if (teacher) {
      auto tv = teacher->values();
      const Real* trow = tv.data() + r * v;
      double tmx = trow[0], tz = 0;
      for (std::size_t k = 1; k < v; ++k) tmx = std::max<double>(tmx, trow[k]);
      for (std::size_t k = 0; k < v; ++k) tz += std::exp(trow[k] - tmx);
      for (std::size_t k = 0; k < v; ++k) q[r * v + k] = static_cast<Real>(std::exp(trow[k] - tmx) / tz);
    } else {
      const double off = label_smoothing / static_cast<double>(v);
      for (std::size_t k = 0; k < v; ++k) q[r * v + k] = static_cast<Real>(off);
      q[r * v + static_cast<std::size_t>(y)] += static_cast<Real>(1.0 - label_smoothing);
    }
    double row_loss = 0;
    for (std::size_t k = 0; k < v; ++k)
      if (q[r * v + k] != 0) row_loss -= q[r * v + k] * (row[k] - log_z);
    total += row_loss;
    out.token_losses.push_back(log_z - row[y]);
    out.correct += arg == static_cast<std::size_t>(y);
    ++out.tokens;
  }
  const double count = static_cast<double>(std::max<std::size_t>(out.tokens, 1));
  const Real mean_loss = static_cast<Real>(total / count);

  CustomOp op;
  op.name = "sequence_loss";
  op.forward = [mean_loss](const std::vector<Tensor>&) { return Tensor::scalar(mean_loss); };
  op.backward = [p = std::move(p), q = std::move(q), count, rows, v, tg = std::vector<int>(targets.begin(), targets.end())](
                    const Tensor& up, const std::vector<Tensor>& in, const Tensor&) {
    const double u = up.item() / count;
    std::vector<Real> g(rows * v, Real(0));
    for (std::size_t r = 0; r < rows; ++r) {
      if (tg[r] == kPad) continue;
      for (std::size_t k = 0; k < v; ++k) g[r * v + k] = static_cast<Real>(u * (p[r * v + k] - q[r * v + k]));
    }
    return std::vector<Tensor>{Tensor(in[0].shape(), std::move(g))};
  };
  out.loss = custom_gradient(op, {logits});
  return out;
}

// ---- training -------------------------------------------------------------

std::string stages_csv_header() { return "stage,steps,final_lr,loss_before_late,loss_late,late_delta"; }

std::string stages_csv_row(const StageSummary& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%d,%.8g,%.6f,%.6f,%.6f", s.stage, s.steps, s.final_lr, s.loss_before_late,
                s.loss_late, s.late_delta());
  return buf;
}

std::string metrics_csv_header() { return "step,stage,lr,train_loss,eval_loss,token_acc"; }

std::string metrics_csv_row(const MetricRow& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%d,%d,%.8g,%.6f,%.6f,%.6f", r.step, r.stage, r.lr, r.train_loss, r.eval_loss,
                r.token_acc);
  return buf;
}

EvalResult evaluate(Transformer& model, const std::vector<Example>& data, int batch_size) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  NoGradGuard ng;
  EvalResult r;
  std::size_t correct = 0;
  const std::size_t bs = static_cast<std::size_t>(std::max(batch_size, 1));
  for (std::size_t i = 0; i < data.size(); i += bs) {
    Batch b = make_batch(data, i, std::min(data.size(), i + bs));
    LossOutput lo = sequence_loss(model.forward(b.src, b.tgt_in), b.tgt_out);
    r.token_losses.insert(r.token_losses.end(), lo.token_losses.begin(), lo.token_losses.end());
    correct += lo.correct;
  }
  double s = 0;
  for (double x : r.token_losses) s += x;
  r.loss = s / static_cast<double>(r.token_losses.size());
  r.token_acc = static_cast<double>(correct) / static_cast<double>(r.token_losses.size());
  return r;
}

TrainResult train(const TransformerConfig& model_cfg, const TrainConfig& train_cfg, const QuantSchedule& schedule,
                  const SyntheticTaskSpec& task, const TrainOutputs& outputs) {
  model_cfg.validate();
  train_cfg.validate();
  schedule.validate();
  task.validate();
  if (model_cfg.vocab_size != task.vocab_size) throw ConfigError("model and task vocab sizes differ");
  if (model_cfg.max_len < task.max_len + 1) throw ConfigError("model max_len must cover task max_len + 1");

  const TaskData data = generate_task(task);
  TrainResult res;
  res.model = std::make_shared<Transformer>(model_cfg, train_cfg.seed);
  Transformer& model = *res.model;

  std::optional<Transformer> teacher;
  if (train_cfg.kd_enabled) {
    teacher.emplace(load_checkpoint(train_cfg.teacher_checkpoint));
    if (teacher->config().vocab_size != model_cfg.vocab_size) throw ConfigError("teacher vocab size differs");
  }

  std::ofstream csv;
  const std::filesystem::path dir = outputs.dir;
  if (!outputs.dir.empty()) {
    std::filesystem::create_directories(dir);
    csv.open(dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw Error("cannot write " + (dir / "metrics.csv").string());
    csv << metrics_csv_header() << '\n';
  }
  auto save = [&](const char* name) {
    if (!outputs.dir.empty() && outputs.write_checkpoint) save_checkpoint((dir / name).string(), model);
  };

  Adam adam(train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps);
  BatchSampler sampler(data.train.size(), static_cast<std::size_t>(train_cfg.batch_size),
                       train_cfg.seed ^ 0x5a5a5a5aULL);
  int step = 0;
  double loss_acc = 0;
  int loss_n = 0;
  for (std::size_t si = 0; si < schedule.stages.size(); ++si) {
    const QuantStage& stage = schedule.stages[si];
    model.set_quant_state({stage.quantize_weights, stage.quantize_activations});
    const std::uint64_t calls_before = binarize_ste_calls();
    StageSummary summary{static_cast<int>(si) + 1, stage.steps};
    std::vector<double> stage_losses;
    for (int t = 0; t < stage.steps; ++t) {
      const double lr = cosine_lr(t, stage.steps, train_cfg.base_lr, train_cfg.warmup_steps);
      Batch batch = make_batch(data.train, sampler.next());
      model.params().zero_grad();
      model.set_dropout_seed(train_cfg.seed * 1000003ULL + static_cast<std::uint64_t>(step));
      double batch_loss = 0;
      try {
        Tensor logits = model.forward(batch.src, batch.tgt_in);
        Tensor teacher_logits;
        if (teacher) {
          NoGradGuard ng;
          teacher_logits = teacher->forward(batch.src, batch.tgt_in);
        }
        LossOutput lo = sequence_loss(logits, batch.tgt_out, teacher ? &teacher_logits : nullptr,
                                      train_cfg.label_smoothing);
        batch_loss = lo.loss.item();
        backward(lo.loss);
        adam.step(model.params(), lr);
      } catch (const NumericError& e) {
        // Adam validates all gradients before updating, so the parameters
        // still hold the last good state.
        save("last_good.bmt");
        throw DivergenceError("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
      }
      model.set_dropout_seed(std::nullopt);
      ++step;
      stage_losses.push_back(batch_loss);
      summary.final_lr = lr;
      loss_acc += batch_loss;
      ++loss_n;
      if (step % train_cfg.eval_every == 0 || t == stage.steps - 1) {
        EvalResult ev = evaluate(model, data.eval);
        MetricRow row{step, static_cast<int>(si) + 1, lr, loss_acc / loss_n, ev.loss, ev.token_acc};
        res.rows.push_back(row);
        res.final_eval = std::move(ev);
        res.final_train_loss = row.train_loss;
        loss_acc = 0;
        loss_n = 0;
        if (csv.is_open()) csv << metrics_csv_row(row) << '\n' << std::flush;
      }
    }
    res.binarize_calls_per_stage.push_back(binarize_ste_calls() - calls_before);
    const std::size_t n = stage_losses.size(), w = std::min<std::size_t>(kLateWindow, n / 2);
    if (w > 0) {
      for (std::size_t i = n - 2 * w; i < n - w; ++i) summary.loss_before_late += stage_losses[i] / double(w);
      for (std::size_t i = n - w; i < n; ++i) summary.loss_late += stage_losses[i] / double(w);
    }
    res.stages.push_back(summary);
  }
  if (csv.is_open()) {
    std::ofstream st(dir / "stages.csv", std::ios::trunc);
    st << stages_csv_header() << '\n';
    for (const auto& s : res.stages) st << stages_csv_row(s) << '\n';
  }
  save("model.bmt");
  return res;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
