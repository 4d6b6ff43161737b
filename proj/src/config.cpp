#include "bmt/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config: bad value '" + std::string(v) + "' for " + std::string(key));
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: expected true/false for " + std::string(key) + ", got '" + std::string(v) + "'");
}

std::string b(bool v) { return v ? "true" : "false"; }

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto k = trim(key);
  const auto v = trim(value);
  auto i = [&] { return parse_number<int>(k, v); };
  auto d = [&] { return parse_number<double>(k, v); };
  if (k == "encoder_layers") model.encoder_layers = i();
  else if (k == "decoder_layers") model.decoder_layers = i();
  else if (k == "d_model") model.d_model = i();
  else if (k == "d_ff") model.d_ff = i();
  else if (k == "n_heads") model.n_heads = i();
  else if (k == "vocab_size") model.vocab_size = task.vocab_size = i();
  else if (k == "max_positions") model.max_len = i();
  else if (k == "dropout") model.dropout = d();
  else if (k == "sites") model.sites = SiteFlags::parse(v);
  else if (k == "scale_mode") model.scale_mode = parse_scale_mode(v);
  else if (k == "scale") model.scale = d();
  else if (k == "act_bound") model.act_bound = d();
  else if (k == "weight_bound") model.weight_bound = d();
  else if (k == "attn_shortcut") model.attn_shortcut = parse_bool(k, v);
  else if (k == "ffn_inner_ln") model.ffn_inner_ln = parse_bool(k, v);
  else if (k == "ffn_outer_ln") model.ffn_outer_ln = parse_bool(k, v);
  else if (k == "batch_size") train.batch_size = i();
  else if (k == "lr") train.base_lr = d();
  else if (k == "beta1") train.beta1 = d();
  else if (k == "beta2") train.beta2 = d();
  else if (k == "adam_eps") train.adam_eps = d();
  else if (k == "warmup_steps") train.warmup_steps = i();
  else if (k == "seed") train.seed = parse_number<std::uint64_t>(k, v);
  else if (k == "kd") train.kd_enabled = parse_bool(k, v);
  else if (k == "teacher") train.teacher_checkpoint = std::string(v);
  else if (k == "label_smoothing") train.label_smoothing = d();
  else if (k == "eval_every") train.eval_every = i();
  else if (k == "schedule") schedule = QuantSchedule::parse(v);
  else if (k == "task") task.task = parse_task(v);
  else if (k == "min_len") task.min_len = i();
  else if (k == "max_len") task.max_len = i();
  else if (k == "n_train") task.n_train = i();
  else if (k == "n_eval") task.n_eval = i();
  else if (k == "data_seed") task.seed = parse_number<std::uint64_t>(k, v);
  else throw ConfigError("config: unknown key '" + std::string(k) + "'");
}

void RunConfig::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("config: expected key=value, got '" + std::string(assignment) + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

void RunConfig::apply(std::string_view text) {
  std::size_t lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const auto line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    try {
      set(line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    apply(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  c.apply(text);
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  RunConfig c;
  c.apply_file(path);
  return c;
}

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  using std::to_string;
  return {
      {"encoder_layers", to_string(model.encoder_layers)},
      {"decoder_layers", to_string(model.decoder_layers)},
      {"d_model", to_string(model.d_model)},
      {"d_ff", to_string(model.d_ff)},
      {"n_heads", to_string(model.n_heads)},
      {"vocab_size", to_string(model.vocab_size)},
      {"max_positions", to_string(model.max_len)},
      {"dropout", format_double(model.dropout)},
      {"sites", model.sites.str()},
      {"scale_mode", std::string(scale_mode_name(model.scale_mode))},
      {"scale", format_double(model.scale)},
      {"act_bound", format_double(model.act_bound)},
      {"weight_bound", format_double(model.weight_bound)},
      {"attn_shortcut", b(model.attn_shortcut)},
      {"ffn_inner_ln", b(model.ffn_inner_ln)},
      {"ffn_outer_ln", b(model.ffn_outer_ln)},
      {"batch_size", to_string(train.batch_size)},
      {"lr", format_double(train.base_lr)},
      {"beta1", format_double(train.beta1)},
      {"beta2", format_double(train.beta2)},
      {"adam_eps", format_double(train.adam_eps)},
      {"warmup_steps", to_string(train.warmup_steps)},
      {"seed", to_string(train.seed)},
      {"kd", b(train.kd_enabled)},
      {"teacher", train.teacher_checkpoint},
      {"label_smoothing", format_double(train.label_smoothing)},
      {"eval_every", to_string(train.eval_every)},
      {"schedule", schedule.str()},
      {"task", std::string(task_name(task.task))},
      {"min_len", to_string(task.min_len)},
      {"max_len", to_string(task.max_len)},
      {"n_train", to_string(task.n_train)},
      {"n_eval", to_string(task.n_eval)},
      {"data_seed", to_string(task.seed)},
  };
}

std::string RunConfig::str() const {
  std::string out;
  for (const auto& [k, v] : items()) out += k + "=" + v + "\n";
  return out;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  schedule.validate();
  task.validate();
  if (model.vocab_size != task.vocab_size) throw ConfigError("config: model and task vocab sizes differ");
  if (task.max_len + 1 > model.max_len) throw ConfigError("config: max_positions must exceed the task max_len");
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
