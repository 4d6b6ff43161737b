// Command-line entry point for training, evaluation and the toy experiments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bmt/binarizer.hpp"
#include "bmt/bitkernel.hpp"
#include "bmt/checkpoint.hpp"
#include "bmt/config.hpp"
#include "bmt/decode.hpp"
#include "bmt/experiments.hpp"
#include "bmt/scalelaw.hpp"

#ifndef BMT_SOURCE_REVISION
#define BMT_SOURCE_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using namespace bmt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Error raised for bad invocations that CLI11 cannot see (e.g. missing files).
class UsageError : public Error {
 public:
  using Error::Error;
};

std::string command_line(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    const std::string a = argv[i];
    if (!a.empty() && a.find_first_of(" \t\"'\\") == std::string::npos) {
      out += a;
      continue;
    }
    std::ostringstream q;
    q << std::quoted(a);
    out += q.str();
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::string text = "command=" + command + "\n";
  text += "source_revision=" BMT_SOURCE_REVISION "\n";
  text += "output_dir=" + dir.string() + "\n";
  text += cfg.str();
  write_text(dir / "manifest.txt", text);
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

// Config file (optional) < --set overrides.
RunConfig resolve_config(RunConfig base, const std::string& path, const std::vector<std::string>& overrides) {
  if (!path.empty()) {
    if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path);
    base.apply_file(path);
  }
  for (const auto& kv : overrides) base.set(kv);
  return base;
}

// Task settings for evaluating a checkpoint: the manifest written next to it
// by `train` (when present), then --config, then --set.
RunConfig checkpoint_run_config(const std::string& ckpt, const Common& c) {
  RunConfig cfg;
  const fs::path manifest = fs::path(ckpt).parent_path() / "manifest.txt";
  if (c.config.empty() && fs::is_regular_file(manifest)) {
    std::ifstream in(manifest);
    std::string line, text;
    while (std::getline(in, line))
      if (line.rfind("command=", 0) && line.rfind("source_revision=", 0) && line.rfind("output_dir=", 0))
        text += line + "\n";
    cfg.apply(text);
  }
  return resolve_config(cfg, c.config, c.overrides);
}

std::string join_ids(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<std::vector<int>> read_sources(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open input " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<int> ids;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        ids.push_back(std::stoi(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError(path + ": not a token id: '" + tok + "'");
      }
    }
    if (!ids.empty()) out.push_back(std::move(ids));
  }
  return out;
}

std::string fmt6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void add_config_options(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Flat key=value config file");
  cmd->add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binarized encoder-decoder transformers on synthetic translation tasks"};
  app.require_subcommand(1);
  const std::string cmdline = command_line(argc, argv);

  // train
  Common train_opts;
  bool kd = false;
  std::string teacher, sites;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes metrics.csv, model.bmt and manifest.txt");
  train_cmd->add_option("--config", train_opts.config, "Flat key=value config file")->required();
  train_cmd->add_option("--out", train_opts.out, "Output directory")->required();
  train_cmd->add_option("--set", train_opts.overrides, "Override a config key (key=value), repeatable");
  train_cmd->add_flag("--kd", kd, "Distil from --teacher");
  train_cmd->add_option("--teacher", teacher, "Teacher checkpoint for --kd");
  auto* sites_opt = train_cmd->add_option("--sites", sites, "Binarized sites, e.g. w_qkv,w_out,w_ffn (\"\" = float)");

  // eval
  std::string ckpt, task_name;
  Common eval_opts;
  DecodeOptions dopt;
  auto* eval_cmd = app.add_subcommand("eval", "Print bleu,token_acc on the held-out split of a task");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--task", task_name, "copy | reverse | mapped-reverse (default: as trained)");
  add_config_options(eval_cmd, eval_opts);
  eval_cmd->add_option("--beam", dopt.beam_size, "Beam size")->capture_default_str();
  eval_cmd->add_option("--alpha", dopt.alpha, "Length penalty exponent")->capture_default_str();

  // decode
  std::string input;
  int n_sources = 10, samples = 0;
  double temperature = 1.0;
  std::uint64_t sample_seed = 1;
  std::string utility = "sentence-bleu";
  Common dec_opts;
  DecodeOptions dec_opt;
  auto* decode_cmd = app.add_subcommand("decode", "Decode sources; TSV source_ids, output_ids, score");
  decode_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  decode_cmd->add_option("--input", input, "File with one space-separated source per line");
  decode_cmd->add_option("--task", task_name, "Without --input, decode held-out sources of this task");
  decode_cmd->add_option("--n", n_sources, "Number of held-out sources")->capture_default_str();
  add_config_options(decode_cmd, dec_opts);
  decode_cmd->add_option("--beam", dec_opt.beam_size, "Beam size")->capture_default_str();
  decode_cmd->add_option("--alpha", dec_opt.alpha, "Length penalty exponent")->capture_default_str();
  decode_cmd->add_option("--max-len", dec_opt.max_len, "Output length limit (0 = source length + 4)")
      ->capture_default_str();
  decode_cmd->add_option("--mbr-samples", samples, "MBR over this many samples instead of beam search")
      ->capture_default_str();
  decode_cmd->add_option("--temperature", temperature, "Sampling temperature")->capture_default_str();
  decode_cmd->add_option("--seed", sample_seed, "Sampling seed")->capture_default_str();
  decode_cmd->add_option("--utility", utility, "sentence-bleu | token-f1")->capture_default_str();

  // bench-kernel
  std::size_t bn = 8, bd = 4096, bk = 8;
  int reps = 5;
  auto* bench_cmd = app.add_subcommand("bench-kernel", "Packed vs float GEMM throughput (CSV)");
  bench_cmd->add_option("--n", bn, "Rows of A")->capture_default_str();
  bench_cmd->add_option("--d", bd, "Contraction length")->capture_default_str();
  bench_cmd->add_option("--k", bk, "Output columns")->capture_default_str();
  bench_cmd->add_option("--reps", reps, "Timed repetitions (median)")->capture_default_str();

  // variance-demo
  int vd = 4096, trials = 20000;
  double vb = 2.0;
  std::uint64_t vseed = 1;
  auto* var_cmd = app.add_subcommand("variance-demo", "Binarized dot-product variance: theory vs Monte Carlo");
  var_cmd->add_option("--d", vd, "Dot-product length D")->capture_default_str();
  var_cmd->add_option("--b", vb, "Bound B")->capture_default_str();
  var_cmd->add_option("--trials", trials, "Monte Carlo trials")->capture_default_str();
  var_cmd->add_option("--seed", vseed, "Seed")->capture_default_str();

  // sweep-scale-factor
  Common sweep_opts;
  std::string values = "1,8,64,512";
  auto* sweep_cmd = app.add_subcommand("sweep-scale-factor", "Train once per fixed scale s; CSV s,final_train_loss,final_eval_loss");
  sweep_cmd->add_option("--values", values, "Comma list of s")->capture_default_str();
  sweep_cmd->add_option("--out", sweep_opts.out, "Directory for per-run metrics, sweep.csv and manifest.txt");
  add_config_options(sweep_cmd, sweep_opts);

  // ablate-attention
  Common abl_opts;
  std::string variants = "none,scale,ln,ln+shortcut";
  auto* abl_cmd = app.add_subcommand("ablate-attention", "Attention output projection variants; loss curves as CSV");
  abl_cmd->add_option("--variants", variants, "Comma list from none,scale,ln,ln+shortcut")->capture_default_str();
  abl_cmd->add_option("--out", abl_opts.out, "Directory for per-run metrics, ablation.csv and manifest.txt");
  add_config_options(abl_cmd, abl_opts);

  // fit-scaling-law
  std::string points_path;
  double nbar_e = 0, nbar_d = 0;
  auto* fit_cmd = app.add_subcommand("fit-scaling-law", "Fit L = alpha (Ne'/Ne)^pe (Nd'/Nd)^pd + L_inf");
  fit_cmd->add_option("--points", points_path, "CSV with columns n_enc,n_dec,loss")->required();
  fit_cmd->add_option("--nbar-e", nbar_e, "Encoder normalization (default: 6-layer toy encoder)");
  fit_cmd->add_option("--nbar-d", nbar_d, "Decoder normalization (default: 6-layer toy decoder)");

  // scaling-sweep
  Common ladder_opts;
  std::string depths = "2,3,4,6,8";
  int fixed_depth = 6;
  auto* ladder_cmd = app.add_subcommand("scaling-sweep", "Encoder and decoder depth ladders, then a scaling-law fit");
  ladder_cmd->add_option("--depths", depths, "Comma list of depths")->capture_default_str();
  ladder_cmd->add_option("--fixed", fixed_depth, "Depth of the stack held fixed")->capture_default_str();
  ladder_cmd->add_option("--out", ladder_opts.out, "Directory for points.csv, fit.csv and manifest.txt");
  add_config_options(ladder_cmd, ladder_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) {
      RunConfig cfg = resolve_config(RunConfig{}, train_opts.config, train_opts.overrides);
      if (*sites_opt) cfg.model.sites = SiteFlags::parse(sites);
      if (kd) cfg.train.kd_enabled = true;
      if (!teacher.empty()) cfg.train.teacher_checkpoint = teacher;
      cfg.validate();
      const fs::path out = train_opts.out;
      write_manifest(out, cmdline, cfg);
      const TrainResult r = run_training(cfg, out.string(), true);
      std::cout << metrics_csv_header() << '\n' << metrics_csv_row(r.rows.back()) << '\n';
      return kExitOk;
    }
    if (*eval_cmd) {
      Transformer model = load_checkpoint(ckpt);
      RunConfig cfg = checkpoint_run_config(ckpt, eval_opts);
      if (!task_name.empty()) cfg.task.task = parse_task(task_name);
      cfg.task.vocab_size = model.config().vocab_size;
      const TaskData data = generate_task(cfg.task);
      const GenerationEval ev = evaluate_generation(model, data.eval, dopt);
      std::cout << "bleu,token_acc\n" << fmt6(ev.bleu) << ',' << fmt6(ev.token_acc) << '\n';
      return kExitOk;
    }
    if (*decode_cmd) {
      const UtilityFn u = UtilityFn::parse(utility);
      Transformer model = load_checkpoint(ckpt);
      std::vector<std::vector<int>> sources;
      if (!input.empty()) {
        sources = read_sources(input);
      } else {
        RunConfig cfg = checkpoint_run_config(ckpt, dec_opts);
        if (!task_name.empty()) cfg.task.task = parse_task(task_name);
        cfg.task.vocab_size = model.config().vocab_size;
        const TaskData data = generate_task(cfg.task);
        for (int i = 0; i < n_sources && i < static_cast<int>(data.eval.size()); ++i) sources.push_back(data.eval[i].src);
      }
      std::cout << "source_ids\toutput_ids\tscore\n";
      if (samples > 0) {
        for (const auto& src : sources) {
          TransformerStepModel step(model, src);
          const int max_len =
              std::min(dec_opt.max_len > 0 ? dec_opt.max_len : static_cast<int>(src.size()) + 4, model.config().max_len);
          const Hypothesis h = mbr_decode(sample(step, samples, temperature, sample_seed, max_len), u);
          std::cout << join_ids(src) << '\t' << join_ids(h.tokens) << '\t' << fmt6(h.score) << '\n';
        }
      } else {
        for (const auto& d : decode_all(model, sources, dec_opt))
          std::cout << join_ids(d.src) << '\t' << join_ids(d.output.tokens) << '\t' << fmt6(d.output.score) << '\n';
      }
      return kExitOk;
    }
    if (*bench_cmd) {
      const BenchResult r = benchmark(bn, bd, bk, reps);
      std::cout << bench_csv_header() << '\n' << bench_csv_row(r) << '\n';
      return kExitOk;
    }
    if (*var_cmd) {
      const VarianceReport r = variance_oracle(vd, vb, trials, vseed);
      std::cout << "d,b,theory_var,empirical_var,float_var,inflation\n"
                << vd << ',' << format_double(vb) << ',' << format_double(r.theory_var) << ','
                << fmt6(r.empirical_var) << ',' << format_double(r.float_var) << ',' << format_double(r.inflation())
                << '\n';
      return kExitOk;
    }
    if (*sweep_cmd) {
      RunConfig cfg = resolve_config(scale_sweep_preset(), sweep_opts.config, sweep_opts.overrides);
      cfg.validate();
      const auto vals = parse_double_list(values);
      if (!sweep_opts.out.empty()) write_manifest(sweep_opts.out, cmdline, cfg);
      const auto rows = sweep_scale_factor(cfg, vals, sweep_opts.out);
      const std::string csv = sweep_csv(rows);
      if (!sweep_opts.out.empty()) write_text(fs::path(sweep_opts.out) / "sweep.csv", csv);
      std::cout << csv;
      for (const auto& r : rows)
        if (!r.error.empty()) std::cerr << "s=" << format_double(r.s) << " failed: " << r.error << '\n';
      return kExitOk;
    }
    if (*abl_cmd) {
      RunConfig cfg = resolve_config(attention_ablation_preset(), abl_opts.config, abl_opts.overrides);
      cfg.validate();
      const auto names = split_list(variants);
      for (const auto& n : names) AttentionVariant::parse(n);
      if (!abl_opts.out.empty()) write_manifest(abl_opts.out, cmdline, cfg);
      const auto curves = ablate_attention(cfg, names, abl_opts.out);
      const std::string csv = ablation_csv(curves);
      if (!abl_opts.out.empty()) write_text(fs::path(abl_opts.out) / "ablation.csv", csv);
      std::cout << csv;
      for (const auto& c : curves)
        if (!c.error.empty()) std::cerr << c.variant << " failed: " << c.error << '\n';
      return kExitOk;
    }
    if (*fit_cmd) {
      if (!fs::is_regular_file(points_path)) throw UsageError("points file not found: " + points_path);
      const auto pts = read_scaling_points(points_path);
      const ScalingPoint base = ladder_counts(TransformerConfig{}, 6, 6);
      const ScalingLawFit f = fit_scaling_law(pts, nbar_e > 0 ? nbar_e : base.n_enc, nbar_d > 0 ? nbar_d : base.n_dec);
      std::cout << "alpha,p_e,p_d,l_inf,r2\n"
                << format_double(f.alpha) << ',' << format_double(f.p_e) << ',' << format_double(f.p_d) << ','
                << format_double(f.l_inf) << ',' << format_double(f.r_squared) << "\n\n";
      std::cout << "n_enc,n_dec,loss,predicted,residual\n";
      const auto res = residuals(f, pts);
      for (std::size_t i = 0; i < pts.size(); ++i)
        std::cout << format_double(pts[i].n_enc) << ',' << format_double(pts[i].n_dec) << ','
                  << format_double(pts[i].loss) << ',' << format_double(pts[i].loss - res[i]) << ','
                  << format_double(res[i]) << '\n';
      if (f.degenerate) std::cerr << "warning: alpha and l_inf are not separately identifiable\n";
      return kExitOk;
    }
    if (*ladder_cmd) {
      RunConfig cfg = resolve_config(scaling_ladder_preset(), ladder_opts.config, ladder_opts.overrides);
      cfg.validate();
      const auto ds = parse_int_list(depths);
      if (!ladder_opts.out.empty()) write_manifest(ladder_opts.out, cmdline, cfg);
      const auto runs = scaling_ladders(cfg, ds, fixed_depth, ladder_opts.out);
      std::string points = "n_enc,n_dec,loss\n";
      std::vector<ScalingPoint> pts;
      for (const auto& r : runs) {
        points += format_double(r.point.n_enc) + "," + format_double(r.point.n_dec) + "," + format_double(r.point.loss) + "\n";
        pts.push_back(r.point);
      }
      const ScalingPoint base = ladder_counts(cfg.model, fixed_depth, fixed_depth);
      std::string fit_csv = "alpha,p_e,p_d,l_inf,r2\n";
      try {
        const ScalingLawFit f = fit_scaling_law(pts, base.n_enc, base.n_dec);
        fit_csv += format_double(f.alpha) + "," + format_double(f.p_e) + "," + format_double(f.p_d) + "," +
                   format_double(f.l_inf) + "," + format_double(f.r_squared) + "\n";
      } catch (const ConfigError& e) {
        std::cerr << "fit skipped: " << e.what() << '\n';
      }
      if (!ladder_opts.out.empty()) {
        write_text(fs::path(ladder_opts.out) / "points.csv", points);
        write_text(fs::path(ladder_opts.out) / "fit.csv", fit_csv);
      }
      std::cout << points << '\n' << fit_csv;
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
