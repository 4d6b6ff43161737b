#include "bmt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "bmt/random.hpp"
#include "bmt/trainer.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

// PAD and BOS are never generated.
bool generable(int token) { return token >= kEos; }

std::vector<double> log_softmax(std::span<const Real> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (Real v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lz;
  return out;
}

// Higher score first, then the smaller token sequence.
bool better(double sa, const std::vector<int>& ta, double sb, const std::vector<int>& tb) {
  if (sa != sb) return sa > sb;
  return ta < tb;
}

}  // namespace

// ---- step models ------------------------------------------------------------

TransformerStepModel::TransformerStepModel(Transformer& model, const std::vector<int>& src)
    : model_(model), src_(src) {
  model_.set_dropout_seed(std::nullopt);
  NoGradGuard no_grad;
  memory_ = model_.encode(TokenBatch::from_sequences({src_}));
}

int TransformerStepModel::vocab_size() const { return model_.config().vocab_size; }

std::vector<std::vector<double>> TransformerStepModel::next_log_probs(const std::vector<std::vector<int>>& prefixes) {
  if (prefixes.empty()) return {};
  NoGradGuard no_grad;
  const std::size_t k = prefixes.size();
  const std::size_t rows = memory_.dim(0), d = memory_.dim(1);
  std::vector<Real> tiled;
  tiled.reserve(k * rows * d);
  const auto mem = memory_.values();
  for (std::size_t i = 0; i < k; ++i) tiled.insert(tiled.end(), mem.begin(), mem.end());
  const TokenBatch src = TokenBatch::from_sequences(std::vector<std::vector<int>>(k, src_));
  std::vector<std::vector<int>> tin;
  for (const auto& p : prefixes) {
    std::vector<int> t{kBos};
    t.insert(t.end(), p.begin(), p.end());
    tin.push_back(std::move(t));
  }
  const TokenBatch tgt = TokenBatch::from_sequences(tin);
  const Tensor logits = model_.decode(Tensor({k * rows, d}, std::move(tiled)), src, tgt);
  const auto v = static_cast<std::size_t>(vocab_size());
  const auto all = logits.values();
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t pos = prefixes[i].size();
    out.push_back(log_softmax(all.subspan((i * tgt.len + pos) * v, v)));
  }
  return out;
}

// ---- search -----------------------------------------------------------------

double length_penalty(std::size_t n, double alpha) {
  return std::pow((5.0 + static_cast<double>(n)) / 6.0, alpha);
}

Hypothesis beam_search(StepModel& model, int beam_size, double alpha, int max_len) {
  if (beam_size < 1) throw ConfigError("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw ConfigError("beam_search: max_len must be >= 1");
  struct Cand {
    std::vector<int> tokens;
    double logp;
  };
  std::vector<Cand> alive{{{}, 0.0}};
  std::vector<Hypothesis> finished;
  auto best_finished = [&]() -> const Hypothesis* {
    const Hypothesis* best = nullptr;
    for (const auto& h : finished)
      if (!best || better(h.score, h.tokens, best->score, best->tokens)) best = &h;
    return best;
  };

  for (int step = 1; step <= max_len && !alive.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& a : alive) prefixes.push_back(a.tokens);
    const auto lps = model.next_log_probs(prefixes);
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < alive.size(); ++i)
      for (std::size_t v = 0; v < lps[i].size(); ++v) {
        const int tok = static_cast<int>(v);
        if (!generable(tok) || !std::isfinite(lps[i][v])) continue;
        Cand c{alive[i].tokens, alive[i].logp + lps[i][v]};
        c.tokens.push_back(tok);
        cands.push_back(std::move(c));
      }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(beam_size), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) { return better(a.logp, a.tokens, b.logp, b.tokens); });
    cands.resize(keep);

    std::vector<Cand> next;
    for (auto& c : cands) {
      if (c.tokens.back() == kEos) {
        c.tokens.pop_back();
        Hypothesis h{c.tokens, c.logp, 0.0, true};
        h.score = c.logp / length_penalty(h.length(), alpha);
        finished.push_back(std::move(h));
      } else if (step == max_len) {
        Hypothesis h{c.tokens, c.logp, 0.0, false};
        h.score = c.logp / length_penalty(h.length(), alpha);
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(c));
      }
    }
    alive = std::move(next);

    // Log-probs only fall as tokens append, so with alpha >= 0 no alive
    // hypothesis can beat logp / lp(max_len).
    const Hypothesis* best = best_finished();
    if (best && alpha >= 0 && !alive.empty()) {
      double bound = -std::numeric_limits<double>::infinity();
      for (const auto& a : alive)
        bound = std::max(bound, a.logp / length_penalty(static_cast<std::size_t>(max_len), alpha));
      if (best->score > bound) break;
    }
  }
  const Hypothesis* best = best_finished();
  if (!best) throw NumericError("beam_search: no finite hypothesis");
  return *best;
}

Hypothesis greedy_decode(StepModel& model, int max_len) { return beam_search(model, 1, 0.0, max_len); }

std::vector<Hypothesis> sample(StepModel& model, int n_samples, double temperature, std::uint64_t seed,
                               int max_len) {
  if (n_samples < 1) throw ConfigError("sample: n_samples must be >= 1");
  if (max_len < 1) throw ConfigError("sample: max_len must be >= 1");
  Rng rng(seed);
  std::vector<Hypothesis> out(static_cast<std::size_t>(n_samples));
  std::vector<std::size_t> active(out.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;

  for (int step = 1; step <= max_len && !active.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (std::size_t i : active) prefixes.push_back(out[i].tokens);
    const auto lps = model.next_log_probs(prefixes);
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < active.size(); ++r) {
      const auto& lp = lps[r];
      int tok = -1;
      if (temperature <= 0) {
        for (std::size_t v = 0; v < lp.size(); ++v)
          if (generable(static_cast<int>(v)) && (tok < 0 || lp[v] > lp[static_cast<std::size_t>(tok)]))
            tok = static_cast<int>(v);
      } else {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < lp.size(); ++v)
          if (generable(static_cast<int>(v))) mx = std::max(mx, lp[v] / temperature);
        std::vector<double> w(lp.size(), 0.0);
        double z = 0;
        for (std::size_t v = 0; v < lp.size(); ++v)
          if (generable(static_cast<int>(v))) z += w[v] = std::exp(lp[v] / temperature - mx);
        double u = rng.uniform() * z;
        for (std::size_t v = 0; v < lp.size(); ++v) {
          if (w[v] == 0) continue;
          tok = static_cast<int>(v);
          if ((u -= w[v]) < 0) break;
        }
      }
      if (tok < 0) throw NumericError("sample: no generable token");
      Hypothesis& h = out[active[r]];
      h.log_prob += lp[static_cast<std::size_t>(tok)];
      if (tok == kEos) {
        h.finished = true;
      } else {
        h.tokens.push_back(tok);
        still.push_back(active[r]);
      }
    }
    active = std::move(still);
  }
  for (auto& h : out) h.score = h.log_prob;
  return out;
}

// ---- MBR --------------------------------------------------------------------

UtilityFn UtilityFn::parse(std::string_view name) {
  if (name == "sentence-bleu") return {UtilityKind::kSentenceBleu, 4};
  if (name == "token-f1") return {UtilityKind::kTokenF1, 4};
  throw ConfigError("unknown utility '" + std::string(name) + "' (sentence-bleu|token-f1)");
}

std::string UtilityFn::name() const { return kind == UtilityKind::kTokenF1 ? "token-f1" : "sentence-bleu"; }

double UtilityFn::operator()(const std::vector<int>& hyp, const std::vector<int>& ref) const {
  return kind == UtilityKind::kTokenF1 ? token_f1(hyp, ref) : sentence_bleu(hyp, ref, max_n);
}

std::size_t mbr_argmax(const std::vector<std::vector<double>>& utility) {
  if (utility.empty()) throw ConfigError("mbr: empty hypothesis set");
  std::size_t best = 0;
  double best_mean = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < utility.size(); ++i) {
    if (utility[i].empty()) throw ConfigError("mbr: empty utility row");
    double s = 0;
    for (double u : utility[i]) s += u;
    const double mean = s / static_cast<double>(utility[i].size());
    if (mean > best_mean) {
      best_mean = mean;
      best = i;
    }
  }
  return best;
}

Hypothesis mbr_decode(const std::vector<Hypothesis>& hypotheses, const UtilityFn& utility) {
  if (hypotheses.empty()) throw ConfigError("mbr: empty hypothesis set");
  std::vector<std::vector<double>> u(hypotheses.size(), std::vector<double>(hypotheses.size()));
  for (std::size_t i = 0; i < hypotheses.size(); ++i)
    for (std::size_t j = 0; j < hypotheses.size(); ++j) u[i][j] = utility(hypotheses[i].tokens, hypotheses[j].tokens);
  return hypotheses[mbr_argmax(u)];
}

// ---- metrics ----------------------------------------------------------------

namespace {

struct BleuStats {
  std::vector<double> correct, total;
  double hyp_len = 0, ref_len = 0;
  explicit BleuStats(int max_n) : correct(static_cast<std::size_t>(max_n)), total(static_cast<std::size_t>(max_n)) {}

  void add(const std::vector<int>& hyp, const std::vector<int>& ref) {
    hyp_len += static_cast<double>(hyp.size());
    ref_len += static_cast<double>(ref.size());
    for (std::size_t n = 1; n <= correct.size(); ++n) {
      if (hyp.size() < n) break;
      std::map<std::vector<int>, int> ref_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
      std::map<std::vector<int>, int> hyp_counts;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
      for (const auto& [gram, c] : hyp_counts) {
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) correct[n - 1] += std::min(c, it->second);
      }
      total[n - 1] += static_cast<double>(hyp.size() - n + 1);
    }
  }

  double score() const {
    if (hyp_len == 0) return ref_len == 0 ? 100.0 : 0.0;
    if (correct[0] == 0) return 0.0;
    double log_sum = 0, smooth = 1;
    int order = 0;
    for (std::size_t n = 0; n < correct.size() && total[n] > 0; ++n) {
      double p;
      if (correct[n] == 0) {
        smooth *= 2;
        p = 1.0 / (smooth * total[n]);
      } else {
        p = correct[n] / total[n];
      }
      log_sum += std::log(p);
      ++order;
    }
    const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
    return 100.0 * bp * std::exp(log_sum / order);
  }
};

}  // namespace

double bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
            int max_n) {
  if (hypotheses.empty()) throw ConfigError("bleu: empty corpus");
  if (hypotheses.size() != references.size()) throw ConfigError("bleu: hypothesis and reference counts differ");
  if (max_n < 1) throw ConfigError("bleu: max_n must be >= 1");
  BleuStats s(max_n);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s.add(hypotheses[i], references[i]);
  return s.score();
}

double sentence_bleu(const std::vector<int>& hyp, const std::vector<int>& ref, int max_n) {
  return bleu({hyp}, {ref}, max_n);
}

double token_f1(const std::vector<int>& hyp, const std::vector<int>& ref) {
  if (hyp.empty() && ref.empty()) return 1.0;
  if (hyp.empty() || ref.empty()) return 0.0;
  std::map<int, int> counts;
  for (int t : ref) ++counts[t];
  double overlap = 0;
  for (int t : hyp)
    if (counts[t] > 0) {
      --counts[t];
      ++overlap;
    }
  if (overlap == 0) return 0.0;
  const double p = overlap / static_cast<double>(hyp.size()), r = overlap / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

// ---- batch helpers ------------------------------------------------------------

std::vector<DecodedExample> decode_all(Transformer& model, const std::vector<std::vector<int>>& sources,
                                       const DecodeOptions& options) {
  std::vector<DecodedExample> out;
  for (const auto& src : sources) {
    TransformerStepModel step(model, src);
    int max_len = options.max_len > 0 ? options.max_len : static_cast<int>(src.size()) + 4;
    max_len = std::min(max_len, model.config().max_len);
    out.push_back({src, beam_search(step, options.beam_size, options.alpha, max_len)});
  }
  return out;
}

GenerationEval evaluate_generation(Transformer& model, const std::vector<Example>& data, const DecodeOptions& options) {
  if (data.empty()) throw ConfigError("evaluate_generation: empty dataset");
  std::vector<std::vector<int>> sources, refs, hyps;
  for (const auto& e : data) {
    sources.push_back(e.src);
    refs.push_back(e.tgt);
  }
  for (auto& d : decode_all(model, sources, options)) hyps.push_back(std::move(d.output.tokens));
  GenerationEval r;
  r.bleu = bleu(hyps, refs);
  r.token_acc = evaluate(model, data).token_acc;
  return r;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
