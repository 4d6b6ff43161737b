#include "bmt/data.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "bmt/random.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {
constexpr std::uint64_t kPermutationSeed = 0x6d61707065642d72ULL;
}

std::string_view task_name(TaskKind t) {
  switch (t) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kMappedReverse: return "mapped-reverse";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "mapped-reverse") return TaskKind::kMappedReverse;
  throw ConfigError("unknown task '" + std::string(name) + "' (copy|reverse|mapped-reverse)");
}

void SyntheticTaskSpec::validate() const {
  if (vocab_size <= kFirstContentToken + 1) throw ConfigError("task: vocab_size too small");
  if (min_len < 1 || max_len < min_len) throw ConfigError("task: need 1 <= min_len <= max_len");
  if (n_train < 1 || n_eval < 1) throw ConfigError("task: n_train and n_eval must be positive");
}

std::vector<int> task_permutation(int vocab_size) {
  std::vector<int> perm(static_cast<std::size_t>(vocab_size));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> content(perm.begin() + kFirstContentToken, perm.end());
  Rng rng(kPermutationSeed);
  rng.shuffle(content);
  std::copy(content.begin(), content.end(), perm.begin() + kFirstContentToken);
  return perm;
}

std::vector<int> task_target(TaskKind task, const std::vector<int>& src, const std::vector<int>& permutation) {
  std::vector<int> out = src;
  if (task == TaskKind::kCopy) return out;
  std::reverse(out.begin(), out.end());
  if (task == TaskKind::kMappedReverse)
    for (int& t : out) t = permutation.at(static_cast<std::size_t>(t));
  return out;
}

TaskData generate_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const auto perm = task_permutation(spec.vocab_size);
  Rng rng(spec.seed);
  auto draw = [&] {
    const auto len = rng.uniform_int(spec.min_len, spec.max_len);
    std::vector<int> s(static_cast<std::size_t>(len));
    for (int& t : s) t = static_cast<int>(rng.uniform_int(kFirstContentToken, spec.vocab_size - 1));
    return s;
  };
  TaskData data;
  std::set<std::vector<int>> train_sources;
  for (int i = 0; i < spec.n_train; ++i) {
    auto s = draw();
    train_sources.insert(s);
    data.train.push_back({s, task_target(spec.task, s, perm)});
  }
  // Rejection keeps eval disjoint from train; bounded so tiny spaces fail loudly.
  for (long attempts = 0; static_cast<int>(data.eval.size()) < spec.n_eval; ++attempts) {
    if (attempts > 100L * spec.n_eval + 10000) throw ConfigError("task: cannot draw enough unseen eval sources");
    auto s = draw();
    if (train_sources.count(s)) continue;
    data.eval.push_back({s, task_target(spec.task, s, perm)});
  }
  return data;
}

Batch make_batch(const std::vector<Example>& data, const std::vector<std::size_t>& indices) {
  std::vector<std::vector<int>> src, tin;
  std::size_t tlen = 0;
  for (std::size_t i : indices) {
    const Example& e = data.at(i);
    src.push_back(e.src);
    std::vector<int> t{kBos};
    t.insert(t.end(), e.tgt.begin(), e.tgt.end());
    tin.push_back(std::move(t));
    tlen = std::max(tlen, e.tgt.size() + 1);
  }
  Batch b;
  b.src = TokenBatch::from_sequences(src);
  b.tgt_in = TokenBatch::from_sequences(tin, tlen);
  b.tgt_out.assign(indices.size() * tlen, kPad);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& y = data[indices[r]].tgt;
    std::copy(y.begin(), y.end(), b.tgt_out.begin() + r * tlen);
    b.tgt_out[r * tlen + y.size()] = kEos;
    b.tokens += y.size() + 1;
  }
  return b;
}

Batch make_batch(const std::vector<Example>& data, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(data, idx);
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), seed_(seed) {
  if (n == 0 || batch_size == 0) throw ConfigError("sampler: empty dataset or batch");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_);
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(seed_ * 0x9e3779b97f4a7c15ULL + epoch_++);
  rng.shuffle(order_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  while (out.size() < batch_size_) {
    if (cursor_ == n_) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
