#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bmt/model.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

enum class TaskKind { kCopy, kReverse, kMappedReverse };

std::string_view task_name(TaskKind t);
TaskKind parse_task(std::string_view name);

struct SyntheticTaskSpec {
  TaskKind task = TaskKind::kMappedReverse;
  int vocab_size = 32;
  int min_len = 4;
  int max_len = 12;
  int n_train = 20000;
  int n_eval = 500;
  std::uint64_t seed = 1;

  void validate() const;
};

/// One source/target pair of content tokens (no BOS/EOS).
struct Example {
  std::vector<int> src;
  std::vector<int> tgt;
};

struct TaskData {
  std::vector<Example> train;
  std::vector<Example> eval;
};

/// Fixed content-token permutation used by mapped-reverse. It depends only
/// on the vocabulary size, so every seed poses the same task.
std::vector<int> task_permutation(int vocab_size);

/// Reference output for a source under the task.
std::vector<int> task_target(TaskKind task, const std::vector<int>& src, const std::vector<int>& permutation);

/// Deterministic given the spec; eval sources never occur in train.
TaskData generate_task(const SyntheticTaskSpec& spec);

/// Teacher-forcing tensors: tgt_in = BOS y, tgt_out = y EOS.
struct Batch {
  TokenBatch src;
  TokenBatch tgt_in;
  std::vector<int> tgt_out;  ///< [batch * tgt_in.len], kPad where masked
  std::size_t tokens = 0;    ///< non-pad target tokens
};

Batch make_batch(const std::vector<Example>& data, const std::vector<std::size_t>& indices);
Batch make_batch(const std::vector<Example>& data, std::size_t begin, std::size_t end);

/// Deterministic epoch-shuffled batch order.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void reshuffle();
  std::size_t n_, batch_size_, cursor_ = 0;
  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
};

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
