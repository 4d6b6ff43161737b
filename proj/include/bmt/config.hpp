#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bmt/data.hpp"
#include "bmt/model.hpp"
#include "bmt/trainer.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

/// Everything a training run needs, read from flat `key = value` text.
/// Blank lines and lines starting with '#' are ignored; later keys win.
struct RunConfig {
  TransformerConfig model;
  TrainConfig train;
  QuantSchedule schedule = QuantSchedule::parse("1000:none,1000:w,1000:wa");
  SyntheticTaskSpec task;

  /// Throws ConfigError for unknown keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  /// Applies "key=value".
  void set(std::string_view assignment);

  /// Applies config text on top of the current values.
  void apply(std::string_view text);
  void apply_file(const std::string& path);

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::string& path);

  /// All keys with their resolved values, in a fixed order.
  std::vector<std::pair<std::string, std::string>> items() const;
  std::string str() const;
  void validate() const;
};

/// Shortest decimal text that round-trips.
std::string format_double(double v);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
