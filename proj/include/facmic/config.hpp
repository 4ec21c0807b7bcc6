// Run configuration: a flat `key = value` file, '#' starts a comment.
// See configs/synthetic.cfg for every key and its default.
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "facmic/core.hpp"
#include "facmic/federation.hpp"

namespace facmic {

/// Parse failures in configuration text (mapped to the usage exit code).
class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

/// Where a dataset-like input comes from.
struct SourceSpec {
  enum class Kind { none, file, synthetic } kind = Kind::none;
  std::filesystem::path path;  // Kind::file
};

struct RunConfig {
  SourceSpec dataset{SourceSpec::Kind::synthetic, {}};
  SyntheticSpec synthetic;  // dataset when kind == synthetic; its anchors seed the pool/holdout too

  SourceSpec pool{SourceSpec::Kind::synthetic, {}};
  std::size_t pool_n_per_class = 50;
  std::uint64_t pool_seed = 1;

  SourceSpec holdout{SourceSpec::Kind::none, {}};
  std::size_t holdout_n_per_class = 50;
  std::uint64_t holdout_seed = 2;
  double holdout_shift = 0.0;

  std::size_t clients = 3;
  PartitionPolicy partition = PartitionPolicy::iid;
  double alpha = 0.3;
  std::uint64_t partition_seed = 0;

  std::size_t rounds = 100;
  std::size_t batch_size = 32;
  double tau = 0.01;
  double lambda = 1.0;
  double lambda_small_batch_rescale = 0.1;
  std::size_t small_batch_threshold = 8;
  std::size_t hidden_dim = 0;  // 0: same as D
  AttentionConfig attention;
  AdamConfig adam;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";

  /// lambda after the automatic small-batch rescale.
  [[nodiscard]] double effective_lambda() const noexcept {
    return batch_size <= small_batch_threshold ? lambda * lambda_small_batch_rescale : lambda;
  }

  [[nodiscard]] TrainConfig train_config() const {
    TrainConfig t;
    t.rounds = rounds;
    t.batch_size = batch_size;
    t.tau = tau;
    t.lambda = effective_lambda();
    t.hidden = hidden_dim;
    t.attention = attention;
    t.adam = adam;
    t.seed = seed;
    t.threads = threads;
    return t;
  }

  void validate() const {
    if (clients < 1) throw ConfigError("clients must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(lambda_small_batch_rescale >= 0.0))
      throw ConfigError("lambda_small_batch_rescale must be >= 0");
    if (partition == PartitionPolicy::dirichlet && !(alpha > 0.0))
      throw ConfigError("alpha must be > 0");
    if (partition == PartitionPolicy::dirichlet && clients < 2)
      throw ConfigError("dirichlet partition needs clients >= 2");
    if (!(adam.lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)");
    if (!(adam.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(adam.eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (!(attention.bn_eps > 0.0)) throw ConfigError("bn_eps must be > 0");
    if (!(attention.bn_momentum > 0.0 && attention.bn_momentum <= 1.0))
      throw ConfigError("bn_momentum must be in (0, 1]");
    if (!(attention.leaky_slope >= 0.0)) throw ConfigError("leaky_slope must be >= 0");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError("key '" + key + "': cannot parse '" + value + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + value + "'");
}

inline SourceSpec parse_source(const std::string& value, const std::filesystem::path& base) {
  if (value == "none") return {SourceSpec::Kind::none, {}};
  if (value == "synthetic") return {SourceSpec::Kind::synthetic, {}};
  std::filesystem::path p(value);
  if (p.is_relative()) p = base / p;
  return {SourceSpec::Kind::file, p};
}

}  // namespace detail

/// Applies one key to the config. Relative paths resolve against `base`.
inline void apply_config_key(RunConfig& c, const std::string& key, const std::string& value,
                             const std::filesystem::path& base = {}) {
  using detail::parse_bool;
  using detail::parse_number;
  auto sz = [&] { return parse_number<std::size_t>(key, value); };
  auto u64 = [&] { return parse_number<std::uint64_t>(key, value); };
  auto dbl = [&] { return parse_number<double>(key, value); };

  if (key == "dataset") c.dataset = detail::parse_source(value, base);
  else if (key == "synthetic.d") c.synthetic.d = sz();
  else if (key == "synthetic.k") c.synthetic.k = sz();
  else if (key == "synthetic.n_per_class") c.synthetic.n_per_class = sz();
  else if (key == "synthetic.shift") c.synthetic.shift = dbl();
  else if (key == "synthetic.noise") c.synthetic.noise = dbl();
  else if (key == "synthetic.groups") c.synthetic.groups = sz();
  else if (key == "synthetic.seed") c.synthetic.seed = u64();
  else if (key == "pool") c.pool = detail::parse_source(value, base);
  else if (key == "pool.n_per_class") c.pool_n_per_class = sz();
  else if (key == "pool.seed") c.pool_seed = u64();
  else if (key == "holdout") c.holdout = detail::parse_source(value, base);
  else if (key == "holdout.n_per_class") c.holdout_n_per_class = sz();
  else if (key == "holdout.seed") c.holdout_seed = u64();
  else if (key == "holdout.shift") c.holdout_shift = dbl();
  else if (key == "clients") c.clients = sz();
  else if (key == "partition") c.partition = parse_partition_policy(value);
  else if (key == "alpha") c.alpha = dbl();
  else if (key == "partition_seed") c.partition_seed = u64();
  else if (key == "rounds") c.rounds = sz();
  else if (key == "batch_size") c.batch_size = sz();
  else if (key == "tau") c.tau = dbl();
  else if (key == "lambda") c.lambda = dbl();
  else if (key == "lambda_small_batch_rescale") c.lambda_small_batch_rescale = dbl();
  else if (key == "small_batch_threshold") c.small_batch_threshold = sz();
  else if (key == "hidden_dim") c.hidden_dim = sz();
  else if (key == "leaky_slope") c.attention.leaky_slope = dbl();
  else if (key == "bn_momentum") c.attention.bn_momentum = dbl();
  else if (key == "bn_eps") c.attention.bn_eps = dbl();
  else if (key == "lr") c.adam.lr = dbl();
  else if (key == "beta1") c.adam.beta1 = dbl();
  else if (key == "beta2") c.adam.beta2 = dbl();
  else if (key == "weight_decay") c.adam.weight_decay = dbl();
  else if (key == "adam_eps") c.adam.eps = dbl();
  else if (key == "decoupled_weight_decay") c.adam.decoupled_weight_decay = parse_bool(key, value);
  else if (key == "threads") c.threads = sz();
  else if (key == "seed") c.seed = u64();
  else if (key == "out") {
    std::filesystem::path p(value);
    c.out = p.is_relative() && !base.empty() ? base / p : p;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline RunConfig parse_config(std::istream& in, const std::filesystem::path& base = {}) {
  RunConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");
    try {
      apply_config_key(c, key, value, base);
    } catch (const UsageError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_config(in, path.parent_path());
}

}  // namespace facmic
