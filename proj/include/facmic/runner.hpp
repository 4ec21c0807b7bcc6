// End-to-end training pipeline driven by a RunConfig: builds or loads the
// inputs, runs the federation and writes every artifact to the output dir.
#pragma once

#include <filesystem>
#include <optional>
#include <ostream>

#include <json.hpp>

#include "facmic/artifacts.hpp"
#include "facmic/config.hpp"
#include "facmic/federation.hpp"
#include "facmic/feature_store.hpp"

namespace facmic {

struct RunInputs {
  FeatureDataset dataset;
  TargetPool pool;
  std::optional<FeatureDataset> holdout;
  PartitionSpec partition;
};

namespace detail {

inline SyntheticSpec derived_synthetic(const RunConfig& c, std::size_t n_per_class,
                                       std::uint64_t seed, double shift) {
  SyntheticSpec s = c.synthetic;
  s.n_per_class = n_per_class;
  s.seed = seed;
  s.shift = shift;
  s.groups = 1;
  s.anchor_seed = c.synthetic.anchor_seed.value_or(c.synthetic.seed);
  return s;
}

}  // namespace detail

inline PartitionSpec make_partition(const RunConfig& c, const FeatureDataset& ds) {
  switch (c.partition) {
    case PartitionPolicy::iid: return partition_iid(ds.n(), c.clients, c.partition_seed);
    case PartitionPolicy::dirichlet:
      return partition_dirichlet(ds.labels, c.clients, c.alpha, c.partition_seed);
    case PartitionPolicy::blocks: return partition_blocks(ds.n(), c.clients);
  }
  throw UsageError("unknown partition policy");
}

inline RunInputs prepare_inputs(const RunConfig& c) {
  RunInputs in;
  switch (c.dataset.kind) {
    case SourceSpec::Kind::none: throw ConfigError("dataset must be a file or 'synthetic'");
    case SourceSpec::Kind::file: in.dataset = load_dataset(c.dataset.path); break;
    case SourceSpec::Kind::synthetic: in.dataset = generate_synthetic(c.synthetic); break;
  }
  const bool synthetic = c.dataset.kind == SourceSpec::Kind::synthetic;

  switch (c.pool.kind) {
    case SourceSpec::Kind::none: break;
    case SourceSpec::Kind::file: in.pool.features = load_any_dataset(c.pool.path).image_features; break;
    case SourceSpec::Kind::synthetic:
      if (!synthetic) throw ConfigError("pool = synthetic requires dataset = synthetic");
      in.pool.features =
          generate_synthetic(detail::derived_synthetic(c, c.pool_n_per_class, c.pool_seed, 0.0))
              .image_features;
      break;
  }
  if (in.pool.size() > 0 && in.pool.features.cols() != in.dataset.d())
    throw DataError("pool dimension " + std::to_string(in.pool.features.cols()) +
                    " does not match dataset dimension " + std::to_string(in.dataset.d()));

  switch (c.holdout.kind) {
    case SourceSpec::Kind::none: break;
    case SourceSpec::Kind::file: in.holdout = load_dataset(c.holdout.path); break;
    case SourceSpec::Kind::synthetic:
      if (!synthetic) throw ConfigError("holdout = synthetic requires dataset = synthetic");
      in.holdout = generate_synthetic(
          detail::derived_synthetic(c, c.holdout_n_per_class, c.holdout_seed, c.holdout_shift));
      break;
  }
  if (in.holdout && in.holdout->d() != in.dataset.d())
    throw DataError("holdout dimension does not match dataset dimension");

  in.partition = make_partition(c, in.dataset);
  return in;
}

struct RunOutcome {
  TrainingResult result;
  std::filesystem::path metrics_csv;
  std::filesystem::path adapter_file;
};

/// Trains and writes metrics.csv, adapter.facp, global_test.facm, ledger.json
/// and summary.json into `c.out`. Progress lines go to `log`.
inline RunOutcome run_train(const RunConfig& c, std::ostream& log) {
  const RunInputs in = prepare_inputs(c);
  const TrainConfig tc = c.train_config();
  std::filesystem::create_directories(c.out);

  log << "dataset N=" << in.dataset.n() << " D=" << in.dataset.d() << " K=" << in.dataset.k()
      << ", pool M=" << in.pool.size() << ", clients=" << in.partition.clients()
      << ", lambda=" << format_double(tc.lambda) << '\n';
  if (in.pool.size() == 0) log << "warning: empty target pool, domain adaptation disabled\n";

  RunOutcome out;
  out.result = run_training(in.dataset, in.partition, in.pool, tc,
                            in.holdout ? &*in.holdout : nullptr, [&](const RoundRecord& r) {
                              log << "round " << r.round << " acc=" << format_double(r.acc)
                                  << " bacc=" << format_double(r.bacc)
                                  << " loss_contr=" << format_double(r.loss_contr)
                                  << " loss_da=" << format_double(r.loss_da) << '\n';
                            });
  const auto& res = out.result;

  out.metrics_csv = c.out / "metrics.csv";
  write_metrics_csv(res.records, out.metrics_csv);
  out.adapter_file = c.out / "adapter.facp";
  save_adapter({res.global, tc.attention, tc.tau}, out.adapter_file);

  if (!res.global_test.empty()) {
    FeatureDataset test;
    test.image_features = gather_rows(in.dataset.image_features, res.global_test);
    for (auto i : res.global_test) test.labels.push_back(in.dataset.labels[i]);
    test.text_features = in.dataset.text_features;
    test.class_names = in.dataset.class_names;
    save_dataset(test, c.out / "global_test.facm");
  }

  const std::size_t flat_len = flat_count(res.global.d(), res.global.h());
  nlohmann::json ledger;
  ledger["values_per_upload"] = flat_len;
  ledger["bytes_per_value"] = CommLedger::kBytesPerValue;
  ledger["total_up_values"] = res.ledger.total_up_values();
  ledger["total_down_values"] = res.ledger.total_down_values();
  ledger["total_up_bytes"] = res.ledger.total_up_bytes();
  ledger["total_down_bytes"] = res.ledger.total_down_bytes();
  ledger["entries"] = nlohmann::json::array();
  for (const auto& e : res.ledger.entries())
    ledger["entries"].push_back(
        {{"round", e.round}, {"client", e.client}, {"up", e.up_values}, {"down", e.down_values}});
  detail::write_file(c.out / "ledger.json", ledger.dump(2) + "\n");

  nlohmann::json summary;
  summary["rounds"] = res.records.size();
  summary["clients"] = in.partition.clients();
  summary["train_sizes"] = res.train_sizes;
  summary["global_test_size"] = res.global_test.size();
  summary["effective_lambda"] = tc.lambda;
  if (!res.records.empty()) {
    const auto& last = res.records.back();
    summary["final_acc"] = last.acc;
    summary["final_bacc"] = last.bacc;
    summary["final_client_mean_acc"] = last.client_mean_acc;
    if (last.holdout_acc) {
      summary["final_holdout_acc"] = *last.holdout_acc;
      summary["final_holdout_bacc"] = *last.holdout_bacc;
    }
  }
  detail::write_file(c.out / "summary.json", summary.dump(2) + "\n");

  log << "ledger: " << res.ledger.total_up_values() << " values up ("
      << res.ledger.total_up_bytes() << " bytes), " << res.ledger.total_down_values()
      << " values down (" << res.ledger.total_down_bytes() << " bytes); " << flat_len
      << " values per client per direction per round\n";
  return out;
}

}  // namespace facmic
