// The federated round loop: local adapter training with contrastive + lambda
// * LMMD loss, weighted aggregation of flat adapter vectors, broadcast, and
// communication accounting.
#pragma once

#include <cmath>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <thread>
#include <vector>

#include "facmic/attention_net.hpp"
#include "facmic/core.hpp"
#include "facmic/evaluation.hpp"
#include "facmic/feature_store.hpp"
#include "facmic/losses.hpp"
#include "facmic/optimizer.hpp"

namespace facmic {

struct TrainConfig {
  std::size_t rounds = 100;
  std::size_t batch_size = 32;
  double tau = 0.01;
  double lambda = 1.0;  // already includes any small-batch rescale
  std::size_t hidden = 0;  // 0 means H = D
  AttentionConfig attention;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Unlabeled target-domain features shared by every client.
struct TargetPool {
  Matrix features;  // M x D

  [[nodiscard]] std::size_t size() const noexcept { return features.rows(); }
};

struct ClientState {
  std::size_t id = 0;
  SplitSpec split;
  AttentionParams params;
  AdamState adam;
  Rng shuffle_rng;
  Rng pool_rng;
};

struct EpochStats {
  std::size_t steps = 0;
  double loss_contr = 0.0;  // mean over steps
  double loss_da = 0.0;     // mean over steps
  bool da_skipped = false;  // empty pool, or no class shared in some batch
};

/// Parameter counts and float32 wire bytes per round and client.
class CommLedger {
 public:
  static constexpr std::uint64_t kBytesPerValue = 4;

  struct Entry {
    std::size_t round;
    std::size_t client;
    std::uint64_t up_values;
    std::uint64_t down_values;
  };

  void record(std::size_t round, std::size_t client, std::uint64_t up, std::uint64_t down) {
    entries_.push_back({round, client, up, down});
    up_values_ += up;
    down_values_ += down;
  }

  [[nodiscard]] const std::vector<Entry>& entries() const noexcept { return entries_; }
  [[nodiscard]] std::uint64_t total_up_values() const noexcept { return up_values_; }
  [[nodiscard]] std::uint64_t total_down_values() const noexcept { return down_values_; }
  [[nodiscard]] std::uint64_t total_up_bytes() const noexcept { return up_values_ * kBytesPerValue; }
  [[nodiscard]] std::uint64_t total_down_bytes() const noexcept {
    return down_values_ * kBytesPerValue;
  }

 private:
  std::vector<Entry> entries_;
  std::uint64_t up_values_ = 0;
  std::uint64_t down_values_ = 0;
};

struct RoundRecord {
  std::size_t round = 0;
  double acc = 0.0;   // global test set (union of client test splits)
  double bacc = 0.0;
  double loss_contr = 0.0;  // mean over clients of the epoch mean
  double loss_da = 0.0;
  std::uint64_t bytes_up = 0;    // cumulative through this round
  std::uint64_t bytes_down = 0;
  double client_mean_acc = 0.0;  // mean of per-client test accuracies
  std::optional<double> holdout_acc;
  std::optional<double> holdout_bacc;
};

/// Weighted average of client vectors, weights proportional to `sizes`.
inline std::vector<double> aggregate(std::span<const std::vector<double>> params_list,
                                     std::span<const std::size_t> sizes) {
  if (params_list.empty()) throw DataError("aggregate: no client vectors");
  if (params_list.size() != sizes.size())
    throw DataError("aggregate: vector count does not match size count");
  const std::size_t len = params_list.front().size();
  double total = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (params_list[i].size() != len)
      throw DataError("aggregate: client " + std::to_string(i) + " vector has length " +
                      std::to_string(params_list[i].size()) + ", expected " +
                      std::to_string(len));
    total += static_cast<double>(sizes[i]);
  }
  if (!(total > 0.0)) throw DataError("aggregate: total training size is zero");
  std::vector<double> out(len, 0.0);
  for (std::size_t i = 0; i < params_list.size(); ++i) {
    const double w = static_cast<double>(sizes[i]) / total;
    const auto& v = params_list[i];
    for (std::size_t j = 0; j < len; ++j) out[j] += w * v[j];
  }
  return out;
}

namespace detail {

inline void add_into(AttentionGrads& acc, const AttentionGrads& g) {
  auto add = [](std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  };
  add(acc.w1.data(), g.w1.data());
  add(acc.b1, g.b1);
  add(acc.bn_gamma, g.bn_gamma);
  add(acc.bn_beta, g.bn_beta);
  add(acc.w2.data(), g.w2.data());
  add(acc.b2, g.b2);
}

}  // namespace detail

/// Loss terms and gradients for one client batch against one pool batch.
struct BatchLoss {
  double contr = 0.0;
  double da = 0.0;
  bool da_skipped = false;
  AttentionGrads grads;
};

/// Forward both batches, evaluate L = L_contr + lambda * L_DA and backprop.
/// `pool_batch` may be empty, in which case the DA term is skipped. Running
/// statistics are updated from the client batch only.
inline BatchLoss batch_loss(AttentionParams& params, const Matrix& batch,
                            std::span<const std::uint16_t> labels, const Matrix& text,
                            const Matrix& pool_batch, double tau, double lambda,
                            const AttentionConfig& attn) {
  const std::size_t b = batch.rows();
  Matrix text_of_labels(b, text.cols());
  for (std::size_t i = 0; i < b; ++i)
    std::ranges::copy(text.row(labels[i]), text_of_labels.row(i).begin());

  auto src = forward(params, batch, Mode::train, attn, true);
  auto contr = contrastive_loss(src.masked, text_of_labels, tau);

  BatchLoss out;
  out.contr = contr.loss;
  Matrix d_src = std::move(contr.d_masked);

  if (pool_batch.rows() == 0) {
    out.da_skipped = true;
    out.grads = backward(src.tape, params, d_src, attn);
    return out;
  }

  auto tgt = forward(params, pool_batch, Mode::train, attn, false);
  const auto pseudo = pseudo_labels(tgt.masked, text, tau);
  const double bw = median_bandwidth(src.masked, tgt.masked);
  auto da = lmmd_loss(src.masked, labels, tgt.masked, pseudo, text.rows(), bw);
  out.da = da.loss;
  out.da_skipped = da.no_shared_class;

  if (lambda == 0.0) {
    out.grads = backward(src.tape, params, d_src, attn);
    return out;
  }
  for (std::size_t i = 0; i < d_src.size(); ++i) d_src.data()[i] += lambda * da.d_src.data()[i];
  for (auto& v : da.d_tgt.data()) v *= lambda;
  out.grads = backward(src.tape, params, d_src, attn);
  detail::add_into(out.grads, backward(tgt.tape, params, da.d_tgt, attn));
  return out;
}

/// One local epoch: floor(n_train / batch_size) Adam steps over a fresh
/// shuffle of the client's training split; the last partial batch is dropped.
inline EpochStats local_train_epoch(ClientState& client, const FeatureDataset& ds,
                                    const TargetPool& pool, const TrainConfig& cfg) {
  if (cfg.batch_size < 2) throw UsageError("batch_size must be >= 2 for batch norm");
  if (client.split.train.empty())
    throw DataError("client " + std::to_string(client.id) + " has an empty training split");

  std::vector<std::size_t> order = client.split.train;
  shuffle(order, client.shuffle_rng);
  const std::size_t b = cfg.batch_size;
  EpochStats stats;
  stats.da_skipped = pool.size() == 0;

  std::vector<std::size_t> rows(b), pool_rows(b);
  std::vector<std::uint16_t> labels(b);
  for (std::size_t start = 0; start + b <= order.size(); start += b) {
    for (std::size_t i = 0; i < b; ++i) {
      rows[i] = order[start + i];
      labels[i] = ds.labels[rows[i]];
    }
    const Matrix batch = gather_rows(ds.image_features, rows);
    Matrix pool_batch;
    if (pool.size() > 0) {
      for (auto& r : pool_rows) r = uniform_index(client.pool_rng, pool.size());
      pool_batch = gather_rows(pool.features, pool_rows);
    }
    auto step = batch_loss(client.params, batch, labels, ds.text_features, pool_batch, cfg.tau,
                           cfg.lambda, cfg.attention);
    stats.loss_contr += step.contr;
    stats.loss_da += step.da;
    stats.da_skipped = stats.da_skipped || step.da_skipped;

    auto trainable = flatten_trainable(client.params);
    adam_step(client.adam, trainable, flatten(step.grads), cfg.adam);
    assign_trainable(client.params, trainable);
    ++stats.steps;
  }
  if (stats.steps > 0) {
    stats.loss_contr /= static_cast<double>(stats.steps);
    stats.loss_da /= static_cast<double>(stats.steps);
  }
  for (double v : flatten(client.params))
    if (!std::isfinite(v))
      throw NumericError("client " + std::to_string(client.id) +
                         ": adapter parameters became non-finite");
  return stats;
}

/// Everything the round loop evaluates against.
struct EvalTargets {
  std::vector<std::size_t> global_test;  // union of client test splits
  const FeatureDataset* holdout = nullptr;
};

namespace detail {

template <typename Fn>
void for_each_client(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// One round: local epoch on every client, upload, aggregate, broadcast,
/// then evaluate the global adapter.
inline RoundRecord run_round(std::vector<ClientState>& clients, const FeatureDataset& ds,
                             const TargetPool& pool, const TrainConfig& cfg,
                             const EvalTargets& targets, CommLedger& ledger,
                             std::size_t round_index) {
  if (clients.empty()) throw UsageError("run_round: no clients");
  std::vector<EpochStats> stats(clients.size());
  detail::for_each_client(clients.size(), cfg.threads, [&](std::size_t i) {
    stats[i] = local_train_epoch(clients[i], ds, pool, cfg);
  });

  std::vector<std::vector<double>> uploads;
  std::vector<std::size_t> sizes;
  for (const auto& c : clients) {
    uploads.push_back(flatten(c.params));
    sizes.push_back(c.split.train.size());
  }
  const auto global_flat = aggregate(uploads, sizes);
  const std::size_t d = clients.front().params.d();
  const std::size_t h = clients.front().params.h();
  const AttentionParams global = unflatten(global_flat, d, h);
  for (auto& c : clients) {
    c.params = global;
    ledger.record(round_index, c.id, global_flat.size(), global_flat.size());
  }

  RoundRecord rec;
  rec.round = round_index;
  std::size_t reporting = 0;
  for (const auto& s : stats) {
    if (s.steps == 0) continue;
    rec.loss_contr += s.loss_contr;
    rec.loss_da += s.loss_da;
    ++reporting;
  }
  if (reporting > 0) {
    rec.loss_contr /= static_cast<double>(reporting);
    rec.loss_da /= static_cast<double>(reporting);
  }
  rec.bytes_up = ledger.total_up_bytes();
  rec.bytes_down = ledger.total_down_bytes();

  if (!targets.global_test.empty()) {
    const auto ev = evaluate(global, ds, targets.global_test, cfg.tau, cfg.attention);
    rec.acc = ev.acc;
    rec.bacc = ev.bacc;
  }
  double acc_sum = 0.0;
  std::size_t with_test = 0;
  for (const auto& c : clients) {
    if (c.split.test.empty()) continue;
    acc_sum += evaluate(global, ds, c.split.test, cfg.tau, cfg.attention).acc;
    ++with_test;
  }
  if (with_test > 0) rec.client_mean_acc = acc_sum / static_cast<double>(with_test);
  if (targets.holdout != nullptr && targets.holdout->n() > 0) {
    std::vector<std::size_t> all(targets.holdout->n());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto ev = evaluate(global, *targets.holdout, all, cfg.tau, cfg.attention);
    rec.holdout_acc = ev.acc;
    rec.holdout_bacc = ev.bacc;
  }
  return rec;
}

/// Seeds, splits and initial (broadcast) adapter for every client.
inline std::vector<ClientState> make_clients(const FeatureDataset& ds,
                                             const PartitionSpec& partition,
                                             const TrainConfig& cfg) {
  if (partition.clients() < 1) throw UsageError("at least one client is required");
  const std::size_t d = ds.d();
  const std::size_t h = cfg.hidden == 0 ? d : cfg.hidden;
  const AttentionParams init = init_params(d, h, mix_seed(cfg.seed, 1));
  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < partition.clients(); ++i) {
    const auto& idx = partition.client_indices[i];
    for (auto j : idx)
      if (j >= ds.n()) throw DataError("partition index " + std::to_string(j) + " out of range");
    ClientState c;
    c.id = i;
    try {
      c.split = split_8_1_1(idx, mix_seed(cfg.seed, 300 + i));
    } catch (const DataError& e) {
      throw DataError("client " + std::to_string(i) + ": " + e.what());
    }
    c.params = init;
    c.adam = make_adam_state(trainable_count(d, h));
    c.shuffle_rng.seed(mix_seed(cfg.seed, 100 + i));
    c.pool_rng.seed(mix_seed(cfg.seed, 200 + i));
    clients.push_back(std::move(c));
  }
  return clients;
}

inline std::vector<std::size_t> global_test_indices(const std::vector<ClientState>& clients) {
  std::vector<std::size_t> out;
  for (const auto& c : clients) out.insert(out.end(), c.split.test.begin(), c.split.test.end());
  std::ranges::sort(out);
  return out;
}

struct TrainingResult {
  std::vector<RoundRecord> records;
  AttentionParams global;
  CommLedger ledger;
  std::vector<std::size_t> global_test;
  std::vector<std::size_t> train_sizes;
};

/// Runs `cfg.rounds` rounds. `on_round` is called after each round.
inline TrainingResult run_training(const FeatureDataset& ds, const PartitionSpec& partition,
                                   const TargetPool& pool, const TrainConfig& cfg,
                                   const FeatureDataset* holdout = nullptr,
                                   const std::function<void(const RoundRecord&)>& on_round = {}) {
  if (pool.size() > 0 && pool.features.cols() != ds.d())
    throw DataError("target pool dimension " + std::to_string(pool.features.cols()) +
                    " does not match dataset dimension " + std::to_string(ds.d()));
  if (holdout != nullptr && holdout->n() > 0 && holdout->d() != ds.d())
    throw DataError("holdout dataset dimension does not match training dataset");
  auto clients = make_clients(ds, partition, cfg);
  TrainingResult result;
  result.global = clients.front().params;
  result.global_test = global_test_indices(clients);
  for (const auto& c : clients) result.train_sizes.push_back(c.split.train.size());
  const EvalTargets targets{result.global_test, holdout};
  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    auto rec = run_round(clients, ds, pool, cfg, targets, result.ledger, r);
    if (on_round) on_round(rec);
    result.records.push_back(rec);
  }
  result.global = clients.front().params;
  return result;
}

}  // namespace facmic
