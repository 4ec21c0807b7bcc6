// facmic: command-line front end for the federated adapter simulator.
//
// Exit codes: 0 ok, 2 usage/config, 3 data, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <numeric>

#include "facmic/facmic.hpp"

namespace {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct SynthArgs {
  facmic::SyntheticSpec spec;
  std::string out;
  bool unlabeled = false;
  std::string pool_out;
  std::size_t pool_n_per_class = 50;
  std::uint64_t pool_seed = 1;
};

int cmd_synth(const SynthArgs& a) {
  auto ds = facmic::generate_synthetic(a.spec);
  ds.unlabeled = a.unlabeled;
  facmic::save_dataset(ds, a.out);
  std::cout << a.out << ": N=" << ds.n() << " D=" << ds.d() << " K=" << ds.k() << '\n';
  if (!a.pool_out.empty()) {
    facmic::SyntheticSpec ps = a.spec;
    ps.anchor_seed = a.spec.anchor_seed.value_or(a.spec.seed);
    ps.seed = a.pool_seed;
    ps.n_per_class = a.pool_n_per_class;
    ps.shift = 0.0;
    ps.groups = 1;
    auto pool = facmic::generate_synthetic(ps);
    pool.unlabeled = true;
    facmic::save_dataset(pool, a.pool_out);
    std::cout << a.pool_out << ": N=" << pool.n() << " D=" << pool.d() << " K=" << pool.k()
              << " (unlabeled pool)\n";
  }
  return kOk;
}

struct PartitionArgs {
  std::string dataset;
  std::size_t clients = 3;
  std::string policy = "iid";
  double alpha = 0.3;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_partition(const PartitionArgs& a) {
  const auto ds = facmic::load_dataset(a.dataset);
  facmic::RunConfig c;
  c.clients = a.clients;
  c.partition = facmic::parse_partition_policy(a.policy);
  c.alpha = a.alpha;
  c.partition_seed = a.seed;
  const auto part = facmic::make_partition(c, ds);

  nlohmann::json j;
  j["policy"] = std::string(facmic::to_string(part.policy));
  j["alpha"] = part.alpha;
  j["seed"] = part.seed;
  j["clients"] = part.client_indices;
  for (std::size_t i = 0; i < part.clients(); ++i) {
    std::vector<std::size_t> per_class(ds.k(), 0);
    for (auto idx : part.client_indices[i]) ++per_class[ds.labels[idx]];
    std::cout << "client " << i + 1 << ": " << part.client_indices[i].size() << " samples, per class [";
    for (std::size_t c2 = 0; c2 < per_class.size(); ++c2)
      std::cout << (c2 ? " " : "") << per_class[c2];
    std::cout << "]\n";
  }
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw facmic::DataError("cannot write '" + a.out + "'");
    f << j.dump() << '\n';
  }
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> lambda;
  std::optional<std::size_t> rounds;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  auto c = facmic::load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (a.out) c.out = *a.out;
  if (a.lambda) c.lambda = *a.lambda;
  if (a.rounds) c.rounds = *a.rounds;
  c.validate();
  std::ostream null_stream(nullptr);
  const auto outcome = facmic::run_train(c, a.quiet ? null_stream : std::cout);
  std::cout << "wrote " << outcome.metrics_csv.string() << " and "
            << outcome.adapter_file.string() << '\n';
  if (!outcome.result.records.empty()) {
    const auto& last = outcome.result.records.back();
    std::cout << "final acc=" << facmic::format_double(last.acc)
              << " bacc=" << facmic::format_double(last.bacc) << '\n';
  }
  return kOk;
}

struct EvalArgs {
  std::string params;
  std::string dataset;
  std::optional<double> tau;
};

int cmd_eval(const EvalArgs& a) {
  const auto adapter = facmic::load_adapter(a.params);
  const auto ds = facmic::load_dataset(a.dataset);
  if (adapter.params.d() != ds.d())
    throw facmic::DataError("dimension mismatch: adapter expects D=" +
                            std::to_string(adapter.params.d()) + ", dataset has D=" +
                            std::to_string(ds.d()));
  std::vector<std::size_t> all(ds.n());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto r = facmic::evaluate(adapter.params, ds, all, a.tau.value_or(adapter.tau),
                                  adapter.attention);
  std::cout << "acc=" << facmic::format_double(r.acc) << " bacc=" << facmic::format_double(r.bacc)
            << " n=" << ds.n() << '\n';
  return kOk;
}

struct LedgerArgs {
  std::size_t d = 512;
  std::size_t hidden = 0;
  std::size_t clients = 3;
  std::size_t rounds = 100;
  double full_model_params = 150e6;
};

int cmd_ledger(const LedgerArgs& a) {
  const std::size_t h = a.hidden == 0 ? a.d : a.hidden;
  const std::uint64_t per_upload = facmic::flat_count(a.d, h);
  const std::uint64_t per_upload_bytes = per_upload * facmic::CommLedger::kBytesPerValue;
  const std::uint64_t total = per_upload * 2 * a.clients * a.rounds;
  std::cout << "adapter D=" << a.d << " H=" << h << ": " << facmic::trainable_count(a.d, h)
            << " trainable + " << facmic::statistics_count(h) << " statistics = " << per_upload
            << " values per upload (" << per_upload_bytes << " bytes)\n";
  std::cout << "per client per round: up " << per_upload_bytes << " bytes, down "
            << per_upload_bytes << " bytes\n";
  std::cout << a.clients << " clients x " << a.rounds << " rounds: " << total << " values ("
            << total * facmic::CommLedger::kBytesPerValue << " bytes)\n";
  std::cout << "ratio to a " << facmic::format_double(a.full_model_params)
            << "-parameter model exchange: "
            << facmic::format_double(static_cast<double>(per_upload) / a.full_model_params)
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated feature-attention adapter simulator"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic feature dataset (and optional pool)");
  s->add_option("--d", synth.spec.d, "Feature dimension")->check(CLI::PositiveNumber);
  s->add_option("--k", synth.spec.k, "Number of classes");
  s->add_option("--n-per-class", synth.spec.n_per_class, "Samples per class and group");
  s->add_option("--shift", synth.spec.shift, "Norm of each group's mean offset");
  s->add_option("--noise", synth.spec.noise, "Expected norm of the per-sample noise");
  s->add_option("--groups", synth.spec.groups, "Groups with independent offsets");
  s->add_option("--seed", synth.spec.seed, "RNG seed");
  s->add_option("--out", synth.out, "Output dataset file")->required();
  s->add_flag("--unlabeled", synth.unlabeled, "Flag the output as an unlabeled pool");
  s->add_option("--pool-out", synth.pool_out, "Also write an unshifted unlabeled pool here");
  s->add_option("--pool-n-per-class", synth.pool_n_per_class, "Pool samples per class");
  s->add_option("--pool-seed", synth.pool_seed, "Pool RNG seed");

  PartitionArgs part;
  auto* p = app.add_subcommand("partition", "Partition a dataset across clients");
  p->add_option("--dataset", part.dataset, "Dataset file")->required();
  p->add_option("--clients", part.clients, "Number of clients");
  p->add_option("--policy", part.policy, "iid, dirichlet or blocks");
  p->add_option("--alpha", part.alpha, "Dirichlet concentration");
  p->add_option("--seed", part.seed, "RNG seed");
  p->add_option("--out", part.out, "Write the index sets as JSON");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run federated training from a config file");
  t->add_option("--config", train.config, "Config file")->required();
  t->add_option("--seed", train.seed, "Override the master seed");
  t->add_option("--out", train.out, "Override the output directory");
  t->add_option("--lambda", train.lambda, "Override the DA loss weight");
  t->add_option("--rounds", train.rounds, "Override the number of rounds");
  t->add_flag("--quiet", train.quiet, "Suppress per-round progress");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a trained adapter on a dataset file");
  e->add_option("--params", eval.params, "Adapter file written by train")->required();
  e->add_option("--dataset", eval.dataset, "Labeled dataset file")->required();
  e->add_option("--tau", eval.tau, "Softmax temperature (default: value stored with the adapter)");

  LedgerArgs ledger;
  auto* l = app.add_subcommand("ledger", "Report per-round communication cost of the adapter");
  l->add_option("--d", ledger.d, "Feature dimension");
  l->add_option("--hidden", ledger.hidden, "Hidden width (0: same as D)");
  l->add_option("--clients", ledger.clients, "Number of clients");
  l->add_option("--rounds", ledger.rounds, "Number of rounds");
  l->add_option("--full-model-params", ledger.full_model_params,
                "Parameter count of the full model for comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*p) return cmd_partition(part);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*l) return cmd_ledger(ledger);
  } catch (const facmic::UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const facmic::DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const facmic::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  }
  return kUsage;
}
