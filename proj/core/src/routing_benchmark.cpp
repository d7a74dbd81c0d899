#include "caps/routing_benchmark.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

namespace caps {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<RoutingBenchRow> routing_benchmark(const CapsNetConfig& config, const RoutingBenchOptions& options) {
  if (options.repetitions == 0) throw ContractError("routing_benchmark: repetitions must be at least 1");
  if (options.routing_iters.empty()) throw ContractError("routing_benchmark: no iteration counts given");
  for (std::size_t r : options.routing_iters) {
    if (r == 0) throw ContractError("routing_benchmark: iteration counts must be at least 1");
  }
  config.validate();

  NoGradGuard no_grad;
  Rng rng(options.seed);
  const CapsNet net(config, rng);
  const Tensor images = Tensor::uniform(
      {options.batch_size, config.input_channels, config.input_side, config.input_side}, 0.0f, 1.0f, rng);

  const std::size_t k = options.routing_iters.size();
  std::vector<std::vector<double>> forward(k), routing(k);

  ForwardOptions warm;
  warm.reconstruct = true;
  net.forward(images, std::nullopt, warm);

  for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
    for (std::size_t i = 0; i < k; ++i) {
      ForwardTimings t;
      ForwardOptions fo;
      fo.routing_iterations = options.routing_iters[i];
      fo.timings = &t;
      net.forward(images, std::nullopt, fo);
      forward[i].push_back(t.total_ms);
      routing[i].push_back(t.routing_ms);
    }
  }

  std::vector<RoutingBenchRow> rows;
  for (std::size_t i = 0; i < k; ++i) {
    RoutingBenchRow row;
    row.routing_iters = options.routing_iters[i];
    row.n_primary = config.n_primary();
    row.n_class = config.n_class;
    row.repetitions = options.repetitions;
    row.forward_ms = median(forward[i]);
    row.routing_ms = median(routing[i]);
    row.routing_ms_per_iter = row.routing_ms / static_cast<double>(row.routing_iters);
    rows.push_back(row);
  }
  return rows;
}

void write_routing_report(std::ostream& out, const std::vector<RoutingBenchRow>& rows) {
  out << "routing_iters,n_primary,n_class,repetitions,forward_ms,routing_ms,routing_ms_per_iter\n";
  char buf[192];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%.6f,%.6f,%.6f\n", r.routing_iters, r.n_primary, r.n_class,
                  r.repetitions, r.forward_ms, r.routing_ms, r.routing_ms_per_iter);
    out << buf;
  }
}

}  // namespace caps
