#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "caps/capsnet.hpp"

namespace caps {

struct RoutingBenchOptions {
  std::vector<std::size_t> routing_iters{1, 2, 3};
  std::size_t repetitions = 5;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
};

struct RoutingBenchRow {
  std::size_t routing_iters = 0;
  std::size_t n_primary = 0;
  std::size_t n_class = 0;
  std::size_t repetitions = 0;
  double forward_ms = 0.0;  // median wall-clock of a whole inference pass
  double routing_ms = 0.0;  // median time spent inside routing
  double routing_ms_per_iter = 0.0;
};

/// Times inference passes of one randomly initialized network at every
/// requested iteration count. Repetitions are interleaved across iteration
/// counts so slow drift affects each row alike; medians are reported.
std::vector<RoutingBenchRow> routing_benchmark(const CapsNetConfig& config, const RoutingBenchOptions& options = {});

/// Header "routing_iters,n_primary,n_class,repetitions,forward_ms,routing_ms,routing_ms_per_iter".
void write_routing_report(std::ostream& out, const std::vector<RoutingBenchRow>& rows);

}  // namespace caps
