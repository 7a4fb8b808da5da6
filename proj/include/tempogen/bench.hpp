#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace tempogen::favor {

enum class BenchKernel { favor, exact };
enum class BenchPrecision { fp64, fp32 };

struct BenchSettings {
  std::vector<std::size_t> n_values{1024, 2048, 4096};
  std::size_t m = 256;
  std::size_t d = 16;
  std::size_t repeats = 5;
  std::vector<BenchKernel> kernels{BenchKernel::favor, BenchKernel::exact};
  BenchPrecision precision = BenchPrecision::fp64;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t n = 0;
  std::string method;
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
};

const char* kernel_name(BenchKernel kernel);

// Times one attention head per (n, kernel) after a warm-up run. The FAVOR+
// timing includes computing the query and key features.
std::vector<BenchRow> bench_scaling(const BenchSettings& settings);

// Columns: n, method, median_ms, p10_ms, p90_ms.
void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);

}  // namespace tempogen::favor
