#include "tempogen/bench.hpp"

#include "tempogen/favor.hpp"
#include "tempogen/favor_kernels.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <random>
#include <stdexcept>

namespace tempogen::favor {

namespace {

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

template <class T>
std::vector<double> time_kernel(BenchKernel kernel, std::size_t n, const BenchSettings& s) {
  std::mt19937_64 rng(s.seed + n);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> q(n * s.d), k(n * s.d), v(n * s.d), out(n * s.d);
  for (auto* buf : {&q, &k, &v})
    for (auto& x : *buf) x = static_cast<T>(0.5 * normal(rng));
  const auto map = RandomFeatureMap::draw(s.m, s.d, s.seed, true);
  const std::vector<T> omega(map.omega.begin(), map.omega.end());
  const T scale = static_cast<T>(std::pow(static_cast<double>(s.d), -0.25));
  auto run = [&] {
    if (kernel == BenchKernel::favor) {
      kernels::causal_favor_head<T>(q.data(), k.data(), v.data(), n, s.d, s.d, omega.data(), s.m, scale, T(1e-6),
                                    out.data());
    } else {
      kernels::exact_causal_head(q.data(), k.data(), v.data(), n, s.d, s.d, out.data());
    }
  };
  run();
  std::vector<double> times;
  times.reserve(s.repeats);
  for (std::size_t r = 0; r < s.repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  volatile T sink = out[n * s.d - 1];
  (void)sink;
  return times;
}

}  // namespace

const char* kernel_name(BenchKernel kernel) { return kernel == BenchKernel::favor ? "favor" : "exact"; }

std::vector<BenchRow> bench_scaling(const BenchSettings& s) {
  if (s.repeats < 1) throw std::invalid_argument("bench_scaling: repeats must be >= 1");
  std::vector<BenchRow> rows;
  for (std::size_t n : s.n_values) {
    if (n < 1) throw std::invalid_argument("bench_scaling: n must be >= 1");
    for (BenchKernel kernel : s.kernels) {
      const auto times = s.precision == BenchPrecision::fp64 ? time_kernel<double>(kernel, n, s)
                                                             : time_kernel<float>(kernel, n, s);
      rows.push_back({n, kernel_name(kernel), percentile(times, 0.5), percentile(times, 0.1),
                      percentile(times, 0.9)});
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "n,method,median_ms,p10_ms,p90_ms\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& r : rows) os << r.n << ',' << r.method << ',' << r.median_ms << ',' << r.p10_ms << ',' << r.p90_ms << '\n';
}

}  // namespace tempogen::favor
