// Serial reference kernels against their OpenMP versions. Threads follow
// OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <cmath>

#include "qpat/acoustics.hpp"
#include "qpat/phantom.hpp"
#include "qpat/photon.hpp"
#include "qpat/recon.hpp"

using namespace qpat;

namespace {

const PhantomSpec& phantom() {
  static const PhantomSpec spec = sample_phantom(1, PropertyRanges{}, water_spectrum());
  return spec;
}

const OpticalMedium& medium() {
  static const OpticalMedium m = [] {
    const auto labels = rasterize(phantom(), VoxelGrid::centered_cube(64, 0.5));
    return OpticalMedium::from_properties(assign_properties(labels, phantom().materials, 800.0));
  }();
  return m;
}

// Analytic signal of one point source seen by a 128-element ring.
const ComplexTimeSeries& analytic_record() {
  static const ComplexTimeSeries ts = [] {
    DetectorArray det;
    det.n_elements = 128;
    TimeSeries raw;
    raw.n_elements = det.n_elements;
    raw.n_samples = 2048;
    raw.positions = det.element_positions();
    raw.data.assign(raw.n_elements * raw.n_samples, 0.0);
    for (std::size_t e = 0; e < raw.n_elements; ++e) {
      const double t = std::hypot(raw.positions[e][0] - 2.0, raw.positions[e][1] + 3.0) / 1.497;
      for (std::size_t s = 0; s < raw.n_samples; ++s) {
        const double u = (static_cast<double>(s) * raw.dt - t) / 0.1;
        raw.at(e, s) = -u * std::exp(-0.5 * u * u);
      }
    }
    return hilbert_analytic(raw);
  }();
  return ts;
}

TransportConfig transport(int threads) {
  TransportConfig c;
  c.n_photons = 20000;
  c.threads = threads;
  return c;
}

void BM_FluenceSerial(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(serial::simulate_fluence(medium(), IlluminationGeometry{}, transport(1)));
  st.SetItemsProcessed(st.iterations() * 20000);
}
void BM_FluenceParallel(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(simulate_fluence(medium(), IlluminationGeometry{}, transport(0)));
  st.SetItemsProcessed(st.iterations() * 20000);
}

void BM_DasSerial(benchmark::State& st) {
  ReconGeometry geo;
  geo.n_pixels = static_cast<std::size_t>(st.range(0));
  geo.crop_to = geo.n_pixels;
  for (auto _ : st) benchmark::DoNotOptimize(serial::das_reconstruct(analytic_record(), geo));
}
void BM_DasParallel(benchmark::State& st) {
  ReconGeometry geo;
  geo.n_pixels = static_cast<std::size_t>(st.range(0));
  geo.crop_to = geo.n_pixels;
  for (auto _ : st) benchmark::DoNotOptimize(das_reconstruct(analytic_record(), geo));
}

void BM_RasterizeSerial(benchmark::State& st) {
  const auto grid = VoxelGrid::centered_cube(static_cast<std::size_t>(st.range(0)), 32.0 / st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(serial::rasterize(phantom(), grid));
}
void BM_RasterizeParallel(benchmark::State& st) {
  const auto grid = VoxelGrid::centered_cube(static_cast<std::size_t>(st.range(0)), 32.0 / st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(rasterize(phantom(), grid));
}

} // namespace

BENCHMARK(BM_FluenceSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FluenceParallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DasSerial)->Arg(150)->Arg(300)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DasParallel)->Arg(150)->Arg(300)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RasterizeSerial)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RasterizeParallel)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
