#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "gatecraft/kernels.hpp"

namespace gk = gatecraft::kernels;

namespace {

std::vector<double> random_vec(std::size_t n) {
    std::mt19937_64 rng(n);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_vec(n * n);
    const auto b = random_vec(n * n);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Gemm(n, n, n, a.data(), n, b.data(), n, c.data(), n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <auto Conv>
void BM_conv(benchmark::State& state) {
    const std::size_t batch = 8, t_in = static_cast<std::size_t>(state.range(0)), c = 64, kernel = 3, stride = 2;
    const auto x = random_vec(batch * t_in * c);
    const auto w = random_vec(kernel * c * c);
    std::vector<double> y(batch * gk::conv_output_length(t_in, kernel, stride) * c);
    for (auto _ : state) {
        Conv(x.data(), batch, t_in, c, w.data(), kernel, c, stride, y.data());
        benchmark::DoNotOptimize(y.data());
    }
}

template <auto Softmax>
void BM_softmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = random_vec(n * n);
    std::vector<double> y(n * n);
    for (auto _ : state) {
        Softmax(x.data(), n, n, y.data());
        benchmark::DoNotOptimize(y.data());
    }
}

}  // namespace

BENCHMARK(BM_gemm<gk::serial::gemm_nn>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm<gk::parallel::gemm_nn>)->Name("gemm_nn/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm<gk::serial::gemm_nt>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm<gk::parallel::gemm_nt>)->Name("gemm_nt/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm<gk::serial::gemm_tn>)->Name("gemm_tn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm<gk::parallel::gemm_tn>)->Name("gemm_tn/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_conv<gk::serial::conv1d_forward>)->Name("conv1d_forward/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_conv<gk::parallel::conv1d_forward>)->Name("conv1d_forward/parallel")->Arg(256)->Arg(1024);
BENCHMARK(BM_softmax<gk::serial::softmax_rows>)->Name("softmax_rows/serial")->Arg(128)->Arg(512);
BENCHMARK(BM_softmax<gk::parallel::softmax_rows>)->Name("softmax_rows/parallel")->Arg(128)->Arg(512);

BENCHMARK_MAIN();
