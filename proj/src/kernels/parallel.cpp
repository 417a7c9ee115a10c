#include "gatecraft/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gatecraft::kernels {

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace parallel {
namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kMinParallelWork = 1 << 15;

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kMinParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        double* c_row = c + i * ldc;
        const double* a_row = a + i * lda;
        for (std::size_t p = 0; p < k; ++p) {
            const double a_ip = a_row[p];
            const double* b_row = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += a_ip * b_row[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kMinParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        const double* a_row = a + i * lda;
        for (std::size_t j = 0; j < n; ++j) {
            const double* b_row = b + j * ldb;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
            c[i * ldc + j] += acc;
        }
    }
}

// Rows of C are independent; each still sums over p in ascending order.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kMinParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        double* c_row = c + i * ldc;
        for (std::size_t p = 0; p < k; ++p) {
            const double a_pi = a[p * lda + i];
            const double* b_row = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += a_pi * b_row[j];
        }
    }
}

void conv1d_forward(const double* x, std::size_t batch, std::size_t t_in, std::size_t c_in,
                    const double* w, std::size_t kernel, std::size_t c_out, std::size_t stride,
                    double* y) {
    const std::size_t t_out = conv_output_length(t_in, kernel, stride);
    const std::size_t window = kernel * c_in;
    const auto frames = static_cast<std::int64_t>(batch * t_out);
#pragma omp parallel for schedule(static) if (batch * t_out * window * c_out >= kMinParallelWork)
    for (std::int64_t bt = 0; bt < frames; ++bt) {
        const std::size_t bi = bt / t_out;
        const std::size_t t = bt % t_out;
        const double* field = x + bi * t_in * c_in + t * stride * c_in;
        double* out = y + bt * c_out;
        std::fill(out, out + c_out, 0.0);
        for (std::size_t p = 0; p < window; ++p) {
            const double xv = field[p];
            const double* w_row = w + p * c_out;
            for (std::size_t o = 0; o < c_out; ++o) out[o] += xv * w_row[o];
        }
    }
}

// Receptive fields overlap when kernel > stride, so only batch elements are
// split across threads.
void conv1d_backward_input(const double* dy, std::size_t batch, std::size_t t_in,
                           std::size_t c_in, const double* w, std::size_t kernel,
                           std::size_t c_out, std::size_t stride, double* dx) {
    const std::size_t t_out = conv_output_length(t_in, kernel, stride);
    const std::size_t window = kernel * c_in;
    const auto items = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static) if (batch * t_out * window * c_out >= kMinParallelWork)
    for (std::int64_t bi = 0; bi < items; ++bi) {
        for (std::size_t t = 0; t < t_out; ++t) {
            const double* g = dy + (bi * t_out + t) * c_out;
            double* field = dx + bi * t_in * c_in + t * stride * c_in;
            for (std::size_t p = 0; p < window; ++p) {
                const double* w_row = w + p * c_out;
                double acc = 0.0;
                for (std::size_t o = 0; o < c_out; ++o) acc += g[o] * w_row[o];
                field[p] += acc;
            }
        }
    }
}

void conv1d_backward_weight(const double* x, std::size_t batch, std::size_t t_in,
                            std::size_t c_in, const double* dy, std::size_t kernel,
                            std::size_t c_out, std::size_t stride, double* dw) {
    const std::size_t t_out = conv_output_length(t_in, kernel, stride);
    const std::size_t window = kernel * c_in;
    const auto taps = static_cast<std::int64_t>(window);
#pragma omp parallel for schedule(static) if (batch * t_out * window * c_out >= kMinParallelWork)
    for (std::int64_t p = 0; p < taps; ++p) {
        double* dw_row = dw + p * c_out;
        for (std::size_t bt = 0; bt < batch * t_out; ++bt) {
            const std::size_t bi = bt / t_out;
            const std::size_t t = bt % t_out;
            const double xv = x[bi * t_in * c_in + t * stride * c_in + p];
            const double* g = dy + bt * c_out;
            for (std::size_t o = 0; o < c_out; ++o) dw_row[o] += xv * g[o];
        }
    }
}

void softmax_rows(const double* x, std::size_t rows, std::size_t cols, double* y) {
    const auto count = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kMinParallelWork)
    for (std::int64_t r = 0; r < count; ++r) {
        const double* in = x + r * cols;
        double* out = y + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            out[j] = std::exp(in[j] - mx);
            total += out[j];
        }
        for (std::size_t j = 0; j < cols; ++j) out[j] /= total;
    }
}

}  // namespace parallel
}  // namespace gatecraft::kernels
