#pragma once

#include <cstddef>

// Dense row-major compute kernels behind the autodiff ops.
//
// `serial` is the reference implementation. `parallel` splits the outermost
// independent loop across OpenMP threads and accumulates every output element
// in the same order as `serial`, so the two agree bitwise for any thread count.
// All gemm/backward kernels accumulate into their output.
namespace gatecraft::kernels {

namespace serial {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);

// x:[batch,t_in,c_in]  w:[kernel,c_in,c_out]  y:[batch,t_out,c_out] (overwritten)
void conv1d_forward(const double* x, std::size_t batch, std::size_t t_in, std::size_t c_in,
                    const double* w, std::size_t kernel, std::size_t c_out, std::size_t stride,
                    double* y);
void conv1d_backward_input(const double* dy, std::size_t batch, std::size_t t_in,
                           std::size_t c_in, const double* w, std::size_t kernel,
                           std::size_t c_out, std::size_t stride, double* dx);
void conv1d_backward_weight(const double* x, std::size_t batch, std::size_t t_in,
                            std::size_t c_in, const double* dy, std::size_t kernel,
                            std::size_t c_out, std::size_t stride, double* dw);

// Row-wise softmax of x:[rows,cols] into y (overwritten).
void softmax_rows(const double* x, std::size_t rows, std::size_t cols, double* y);

}  // namespace serial

namespace parallel {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);

void conv1d_forward(const double* x, std::size_t batch, std::size_t t_in, std::size_t c_in,
                    const double* w, std::size_t kernel, std::size_t c_out, std::size_t stride,
                    double* y);
void conv1d_backward_input(const double* dy, std::size_t batch, std::size_t t_in,
                           std::size_t c_in, const double* w, std::size_t kernel,
                           std::size_t c_out, std::size_t stride, double* dx);
void conv1d_backward_weight(const double* x, std::size_t batch, std::size_t t_in,
                            std::size_t c_in, const double* dy, std::size_t kernel,
                            std::size_t c_out, std::size_t stride, double* dw);

void softmax_rows(const double* x, std::size_t rows, std::size_t cols, double* y);

}  // namespace parallel

/// Output length of an unpadded 1-D convolution; 0 when the input is shorter than the kernel.
constexpr std::size_t conv_output_length(std::size_t t_in, std::size_t kernel, std::size_t stride) {
    return t_in < kernel ? 0 : (t_in - kernel) / stride + 1;
}

/// Threads available to the parallel kernels (1 without OpenMP).
int max_threads();

}  // namespace gatecraft::kernels
