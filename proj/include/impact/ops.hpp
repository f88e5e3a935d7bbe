#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "impact/tensor.hpp"

namespace impact::ops {

// All kernels are pure and deterministic: reductions accumulate in double,
// left to right, and matmul accumulates float32 in a fixed loop order.

// Batched matrix product. a is (..., M, K); b is (K, N) or (..., K, N) with
// identical leading dims. Result (..., M, N).
Tensor matmul(const Tensor& a, const Tensor& b);

// x is (..., K), w is (N, K) row-major (one row per output unit), b is (N)
// or empty. Returns (..., N). This is the layout all model layers use.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// NumPy-style right-aligned broadcasting for elementwise binary ops.
std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Sums `t` down to `shape` (which must be broadcast-compatible with it).
// Used by broadcast backward passes; double accumulation.
Tensor reduce_to_shape(const Tensor& t, const std::vector<int64_t>& shape);

Tensor scale(const Tensor& a, float s);        // s * a
Tensor add_scalar(const Tensor& a, float c);   // a + c

Tensor gelu(const Tensor& x);                  // exact erf form
Tensor gelu_grad(const Tensor& x);             // dGELU/dx elementwise

Tensor softmax_last(const Tensor& x);          // over the last dim, max-subtracted
Tensor layernorm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                      Tensor* saved_mean = nullptr, Tensor* saved_inv_std = nullptr);

Tensor reduce_sum(const Tensor& x, int64_t axis);
Tensor reduce_mean(const Tensor& x, int64_t axis);
Tensor reduce_max(const Tensor& x, int64_t axis, std::vector<int64_t>* argmax = nullptr);
Tensor reduce_sum_all(const Tensor& x);   // -> shape {1}
Tensor reduce_mean_all(const Tensor& x);  // -> shape {1}
Tensor reduce_max_all(const Tensor& x, int64_t* argmax = nullptr);

Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len);
Tensor concat(const std::vector<const Tensor*>& parts, int64_t axis);
Tensor l2norm_last(const Tensor& x);  // (..., K) -> (..., 1)

// Heaviside step 1(x > 0) as float.
Tensor heaviside(const Tensor& x);

// Surrogate gradient of the binarizer: tau * sigmoid(tau*m) * (1 - sigmoid(tau*m)),
// evaluated in double precision.
double ste_surrogate_gradient(double m, double tau);

// Raw accumulating GEMM, C(M,N) += A(M,K) * B(K,N), row-major contiguous.
// Exposed for backward kernels that stage their own operand transposes.
void gemm_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n);

// Named-primitive dispatch used by the bindings and spec-level tests.
// attrs carry integer parameters (transpose perm, slice axis/start/len,
// concat axis, reduce axis).
Tensor primitive_forward(std::string_view name, std::span<const Tensor> inputs,
                         std::span<const int64_t> attrs = {});

}  // namespace impact::ops
