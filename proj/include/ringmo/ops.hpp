#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ringmo/autodiff.hpp"

// Differentiable tensor operations.
//
// Elementwise binary ops accept equal shapes or one operand whose shape is a
// suffix of the other's (broadcast over leading axes only). Anything else is
// a ShapeError.
namespace ringmo::ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
template <typename T>
Var<T> add_scalar(const Var<T>& a, T s);
template <typename T>
Var<T> abs(const Var<T>& a);

/// [..., m, k] x [..., k, n]. Leading axes must match, or one side is rank 2
/// and is shared across the other's batch.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// x[..., in] W[in, out] (+ b[out]).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b = std::nullopt);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<int>& perm);
template <typename T>
Var<T> transpose(const Var<T>& a, int axis0, int axis1);
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T>
std::vector<Var<T>> split(const Var<T>& a, int axis, const std::vector<std::int64_t>& sizes);

/// torch.roll semantics: out[(i + shift) mod n] = in[i] along each axis.
template <typename T>
Var<T> roll(const Var<T>& a, const std::vector<std::int64_t>& shifts, const std::vector<int>& axes);

/// Gathers slices along axis 0: out[r, ...] = a[index[r], ...].
template <typename T>
Var<T> index_select(const Var<T>& a, const std::vector<std::int64_t>& index);

/// Max-subtracted softmax.
template <typename T>
Var<T> softmax(const Var<T>& a, int axis);

/// Tanh approximation with the 0.044715 cubic coefficient.
template <typename T>
Var<T> gelu(const Var<T>& a);

/// Normalizes over the last axis with the biased variance.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Cross-correlation over [B, C, H, W] with zero padding; w is
/// [Cout, Cin/groups, kh, kw].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias, Conv2dParams p);

struct Pool2dParams {
  int kernel = 2;
  int stride = 2;
  int padding = 0;
};

/// Padded cells never win. Gradient goes to the first maximal cell in
/// row-major window order.
template <typename T>
Var<T> maxpool2d(const Var<T>& x, Pool2dParams p);

template <typename T>
Var<T> sum(const Var<T>& a);
/// Mean over one axis; the axis is removed from the result.
template <typename T>
Var<T> mean(const Var<T>& a, int axis);

/// Mean negative log-likelihood of logits [B, K] against class indices.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

// Output extent of a strided window; throws ConfigError if it is not integral.
std::int64_t window_output_extent(std::int64_t in, int kernel, int stride, int padding, const char* what);

}  // namespace ringmo::ops
