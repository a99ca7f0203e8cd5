#pragma once

#include "cmrc/rng.hpp"
#include "cmrc/tensor.hpp"

namespace cmrc {

/// SELU constants of the self-normalizing formulation.
inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;
/// Saturation value selu(x) approaches as x -> -inf; alpha dropout fills
/// dropped entries with it.
inline constexpr double kSeluSaturation = -kSeluLambda * kSeluAlpha;

inline constexpr double kLayerNormEps = 1e-5;

// Every op below participates in reverse-mode differentiation: when a tape is
// active and any input requires grad, the op records its backward rule.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b); // b may broadcast over leading axes

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b); // same shapes

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b); // elementwise, same shapes

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b); // rank-2 x rank-2

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b); // equal leading dims

template <typename T>
Tensor<T> transpose(const Tensor<T>& x); // rank-2

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis);

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

/// Numerically stable softmax over the last axis (max subtraction).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x); // exact erf form

template <typename T>
Tensor<T> selu(const Tensor<T>& x);

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& x);

template <typename T>
Tensor<T> log1p_elem(const Tensor<T>& x);

/// Layer normalization over the last axis with learned scale/shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                     T eps = T(kLayerNormEps));

/// Inverted dropout; identity in eval mode. rate == 1 is rejected as a
/// configuration error.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, Rng& rng);

/// Alpha dropout: dropped entries are set to the SELU saturation value and
/// the affine correction keeping zero mean / unit variance is applied.
template <typename T>
Tensor<T> alpha_dropout(const Tensor<T>& x, double rate, bool train, Rng& rng);

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b); // mean over all elements

/// Mean over rows of (1 - cosine similarity); rows pair up one-to-one.
template <typename T>
Tensor<T> cosine_distance_mean(const Tensor<T>& a, const Tensor<T>& b);

/// Mean over rows of -sum_j target[i,j] * log softmax(logits[i,:])[j].
/// The target is treated as a constant (no gradient flows into it).
template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target);

/// All pairwise cosine similarities between rows of a (BxP) and b (MxP).
/// Inference-only: not differentiable, rejects being recorded on a tape.
template <typename T>
Tensor<T> cosine_sim_matrix(const Tensor<T>& a, const Tensor<T>& b);

/// Prepend a learned token to every batch row: (B,T,D) + (D) -> (B,T+1,D).
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token);

} // namespace cmrc
