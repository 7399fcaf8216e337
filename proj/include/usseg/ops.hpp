#pragma once

#include "usseg/autodiff.hpp"
#include "usseg/rng.hpp"

// Differentiable primitives. Network tensors are rank 5 with axis order
// (batch, channel, x, y, z); elementwise primitives accept any rank.
// Every primitive is deterministic: identical inputs and stream states
// produce bit-identical outputs, independent of the intra-op thread count.
// The scalar type is templated; training runs float graphs, numeric
// gradient oracles run the same graphs in double.

namespace usseg {

/// Intra-op parallelism switch for the calling thread. Kernels partition
/// work so that each output element has a single writer with a fixed
/// accumulation order, so results do not depend on this setting.
bool intra_op_parallel();
void set_intra_op_parallel(bool enabled);

// ---- elementwise ----
template <typename S> DiffT<S> add(const DiffT<S>& a, const DiffT<S>& b);
template <typename S> DiffT<S> sub(const DiffT<S>& a, const DiffT<S>& b);
/// Elementwise product. Also accepts a single-channel mask for `b`
/// ((n,1,x,y,z) against (n,c,x,y,z)), broadcast across channels.
template <typename S> DiffT<S> mul(const DiffT<S>& a, const DiffT<S>& b);
template <typename S> DiffT<S> add_scalar(const DiffT<S>& a, double v);
template <typename S> DiffT<S> mul_scalar(const DiffT<S>& a, double v);
template <typename S> DiffT<S> relu(const DiffT<S>& a);
template <typename S> DiffT<S> sigmoid(const DiffT<S>& a);
template <typename S> DiffT<S> exp(const DiffT<S>& a);
template <typename S> DiffT<S> log(const DiffT<S>& a);
template <typename S> DiffT<S> square(const DiffT<S>& a);
template <typename S> DiffT<S> clamp(const DiffT<S>& a, double lo, double hi);

// ---- shape / channel structure ----
template <typename S> DiffT<S> reshape(const DiffT<S>& a, const Shape& shape);
template <typename S> DiffT<S> concat_channels(const DiffT<S>& a, const DiffT<S>& b);
/// (n,c,1,1,1) -> (n,c,x,y,z), replicating each channel value over space.
template <typename S>
DiffT<S> broadcast_channels(const DiffT<S>& a, std::int64_t x, std::int64_t y, std::int64_t z);

// ---- reductions (64-bit accumulation) ----
template <typename S> DiffT<S> sum_all(const DiffT<S>& a);
template <typename S> DiffT<S> mean_all(const DiffT<S>& a);
/// (n,c,x,y,z) -> (n,c,1,1,1) spatial average.
template <typename S> DiffT<S> spatial_mean(const DiffT<S>& a);

// ---- structured ----
template <typename S> DiffT<S> softmax_channels(const DiffT<S>& a);

// ---- network layers ----
/// 3-D convolution, stride 1, zero-padded "same". Weight is
/// (c_out, c_in, kx, ky, kz) with odd kernel extents.
template <typename S> DiffT<S> conv3d(const DiffT<S>& x, const DiffT<S>& w, const DiffT<S>& bias);
template <typename S> DiffT<S> maxpool2(const DiffT<S>& x);
template <typename S> DiffT<S> upsample_nearest2(const DiffT<S>& x);
/// Inverted dropout: survivors are scaled by 1/(1-rate). rate must be in [0,1).
template <typename S> DiffT<S> dropout(const DiffT<S>& x, double rate, RngStream& rng);
/// Per-(sample, channel) normalization with affine gamma/beta of shape (1,c,1,1,1).
template <typename S>
DiffT<S> instance_norm(const DiffT<S>& x, const DiffT<S>& gamma, const DiffT<S>& beta,
                       double eps = 1e-5);

#define USSEG_EXTERN_OPS(S)                                                                       \
  extern template DiffT<S> add(const DiffT<S>&, const DiffT<S>&);                                 \
  extern template DiffT<S> sub(const DiffT<S>&, const DiffT<S>&);                                 \
  extern template DiffT<S> mul(const DiffT<S>&, const DiffT<S>&);                                 \
  extern template DiffT<S> add_scalar(const DiffT<S>&, double);                                   \
  extern template DiffT<S> mul_scalar(const DiffT<S>&, double);                                   \
  extern template DiffT<S> relu(const DiffT<S>&);                                                 \
  extern template DiffT<S> sigmoid(const DiffT<S>&);                                              \
  extern template DiffT<S> exp(const DiffT<S>&);                                                  \
  extern template DiffT<S> log(const DiffT<S>&);                                                  \
  extern template DiffT<S> square(const DiffT<S>&);                                               \
  extern template DiffT<S> clamp(const DiffT<S>&, double, double);                                \
  extern template DiffT<S> reshape(const DiffT<S>&, const Shape&);                                \
  extern template DiffT<S> concat_channels(const DiffT<S>&, const DiffT<S>&);                     \
  extern template DiffT<S> broadcast_channels(const DiffT<S>&, std::int64_t, std::int64_t,        \
                                              std::int64_t);                                      \
  extern template DiffT<S> sum_all(const DiffT<S>&);                                              \
  extern template DiffT<S> mean_all(const DiffT<S>&);                                             \
  extern template DiffT<S> spatial_mean(const DiffT<S>&);                                         \
  extern template DiffT<S> softmax_channels(const DiffT<S>&);                                     \
  extern template DiffT<S> conv3d(const DiffT<S>&, const DiffT<S>&, const DiffT<S>&);             \
  extern template DiffT<S> maxpool2(const DiffT<S>&);                                             \
  extern template DiffT<S> upsample_nearest2(const DiffT<S>&);                                    \
  extern template DiffT<S> dropout(const DiffT<S>&, double, RngStream&);                          \
  extern template DiffT<S> instance_norm(const DiffT<S>&, const DiffT<S>&, const DiffT<S>&, double);

USSEG_EXTERN_OPS(float)
USSEG_EXTERN_OPS(double)
#undef USSEG_EXTERN_OPS

}  // namespace usseg
