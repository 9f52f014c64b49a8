#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "metroflow/tensor.hpp"

namespace metroflow {

// Cross-correlation with zero same-padding and stride 1. `input` is
// [C_in, H, W] or [B, C_in, H, W]; `kernels` is [C_out, C_in, K, K] with K
// odd (3x3 in the model, 1x1 for shortcut projections); `bias` is [C_out].
// Output spatial extents equal the input's.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);

// Running statistics of a batch-normalization layer, updated in train mode
// and consumed in eval mode.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.99;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
  std::size_t channels() const { return running_mean.size(); }
};

// Per-channel standardization. Accepts [B, C, H, W], [C, H, W], [B, C] or
// [C]; the channel axis is axis 1 when a batch axis is present, axis 0
// otherwise. Train mode normalizes with batch statistics over batch and
// spatial dims and updates `state`; eval mode uses the running statistics.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  bool training, BatchNormState& state);

// Affine map along the last axis: input [..., n_in] -> [..., n_out].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);
// Same without the bias term.
Tensor linear(const Tensor& input, const Tensor& weight);

// Gate parameters of one LSTM layer. Gates are packed along the last axis
// in the order input, forget, candidate, output.
struct LstmParams {
  Tensor w_input;   // [d_in, 4*d_h]
  Tensor w_hidden;  // [d_h, 4*d_h]
  Tensor bias;      // [4*d_h]
  std::size_t hidden_size() const { return bias.size() / 4; }
};

// Standard LSTM recurrence for one step. `x` is [d_in] or [B, d_in];
// `h_prev`/`c_prev` are [d_h] or [B, d_h]. Returns (h, c).
std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h_prev,
                                    const Tensor& c_prev,
                                    const LstmParams& params);

// Runs lstm_cell over a [B, T, d_in] sequence from zero initial state and
// stacks the hidden states into [B, T, d_h].
Tensor lstm_sequence(const Tensor& sequence, const LstmParams& params);

// Deterministic helpers on top of mt19937_64; the standard distributions are
// implementation-defined, these are not.
double uniform_real(std::mt19937_64& rng, double lo, double hi);
double normal_real(std::mt19937_64& rng);

Tensor uniform_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng,
                      bool requires_grad = true);
// Uniform in ±sqrt(1/fan_in), the init used for conv and dense weights.
Tensor fanin_uniform_tensor(Shape shape, std::size_t fan_in,
                            std::mt19937_64& rng);

}  // namespace metroflow
