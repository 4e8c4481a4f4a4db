#pragma once

#include "hitrans/autodiff.hpp"

#include <utility>

// Differentiable building blocks. Feature maps are NCHW, token sequences (N, L, D).
// Weight layouts follow the common deep-learning convention:
//   conv2d            (Cout, Cin, k, k)
//   conv_transpose2x2 (Cin, Cout, 2, 2)
//   linear            (Dout, Din)
namespace hitrans::ops {

/// Batch statistics of a training-mode batch norm, applied to running buffers by the trainer.
template <typename Scalar>
struct BatchStats {
    std::size_t running_mean_id = 0;
    std::size_t running_var_id = 0;
    Vector<Scalar> mean;
    Vector<Scalar> var;  // unbiased
};

template <typename Scalar>
Var<Scalar> conv2d(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> weight, ParamRef<Scalar> bias,
                   int stride, int pad);

template <typename Scalar>
Var<Scalar> conv_transpose2x2(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> weight,
                              ParamRef<Scalar> bias);

/// Training mode normalizes with batch statistics and reports them through `stats`;
/// evaluation mode uses the running buffers.
template <typename Scalar>
Var<Scalar> batch_norm(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> gamma, ParamRef<Scalar> beta,
                       const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var, bool training,
                       BatchStats<Scalar>* stats, Scalar eps = Scalar(1e-5));

template <typename Scalar>
Var<Scalar> relu(Tape<Scalar>& tape, const Var<Scalar>& x);

/// 3x3 window, stride 2, padding 1.
template <typename Scalar>
Var<Scalar> max_pool3x3s2(Tape<Scalar>& tape, const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> add(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> concat_channels(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b);

/// Bilinear x2 upsampling with corner pixels aligned (H -> 2H).
template <typename Scalar>
Var<Scalar> upsample_bilinear2x_aligned(Tape<Scalar>& tape, const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> weight, ParamRef<Scalar> bias);

template <typename Scalar>
Var<Scalar> layer_norm(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> gamma, ParamRef<Scalar> beta,
                       Scalar eps = Scalar(1e-6));

/// Exact (erf) GELU.
template <typename Scalar>
Var<Scalar> gelu(Tape<Scalar>& tape, const Var<Scalar>& x);

/// Scaled dot-product self-attention over packed (N, L, 3D) projections; returns (N, L, D).
template <typename Scalar>
Var<Scalar> self_attention(Tape<Scalar>& tape, const Var<Scalar>& qkv, int heads);

/// (B, C, H, W) -> (B*G*G, P*P, C): sub-patches row-major over the grid, tokens row-major inside.
template <typename Scalar>
Var<Scalar> unfold_tokens(Tape<Scalar>& tape, const Var<Scalar>& map, int p);

/// Inverse of unfold_tokens.
template <typename Scalar>
Var<Scalar> fold_tokens(Tape<Scalar>& tape, const Var<Scalar>& tokens, Index batch, Index height, Index width,
                        int p);

/// (N, L, D) -> (N, L+1, D) with the learned vector in slot 0.
template <typename Scalar>
Var<Scalar> prepend_token(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> token);

/// x + pos, pos of shape (L, D) broadcast over N.
template <typename Scalar>
Var<Scalar> add_positional(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> pos);

/// Splits (N, L, D) into slot 0 as (N, D) and slots 1.. as (N, L-1, D).
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> split_first_token(Tape<Scalar>& tape, const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> reshape(Tape<Scalar>& tape, const Var<Scalar>& x, std::vector<Index> shape);

/// (B, G*G, D) -> (B, D, G, G), cells row-major.
template <typename Scalar>
Var<Scalar> cells_to_map(Tape<Scalar>& tape, const Var<Scalar>& cells, int grid_side);

/// Adds cell (i, j) of (B, G*G, D) to every position of block (i, j) of size P x P of a (B, D, G*P, G*P) map.
template <typename Scalar>
Var<Scalar> broadcast_add_cells(Tape<Scalar>& tape, const Var<Scalar>& map, const Var<Scalar>& cells, int p);

/// Mean binary cross-entropy on logits; returns a one-element tensor.
template <typename Scalar>
Var<Scalar> bce_with_logits(Tape<Scalar>& tape, const Var<Scalar>& logits, const Tensor<Scalar>& target);

/// Forward-only bilinear x2 with corner alignment on a plain tensor.
template <typename Scalar>
Tensor<Scalar> upsample_bilinear2x_aligned(const Tensor<Scalar>& x);

}  // namespace hitrans::ops
