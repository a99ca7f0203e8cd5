#pragma once

#include "cmrc/model.hpp"
#include "cmrc/ops.hpp"

namespace cmrc {

template <typename T>
struct SimilarityBlock {
    Tensor<T> img_img;   // F'_img . F'_img^T
    Tensor<T> gene_gene; // F_gene . F_gene^T
    Tensor<T> img_gene;  // F'_img . F_gene^T
    Tensor<T> gene_img;  // F_gene . F'_img^T
};

/// Raw dot-product similarity matrices of the projected embeddings. Training
/// similarities are unnormalized; only the retrieval stage uses cosine.
template <typename T>
SimilarityBlock<T> similarity_block(const Tensor<T>& f_img_proj, const Tensor<T>& f_gene);

/// Row-wise softmax of the tau-scaled average of the intra-modal
/// similarities. Constant with respect to the graph: no gradient flows
/// through the target.
template <typename T>
Tensor<T> contrastive_target(const Tensor<T>& sim_ii, const Tensor<T>& sim_gg, T tau);

/// Loss_c: soft cross entropy of the two cross-modal similarity matrices
/// against the shared target and its transpose.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& f_img_proj, const Tensor<T>& f_gene, T tau);

/// What the reconstruction output is compared against.
template <typename T>
Tensor<T> reconstruction_target(const ForwardOutputs<T>& outputs, ReconTarget which, bool detach);

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& f_r, const Tensor<T>& target, ReconLoss kind);

/// log(1 + loss_c) + log(1 + loss_r); both inputs must be nonnegative.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& loss_c, const Tensor<T>& loss_r);

template <typename T>
struct LossBreakdown {
    double loss_c = 0.0;
    double loss_r = 0.0;
    double loss_total = 0.0;
    Tensor<T> target_matrix; // B x B
};

template <typename T>
struct LossResult {
    Tensor<T> total; // scalar, differentiable
    LossBreakdown<T> breakdown;
};

/// Full training objective for one forward pass. with_recon=false gives the
/// contrastive-only mode, Loss_total = log(1 + Loss_c).
template <typename T>
LossResult<T> compute_losses(const ForwardOutputs<T>& outputs, T tau, const ModelConfig& cfg,
                             bool with_recon);

} // namespace cmrc
