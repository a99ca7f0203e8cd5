#include "cmrc/objectives.hpp"

namespace cmrc {

template <typename T>
SimilarityBlock<T> similarity_block(const Tensor<T>& f_img_proj, const Tensor<T>& f_gene) {
    if (f_img_proj.rank() != 2 || f_gene.rank() != 2)
        throw ShapeError("similarity_block: expects rank-2 embeddings");
    if (f_img_proj.shape() != f_gene.shape())
        throw ShapeError("similarity_block: embedding shapes differ: " +
                         shape_to_string(f_img_proj.shape()) + " vs " +
                         shape_to_string(f_gene.shape()));
    SimilarityBlock<T> s;
    s.img_img = matmul(f_img_proj, transpose(f_img_proj));
    s.gene_gene = matmul(f_gene, transpose(f_gene));
    s.img_gene = matmul(f_img_proj, transpose(f_gene));
    s.gene_img = matmul(f_gene, transpose(f_img_proj));
    return s;
}

template <typename T>
Tensor<T> contrastive_target(const Tensor<T>& sim_ii, const Tensor<T>& sim_gg, T tau) {
    if (sim_ii.rank() != 2 || sim_ii.extent(0) != sim_ii.extent(1))
        throw ShapeError("contrastive_target: sim_ii must be square");
    if (sim_ii.shape() != sim_gg.shape())
        throw ShapeError("contrastive_target: similarity shapes differ");
    if (!(tau > T(0))) throw ContractError("contrastive_target: tau must be positive");
    // the target plays the role of a label: computed on detached values
    Tensor<T> avg = scale(add(sim_ii.detached(), sim_gg.detached()), T(0.5) * tau);
    return softmax_rows(avg);
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& f_img_proj, const Tensor<T>& f_gene, T tau) {
    SimilarityBlock<T> s = similarity_block(f_img_proj, f_gene);
    Tensor<T> target = contrastive_target(s.img_img, s.gene_gene, tau);
    Tensor<T> target_t = transpose(target);
    return add(soft_cross_entropy(s.img_gene, target),
               soft_cross_entropy(s.gene_img, target_t));
}

template <typename T>
Tensor<T> reconstruction_target(const ForwardOutputs<T>& outputs, ReconTarget which,
                                bool detach) {
    const Tensor<T>& t = which == ReconTarget::Image ? outputs.f_img_proj : outputs.f_gene;
    return detach ? t.detached() : t;
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& f_r, const Tensor<T>& target, ReconLoss kind) {
    if (f_r.shape() != target.shape())
        throw ShapeError("reconstruction_loss: shapes differ: " + shape_to_string(f_r.shape()) +
                         " vs " + shape_to_string(target.shape()));
    if (kind == ReconLoss::Mse) return mse(f_r, target);
    return cosine_distance_mean(f_r, target);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& loss_c, const Tensor<T>& loss_r) {
    if (loss_c.item() < T(0) || loss_r.item() < T(0))
        throw ContractError("total_loss: loss terms must be nonnegative");
    return add(log1p_elem(loss_c), log1p_elem(loss_r));
}

template <typename T>
LossResult<T> compute_losses(const ForwardOutputs<T>& outputs, T tau, const ModelConfig& cfg,
                             bool with_recon) {
    SimilarityBlock<T> s = similarity_block(outputs.f_img_proj, outputs.f_gene);
    Tensor<T> target = contrastive_target(s.img_img, s.gene_gene, tau);
    Tensor<T> lc = add(soft_cross_entropy(s.img_gene, target),
                       soft_cross_entropy(s.gene_img, transpose(target)));

    LossResult<T> out;
    out.breakdown.target_matrix = target;
    out.breakdown.loss_c = static_cast<double>(lc.item());
    if (with_recon) {
        Tensor<T> tgt = reconstruction_target(outputs, cfg.recon_target, cfg.detach_recon_target);
        Tensor<T> lr = reconstruction_loss(outputs.f_r, tgt, cfg.recon_loss);
        out.breakdown.loss_r = static_cast<double>(lr.item());
        out.total = total_loss(lc, lr);
    } else {
        out.breakdown.loss_r = 0.0;
        out.total = log1p_elem(lc);
    }
    out.breakdown.loss_total = static_cast<double>(out.total.item());
    return out;
}

#define CMRC_INSTANTIATE_OBJECTIVES(T)                                                            \
    template SimilarityBlock<T> similarity_block<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> contrastive_target<T>(const Tensor<T>&, const Tensor<T>&, T);              \
    template Tensor<T> contrastive_loss<T>(const Tensor<T>&, const Tensor<T>&, T);                \
    template Tensor<T> reconstruction_target<T>(const ForwardOutputs<T>&, ReconTarget, bool);     \
    template Tensor<T> reconstruction_loss<T>(const Tensor<T>&, const Tensor<T>&, ReconLoss);     \
    template Tensor<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&);                         \
    template LossResult<T> compute_losses<T>(const ForwardOutputs<T>&, T, const ModelConfig&,     \
                                             bool);

CMRC_INSTANTIATE_OBJECTIVES(float)
CMRC_INSTANTIATE_OBJECTIVES(double)

#undef CMRC_INSTANTIATE_OBJECTIVES

} // namespace cmrc
