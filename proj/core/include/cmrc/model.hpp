#pragma once

#include "cmrc/ops.hpp"
#include "cmrc/rng.hpp"
#include "cmrc/tensor.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmrc {

enum class ReconLoss { Mse, Cosine };
enum class ReconTarget { Image, Gene };
enum class Mode { Train, Eval };

/// Alpha-dropout probability inside the expression mapper.
inline constexpr double kSnnDropout = 0.25;
/// Transformer MLP expansion factor.
inline constexpr std::size_t kMlpRatio = 4;

struct ModelConfig {
    std::size_t image_size = 64; // square patches, pixels
    std::size_t vit_patch = 16;
    std::size_t vit_dim = 64;
    std::size_t vit_depth = 4;
    std::size_t vit_heads = 4;
    std::size_t proj_dim = 64;   // shared contrastive embedding width
    std::size_t gene_dim = 64;   // d, number of genes
    std::size_t snn_hidden = 512;
    std::size_t recon_tokens = 8;
    std::size_t recon_dim = 64;
    double mask_rate = 0.5;
    ReconLoss recon_loss = ReconLoss::Mse;
    ReconTarget recon_target = ReconTarget::Image;
    std::size_t fusion_heads = 8;
    std::size_t init_xattn_heads = 4;
    double proj_dropout = 0.1;
    bool detach_recon_target = true;

    /// Tokens produced by the image encoder (grid + class token).
    std::size_t token_count() const {
        std::size_t g = image_size / vit_patch;
        return g * g + 1;
    }

    void validate() const; // throws ConfigError on any violated invariant

    /// Compact defaults preserving every shape relationship of the full-size
    /// profile at a fraction of the compute.
    static ModelConfig desk_profile(std::size_t gene_dim = 64);

    /// Full-size profile: 224px/32 patches, ViT-B dims, 256-wide projections.
    static ModelConfig paper_profile(std::size_t gene_dim);
};

/// All intermediate tensors of one forward pass.
template <typename T>
struct ForwardOutputs {
    Tensor<T> f_img;        // B x T x vit_dim
    Tensor<T> f_img_proj;   // B x proj_dim
    Tensor<T> f_gene;       // B x proj_dim
    Tensor<T> f_gene_tokens; // B x recon_tokens x recon_dim
    Tensor<T> f_img_masked; // B x T x recon_dim, masked entries zeroed
    Tensor<T> mask;         // 1 where masked, 0 where kept
    Tensor<T> f_att;        // initial cross-attention output + image residual
    Tensor<T> f_fuse;       // B x T x recon_dim
    Tensor<T> f_r;          // B x recon_dim, token mean of f_fuse
};

template <typename T>
struct MaskResult {
    Tensor<T> masked;
    Tensor<T> mask; // 1 = zeroed, 0 = untouched
};

/// The full network: ViT image encoder, the two projection heads, the
/// expression-to-token mapper and the masked cross-modal reconstruction
/// trunk. Parameters are owned here under stable dotted names.
template <typename T>
class Model {
public:
    Model(ModelConfig config, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }

    const std::vector<std::string>& param_names() const { return names_; }
    std::vector<Tensor<T>>& params() { return params_; }
    const std::vector<Tensor<T>>& params() const { return params_; }
    Tensor<T>& param(const std::string& name);
    std::size_t scalar_count() const;

    void zero_grad();

    /// (B,H,W,3) pixels in [0,1] -> (B,T,vit_dim) tokens.
    Tensor<T> encode_image(const Tensor<T>& patches) const;

    /// Token mean of f_img through the image projection head.
    Tensor<T> project_image(const Tensor<T>& f_img, Mode mode, Rng& rng) const;

    /// Processed expression rows through the gene projection head.
    Tensor<T> encode_genes(const Tensor<T>& expr, Mode mode, Rng& rng) const;

    /// Expression -> (B, recon_tokens, recon_dim) via FC + SELU + alpha dropout.
    Tensor<T> snn_map(const Tensor<T>& expr, Mode mode, Rng& rng) const;

    /// Zero out exactly round(rate * T * D) entries per batch element.
    static MaskResult<T> mask_features(const Tensor<T>& x, double rate, Rng& rng);

    /// Queries from image features, keys/values from gene tokens; heads
    /// concatenated and output-mapped. No residual here (the model forward
    /// adds the image path back itself).
    Tensor<T> initial_cross_attention(const Tensor<T>& f_img_masked,
                                      const Tensor<T>& f_gene_tokens) const;

    /// Pre-norm transformer block followed by residual cross-attention.
    Tensor<T> fusion_block(std::size_t index, const Tensor<T>& x,
                           const Tensor<T>& f_gene_tokens) const;

    /// out = Attn(Q=x W_Q, K=g W_K, V=g W_Vg) + x W_Vi
    Tensor<T> residual_cross_attention(std::size_t index, const Tensor<T>& x,
                                       const Tensor<T>& f_gene_tokens) const;

    /// Full forward. with_recon=false skips the reconstruction branch and
    /// leaves its outputs empty (contrastive-only training mode).
    ForwardOutputs<T> forward(const Tensor<T>& patches, const Tensor<T>& expr, Mode mode,
                              Rng& rng, bool with_recon = true) const;

private:
    struct AttnParams {
        Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    };
    struct BlockParams {
        Tensor<T> ln1_s, ln1_b;
        AttnParams attn;
        Tensor<T> ln2_s, ln2_b;
        Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
    };
    struct HeadParams {
        Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b, ln_s, ln_b;
    };
    struct XAttnParams {
        Tensor<T> q_w, k_w, v_w, o_w;
    };
    struct ResXAttnParams {
        Tensor<T> q_w, k_w, v_gene_w, v_img_w;
    };
    struct FusionParams {
        BlockParams block;
        ResXAttnParams xattn;
    };

    Tensor<T>& add_param(const std::string& name, Shape shape, Rng& rng, bool trunc_normal);
    BlockParams register_block(const std::string& prefix, std::size_t dim, Rng& rng);
    HeadParams register_head(const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                             Rng& rng);

    Tensor<T> head_forward(const HeadParams& head, const Tensor<T>& x, Mode mode, Rng& rng) const;
    Tensor<T> transformer_block(const BlockParams& block, const Tensor<T>& x,
                                std::size_t heads) const;

    ModelConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;

    Tensor<T> patch_w_, patch_b_, cls_token_, pos_embed_;
    std::vector<BlockParams> vit_blocks_;
    HeadParams image_head_, gene_head_;
    Tensor<T> recon_map_w_, recon_map_b_;
    Tensor<T> snn_w_, snn_b_;
    XAttnParams init_xattn_;
    std::vector<FusionParams> fusion_;
};

} // namespace cmrc
