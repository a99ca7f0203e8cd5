#include "cmrc/model.hpp"

#include <cmath>

namespace cmrc {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("ModelConfig: " + msg); };
    if (image_size == 0 || vit_patch == 0 || vit_dim == 0 || vit_depth == 0 || vit_heads == 0 ||
        proj_dim == 0 || gene_dim == 0 || snn_hidden == 0 || recon_tokens == 0 || recon_dim == 0 ||
        fusion_heads == 0 || init_xattn_heads == 0)
        fail("all dimensions must be positive");
    if (image_size % vit_patch != 0) fail("image_size must be divisible by vit_patch");
    if (vit_dim % vit_heads != 0) fail("vit_dim must be divisible by vit_heads");
    if (recon_dim % init_xattn_heads != 0)
        fail("recon_dim must be divisible by init_xattn_heads");
    if (recon_dim % fusion_heads != 0) fail("recon_dim must be divisible by fusion_heads");
    if (snn_hidden != recon_tokens * recon_dim)
        fail("snn_hidden must equal recon_tokens * recon_dim");
    if (mask_rate < 0.0 || mask_rate >= 1.0) fail("mask_rate must lie in [0, 1)");
    if (proj_dropout < 0.0 || proj_dropout >= 1.0) fail("proj_dropout must lie in [0, 1)");
}

ModelConfig ModelConfig::desk_profile(std::size_t gene_dim) {
    ModelConfig cfg;
    cfg.gene_dim = gene_dim;
    return cfg;
}

ModelConfig ModelConfig::paper_profile(std::size_t gene_dim) {
    ModelConfig cfg;
    cfg.image_size = 224;
    cfg.vit_patch = 32;
    cfg.vit_dim = 768;
    cfg.vit_depth = 12;
    cfg.vit_heads = 12;
    cfg.proj_dim = 256;
    cfg.gene_dim = gene_dim;
    cfg.snn_hidden = 2048;
    cfg.recon_tokens = 8;
    cfg.recon_dim = 256;
    cfg.fusion_heads = 8;
    cfg.init_xattn_heads = 4;
    return cfg;
}

namespace {

/// (B,H,W,3) -> (B, numPatches, patch*patch*3). Pure rearrangement of input
/// pixels; patches never carry gradient.
template <typename T>
Tensor<T> patchify(const Tensor<T>& patches, std::size_t patch) {
    if (patches.rank() != 4 || patches.extent(3) != 3)
        throw ShapeError("encode_image: expected (B,H,W,3), got " +
                         shape_to_string(patches.shape()));
    std::size_t B = patches.extent(0), H = patches.extent(1), W = patches.extent(2);
    if (H != W || H % patch != 0)
        throw ShapeError("encode_image: spatial size " + std::to_string(H) + "x" +
                         std::to_string(W) + " does not match the configured image size");
    std::size_t grid = H / patch;
    std::size_t np = grid * grid;
    std::size_t pd = patch * patch * 3;
    Tensor<T> out = Tensor<T>::zeros({B, np, pd});
    const auto& pv = patches.values();
    auto& ov = out.mutable_values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t gy = 0; gy < grid; ++gy)
            for (std::size_t gx = 0; gx < grid; ++gx) {
                std::size_t p = gy * grid + gx;
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x)
                        for (std::size_t c = 0; c < 3; ++c)
                            ov[((b * np + p) * pd) + (y * patch + x) * 3 + c] =
                                pv[((b * H + gy * patch + y) * W + gx * patch + x) * 3 + c];
            }
    return out;
}

/// x (.., Din) * w (Din, Dout) + b, preserving leading axes.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    std::size_t din = x.extent(x.rank() - 1);
    Tensor<T> flat = x.rank() == 2 ? x : reshape(x, {shape_size(lead), din});
    Tensor<T> y = add(matmul(flat, w), b);
    if (x.rank() == 2) return y;
    lead.push_back(w.extent(1));
    return reshape(y, lead);
}

template <typename T>
Tensor<T> linear_nobias(const Tensor<T>& x, const Tensor<T>& w) {
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    std::size_t din = x.extent(x.rank() - 1);
    Tensor<T> flat = x.rank() == 2 ? x : reshape(x, {shape_size(lead), din});
    Tensor<T> y = matmul(flat, w);
    if (x.rank() == 2) return y;
    lead.push_back(w.extent(1));
    return reshape(y, lead);
}

/// Scaled-dot-product attention over heads; returns concatenated head
/// outputs (B, Tq, D) with no output projection.
template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         std::size_t heads) {
    std::size_t B = q.extent(0), Tq = q.extent(1), D = q.extent(2), Tk = k.extent(1);
    if (D % heads != 0) throw ConfigError("attention: width not divisible by head count");
    std::size_t dk = D / heads;
    Tensor<T> qh = permute(reshape(q, {B, Tq, heads, dk}), {0, 2, 1, 3}); // B,H,Tq,dk
    Tensor<T> kh = permute(reshape(k, {B, Tk, heads, dk}), {0, 2, 3, 1}); // B,H,dk,Tk
    Tensor<T> vh = permute(reshape(v, {B, Tk, heads, dk}), {0, 2, 1, 3}); // B,H,Tk,dk
    Tensor<T> scores = scale(batched_matmul(qh, kh), T(1.0 / std::sqrt(double(dk))));
    Tensor<T> attn = softmax_rows(scores);
    Tensor<T> out = batched_matmul(attn, vh); // B,H,Tq,dk
    return reshape(permute(out, {0, 2, 1, 3}), {B, Tq, D});
}

} // namespace

template <typename T>
Tensor<T>& Model<T>::add_param(const std::string& name, Shape shape, Rng& rng,
                               bool trunc_normal) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    if (trunc_normal) {
        auto& v = t.mutable_values();
        for (auto& x : v) x = static_cast<T>(rng.truncated_normal(0.02));
    }
    t.set_requires_grad(true);
    names_.push_back(name);
    params_.push_back(t);
    index_[name] = params_.size() - 1;
    return params_.back();
}

template <typename T>
typename Model<T>::BlockParams Model<T>::register_block(const std::string& prefix,
                                                        std::size_t dim, Rng& rng) {
    BlockParams b;
    b.ln1_s = add_param(prefix + ".ln1.scale", {dim}, rng, false);
    b.ln1_s.mutable_values().assign(dim, T(1));
    b.ln1_b = add_param(prefix + ".ln1.shift", {dim}, rng, false);
    b.attn.q_w = add_param(prefix + ".attn.q.weight", {dim, dim}, rng, true);
    b.attn.q_b = add_param(prefix + ".attn.q.bias", {dim}, rng, false);
    b.attn.k_w = add_param(prefix + ".attn.k.weight", {dim, dim}, rng, true);
    b.attn.k_b = add_param(prefix + ".attn.k.bias", {dim}, rng, false);
    b.attn.v_w = add_param(prefix + ".attn.v.weight", {dim, dim}, rng, true);
    b.attn.v_b = add_param(prefix + ".attn.v.bias", {dim}, rng, false);
    b.attn.o_w = add_param(prefix + ".attn.out.weight", {dim, dim}, rng, true);
    b.attn.o_b = add_param(prefix + ".attn.out.bias", {dim}, rng, false);
    b.ln2_s = add_param(prefix + ".ln2.scale", {dim}, rng, false);
    b.ln2_s.mutable_values().assign(dim, T(1));
    b.ln2_b = add_param(prefix + ".ln2.shift", {dim}, rng, false);
    std::size_t hidden = dim * kMlpRatio;
    b.fc1_w = add_param(prefix + ".mlp.fc1.weight", {dim, hidden}, rng, true);
    b.fc1_b = add_param(prefix + ".mlp.fc1.bias", {hidden}, rng, false);
    b.fc2_w = add_param(prefix + ".mlp.fc2.weight", {hidden, dim}, rng, true);
    b.fc2_b = add_param(prefix + ".mlp.fc2.bias", {dim}, rng, false);
    return b;
}

template <typename T>
typename Model<T>::HeadParams Model<T>::register_head(const std::string& prefix,
                                                      std::size_t in_dim, std::size_t out_dim,
                                                      Rng& rng) {
    HeadParams h;
    h.fc1_w = add_param(prefix + ".fc1.weight", {in_dim, out_dim}, rng, true);
    h.fc1_b = add_param(prefix + ".fc1.bias", {out_dim}, rng, false);
    h.fc2_w = add_param(prefix + ".fc2.weight", {out_dim, out_dim}, rng, true);
    h.fc2_b = add_param(prefix + ".fc2.bias", {out_dim}, rng, false);
    h.ln_s = add_param(prefix + ".norm.scale", {out_dim}, rng, false);
    h.ln_s.mutable_values().assign(out_dim, T(1));
    h.ln_b = add_param(prefix + ".norm.shift", {out_dim}, rng, false);
    return h;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t init_seed) : cfg_(std::move(config)) {
    cfg_.validate();
    Rng rng(init_seed);

    std::size_t pd = cfg_.vit_patch * cfg_.vit_patch * 3;
    std::size_t tokens = cfg_.token_count();
    patch_w_ = add_param("image_encoder.patch_embed.weight", {pd, cfg_.vit_dim}, rng, true);
    patch_b_ = add_param("image_encoder.patch_embed.bias", {cfg_.vit_dim}, rng, false);
    cls_token_ = add_param("image_encoder.cls_token", {cfg_.vit_dim}, rng, true);
    pos_embed_ = add_param("image_encoder.pos_embed", {tokens, cfg_.vit_dim}, rng, true);
    for (std::size_t i = 0; i < cfg_.vit_depth; ++i)
        vit_blocks_.push_back(
            register_block("image_encoder.blocks." + std::to_string(i), cfg_.vit_dim, rng));

    image_head_ = register_head("image_head", cfg_.vit_dim, cfg_.proj_dim, rng);
    gene_head_ = register_head("gene_head", cfg_.gene_dim, cfg_.proj_dim, rng);

    recon_map_w_ = add_param("recon.input_map.weight", {cfg_.vit_dim, cfg_.recon_dim}, rng, true);
    recon_map_b_ = add_param("recon.input_map.bias", {cfg_.recon_dim}, rng, false);
    snn_w_ = add_param("recon.snn.fc.weight", {cfg_.gene_dim, cfg_.snn_hidden}, rng, true);
    snn_b_ = add_param("recon.snn.fc.bias", {cfg_.snn_hidden}, rng, false);

    init_xattn_.q_w =
        add_param("recon.init_xattn.q.weight", {cfg_.recon_dim, cfg_.recon_dim}, rng, true);
    init_xattn_.k_w =
        add_param("recon.init_xattn.k.weight", {cfg_.recon_dim, cfg_.recon_dim}, rng, true);
    init_xattn_.v_w =
        add_param("recon.init_xattn.v.weight", {cfg_.recon_dim, cfg_.recon_dim}, rng, true);
    init_xattn_.o_w =
        add_param("recon.init_xattn.out.weight", {cfg_.recon_dim, cfg_.recon_dim}, rng, true);

    for (std::size_t i = 0; i < 2; ++i) {
        FusionParams f;
        std::string prefix = "recon.fusion." + std::to_string(i);
        f.block = register_block(prefix, cfg_.recon_dim, rng);
        f.xattn.q_w = add_param(prefix + ".xattn.q.weight", {cfg_.recon_dim, cfg_.recon_dim},
                                rng, true);
        f.xattn.k_w = add_param(prefix + ".xattn.k.weight", {cfg_.recon_dim, cfg_.recon_dim},
                                rng, true);
        f.xattn.v_gene_w = add_param(prefix + ".xattn.value_gene.weight",
                                     {cfg_.recon_dim, cfg_.recon_dim}, rng, true);
        f.xattn.v_img_w = add_param(prefix + ".xattn.value_image.weight",
                                    {cfg_.recon_dim, cfg_.recon_dim}, rng, true);
        fusion_.push_back(std::move(f));
    }
}

template <typename T>
Tensor<T>& Model<T>::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("Model: unknown parameter '" + name + "'");
    return params_[it->second];
}

template <typename T>
std::size_t Model<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template <typename T>
Tensor<T> Model<T>::encode_image(const Tensor<T>& patches) const {
    if (patches.rank() != 4 || patches.extent(1) != cfg_.image_size ||
        patches.extent(2) != cfg_.image_size)
        throw ShapeError("encode_image: expected (B," + std::to_string(cfg_.image_size) + "," +
                         std::to_string(cfg_.image_size) + ",3), got " +
                         shape_to_string(patches.shape()));
    Tensor<T> x = patchify(patches, cfg_.vit_patch);   // B, np, pd
    x = linear(x, patch_w_, patch_b_);                 // B, np, D
    x = prepend_token(x, cls_token_);                  // B, T, D
    x = add(x, pos_embed_);
    for (const auto& block : vit_blocks_) x = transformer_block(block, x, cfg_.vit_heads);
    return x;
}

template <typename T>
Tensor<T> Model<T>::head_forward(const HeadParams& head, const Tensor<T>& x, Mode mode,
                                 Rng& rng) const {
    Tensor<T> h = add(matmul(x, head.fc1_w), head.fc1_b);
    h = gelu(h);
    h = add(matmul(h, head.fc2_w), head.fc2_b);
    h = dropout(h, cfg_.proj_dropout, mode == Mode::Train, rng);
    return layer_norm(h, head.ln_s, head.ln_b);
}

template <typename T>
Tensor<T> Model<T>::project_image(const Tensor<T>& f_img, Mode mode, Rng& rng) const {
    Tensor<T> pooled = mean_axis(f_img, 1); // B, vit_dim
    return head_forward(image_head_, pooled, mode, rng);
}

template <typename T>
Tensor<T> Model<T>::encode_genes(const Tensor<T>& expr, Mode mode, Rng& rng) const {
    if (expr.rank() != 2 || expr.extent(1) != cfg_.gene_dim)
        throw ShapeError("encode_genes: expected (B," + std::to_string(cfg_.gene_dim) +
                         "), got " + shape_to_string(expr.shape()));
    return head_forward(gene_head_, expr, mode, rng);
}

template <typename T>
Tensor<T> Model<T>::snn_map(const Tensor<T>& expr, Mode mode, Rng& rng) const {
    if (expr.rank() != 2 || expr.extent(1) != cfg_.gene_dim)
        throw ShapeError("snn_map: expected (B," + std::to_string(cfg_.gene_dim) + "), got " +
                         shape_to_string(expr.shape()));
    Tensor<T> h = add(matmul(expr, snn_w_), snn_b_);
    h = selu(h);
    h = alpha_dropout(h, kSnnDropout, mode == Mode::Train, rng);
    return reshape(h, {expr.extent(0), cfg_.recon_tokens, cfg_.recon_dim});
}

template <typename T>
MaskResult<T> Model<T>::mask_features(const Tensor<T>& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("mask_features: rate must lie in [0, 1), got " + std::to_string(rate));
    if (x.rank() != 3) throw ShapeError("mask_features: expected (B,T,D)");
    std::size_t B = x.extent(0);
    std::size_t per = x.extent(1) * x.extent(2);
    std::size_t count = static_cast<std::size_t>(std::lround(rate * static_cast<double>(per)));

    Tensor<T> keep = Tensor<T>::full(x.shape(), T(1));
    Tensor<T> mask = Tensor<T>::zeros(x.shape());
    auto& kv = keep.mutable_values();
    auto& mv = mask.mutable_values();
    for (std::size_t b = 0; b < B; ++b) {
        auto idx = rng.sample_without_replacement(per, count);
        for (std::size_t i : idx) {
            kv[b * per + i] = T(0);
            mv[b * per + i] = T(1);
        }
    }
    MaskResult<T> out;
    out.masked = mul(x, keep);
    out.mask = mask;
    return out;
}

template <typename T>
Tensor<T> Model<T>::transformer_block(const BlockParams& block, const Tensor<T>& x,
                                      std::size_t heads) const {
    Tensor<T> n1 = layer_norm(x, block.ln1_s, block.ln1_b);
    Tensor<T> q = linear(n1, block.attn.q_w, block.attn.q_b);
    Tensor<T> k = linear(n1, block.attn.k_w, block.attn.k_b);
    Tensor<T> v = linear(n1, block.attn.v_w, block.attn.v_b);
    Tensor<T> att = attention_core(q, k, v, heads);
    att = linear(att, block.attn.o_w, block.attn.o_b);
    Tensor<T> h = add(x, att);

    Tensor<T> n2 = layer_norm(h, block.ln2_s, block.ln2_b);
    Tensor<T> m = add(matmul(reshape(n2, {h.extent(0) * h.extent(1), h.extent(2)}), block.fc1_w),
                      block.fc1_b);
    m = gelu(m);
    m = add(matmul(m, block.fc2_w), block.fc2_b);
    m = reshape(m, h.shape());
    return add(h, m);
}

template <typename T>
Tensor<T> Model<T>::initial_cross_attention(const Tensor<T>& f_img_masked,
                                            const Tensor<T>& f_gene_tokens) const {
    Tensor<T> q = linear_nobias(f_img_masked, init_xattn_.q_w);
    Tensor<T> k = linear_nobias(f_gene_tokens, init_xattn_.k_w);
    Tensor<T> v = linear_nobias(f_gene_tokens, init_xattn_.v_w);
    Tensor<T> out = attention_core(q, k, v, cfg_.init_xattn_heads);
    return linear_nobias(out, init_xattn_.o_w);
}

template <typename T>
Tensor<T> Model<T>::residual_cross_attention(std::size_t index, const Tensor<T>& x,
                                             const Tensor<T>& f_gene_tokens) const {
    const auto& p = fusion_.at(index).xattn;
    Tensor<T> q = linear_nobias(x, p.q_w);
    Tensor<T> k = linear_nobias(f_gene_tokens, p.k_w);
    Tensor<T> v = linear_nobias(f_gene_tokens, p.v_gene_w);
    Tensor<T> att = attention_core(q, k, v, cfg_.fusion_heads);
    return add(att, linear_nobias(x, p.v_img_w));
}

template <typename T>
Tensor<T> Model<T>::fusion_block(std::size_t index, const Tensor<T>& x,
                                 const Tensor<T>& f_gene_tokens) const {
    Tensor<T> h = transformer_block(fusion_.at(index).block, x, cfg_.fusion_heads);
    return residual_cross_attention(index, h, f_gene_tokens);
}

template <typename T>
ForwardOutputs<T> Model<T>::forward(const Tensor<T>& patches, const Tensor<T>& expr, Mode mode,
                                    Rng& rng, bool with_recon) const {
    if (patches.extent(0) != expr.extent(0))
        throw ShapeError("forward: batch sizes differ: " + shape_to_string(patches.shape()) +
                         " vs " + shape_to_string(expr.shape()));
    ForwardOutputs<T> out;
    out.f_img = encode_image(patches);
    out.f_img_proj = project_image(out.f_img, mode, rng);
    out.f_gene = encode_genes(expr, mode, rng);
    if (!with_recon) return out;

    Tensor<T> mapped = linear(out.f_img, recon_map_w_, recon_map_b_);
    out.f_gene_tokens = snn_map(expr, mode, rng);
    MaskResult<T> mr = mask_features(mapped, cfg_.mask_rate, rng);
    out.f_img_masked = mr.masked;
    out.mask = mr.mask;
    // preliminary reconstruction keeps the unmasked image path via a residual
    out.f_att = add(out.f_img_masked, initial_cross_attention(out.f_img_masked, out.f_gene_tokens));
    Tensor<T> x = fusion_block(0, out.f_att, out.f_gene_tokens);
    x = fusion_block(1, x, out.f_gene_tokens);
    out.f_fuse = x;
    out.f_r = mean_axis(out.f_fuse, 1);
    return out;
}

template class Model<float>;
template class Model<double>;

} // namespace cmrc
