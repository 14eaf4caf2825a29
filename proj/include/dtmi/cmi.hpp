#pragma once

#include <utility>
#include <vector>

#include "dtmi/backbone.hpp"
#include "dtmi/nn.hpp"

// Cross-Modality Interaction: exchanged-query cross-attention followed by
// per-branch self-attention, operating on tokenized stage features with
// learned position tables. Residual+norm placement is post-norm here
// (y* = LN(MHA + y)), unlike the pre-norm encoder blocks.

namespace dtmi {

// Flattens [B,C,R,R] to [B,R^2,C] and adds a position table ([N,C], may be
// null for a pure flattening).
template <class S>
Tensor<S> tokenize(const Tensor<S>& x, const Tensor<S>& pos) {
    auto tok = to_tokens(x);
    if (!pos) return tok;
    check(pos->ndim() == 2 && pos->dim(0) == tok->dim(1) && pos->dim(1) == tok->dim(2),
          "tokenize: position table sized " + shape_str(pos->shape) + " for tokens " +
              shape_str(tok->shape));
    return add(tok, reshape(pos, {1, pos->dim(0), pos->dim(1)}));
}

template <class S>
Tensor<S> detokenize(const Tensor<S>& tok, int h, int w) {
    return to_map(tok, h, w);
}

// Multi-head attention core: splits given q/k/v sequences into heads, runs
// scaled dot-product attention per head, concatenates and projects. q may
// have a different token count than k/v.
template <class S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               int heads, const Linear<S>& out_proj, const Ctx<S>& ctx) {
    const int b = q->dim(0), nq = q->dim(1), d = q->dim(2);
    const int nk = k->dim(1);
    check(k->dim(2) == d && v->dim(2) == d, "multi_head_attention: dim mismatch");
    check(v->dim(1) == nk, "multi_head_attention: k/v token counts differ");
    check(d % heads == 0, "multi_head_attention: dim " + std::to_string(d) +
                              " not divisible by " + std::to_string(heads) + " heads");
    const int hd = d / heads;

    auto split = [&](const Tensor<S>& t, int n) {
        return reshape(permute(reshape(t, {b, n, heads, hd}), {0, 2, 1, 3}), {b * heads, n, hd});
    };
    auto qh = split(q, nq), kh = split(k, nk), vh = split(v, nk);
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    auto probs = softmax_lastdim(affine(bmm(qh, kh, /*trans_b=*/true), scale, S(0)));
    ctx.observe(probs);
    auto out = bmm(probs, vh);  // [B*heads, nq, hd]
    out = reshape(permute(reshape(out, {b, heads, nq, hd}), {0, 2, 1, 3}), {b, nq, d});
    return out_proj(out);
}

// Intra-modality transformer block, post-norm:
//   y* = LN(MHA(q,k,v from y) + y);  y' = LN(MLP(y*) + y*)
template <class S>
struct SelfAttentionBlock {
    int dim = 0, heads = 0;
    double drop = 0.0;
    Linear<S> wq, wk, wv, wo;
    LayerNorm<S> norm1, norm2;
    Mlp<S> mlp;

    SelfAttentionBlock() = default;
    SelfAttentionBlock(Registry<S>& reg, Rng& rng, const std::string& name, int dim_, int heads_,
                       double drop_)
        : dim(dim_), heads(heads_), drop(drop_) {
        typename Registry<S>::Scope scope(reg, name);
        wq = Linear<S>(reg, rng, "wq", dim, dim);
        wk = Linear<S>(reg, rng, "wk", dim, dim);
        wv = Linear<S>(reg, rng, "wv", dim, dim);
        wo = Linear<S>(reg, rng, "wo", dim, dim);
        norm1 = LayerNorm<S>(reg, rng, "norm1", dim);
        norm2 = LayerNorm<S>(reg, rng, "norm2", dim);
        mlp = Mlp<S>(reg, rng, "mlp", dim, 4 * dim, drop);
    }

    Tensor<S> forward(const Tensor<S>& y, const Ctx<S>& ctx) const {
        auto attn = multi_head_attention(wq(y), wk(y), wv(y), heads, wo, ctx);
        auto y1 = norm1(add(ctx.drop(attn, drop), y));
        return norm2(add(mlp(y1, ctx), y1));
    }
};

// Exchanged-query cross-attention. Each stream keeps its own q/k/v maps;
// the r-enhanced output attends with queries from d over r's keys/values
// and vice versa. Residuals follow the query stream, so output token counts
// match the query side.
template <class S>
struct CrossAttentionBlock {
    int dim = 0, heads = 0;
    double drop = 0.0;
    Linear<S> wq_r, wk_r, wv_r, wq_d, wk_d, wv_d;
    Linear<S> wo_rd, wo_dr;
    LayerNorm<S> norm1_rd, norm2_rd, norm1_dr, norm2_dr;
    Mlp<S> mlp_rd, mlp_dr;

    CrossAttentionBlock() = default;
    CrossAttentionBlock(Registry<S>& reg, Rng& rng, const std::string& name, int dim_, int heads_,
                        double drop_)
        : dim(dim_), heads(heads_), drop(drop_) {
        typename Registry<S>::Scope scope(reg, name);
        wq_r = Linear<S>(reg, rng, "wq_r", dim, dim);
        wk_r = Linear<S>(reg, rng, "wk_r", dim, dim);
        wv_r = Linear<S>(reg, rng, "wv_r", dim, dim);
        wq_d = Linear<S>(reg, rng, "wq_d", dim, dim);
        wk_d = Linear<S>(reg, rng, "wk_d", dim, dim);
        wv_d = Linear<S>(reg, rng, "wv_d", dim, dim);
        wo_rd = Linear<S>(reg, rng, "wo_rd", dim, dim);
        wo_dr = Linear<S>(reg, rng, "wo_dr", dim, dim);
        norm1_rd = LayerNorm<S>(reg, rng, "norm1_rd", dim);
        norm2_rd = LayerNorm<S>(reg, rng, "norm2_rd", dim);
        norm1_dr = LayerNorm<S>(reg, rng, "norm1_dr", dim);
        norm2_dr = LayerNorm<S>(reg, rng, "norm2_dr", dim);
        mlp_rd = Mlp<S>(reg, rng, "mlp_rd", dim, 4 * dim, drop);
        mlp_dr = Mlp<S>(reg, rng, "mlp_dr", dim, 4 * dim, drop);
    }

    std::pair<Tensor<S>, Tensor<S>> forward(const Tensor<S>& y_r, const Tensor<S>& y_d,
                                            const Ctx<S>& ctx) const {
        auto q_r = wq_r(y_r), k_r = wk_r(y_r), v_r = wv_r(y_r);
        auto q_d = wq_d(y_d), k_d = wk_d(y_d), v_d = wv_d(y_d);

        auto att_rd = multi_head_attention(q_d, k_r, v_r, heads, wo_rd, ctx);
        auto y_rd = norm1_rd(add(ctx.drop(att_rd, drop), y_d));
        y_rd = norm2_rd(add(mlp_rd(y_rd, ctx), y_rd));

        auto att_dr = multi_head_attention(q_r, k_d, v_d, heads, wo_dr, ctx);
        auto y_dr = norm1_dr(add(ctx.drop(att_dr, drop), y_r));
        y_dr = norm2_dr(add(mlp_dr(y_dr, ctx), y_dr));

        return {y_rd, y_dr};
    }
};

// CMI instance for one encoder stage: tokenization with learned position
// tables (zero-init), then `blocks` repetitions of cross-attention followed
// by per-branch self-attention.
template <class S>
struct CmiModule {
    int grid = 0, dim = 0, heads = 0, blocks = 0;
    Tensor<S> pos_r, pos_d;
    std::vector<CrossAttentionBlock<S>> cra;
    std::vector<SelfAttentionBlock<S>> sa_r, sa_d;

    CmiModule() = default;
    CmiModule(Registry<S>& reg, Rng& rng, const std::string& name, int grid_, int dim_, int heads_,
              int blocks_, double drop)
        : grid(grid_), dim(dim_), heads(heads_), blocks(blocks_) {
        typename Registry<S>::Scope scope(reg, name);
        pos_r = reg.param("pos_r", {grid * grid, dim}, Init::Zero, rng);
        pos_d = reg.param("pos_d", {grid * grid, dim}, Init::Zero, rng);
        for (int i = 0; i < blocks; ++i) {
            const std::string suffix = std::to_string(i);
            cra.emplace_back(reg, rng, "cra" + suffix, dim, heads, drop);
            sa_r.emplace_back(reg, rng, "sa_r" + suffix, dim, heads, drop);
            sa_d.emplace_back(reg, rng, "sa_d" + suffix, dim, heads, drop);
        }
    }

    // Returns (f_rd, f_dr): the r-branch continuation and d-branch
    // continuation, both feeding GMA and the next encoder stage.
    std::pair<Tensor<S>, Tensor<S>> forward(const Tensor<S>& f_r, const Tensor<S>& f_d,
                                            const Ctx<S>& ctx) const {
        auto y_r = tokenize(f_r, pos_r);
        auto y_d = tokenize(f_d, pos_d);
        for (int i = 0; i < blocks; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            auto [y_rd, y_dr] = cra[iu].forward(y_r, y_d, ctx);
            y_r = sa_r[iu].forward(y_rd, ctx);
            y_d = sa_d[iu].forward(y_dr, ctx);
        }
        return {detokenize(y_r, grid, grid), detokenize(y_d, grid, grid)};
    }
};

// CMI-V2 ablation: both token streams concatenated into one sequence of 2N
// tokens, self-attention over the joint stream, halves split back.
template <class S>
struct CmiV2Module {
    int grid = 0, dim = 0, blocks = 0;
    Tensor<S> pos_r, pos_d;
    std::vector<SelfAttentionBlock<S>> sa;

    CmiV2Module() = default;
    CmiV2Module(Registry<S>& reg, Rng& rng, const std::string& name, int grid_, int dim_,
                int heads, int blocks_, double drop)
        : grid(grid_), dim(dim_), blocks(blocks_) {
        typename Registry<S>::Scope scope(reg, name);
        pos_r = reg.param("pos_r", {grid * grid, dim}, Init::Zero, rng);
        pos_d = reg.param("pos_d", {grid * grid, dim}, Init::Zero, rng);
        for (int i = 0; i < blocks; ++i)
            sa.emplace_back(reg, rng, "sa" + std::to_string(i), dim, heads, drop);
    }

    std::pair<Tensor<S>, Tensor<S>> forward(const Tensor<S>& f_r, const Tensor<S>& f_d,
                                            const Ctx<S>& ctx) const {
        const int n = grid * grid;
        auto joint = concat<S>({tokenize(f_r, pos_r), tokenize(f_d, pos_d)}, 1);  // [B,2N,C]
        for (const auto& blk : sa) joint = blk.forward(joint, ctx);
        auto out_r = slice(joint, 1, 0, n);
        auto out_d = slice(joint, 1, n, n);
        return {detokenize(out_r, grid, grid), detokenize(out_d, grid, grid)};
    }
};

}  // namespace dtmi
