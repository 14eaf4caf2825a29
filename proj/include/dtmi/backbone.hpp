#pragma once

#include <array>
#include <vector>

#include "dtmi/config.hpp"
#include "dtmi/nn.hpp"

// Hierarchical windowed-attention encoder. Five stages: patch embedding
// (stage 1, no attention) followed by four transformer stages separated by
// 2x2 patch merging. Window attention alternates unshifted/shifted blocks;
// grids that do not divide the window size are zero-padded bottom/right and
// the padded tokens are masked out of attention.

namespace dtmi {

// [B,C,H,W] -> [B,H*W,C] (row-major spatial flattening)
template <class S>
Tensor<S> to_tokens(const Tensor<S>& x) {
    const int b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    return reshape(permute(x, {0, 2, 3, 1}), {b, h * w, c});
}

// [B,N,C] -> [B,C,H,W]
template <class S>
Tensor<S> to_map(const Tensor<S>& x, int h, int w) {
    const int b = x->dim(0), c = x->dim(2);
    check(x->dim(1) == h * w, "to_map: token count mismatch");
    return permute(reshape(x, {b, h, w, c}), {0, 3, 1, 2});
}

namespace detail {

// Attention mask for one padded (and possibly cyclically shifted) grid.
// Cells are labeled in the shifted frame: valid cells carry their wrap
// region id, padded cells carry a unique negative id so they attend only to
// themselves (their outputs are discarded at unpad). Pairs may attend iff
// labels match. Returns an empty vector when no masking is needed.
template <class S>
std::vector<S> window_attn_mask(int grid, int padded, int window, int shift) {
    if (padded == grid && shift == 0) return {};
    const int wins = padded / window;
    const int w2 = window * window;
    std::vector<int> id(static_cast<std::size_t>(padded) * padded);
    auto region = [&](int t) {
        if (shift == 0) return 0;
        if (t < padded - window) return 0;
        if (t < padded - shift) return 1;
        return 2;
    };
    for (int y = 0; y < padded; ++y)
        for (int x = 0; x < padded; ++x) {
            const int oy = (y + shift) % padded;
            const int ox = (x + shift) % padded;
            const bool pad = oy >= grid || ox >= grid;
            id[static_cast<std::size_t>(y) * padded + x] =
                pad ? -(1 + y * padded + x) : region(y) * 3 + region(x);
        }
    std::vector<S> mask(static_cast<std::size_t>(wins) * wins * w2 * w2, S(0));
    const S neg = S(-1e9);
    std::size_t mi = 0;
    for (int wy = 0; wy < wins; ++wy)
        for (int wx = 0; wx < wins; ++wx) {
            std::vector<int> cell(static_cast<std::size_t>(w2));
            for (int dy = 0; dy < window; ++dy)
                for (int dx = 0; dx < window; ++dx)
                    cell[static_cast<std::size_t>(dy) * window + dx] =
                        id[static_cast<std::size_t>(wy * window + dy) * padded + (wx * window + dx)];
            for (int q = 0; q < w2; ++q)
                for (int k = 0; k < w2; ++k, ++mi)
                    mask[mi] = cell[static_cast<std::size_t>(q)] == cell[static_cast<std::size_t>(k)] ? S(0) : neg;
        }
    return mask;
}

inline std::vector<int> relative_position_index(int window) {
    const int w2 = window * window;
    std::vector<int> idx(static_cast<std::size_t>(w2) * w2);
    for (int q = 0; q < w2; ++q) {
        const int qy = q / window, qx = q % window;
        for (int k = 0; k < w2; ++k) {
            const int ky = k / window, kx = k % window;
            const int rel = (qy - ky + window - 1) * (2 * window - 1) + (qx - kx + window - 1);
            idx[static_cast<std::size_t>(q) * w2 + k] = rel;
        }
    }
    return idx;
}

}  // namespace detail

template <class S>
struct WindowAttentionBlock {
    int grid = 0, padded = 0, window = 0, shift = 0, heads = 0, channels = 0;
    double drop = 0.0;
    LayerNorm<S> norm1, norm2;
    Linear<S> qkv, proj;
    Mlp<S> mlp;
    Tensor<S> rel_bias;            // [(2w-1)^2, heads]
    std::vector<int> rel_index;    // [w^2 * w^2]
    Tensor<S> attn_mask;           // [1,nW,1,w^2,w^2] or null

    WindowAttentionBlock() = default;
    WindowAttentionBlock(Registry<S>& reg, Rng& rng, const std::string& name, int grid_,
                         int channels_, int heads_, int window_, bool shifted, double drop_)
        : grid(grid_), window(window_), heads(heads_), channels(channels_), drop(drop_) {
        check(channels % heads == 0, "window_attention: head count " + std::to_string(heads) +
                                         " does not divide channel dim " + std::to_string(channels));
        padded = (grid + window - 1) / window * window;
        // A single window covers the whole grid; shifting would be a no-op
        // permutation, so it is disabled (standard practice).
        shift = (shifted && padded > window) ? window / 2 : 0;

        typename Registry<S>::Scope scope(reg, name);
        norm1 = LayerNorm<S>(reg, rng, "norm1", channels);
        qkv = Linear<S>(reg, rng, "qkv", channels, 3 * channels);
        proj = Linear<S>(reg, rng, "proj", channels, channels);
        norm2 = LayerNorm<S>(reg, rng, "norm2", channels);
        mlp = Mlp<S>(reg, rng, "mlp", channels, 4 * channels, drop);
        rel_bias = reg.param("rel_bias", {(2 * window - 1) * (2 * window - 1), heads},
                             Init::TruncNormal02, rng);
        rel_index = detail::relative_position_index(window);

        auto mask = detail::window_attn_mask<S>(grid, padded, window, shift);
        if (!mask.empty()) {
            const int wins = padded / window;
            const int w2 = window * window;
            attn_mask = make_tensor<S>({1, wins * wins, 1, w2, w2}, std::move(mask));
        }
    }

    // x: [B, grid*grid, C]
    Tensor<S> forward(const Tensor<S>& x, const Ctx<S>& ctx) const {
        const int b = x->dim(0);
        const int w2 = window * window;
        const int wins = padded / window;
        const int n_win = wins * wins;
        const int hd = channels / heads;

        auto h = norm1(x);
        auto h4 = reshape(h, {b, grid, grid, channels});
        h4 = pad_bottom_right(h4, padded, padded);
        if (shift > 0) h4 = roll_hw(h4, -shift, -shift);
        auto h6 = reshape(h4, {b, wins, window, wins, window, channels});
        auto tw = reshape(permute(h6, {0, 1, 3, 2, 4, 5}), {b * n_win, w2, channels});

        auto qkv_all = qkv(tw);  // [G, w2, 3C]
        auto split_heads = [&](const Tensor<S>& t) {
            auto t4 = reshape(t, {b * n_win, w2, heads, hd});
            return reshape(permute(t4, {0, 2, 1, 3}), {b * n_win * heads, w2, hd});
        };
        auto q = split_heads(slice(qkv_all, 2, 0, channels));
        auto k = split_heads(slice(qkv_all, 2, channels, channels));
        auto v = split_heads(slice(qkv_all, 2, 2 * channels, channels));

        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        auto logits = affine(bmm(q, k, /*trans_b=*/true), scale, S(0));
        auto l5 = reshape(logits, {b, n_win, heads, w2, w2});
        auto bias = gather_rows(rel_bias, rel_index);                     // [w2*w2, heads]
        auto bias5 = reshape(permute(reshape(bias, {w2, w2, heads}), {2, 0, 1}),
                             {1, 1, heads, w2, w2});
        l5 = add(l5, bias5);
        if (attn_mask) l5 = add(l5, attn_mask);
        auto probs = softmax_lastdim(l5);
        ctx.observe(probs);

        auto out = bmm(reshape(probs, {b * n_win * heads, w2, w2}), v);   // [G*nh, w2, hd]
        out = reshape(permute(reshape(out, {b * n_win, heads, w2, hd}), {0, 2, 1, 3}),
                      {b * n_win, w2, channels});
        out = ctx.drop(proj(out), drop);

        auto o6 = reshape(out, {b, wins, wins, window, window, channels});
        auto o4 = reshape(permute(o6, {0, 1, 3, 2, 4, 5}), {b, padded, padded, channels});
        if (shift > 0) o4 = roll_hw(o4, shift, shift);
        if (padded != grid) o4 = slice(slice(o4, 1, 0, grid), 2, 0, grid);
        auto attn_out = reshape(o4, {b, grid * grid, channels});

        auto y = add(x, attn_out);
        return add(y, mlp(norm2(y), ctx));
    }
};

// Non-overlapping patch partition + linear projection + layer norm.
template <class S>
struct PatchEmbed {
    int patch = 0, embed = 0;
    Linear<S> proj;
    LayerNorm<S> norm;

    PatchEmbed() = default;
    PatchEmbed(Registry<S>& reg, Rng& rng, const std::string& name, int patch_, int embed_)
        : patch(patch_), embed(embed_) {
        typename Registry<S>::Scope scope(reg, name);
        proj = Linear<S>(reg, rng, "proj", 3 * patch * patch, embed);
        norm = LayerNorm<S>(reg, rng, "norm", embed);
    }

    // [B,3,S,S] -> [B,embed,S/p,S/p]
    Tensor<S> operator()(const Tensor<S>& img) const {
        const int b = img->dim(0), side = img->dim(2);
        check(img->dim(1) == 3, "patch_embed: expected 3 input channels");
        check(side % patch == 0, "patch_embed: side " + std::to_string(side) +
                                     " not divisible by patch " + std::to_string(patch));
        const int r = side / patch;
        auto x = reshape(img, {b, 3, r, patch, r, patch});
        x = reshape(permute(x, {0, 2, 4, 1, 3, 5}), {b, r * r, 3 * patch * patch});
        return to_map(norm(proj(x)), r, r);
    }
};

// 2x2 neighborhood concatenation (4C) + layer norm + linear reduction to 2C.
template <class S>
struct PatchMerge {
    int channels = 0;
    LayerNorm<S> norm;
    Linear<S> reduce;

    PatchMerge() = default;
    PatchMerge(Registry<S>& reg, Rng& rng, const std::string& name, int channels_)
        : channels(channels_) {
        typename Registry<S>::Scope scope(reg, name);
        norm = LayerNorm<S>(reg, rng, "norm", 4 * channels);
        reduce = Linear<S>(reg, rng, "reduce", 4 * channels, 2 * channels);
    }

    // [B,C,R,R] -> [B,2C,R/2,R/2]
    Tensor<S> operator()(const Tensor<S>& x) const {
        const int b = x->dim(0), c = x->dim(1), r = x->dim(2);
        check(c == channels, "patch_merge: channel mismatch");
        check(r % 2 == 0, "patch_merge: odd resolution " + std::to_string(r));
        const int r2 = r / 2;
        auto x6 = reshape(x, {b, c, r2, 2, r2, 2});
        auto tok = reshape(permute(x6, {0, 2, 4, 3, 5, 1}), {b, r2 * r2, 4 * c});
        return to_map(reduce(norm(tok)), r2, r2);
    }
};

template <class S>
struct SwinStage {
    int in_res = 0, out_res = 0, out_ch = 0;
    bool has_merge = false;
    PatchMerge<S> merge;
    std::vector<WindowAttentionBlock<S>> blocks;

    SwinStage() = default;
    SwinStage(Registry<S>& reg, Rng& rng, const std::string& name, int in_res_, int in_ch,
              bool merge_first, int depth, int heads, int window, double drop)
        : in_res(in_res_), has_merge(merge_first) {
        typename Registry<S>::Scope scope(reg, name);
        out_res = merge_first ? in_res / 2 : in_res;
        out_ch = merge_first ? 2 * in_ch : in_ch;
        if (merge_first) merge = PatchMerge<S>(reg, rng, "merge", in_ch);
        blocks.reserve(static_cast<std::size_t>(depth));
        for (int i = 0; i < depth; ++i)
            blocks.emplace_back(reg, rng, "block" + std::to_string(i), out_res, out_ch, heads,
                                window, /*shifted=*/i % 2 == 1, drop);
    }

    Tensor<S> operator()(const Tensor<S>& x, const Ctx<S>& ctx) const {
        auto h = has_merge ? merge(x) : x;
        auto tok = to_tokens(h);
        for (const auto& blk : blocks) tok = blk.forward(tok, ctx);
        return to_map(tok, out_res, out_res);
    }
};

template <class S>
using EncoderPyramid = std::array<Tensor<S>, 5>;

// One modality encoder. Stage 1 is the patch embedding; stages 2..5 are the
// transformer stages (merge between 2->3, 3->4, 4->5). run_stage exposes the
// stages individually so that cross-modality interaction can feed corrected
// features into the following stage.
template <class S>
struct SwinEncoder {
    PatchEmbed<S> embed;
    std::array<SwinStage<S>, 4> stages;

    SwinEncoder() = default;
    SwinEncoder(Registry<S>& reg, Rng& rng, const std::string& name, const RunConfig& cfg,
                const StageGeometry& geom) {
        typename Registry<S>::Scope scope(reg, name);
        embed = PatchEmbed<S>(reg, rng, "embed", cfg.patch_size, cfg.embed_dim);
        for (int s = 2; s <= 5; ++s) {
            const auto si = static_cast<std::size_t>(s - 2);
            stages[si] = SwinStage<S>(reg, rng, "stage" + std::to_string(s),
                                      geom.resolution[static_cast<std::size_t>(s - 2)],
                                      geom.channels[static_cast<std::size_t>(s - 2)],
                                      /*merge_first=*/s >= 3, cfg.depths[si], cfg.num_heads[si],
                                      cfg.window_size, cfg.backbone_dropout);
        }
    }

    Tensor<S> run_embed(const Tensor<S>& img) const { return embed(img); }

    // s in 2..5; x is the previous stage's output map
    Tensor<S> run_stage(int s, const Tensor<S>& x, const Ctx<S>& ctx) const {
        return stages[static_cast<std::size_t>(s - 2)](x, ctx);
    }

    // Plain five-level pyramid, no cross-modality interaction.
    EncoderPyramid<S> encode(const Tensor<S>& img, const Ctx<S>& ctx) const {
        EncoderPyramid<S> pyr;
        pyr[0] = run_embed(img);
        for (int s = 2; s <= 5; ++s)
            pyr[static_cast<std::size_t>(s - 1)] = run_stage(s, pyr[static_cast<std::size_t>(s - 2)], ctx);
        return pyr;
    }
};

}  // namespace dtmi
