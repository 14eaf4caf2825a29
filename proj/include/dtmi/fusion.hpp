#pragma once

#include <array>

#include "dtmi/nn.hpp"

// Per-stage feature enhancement and modality fusion: AFE (spatial then
// channel attention), the additive/multiplicative early fusion, the gated
// modality attention pair, and the skip convolution over early RGB stages.

namespace dtmi {

// Spatial attention (channelwise max -> 3x3 conv -> sigmoid gate) followed
// by channel attention.
template <class S>
struct Afe {
    Conv2d<S> spatial_conv;
    ChannelAttention<S> ca;

    Afe() = default;
    Afe(Registry<S>& reg, Rng& rng, const std::string& name, int channels) {
        typename Registry<S>::Scope scope(reg, name);
        spatial_conv = Conv2d<S>(reg, rng, "spatial_conv", 1, 1, 3, 1);
        ca = ChannelAttention<S>(reg, rng, "ca", channels);
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        auto gate = sigmoid(spatial_conv(channel_max(x)));  // [B,1,H,W]
        return ca(mul(x, gate));
    }
};

// f_cm = fr + fd + fr (.) fd  -- symmetric "addition and production" fusion.
template <class S>
Tensor<S> early_fuse(const Tensor<S>& fr, const Tensor<S>& fd) {
    check(fr->shape == fd->shape, "early_fuse: shape mismatch " + shape_str(fr->shape) + " vs " +
                                      shape_str(fd->shape));
    return add(add(fr, fd), mul(fr, fd));
}

// Gated modality attention. Both branches are mean-pooled over space,
// concatenated, and passed through two fully connected layers (each linear
// + GELU + dropout); a sigmoid yields one gate scalar per sample.
template <class S>
struct Gma {
    double drop = 0.0;
    Linear<S> fc1, fc2;

    Gma() = default;
    Gma(Registry<S>& reg, Rng& rng, const std::string& name, int channels, double drop_)
        : drop(drop_) {
        typename Registry<S>::Scope scope(reg, name);
        fc1 = Linear<S>(reg, rng, "fc1", 2 * channels, 2 * channels);
        fc2 = Linear<S>(reg, rng, "fc2", 2 * channels, 1);
    }

    // [B,1], strictly inside (0,1)
    Tensor<S> gate(const Tensor<S>& f_rd, const Tensor<S>& f_dr, const Ctx<S>& ctx) const {
        check(f_rd->shape == f_dr->shape, "gma_gate: shape mismatch");
        auto pooled = concat<S>({mean_spatial(f_rd), mean_spatial(f_dr)}, 1);  // [B,2C]
        auto h = ctx.drop(gelu(fc1(pooled)), drop);
        auto z = ctx.drop(gelu(fc2(h)), drop);  // [B,1]
        return sigmoid(z);
    }

    // f_cm = g (.) f_rd + (1-g) (.) f_dr, gate broadcast over C,H,W
    static Tensor<S> fuse(const Tensor<S>& f_rd, const Tensor<S>& f_dr, const Tensor<S>& g) {
        check(f_rd->shape == f_dr->shape, "gma_fuse: shape mismatch");
        const int b = f_rd->dim(0);
        auto gb = reshape(g, {b, 1, 1, 1});
        return add(mul(gb, f_rd), mul(affine(gb, S(-1), S(1)), f_dr));
    }

    Tensor<S> operator()(const Tensor<S>& f_rd, const Tensor<S>& f_dr, const Ctx<S>& ctx) const {
        return fuse(f_rd, f_dr, gate(f_rd, f_dr, ctx));
    }
};

// Early encoding stages gathered for the prediction head: 1x1 projections
// to the decoder width, bilinear alignment to stage-1 resolution, 3x3
// fusion, channel attention.
template <class S>
struct SkipConv {
    int out_res = 0;
    std::array<Conv2d<S>, 3> proj;
    Conv2d<S> fuse;
    ChannelAttention<S> ca;

    SkipConv() = default;
    SkipConv(Registry<S>& reg, Rng& rng, const std::string& name, const std::array<int, 3>& in_ch,
             int width, int out_res_)
        : out_res(out_res_) {
        typename Registry<S>::Scope scope(reg, name);
        for (int i = 0; i < 3; ++i)
            proj[static_cast<std::size_t>(i)] =
                Conv2d<S>(reg, rng, "proj" + std::to_string(i + 1), in_ch[static_cast<std::size_t>(i)], width, 1, 0);
        fuse = Conv2d<S>(reg, rng, "fuse", 3 * width, width, 3, 1);
        ca = ChannelAttention<S>(reg, rng, "ca", width);
    }

    Tensor<S> operator()(const Tensor<S>& f1, const Tensor<S>& f2, const Tensor<S>& f3) const {
        std::vector<Tensor<S>> aligned;
        const Tensor<S>* in[3] = {&f1, &f2, &f3};
        for (int i = 0; i < 3; ++i)
            aligned.push_back(bilinear2d(proj[static_cast<std::size_t>(i)](*in[i]), out_res, out_res));
        return ca(fuse(concat(aligned, 1)));
    }
};

}  // namespace dtmi
