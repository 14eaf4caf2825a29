#pragma once

#include <array>
#include <map>
#include <vector>

#include "dtmi/config.hpp"
#include "dtmi/nn.hpp"

// Dense Saliency Decoder. All cross-modality features enter through 1x1
// projections to a common decoder width. Stages run 4 -> 1; each stage fuses
// the residual mix of deeper encoder features (Res), the common features
// (Com), and -- depending on the history mode -- earlier decoding outputs,
// then applies channel attention and a 3x3 reduction back to the decoder
// width. A plain top-down cascade replaces all of this for the no_dsd
// ablation.

namespace dtmi {

enum class HistoryMode {
    Dense,       // every previous decoding stage is concatenated (Eq.-16 style)
    Sequential,  // only the immediately previous stage (the w/o F-dec ablation)
};

template <class S>
struct PredictionPair {
    Tensor<S> saliency;        // [B,1,S,S], strictly inside (0,1)
    Tensor<S> edge;            // null when the edge head is absent
    std::array<Tensor<S>, 4> f_dec;  // decoding features, stage i at [i-1]
};

// Two 3x3 convolutions with a ReLU between; the single-channel logit map is
// bilinearly upsampled to the input resolution and squashed by a sigmoid.
// Upsampling happens in logit space so saturated logits keep prediction
// transitions sharp at full resolution.
template <class S>
struct PredictionHead {
    Conv2d<S> conv1, conv2;
    int out_size = 0;

    PredictionHead() = default;
    PredictionHead(Registry<S>& reg, Rng& rng, const std::string& name, int in_ch, int width,
                   int out_size_)
        : out_size(out_size_) {
        typename Registry<S>::Scope scope(reg, name);
        conv1 = Conv2d<S>(reg, rng, "conv1", in_ch, width / 2, 3, 1);
        conv2 = Conv2d<S>(reg, rng, "conv2", width / 2, 1, 3, 1);
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        return sigmoid(bilinear2d(conv2(relu(conv1(x))), out_size, out_size));
    }
};

template <class S>
struct DenseSaliencyDecoder {
    int width = 0;
    HistoryMode history = HistoryMode::Dense;
    bool has_edge_head = true;
    std::array<int, 5> stage_res{};
    std::array<Conv2d<S>, 5> proj;       // 1x1 entry projections, stage i at [i-1]
    std::array<Conv2d<S>, 4> res_conv;   // stage i at [i-1]
    std::array<ChannelAttention<S>, 4> ca;
    std::array<Conv2d<S>, 4> dec_conv;
    PredictionHead<S> saliency_head, edge_head;

    DenseSaliencyDecoder() = default;
    DenseSaliencyDecoder(Registry<S>& reg, Rng& rng, const std::string& name,
                         const StageGeometry& geom, const RunConfig& cfg, HistoryMode history_,
                         bool edge_head_)
        : width(cfg.decoder_width), history(history_), has_edge_head(edge_head_),
          stage_res(geom.resolution) {
        typename Registry<S>::Scope scope(reg, name);
        for (int i = 1; i <= 5; ++i)
            proj[static_cast<std::size_t>(i - 1)] =
                Conv2d<S>(reg, rng, "proj" + std::to_string(i),
                          geom.channels[static_cast<std::size_t>(i - 1)], width, 1, 0);
        for (int i = 1; i <= 4; ++i) {
            const auto iu = static_cast<std::size_t>(i - 1);
            res_conv[iu] = Conv2d<S>(reg, rng, "res" + std::to_string(i), (5 - i) * width, width, 3, 1);
            const int hist = history == HistoryMode::Dense ? 4 - i : (i < 4 ? 1 : 0);
            const int ca_width = (2 + hist) * width;
            ca[iu] = ChannelAttention<S>(reg, rng, "ca" + std::to_string(i), ca_width);
            dec_conv[iu] = Conv2d<S>(reg, rng, "dec" + std::to_string(i), ca_width, width, 3, 1);
        }
        saliency_head = PredictionHead<S>(reg, rng, "saliency_head", 2 * width, width, cfg.input_size);
        if (has_edge_head)
            edge_head = PredictionHead<S>(reg, rng, "edge_head", width, width, cfg.input_size);
    }

    // Residual mix for stage i: deeper projected features upsampled to the
    // stage resolution, concatenated, fused by a 3x3 convolution.
    Tensor<S> res_fuse(int i, const std::array<Tensor<S>, 5>& p) const {
        check(i >= 1 && i <= 4, "res_fuse: stage index must be in 1..4");
        const int r = stage_res[static_cast<std::size_t>(i - 1)];
        std::vector<Tensor<S>> ups;
        for (int j = i + 1; j <= 5; ++j)
            ups.push_back(bilinear2d(p[static_cast<std::size_t>(j - 1)], r, r));
        return res_conv[static_cast<std::size_t>(i - 1)](concat(ups, 1));
    }

    // f_com = f_cm (.) f_res + f_cm
    static Tensor<S> com_fuse(const Tensor<S>& f_cm, const Tensor<S>& f_res) {
        check(f_cm->shape == f_res->shape, "com_fuse: shape mismatch");
        return add(mul(f_cm, f_res), f_cm);
    }

    // One decoding stage; history holds f_dec^{i+1}..f_dec^4 (keys > i).
    Tensor<S> decode_stage(int i, const Tensor<S>& f_com, const Tensor<S>& f_cm,
                           const std::map<int, Tensor<S>>& hist) const {
        const auto iu = static_cast<std::size_t>(i - 1);
        const int r = stage_res[iu];
        std::vector<Tensor<S>> cat = {f_com, f_cm};
        if (history == HistoryMode::Dense) {
            for (int j = i + 1; j <= 4; ++j)
                cat.push_back(bilinear2d(hist.at(j), r, r));
        } else if (i < 4) {
            cat.push_back(bilinear2d(hist.at(i + 1), r, r));
        }
        return dec_conv[iu](ca[iu](concat(cat, 1)));
    }

    PredictionPair<S> forward(const std::array<Tensor<S>, 5>& f_cm, const Tensor<S>& f_skip) const {
        std::array<Tensor<S>, 5> p;
        for (int i = 0; i < 5; ++i)
            p[static_cast<std::size_t>(i)] = proj[static_cast<std::size_t>(i)](f_cm[static_cast<std::size_t>(i)]);

        std::map<int, Tensor<S>> dec;
        for (int i = 4; i >= 1; --i) {
            auto f_res = res_fuse(i, p);
            auto f_com = com_fuse(p[static_cast<std::size_t>(i - 1)], f_res);
            dec[i] = decode_stage(i, f_com, p[static_cast<std::size_t>(i - 1)], dec);
        }

        PredictionPair<S> out;
        out.saliency = saliency_head(concat<S>({dec.at(1), f_skip}, 1));
        if (has_edge_head) out.edge = edge_head(dec.at(1));
        for (int i = 1; i <= 4; ++i) out.f_dec[static_cast<std::size_t>(i - 1)] = dec.at(i);
        return out;
    }
};

// The w/o DSD ablation: a plain top-down cascade seeded by the deepest
// projected feature, one 3x3 convolution per stage, no Res/Com/CA and no
// history connections.
template <class S>
struct PlainDecoder {
    int width = 0;
    bool has_edge_head = true;
    std::array<int, 5> stage_res{};
    std::array<Conv2d<S>, 5> proj;
    std::array<Conv2d<S>, 4> conv;
    PredictionHead<S> saliency_head, edge_head;

    PlainDecoder() = default;
    PlainDecoder(Registry<S>& reg, Rng& rng, const std::string& name, const StageGeometry& geom,
                 const RunConfig& cfg, bool edge_head_)
        : width(cfg.decoder_width), has_edge_head(edge_head_), stage_res(geom.resolution) {
        typename Registry<S>::Scope scope(reg, name);
        for (int i = 1; i <= 5; ++i)
            proj[static_cast<std::size_t>(i - 1)] =
                Conv2d<S>(reg, rng, "proj" + std::to_string(i),
                          geom.channels[static_cast<std::size_t>(i - 1)], width, 1, 0);
        for (int i = 1; i <= 4; ++i)
            conv[static_cast<std::size_t>(i - 1)] =
                Conv2d<S>(reg, rng, "conv" + std::to_string(i), 2 * width, width, 3, 1);
        saliency_head = PredictionHead<S>(reg, rng, "saliency_head", 2 * width, width, cfg.input_size);
        if (has_edge_head)
            edge_head = PredictionHead<S>(reg, rng, "edge_head", width, width, cfg.input_size);
    }

    PredictionPair<S> forward(const std::array<Tensor<S>, 5>& f_cm, const Tensor<S>& f_skip) const {
        std::array<Tensor<S>, 5> p;
        for (int i = 0; i < 5; ++i)
            p[static_cast<std::size_t>(i)] = proj[static_cast<std::size_t>(i)](f_cm[static_cast<std::size_t>(i)]);

        PredictionPair<S> out;
        auto d = p[4];
        for (int i = 4; i >= 1; --i) {
            const int r = stage_res[static_cast<std::size_t>(i - 1)];
            d = conv[static_cast<std::size_t>(i - 1)](
                concat<S>({bilinear2d(d, r, r), p[static_cast<std::size_t>(i - 1)]}, 1));
            out.f_dec[static_cast<std::size_t>(i - 1)] = d;
        }
        out.saliency = saliency_head(concat<S>({d, f_skip}, 1));
        if (has_edge_head) out.edge = edge_head(d);
        return out;
    }
};

}  // namespace dtmi
