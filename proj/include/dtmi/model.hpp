#pragma once

#include <iostream>
#include <map>
#include <memory>
#include <optional>

#include "dtmi/backbone.hpp"
#include "dtmi/cmi.hpp"
#include "dtmi/config.hpp"
#include "dtmi/decoder.hpp"
#include "dtmi/fusion.hpp"

// Full network assembly: dual (or single) encoders, per-stage AFE, the
// CMI+GMA pairs at the configured stages, early fusion elsewhere, the skip
// pathway, and the configured decoder. All ablation variants are wired here
// so that only the parameters a variant can reach are ever constructed.

namespace dtmi {

template <class S>
struct ModelOutput {
    Tensor<S> saliency;                 // [B,1,S,S]
    Tensor<S> edge;                     // null under no_edge
    EncoderPyramid<S> pyramid_rgb{};    // empty tensors under depth_only
    EncoderPyramid<S> pyramid_depth{};  // empty tensors under rgb_only
    std::array<Tensor<S>, 5> f_cm{};
    Tensor<S> f_skip;
    std::array<Tensor<S>, 4> f_dec{};
    std::array<Tensor<S>, 5> gates{};   // per-stage gate [B,1] where GMA ran
};

template <class S>
class Dtminet {
public:
    explicit Dtminet(const RunConfig& cfg, std::ostream* warn_stream = &std::cerr)
        : cfg_(validate_config(cfg)), geom_(derive_stage_geometry(cfg_)), rng_(cfg.seed) {
        const bool dual = use_rgb() && use_depth();
        cmi_active_ = dual && !cfg_.cmi_stages.empty();
        if (!dual && !cfg_.cmi_stages.empty() && warn_stream) {
            (*warn_stream) << "warning: variant " << variant_name(cfg_.variant)
                           << " has a single encoder; CMI stages are disabled\n";
        }

        if (use_rgb()) rgb_enc_.emplace(reg_, rng_, "rgb_encoder", cfg_, geom_);
        if (use_depth()) depth_enc_.emplace(reg_, rng_, "depth_encoder", cfg_, geom_);

        for (int s = 1; s <= 5; ++s) {
            const auto su = static_cast<std::size_t>(s - 1);
            const int ch = geom_.channels[su];
            if (use_rgb()) afe_rgb_[su] = Afe<S>(reg_, rng_, "afe_rgb" + std::to_string(s), ch);
            if (use_depth()) afe_depth_[su] = Afe<S>(reg_, rng_, "afe_depth" + std::to_string(s), ch);
        }

        if (cmi_active_) {
            for (int s : cfg_.cmi_stages) {
                const auto su = static_cast<std::size_t>(s - 1);
                const int ch = geom_.channels[su];
                const int grid = geom_.resolution[su];
                const int heads = cfg_.num_heads[static_cast<std::size_t>(s - 2)];
                if (cfg_.variant == Variant::CmiV2) {
                    cmi_v2_[su] = std::make_unique<CmiV2Module<S>>(
                        reg_, rng_, "cmi" + std::to_string(s), grid, ch, heads, cfg_.cmi_blocks,
                        cfg_.cmi_dropout);
                } else {
                    cmi_[su] = std::make_unique<CmiModule<S>>(
                        reg_, rng_, "cmi" + std::to_string(s), grid, ch, heads, cfg_.cmi_blocks,
                        cfg_.cmi_dropout);
                }
                gma_[su] = std::make_unique<Gma<S>>(reg_, rng_, "gma" + std::to_string(s), ch,
                                                    cfg_.gma_dropout);
            }
        }

        skip_ = SkipConv<S>(reg_, rng_, "skip_conv",
                            {geom_.channels[0], geom_.channels[1], geom_.channels[2]},
                            cfg_.decoder_width, geom_.resolution[0]);

        if (cfg_.variant == Variant::NoDsd) {
            plain_dec_.emplace(reg_, rng_, "decoder", geom_, cfg_, has_edge_head());
        } else {
            const auto mode =
                cfg_.variant == Variant::NoFdec ? HistoryMode::Sequential : HistoryMode::Dense;
            dense_dec_.emplace(reg_, rng_, "decoder", geom_, cfg_, mode, has_edge_head());
        }
    }

    bool use_rgb() const { return cfg_.variant != Variant::DepthOnly; }
    bool use_depth() const { return cfg_.variant != Variant::RgbOnly; }
    bool has_edge_head() const { return cfg_.variant != Variant::NoEdge; }
    bool cmi_active() const { return cmi_active_; }
    const RunConfig& config() const { return cfg_; }
    const StageGeometry& geometry() const { return geom_; }
    Registry<S>& registry() { return reg_; }
    const Registry<S>& registry() const { return reg_; }
    std::size_t param_count() const { return reg_.total_params(); }

    // rgb: [B,3,S,S]; depth: [B,3,S,S] (ignored/may be null in rgb_only and
    // vice versa).
    ModelOutput<S> forward(const Tensor<S>& rgb, const Tensor<S>& depth, const Ctx<S>& ctx) const {
        const bool dual = use_rgb() && use_depth();
        ModelOutput<S> out;

        Tensor<S> x_r, x_d;
        if (use_rgb()) {
            check(rgb != nullptr, "forward: rgb input required for this variant");
            x_r = rgb_enc_->run_embed(rgb);
            out.pyramid_rgb[0] = x_r;
        }
        if (use_depth()) {
            check(depth != nullptr, "forward: depth input required for this variant");
            x_d = depth_enc_->run_embed(depth);
            out.pyramid_depth[0] = x_d;
        }

        auto fuse_stage = [&](int s, const Tensor<S>& fr, const Tensor<S>& fd) {
            const auto su = static_cast<std::size_t>(s - 1);
            if (dual) {
                auto ar = afe_rgb_[su](fr);
                auto ad = afe_depth_[su](fd);
                if (cmi_active_ && cfg_.has_cmi_stage(s)) {
                    auto [i_r, i_d] = cmi_v2_[su] ? cmi_v2_[su]->forward(ar, ad, ctx)
                                                  : cmi_[su]->forward(ar, ad, ctx);
                    auto g = gma_[su]->gate(i_r, i_d, ctx);
                    out.gates[su] = g;
                    out.f_cm[su] = Gma<S>::fuse(i_r, i_d, g);
                    return std::pair<Tensor<S>, Tensor<S>>{i_r, i_d};
                }
                out.f_cm[su] = early_fuse(ar, ad);
                return std::pair<Tensor<S>, Tensor<S>>{nullptr, nullptr};
            }
            if (use_rgb()) out.f_cm[su] = afe_rgb_[su](fr);
            else out.f_cm[su] = afe_depth_[su](fd);
            return std::pair<Tensor<S>, Tensor<S>>{nullptr, nullptr};
        };

        fuse_stage(1, x_r, x_d);
        for (int s = 2; s <= 5; ++s) {
            const auto su = static_cast<std::size_t>(s - 1);
            if (use_rgb()) {
                x_r = rgb_enc_->run_stage(s, x_r, ctx);
                out.pyramid_rgb[su] = x_r;
            }
            if (use_depth()) {
                x_d = depth_enc_->run_stage(s, x_d, ctx);
                out.pyramid_depth[su] = x_d;
            }
            auto [i_r, i_d] = fuse_stage(s, x_r, x_d);
            // interaction stages return the interacted features to both
            // branches for the following encoder stage
            if (i_r) x_r = i_r;
            if (i_d) x_d = i_d;
        }

        const auto& skip_pyr = use_rgb() ? out.pyramid_rgb : out.pyramid_depth;
        out.f_skip = skip_(skip_pyr[0], skip_pyr[1], skip_pyr[2]);

        auto pred = plain_dec_ ? plain_dec_->forward(out.f_cm, out.f_skip)
                               : dense_dec_->forward(out.f_cm, out.f_skip);
        out.saliency = pred.saliency;
        out.edge = pred.edge;
        out.f_dec = pred.f_dec;
        return out;
    }

    // Accessors for tests.
    const SwinEncoder<S>& rgb_encoder() const { return *rgb_enc_; }
    const SwinEncoder<S>& depth_encoder() const { return *depth_enc_; }
    const DenseSaliencyDecoder<S>& dense_decoder() const { return *dense_dec_; }
    const Afe<S>& afe_rgb(int stage) const { return afe_rgb_[static_cast<std::size_t>(stage - 1)]; }
    const Afe<S>& afe_depth(int stage) const { return afe_depth_[static_cast<std::size_t>(stage - 1)]; }

private:
    RunConfig cfg_;
    StageGeometry geom_;
    Rng rng_;
    Registry<S> reg_;
    bool cmi_active_ = false;

    std::optional<SwinEncoder<S>> rgb_enc_, depth_enc_;
    std::array<Afe<S>, 5> afe_rgb_{}, afe_depth_{};
    std::array<std::unique_ptr<CmiModule<S>>, 5> cmi_{};
    std::array<std::unique_ptr<CmiV2Module<S>>, 5> cmi_v2_{};
    std::array<std::unique_ptr<Gma<S>>, 5> gma_{};
    SkipConv<S> skip_;
    std::optional<DenseSaliencyDecoder<S>> dense_dec_;
    std::optional<PlainDecoder<S>> plain_dec_;
};

}  // namespace dtmi
