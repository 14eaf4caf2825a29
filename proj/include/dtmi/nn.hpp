#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dtmi/rng.hpp"
#include "dtmi/tensor.hpp"

// Parameter registry plus the small layer vocabulary shared by the encoder,
// fusion and decoder modules. Parameters are registered in construction
// order, which fixes both the RNG consumption order (reproducible init) and
// the checkpoint serialization order.

namespace dtmi {

enum class Init { Zero, One, TruncNormal02, KaimingConv };

template <class S>
class Registry {
public:
    Tensor<S> param(const std::string& name, Shape shape, Init init, Rng& rng) {
        auto t = make_tensor<S>(shape);
        switch (init) {
            case Init::Zero:
                break;
            case Init::One:
                std::fill(t->v.begin(), t->v.end(), S(1));
                break;
            case Init::TruncNormal02:
                for (auto& v : t->v) v = static_cast<S>(rng.trunc_normal(0.02));
                break;
            case Init::KaimingConv: {
                // fan-in scaled normal for conv stacks, [out, in, kh, kw]
                std::size_t fan_in = 1;
                for (std::size_t d = 1; d < shape.size(); ++d)
                    fan_in *= static_cast<std::size_t>(shape[d]);
                const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
                for (auto& v : t->v) v = static_cast<S>(rng.trunc_normal(sigma));
                break;
            }
        }
        t->requires_grad = true;
        items_.emplace_back(scope_ + name, t);
        return t;
    }

    struct Scope {
        Registry& reg;
        std::size_t saved_len;
        Scope(Registry& r, const std::string& name) : reg(r), saved_len(r.scope_.size()) {
            reg.scope_ += name + ".";
        }
        ~Scope() { reg.scope_.resize(saved_len); }
    };

    const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t->numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : items_) t->zero_grad();
    }

    Tensor<S> find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        return nullptr;
    }

private:
    std::vector<std::pair<std::string, Tensor<S>>> items_;
    std::string scope_;
};

// Collects softmax attention statistics during a forward pass; tests use it
// to verify that every attention row is a probability vector and, when
// capture is on, to inspect the raw weights.
template <class S>
struct AttnProbe {
    long rows = 0;
    double max_rowsum_err = 0.0;
    double min_weight = 0.0;
    bool capture = false;
    std::vector<Tensor<S>> captured;

    void record(const Tensor<S>& probs) {
        const int n = probs->dim(probs->ndim() - 1);
        const std::size_t nrows = probs->numel() / static_cast<std::size_t>(n);
        for (std::size_t r = 0; r < nrows; ++r) {
            double sum = 0.0;
            for (int i = 0; i < n; ++i) {
                const double w = static_cast<double>(probs->v[r * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)]);
                sum += w;
                min_weight = std::min(min_weight, w);
            }
            max_rowsum_err = std::max(max_rowsum_err, std::abs(sum - 1.0));
        }
        rows += static_cast<long>(nrows);
        if (capture) captured.push_back(probs);
    }
};

// Per-forward context: training toggles dropout, rng supplies its draws,
// probe (optional) observes attention weights.
template <class S>
struct Ctx {
    bool training = false;
    Rng* rng = nullptr;
    AttnProbe<S>* probe = nullptr;

    Tensor<S> drop(const Tensor<S>& x, double rate) const {
        if (!training || rate <= 0.0) return x;
        check(rng != nullptr, "Ctx: dropout requires an rng in training mode");
        return dropout(x, rate, *rng);
    }
    void observe(const Tensor<S>& probs) const {
        if (probe) probe->record(probs);
    }
};

template <class S>
struct Linear {
    Tensor<S> w, b;

    Linear() = default;
    Linear(Registry<S>& reg, Rng& rng, const std::string& name, int in, int out, bool bias = true) {
        typename Registry<S>::Scope scope(reg, name);
        w = reg.param("w", {in, out}, Init::TruncNormal02, rng);
        if (bias) b = reg.param("b", {out}, Init::Zero, rng);
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, w, b); }
};

template <class S>
struct LayerNorm {
    Tensor<S> gamma, beta;

    LayerNorm() = default;
    LayerNorm(Registry<S>& reg, Rng& rng, const std::string& name, int dim) {
        typename Registry<S>::Scope scope(reg, name);
        gamma = reg.param("gamma", {dim}, Init::One, rng);
        beta = reg.param("beta", {dim}, Init::Zero, rng);
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }
};

template <class S>
struct Conv2d {
    Tensor<S> w, b;
    int pad = 0;

    Conv2d() = default;
    Conv2d(Registry<S>& reg, Rng& rng, const std::string& name, int in_ch, int out_ch, int kernel,
           int padding) : pad(padding) {
        typename Registry<S>::Scope scope(reg, name);
        w = reg.param("w", {out_ch, in_ch, kernel, kernel}, Init::KaimingConv, rng);
        b = reg.param("b", {out_ch}, Init::Zero, rng);
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, pad); }
};

// Two-layer MLP with GELU, the transformer feed-forward shape.
template <class S>
struct Mlp {
    Linear<S> fc1, fc2;
    double drop_rate = 0.0;

    Mlp() = default;
    Mlp(Registry<S>& reg, Rng& rng, const std::string& name, int dim, int hidden, double drop)
        : drop_rate(drop) {
        typename Registry<S>::Scope scope(reg, name);
        fc1 = Linear<S>(reg, rng, "fc1", dim, hidden);
        fc2 = Linear<S>(reg, rng, "fc2", hidden, dim);
    }

    Tensor<S> operator()(const Tensor<S>& x, const Ctx<S>& ctx) const {
        auto h = gelu(fc1(x));
        h = ctx.drop(h, drop_rate);
        h = fc2(h);
        return ctx.drop(h, drop_rate);
    }
};

// Squeeze-excitation style channel attention: pooled stats through a
// bottleneck MLP produce a per-channel sigmoid scale.
template <class S>
struct ChannelAttention {
    Linear<S> fc1, fc2;

    ChannelAttention() = default;
    ChannelAttention(Registry<S>& reg, Rng& rng, const std::string& name, int channels,
                     int reduction = 4) {
        check(channels >= reduction, "channel_attention: channels must be >= " + std::to_string(reduction));
        typename Registry<S>::Scope scope(reg, name);
        fc1 = Linear<S>(reg, rng, "fc1", channels, channels / reduction);
        fc2 = Linear<S>(reg, rng, "fc2", channels / reduction, channels);
        // the narrow ReLU bottleneck must start active or no gradient reaches
        // fc1 at all
        std::fill(fc1.b->v.begin(), fc1.b->v.end(), S(0.1));
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        const int b = x->dim(0), c = x->dim(1);
        auto pooled = mean_spatial(x);                       // [B,C]
        auto scale = sigmoid(fc2(relu(fc1(pooled))));        // [B,C] in (0,1)
        return mul(x, reshape(scale, {b, c, 1, 1}));
    }
};

}  // namespace dtmi
