#pragma once

#include <cmath>
#include <vector>

#include "dtmi/config.hpp"
#include "dtmi/nn.hpp"

namespace dtmi {

// Stepped decay: lr = base * gamma^floor(epoch / every).
inline double lr_schedule(int epoch, const RunConfig& cfg) {
    return cfg.lr * std::pow(cfg.lr_decay_gamma, epoch / cfg.lr_decay_every_epochs);
}

// Adam with bias correction; optional L2 term and global-norm clipping
// (both off by default, matching the training configuration keys). Moments
// are kept in the parameter scalar type.
template <class S>
class Adam {
public:
    explicit Adam(const Registry<S>& reg, double weight_decay = 0.0, double grad_clip = 0.0,
                  double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : wd_(weight_decay), clip_(grad_clip), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(reg.items().size());
        v_.reserve(reg.items().size());
        for (const auto& [name, t] : reg.items()) {
            m_.emplace_back(t->numel(), S(0));
            v_.emplace_back(t->numel(), S(0));
        }
    }

    void step(Registry<S>& reg, double lr) {
        ++t_;
        const S bc1 = static_cast<S>(1.0 - std::pow(beta1_, t_));
        const S bc2 = static_cast<S>(1.0 - std::pow(beta2_, t_));

        S clip_scale = S(1);
        if (clip_ > 0.0) {
            double sq = 0.0;
            for (const auto& [name, p] : reg.items()) {
                if (p->g.empty()) continue;
                for (S g : p->g) sq += static_cast<double>(g) * static_cast<double>(g);
            }
            const double norm = std::sqrt(sq);
            if (norm > clip_) clip_scale = static_cast<S>(clip_ / norm);
        }

        const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
        const S one_m_b1 = S(1) - b1, one_m_b2 = S(1) - b2;
        const S wd = static_cast<S>(wd_), eps = static_cast<S>(eps_);
        const S step_size = static_cast<S>(lr);
        std::size_t pi = 0;
        for (const auto& [name, p] : reg.items()) {
            S* m = m_[pi].data();
            S* v = v_[pi].data();
            ++pi;
            const bool has_grad = !p->g.empty();
            S* pv = p->v.data();
            const S* pg = has_grad ? p->g.data() : nullptr;
            const std::size_t n = p->v.size();
            for (std::size_t i = 0; i < n; ++i) {
                S g = pg ? pg[i] * clip_scale : S(0);
                if (wd_ > 0.0) g += wd * pv[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                pv[i] -= step_size * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            }
        }
    }

    long step_count() const { return t_; }

private:
    double wd_, clip_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

}  // namespace dtmi
