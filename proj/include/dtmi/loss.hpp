#pragma once

#include "dtmi/config.hpp"
#include "dtmi/model.hpp"
#include "dtmi/tensor.hpp"

namespace dtmi {

// L = L_s + L_e as an exact identity; L_e is zero (and untaped) whenever the
// edge head is absent.
template <class S>
struct LossBreakdown {
    Tensor<S> saliency_loss;
    Tensor<S> edge_loss;  // null under no_edge
    Tensor<S> total;

    double saliency_value() const { return static_cast<double>(saliency_loss->v[0]); }
    double edge_value() const { return edge_loss ? static_cast<double>(edge_loss->v[0]) : 0.0; }
    double total_value() const { return static_cast<double>(total->v[0]); }
};

template <class S>
Tensor<S> bce_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    return bce_mean(pred, target, S(1e-7));
}

template <class S>
LossBreakdown<S> total_loss(const ModelOutput<S>& out, const Tensor<S>& gt, const Tensor<S>& edge) {
    LossBreakdown<S> lb;
    lb.saliency_loss = bce_loss(out.saliency, gt);
    if (out.edge) {
        lb.edge_loss = bce_loss(out.edge, edge);
        lb.total = add(lb.saliency_loss, lb.edge_loss);
    } else {
        lb.total = lb.saliency_loss;
    }
    return lb;
}

}  // namespace dtmi
