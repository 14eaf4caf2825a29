#pragma once

#include <string>
#include <vector>

#include "dtmi/checkpoint.hpp"
#include "dtmi/config.hpp"
#include "dtmi/data.hpp"
#include "dtmi/loss.hpp"
#include "dtmi/model.hpp"

namespace dtmi {

// Non-finite loss during training; carries the offending batch ids.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Whole dataset preprocessed and resident in memory (desk-scale sizes).
struct LoadedDataset {
    std::vector<ModelInput> samples;
};

LoadedDataset load_dataset(const std::string& root, int input_size);

template <class S>
struct BatchTensors {
    Tensor<S> rgb, depth, gt, edge;
    std::vector<std::string> ids;
};

template <class S>
BatchTensors<S> make_batch(const std::vector<ModelInput>& samples,
                           const std::vector<std::size_t>& idx) {
    check(!idx.empty(), "make_batch: empty batch");
    const int b = static_cast<int>(idx.size());
    const int s = samples[idx[0]].rgb_norm.height;
    BatchTensors<S> out;
    out.rgb = make_tensor<S>({b, 3, s, s});
    out.depth = make_tensor<S>({b, 3, s, s});
    out.gt = make_tensor<S>({b, 1, s, s});
    out.edge = make_tensor<S>({b, 1, s, s});
    const std::size_t plane3 = 3 * static_cast<std::size_t>(s) * s;
    const std::size_t plane1 = static_cast<std::size_t>(s) * s;
    for (int bi = 0; bi < b; ++bi) {
        const auto& smp = samples[idx[static_cast<std::size_t>(bi)]];
        out.ids.push_back(smp.id);
        for (std::size_t i = 0; i < plane3; ++i) {
            out.rgb->v[bi * plane3 + i] = static_cast<S>(smp.rgb_norm.data[i]);
            out.depth->v[bi * plane3 + i] = static_cast<S>(smp.depth_norm.data[i]);
        }
        for (std::size_t i = 0; i < plane1; ++i) {
            out.gt->v[bi * plane1 + i] = static_cast<S>(smp.gt.data[i]);
            out.edge->v[bi * plane1 + i] = static_cast<S>(smp.edge.data[i]);
        }
    }
    return out;
}

struct TrainOptions {
    std::string run_dir = "runs/run";
    std::string resume_path;
    bool force_resume = false;
    bool deterministic = false;  // zero wall-time fields in the log
    int max_steps = 0;           // 0 = no cap (used by short harness runs)
};

struct TrainResult {
    int epochs_run = 0;
    long steps_run = 0;
    double final_loss = 0.0;
    double best_val_mae = -1.0;  // negative when no validation set
    std::string last_checkpoint;
    std::string best_checkpoint;
    std::string log_path;
};

// Reads DTMI_DETERMINISTIC (non-empty, not "0") from the environment.
bool deterministic_mode_env();

TrainResult train(const RunConfig& cfg, const TrainOptions& opts);

// Mean |saliency - gt| over a dataset at input resolution, eval mode.
double dataset_mae(const Dtminet<float>& model, const LoadedDataset& data, int batch_size);

// Eval-mode forward for one sample; returns the saliency plane (and edge
// plane when present).
struct PredictedMaps {
    FloatPlanes saliency;
    FloatPlanes edge;  // channels == 0 when absent
};
PredictedMaps predict_sample(const Dtminet<float>& model, const ModelInput& sample);

}  // namespace dtmi
