#include "dtmi/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dtmi/optim.hpp"

namespace dtmi {

namespace fs = std::filesystem;

LoadedDataset load_dataset(const std::string& root, int input_size) {
    const auto index = scan_dataset(root);
    LoadedDataset out;
    out.samples.reserve(index.ids.size());
    for (std::size_t i = 0; i < index.ids.size(); ++i)
        out.samples.push_back(preprocess(load_triplet_by_id(index, i), input_size));
    return out;
}

bool deterministic_mode_env() {
    const char* v = std::getenv("DTMI_DETERMINISTIC");
    return v != nullptr && v[0] != '\0' && !(v[0] == '0' && v[1] == '\0');
}

PredictedMaps predict_sample(const Dtminet<float>& model, const ModelInput& sample) {
    NoGradGuard no_grad;
    auto batch = make_batch<float>({sample}, {0});
    Ctx<float> ctx;  // eval mode
    auto out = model.forward(model.use_rgb() ? batch.rgb : nullptr,
                             model.use_depth() ? batch.depth : nullptr, ctx);
    PredictedMaps maps;
    const int s = out.saliency->dim(2);
    maps.saliency.channels = 1;
    maps.saliency.height = s;
    maps.saliency.width = s;
    maps.saliency.data.assign(out.saliency->v.begin(), out.saliency->v.end());
    if (out.edge) {
        maps.edge.channels = 1;
        maps.edge.height = s;
        maps.edge.width = s;
        maps.edge.data.assign(out.edge->v.begin(), out.edge->v.end());
    }
    return maps;
}

double dataset_mae(const Dtminet<float>& model, const LoadedDataset& data, int batch_size) {
    NoGradGuard no_grad;
    check(!data.samples.empty(), "dataset_mae: empty dataset");
    Ctx<float> ctx;
    double acc = 0.0;
    std::size_t i = 0;
    while (i < data.samples.size()) {
        std::vector<std::size_t> idx;
        for (int b = 0; b < batch_size && i < data.samples.size(); ++b, ++i) idx.push_back(i);
        auto batch = make_batch<float>(data.samples, idx);
        auto out = model.forward(model.use_rgb() ? batch.rgb : nullptr,
                                 model.use_depth() ? batch.depth : nullptr, ctx);
        const auto& s = out.saliency->v;
        const auto& g = batch.gt->v;
        double batch_acc = 0.0;
        for (std::size_t k = 0; k < s.size(); ++k)
            batch_acc += std::abs(static_cast<double>(s[k]) - static_cast<double>(g[k]));
        acc += batch_acc / static_cast<double>(s.size() / idx.size());
    }
    return acc / static_cast<double>(data.samples.size());
}

TrainResult train(const RunConfig& cfg_in, const TrainOptions& opts) {
    const RunConfig& cfg = validate_config(cfg_in);
    if (cfg.data_train.empty()) throw DataError("training requires data_train in the config");
    LoadedDataset train_set = load_dataset(cfg.data_train, cfg.input_size);
    LoadedDataset val_set;
    if (!cfg.data_val.empty()) val_set = load_dataset(cfg.data_val, cfg.input_size);

    Dtminet<float> model(cfg);
    Rng loop_rng(cfg.seed ^ 0x517cc1b727220a95ull);
    int start_epoch = 0;

    if (!opts.resume_path.empty()) {
        const Checkpoint ckpt = load_checkpoint(opts.resume_path);
        if (!opts.force_resume) check_architecture_match(cfg, ckpt.config);
        restore_model(model, ckpt);
        loop_rng.deserialize(ckpt.rng_state);
        start_epoch = ckpt.epoch;
    }

    fs::create_directories(opts.run_dir);
    const std::string log_path = (fs::path(opts.run_dir) / "train_log.jsonl").string();
    std::ofstream log(log_path, opts.resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot write training log: " + log_path);

    Adam<float> adam(model.registry(), cfg.weight_decay, cfg.grad_clip);

    TrainResult result;
    result.log_path = log_path;
    result.last_checkpoint = (fs::path(opts.run_dir) / "last.ckpt").string();
    result.best_checkpoint = (fs::path(opts.run_dir) / "best.ckpt").string();

    long global_step = 0;
    double best_val = -1.0;
    bool stop = false;

    for (int epoch = start_epoch; epoch < cfg.epochs && !stop; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);

        std::vector<std::size_t> order(train_set.samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        // Fisher-Yates with the loop rng
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(loop_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        std::size_t cursor = 0;
        while (cursor < order.size() && !stop) {
            std::vector<std::size_t> idx;
            for (int b = 0; b < cfg.batch_size && cursor < order.size(); ++b)
                idx.push_back(order[cursor++]);
            auto batch = make_batch<float>(train_set.samples, idx);

            const auto t0 = std::chrono::steady_clock::now();
            model.registry().zero_grads();
            Ctx<float> ctx;
            ctx.training = true;
            ctx.rng = &loop_rng;
            auto out = model.forward(model.use_rgb() ? batch.rgb : nullptr,
                                     model.use_depth() ? batch.depth : nullptr, ctx);
            auto lb = total_loss(out, batch.gt, batch.edge);
            if (!std::isfinite(lb.total_value())) {
                std::string ids;
                for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
                throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                                     " step " + std::to_string(global_step) + " on batch [" + ids +
                                     "]");
            }
            backward(lb.total);
            adam.step(model.registry(), lr);
            const auto t1 = std::chrono::steady_clock::now();
            const double seconds =
                opts.deterministic ? 0.0
                                   : std::chrono::duration<double>(t1 - t0).count();

            nlohmann::json rec;
            rec["epoch"] = epoch;
            rec["step"] = global_step;
            rec["L_s"] = lb.saliency_value();
            rec["L_e"] = lb.edge_value();
            rec["L"] = lb.total_value();
            rec["lr"] = lr;
            rec["seconds"] = seconds;
            log << rec.dump() << "\n";

            result.final_loss = lb.total_value();
            ++global_step;
            ++result.steps_run;
            if (opts.max_steps > 0 && result.steps_run >= opts.max_steps) stop = true;
        }
        result.epochs_run = epoch + 1;

        if (!val_set.samples.empty()) {
            const double val_mae = dataset_mae(model, val_set, cfg.batch_size);
            nlohmann::json rec;
            rec["epoch"] = epoch;
            rec["val_mae"] = val_mae;
            log << rec.dump() << "\n";
            if (best_val < 0.0 || val_mae < best_val) {
                best_val = val_mae;
                save_checkpoint(snapshot_model(model, epoch + 1, loop_rng.serialize()),
                                result.best_checkpoint);
            }
            result.best_val_mae = best_val;
        }
        save_checkpoint(snapshot_model(model, epoch + 1, loop_rng.serialize()),
                        result.last_checkpoint);
    }
    log.flush();
    return result;
}

}  // namespace dtmi
