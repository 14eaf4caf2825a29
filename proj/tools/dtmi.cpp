// Command-line entry point: train, predict, eval, ablate, gen-data, metrics.
// Exit codes: 0 success, 1 usage/config/data error, 2 numerical failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtmi/checkpoint.hpp"
#include "dtmi/config.hpp"
#include "dtmi/data.hpp"
#include "dtmi/metrics.hpp"
#include "dtmi/model.hpp"
#include "dtmi/synthetic.hpp"
#include "dtmi/trainer.hpp"

namespace fs = std::filesystem;
using namespace dtmi;

namespace {

struct VariantPreset {
    Variant variant;
    std::vector<int> cmi_stages;
    bool override_stages;
};

// Ablation grid rows. cmi_a/b/c select CMI placements on the full model.
const std::map<std::string, VariantPreset>& variant_presets() {
    static const std::map<std::string, VariantPreset> presets = {
        {"full", {Variant::Full, {}, false}},
        {"no_edge", {Variant::NoEdge, {}, false}},
        {"rgb_only", {Variant::RgbOnly, {}, false}},
        {"depth_only", {Variant::DepthOnly, {}, false}},
        {"no_fdec", {Variant::NoFdec, {}, false}},
        {"no_dsd", {Variant::NoDsd, {}, false}},
        {"cmi_v2", {Variant::CmiV2, {}, false}},
        {"cmi_a", {Variant::Full, {5}, true}},
        {"cmi_b", {Variant::Full, {3, 4, 5}, true}},
        {"cmi_c", {Variant::Full, {2, 3, 4, 5}, true}},
    };
    return presets;
}

Dtminet<float> model_from_checkpoint(const Checkpoint& ckpt) {
    Dtminet<float> model(ckpt.config);
    restore_model(model, ckpt);
    return model;
}

ModelInput input_from_images(const std::string& rgb_path, const std::string& depth_path,
                             bool need_depth, int input_size) {
    const ImageU8 rgb_img = read_image(rgb_path);
    if (rgb_img.channels != 3)
        throw DataError(rgb_path + ": expected a 3-channel image, got " +
                        std::to_string(rgb_img.channels));
    SampleTriplet t;
    t.rgb = planes_from_image(rgb_img);
    if (need_depth) {
        if (depth_path.empty()) throw DataError("this checkpoint requires --depth");
        const ImageU8 depth_img = read_image(depth_path);
        if (depth_img.channels != 1)
            throw DataError(depth_path + ": expected a single-channel image");
        if (depth_img.width != rgb_img.width || depth_img.height != rgb_img.height)
            throw DataError("dimension mismatch between " + rgb_path + " and " + depth_path);
        t.depth = planes_from_image(depth_img);
    } else {
        t.depth.channels = 1;
        t.depth.height = rgb_img.height;
        t.depth.width = rgb_img.width;
        t.depth.data.assign(static_cast<std::size_t>(rgb_img.height) * rgb_img.width, 0.5f);
    }
    t.gt.channels = 1;
    t.gt.height = rgb_img.height;
    t.gt.width = rgb_img.width;
    t.gt.data.assign(t.depth.data.size(), 0.0f);
    t.edge = t.gt;
    t.id = fs::path(rgb_path).stem().string();
    return preprocess(t, input_size);
}

void write_predictions(const Dtminet<float>& model, const LoadedDataset& data,
                       const std::string& pred_dir) {
    fs::create_directories(pred_dir);
    for (const auto& sample : data.samples) {
        const auto maps = predict_sample(model, sample);
        write_png((fs::path(pred_dir) / (sample.id + ".png")).string(),
                  encode_prediction(maps.saliency));
    }
}

int cmd_train(const std::string& config_path, const std::string& resume,
              const std::string& name, const std::string& runs_dir, bool force_resume) {
    const RunConfig cfg = load_config(config_path);
    TrainOptions opts;
    opts.run_dir = (fs::path(runs_dir) / name).string();
    opts.resume_path = resume;
    opts.force_resume = force_resume;
    opts.deterministic = deterministic_mode_env();
    const TrainResult result = train(cfg, opts);
    std::cout << "trained " << result.epochs_run << " epochs (" << result.steps_run
              << " steps), final loss " << result.final_loss << "\n"
              << "checkpoint: " << result.last_checkpoint << "\n"
              << "log: " << result.log_path << "\n";
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& rgb_path,
                const std::string& depth_path, const std::string& out_path, int benchmark) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    Dtminet<float> model = model_from_checkpoint(ckpt);
    const ModelInput input =
        input_from_images(rgb_path, depth_path, model.use_depth(), model.config().input_size);

    const auto maps = predict_sample(model, input);
    write_png(out_path, encode_prediction(maps.saliency));
    if (maps.edge.channels > 0) write_png(out_path + ".edge.png", encode_prediction(maps.edge));

    if (benchmark > 0) {
        predict_sample(model, input);  // warm-up
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < benchmark; ++i) predict_sample(model, input);
        const auto t1 = std::chrono::steady_clock::now();
        const double mean_s = std::chrono::duration<double>(t1 - t0).count() / benchmark;
        std::cout << "mean_inference_s=" << mean_s << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_dir) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    Dtminet<float> model = model_from_checkpoint(ckpt);
    const LoadedDataset data = load_dataset(data_dir, model.config().input_size);

    const std::string pred_dir = (fs::path(out_dir) / "pred").string();
    write_predictions(model, data, pred_dir);

    const EvalReport report = evaluate_dataset(pred_dir, (fs::path(data_dir) / "gt").string());
    fs::create_directories(out_dir);
    write_report_json(report, data_dir, (fs::path(out_dir) / "report.json").string(),
                      (fs::path(out_dir) / "pr_curve.csv").string());
    std::cout << "mae=" << report.mae << " f_max=" << report.f_max
              << " s_measure=" << report.s_measure << " n=" << report.n_images << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& variants_csv,
               const std::string& data_dir, const std::string& out_dir, int max_steps) {
    const RunConfig base = load_config(config_path);

    std::vector<std::string> names;
    std::string token;
    for (char c : variants_csv + ",") {
        if (c == ',') {
            if (!token.empty()) names.push_back(token);
            token.clear();
        } else {
            token += c;
        }
    }
    // validate the whole list before any training starts
    for (const auto& n : names)
        if (!variant_presets().count(n))
            throw ConfigError("unknown ablation variant \"" + n + "\"");
    if (names.empty()) throw ConfigError("no variants given");

    nlohmann::json table;
    for (const auto& n : names) {
        const auto& preset = variant_presets().at(n);
        RunConfig cfg = base;
        cfg.variant = preset.variant;
        if (preset.override_stages) cfg.cmi_stages = preset.cmi_stages;

        TrainOptions opts;
        opts.run_dir = (fs::path(out_dir) / n).string();
        opts.deterministic = deterministic_mode_env();
        opts.max_steps = max_steps;
        std::cout << "=== variant " << n << " ===\n";
        const TrainResult tr = train(cfg, opts);

        const Checkpoint ckpt = load_checkpoint(tr.last_checkpoint);
        Dtminet<float> model = model_from_checkpoint(ckpt);
        const LoadedDataset data = load_dataset(data_dir, cfg.input_size);
        const std::string pred_dir = (fs::path(out_dir) / n / "pred").string();
        write_predictions(model, data, pred_dir);
        const EvalReport rep = evaluate_dataset(pred_dir, (fs::path(data_dir) / "gt").string());

        table[n] = {{"mae", rep.mae},
                    {"f_max", rep.f_max},
                    {"s_measure", rep.s_measure},
                    {"params", model.param_count()},
                    {"final_loss", tr.final_loss}};
        std::cout << n << ": mae=" << rep.mae << " f_max=" << rep.f_max
                  << " s_measure=" << rep.s_measure << " params=" << model.param_count() << "\n";
    }
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "ablation.json");
    if (!out) throw DataError("cannot write ablation table under " + out_dir);
    out << table.dump(2) << "\n";
    return 0;
}

int cmd_gen_data(const std::string& out_dir, int count, std::uint64_t seed, int size) {
    const auto ids = generate_synthetic_dataset(count, seed, size, out_dir);
    std::cout << "wrote " << ids.size() << " scenes under " << out_dir << "\n";
    return 0;
}

int cmd_metrics(const std::string& pred_dir, const std::string& gt_dir,
                const std::string& out_file) {
    const EvalReport report = evaluate_dataset(pred_dir, gt_dir);
    const std::string csv = out_file + ".pr.csv";
    write_report_json(report, pred_dir, out_file, csv);
    std::cout << "mae=" << report.mae << " f_max=" << report.f_max
              << " s_measure=" << report.s_measure << " n=" << report.n_images << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DTMINet RGB-D salient object detection"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
    std::string config_path, resume, run_name = "run", runs_dir = "runs";
    bool force_resume = false;
    train_cmd->add_option("--config", config_path, "config JSON path")->required();
    train_cmd->add_option("--resume", resume, "checkpoint to resume from");
    train_cmd->add_option("--name", run_name, "run id under the runs directory");
    train_cmd->add_option("--runs-dir", runs_dir, "runs root directory");
    train_cmd->add_flag("--force-resume", force_resume, "skip architecture match check");

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "predict a saliency map for one image");
    std::string ckpt_path, rgb_path, depth_path, out_path;
    int benchmark = 0;
    predict_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    predict_cmd->add_option("--rgb", rgb_path, "RGB image")->required();
    predict_cmd->add_option("--depth", depth_path, "depth image (optional for rgb_only)");
    predict_cmd->add_option("--out", out_path, "output saliency PNG")->required();
    predict_cmd->add_option("--benchmark", benchmark, "run N timed forward passes");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "predict a dataset and write metric reports");
    std::string eval_ckpt, eval_data, eval_out;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--data", eval_data, "dataset root (rgb/depth/gt)")->required();
    eval_cmd->add_option("--out", eval_out, "output directory")->required();

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate a variant grid");
    std::string ab_config, ab_variants, ab_data, ab_out;
    int ab_steps = 0;
    ablate_cmd->add_option("--config", ab_config, "base config JSON")->required();
    ablate_cmd->add_option("--variants", ab_variants, "comma-separated variant names")->required();
    ablate_cmd->add_option("--data", ab_data, "evaluation dataset root")->required();
    ablate_cmd->add_option("--out", ab_out, "output directory")->required();
    ablate_cmd->add_option("--steps", ab_steps, "cap optimization steps per variant (0 = full)");

    // gen-data
    auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic RGB-D dataset");
    std::string gen_out;
    int gen_count = 16, gen_size = 64;
    std::uint64_t gen_seed = 7;
    gen_cmd->add_option("--out", gen_out, "output directory")->required();
    gen_cmd->add_option("--count", gen_count, "number of scenes");
    gen_cmd->add_option("--seed", gen_seed, "generator seed");
    gen_cmd->add_option("--size", gen_size, "image side length");

    // metrics
    auto* metrics_cmd = app.add_subcommand("metrics", "evaluate predictions against GT maps");
    std::string m_pred, m_gt, m_out;
    metrics_cmd->add_option("--pred", m_pred, "prediction directory")->required();
    metrics_cmd->add_option("--gt", m_gt, "ground-truth directory")->required();
    metrics_cmd->add_option("--out", m_out, "output report JSON path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) return cmd_train(config_path, resume, run_name, runs_dir, force_resume);
        if (*predict_cmd) return cmd_predict(ckpt_path, rgb_path, depth_path, out_path, benchmark);
        if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, eval_out);
        if (*ablate_cmd) return cmd_ablate(ab_config, ab_variants, ab_data, ab_out, ab_steps);
        if (*gen_cmd) return cmd_gen_data(gen_out, gen_count, gen_seed, gen_size);
        if (*metrics_cmd) return cmd_metrics(m_pred, m_gt, m_out);
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
