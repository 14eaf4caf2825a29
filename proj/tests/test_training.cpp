#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "testutil.hpp"

#include "dtmi/checkpoint.hpp"
#include "dtmi/loss.hpp"
#include "dtmi/optim.hpp"
#include "dtmi/synthetic.hpp"
#include "dtmi/trainer.hpp"

using namespace dtmi;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_cfg(const std::string& train_dir) {
    RunConfig cfg;
    cfg.input_size = 32;
    cfg.embed_dim = 8;
    cfg.decoder_width = 8;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.data_train = train_dir;
    return cfg;
}

std::string tmp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::vector<char> read_bytes(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// one synthetic batch as double tensors
BatchTensors<double> tiny_batch(const std::string& dir, int n, int size) {
    generate_synthetic_dataset(n, 3, size, dir);
    LoadedDataset data = load_dataset(dir, size);
    std::vector<std::size_t> idx;
    for (int i = 0; i < n; ++i) idx.push_back(static_cast<std::size_t>(i));
    return make_batch<double>(data.samples, idx);
}

}  // namespace

TEST_CASE("loss identities: sum, no-edge, perfect predictions") {
    auto s = make_tensor<double>({1, 1, 4, 4}, 0.5);
    auto e = make_tensor<double>({1, 1, 4, 4}, 0.5);
    auto gt = make_tensor<double>({1, 1, 4, 4});
    auto edge = make_tensor<double>({1, 1, 4, 4});
    for (std::size_t i = 0; i < 8; ++i) gt->v[i] = 1.0;

    ModelOutput<double> out;
    out.saliency = s;
    out.edge = e;
    auto lb = total_loss(out, gt, edge);
    CHECK(lb.total_value() == lb.saliency_value() + lb.edge_value());  // exact identity
    CHECK(lb.saliency_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(lb.edge_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // L_s = 0.3, L_e = 0.2 -> L = 0.5 (by construction of the sum)
    CHECK(0.3 + 0.2 == doctest::Approx(0.5));

    out.edge = nullptr;  // no_edge: L == L_s exactly
    auto lb2 = total_loss(out, gt, edge);
    CHECK(lb2.edge_loss == nullptr);
    CHECK(lb2.total.get() == lb2.saliency_loss.get());

    // both heads perfect -> loss bounded by the clamp floor
    auto perfect = make_tensor<double>({1, 1, 4, 4});
    perfect->v = gt->v;
    ModelOutput<double> perfect_out;
    perfect_out.saliency = perfect;
    perfect_out.edge = perfect;
    auto lb3 = total_loss(perfect_out, gt, gt);
    CHECK(lb3.total_value() >= 0.0);
    CHECK(lb3.total_value() <= 4e-7);
}

TEST_CASE("lr schedule: stepped decay with floor division") {
    RunConfig cfg;
    cfg.lr = 5e-5;
    cfg.lr_decay_gamma = 0.1;
    cfg.lr_decay_every_epochs = 100;
    CHECK(lr_schedule(0, cfg) == doctest::Approx(5e-5).epsilon(1e-15));
    CHECK(lr_schedule(99, cfg) == doctest::Approx(5e-5).epsilon(1e-15));
    CHECK(lr_schedule(100, cfg) == doctest::Approx(5e-6).epsilon(1e-12));
    CHECK(lr_schedule(250, cfg) == doctest::Approx(5e-7).epsilon(1e-12));
}

TEST_CASE("variant construction: cmi placement presets build the right pairs") {
    RunConfig cfg;
    cfg.input_size = 32;
    cfg.embed_dim = 8;
    cfg.cmi_stages = {5};
    Dtminet<float> a(cfg);
    int cmi_modules = 0, gma_modules = 0;
    std::set<std::string> seen;
    for (const auto& [name, t] : a.registry().items()) {
        if (name.rfind("cmi5.", 0) == 0 && seen.insert("cmi5").second) ++cmi_modules;
        if (name.rfind("gma5.", 0) == 0 && seen.insert("gma5").second) ++gma_modules;
        if (name.rfind("cmi", 0) == 0) CHECK(name.rfind("cmi5.", 0) == 0);
    }
    CHECK(cmi_modules == 1);
    CHECK(gma_modules == 1);

    cfg.cmi_stages = {2, 3, 4, 5};
    Dtminet<float> c(cfg);
    std::set<std::string> prefixes;
    for (const auto& [name, t] : c.registry().items())
        if (name.rfind("cmi", 0) == 0) prefixes.insert(name.substr(0, 4));
    CHECK(prefixes == std::set<std::string>{"cmi2", "cmi3", "cmi4", "cmi5"});

    // cmi_v2 swaps the module type; parameter names show the joint stack
    cfg.cmi_stages = {5};
    cfg.variant = Variant::CmiV2;
    Dtminet<float> v2(cfg);
    bool has_joint = false, has_cra = false;
    for (const auto& [name, t] : v2.registry().items()) {
        if (name.find("cmi5.sa0.") != std::string::npos) has_joint = true;
        if (name.find("cra") != std::string::npos) has_cra = true;
    }
    CHECK(has_joint);
    CHECK_FALSE(has_cra);
}

TEST_CASE("ten adam steps on a fixed batch reduce the loss") {
    const std::string dir = tmp_dir("dtmi_loss_descends");
    auto batch = tiny_batch(dir, 2, 32);

    RunConfig cfg;
    cfg.input_size = 32;
    cfg.embed_dim = 8;
    cfg.decoder_width = 8;
    Dtminet<double> model(cfg);
    Adam<double> adam(model.registry());
    Rng drop_rng(5);

    double first = 0, last = 0;
    for (int step = 0; step < 10; ++step) {
        model.registry().zero_grads();
        Ctx<double> ctx;
        ctx.training = true;
        ctx.rng = &drop_rng;
        auto out = model.forward(batch.rgb, batch.depth, ctx);
        auto lb = total_loss(out, batch.gt, batch.edge);
        if (step == 0) first = lb.total_value();
        last = lb.total_value();
        backward(lb.total);
        adam.step(model.registry(), 1e-3);
    }
    CHECK(last < first);
    fs::remove_all(dir);
}

TEST_CASE("dead-branch detector: every parameter tensor receives gradient") {
    // stage-5 grids need at least 2x2 tokens: attention over a single token
    // has constant weight 1 and legitimately carries no gradient to its
    // query/key projections, so the toy-64 geometry is the smallest generic one
    const std::string dir = tmp_dir("dtmi_deadbranch");
    auto batch = tiny_batch(dir, 2, 64);

    for (Variant variant : {Variant::Full, Variant::NoFdec, Variant::NoDsd, Variant::CmiV2}) {
        RunConfig cfg;
        cfg.input_size = 64;
        cfg.embed_dim = 8;
        cfg.decoder_width = 8;
        cfg.variant = variant;
        Dtminet<double> model(cfg, nullptr);
        model.registry().zero_grads();
        Rng drop_rng(5);
        Ctx<double> ctx;
        ctx.training = true;
        ctx.rng = &drop_rng;
        auto out = model.forward(model.use_rgb() ? batch.rgb : nullptr,
                                 model.use_depth() ? batch.depth : nullptr, ctx);
        auto lb = total_loss(out, batch.gt, batch.edge);
        backward(lb.total);
        for (const auto& [name, t] : model.registry().items()) {
            double mag = 0;
            for (double g : t->g) mag = std::max(mag, std::abs(g));
            INFO("variant ", variant_name(variant), " parameter ", name);
            CHECK(mag > 0.0);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("training determinism: identical logs for identical seeds") {
    const std::string data = tmp_dir("dtmi_det_data");
    generate_synthetic_dataset(4, 11, 32, data);

    RunConfig cfg = tiny_cfg(data);
    cfg.epochs = 2;

    TrainOptions a, b;
    a.run_dir = tmp_dir("dtmi_det_a");
    b.run_dir = tmp_dir("dtmi_det_b");
    a.deterministic = b.deterministic = true;

    const TrainResult ra = train(cfg, a);
    const TrainResult rb = train(cfg, b);
    CHECK(ra.steps_run == rb.steps_run);
    CHECK(read_bytes(ra.log_path) == read_bytes(rb.log_path));
    // checkpoints bitwise identical apart from nothing (same parameters)
    CHECK(read_bytes(ra.last_checkpoint) == read_bytes(rb.last_checkpoint));

    fs::remove_all(data);
    fs::remove_all(a.run_dir);
    fs::remove_all(b.run_dir);
}

TEST_CASE("one sample for one epoch logs exactly one optimization step") {
    const std::string data = tmp_dir("dtmi_onestep_data");
    generate_synthetic_dataset(1, 12, 32, data);
    RunConfig cfg = tiny_cfg(data);
    TrainOptions opts;
    opts.run_dir = tmp_dir("dtmi_onestep_run");
    opts.deterministic = true;
    const TrainResult r = train(cfg, opts);
    CHECK(r.steps_run == 1);

    std::ifstream log(r.log_path);
    int lines = 0;
    std::string line;
    while (std::getline(log, line))
        if (line.find("\"step\"") != std::string::npos) ++lines;
    CHECK(lines == 1);
    fs::remove_all(data);
    fs::remove_all(opts.run_dir);
}

TEST_CASE("checkpoint: bit-exact round trip and forward identity") {
    RunConfig cfg;
    cfg.input_size = 32;
    cfg.embed_dim = 8;
    cfg.decoder_width = 8;
    Dtminet<float> model(cfg);

    const std::string p1 = tmp_dir("dtmi_ckpt") + "/a.ckpt";
    const std::string p2 = fs::path(p1).parent_path().string() + "/b.ckpt";
    Rng rng(3);
    save_checkpoint(snapshot_model(model, 5, rng.serialize()), p1);
    Checkpoint loaded = load_checkpoint(p1);
    CHECK(loaded.epoch == 5);
    save_checkpoint(loaded, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));  // save -> load -> save identical bytes

    // restoring into a differently-seeded model reproduces outputs exactly
    RunConfig cfg2 = cfg;
    cfg2.seed = 999;
    Dtminet<float> other(cfg2, nullptr);
    // architecture keys match (seed is not architecture)
    check_architecture_match(cfg2, loaded.config);
    restore_model(other, loaded);

    auto rgb = make_tensor<float>({1, 3, 32, 32});
    auto depth = make_tensor<float>({1, 3, 32, 32});
    Rng fill(7);
    for (auto& v : rgb->v) v = (float)fill.uniform(-1, 1);
    for (auto& v : depth->v) v = (float)fill.uniform(-1, 1);
    NoGradGuard ng;
    Ctx<float> ctx;
    auto out_a = model.forward(rgb, depth, ctx);
    auto out_b = other.forward(rgb, depth, ctx);
    for (std::size_t i = 0; i < out_a.saliency->v.size(); ++i)
        CHECK(out_a.saliency->v[i] == out_b.saliency->v[i]);

    // architecture mismatch is rejected and names the key
    RunConfig bigger = cfg;
    bigger.input_size = 64;
    CHECK_THROWS_WITH_AS(check_architecture_match(bigger, loaded.config),
                         doctest::Contains("input_size"), CheckpointError);
    fs::remove_all(fs::path(p1).parent_path());
}

TEST_CASE("resume: remaining epochs only, config mismatch rejected") {
    const std::string data = tmp_dir("dtmi_resume_data");
    generate_synthetic_dataset(2, 13, 32, data);
    RunConfig cfg = tiny_cfg(data);
    cfg.epochs = 2;

    TrainOptions first;
    first.run_dir = tmp_dir("dtmi_resume_a");
    first.deterministic = true;
    const TrainResult r1 = train(cfg, first);
    CHECK(r1.epochs_run == 2);
    CHECK(r1.steps_run == 2);  // 2 samples / batch 2 = 1 step per epoch

    // resume from epoch 2 of 5: exactly 3 more epochs
    RunConfig longer = cfg;
    longer.epochs = 5;
    TrainOptions second;
    second.run_dir = tmp_dir("dtmi_resume_b");
    second.resume_path = r1.last_checkpoint;
    second.deterministic = true;
    const TrainResult r2 = train(longer, second);
    CHECK(r2.steps_run == 3);

    // architecture mismatch on resume
    RunConfig different = longer;
    different.input_size = 64;
    different.data_train = data;
    TrainOptions third;
    third.run_dir = tmp_dir("dtmi_resume_c");
    third.resume_path = r1.last_checkpoint;
    CHECK_THROWS_AS(train(different, third), CheckpointError);

    fs::remove_all(data);
    fs::remove_all(first.run_dir);
    fs::remove_all(second.run_dir);
    fs::remove_all(third.run_dir);
}

TEST_CASE("non-finite loss aborts with the offending batch") {
    const std::string data = tmp_dir("dtmi_nan_data");
    generate_synthetic_dataset(2, 14, 32, data);
    RunConfig cfg = tiny_cfg(data);

    // poison the last head convolution through a checkpoint and resume from
    // it (upstream NaN would be masked by the head's ReLU)
    Dtminet<float> model(cfg);
    auto ckpt = snapshot_model(model, 0, Rng(0).serialize());
    bool poisoned = false;
    for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
        if (ckpt.names[i] == "decoder.saliency_head.conv2.w") {
            ckpt.values[i][0] = std::numeric_limits<float>::quiet_NaN();
            poisoned = true;
        }
    }
    REQUIRE(poisoned);
    const std::string dir = tmp_dir("dtmi_nan_run");
    save_checkpoint(ckpt, dir + "/poisoned.ckpt");

    TrainOptions opts;
    opts.run_dir = dir;
    opts.resume_path = dir + "/poisoned.ckpt";
    CHECK_THROWS_WITH_AS(train(cfg, opts), doctest::Contains("scene_"), NumericalError);
    fs::remove_all(data);
    fs::remove_all(dir);
}

TEST_CASE("adam applies weight decay and grad clipping when configured") {
    Rng rng(9);
    Registry<double> reg;
    auto p = reg.param("p", {4}, Init::TruncNormal02, rng);
    p->ensure_grad();
    for (auto& g : p->g) g = 10.0;

    Adam<double> clipped(reg, 0.0, 1.0);  // clip global norm to 1
    const auto before = p->v;
    clipped.step(reg, 0.1);
    // update magnitude bounded by lr (adam normalizes), params changed
    for (std::size_t i = 0; i < 4; ++i) CHECK(p->v[i] != before[i]);
}
