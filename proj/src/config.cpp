#include "dtmi/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace dtmi {

using nlohmann::json;

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoEdge: return "no_edge";
        case Variant::RgbOnly: return "rgb_only";
        case Variant::DepthOnly: return "depth_only";
        case Variant::NoFdec: return "no_fdec";
        case Variant::NoDsd: return "no_dsd";
        case Variant::CmiV2: return "cmi_v2";
    }
    return "?";
}

Variant variant_from_string(const std::string& s) {
    static const std::pair<const char*, Variant> table[] = {
        {"full", Variant::Full},       {"no_edge", Variant::NoEdge},
        {"rgb_only", Variant::RgbOnly}, {"depth_only", Variant::DepthOnly},
        {"no_fdec", Variant::NoFdec},   {"no_dsd", Variant::NoDsd},
        {"cmi_v2", Variant::CmiV2},
    };
    for (const auto& [name, v] : table)
        if (s == name) return v;
    throw ConfigError("config key \"variant\": unknown value \"" + s +
                      "\" (expected one of full, no_edge, rgb_only, depth_only, no_fdec, no_dsd, cmi_v2)");
}

namespace {

int get_int(const json& j, const std::string& key, int fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number_integer())
        throw ConfigError("config key \"" + key + "\": expected an integer");
    return v.get<int>();
}

double get_double(const json& j, const std::string& key, double fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number())
        throw ConfigError("config key \"" + key + "\": expected a number");
    return v.get<double>();
}

std::uint64_t get_u64(const json& j, const std::string& key, std::uint64_t fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
        throw ConfigError("config key \"" + key + "\": expected a non-negative integer");
    return v.get<std::uint64_t>();
}

std::string get_string(const json& j, const std::string& key, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_string())
        throw ConfigError("config key \"" + key + "\": expected a string");
    return v.get<std::string>();
}

std::vector<int> get_int_list(const json& j, const std::string& key, std::vector<int> fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_array())
        throw ConfigError("config key \"" + key + "\": expected an array of integers");
    std::vector<int> out;
    for (const auto& e : v) {
        if (!e.is_number_integer())
            throw ConfigError("config key \"" + key + "\": expected an array of integers");
        out.push_back(e.get<int>());
    }
    return out;
}

const char* const known_keys[] = {
    "input_size",  "patch_size",   "embed_dim",      "depths",
    "num_heads",   "window_size",  "cmi_stages",     "cmi_blocks",
    "decoder_width", "variant",    "lr",             "lr_decay_gamma",
    "lr_decay_every_epochs", "batch_size", "epochs", "seed",
    "data_train",  "data_val",     "data_test",      "backbone_dropout",
    "cmi_dropout", "gma_dropout",  "weight_decay",   "grad_clip",
};

}  // namespace

RunConfig parse_config_json(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(origin + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(origin + ": top-level value must be an object");

    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* k : known_keys) known = known || key == k;
        if (!known) throw ConfigError(origin + ": unknown config key \"" + key + "\"");
    }

    RunConfig d;  // documented defaults
    RunConfig cfg;
    cfg.input_size = get_int(j, "input_size", d.input_size);
    cfg.patch_size = get_int(j, "patch_size", d.patch_size);
    cfg.embed_dim = get_int(j, "embed_dim", d.embed_dim);
    cfg.depths = get_int_list(j, "depths", d.depths);
    cfg.num_heads = get_int_list(j, "num_heads", d.num_heads);
    cfg.window_size = get_int(j, "window_size", d.window_size);
    cfg.cmi_stages = get_int_list(j, "cmi_stages", d.cmi_stages);
    cfg.cmi_blocks = get_int(j, "cmi_blocks", d.cmi_blocks);
    cfg.decoder_width = get_int(j, "decoder_width", d.decoder_width);
    cfg.variant = variant_from_string(get_string(j, "variant", variant_name(d.variant)));
    cfg.lr = get_double(j, "lr", d.lr);
    cfg.lr_decay_gamma = get_double(j, "lr_decay_gamma", d.lr_decay_gamma);
    cfg.lr_decay_every_epochs = get_int(j, "lr_decay_every_epochs", d.lr_decay_every_epochs);
    cfg.batch_size = get_int(j, "batch_size", d.batch_size);
    cfg.epochs = get_int(j, "epochs", d.epochs);
    cfg.seed = get_u64(j, "seed", d.seed);
    cfg.data_train = get_string(j, "data_train", d.data_train);
    cfg.data_val = get_string(j, "data_val", d.data_val);
    cfg.data_test = get_string(j, "data_test", d.data_test);
    cfg.backbone_dropout = get_double(j, "backbone_dropout", d.backbone_dropout);
    cfg.cmi_dropout = get_double(j, "cmi_dropout", d.cmi_dropout);
    cfg.gma_dropout = get_double(j, "gma_dropout", d.gma_dropout);
    cfg.weight_decay = get_double(j, "weight_decay", d.weight_decay);
    cfg.grad_clip = get_double(j, "grad_clip", d.grad_clip);

    // normalize cmi_stages to sorted unique
    std::sort(cfg.cmi_stages.begin(), cfg.cmi_stages.end());
    cfg.cmi_stages.erase(std::unique(cfg.cmi_stages.begin(), cfg.cmi_stages.end()),
                         cfg.cmi_stages.end());
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_json(ss.str(), path);
}

std::string config_to_json(const RunConfig& cfg) {
    json j;
    j["input_size"] = cfg.input_size;
    j["patch_size"] = cfg.patch_size;
    j["embed_dim"] = cfg.embed_dim;
    j["depths"] = cfg.depths;
    j["num_heads"] = cfg.num_heads;
    j["window_size"] = cfg.window_size;
    j["cmi_stages"] = cfg.cmi_stages;
    j["cmi_blocks"] = cfg.cmi_blocks;
    j["decoder_width"] = cfg.decoder_width;
    j["variant"] = variant_name(cfg.variant);
    j["lr"] = cfg.lr;
    j["lr_decay_gamma"] = cfg.lr_decay_gamma;
    j["lr_decay_every_epochs"] = cfg.lr_decay_every_epochs;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["seed"] = cfg.seed;
    j["data_train"] = cfg.data_train;
    j["data_val"] = cfg.data_val;
    j["data_test"] = cfg.data_test;
    j["backbone_dropout"] = cfg.backbone_dropout;
    j["cmi_dropout"] = cfg.cmi_dropout;
    j["gma_dropout"] = cfg.gma_dropout;
    j["weight_decay"] = cfg.weight_decay;
    j["grad_clip"] = cfg.grad_clip;
    return j.dump(2) + "\n";
}

void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file: " + path);
    out << config_to_json(cfg);
}

const RunConfig& validate_config(const RunConfig& cfg) {
    auto positive = [](long long v, const std::string& key) {
        if (v <= 0) throw ConfigError("config key \"" + key + "\": must be strictly positive");
    };
    positive(cfg.input_size, "input_size");
    positive(cfg.patch_size, "patch_size");
    positive(cfg.embed_dim, "embed_dim");
    positive(cfg.window_size, "window_size");
    positive(cfg.cmi_blocks, "cmi_blocks");
    positive(cfg.decoder_width, "decoder_width");
    positive(cfg.lr_decay_every_epochs, "lr_decay_every_epochs");
    positive(cfg.batch_size, "batch_size");
    positive(cfg.epochs, "epochs");
    if (cfg.lr <= 0) throw ConfigError("config key \"lr\": must be strictly positive");
    if (cfg.lr_decay_gamma <= 0)
        throw ConfigError("config key \"lr_decay_gamma\": must be strictly positive");
    for (double r : {cfg.backbone_dropout, cfg.cmi_dropout, cfg.gma_dropout})
        if (r < 0 || r >= 1) throw ConfigError("dropout rates must lie in [0,1)");
    if (cfg.weight_decay < 0) throw ConfigError("config key \"weight_decay\": must be >= 0");
    if (cfg.grad_clip < 0) throw ConfigError("config key \"grad_clip\": must be >= 0");

    if (cfg.depths.size() != 4)
        throw ConfigError("config key \"depths\": expected exactly 4 entries, got " +
                          std::to_string(cfg.depths.size()));
    if (cfg.num_heads.size() != 4)
        throw ConfigError("config key \"num_heads\": expected exactly 4 entries, got " +
                          std::to_string(cfg.num_heads.size()));
    for (int d : cfg.depths) positive(d, "depths");
    for (int h : cfg.num_heads) positive(h, "num_heads");

    // three patch-merging steps halve the grid, so the embedded grid must be
    // divisible by 8
    const int grid_unit = cfg.patch_size * 8;
    if (cfg.input_size % grid_unit != 0)
        throw ConfigError("config key \"input_size\": " + std::to_string(cfg.input_size) +
                          " must be divisible by patch_size*8 = " + std::to_string(grid_unit));

    for (int s : cfg.cmi_stages)
        if (s < 2 || s > 5)
            throw ConfigError("config key \"cmi_stages\": stage " + std::to_string(s) +
                              " outside {2,3,4,5}");
    if (cfg.variant == Variant::CmiV2 && cfg.cmi_stages.empty())
        throw ConfigError("config key \"cmi_stages\": variant cmi_v2 requires at least one CMI stage");

    // head counts must divide the per-stage channel widths
    for (int s = 2; s <= 5; ++s) {
        const int ch = cfg.embed_dim << (s >= 3 ? s - 2 : 0);
        const int heads = cfg.num_heads[static_cast<std::size_t>(s - 2)];
        if (ch % heads != 0)
            throw ConfigError("config key \"num_heads\": stage " + std::to_string(s) + " channels " +
                              std::to_string(ch) + " not divisible by " + std::to_string(heads) +
                              " heads");
    }
    return cfg;
}

StageGeometry derive_stage_geometry(const RunConfig& cfg) {
    StageGeometry g;
    const int r1 = cfg.input_size / cfg.patch_size;
    g.resolution = {r1, r1, r1 / 2, r1 / 4, r1 / 8};
    g.channels = {cfg.embed_dim, cfg.embed_dim, cfg.embed_dim * 2, cfg.embed_dim * 4,
                  cfg.embed_dim * 8};
    return g;
}

}  // namespace dtmi
