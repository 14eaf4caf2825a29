#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtmi {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Variant { Full, NoEdge, RgbOnly, DepthOnly, NoFdec, NoDsd, CmiV2 };

const char* variant_name(Variant v);
Variant variant_from_string(const std::string& s);  // throws ConfigError on unknown name

// Full experiment description. Defaults are the toy scale: a CPU forward
// pass completes in seconds. The paper-scale preset lives in configs/.
struct RunConfig {
    int input_size = 64;
    int patch_size = 4;
    int embed_dim = 32;
    std::vector<int> depths = {2, 2, 2, 2};
    std::vector<int> num_heads = {1, 2, 4, 8};
    int window_size = 4;
    std::vector<int> cmi_stages = {4, 5};  // kept sorted unique
    int cmi_blocks = 1;
    int decoder_width = 32;
    Variant variant = Variant::Full;

    double lr = 1e-3;
    double lr_decay_gamma = 0.1;
    int lr_decay_every_epochs = 100;
    int batch_size = 4;
    int epochs = 20;
    std::uint64_t seed = 7;

    std::string data_train;
    std::string data_val;
    std::string data_test;

    double backbone_dropout = 0.0;
    double cmi_dropout = 0.1;
    double gma_dropout = 0.1;
    double weight_decay = 0.0;
    double grad_clip = 0.0;

    bool has_cmi_stage(int s) const {
        for (int v : cmi_stages)
            if (v == s) return true;
        return false;
    }
    bool operator==(const RunConfig&) const = default;
};

// Per-stage feature geometry, stages indexed 1..5 (stored at [i-1]).
struct StageGeometry {
    std::array<int, 5> resolution{};
    std::array<int, 5> channels{};
};

RunConfig load_config(const std::string& path);
RunConfig parse_config_json(const std::string& text, const std::string& origin);
std::string config_to_json(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::string& path);

// Checks every structural invariant; returns cfg unchanged on success and
// throws ConfigError with the offending key otherwise.
const RunConfig& validate_config(const RunConfig& cfg);

StageGeometry derive_stage_geometry(const RunConfig& cfg);

}  // namespace dtmi
