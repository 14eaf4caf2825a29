#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dtmi/config.hpp"
#include "dtmi/model.hpp"

namespace dtmi {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    RunConfig config;
    int epoch = 0;
    std::string rng_state;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<float>> values;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Throws listing every architecture key that differs (training-schedule and
// data-path keys are free to change between runs).
void check_architecture_match(const RunConfig& expected, const RunConfig& actual);

Checkpoint snapshot_model(const Dtminet<float>& model, int epoch, const std::string& rng_state);

// Copies parameters into an already-constructed model by name; every name
// must match with identical shape.
void restore_model(Dtminet<float>& model, const Checkpoint& ckpt);

}  // namespace dtmi
