#include "dtmi/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dtmi {

namespace {

constexpr char kMagic[8] = {'D', 'T', 'M', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError(path + ": truncated checkpoint");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& path) {
    const auto len = get<std::uint64_t>(is, path);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw CheckpointError(path + ": truncated checkpoint");
    return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint: " + path);
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    put_string(os, config_to_json(ckpt.config));
    put<std::int32_t>(os, ckpt.epoch);
    put_string(os, ckpt.rng_state);
    put<std::uint64_t>(os, ckpt.names.size());
    for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
        put_string(os, ckpt.names[i]);
        const auto& shape = ckpt.shapes[i];
        put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) put<std::int32_t>(os, d);
        const auto& vals = ckpt.values[i];
        put<std::uint64_t>(os, vals.size());
        os.write(reinterpret_cast<const char*>(vals.data()),
                 static_cast<std::streamsize>(vals.size() * sizeof(float)));
    }
    if (!os) throw CheckpointError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint not found: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(path + ": not a checkpoint file");
    const auto version = get<std::uint32_t>(is, path);
    if (version != kVersion)
        throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.config = parse_config_json(get_string(is, path), path);
    ckpt.epoch = get<std::int32_t>(is, path);
    ckpt.rng_state = get_string(is, path);
    const auto n = get<std::uint64_t>(is, path);
    ckpt.names.reserve(n);
    ckpt.shapes.reserve(n);
    ckpt.values.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        ckpt.names.push_back(get_string(is, path));
        const auto ndim = get<std::uint32_t>(is, path);
        Shape shape(ndim);
        for (auto& d : shape) d = get<std::int32_t>(is, path);
        ckpt.shapes.push_back(std::move(shape));
        const auto numel = get<std::uint64_t>(is, path);
        std::vector<float> vals(numel);
        is.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw CheckpointError(path + ": truncated checkpoint");
        ckpt.values.push_back(std::move(vals));
    }
    return ckpt;
}

void check_architecture_match(const RunConfig& expected, const RunConfig& actual) {
    std::string diffs;
    auto cmp = [&](bool equal, const char* key) {
        if (!equal) diffs += std::string(diffs.empty() ? "" : ", ") + key;
    };
    cmp(expected.input_size == actual.input_size, "input_size");
    cmp(expected.patch_size == actual.patch_size, "patch_size");
    cmp(expected.embed_dim == actual.embed_dim, "embed_dim");
    cmp(expected.depths == actual.depths, "depths");
    cmp(expected.num_heads == actual.num_heads, "num_heads");
    cmp(expected.window_size == actual.window_size, "window_size");
    cmp(expected.cmi_stages == actual.cmi_stages, "cmi_stages");
    cmp(expected.cmi_blocks == actual.cmi_blocks, "cmi_blocks");
    cmp(expected.decoder_width == actual.decoder_width, "decoder_width");
    cmp(expected.variant == actual.variant, "variant");
    if (!diffs.empty())
        throw CheckpointError("checkpoint/config architecture mismatch on: " + diffs);
}

Checkpoint snapshot_model(const Dtminet<float>& model, int epoch, const std::string& rng_state) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    ckpt.epoch = epoch;
    ckpt.rng_state = rng_state;
    for (const auto& [name, t] : model.registry().items()) {
        ckpt.names.push_back(name);
        ckpt.shapes.push_back(t->shape);
        ckpt.values.push_back(t->v);
    }
    return ckpt;
}

void restore_model(Dtminet<float>& model, const Checkpoint& ckpt) {
    const auto& items = model.registry().items();
    if (items.size() != ckpt.names.size())
        throw CheckpointError("checkpoint parameter count mismatch: model has " +
                              std::to_string(items.size()) + ", checkpoint has " +
                              std::to_string(ckpt.names.size()));
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& [name, t] = items[i];
        if (name != ckpt.names[i])
            throw CheckpointError("checkpoint parameter order mismatch at \"" + name + "\" vs \"" +
                                  ckpt.names[i] + "\"");
        if (t->shape != ckpt.shapes[i] || t->v.size() != ckpt.values[i].size())
            throw CheckpointError("checkpoint shape mismatch for \"" + name + "\"");
        t->v = ckpt.values[i];
    }
}

}  // namespace dtmi
