#include "dtmi/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>

namespace dtmi {

namespace fs = std::filesystem;

FloatPlanes planes_from_image(const ImageU8& img) {
    FloatPlanes out;
    out.channels = img.channels;
    out.height = img.height;
    out.width = img.width;
    out.data.resize(static_cast<std::size_t>(img.channels) * img.height * img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
    return out;
}

FloatPlanes resize_planes(const FloatPlanes& in, int out_h, int out_w) {
    if (in.height == out_h && in.width == out_w) return in;
    FloatPlanes out;
    out.channels = in.channels;
    out.height = out_h;
    out.width = out_w;
    out.data.resize(static_cast<std::size_t>(in.channels) * out_h * out_w);

    struct Axis {
        int i0, i1;
        float w1;
    };
    auto build = [](int n_in, int n_out) {
        std::vector<Axis> ax(static_cast<std::size_t>(n_out));
        const double scale = static_cast<double>(n_in) / n_out;
        for (int o = 0; o < n_out; ++o) {
            double p = (o + 0.5) * scale - 0.5;
            p = std::min(std::max(p, 0.0), static_cast<double>(n_in - 1));
            const int i0 = static_cast<int>(std::floor(p));
            const int i1 = std::min(i0 + 1, n_in - 1);
            ax[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(p - i0)};
        }
        return ax;
    };
    const auto ay = build(in.height, out_h);
    const auto ax = build(in.width, out_w);
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < out_h; ++y) {
            const auto& Y = ay[static_cast<std::size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const auto& X = ax[static_cast<std::size_t>(x)];
                const float top = in.at(c, Y.i0, X.i0) * (1.0f - X.w1) + in.at(c, Y.i0, X.i1) * X.w1;
                const float bot = in.at(c, Y.i1, X.i0) * (1.0f - X.w1) + in.at(c, Y.i1, X.i1) * X.w1;
                out.at(c, y, x) = top * (1.0f - Y.w1) + bot * Y.w1;
            }
        }
    return out;
}

SampleTriplet load_triplet(const std::string& rgb_path, const std::string& depth_path,
                           const std::string& gt_path) {
    const ImageU8 rgb_img = read_image(rgb_path);
    const ImageU8 depth_img = read_image(depth_path);
    const ImageU8 gt_img = read_image(gt_path);

    if (rgb_img.channels != 3)
        throw DataError(rgb_path + ": expected a 3-channel image, got " +
                        std::to_string(rgb_img.channels));
    if (depth_img.channels != 1)
        throw DataError(depth_path + ": expected a single-channel image, got " +
                        std::to_string(depth_img.channels));
    if (gt_img.channels != 1)
        throw DataError(gt_path + ": expected a single-channel image, got " +
                        std::to_string(gt_img.channels));
    if (depth_img.width != rgb_img.width || depth_img.height != rgb_img.height ||
        gt_img.width != rgb_img.width || gt_img.height != rgb_img.height)
        throw DataError("dimension mismatch between " + rgb_path + " (" +
                        std::to_string(rgb_img.width) + "x" + std::to_string(rgb_img.height) +
                        "), " + depth_path + " and " + gt_path);

    SampleTriplet t;
    t.rgb = planes_from_image(rgb_img);
    t.depth = planes_from_image(depth_img);
    t.gt = planes_from_image(gt_img);
    t.edge = derive_edge_label(t.gt);
    t.id = fs::path(rgb_path).stem().string();
    return t;
}

FloatPlanes derive_edge_label(const FloatPlanes& gt) {
    const int h = gt.height, w = gt.width;
    std::vector<std::uint8_t> bin(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            bin[static_cast<std::size_t>(y) * w + x] = gt.at(0, y, x) >= 0.5f ? 1 : 0;

    auto clamp = [](int v, int lo, int hi) { return std::min(std::max(v, lo), hi); };
    FloatPlanes edge;
    edge.channels = 1;
    edge.height = h;
    edge.width = w;
    edge.data.resize(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::uint8_t dil = 0, ero = 1;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = clamp(y + dy, 0, h - 1);
                    const int xx = clamp(x + dx, 0, w - 1);
                    const std::uint8_t v = bin[static_cast<std::size_t>(yy) * w + xx];
                    dil |= v;
                    ero &= v;
                }
            edge.at(0, y, x) = (dil && !ero) ? 1.0f : 0.0f;
        }
    return edge;
}

ModelInput preprocess(const SampleTriplet& t, int size) {
    ModelInput out;
    out.id = t.id;
    out.rgb_norm = resize_planes(t.rgb, size, size);
    FloatPlanes depth = resize_planes(t.depth, size, size);
    out.gt = resize_planes(t.gt, size, size);
    out.edge = resize_planes(t.edge, size, size);

    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                out.rgb_norm.at(c, y, x) = (out.rgb_norm.at(c, y, x) - kRgbMean[c]) / kRgbStd[c];

    float dmin = depth.data[0], dmax = depth.data[0];
    for (float v : depth.data) {
        dmin = std::min(dmin, v);
        dmax = std::max(dmax, v);
    }
    if (dmax <= dmin) {
        std::cerr << "warning: degenerate depth map" << (t.id.empty() ? "" : " for " + t.id)
                  << " (constant " << dmin << "); using 0.5\n";
        std::fill(depth.data.begin(), depth.data.end(), 0.5f);
    } else {
        const float inv = 1.0f / (dmax - dmin);
        for (float& v : depth.data) v = (v - dmin) * inv;
    }

    out.depth_norm.channels = 3;
    out.depth_norm.height = size;
    out.depth_norm.width = size;
    out.depth_norm.data.resize(3 * static_cast<std::size_t>(size) * size);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                out.depth_norm.at(c, y, x) = (depth.at(0, y, x) - kRgbMean[c]) / kRgbStd[c];
    return out;
}

ImageU8 encode_prediction(const FloatPlanes& map) {
    ImageU8 img;
    img.width = map.width;
    img.height = map.height;
    img.channels = 1;
    img.data.resize(static_cast<std::size_t>(map.width) * map.height);
    for (std::size_t i = 0; i < map.data.size(); ++i) {
        const float v = map.data[i];
        if (v < -1e-6f || v > 1.0f + 1e-6f)
            throw DataError("encode_prediction: value " + std::to_string(v) + " outside [0,1]");
        const float c = std::min(std::max(v, 0.0f), 1.0f);
        img.data[i] = static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(c)));
    }
    return img;
}

DatasetIndex scan_dataset(const std::string& root) {
    DatasetIndex index;
    index.root = root;
    const fs::path rgb_dir = fs::path(root) / "rgb";
    const fs::path depth_dir = fs::path(root) / "depth";
    const fs::path gt_dir = fs::path(root) / "gt";
    for (const auto& dir : {rgb_dir, depth_dir, gt_dir})
        if (!fs::is_directory(dir)) throw DataError("dataset directory missing: " + dir.string());

    std::vector<std::pair<std::string, std::string>> found;  // (id, rgb path)
    for (const auto& entry : fs::directory_iterator(rgb_dir)) {
        if (!entry.is_regular_file()) continue;
        const auto ext = entry.path().extension().string();
        if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") continue;
        found.emplace_back(entry.path().stem().string(), entry.path().string());
    }
    std::sort(found.begin(), found.end());
    if (found.empty()) throw DataError("no rgb images found under " + rgb_dir.string());

    for (const auto& [id, rgb_path] : found) {
        if (!fs::exists(depth_dir / (id + ".png")))
            throw DataError("missing depth image for id \"" + id + "\" under " + depth_dir.string());
        if (!fs::exists(gt_dir / (id + ".png")))
            throw DataError("missing gt image for id \"" + id + "\" under " + gt_dir.string());
        index.ids.push_back(id);
        index.rgb_paths.push_back(rgb_path);
    }
    return index;
}

SampleTriplet load_triplet_by_id(const DatasetIndex& index, std::size_t i) {
    const auto& id = index.ids.at(i);
    const fs::path root(index.root);
    return load_triplet(index.rgb_paths.at(i), (root / "depth" / (id + ".png")).string(),
                        (root / "gt" / (id + ".png")).string());
}

}  // namespace dtmi
