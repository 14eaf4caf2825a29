#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dtmi/image.hpp"

// RGB-D triplet loading and preprocessing. Planar float arrays in [0,1];
// edge labels are derived from the GT mask by a 3x3 morphological gradient
// (replicate padding), never read from disk.

namespace dtmi {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Planar float image [C,H,W].
struct FloatPlanes {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

FloatPlanes planes_from_image(const ImageU8& img);

// Bilinear resize per plane (half-pixel convention; identity at same size).
FloatPlanes resize_planes(const FloatPlanes& in, int out_h, int out_w);

struct SampleTriplet {
    FloatPlanes rgb;    // [3,H,W]
    FloatPlanes depth;  // [1,H,W]
    FloatPlanes gt;     // [1,H,W]
    FloatPlanes edge;   // [1,H,W], derived
    std::string id;
};

// Network-ready sample: rgb standardized, depth min-max normalized then
// replicated to 3 channels and standardized with the same constants.
struct ModelInput {
    FloatPlanes rgb_norm;    // [3,S,S]
    FloatPlanes depth_norm;  // [3,S,S]
    FloatPlanes gt;          // [1,S,S]
    FloatPlanes edge;        // [1,S,S]
    std::string id;
};

inline constexpr float kRgbMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kRgbStd[3] = {0.229f, 0.224f, 0.225f};

SampleTriplet load_triplet(const std::string& rgb_path, const std::string& depth_path,
                           const std::string& gt_path);

// dilation(3x3) AND NOT erosion(3x3) of the mask binarized at 0.5,
// replicate padding; output values in {0,1}.
FloatPlanes derive_edge_label(const FloatPlanes& gt);

ModelInput preprocess(const SampleTriplet& t, int size);

// round(255 * v), half away from zero; values outside [-1e-6, 1+1e-6] are an
// error, the tolerance band is clamped.
ImageU8 encode_prediction(const FloatPlanes& map);

// Dataset directory layout: <root>/rgb/<id>.(png|jpg), <root>/depth/<id>.png,
// <root>/gt/<id>.png. Returns sorted ids; every rgb stem must have matching
// depth and gt files.
struct DatasetIndex {
    std::string root;
    std::vector<std::string> ids;
    std::vector<std::string> rgb_paths;  // aligned with ids
};

DatasetIndex scan_dataset(const std::string& root);
SampleTriplet load_triplet_by_id(const DatasetIndex& index, std::size_t i);

}  // namespace dtmi
