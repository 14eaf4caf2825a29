#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtmi {

struct ImageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    std::uint8_t at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

// Reads PNG or JPEG (by magic bytes). Palette PNGs are expanded to RGB,
// 16-bit depth is reduced to 8, alpha is stripped.
ImageU8 read_image(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);

}  // namespace dtmi
