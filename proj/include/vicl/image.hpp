#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vicl {

// Interleaved RGB image with float channels in [0, 1], row-major.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> px; // h * w * 3

    Image() = default;
    Image(int height, int width) : h(height), w(width), px(static_cast<std::size_t>(height) * width * 3, 0.f) {}

    float& at(int y, int x, int c) { return px[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
    float at(int y, int x, int c) const { return px[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }

    bool same_size(const Image& other) const { return h == other.h && w == other.w; }
};

std::uint8_t to_byte(float v);
inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

// Snaps every channel to the 8-bit grid so file round-trips are lossless.
Image quantize8(const Image& img);

// Integer Rec.601-style luminance on byte values; weights sum to 256 so pure
// white maps to 255. Exactly reproducible, hence usable as a generator rule.
std::uint8_t luma8(std::uint8_t r, std::uint8_t g, std::uint8_t b);

// Float luminance used by evaluation thresholds.
inline float luminance(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

// Writers pick the codec from the file extension (.png or .ppm) and write
// atomically. Readers sniff the magic bytes.
void write_image(const std::filesystem::path& path, const Image& img);
Image read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_ppm(const Image& img);
Image decode_ppm(const std::vector<std::uint8_t>& bytes);

} // namespace vicl
