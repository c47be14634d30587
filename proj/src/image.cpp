#include "vicl/image.hpp"

#include "vicl/errors.hpp"
#include "vicl/util.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>

namespace vicl {

std::uint8_t to_byte(float v) {
    if (v <= 0.f) return 0;
    if (v >= 1.f) return 255;
    return static_cast<std::uint8_t>(std::lround(v * 255.0f));
}

Image quantize8(const Image& img) {
    Image out(img.h, img.w);
    for (std::size_t i = 0; i < img.px.size(); ++i) out.px[i] = from_byte(to_byte(img.px[i]));
    return out;
}

std::uint8_t luma8(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    return static_cast<std::uint8_t>((77u * r + 150u * g + 29u * b + 128u) >> 8);
}

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32_be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
    put_u32_be(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.h <= 0 || img.w <= 0) throw DimensionError("encode_png: empty image");
    const std::size_t stride = static_cast<std::size_t>(img.w) * 3;
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(img.h));
    for (int y = 0; y < img.h; ++y) {
        std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
        row[0] = 0; // filter: none
        for (int x = 0; x < img.w; ++x) {
            for (int c = 0; c < 3; ++c) row[1 + static_cast<std::size_t>(x) * 3 + c] = to_byte(img.at(y, x, c));
        }
    }

    uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_cap);
    if (compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw IoError("encode_png: zlib compression failed");
    }
    comp.resize(comp_cap);

    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.w));
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.h));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(2); // color type: truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", comp);
    append_chunk(out, "IEND", {});
    return out;
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0) {
        throw IoError("decode_png: not a PNG file");
    }
    std::size_t pos = 8;
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = get_u32_be(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("decode_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("decode_png: malformed IHDR");
            width = static_cast<int>(get_u32_be(data));
            height = static_cast<int>(get_u32_be(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8 || (color != 2 && color != 6) || interlace != 0) {
                throw IoError("decode_png: unsupported format (need 8-bit RGB/RGBA, no interlace)");
            }
            channels = color == 2 ? 3 : 4;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (width <= 0 || height <= 0 || idat.empty()) throw IoError("decode_png: missing image data");

    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(height));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size()) {
        throw IoError("decode_png: zlib decompression failed");
    }

    // Undo per-row filters in place.
    std::vector<std::uint8_t> prev(stride, 0);
    Image img(height, width);
    for (int y = 0; y < height; ++y) {
        std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
        const std::uint8_t filter = row[0];
        std::uint8_t* cur = row + 1;
        for (std::size_t i = 0; i < stride; ++i) {
            const int left = i >= static_cast<std::size_t>(channels) ? cur[i - channels] : 0;
            const int up = prev[i];
            const int ul = i >= static_cast<std::size_t>(channels) ? prev[i - channels] : 0;
            int v = cur[i];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += up; break;
                case 3: v += (left + up) / 2; break;
                case 4: v += paeth(left, up, ul); break;
                default: throw IoError("decode_png: unknown filter type");
            }
            cur[i] = static_cast<std::uint8_t>(v & 0xff);
        }
        std::copy(cur, cur + stride, prev.begin());
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = from_byte(cur[static_cast<std::size_t>(x) * channels + c]);
        }
    }
    return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
    if (img.h <= 0 || img.w <= 0) throw DimensionError("encode_ppm: empty image");
    std::string header = "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.px.size());
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int c = 0; c < 3; ++c) out.push_back(to_byte(img.at(y, x, c)));
        }
    }
    return out;
}

Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
        return t;
    };
    if (token() != "P6") throw IoError("decode_ppm: not a binary PPM file");
    const int w = std::stoi(token());
    const int h = std::stoi(token());
    const int maxval = std::stoi(token());
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("decode_ppm: unsupported header");
    ++pos; // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h * 3;
    if (bytes.size() - pos < need) throw IoError("decode_ppm: truncated pixel data");
    Image img(h, w);
    for (std::size_t i = 0; i < need; ++i) img.px[i] = from_byte(bytes[pos + i]);
    return img;
}

void write_image(const std::filesystem::path& path, const Image& img) {
    const std::string ext = path.extension().string();
    std::vector<std::uint8_t> bytes;
    if (ext == ".png") {
        bytes = encode_png(img);
    } else if (ext == ".ppm") {
        bytes = encode_ppm(img);
    } else {
        throw IoError("write_image: unsupported extension '" + ext + "' (use .png or .ppm)");
    }
    write_file_atomic(path, bytes.data(), bytes.size());
}

Image read_image(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) return decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    throw IoError("read_image: unknown image format: " + path.string());
}

} // namespace vicl
