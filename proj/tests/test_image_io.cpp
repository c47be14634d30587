#include "vicl/image.hpp"

#include "vicl/errors.hpp"
#include "vicl/rng.hpp"

#include <doctest.h>

#include <filesystem>

using namespace vicl;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform());
    return quantize8(img);
}

} // namespace

TEST_CASE("png round-trip is pixel exact for 8-bit-aligned images") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Image img = random_image(13, 17, seed);
        Image back = decode_png(encode_png(img));
        REQUIRE(back.same_size(img));
        for (std::size_t i = 0; i < img.px.size(); ++i) CHECK(back.px[i] == img.px[i]);
    }
}

TEST_CASE("png encoding is byte deterministic") {
    Image img = random_image(16, 16, 42);
    CHECK(encode_png(img) == encode_png(img));
}

TEST_CASE("ppm round-trip is pixel exact") {
    Image img = random_image(9, 7, 3);
    Image back = decode_ppm(encode_ppm(img));
    REQUIRE(back.same_size(img));
    for (std::size_t i = 0; i < img.px.size(); ++i) CHECK(back.px[i] == img.px[i]);
}

TEST_CASE("file io dispatches by extension and sniffs by magic") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "vicl_image_test";
    fs::create_directories(dir);
    Image img = random_image(8, 8, 9);

    write_image(dir / "a.png", img);
    Image p = read_image(dir / "a.png");
    CHECK(p.px == img.px);

    write_image(dir / "a.ppm", img);
    Image q = read_image(dir / "a.ppm");
    CHECK(q.px == img.px);

    CHECK_THROWS_AS(write_image(dir / "a.bmp", img), IoError);
    CHECK_THROWS_AS(read_image(dir / "missing.png"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("byte conversion clamps and quantizes") {
    CHECK(to_byte(-0.5f) == 0);
    CHECK(to_byte(1.5f) == 255);
    CHECK(to_byte(1.0f) == 255);
    CHECK(from_byte(to_byte(from_byte(128))) == from_byte(128));
}

TEST_CASE("integer luminance endpoints") {
    CHECK(luma8(0, 0, 0) == 0);
    CHECK(luma8(255, 255, 255) == 255);
    CHECK(luma8(77, 77, 77) == 77);
}
