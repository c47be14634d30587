#include "vicl/backbone.hpp"

#include "vicl/fusion.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>

using namespace vicl;

namespace {

using T = TensorT<double>;

Image random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform());
    return quantize8(img);
}

} // namespace

TEST_CASE("codebook size equals the feature dimension by construction") {
    auto bb = BackboneT<double>::random_init(4, 12, 4, 4, 1);
    CHECK(bb.codebook_size() == 12);
    CHECK(bb.codebook.shape() == Shape{12, 12});
}

TEST_CASE("encode_continuous produces per-cell logits over the codebook") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 2);
    T canvas({4 * 16, 8});
    Rng rng(3);
    for (auto& v : canvas.mutable_data()) v = rng.uniform(-1, 1);
    auto logits = encode_continuous(canvas, bb);
    CHECK(logits.shape() == Shape{64, 8});

    T bad({16, 8});
    CHECK_THROWS_AS(encode_continuous(bad, bb), DimensionError);
}

TEST_CASE("encode_continuous is deterministic") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 5);
    T canvas({64, 8});
    Rng rng(7);
    for (auto& v : canvas.mutable_data()) v = rng.uniform(-1, 1);
    auto a = encode_continuous(canvas, bb);
    auto b = encode_continuous(canvas, bb);
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(double)) == 0);
}

TEST_CASE("quantize hits an exactly matching codebook entry") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 11);
    Image img = random_image(16, 16, 12);
    // Plant the feature of patch (0,0) as codebook entry 4 (0-based).
    auto feats = quantizer_features(patch_matrix<double>(img, 4), bb);
    for (int c = 0; c < 8; ++c) bb.codebook.mutable_data()[4 * 8 + c] = feats.at(0, c);
    auto grid = quantize(img, bb);
    CHECK(grid.gh == 4);
    CHECK(grid.gw == 4);
    CHECK(grid.at(0, 0) == 5); // 1-based
}

TEST_CASE("quantize breaks ties toward the lowest index") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 13);
    Image img = random_image(16, 16, 14);
    auto feats = quantizer_features(patch_matrix<double>(img, 4), bb);
    for (int c = 0; c < 8; ++c) {
        bb.codebook.mutable_data()[2 * 8 + c] = feats.at(0, c);
        bb.codebook.mutable_data()[5 * 8 + c] = feats.at(0, c);
    }
    auto grid = quantize(img, bb);
    CHECK(grid.at(0, 0) == 3);
}

TEST_CASE("quantize matches an exhaustive nearest-neighbor scan") {
    auto bb = BackboneT<double>::random_init(2, 4, 4, 4, 17);
    Image img = random_image(8, 8, 18);
    auto grid = quantize(img, bb);
    auto feats = quantizer_features(patch_matrix<double>(img, 2), bb);
    for (int r = 0; r < 16; ++r) {
        int best = -1;
        double best_d = 1e300;
        for (int j = 0; j < 4; ++j) {
            double d = 0;
            for (int c = 0; c < 4; ++c) {
                const double diff = feats.at(r, c) - bb.codebook.at(j, c);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        CHECK(grid.idx[static_cast<std::size_t>(r)] == best + 1);
    }
}

TEST_CASE("quantize rejects indivisible dimensions") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 19);
    Image bad(15, 16);
    CHECK_THROWS_AS(quantize(bad, bb), DimensionError);
}

TEST_CASE("decode of a constant index grid tiles one patch periodically") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 23);
    IndexGrid grid{4, 4, std::vector<int>(16, 3)};
    Image img = decode(grid, bb);
    CHECK(img.h == 16);
    CHECK(img.w == 16);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            for (int c = 0; c < 3; ++c) {
                CHECK(img.at(y, x, c) == img.at(y % 4, x % 4, c));
                CHECK(img.at(y, x, c) >= 0.0f);
                CHECK(img.at(y, x, c) <= 1.0f);
            }
        }
    }
}

TEST_CASE("decode rejects out-of-range indices") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 29);
    IndexGrid zero{2, 2, {0, 1, 1, 1}};
    CHECK_THROWS_AS(decode(zero, bb), IndexError);
    IndexGrid high{2, 2, {1, 9, 1, 1}};
    CHECK_THROWS_AS(decode(high, bb), IndexError);
}

TEST_CASE("index grid quadrants slice the canvas layout") {
    IndexGrid grid;
    grid.gh = 4;
    grid.gw = 4;
    grid.idx.resize(16);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            const int q = (r / 2) * 2 + (c / 2);
            grid.idx[static_cast<std::size_t>(r) * 4 + c] = q + 1;
        }
    }
    CHECK(index_quadrant(grid, 2, 2, Quadrant::TopLeft).idx == std::vector<int>(4, 1));
    CHECK(index_quadrant(grid, 2, 2, Quadrant::TopRight).idx == std::vector<int>(4, 2));
    CHECK(index_quadrant(grid, 2, 2, Quadrant::BottomLeft).idx == std::vector<int>(4, 3));
    CHECK(index_quadrant(grid, 2, 2, Quadrant::BottomRight).idx == std::vector<int>(4, 4));
}

TEST_CASE("freezing removes every backbone tensor from the trainable set") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 31);
    bb.set_trainable(true);
    for (const auto& t : bb.all_tensors()) CHECK(t.requires_grad());
    bb.freeze();
    for (const auto& t : bb.all_tensors()) CHECK_FALSE(t.requires_grad());
}

TEST_CASE("backbone checksum reacts to any weight change") {
    auto bb = BackboneT<double>::random_init(4, 8, 4, 4, 37);
    const auto before = bb.checksum();
    CHECK(before == bb.checksum());
    bb.blocks[1].ff2_b.mutable_data()[3] += 1e-7;
    CHECK(bb.checksum() != before);
}
