#include "vicl/locality.hpp"

#include <doctest.h>

#include <cmath>

using namespace vicl;

namespace {

LocalityConfig gauss(double sigma) { return {PriorKind::Gaussian, sigma, false}; }
LocalityConfig laplace(double sigma) { return {PriorKind::Laplacian, sigma, false}; }

} // namespace

TEST_CASE("psi is exactly one at zero distance") {
    for (const double sigma : {0.1, 0.65, 2.5, 100.0}) {
        CHECK(psi(3, 4, 3, 4, gauss(sigma)) == 1.0);
        CHECK(psi(3, 4, 3, 4, laplace(sigma)) == 1.0);
    }
}

TEST_CASE("psi closed forms") {
    // Gaussian, unit distance, sigma 1.
    CHECK(psi(1, 1, 2, 1, gauss(1.0)) == doctest::Approx(0.6065306597126334).epsilon(1e-12));
    // Laplacian, 3-4-5 offset, sigma 1.
    CHECK(psi(1, 1, 4, 5, laplace(1.0)) == doctest::Approx(0.006737946999085467).epsilon(1e-12));
}

TEST_CASE("psi rejects non-positive sigma") {
    CHECK_THROWS_AS(psi(1, 1, 1, 1, gauss(0.0)), ConfigError);
    CHECK_THROWS_AS(psi(1, 1, 1, 1, laplace(-1.0)), ConfigError);
}

TEST_CASE("locality matrix on an odd grid is symmetric under 180-degree rotation") {
    const auto m = build_locality_matrix(3, 3, 5, 5, gauss(0.8));
    for (int x = 1; x <= 5; ++x) {
        for (int y = 1; y <= 5; ++y) CHECK(m.at(x, y) == m.at(6 - x, 6 - y));
    }
}

TEST_CASE("locality matrix approaches the flat prior for huge sigma") {
    // Gaussian decays with d^2 / (2 sigma^2), so sigma = 1e6 is already flat
    // to 1e-9; the Laplacian decays with d / sigma and needs a larger sigma.
    for (const auto& cfg : {gauss(1e6), laplace(1e11)}) {
        const auto m = build_locality_matrix(1, 1, 8, 8, cfg);
        for (const double v : m.weights) CHECK(std::abs(v - 1.0) < 1e-9);
    }
}

TEST_CASE("locality matrix closed-form entry at the segmentation sigma") {
    const auto m = build_locality_matrix(1, 1, 8, 8, gauss(0.65));
    CHECK(m.at(1, 1) == 1.0);
    CHECK(m.at(1, 2) == doctest::Approx(0.30622598005804238).epsilon(1e-12));
}

TEST_CASE("locality matrix rejects out-of-bounds centers") {
    CHECK_THROWS_AS(build_locality_matrix(0, 1, 8, 8, gauss(1.0)), IndexError);
    CHECK_THROWS_AS(build_locality_matrix(1, 9, 8, 8, gauss(1.0)), IndexError);
}

TEST_CASE("locality weights lie in (0,1], peak exactly at the center, decay radially") {
    for (const auto& cfg : {gauss(0.65), laplace(0.5)}) {
        for (int h = 1; h <= 4; ++h) {
            for (int w = 1; w <= 4; ++w) {
                const auto m = build_locality_matrix(h, w, 4, 4, cfg);
                CHECK(m.at(h, w) == 1.0);
                for (int x = 1; x <= 4; ++x) {
                    for (int y = 1; y <= 4; ++y) {
                        CHECK(m.at(x, y) > 0.0);
                        CHECK(m.at(x, y) <= 1.0);
                    }
                }
                // Radially non-increasing: compare every pair of cells by distance.
                for (int x1 = 1; x1 <= 4; ++x1) {
                    for (int y1 = 1; y1 <= 4; ++y1) {
                        for (int x2 = 1; x2 <= 4; ++x2) {
                            for (int y2 = 1; y2 <= 4; ++y2) {
                                const double d1 = (x1 - h) * (x1 - h) + (y1 - w) * (y1 - w);
                                const double d2 = (x2 - h) * (x2 - h) + (y2 - w) * (y2 - w);
                                if (d1 < d2) CHECK(m.at(x1, y1) >= m.at(x2, y2));
                                if (d1 == d2) CHECK(m.at(x1, y1) == m.at(x2, y2));
                            }
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("psi is strictly increasing in sigma off center") {
    const double sigmas[] = {0.1, 0.3, 0.65, 1.0, 2.5, 10.0};
    for (int x = 2; x <= 6; ++x) {
        for (int y = 1; y <= 6; ++y) {
            for (std::size_t i = 0; i + 1 < std::size(sigmas); ++i) {
                CHECK(psi(1, 1, x, y, gauss(sigmas[i])) < psi(1, 1, x, y, gauss(sigmas[i + 1])));
                CHECK(psi(1, 1, x, y, laplace(sigmas[i])) < psi(1, 1, x, y, laplace(sigmas[i + 1])));
            }
        }
    }
}

TEST_CASE("gaussian exceeds laplacian exactly below distance 2*sigma") {
    for (const double sigma : {0.4, 0.65, 1.0, 2.0}) {
        for (int dx = 0; dx <= 8; ++dx) {
            for (int dy = 0; dy <= 8; ++dy) {
                if (dx == 0 && dy == 0) continue;
                const double d = std::sqrt(static_cast<double>(dx * dx + dy * dy));
                const double pg = psi(1, 1, 1 + dx, 1 + dy, gauss(sigma));
                const double pl = psi(1, 1, 1 + dx, 1 + dy, laplace(sigma));
                if (std::abs(d - 2 * sigma) < 1e-12) continue; // equality boundary
                CHECK((pg > pl) == (d < 2 * sigma));
            }
        }
    }
}

TEST_CASE("cached all-center build matches per-cell psi calls exactly") {
    LocalityCache cache;
    const auto cfg = gauss(0.65);
    const auto& all = cache.get(8, 8, cfg);
    REQUIRE(all.size() == 64);
    int idx = 0;
    for (int h = 1; h <= 8; ++h) {
        for (int w = 1; w <= 8; ++w, ++idx) {
            const auto& m = all[static_cast<std::size_t>(idx)];
            CHECK(m.center_h == h);
            CHECK(m.center_w == w);
            for (int x = 1; x <= 8; ++x) {
                for (int y = 1; y <= 8; ++y) CHECK(m.at(x, y) == psi(h, w, x, y, cfg));
            }
        }
    }
    // Second lookup returns the same cached object.
    CHECK(&cache.get(8, 8, cfg) == &all);
}

TEST_CASE("adaptive sigma: zero head gives one half") {
    Rng rng(5);
    AdaptiveSigmaHeadT<double> head;
    head.projection = TensorT<double>::zeros({6, 1});
    head.bias = TensorT<double>::zeros({1});
    TensorT<double> q({4, 6});
    for (auto& v : q.mutable_data()) v = rng.uniform(-3, 3);
    CHECK(adaptive_sigma(q, head).item() == 0.5);
}

TEST_CASE("adaptive sigma saturates strictly below one") {
    AdaptiveSigmaHeadT<double> head;
    head.projection = TensorT<double>::zeros({3, 1});
    head.bias = TensorT<double>({1}, {30.0});
    TensorT<double> q({2, 3});
    const double s = adaptive_sigma(q, head).item();
    CHECK(s > 0.9999999);
    CHECK(s < 1.0);
}

TEST_CASE("adaptive sigma matches an independent scalar recomputation") {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 5, cells = 9;
        AdaptiveSigmaHeadT<double> head = AdaptiveSigmaHeadT<double>::init(d, rng);
        head.bias.mutable_data()[0] = rng.uniform(-1, 1);
        TensorT<double> q({cells, d});
        for (auto& v : q.mutable_data()) v = rng.uniform(-2, 2);

        // Oracle: mean over positions, dot, sigmoid, all in plain scalar code.
        double z = head.bias[0];
        for (int j = 0; j < d; ++j) {
            double mean = 0;
            for (int r = 0; r < cells; ++r) mean += q.at(r, j);
            mean /= cells;
            z += mean * head.projection.at(j, 0);
        }
        const double expected = 1.0 / (1.0 + std::exp(-z));
        CHECK(adaptive_sigma(q, head).item() == doctest::Approx(expected).epsilon(1e-6));
        CHECK(adaptive_sigma(q, head).item() > 0.0);
        CHECK(adaptive_sigma(q, head).item() < 1.0);
        Tape<double>::active().clear();
    }
}

TEST_CASE("locality_map gradient w.r.t. sigma matches finite differences") {
    Rng rng(23);
    for (const PriorKind kind : {PriorKind::Gaussian, PriorKind::Laplacian}) {
        for (int trial = 0; trial < 10; ++trial) {
            TensorT<double> d2({3, 4});
            for (auto& v : d2.mutable_data()) v = static_cast<double>(rng.uniform_index(50));
            TensorT<double> proj({3, 4});
            for (auto& v : proj.mutable_data()) v = rng.uniform(-1, 1);
            const double s0 = rng.uniform(0.3, 3.0);

            TensorT<double> sigma = TensorT<double>::scalar(s0);
            sigma.set_requires_grad(true);
            backward(sum_all(mul(locality_map(sigma, d2, kind), proj)));
            const double ad = sigma.grad()[0];

            auto value = [&](double s) {
                NoGradGuard ng;
                return sum_all(mul(locality_map(TensorT<double>::scalar(s), d2, kind), proj)).item();
            };
            const double fd = (value(s0 + 1e-5) - value(s0 - 1e-5)) / 2e-5;
            const double denom = std::max({std::abs(fd), std::abs(ad), 1e-7});
            CHECK(std::abs(fd - ad) / denom < 1e-4);
        }
    }
}

TEST_CASE("locality_map reproduces cached matrices for a constant sigma") {
    const auto cfg = gauss(0.65);
    const int gh = 4, gw = 4;
    TensorT<double> d2({gh * gw, gh * gw});
    int row = 0;
    for (int h = 1; h <= gh; ++h) {
        for (int w = 1; w <= gw; ++w, ++row) {
            int col = 0;
            for (int x = 1; x <= gh; ++x) {
                for (int y = 1; y <= gw; ++y, ++col) {
                    d2.mutable_data()[static_cast<std::size_t>(row * gh * gw + col)] =
                        (x - h) * (x - h) + (y - w) * (y - w);
                }
            }
        }
    }
    const auto m = locality_map(TensorT<double>::scalar(cfg.sigma), d2, cfg.kind);
    row = 0;
    for (int h = 1; h <= gh; ++h) {
        for (int w = 1; w <= gw; ++w, ++row) {
            int col = 0;
            for (int x = 1; x <= gh; ++x) {
                for (int y = 1; y <= gw; ++y, ++col) CHECK(m.at(row, col) == psi(h, w, x, y, cfg));
            }
        }
    }
}
