#include "vicl/data.hpp"

#include "vicl/errors.hpp"
#include "vicl/rng.hpp"
#include "vicl/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vicl {

using nlohmann::json;

std::string task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::Segmentation: return "seg";
        case TaskKind::Detection: return "det";
        case TaskKind::Colorization: return "color";
    }
    return "seg";
}

TaskKind task_from_name(const std::string& name) {
    if (name == "seg") return TaskKind::Segmentation;
    if (name == "det") return TaskKind::Detection;
    if (name == "color") return TaskKind::Colorization;
    throw ConfigError("unknown task '" + name + "' (expected seg|det|color)");
}

PromptDatabase::PromptDatabase(std::vector<PromptPair> pairs) : pairs_(std::move(pairs)) {
    norms_.reserve(pairs_.size());
    for (const auto& p : pairs_) {
        double q = 0;
        for (const float v : p.image.px) q += static_cast<double>(v) * v;
        norms_.push_back(static_cast<float>(std::sqrt(q)));
    }
}

namespace {

struct ShapeGeom {
    int kind = 0; // 0 ellipse, 1 rectangle, 2 triangle
    double cx = 0, cy = 0;
    double rx = 0, ry = 0;
    double rot = 0;
    double tx[3] = {0, 0, 0};
    double ty[3] = {0, 0, 0};
};

const char* kShapeNames[3] = {"ellipse", "rectangle", "triangle"};

// Shapes are rasterized onto the 4-pixel patch grid: a patch cell belongs to
// the foreground iff the analytic shape contains its center. Every cell is
// then pure foreground or background, which keeps the patch vocabulary small
// and the masked-token prediction task crisp.
constexpr int kCell = 4;

ShapeGeom sample_shape(int id, int size, Rng& rng) {
    ShapeGeom g;
    g.kind = id % 3;
    const double margin = 0.36 * size;
    g.cx = rng.uniform(margin, size - margin);
    g.cy = rng.uniform(margin, size - margin);
    g.rx = rng.uniform(0.22 * size, 0.34 * size);
    g.ry = rng.uniform(0.22 * size, 0.34 * size);
    g.rot = g.kind == 1 ? 0.0 : rng.uniform(0, 3.14159265358979323846);
    if (g.kind == 2) {
        for (int i = 0; i < 3; ++i) {
            const double ang = g.rot + i * 2.0943951023931953 + rng.uniform(-0.4, 0.4);
            const double rad = rng.uniform(0.26 * size, 0.4 * size);
            g.tx[i] = g.cx + rad * std::cos(ang);
            g.ty[i] = g.cy + rad * std::sin(ang);
        }
    }
    return g;
}

bool inside(const ShapeGeom& g, double x, double y) {
    if (g.kind == 0) {
        const double dx = x - g.cx, dy = y - g.cy;
        const double u = dx * std::cos(g.rot) + dy * std::sin(g.rot);
        const double v = -dx * std::sin(g.rot) + dy * std::cos(g.rot);
        return (u * u) / (g.rx * g.rx) + (v * v) / (g.ry * g.ry) <= 1.0;
    }
    if (g.kind == 1) {
        const double dx = x - g.cx, dy = y - g.cy;
        const double u = dx * std::cos(g.rot) + dy * std::sin(g.rot);
        const double v = -dx * std::sin(g.rot) + dy * std::cos(g.rot);
        return std::abs(u) <= g.rx && std::abs(v) <= g.ry;
    }
    // Triangle: same sign of the edge cross products for all three edges.
    double s[3];
    for (int i = 0; i < 3; ++i) {
        const int j = (i + 1) % 3;
        s[i] = (g.tx[j] - g.tx[i]) * (y - g.ty[i]) - (g.ty[j] - g.ty[i]) * (x - g.tx[i]);
    }
    const bool has_neg = s[0] < 0 || s[1] < 0 || s[2] < 0;
    const bool has_pos = s[0] > 0 || s[1] > 0 || s[2] > 0;
    return !(has_neg && has_pos);
}

// Scene colors come from fixed palettes so a small vector-quantizer codebook
// can cover the patch distribution.
const int kBgPalette[4][3] = {{90, 115, 153}, {140, 90, 77}, {77, 140, 90}, {128, 128, 115}};
const int kFgPalette[6][3] = {{242, 242, 242}, {20, 20, 20},  {217, 38, 38},
                              {38, 64, 217},   {26, 191, 51}, {230, 217, 38}};

// Colorization foregrounds come from a palette whose entries share a similar
// luminance band, so the grayscale query alone cannot identify the hue.
const int kColorPalette[6][3] = {{200, 60, 60}, {60, 160, 60},  {80, 80, 220},
                                 {150, 120, 30}, {160, 60, 160}, {40, 150, 150}};

struct Scene {
    Image image;            // textured scene with the shape painted in
    std::vector<bool> mask; // exact foreground indicator
};

Scene render_scene(const TaskSpec& spec, int id, Rng& rng) {
    const int size = spec.image_size;
    Scene scene;
    scene.image = Image(size, size);
    scene.mask.assign(static_cast<std::size_t>(size) * size, false);

    float bg[3], fg[3];
    {
        const int* b = kBgPalette[rng.uniform_index(4)];
        for (int c = 0; c < 3; ++c) bg[c] = static_cast<float>(b[c]) / 255.0f;
        const int* f = spec.kind == TaskKind::Colorization ? kColorPalette[rng.uniform_index(6)]
                                                           : kFgPalette[rng.uniform_index(6)];
        for (int c = 0; c < 3; ++c) fg[c] = static_cast<float>(f[c]) / 255.0f;
    }

    // Two low-frequency sinusoids give the background a mild texture that the
    // vector quantizer can still cover with a small codebook.
    double fx1 = rng.uniform(0.04, 0.12), fy1 = rng.uniform(0.04, 0.12), ph1 = rng.uniform(0, 6.283);
    double fx2 = rng.uniform(0.04, 0.12), fy2 = rng.uniform(0.04, 0.12), ph2 = rng.uniform(0, 6.283);

    const ShapeGeom geom = sample_shape(id, size, rng);
    // Cell-resolution foreground decided by the cell center.
    const int cells = size / kCell;
    std::vector<bool> cell_fg(static_cast<std::size_t>(cells) * cells);
    for (int cy = 0; cy < cells; ++cy) {
        for (int cx = 0; cx < cells; ++cx) {
            cell_fg[static_cast<std::size_t>(cy) * cells + cx] =
                inside(geom, cx * kCell + kCell / 2.0, cy * kCell + kCell / 2.0);
        }
    }
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const bool fg_px = cell_fg[static_cast<std::size_t>(y / kCell) * cells + (x / kCell)];
            scene.mask[static_cast<std::size_t>(y) * size + x] = fg_px;
            const double tex = 0.025 * std::sin(6.283185307179586 * (fx1 * x + fy1 * y) + ph1) +
                               0.025 * std::sin(6.283185307179586 * (fx2 * x + fy2 * y) + ph2);
            for (int c = 0; c < 3; ++c) {
                const float base = fg_px ? fg[c] : bg[c];
                scene.image.at(y, x, c) = std::clamp(base + static_cast<float>(fg_px ? 0.0 : tex), 0.0f, 1.0f);
            }
        }
    }
    return scene;
}

Image mask_to_label(const std::vector<bool>& mask, int size) {
    Image label(size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const float v = mask[static_cast<std::size_t>(y) * size + x] ? 1.0f : 0.0f;
            for (int c = 0; c < 3; ++c) label.at(y, x, c) = v;
        }
    }
    return label;
}

Image bbox_label(const std::vector<bool>& mask, int size) {
    int x0 = size, y0 = size, x1 = -1, y1 = -1;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if (mask[static_cast<std::size_t>(y) * size + x]) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    }
    Image label(size, size);
    if (x1 >= 0) {
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                for (int c = 0; c < 3; ++c) label.at(y, x, c) = 1.0f;
            }
        }
    }
    return label;
}

Image gray_from_label(const Image& label) {
    Image gray(label.h, label.w);
    for (int y = 0; y < label.h; ++y) {
        for (int x = 0; x < label.w; ++x) {
            const std::uint8_t g = luma8(to_byte(label.at(y, x, 0)), to_byte(label.at(y, x, 1)),
                                         to_byte(label.at(y, x, 2)));
            for (int c = 0; c < 3; ++c) gray.at(y, x, c) = from_byte(g);
        }
    }
    return gray;
}

} // namespace

PromptPair generate_pair(const TaskSpec& spec, int id) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(id)));
    const Scene scene = render_scene(spec, id, rng);

    PromptPair pair;
    pair.id = id;
    pair.class_tag = kShapeNames[id % 3];
    switch (spec.kind) {
        case TaskKind::Segmentation:
            pair.image = quantize8(scene.image);
            pair.label = mask_to_label(scene.mask, spec.image_size);
            break;
        case TaskKind::Detection:
            pair.image = quantize8(scene.image);
            pair.label = bbox_label(scene.mask, spec.image_size);
            break;
        case TaskKind::Colorization:
            pair.label = quantize8(scene.image);
            pair.image = gray_from_label(pair.label);
            break;
    }
    return pair;
}

Dataset generate_dataset(const TaskSpec& spec) {
    if (spec.train_size <= 0 || spec.test_size <= 0) {
        throw ConfigError("dataset split sizes must be positive");
    }
    if (spec.image_size <= 0) throw ConfigError("image_size must be positive");
    Dataset ds;
    ds.spec = spec;
    std::vector<PromptPair> train;
    train.reserve(static_cast<std::size_t>(spec.train_size));
    for (int id = 0; id < spec.train_size; ++id) train.push_back(generate_pair(spec, id));
    ds.train = PromptDatabase(std::move(train));
    ds.test.reserve(static_cast<std::size_t>(spec.test_size));
    for (int id = spec.train_size; id < spec.train_size + spec.test_size; ++id) {
        ds.test.push_back(generate_pair(spec, id));
    }
    return ds;
}

std::vector<float> retrieval_scores(const Image& query, const PromptDatabase& db) {
    double qn = 0;
    for (const float v : query.px) qn += static_cast<double>(v) * v;
    const float qnorm = static_cast<float>(std::sqrt(qn));
    std::vector<float> scores(static_cast<std::size_t>(db.size()));
    for (int i = 0; i < db.size(); ++i) {
        const auto& img = db.pair(i).image;
        if (img.px.size() != query.px.size()) {
            throw DimensionError("retrieve: query pixel count does not match database images");
        }
        float dot = 0;
        for (std::size_t k = 0; k < query.px.size(); ++k) dot += query.px[k] * img.px[k];
        const float denom = std::max(qnorm, 1e-12f) * std::max(db.index_norm(i), 1e-12f);
        scores[static_cast<std::size_t>(i)] = dot / denom;
    }
    return scores;
}

std::vector<PromptPair> retrieve_topN(const Image& query, const PromptDatabase& db, int n) {
    if (n <= 0) throw ContractError("retrieve_topN: N must be positive");
    if (n > db.size()) {
        throw CapacityError("retrieve_topN: requested " + std::to_string(n) + " pairs from a database of " +
                            std::to_string(db.size()));
    }
    const std::vector<float> scores = retrieval_scores(query, db);
    std::vector<int> order(static_cast<std::size_t>(db.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const float sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return db.pair(a).id < db.pair(b).id;
    });
    std::vector<PromptPair> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(db.pair(order[static_cast<std::size_t>(i)]));
    return out;
}

void validate(const AugmentConfig& cfg) {
    if (cfg.p_q < 0 || cfg.p_q > 1 || cfg.p_r < 0 || cfg.p_r > 1) {
        throw ConfigError("augment probabilities must lie in [0, 1]");
    }
    if (cfg.p_q + cfg.p_r > 1.0) {
        throw ConfigError("p_q + p_r must not exceed 1 (substitutions are mutually exclusive per slot)");
    }
}

std::vector<PromptPair> augment(const std::vector<PromptPair>& prompts, const PromptPair& query_pair,
                                const PromptDatabase& db, const AugmentConfig& cfg, std::uint64_t stream,
                                bool training) {
    if (!training) throw ModeError("augment: substitution is a training-only operation");
    validate(cfg);
    std::vector<PromptPair> out = prompts;
    for (std::size_t slot = 0; slot < out.size(); ++slot) {
        Rng rng(mix_seed(mix_seed(cfg.seed, stream), slot));
        const double u = rng.uniform();
        if (u < cfg.p_q) {
            out[slot] = query_pair;
        } else if (u < cfg.p_q + cfg.p_r && db.size() > 1) {
            int pick = rng.uniform_index(db.size());
            while (db.pair(pick).id == out[slot].id) pick = rng.uniform_index(db.size());
            out[slot] = db.pair(pick);
        }
    }
    return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds, bool use_ppm) {
    namespace fs = std::filesystem;
    const std::string ext = use_ppm ? ".ppm" : ".png";
    json manifest;
    manifest["task"] = task_name(ds.spec.kind);
    manifest["seed"] = ds.spec.seed;
    manifest["image_size"] = ds.spec.image_size;
    manifest["format"] = use_ppm ? "ppm" : "png";

    auto dump_split = [&](const std::string& split, const std::vector<PromptPair>& pairs) {
        json entries = json::array();
        const fs::path pair_dir = dir / split / "pairs";
        fs::create_directories(pair_dir);
        for (const auto& p : pairs) {
            entries.push_back({{"id", p.id}, {"class", p.class_tag}});
            write_image(pair_dir / (std::to_string(p.id) + "_img" + ext), p.image);
            write_image(pair_dir / (std::to_string(p.id) + "_lbl" + ext), p.label);
        }
        manifest[split] = entries;
    };
    dump_split("train", ds.train.pairs());
    dump_split("test", ds.test);
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw DataError("dataset manifest not found: " + manifest_path.string());
    json manifest;
    try {
        manifest = json::parse(read_file_text(manifest_path));
    } catch (const json::exception& e) {
        throw DataError("malformed dataset manifest: " + std::string(e.what()));
    }

    Dataset ds;
    ds.spec.kind = task_from_name(manifest.at("task").get<std::string>());
    ds.spec.seed = manifest.at("seed").get<std::uint64_t>();
    ds.spec.image_size = manifest.at("image_size").get<int>();
    const std::string ext = manifest.at("format").get<std::string>() == "ppm" ? ".ppm" : ".png";

    auto load_split = [&](const std::string& split) {
        std::vector<PromptPair> pairs;
        for (const auto& entry : manifest.at(split)) {
            PromptPair p;
            p.id = entry.at("id").get<int>();
            p.class_tag = entry.at("class").get<std::string>();
            const fs::path pair_dir = dir / split / "pairs";
            p.image = read_image(pair_dir / (std::to_string(p.id) + "_img" + ext));
            p.label = read_image(pair_dir / (std::to_string(p.id) + "_lbl" + ext));
            pairs.push_back(std::move(p));
        }
        return pairs;
    };
    auto train_pairs = load_split("train");
    ds.spec.train_size = static_cast<int>(train_pairs.size());
    ds.train = PromptDatabase(std::move(train_pairs));
    ds.test = load_split("test");
    ds.spec.test_size = static_cast<int>(ds.test.size());
    return ds;
}

} // namespace vicl
