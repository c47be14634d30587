#pragma once

#include "vicl/image.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vicl {

enum class TaskKind { Segmentation, Detection, Colorization };

std::string task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

// An (image, label) demonstration; the unit of the prompt database.
struct PromptPair {
    int id = -1;
    std::string class_tag;
    Image image;
    Image label;
};

// Read-only after construction; the retrieval index holds each pair's
// flattened image pixels plus their norm.
class PromptDatabase {
public:
    PromptDatabase() = default;
    explicit PromptDatabase(std::vector<PromptPair> pairs);

    int size() const { return static_cast<int>(pairs_.size()); }
    const PromptPair& pair(int index) const { return pairs_.at(static_cast<std::size_t>(index)); }
    const std::vector<PromptPair>& pairs() const { return pairs_; }
    float index_norm(int index) const { return norms_.at(static_cast<std::size_t>(index)); }

private:
    std::vector<PromptPair> pairs_;
    std::vector<float> norms_;
};

struct TaskSpec {
    TaskKind kind = TaskKind::Segmentation;
    int image_size = 32;
    int train_size = 512;
    int test_size = 128;
    std::uint64_t seed = 0;
};

struct Dataset {
    TaskSpec spec;
    PromptDatabase train;
    std::vector<PromptPair> test;
};

// Deterministic synthetic scenes: one shape (ellipse / rectangle / triangle,
// balanced round-robin by id) on a textured background.
//  - segmentation: label is the exact binary foreground mask (white on black)
//  - detection: label is the filled tight bounding box of that mask
//  - colorization: label is the colored scene, image its replicated luminance
Dataset generate_dataset(const TaskSpec& spec);

// Generates the scene pair for one id without split bookkeeping (also used by
// backbone pretraining to draw from the same distribution).
PromptPair generate_pair(const TaskSpec& spec, int id);

// Ranks database pairs by cosine similarity between flattened raw pixels,
// descending, ties broken by ascending id; returns the first n.
std::vector<PromptPair> retrieve_topN(const Image& query, const PromptDatabase& db, int n);

// Similarity scores in database order (exposed for oracles and tests).
std::vector<float> retrieval_scores(const Image& query, const PromptDatabase& db);

struct AugmentConfig {
    double p_q = 0.3;  // probability of substituting a slot with the query pair
    double p_r = 0.15; // probability of substituting a slot with a random pair
    std::uint64_t seed = 0;
};

void validate(const AugmentConfig& cfg);

// Per-slot substitution, training mode only. `stream` identifies the draw
// stream (the harness derives it from epoch and example index), so results
// are deterministic given (cfg.seed, stream, slot).
std::vector<PromptPair> augment(const std::vector<PromptPair>& prompts, const PromptPair& query_pair,
                                const PromptDatabase& db, const AugmentConfig& cfg, std::uint64_t stream,
                                bool training);

// On-disk layout: <dir>/manifest.json plus <dir>/{train,test}/pairs/<id>_img.png
// and <id>_lbl.png (PPM when written with use_ppm).
void save_dataset(const std::filesystem::path& dir, const Dataset& ds, bool use_ppm = false);
Dataset load_dataset(const std::filesystem::path& dir);

} // namespace vicl
