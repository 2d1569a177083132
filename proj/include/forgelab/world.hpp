#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "forgelab/policy_config.hpp"
#include "forgelab/tensor.hpp"

namespace forgelab {

struct Cell {
    int row = 0;
    int col = 0;
    bool operator==(const Cell& o) const { return row == o.row && col == o.col; }
    bool operator<(const Cell& o) const { return row != o.row ? row < o.row : col < o.col; }
};

struct SceneObject {
    int color = 0;
    int shape = 0;
    Cell cell;
};

struct GridScene {
    int n = 0;
    std::vector<SceneObject> objects;
    Cell agent;
};

struct Instruction {
    std::vector<int> tokens;  // [pick, color, shape]
    int target_color = 0;
    int target_shape = 0;
};

struct Episode {
    int id = 0;
    GridScene scene;
    Instruction instruction;
    std::vector<int> expert_tokens;  // BOS ... GRASP EOS
    std::vector<std::string> labels;
    std::string split;  // train / val / test
};

// Pure predicate over episodes selecting the slice to forget.
struct UnlearnRequest {
    std::string kind = "color";
    std::string value = "red";
    std::string description = "forget episodes whose instructed target color is red";

    bool matches(const Episode& ep, const PolicyConfig& cfg) const {
        if (kind != "color") throw ConfigError("unsupported unlearn request kind '" + kind + "'");
        return ep.instruction.target_color == cfg.color_index(value);
    }
};

struct DataSplits {
    std::vector<Episode> forget;
    std::vector<Episode> retain;
    std::vector<Episode> boundary;
    // (forget episode id, nearest retained/boundary counterpart episode id)
    std::vector<std::pair<int, int>> mismatch_pairs;
};

struct RolloutOutcome {
    bool success = false;
    bool violation = false;
    int steps = 0;
    std::optional<SceneObject> grasped;
};

// Lexicographic similarity triple used for boundary retrieval and mismatch
// pairing; larger is closer.
struct Similarity {
    int shared_objects = 0;
    int layout_equal = 0;
    int instr_overlap = 0;

    bool operator>(const Similarity& o) const {
        if (shared_objects != o.shared_objects) return shared_objects > o.shared_objects;
        if (layout_equal != o.layout_equal) return layout_equal > o.layout_equal;
        return instr_overlap > o.instr_overlap;
    }
    bool operator==(const Similarity& o) const {
        return shared_objects == o.shared_objects && layout_equal == o.layout_equal &&
               instr_overlap == o.instr_overlap;
    }
};

Similarity episode_similarity(const Episode& a, const Episode& b);

std::vector<int> expert_actions(const GridScene& scene, const Instruction& instr);

struct CorpusOptions {
    int count = 512;
    double forget_fraction = 0.30;
    std::string forget_color = "red";
    double train_fraction = 0.70;
    double val_fraction = 0.15;
    int min_objects = 2;
    int max_objects = 4;
};

std::vector<Episode> gen_episodes(std::uint64_t seed, int count, const PolicyConfig& cfg,
                                  const CorpusOptions& opts = {});

DataSplits build_splits(const std::vector<Episode>& episodes, const UnlearnRequest& request,
                        const PolicyConfig& cfg, int m_per_forget = 1);

// Executes an action-token sequence on the grid. Moves clamp at walls, GRASP
// resolves against the object on the agent cell, STOP/EOS ends the episode.
RolloutOutcome simulate(const std::vector<int>& tokens, const GridScene& scene,
                        const Instruction& instr, int max_steps, int forbidden_color = -1);

// Dataset files: episodes.jsonl + vocab.json + splits.json in `dir`.
void write_dataset(const std::string& dir, const std::vector<Episode>& episodes,
                   const DataSplits& splits, const UnlearnRequest& request, const PolicyConfig& cfg);

struct LoadedDataset {
    std::vector<Episode> episodes;
    DataSplits splits;
    UnlearnRequest request;
    std::string data_hash;
};

LoadedDataset load_dataset(const std::string& dir, const PolicyConfig& cfg);

std::string hash_file(const std::string& path);

// Scene encoding consumed by the policy: one row per cell with
// [color one-hot | shape one-hot | has-object | is-agent] channels.
template <typename S>
Tensor<S> scene_to_channels(const GridScene& scene, const PolicyConfig& cfg) {
    if (scene.n != cfg.grid_n)
        throw DimensionError("scene grid " + std::to_string(scene.n) + " does not match configured grid " +
                             std::to_string(cfg.grid_n));
    const int g = cfg.grid_n;
    const int channels = cfg.scene_channels();
    Mat<S> m = Mat<S>::Zero(g * g, channels);
    for (const auto& obj : scene.objects) {
        const int idx = obj.cell.row * g + obj.cell.col;
        m(idx, obj.color) = S(1);
        m(idx, static_cast<int>(cfg.colors.size()) + obj.shape) = S(1);
        m(idx, channels - 2) = S(1);
    }
    m(scene.agent.row * g + scene.agent.col, channels - 1) = S(1);
    return Tensor<S>(std::move(m));
}

// Greedy-rollout flavour of simulate for policy-like callables that produce
// an action-token sequence for (scene, instruction).
template <typename PolicyT>
RolloutOutcome simulate_policy(const PolicyT& policy, const GridScene& scene, const Instruction& instr,
                               int max_steps, int forbidden_color = -1) {
    return simulate(policy(scene, instr), scene, instr, max_steps, forbidden_color);
}

}  // namespace forgelab
