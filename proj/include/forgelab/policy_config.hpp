#pragma once

#include <string>
#include <vector>

#include "forgelab/common.hpp"

namespace forgelab {

// Discrete action-token vocabulary. Order is part of the data format.
enum Action : int {
    kUp = 0,
    kDown = 1,
    kLeft = 2,
    kRight = 3,
    kGrasp = 4,
    kStop = 5,
    kBos = 6,
    kEos = 7,
    kPad = 8,
};

inline const char* action_name(int a) {
    static const char* names[] = {"UP", "DOWN", "LEFT", "RIGHT", "GRASP", "STOP", "BOS", "EOS", "PAD"};
    return (a >= 0 && a < 9) ? names[a] : "?";
}

struct PolicyConfig {
    int grid_n = 7;
    std::vector<std::string> colors{"red", "blue", "green", "yellow"};
    std::vector<std::string> shapes{"cube", "ball"};
    int d_model = 64;
    int n_heads = 4;
    int vision_blocks = 2;
    int lm_blocks = 4;
    int instr_vocab = 12;
    int action_vocab = 9;
    int max_action_len = 24;

    // Instruction token ids: BOS_I, EOS_I, "pick", then colors, then shapes.
    static constexpr int kInstrBos = 0;
    static constexpr int kInstrEos = 1;
    static constexpr int kInstrPick = 2;
    int color_token(int color) const { return 3 + color; }
    int shape_token(int shape) const { return 3 + static_cast<int>(colors.size()) + shape; }
    int instr_tokens_used() const { return 3 + static_cast<int>(colors.size() + shapes.size()); }

    int scene_channels() const { return static_cast<int>(colors.size() + shapes.size()) + 2; }
    int vision_tokens() const { return grid_n * grid_n; }
    int mlp_hidden() const { return 2 * d_model; }
    int instr_segment_len() const { return 5; }  // BOS_I pick color shape EOS_I
    int context_len() const { return vision_tokens() + instr_segment_len() + 1 + max_action_len; }

    int color_index(const std::string& name) const {
        for (std::size_t i = 0; i < colors.size(); ++i)
            if (colors[i] == name) return static_cast<int>(i);
        throw ConfigError("unknown color '" + name + "'");
    }
    int shape_index(const std::string& name) const {
        for (std::size_t i = 0; i < shapes.size(); ++i)
            if (shapes[i] == name) return static_cast<int>(i);
        throw ConfigError("unknown shape '" + name + "'");
    }

    void validate() const {
        if (grid_n < 3) throw ConfigError("grid_n must be >= 3");
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
            throw ConfigError("d_model must be positive and divisible by n_heads");
        if (action_vocab < 7) throw ConfigError("action_vocab must cover the seven base tokens");
        if (instr_vocab < instr_tokens_used())
            throw ConfigError("instr_vocab too small for the color/shape inventory");
        if (colors.empty() || shapes.empty()) throw ConfigError("colors and shapes must be non-empty");
        if (max_action_len < 2 * (grid_n - 1) + 2)
            throw ConfigError("max_action_len too small for worst-case expert paths");
        if (vision_blocks < 1 || lm_blocks < 1)
            throw ConfigError("vision_blocks and lm_blocks must be >= 1");
    }
};

}  // namespace forgelab
