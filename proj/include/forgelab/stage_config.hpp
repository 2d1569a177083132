#pragma once

#include <string>
#include <vector>

#include "forgelab/common.hpp"

namespace forgelab {

enum class Stage { Vision, Projector, Reasoning };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Vision: return "vision";
        case Stage::Projector: return "projector";
        case Stage::Reasoning: return "reasoning";
    }
    return "?";
}

inline Stage stage_from_name(const std::string& name) {
    if (name == "vision") return Stage::Vision;
    if (name == "projector") return Stage::Projector;
    if (name == "reasoning") return Stage::Reasoning;
    throw ConfigError("unknown stage '" + name + "'");
}

// All unlearning knobs. Defaults follow the main-pipeline settings; the
// alternate step budgets stay reachable through the config file.
struct StageConfig {
    double lambda_f = 0.7;
    double lambda_m = 0.8;
    double lambda_feat = 0.7;
    double beta_kl = 0.5;
    double alpha_ratio = 1.0;
    double gamma_feat = 1.0;
    double eps = 1e-8;

    int k_vision = 2;
    int k_projector = 2;
    int k_reasoning = 3;
    double tau_vision = 0.0;
    double tau_projector = 0.0;
    double tau_reasoning = 0.0;

    int steps_vision = 60;
    int steps_projector = 60;
    int steps_reasoning = 90;
    double lr = 2e-4;

    // Stopping criteria: stop early once forget token accuracy falls to
    // stop_forget_acc and retain token accuracy holds at
    // stop_retain_frac x base.
    double stop_forget_acc = 0.30;
    double stop_retain_frac = 0.90;
    int eval_every = 10;

    int batch_forget = 8;
    int batch_retain = 8;
    int batch_boundary = 8;
    int selection_episodes = 48;  // cap on full-batch selection passes
    int eval_episodes = 48;       // cap on stopping-criteria evaluations

    int lora_rank = 4;
    double lora_alpha = 4.0;
    double lora_dropout = 0.05;
    bool include_action_rows = false;

    std::uint64_t seed = 42;
    std::vector<std::string> stages{"vision", "projector", "reasoning"};

    void validate() const {
        if (lambda_f < 0 || lambda_m < 0 || lambda_feat < 0 || beta_kl < 0 || gamma_feat < 0)
            throw ConfigError("loss weights must be >= 0");
        if (k_vision < 1 || k_projector < 1 || k_reasoning < 1)
            throw ConfigError("selection budgets must be >= 1");
        if (steps_vision < 1 || steps_projector < 1 || steps_reasoning < 1)
            throw ConfigError("stage step counts must be >= 1");
        if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
        if (batch_forget < 1 || batch_retain < 1 || batch_boundary < 1)
            throw ConfigError("batch sizes must be >= 1");
        if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
        for (const auto& s : stages) stage_from_name(s);
    }

    int steps_for(Stage s) const {
        switch (s) {
            case Stage::Vision: return steps_vision;
            case Stage::Projector: return steps_projector;
            case Stage::Reasoning: return steps_reasoning;
        }
        return 0;
    }
    int budget_for(Stage s) const {
        switch (s) {
            case Stage::Vision: return k_vision;
            case Stage::Projector: return k_projector;
            case Stage::Reasoning: return k_reasoning;
        }
        return 0;
    }
    double tau_for(Stage s) const {
        switch (s) {
            case Stage::Vision: return tau_vision;
            case Stage::Projector: return tau_projector;
            case Stage::Reasoning: return tau_reasoning;
        }
        return 0.0;
    }
};

struct BaselineConfig {
    std::string method = "ga";  // ga | npo | ssd | salun
    double lr = 2e-4;
    int steps = 60;
    int batch = 8;
    double npo_beta = 0.1;
    double ssd_threshold = 1.0;  // lambda_ssd
    double ssd_floor = 0.1;
    double salun_top_fraction = 0.1;
    double retain_weight = 1.0;     // used by npo / salun
    double ga_retain_weight = 0.0;  // GA is pure ascent by definition
    int lora_rank = 4;
    double lora_alpha = 4.0;
    std::uint64_t seed = 42;

    void validate() const {
        if (method != "ga" && method != "npo" && method != "ssd" && method != "salun")
            throw ConfigError("unknown baseline method '" + method + "'");
        if (steps < 1) throw ConfigError("baseline steps must be >= 1");
        if (salun_top_fraction <= 0.0 || salun_top_fraction > 1.0)
            throw ConfigError("salun_top_fraction must lie in (0, 1]");
        if (npo_beta <= 0.0) throw ConfigError("npo_beta must be > 0");
    }
};

struct TrainConfig {
    int epochs = 6;
    double lr = 1e-3;
    int batch_size = 4;
    double clip_norm = 1.0;
    double acc_gate = 0.95;
};

struct AuditConfig {
    int rollout_max_steps = 32;
    std::string eval_scope = "test";  // train | val | test | all

    void validate() const {
        if (eval_scope != "train" && eval_scope != "val" && eval_scope != "test" && eval_scope != "all")
            throw ConfigError("eval_scope must be train, val, test, or all");
        if (rollout_max_steps < 1) throw ConfigError("rollout_max_steps must be >= 1");
    }
};

}  // namespace forgelab
