#pragma once

#include <string>
#include <vector>

#include "forgelab/policy_config.hpp"
#include "forgelab/stage_config.hpp"
#include "forgelab/world.hpp"

namespace forgelab {

// Unified run configuration. Every field has a default; files and flags only
// override. Unknown keys are an error so hyperparameters cannot drift
// silently, and the canonical resolved dump is hashed into all outputs.
struct RunConfig {
    std::uint64_t seed = 42;
    PolicyConfig policy;
    CorpusOptions data;
    int m_per_forget = 1;
    TrainConfig train;
    StageConfig unlearn;
    BaselineConfig baseline;
    AuditConfig audit;

    void set(const std::string& dotted_key, const std::string& value);
    void load_file(const std::string& path);
    void apply_overrides(const std::vector<std::string>& key_value_pairs);

    // Canonical "section.key = value" dump, sorted by key.
    std::string resolved_text() const;
    std::string config_hash() const;
    std::string policy_hash() const;

    void validate() const;
};

}  // namespace forgelab
