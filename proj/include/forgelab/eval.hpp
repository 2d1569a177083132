#pragma once

#include <vector>

#include "forgelab/policy.hpp"
#include "forgelab/world.hpp"

namespace forgelab {

// Teacher-forcing views of an expert sequence [BOS, moves..., GRASP, EOS]:
// the prefix feeds the decoder after BOS, the targets align with every
// produced logit row.
inline std::vector<int> teacher_prefix(const std::vector<int>& expert) {
    if (expert.size() < 2 || expert.front() != kBos || expert.back() != kEos)
        throw ValueError("expert sequence must be BOS ... EOS");
    return {expert.begin() + 1, expert.end() - 1};
}

inline std::vector<int> teacher_targets(const std::vector<int>& expert) {
    if (expert.size() < 2 || expert.front() != kBos || expert.back() != kEos)
        throw ValueError("expert sequence must be BOS ... EOS");
    return {expert.begin() + 1, expert.end()};
}

struct TokenEval {
    double ce = 0.0;
    double acc = 0.0;
    std::int64_t tokens = 0;
};

// Token-weighted teacher-forced cross entropy and argmax accuracy over the
// given episodes. Episodes are scored independently (optionally in
// parallel); the reduction always runs in episode order.
template <typename S>
TokenEval token_eval(const TinyVlaPolicy<S>& policy, const std::vector<Episode>& episodes,
                     bool parallel = false) {
    if (episodes.empty()) throw ValueError("token_eval: empty episode set");
    const PolicyConfig& cfg = policy.config();
    std::vector<double> ce_sum(episodes.size(), 0.0);
    std::vector<std::int64_t> hits(episodes.size(), 0), counts(episodes.size(), 0);

    auto score_one = [&](std::size_t i) {
        const Episode& ep = episodes[i];
        const Tensor<S> scene = scene_to_channels<S>(ep.scene, cfg);
        const std::vector<int> prefix = teacher_prefix(ep.expert_tokens);
        const std::vector<int> targets = teacher_targets(ep.expert_tokens);
        const Tensor<S> logits = policy.forward_logits(nullptr, scene, ep.instruction.tokens, prefix);
        std::vector<double> row(static_cast<std::size_t>(logits.cols()));
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            for (Eigen::Index j = 0; j < logits.cols(); ++j)
                row[static_cast<std::size_t>(j)] = static_cast<double>(logits.value()(r, j));
            double m = 0.0;
            const double lse = detail::stable_log_sum_exp_row(row.data(), logits.cols(), m);
            const int target = targets[static_cast<std::size_t>(r)];
            ce_sum[i] += lse - row[static_cast<std::size_t>(target)];
            int best = 0;
            for (Eigen::Index j = 1; j < logits.cols(); ++j)
                if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
            if (best == target) ++hits[i];
            ++counts[i];
        }
    };

    if (parallel) parallel_for(episodes.size(), score_one);
    else
        for (std::size_t i = 0; i < episodes.size(); ++i) score_one(i);

    TokenEval out;
    double ce = 0.0;
    std::int64_t hit = 0, total = 0;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        ce += ce_sum[i];
        hit += hits[i];
        total += counts[i];
    }
    out.tokens = total;
    out.ce = ce / static_cast<double>(total);
    out.acc = static_cast<double>(hit) / static_cast<double>(total);
    return out;
}

inline std::vector<Episode> episode_prefix(const std::vector<Episode>& eps, int cap) {
    if (cap >= static_cast<int>(eps.size())) return eps;
    return {eps.begin(), eps.begin() + cap};
}

inline std::vector<Episode> filter_split(const std::vector<Episode>& eps, const std::string& split) {
    if (split == "all") return eps;
    std::vector<Episode> out;
    for (const auto& e : eps)
        if (e.split == split) out.push_back(e);
    return out;
}

}  // namespace forgelab
