#pragma once

#include <vector>

#include "forgelab/eval.hpp"
#include "forgelab/param_store.hpp"
#include "forgelab/policy.hpp"
#include "forgelab/stage_config.hpp"
#include "forgelab/world.hpp"

namespace forgelab {

// Token-weighted cross entropy over a batch of episodes: per-episode logits
// are stacked into one matrix so the loss is exactly cross_entropy_logits
// over all action positions.
template <typename S>
Tensor<S> batch_ce_loss(Tape<S>* tape, const TinyVlaPolicy<S>& policy,
                        const std::vector<const Episode*>& batch, Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw ValueError("batch_ce_loss: empty batch");
    const PolicyConfig& cfg = policy.config();
    std::vector<Tensor<S>> logit_blocks;
    std::vector<int> targets;
    for (const Episode* ep : batch) {
        const Tensor<S> scene = scene_to_channels<S>(ep->scene, cfg);
        const std::vector<int> prefix = teacher_prefix(ep->expert_tokens);
        const std::vector<int> t = teacher_targets(ep->expert_tokens);
        logit_blocks.push_back(policy.forward_logits(tape, scene, ep->instruction.tokens, prefix, dropout_rng));
        targets.insert(targets.end(), t.begin(), t.end());
    }
    Tensor<S> logits = logit_blocks.size() == 1 ? logit_blocks.front() : concat_rows(tape, logit_blocks);
    return cross_entropy_logits(tape, logits, targets, kPad);
}

// Scales all gradients on the given paths so their global norm is at most
// max_norm. Norm accumulates in double.
template <typename S>
void clip_grad_norm(ParamStore<S>& store, const std::vector<std::string>& paths, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& p : paths) {
        const Mat<S>& g = store.at(p).grad();
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            for (Eigen::Index j = 0; j < g.cols(); ++j) {
                const double v = static_cast<double>(g(i, j));
                sq += v * v;
            }
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const S factor = static_cast<S>(max_norm / norm);
    for (const auto& p : paths) store.at(p).grad() *= factor;
}

struct TrainReport {
    int steps = 0;
    double final_loss = 0.0;
};

// Behavioral cloning on expert tokens: epochs of seeded-shuffled minibatches,
// Adam with global gradient clipping.
template <typename S>
TrainReport train_behavior_cloning(TinyVlaPolicy<S>& policy, const std::vector<Episode>& episodes,
                                   const TrainConfig& cfg, std::uint64_t seed) {
    if (episodes.empty()) throw ValueError("train_behavior_cloning: empty training set");
    ParamStore<S>& store = policy.params();
    store.set_requires_grad_all(true);
    const std::vector<std::string> paths = store.paths();
    AdamState<S> adam;
    Rng rng(derive_seed(seed, "bc_shuffle"));
    TrainReport report;

    std::vector<int> order(episodes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const Episode*> batch;
            for (std::size_t k = at; k < std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size)); ++k)
                batch.push_back(&episodes[static_cast<std::size_t>(order[k])]);
            store.zero_grads();
            Tape<S> tape;
            Tensor<S> loss = batch_ce_loss(&tape, policy, batch);
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value))
                throw NumericError("behavior cloning diverged at step " + std::to_string(report.steps));
            tape.backward(loss);
            clip_grad_norm(store, paths, cfg.clip_norm);
            adam_step(store, adam, cfg.lr, paths);
            ++report.steps;
            report.final_loss = loss_value;
        }
    }
    store.set_requires_grad_all(false);
    return report;
}

}  // namespace forgelab
