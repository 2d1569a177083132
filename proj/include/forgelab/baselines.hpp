#pragma once

#include <algorithm>
#include <map>
#include <vector>

#include "forgelab/unlearn.hpp"

namespace forgelab {

namespace baseline_detail {

// Gradient of token-weighted CE over a whole episode list, accumulated
// episode by episode so the tape stays small.
template <typename S>
void accumulate_ce_grads(TinyVlaPolicy<S>& policy, const std::vector<Episode>& episodes) {
    std::int64_t tokens = 0;
    for (const auto& ep : episodes) {
        const Tensor<S> scene = scene_to_channels<S>(ep.scene, policy.config());
        Tape<S> tape;
        Tensor<S> ce = cross_entropy_sum(&tape, policy.forward_logits(&tape, scene, ep.instruction.tokens,
                                                                      teacher_prefix(ep.expert_tokens)),
                                         teacher_targets(ep.expert_tokens));
        tape.backward(ce);
        tokens += static_cast<std::int64_t>(teacher_targets(ep.expert_tokens).size());
    }
    const S inv = static_cast<S>(1.0 / static_cast<double>(tokens));
    for (auto& [path, e] : policy.params())
        if (e.tensor.has_grad()) e.tensor.grad() *= inv;
}

template <typename S>
double sequence_log_prob_of(const Mat<S>& logits, const std::vector<int>& targets) {
    std::vector<double> row(static_cast<std::size_t>(logits.cols()));
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        for (Eigen::Index j = 0; j < logits.cols(); ++j)
            row[static_cast<std::size_t>(j)] = static_cast<double>(logits(r, j));
        double m = 0.0;
        const double lse = detail::stable_log_sum_exp_row(row.data(), logits.cols(), m);
        total += row[static_cast<std::size_t>(targets[static_cast<std::size_t>(r)])] - lse;
    }
    return total;
}

template <typename S>
LoraSet<S> attach_broad_adapters(TinyVlaPolicy<S>& policy, const BaselineConfig& cfg) {
    LoraSet<S> set = policy.attach_lora(policy.linear_weight_paths(), cfg.lora_rank, cfg.lora_alpha, 0.0,
                                        derive_seed(cfg.seed, "baseline_lora"));
    policy.params().set_requires_grad_all(false);
    for (const auto& p : set.param_paths()) policy.params().at(p).set_requires_grad(true);
    return set;
}

template <typename S>
void check_finite_loss(double v, const char* method, int step) {
    if (!std::isfinite(v))
        throw NumericError(std::string(method) + " diverged to a non-finite loss at step " +
                           std::to_string(step));
}

}  // namespace baseline_detail

// Direct gradient ascent on the forget CE through broad adapters. Never
// reads the retain set unless a retain weight is explicitly configured.
template <typename S>
LoraSet<S> ga_unlearn(TinyVlaPolicy<S>& policy, const StageData& data, const BaselineConfig& cfg) {
    cfg.validate();
    if (data.forget.empty()) throw ValueError("ga_unlearn: empty forget set");
    LoraSet<S> set = baseline_detail::attach_broad_adapters(policy, cfg);
    const std::vector<std::string> active = set.param_paths();
    AdamState<S> adam;
    Rng rng(derive_seed(cfg.seed, "ga_batches"));
    ParamStore<S>& store = policy.params();
    for (int t = 1; t <= cfg.steps; ++t) {
        const auto b_f = unlearn_detail::sample_batch(data.forget, cfg.batch, rng);
        store.zero_grads();
        Tape<S> tape;
        Tensor<S> loss = batch_ce_loss(&tape, policy, b_f);
        baseline_detail::check_finite_loss<S>(static_cast<double>(loss.item()), "ga", t);
        if (cfg.ga_retain_weight != 0.0) {
            if (data.retain.empty()) throw ValueError("ga_unlearn: retain weight set but retain set empty");
            const auto b_r = unlearn_detail::sample_batch(data.retain, cfg.batch, rng);
            Tensor<S> retain_ce = batch_ce_loss(&tape, policy, b_r);
            loss = sub(&tape, scale(&tape, retain_ce, cfg.ga_retain_weight), loss);
        } else {
            loss = scale(&tape, loss, -1.0);  // ascend the forget CE
        }
        tape.backward(loss);
        adam_step(store, adam, cfg.lr, active);
    }
    store.set_requires_grad_all(false);
    return set;
}

// Mean over the batch of (2/beta) * log(1 + (p_theta / p_theta0)^beta) on
// sequence likelihoods.
template <typename S>
Tensor<S> npo_forget_term(Tape<S>* tape, const TinyVlaPolicy<S>& policy, RefCache<S>& ref,
                          const std::vector<const Episode*>& batch, double beta) {
    if (batch.empty()) throw ValueError("npo_forget_term: empty batch");
    Tensor<S> total;
    for (const Episode* ep : batch) {
        const Tensor<S> scene = scene_to_channels<S>(ep->scene, policy.config());
        const std::vector<int> targets = teacher_targets(ep->expert_tokens);
        Tensor<S> logits =
            policy.forward_logits(tape, scene, ep->instruction.tokens, teacher_prefix(ep->expert_tokens));
        Tensor<S> ll = sequence_log_prob(tape, logits, targets);
        const double ll0 = baseline_detail::sequence_log_prob_of(ref.get(*ep).logits, targets);
        Tensor<S> term = softplus(tape, add_const(tape, scale(tape, ll, beta), -beta * ll0));
        total = total.defined() ? add(tape, total, term) : term;
    }
    return scale(tape, total, 2.0 / (beta * static_cast<double>(batch.size())));
}

// Preference-style objective on sequence likelihood ratios against the
// frozen reference, plus a weighted retain CE.
template <typename S>
LoraSet<S> npo_unlearn(TinyVlaPolicy<S>& policy, RefCache<S>& ref, const StageData& data,
                       const BaselineConfig& cfg) {
    cfg.validate();
    if (data.forget.empty() || data.retain.empty())
        throw ValueError("npo_unlearn: empty forget or retain set");
    LoraSet<S> set = baseline_detail::attach_broad_adapters(policy, cfg);
    const std::vector<std::string> active = set.param_paths();
    AdamState<S> adam;
    Rng rng(derive_seed(cfg.seed, "npo_batches"));
    ParamStore<S>& store = policy.params();
    const double beta = cfg.npo_beta;
    for (int t = 1; t <= cfg.steps; ++t) {
        const auto b_f = unlearn_detail::sample_batch(data.forget, cfg.batch, rng);
        const auto b_r = unlearn_detail::sample_batch(data.retain, cfg.batch, rng);
        store.zero_grads();
        Tape<S> tape;
        Tensor<S> loss = npo_forget_term(&tape, policy, ref, b_f, beta);
        if (cfg.retain_weight != 0.0)
            loss = add(&tape, loss, scale(&tape, batch_ce_loss(&tape, policy, b_r), cfg.retain_weight));
        baseline_detail::check_finite_loss<S>(static_cast<double>(loss.item()), "npo", t);
        tape.backward(loss);
        adam_step(store, adam, cfg.lr, active);
    }
    store.set_requires_grad_all(false);
    return set;
}

// Dampening factor for one weight: below 1 only where the forget importance
// exceeds threshold times the retain importance.
inline double ssd_scale_factor(double imp_forget, double imp_retain, double threshold, double floor) {
    if (!(imp_forget > threshold * imp_retain)) return 1.0;
    return std::min(1.0, floor * imp_retain / imp_forget);
}

// Retraining-free parameter dampening: per-element squared-gradient
// importances over the forget and retain sets, then a single scaling pass on
// weights whose forget importance dominates.
template <typename S>
void ssd_unlearn(TinyVlaPolicy<S>& policy, const StageData& data, const BaselineConfig& cfg) {
    cfg.validate();
    if (data.forget.empty() || data.retain.empty())
        throw ValueError("ssd_unlearn: empty forget or retain set");
    ParamStore<S>& store = policy.params();
    store.set_requires_grad_all(true);

    auto importances = [&](const std::vector<Episode>& eps) {
        std::map<std::string, MatD> acc;
        for (auto& [path, e] : store) acc[path] = MatD::Zero(e.tensor.rows(), e.tensor.cols());
        for (const auto& ep : eps) {
            store.zero_grads();
            const Tensor<S> scene = scene_to_channels<S>(ep.scene, policy.config());
            Tape<S> tape;
            Tensor<S> ce = cross_entropy_logits(
                &tape,
                policy.forward_logits(&tape, scene, ep.instruction.tokens, teacher_prefix(ep.expert_tokens)),
                teacher_targets(ep.expert_tokens));
            tape.backward(ce);
            for (auto& [path, e] : store)
                if (e.tensor.has_grad())
                    acc[path] += e.tensor.grad().template cast<double>().cwiseProduct(
                        e.tensor.grad().template cast<double>());
        }
        for (auto& [path, m] : acc) m /= static_cast<double>(eps.size());
        return acc;
    };

    const auto imp_f = importances(data.forget);
    const auto imp_r = importances(data.retain);
    store.zero_grads();
    store.set_requires_grad_all(false);

    for (auto& [path, e] : store) {
        const MatD& f = imp_f.at(path);
        const MatD& r = imp_r.at(path);
        Mat<S>& w = e.tensor.value();
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) {
                const double factor = ssd_scale_factor(f(i, j), r(i, j), cfg.ssd_threshold, cfg.ssd_floor);
                if (factor != 1.0) w(i, j) = static_cast<S>(static_cast<double>(w(i, j)) * factor);
            }
    }
}

// Saliency mask from one full-batch forget-gradient pass: the top fraction
// of parameter entries by |grad|, flat index as the tie-break.
template <typename S>
std::map<std::string, Mat<S>> salun_mask(TinyVlaPolicy<S>& policy, const std::vector<Episode>& forget_eps,
                                         double top_fraction) {
    if (forget_eps.empty()) throw ValueError("salun_mask: empty forget set");
    ParamStore<S>& store = policy.params();
    std::vector<bool> saved;
    const std::vector<std::string> paths = store.paths();
    for (const auto& p : paths) {
        saved.push_back(store.at(p).requires_grad());
        store.at(p).set_requires_grad(true);
    }
    store.zero_grads();
    baseline_detail::accumulate_ce_grads(policy, forget_eps);

    std::int64_t total = 0;
    for (const auto& p : paths) total += store.at(p).size();
    std::vector<std::pair<double, std::int64_t>> mag(static_cast<std::size_t>(total));
    std::int64_t at = 0;
    for (const auto& p : paths) {
        const auto& t = store.at(p);
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                const double g = t.has_grad() ? std::abs(static_cast<double>(t.grad()(i, j))) : 0.0;
                mag[static_cast<std::size_t>(at)] = {g, at};
                ++at;
            }
    }
    const std::int64_t keep = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::llround(top_fraction * static_cast<double>(total))));
    std::stable_sort(mag.begin(), mag.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<char> mask_flat(static_cast<std::size_t>(total), 0);
    for (std::int64_t k = 0; k < keep; ++k) mask_flat[static_cast<std::size_t>(mag[static_cast<std::size_t>(k)].second)] = 1;

    std::map<std::string, Mat<S>> masks;
    at = 0;
    for (const auto& p : paths) {
        const auto& t = store.at(p);
        Mat<S> m(t.rows(), t.cols());
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) m(i, j) = mask_flat[static_cast<std::size_t>(at++)] ? S(1) : S(0);
        masks[p] = std::move(m);
    }
    store.zero_grads();
    for (std::size_t i = 0; i < paths.size(); ++i) store.at(paths[i]).set_requires_grad(saved[i]);
    return masks;
}

// Saliency-masked unlearning: masked ascent-on-forget / descent-on-retain
// steps on the raw weights.
template <typename S>
void salun_unlearn(TinyVlaPolicy<S>& policy, const StageData& data, const BaselineConfig& cfg) {
    cfg.validate();
    if (data.forget.empty() || data.retain.empty())
        throw ValueError("salun_unlearn: empty forget or retain set");
    ParamStore<S>& store = policy.params();
    const std::vector<std::string> paths = store.paths();
    std::map<std::string, Mat<S>> masks = salun_mask(policy, data.forget, cfg.salun_top_fraction);
    store.set_requires_grad_all(true);

    AdamState<S> adam;
    Rng rng(derive_seed(cfg.seed, "salun_batches"));
    for (int t = 1; t <= cfg.steps; ++t) {
        const auto b_f = unlearn_detail::sample_batch(data.forget, cfg.batch, rng);
        const auto b_r = unlearn_detail::sample_batch(data.retain, cfg.batch, rng);
        store.zero_grads();
        Tape<S> tape;
        Tensor<S> forget_ce = batch_ce_loss(&tape, policy, b_f);
        Tensor<S> retain_ce = batch_ce_loss(&tape, policy, b_r);
        Tensor<S> loss = sub(&tape, scale(&tape, retain_ce, cfg.retain_weight), forget_ce);
        baseline_detail::check_finite_loss<S>(static_cast<double>(loss.item()), "salun", t);
        tape.backward(loss);
        for (const auto& p : paths) {
            Tensor<S>& tns = store.at(p);
            if (tns.has_grad()) tns.grad() = tns.grad().cwiseProduct(masks[p]);
            else tns.accumulate_grad(Mat<S>::Zero(tns.rows(), tns.cols()));
        }
        adam_step(store, adam, cfg.lr, paths);
    }
    store.set_requires_grad_all(false);
}

// Shared entry point so the audit stays method-agnostic. Returns the adapter
// set for adapter-based methods (empty for SSD / SalUn which edit weights).
template <typename S>
LoraSet<S> run_baseline(TinyVlaPolicy<S>& policy, const FrozenReference<S>& reference,
                        const StageData& data, const BaselineConfig& cfg) {
    if (cfg.method == "ga") return ga_unlearn(policy, data, cfg);
    if (cfg.method == "npo") {
        RefCache<S> ref(reference.model);
        return npo_unlearn(policy, ref, data, cfg);
    }
    if (cfg.method == "ssd") {
        ssd_unlearn(policy, data, cfg);
        return {};
    }
    if (cfg.method == "salun") {
        salun_unlearn(policy, data, cfg);
        return {};
    }
    throw ConfigError("unknown baseline method '" + cfg.method + "'");
}

}  // namespace forgelab
