#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgelab/eval.hpp"
#include "forgelab/policy.hpp"
#include "forgelab/stage_config.hpp"
#include "forgelab/train.hpp"
#include "forgelab/world.hpp"

namespace forgelab {

// ---------------------------------------------------------------------------
// selection scores
// ---------------------------------------------------------------------------

struct SelectionScore {
    int layer = -1;
    Component component = Component::Vision;
    double g_forget_norm = 0.0;
    double g_retain_norm = 0.0;
    double cos_fr = 0.0;      // cos(g_f, g_r); 0 when either gradient vanishes
    double theta_norm = 0.0;  // parameter norm of the layer
    double phi = 0.0;
    double sig = 0.0;
};

// Reference-model outputs cached per episode id; the reference is frozen so
// entries stay valid for the whole pipeline.
template <typename S>
class RefCache {
public:
    struct Entry {
        Mat<S> logits;
        Mat<S> h_vision;
        Mat<S> h_projector;
    };

    explicit RefCache(const TinyVlaPolicy<S>& ref) : ref_(&ref) {}

    const Entry& get(const Episode& ep) {
        auto it = cache_.find(ep.id);
        if (it != cache_.end()) return it->second;
        const Tensor<S> scene = scene_to_channels<S>(ep.scene, ref_->config());
        const auto out =
            ref_->forward_full(nullptr, scene, ep.instruction.tokens, teacher_prefix(ep.expert_tokens));
        Entry e{out.logits.value(), out.h_vision.value(), out.h_projector.value()};
        return cache_.emplace(ep.id, std::move(e)).first->second;
    }

    const TinyVlaPolicy<S>& model() const { return *ref_; }

private:
    const TinyVlaPolicy<S>* ref_;
    std::unordered_map<int, Entry> cache_;
};

namespace unlearn_detail {

template <typename S>
Eigen::VectorXd layer_grad_vector(const ParamStore<S>& store, const std::vector<std::string>& paths) {
    std::int64_t total = 0;
    for (const auto& p : paths) total += store.at(p).size();
    Eigen::VectorXd v(total);
    std::int64_t at = 0;
    for (const auto& p : paths) {
        const auto& t = store.at(p);
        if (t.has_grad()) {
            const auto& g = t.grad();
            for (Eigen::Index i = 0; i < g.rows(); ++i)
                for (Eigen::Index j = 0; j < g.cols(); ++j) v(at++) = static_cast<double>(g(i, j));
        } else {
            for (Eigen::Index i = 0; i < t.size(); ++i) v(at++) = 0.0;
        }
    }
    return v;
}

template <typename S>
double layer_param_norm(const ParamStore<S>& store, const std::vector<std::string>& paths) {
    double sq = 0.0;
    for (const auto& p : paths) {
        const auto& m = store.at(p).value();
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                const double v = static_cast<double>(m(i, j));
                sq += v * v;
            }
    }
    return std::sqrt(sq);
}

inline std::vector<const Episode*> as_ptrs(const std::vector<Episode>& eps) {
    std::vector<const Episode*> out;
    out.reserve(eps.size());
    for (const auto& e : eps) out.push_back(&e);
    return out;
}

}  // namespace unlearn_detail

// Per-layer forget/retain gradient statistics from one full-batch backward
// per objective (CE terms only).
template <typename S>
std::vector<SelectionScore> layer_grad_stats(TinyVlaPolicy<S>& policy,
                                             const std::vector<const Episode*>& forget_batch,
                                             const std::vector<const Episode*>& retain_batch,
                                             Component component) {
    if (forget_batch.empty() || retain_batch.empty())
        throw ValueError("layer_grad_stats: empty forget or retain batch");
    const int layers = policy.layer_count(component);
    if (layers < 1) throw ValueError("layer_grad_stats: component has no layers");

    ParamStore<S>& store = policy.params();
    std::vector<std::vector<std::string>> layer_paths;
    std::vector<bool> saved_flags;
    std::vector<std::string> all_paths;
    for (int l = 0; l < layers; ++l) {
        layer_paths.push_back(policy.layer_param_paths(component, l));
        for (const auto& p : layer_paths.back()) all_paths.push_back(p);
    }
    for (const auto& p : all_paths) {
        saved_flags.push_back(store.at(p).requires_grad());
        store.at(p).set_requires_grad(true);
    }

    auto grads_for = [&](const std::vector<const Episode*>& batch) {
        store.zero_grads();
        Tape<S> tape;
        Tensor<S> loss = batch_ce_loss(&tape, policy, batch);
        tape.backward(loss);
        std::vector<Eigen::VectorXd> per_layer;
        for (int l = 0; l < layers; ++l)
            per_layer.push_back(unlearn_detail::layer_grad_vector(store, layer_paths[static_cast<std::size_t>(l)]));
        return per_layer;
    };

    const auto gf = grads_for(forget_batch);
    const auto gr = grads_for(retain_batch);
    store.zero_grads();
    for (std::size_t i = 0; i < all_paths.size(); ++i)
        store.at(all_paths[i]).set_requires_grad(saved_flags[i]);

    std::vector<SelectionScore> out;
    for (int l = 0; l < layers; ++l) {
        SelectionScore s;
        s.layer = l;
        s.component = component;
        s.g_forget_norm = gf[static_cast<std::size_t>(l)].norm();
        s.g_retain_norm = gr[static_cast<std::size_t>(l)].norm();
        const double denom = s.g_forget_norm * s.g_retain_norm;
        s.cos_fr = denom > 0.0 ? gf[static_cast<std::size_t>(l)].dot(gr[static_cast<std::size_t>(l)]) / denom : 0.0;
        s.theta_norm = unlearn_detail::layer_param_norm(store, layer_paths[static_cast<std::size_t>(l)]);
        out.push_back(s);
    }
    return out;
}

// Ratio-aware score: (|g_f| / (|theta| + eps)) * (1 - cos(g_f, g_r))^alpha.
inline void score_ratio(std::vector<SelectionScore>& stats, double alpha_ratio, double eps) {
    for (auto& s : stats)
        s.phi = s.g_forget_norm / (s.theta_norm + eps) * std::pow(1.0 - s.cos_fr, alpha_ratio);
}

// Significance ratio: |g_f| / (|g_r| + eps).
inline void score_sig(std::vector<SelectionScore>& stats, double eps) {
    for (auto& s : stats) s.sig = s.g_forget_norm / (s.g_retain_norm + eps);
}

namespace unlearn_detail {

inline std::vector<int> threshold_then_rank(const std::vector<SelectionScore>& stats, double tau,
                                            double SelectionScore::*field) {
    std::vector<int> order;
    for (std::size_t i = 0; i < stats.size(); ++i)
        if (stats[i].*field > tau) order.push_back(static_cast<int>(i));
    if (order.empty()) {
        int best = 0;
        for (std::size_t i = 1; i < stats.size(); ++i)
            if (stats[i].*field > stats[best].*field) best = static_cast<int>(i);
        return {stats[static_cast<std::size_t>(best)].layer};
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double va = stats[static_cast<std::size_t>(a)].*field;
        const double vb = stats[static_cast<std::size_t>(b)].*field;
        if (va == vb) return stats[static_cast<std::size_t>(a)].layer < stats[static_cast<std::size_t>(b)].layer;
        return va > vb;
    });
    std::vector<int> out;
    for (const int i : order) out.push_back(stats[static_cast<std::size_t>(i)].layer);
    return out;
}

}  // namespace unlearn_detail

// Layers with phi above tau, highest first, truncated to the budget; falls
// back to the single argmax layer when the threshold empties the set.
inline std::vector<int> vision_select(std::vector<SelectionScore> stats, double tau, int budget,
                                      double alpha_ratio, double eps) {
    if (stats.empty()) throw ValueError("vision_select: no candidate layers");
    score_ratio(stats, alpha_ratio, eps);
    std::vector<int> ranked = unlearn_detail::threshold_then_rank(stats, tau, &SelectionScore::phi);
    if (static_cast<int>(ranked.size()) > budget) ranked.resize(static_cast<std::size_t>(budget));
    return ranked;
}

struct LlmSelection {
    std::vector<int> selected;  // descending significance, truncated to budget
    std::vector<int> queue;     // expansion candidates, descending significance
};

inline LlmSelection llm_select(std::vector<SelectionScore> stats, double tau, int budget, double eps) {
    if (stats.empty()) throw ValueError("llm_select: no candidate layers");
    score_sig(stats, eps);
    std::vector<int> ranked = unlearn_detail::threshold_then_rank(stats, tau, &SelectionScore::sig);
    LlmSelection out;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (static_cast<int>(i) < budget) out.selected.push_back(ranked[i]);
        else out.queue.push_back(ranked[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// projected conflict resolution
// ---------------------------------------------------------------------------

// Processes gradients in the given order, projecting g_i off g_j whenever
// they conflict, using the current (possibly already projected) g_j; the
// result is the sum in the original index order.
inline Eigen::VectorXd pcgrad_in_order(std::vector<Eigen::VectorXd> grads, const std::vector<int>& order) {
    if (grads.empty()) throw ValueError("pcgrad: empty gradient list");
    const Eigen::Index len = grads.front().size();
    for (const auto& g : grads)
        if (g.size() != len) throw DimensionError("pcgrad: gradient length mismatch");
    for (const int i : order) {
        for (const int j : order) {
            if (i == j) continue;
            const double dot = grads[static_cast<std::size_t>(i)].dot(grads[static_cast<std::size_t>(j)]);
            if (dot < 0.0) {
                const double denom = grads[static_cast<std::size_t>(j)].squaredNorm();
                grads[static_cast<std::size_t>(i)] -= (dot / denom) * grads[static_cast<std::size_t>(j)];
            }
        }
    }
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(len);
    for (const auto& g : grads) sum += g;
    return sum;
}

inline Eigen::VectorXd pcgrad(const std::vector<Eigen::VectorXd>& grads, Rng& rng) {
    std::vector<int> order(grads.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    return pcgrad_in_order(grads, order);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// CE on retained episodes plus the KL anchor to the frozen reference
// (reference distribution first).
template <typename S>
Tensor<S> retain_loss(Tape<S>* tape, const TinyVlaPolicy<S>& policy, RefCache<S>& ref,
                      const std::vector<const Episode*>& batch, double beta_kl,
                      Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw ValueError("retain_loss: empty batch");
    const PolicyConfig& cfg = policy.config();
    std::vector<Tensor<S>> logit_blocks;
    std::vector<int> targets;
    Tensor<S> kl_total;
    std::int64_t tokens = 0;
    for (const Episode* ep : batch) {
        const Tensor<S> scene = scene_to_channels<S>(ep->scene, cfg);
        const std::vector<int> prefix = teacher_prefix(ep->expert_tokens);
        const std::vector<int> t = teacher_targets(ep->expert_tokens);
        Tensor<S> logits = policy.forward_logits(tape, scene, ep->instruction.tokens, prefix, dropout_rng);
        logit_blocks.push_back(logits);
        targets.insert(targets.end(), t.begin(), t.end());
        if (beta_kl != 0.0) {
            Tensor<S> ref_logits(Mat<S>(ref.get(*ep).logits));
            Tensor<S> kl = kl_divergence(tape, ref_logits, logits);
            kl = scale(tape, kl, static_cast<double>(t.size()));
            kl_total = kl_total.defined() ? add(tape, kl_total, kl) : kl;
        }
        tokens += static_cast<std::int64_t>(t.size());
    }
    Tensor<S> stacked = logit_blocks.size() == 1 ? logit_blocks.front() : concat_rows(tape, logit_blocks);
    Tensor<S> loss = cross_entropy_logits(tape, stacked, targets, kPad);
    if (kl_total.defined())
        loss = add(tape, loss, scale(tape, kl_total, beta_kl / static_cast<double>(tokens)));
    return loss;
}

// CE on the forget episodes; the pipeline ascends it by negating the
// gradient group.
template <typename S>
Tensor<S> forget_loss(Tape<S>* tape, const TinyVlaPolicy<S>& policy,
                      const std::vector<const Episode*>& batch, Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw ValueError("forget_loss: empty batch");
    return batch_ce_loss(tape, policy, batch, dropout_rng);
}

// KL(p_theta || p_theta0) on forget episodes, token-weighted.
template <typename S>
Tensor<S> mismatch_loss(Tape<S>* tape, const TinyVlaPolicy<S>& policy, RefCache<S>& ref,
                        const std::vector<const Episode*>& batch, Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw ValueError("mismatch_loss: empty batch");
    const PolicyConfig& cfg = policy.config();
    Tensor<S> total;
    std::int64_t tokens = 0;
    for (const Episode* ep : batch) {
        const Tensor<S> scene = scene_to_channels<S>(ep->scene, cfg);
        const std::vector<int> prefix = teacher_prefix(ep->expert_tokens);
        Tensor<S> logits = policy.forward_logits(tape, scene, ep->instruction.tokens, prefix, dropout_rng);
        Tensor<S> ref_logits(Mat<S>(ref.get(*ep).logits));
        Tensor<S> kl = scale(tape, kl_divergence(tape, logits, ref_logits),
                             static_cast<double>(logits.rows()));
        total = total.defined() ? add(tape, total, kl) : kl;
        tokens += logits.rows();
    }
    return scale(tape, total, 1.0 / static_cast<double>(tokens));
}

// Distillation of pooled vision / projector features toward the reference on
// retain-union-boundary batches.
template <typename S>
Tensor<S> feat_loss(Tape<S>* tape, const TinyVlaPolicy<S>& policy, RefCache<S>& ref,
                    const std::vector<const Episode*>& batch, double gamma_feat,
                    Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw ValueError("feat_loss: empty batch");
    const PolicyConfig& cfg = policy.config();
    Tensor<S> total;
    for (const Episode* ep : batch) {
        const Tensor<S> scene = scene_to_channels<S>(ep->scene, cfg);
        const auto vis = policy.encode_vision(tape, scene, dropout_rng);
        const auto proj = policy.project(tape, vis.tokens, dropout_rng);
        const auto& entry = ref.get(*ep);
        Tensor<S> dv = sub(tape, vis.pooled, Tensor<S>(Mat<S>(entry.h_vision)));
        Tensor<S> term = squared_norm(tape, dv);
        if (gamma_feat != 0.0) {
            Tensor<S> dp = sub(tape, proj.pooled, Tensor<S>(Mat<S>(entry.h_projector)));
            term = add(tape, term, scale(tape, squared_norm(tape, dp), gamma_feat));
        }
        total = total.defined() ? add(tape, total, term) : term;
    }
    return scale(tape, total, 1.0 / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------
// staged pipeline
// ---------------------------------------------------------------------------

struct StageTracePoint {
    int step = 0;
    double l_retain = 0.0;
    double l_forget = 0.0;
    double l_mismatch = 0.0;
    double l_feat = 0.0;
    bool evaluated = false;
    double forget_acc = 0.0;
    double retain_acc = 0.0;
};

struct ExpansionEvent {
    int step = 0;
    int layer = 0;
};

struct StageReport {
    std::string stage;
    std::vector<SelectionScore> scores;
    std::vector<int> selected;
    int steps_run = 0;
    bool early_stopped = false;
    std::vector<ExpansionEvent> expansions;
    std::vector<StageTracePoint> trace;
    double base_retain_acc = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json sc = nlohmann::json::array();
        for (const auto& s : scores)
            sc.push_back({{"layer", s.layer},
                          {"component", component_tag(s.component)},
                          {"g_forget_norm", s.g_forget_norm},
                          {"g_retain_norm", s.g_retain_norm},
                          {"cos", s.cos_fr},
                          {"theta_norm", s.theta_norm},
                          {"phi", s.phi},
                          {"sig", s.sig}});
        nlohmann::json ev = nlohmann::json::array();
        for (const auto& e : expansions) ev.push_back({{"step", e.step}, {"layer", e.layer}});
        nlohmann::json tr = nlohmann::json::array();
        for (const auto& t : trace) {
            nlohmann::json row = {{"step", t.step},
                                  {"l_retain", t.l_retain},
                                  {"l_forget", t.l_forget},
                                  {"l_mismatch", t.l_mismatch},
                                  {"l_feat", t.l_feat}};
            if (t.evaluated) {
                row["forget_acc"] = t.forget_acc;
                row["retain_acc"] = t.retain_acc;
            }
            tr.push_back(row);
        }
        return {{"stage", stage},
                {"scores", sc},
                {"selected", selected},
                {"steps_run", steps_run},
                {"early_stopped", early_stopped},
                {"expansions", ev},
                {"base_retain_acc", base_retain_acc},
                {"trace", tr}};
    }

    std::string to_csv() const {
        std::string out = "step,l_retain,l_forget,l_mismatch,l_feat,forget_acc,retain_acc\n";
        char buf[160];
        for (const auto& t : trace) {
            if (t.evaluated)
                std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", t.step, t.l_retain,
                              t.l_forget, t.l_mismatch, t.l_feat, t.forget_acc, t.retain_acc);
            else
                std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,,\n", t.step, t.l_retain, t.l_forget,
                              t.l_mismatch, t.l_feat);
            out += buf;
        }
        return out;
    }
};

struct StageHooks {
    // Test hook overriding the stopping-criteria evaluation; returns
    // (forget_acc, retain_acc).
    std::function<std::pair<double, double>(int step)> gamma_eval;
};

struct StageData {
    std::vector<Episode> forget;
    std::vector<Episode> retain;
    std::vector<Episode> boundary;
};

namespace unlearn_detail {

inline std::vector<const Episode*> sample_batch(const std::vector<Episode>& eps, int want, Rng& rng) {
    const int n = static_cast<int>(eps.size());
    const int k = std::min(want, n);
    std::vector<int> idx = rng.sample_indices(n, k);
    std::vector<const Episode*> out;
    out.reserve(static_cast<std::size_t>(k));
    for (const int i : idx) out.push_back(&eps[static_cast<std::size_t>(i)]);
    return out;
}

inline Component stage_component(Stage s) {
    switch (s) {
        case Stage::Vision: return Component::Vision;
        case Stage::Projector: return Component::Projector;
        case Stage::Reasoning: return Component::Backbone;
    }
    return Component::Vision;
}

}  // namespace unlearn_detail

// One selective-unlearning stage: select layers, attach adapters on them,
// run PCGrad-combined updates with early stopping, expanding the reasoning
// set when forgetting is insufficient.
template <typename S>
StageReport run_stage(TinyVlaPolicy<S>& policy, RefCache<S>& ref, const StageData& data, Stage stage,
                      const StageConfig& cfg, double base_retain_acc, LoraSet<S>& all_adapters,
                      const StageHooks& hooks = {}) {
    cfg.validate();
    if (data.forget.empty() || data.retain.empty())
        throw ValueError("run_stage: forget and retain sets must be non-empty");

    const Component comp = unlearn_detail::stage_component(stage);
    StageReport report;
    report.stage = stage_name(stage);
    report.base_retain_acc = base_retain_acc;

    // Selection statistics on deterministic full-batch prefixes.
    const std::vector<Episode> sel_f = episode_prefix(data.forget, cfg.selection_episodes);
    const std::vector<Episode> sel_r = episode_prefix(data.retain, cfg.selection_episodes);
    std::vector<SelectionScore> stats = layer_grad_stats(policy, unlearn_detail::as_ptrs(sel_f),
                                                         unlearn_detail::as_ptrs(sel_r), comp);
    score_ratio(stats, cfg.alpha_ratio, cfg.eps);
    score_sig(stats, cfg.eps);
    report.scores = stats;

    std::vector<int> queue;
    if (stage == Stage::Reasoning) {
        LlmSelection sel = llm_select(stats, cfg.tau_for(stage), cfg.budget_for(stage), cfg.eps);
        report.selected = sel.selected;
        queue = sel.queue;
    } else {
        report.selected = vision_select(stats, cfg.tau_for(stage), cfg.budget_for(stage), cfg.alpha_ratio,
                                        cfg.eps);
    }

    // Freeze everything, then enable only this stage's adapters.
    policy.params().set_requires_grad_all(false);
    std::vector<std::string> active;
    auto attach_layer = [&](int layer) {
        const std::uint64_t seed = derive_seed(cfg.seed, (report.stage + "_lora_" + std::to_string(layer)).c_str());
        LoraSet<S> s = policy.attach_lora(policy.layer_weight_paths(comp, layer), cfg.lora_rank,
                                          cfg.lora_alpha, cfg.lora_dropout, seed);
        for (const auto& p : s.param_paths()) {
            policy.params().at(p).set_requires_grad(true);
            active.push_back(p);
        }
        for (auto& ad : s.adapters) all_adapters.adapters.push_back(std::move(ad));
    };
    for (const int layer : report.selected) attach_layer(layer);
    if (stage == Stage::Reasoning && cfg.include_action_rows) {
        const std::uint64_t seed = derive_seed(cfg.seed, "reasoning_lora_action_rows");
        LoraSet<S> s = policy.attach_lora(policy.action_row_paths(), cfg.lora_rank, cfg.lora_alpha,
                                          cfg.lora_dropout, seed);
        for (const auto& p : s.param_paths()) {
            policy.params().at(p).set_requires_grad(true);
            active.push_back(p);
        }
        for (auto& ad : s.adapters) all_adapters.adapters.push_back(std::move(ad));
    }
    std::sort(active.begin(), active.end());

    AdamState<S> adam;
    Rng batch_rng(derive_seed(cfg.seed, (report.stage + "_batches").c_str()));
    Rng pcg_rng(derive_seed(cfg.seed, (report.stage + "_pcgrad").c_str()));
    Rng drop_rng(derive_seed(cfg.seed, (report.stage + "_dropout").c_str()));

    const std::vector<Episode> eval_f = episode_prefix(data.forget, cfg.eval_episodes);
    const std::vector<Episode> eval_r = episode_prefix(data.retain, cfg.eval_episodes);

    const int total_steps = cfg.steps_for(stage);
    ParamStore<S>& store = policy.params();
    for (int t = 1; t <= total_steps; ++t) {
        report.steps_run = t;
        auto b_f = unlearn_detail::sample_batch(data.forget, cfg.batch_forget, batch_rng);
        auto b_r = unlearn_detail::sample_batch(data.retain, cfg.batch_retain, batch_rng);
        auto b_m = data.boundary.empty()
                       ? std::vector<const Episode*>{}
                       : unlearn_detail::sample_batch(data.boundary, cfg.batch_boundary, batch_rng);
        std::vector<const Episode*> b_rm = b_r;
        b_rm.insert(b_rm.end(), b_m.begin(), b_m.end());

        Rng* drop = cfg.lora_dropout > 0.0 ? &drop_rng : nullptr;
        StageTracePoint tp;
        tp.step = t;

        // Group 1: retain objective plus feature preservation.
        store.zero_grads();
        Tape<S> tape1;
        Tensor<S> l_ret = retain_loss(&tape1, policy, ref, b_r, cfg.beta_kl, drop);
        Tensor<S> l_feat = feat_loss(&tape1, policy, ref, b_rm, cfg.gamma_feat, drop);
        Tensor<S> group1 = add(&tape1, l_ret, scale(&tape1, l_feat, cfg.lambda_feat));
        tp.l_retain = static_cast<double>(l_ret.item());
        tp.l_feat = static_cast<double>(l_feat.item());
        if (!std::isfinite(tp.l_retain) || !std::isfinite(tp.l_feat))
            throw NumericError(report.stage + " stage: non-finite retain/feat loss at step " + std::to_string(t));
        tape1.backward(group1);
        Eigen::VectorXd g1 = flatten_grads(store, active).template cast<double>();

        // Group 2: negated forget CE (gradient ascent).
        store.zero_grads();
        Tape<S> tape2;
        Tensor<S> l_f = forget_loss(&tape2, policy, b_f, drop);
        tp.l_forget = static_cast<double>(l_f.item());
        if (!std::isfinite(tp.l_forget))
            throw NumericError(report.stage + " stage: non-finite forget loss at step " + std::to_string(t));
        tape2.backward(l_f);
        Eigen::VectorXd g2 = -cfg.lambda_f * flatten_grads(store, active).template cast<double>();

        // Group 3: negated mismatch divergence.
        store.zero_grads();
        Tape<S> tape3;
        Tensor<S> l_m = mismatch_loss(&tape3, policy, ref, b_f, drop);
        tp.l_mismatch = static_cast<double>(l_m.item());
        if (!std::isfinite(tp.l_mismatch))
            throw NumericError(report.stage + " stage: non-finite mismatch loss at step " + std::to_string(t));
        tape3.backward(l_m);
        Eigen::VectorXd g3 = -cfg.lambda_m * flatten_grads(store, active).template cast<double>();

        const Eigen::VectorXd combined = pcgrad({g1, g2, g3}, pcg_rng);
        scatter_flat(store, Eigen::Matrix<S, Eigen::Dynamic, 1>(combined.template cast<S>()), active);
        adam_step(store, adam, cfg.lr, active);

        if (t % cfg.eval_every == 0) {
            double facc, racc;
            if (hooks.gamma_eval) {
                const auto pr = hooks.gamma_eval(t);
                facc = pr.first;
                racc = pr.second;
            } else {
                facc = token_eval(policy, eval_f).acc;
                racc = token_eval(policy, eval_r).acc;
            }
            tp.evaluated = true;
            tp.forget_acc = facc;
            tp.retain_acc = racc;

            const bool forget_ok = facc <= cfg.stop_forget_acc;
            if (stage == Stage::Reasoning && !forget_ok && !queue.empty()) {
                const int layer = queue.front();
                queue.erase(queue.begin());
                attach_layer(layer);
                std::sort(active.begin(), active.end());
                report.selected.push_back(layer);
                report.expansions.push_back({t, layer});
            }
            if (forget_ok && racc >= cfg.stop_retain_frac * base_retain_acc) {
                report.early_stopped = true;
                report.trace.push_back(tp);
                break;
            }
        }
        report.trace.push_back(tp);
    }
    return report;
}

// Identity hook standing in for the out-of-scope influence triage pass.
template <typename S>
using TriageHook = std::function<StageData(const TinyVlaPolicy<S>&, const StageData&)>;

template <typename S>
struct PipelineResult {
    LoraSet<S> adapters;
    std::vector<StageReport> stages;
    bool no_op = false;
    double base_forget_acc = 0.0;
    double base_retain_acc = 0.0;
};

// The full staged pipeline: snapshot the reference, run the requested stages
// in vision -> projector -> reasoning order, and leave the adapters attached
// on the policy (mergeable or detachable by the caller).
template <typename S>
PipelineResult<S> vla_forget(TinyVlaPolicy<S>& policy, const FrozenReference<S>& reference,
                             const StageData& data, const StageConfig& cfg,
                             const StageHooks& hooks = {}, TriageHook<S> triage = {}) {
    cfg.validate();
    RefCache<S> ref(reference.model);
    PipelineResult<S> result;

    const StageData working = triage ? triage(policy, data) : data;

    const std::vector<Episode> eval_f = episode_prefix(working.forget, cfg.eval_episodes);
    const std::vector<Episode> eval_r = episode_prefix(working.retain, cfg.eval_episodes);
    result.base_forget_acc = token_eval(reference.model, eval_f).acc;
    result.base_retain_acc = token_eval(reference.model, eval_r).acc;

    bool any = false;
    for (const Stage stage : {Stage::Vision, Stage::Projector, Stage::Reasoning}) {
        const bool wanted = std::find(cfg.stages.begin(), cfg.stages.end(), stage_name(stage)) != cfg.stages.end();
        if (!wanted) continue;
        any = true;
        result.stages.push_back(
            run_stage(policy, ref, working, stage, cfg, result.base_retain_acc, result.adapters, hooks));
    }
    result.no_op = !any;
    policy.params().set_requires_grad_all(false);
    return result;
}

}  // namespace forgelab
