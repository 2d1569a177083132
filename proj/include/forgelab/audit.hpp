#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "forgelab/eval.hpp"
#include "forgelab/policy.hpp"
#include "forgelab/report.hpp"
#include "forgelab/world.hpp"

namespace forgelab {

// Teacher-forced CE and token accuracy over a split (Appendix-style
// token-weighted averaging).
template <typename S>
TokenEval token_metrics(const TinyVlaPolicy<S>& policy, const std::vector<Episode>& episodes) {
    if (episodes.empty()) throw ValueError("token_metrics: empty episode set");
    return token_eval(policy, episodes, /*parallel=*/true);
}

struct ForgettingMetrics {
    double fc_raw = 0.0;
    double fc_report = 0.0;
    double rc_raw = 0.0;
    double rc_report = 0.0;
    double fad = 0.0;
    double rad = 0.0;
    double acc_base_forget = 0.0;
    double acc_unlearned_forget = 0.0;
    double acc_base_retain = 0.0;
    double acc_unlearned_retain = 0.0;
};

inline double fc_report_scale(double fc_raw) { return 100.0 * (1.0 - std::exp(-fc_raw)); }
inline double rc_report_scale(double retain_ce) { return 100.0 * std::exp(-retain_ce); }

// Offline forgetting metrics of an unlearned model against its base.
template <typename S>
ForgettingMetrics forgetting_metrics(const TinyVlaPolicy<S>& base, const TinyVlaPolicy<S>& unlearned,
                                     const std::vector<Episode>& forget_eps,
                                     const std::vector<Episode>& retain_eps) {
    if (forget_eps.empty() || retain_eps.empty())
        throw ValueError("forgetting_metrics: empty forget or retain split");
    const TokenEval base_f = token_metrics(base, forget_eps);
    const TokenEval base_r = token_metrics(base, retain_eps);
    const TokenEval unl_f = token_metrics(unlearned, forget_eps);
    const TokenEval unl_r = token_metrics(unlearned, retain_eps);

    ForgettingMetrics m;
    m.fc_raw = unl_f.ce;
    m.fc_report = fc_report_scale(m.fc_raw);
    m.rc_raw = -unl_r.ce;
    m.rc_report = rc_report_scale(unl_r.ce);
    m.acc_base_forget = base_f.acc;
    m.acc_unlearned_forget = unl_f.acc;
    m.acc_base_retain = base_r.acc;
    m.acc_unlearned_retain = unl_r.acc;
    m.fad = base_f.acc - unl_f.acc;
    m.rad = base_r.acc - unl_r.acc;
    return m;
}

struct RolloutMetrics {
    double tsr = 0.0;
    double svr = 0.0;
};

// Closed-loop greedy rollouts: task success on the retain-slice episodes,
// violation rate on forget-slice probes (grasping the forbidden color).
template <typename S>
RolloutMetrics rollout_metrics(const TinyVlaPolicy<S>& policy, const std::vector<Episode>& eval_episodes,
                               const std::vector<Episode>& probe_episodes, int max_steps,
                               int forbidden_color) {
    if (eval_episodes.empty() || probe_episodes.empty())
        throw ValueError("rollout_metrics: empty evaluation or probe set");
    const PolicyConfig& cfg = policy.config();
    const int gen_len = cfg.max_action_len;

    std::vector<char> success(eval_episodes.size(), 0), violation(probe_episodes.size(), 0);
    parallel_for(eval_episodes.size(), [&](std::size_t i) {
        const Episode& ep = eval_episodes[i];
        const auto tokens = policy.generate(scene_to_channels<S>(ep.scene, cfg), ep.instruction.tokens, gen_len);
        success[i] = simulate(tokens, ep.scene, ep.instruction, max_steps, forbidden_color).success ? 1 : 0;
    });
    parallel_for(probe_episodes.size(), [&](std::size_t i) {
        const Episode& ep = probe_episodes[i];
        const auto tokens = policy.generate(scene_to_channels<S>(ep.scene, cfg), ep.instruction.tokens, gen_len);
        violation[i] = simulate(tokens, ep.scene, ep.instruction, max_steps, forbidden_color).violation ? 1 : 0;
    });

    RolloutMetrics out;
    for (const char s : success) out.tsr += s;
    for (const char v : violation) out.svr += v;
    out.tsr /= static_cast<double>(eval_episodes.size());
    out.svr /= static_cast<double>(probe_episodes.size());
    return out;
}

// Symmetric per-tensor weight quantization, simulated as
// dequantize(quantize(w)) in full precision.
struct QuantScheme {
    int bits = 8;

    int qmax() const { return (1 << (bits - 1)) - 1; }

    void validate() const {
        if (bits != 8 && bits != 4) throw ConfigError("quantization bits must be 8 or 4");
    }
};

// Rounds half away from zero; arithmetic runs in double so re-quantization
// reproduces the exact same floats.
template <typename S>
void quantize_tensor(Mat<S>& w, const QuantScheme& scheme) {
    double max_abs = 0.0;
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            max_abs = std::max(max_abs, std::abs(static_cast<double>(w(i, j))));
    if (max_abs == 0.0) return;  // all-zero tensor: scale-0 guard is identity
    const double scale = max_abs / static_cast<double>(scheme.qmax());
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            const double q = std::round(static_cast<double>(w(i, j)) / scale);
            w(i, j) = static_cast<S>(q * scale);
        }
}

// Copies the model and replaces every 2-D non-embedding weight with its
// quantize-dequantize image; embeddings and 1-D parameters stay exact.
template <typename S>
TinyVlaPolicy<S> quantize_model(const TinyVlaPolicy<S>& policy, const QuantScheme& scheme) {
    scheme.validate();
    if (policy.active_adapter_count() != 0)
        throw ValueError("quantize_model: merge adapters before quantizing");
    TinyVlaPolicy<S> out = policy.clone();
    for (auto& [path, e] : out.params()) {
        if (!e.is_weight || e.is_embedding) continue;
        quantize_tensor(e.tensor.value(), scheme);
    }
    return out;
}

// Forgetting lost to quantization: positive means the quantized model
// recovered some of the forgotten behavior.
inline double quant_recovery(const AuditReport& fp_report, const AuditReport& quant_report,
                             const std::string& precision) {
    if (fp_report.method != quant_report.method || fp_report.seed != quant_report.seed ||
        fp_report.config_hash != quant_report.config_hash || fp_report.data_hash != quant_report.data_hash)
        throw ProvenanceError("quant_recovery: reports come from different runs");
    const auto fp = fp_report.precisions.find("fp32");
    const auto q = quant_report.precisions.find(precision);
    if (fp == fp_report.precisions.end() || q == quant_report.precisions.end())
        throw ValueError("quant_recovery: missing precision block");
    return fp->second.fc_report - q->second.fc_report;
}

}  // namespace forgelab
