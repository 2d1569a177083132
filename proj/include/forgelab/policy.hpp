#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "forgelab/param_store.hpp"
#include "forgelab/policy_config.hpp"
#include "forgelab/rng.hpp"
#include "forgelab/tensor.hpp"

namespace forgelab {

// One low-rank adapter on a 2-D weight: effective delta (alpha/rank) * B * A.
// B starts at zero so attaching is an exact functional no-op; the pristine
// weight is kept so detach restores the original bytes even after a merge.
template <typename S>
struct LoraAdapter {
    std::string target;
    std::string a_path;
    std::string b_path;
    int rank = 4;
    double alpha = 4.0;
    double dropout_p = 0.0;
    Mat<S> original;
    bool merged = false;
};

template <typename S>
struct LoraSet {
    std::vector<LoraAdapter<S>> adapters;

    std::vector<std::string> param_paths() const {
        std::vector<std::string> out;
        for (const auto& a : adapters) {
            out.push_back(a.a_path);
            out.push_back(a.b_path);
        }
        std::sort(out.begin(), out.end());
        return out;
    }
};

// The desk-scale policy: per-cell vision encoder, two-layer MLP projector and
// a causal action-token decoder over [vision | instruction | BOS actions...].
template <typename S = float>
class TinyVlaPolicy {
public:
    TinyVlaPolicy(PolicyConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
        cfg_.validate();
        init_params();
    }

    const PolicyConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    ParamStore<S>& params() { return store_; }
    const ParamStore<S>& params() const { return store_; }

    TinyVlaPolicy clone() const {
        TinyVlaPolicy out;
        out.cfg_ = cfg_;
        out.seed_ = seed_;
        out.store_ = store_.clone();
        out.active_ = active_;
        return out;
    }

    struct StageOut {
        Tensor<S> tokens;
        Tensor<S> pooled;  // mean over tokens
    };

    StageOut encode_vision(Tape<S>* tape, const Tensor<S>& scene, Rng* drop = nullptr) const {
        if (scene.rows() != cfg_.vision_tokens() || scene.cols() != cfg_.scene_channels())
            throw DimensionError("encode_vision: expected " + shape_str(cfg_.vision_tokens(), cfg_.scene_channels()) +
                                 " scene channels, got " + shape_str(scene.rows(), scene.cols()));
        Tensor<S> x = linear(tape, scene, "vision.cell_embed.w", drop);
        x = add_rowvec(tape, x, store_.at("vision.cell_embed.b"));
        x = add(tape, x, store_.at("vision.pos"));
        for (int b = 0; b < cfg_.vision_blocks; ++b)
            x = block(tape, x, "vision.b" + std::to_string(b) + ".", false, drop);
        return StageOut{x, mean_rows(tape, x)};
    }

    StageOut project(Tape<S>* tape, const Tensor<S>& vision_tokens, Rng* drop = nullptr) const {
        if (vision_tokens.cols() != cfg_.d_model)
            throw DimensionError("project: expected token width " + std::to_string(cfg_.d_model));
        Tensor<S> h = linear(tape, vision_tokens, "proj.fc1.w", drop);
        h = add_rowvec(tape, h, store_.at("proj.fc1.b"));
        h = gelu(tape, h);
        Tensor<S> out = linear(tape, h, "proj.fc2.w", drop);
        out = add_rowvec(tape, out, store_.at("proj.fc2.b"));
        return StageOut{out, mean_rows(tape, out)};
    }

    struct ForwardOut {
        Tensor<S> logits;       // (len(prefix)+1) x action_vocab
        Tensor<S> h_vision;     // 1 x d_model
        Tensor<S> h_projector;  // 1 x d_model
    };

    ForwardOut forward_full(Tape<S>* tape, const Tensor<S>& scene, const std::vector<int>& instr_tokens,
                            const std::vector<int>& action_prefix, Rng* drop = nullptr) const {
        StageOut vis = encode_vision(tape, scene, drop);
        StageOut proj = project(tape, vis.tokens, drop);
        Tensor<S> logits = decode(tape, proj.tokens, instr_tokens, action_prefix, drop);
        return ForwardOut{logits, vis.pooled, proj.pooled};
    }

    Tensor<S> forward_logits(Tape<S>* tape, const Tensor<S>& scene, const std::vector<int>& instr_tokens,
                             const std::vector<int>& action_prefix, Rng* drop = nullptr) const {
        return forward_full(tape, scene, instr_tokens, action_prefix, drop).logits;
    }

    // Causal decode from already-projected vision tokens; lets generation
    // reuse one vision pass across steps.
    Tensor<S> decode(Tape<S>* tape, const Tensor<S>& proj_tokens, const std::vector<int>& instr_tokens,
                     const std::vector<int>& action_prefix, Rng* drop = nullptr) const {
        for (const int t : instr_tokens)
            if (t < 0 || t >= cfg_.instr_vocab)
                throw ValueError("instruction token " + std::to_string(t) + " outside vocabulary");
        for (const int t : action_prefix)
            if (t < 0 || t >= cfg_.action_vocab)
                throw ValueError("action token " + std::to_string(t) + " outside vocabulary");

        std::vector<int> instr_ids{PolicyConfig::kInstrBos};
        instr_ids.insert(instr_ids.end(), instr_tokens.begin(), instr_tokens.end());
        instr_ids.push_back(PolicyConfig::kInstrEos);
        std::vector<int> action_ids{kBos};
        action_ids.insert(action_ids.end(), action_prefix.begin(), action_prefix.end());

        const Eigen::Index total = proj_tokens.rows() + static_cast<Eigen::Index>(instr_ids.size()) +
                                   static_cast<Eigen::Index>(action_ids.size());
        if (total > cfg_.context_len())
            throw DimensionError("sequence length " + std::to_string(total) + " exceeds context limit " +
                                 std::to_string(cfg_.context_len()));

        Tensor<S> instr_emb = embed(tape, "lm.instr_embed", instr_ids, drop);
        Tensor<S> act_emb = embed(tape, "lm.action_embed", action_ids, drop);
        Tensor<S> x = concat_rows(tape, {proj_tokens, instr_emb, act_emb});
        x = add(tape, x, slice_rows(tape, store_.at("lm.pos"), 0, total));
        for (int b = 0; b < cfg_.lm_blocks; ++b)
            x = block(tape, x, "lm.b" + std::to_string(b) + ".", true, drop);
        x = layer_norm(tape, x, store_.at("lm.ln_f.g"), store_.at("lm.ln_f.b"));
        Tensor<S> rows = slice_rows(tape, x, total - static_cast<Eigen::Index>(action_ids.size()),
                                    static_cast<Eigen::Index>(action_ids.size()));
        return linear(tape, rows, "lm.head.w", drop);
    }

    // Greedy decoding; stops at EOS, STOP, or max_len tokens.
    std::vector<int> generate(const Tensor<S>& scene, const std::vector<int>& instr_tokens,
                              int max_len) const {
        if (max_len < 1 || max_len > cfg_.max_action_len)
            throw ValueError("generate: max_len must lie in [1, max_action_len]");
        StageOut vis = encode_vision(nullptr, scene);
        StageOut proj = project(nullptr, vis.tokens);
        std::vector<int> out;
        while (static_cast<int>(out.size()) < max_len) {
            Tensor<S> logits = decode(nullptr, proj.tokens, instr_tokens, out);
            const Eigen::Index last = logits.rows() - 1;
            int best = 0;
            for (Eigen::Index j = 1; j < logits.cols(); ++j)
                if (logits.value()(last, j) > logits.value()(last, best)) best = static_cast<int>(j);
            out.push_back(best);
            if (best == kEos || best == kStop) break;
        }
        return out;
    }

    // --- adapters ------------------------------------------------------

    LoraSet<S> attach_lora(const std::vector<std::string>& weight_paths, int rank, double alpha,
                           double dropout_p, std::uint64_t seed) {
        if (rank < 1) throw ConfigError("attach_lora: rank must be >= 1");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("attach_lora: dropout must lie in [0, 1)");
        Rng rng(derive_seed(seed, "lora_init"));
        LoraSet<S> set;
        for (const auto& path : weight_paths) {
            if (!store_.contains(path)) throw ValueError("attach_lora: unknown path '" + path + "'");
            const auto& e = store_.entry(path);
            if (!e.is_weight) throw ValueError("attach_lora: '" + path + "' is not a 2-D weight matrix");
            if (active_.count(path)) throw ValueError("attach_lora: '" + path + "' already has an adapter");
            LoraAdapter<S> ad;
            ad.target = path;
            ad.a_path = "zlora." + path + ".a";
            ad.b_path = "zlora." + path + ".b";
            ad.rank = rank;
            ad.alpha = alpha;
            ad.dropout_p = dropout_p;
            ad.original = e.tensor.value();
            Tensor<S> a = Tensor<S>::randn(rank, e.tensor.cols(), 0.02, rng, true);
            Tensor<S> b = Tensor<S>::zeros(e.tensor.rows(), rank, true);
            store_.add(ad.a_path, a, e.component, e.layer, false);
            store_.add(ad.b_path, b, e.component, e.layer, false);
            active_[path] = ActiveAdapter{ad.a_path, ad.b_path, alpha / static_cast<double>(rank), dropout_p};
            set.adapters.push_back(std::move(ad));
        }
        return set;
    }

    void merge_lora(LoraSet<S>& set) {
        for (auto& ad : set.adapters) {
            if (ad.merged) continue;
            Mat<S>& w = store_.at(ad.target).value();
            const Mat<S>& a = store_.at(ad.a_path).value();
            const Mat<S>& b = store_.at(ad.b_path).value();
            w.noalias() += static_cast<S>(ad.alpha / static_cast<double>(ad.rank)) * (b * a);
            store_.erase(ad.a_path);
            store_.erase(ad.b_path);
            active_.erase(ad.target);
            ad.merged = true;
        }
    }

    void detach_lora(LoraSet<S>& set) {
        for (auto& ad : set.adapters) {
            store_.at(ad.target).value() = ad.original;
            if (store_.contains(ad.a_path)) store_.erase(ad.a_path);
            if (store_.contains(ad.b_path)) store_.erase(ad.b_path);
            active_.erase(ad.target);
            ad.merged = false;
        }
    }

    bool has_adapter(const std::string& weight_path) const { return active_.count(weight_path) != 0; }

    std::size_t active_adapter_count() const { return active_.size(); }

    // Every weight eligible for broad (all-linear) adapters.
    std::vector<std::string> linear_weight_paths() const {
        std::vector<std::string> out;
        for (const auto& [path, e] : store_)
            if (e.is_weight && !e.is_embedding) out.push_back(path);
        return out;
    }

    // Selectable weight paths of one layer unit. Vision / backbone layers are
    // transformer blocks, projector layers are the two MLP matrices.
    std::vector<std::string> layer_weight_paths(Component comp, int layer) const {
        std::vector<std::string> out;
        for (const auto& [path, e] : store_) {
            if (e.component != comp || e.layer != layer) continue;
            if (e.is_weight && !e.is_embedding && path.rfind("zlora.", 0) != 0) out.push_back(path);
        }
        return out;
    }

    // Raw (non-adapter) parameter paths of one layer unit, for gradient stats.
    std::vector<std::string> layer_param_paths(Component comp, int layer) const {
        std::vector<std::string> out;
        for (const auto& [path, e] : store_) {
            if (e.component != comp || e.layer != layer) continue;
            if (path.rfind("zlora.", 0) == 0) continue;
            out.push_back(path);
        }
        return out;
    }

    int layer_count(Component comp) const {
        switch (comp) {
            case Component::Vision: return cfg_.vision_blocks;
            case Component::Projector: return 2;
            case Component::Backbone: return cfg_.lm_blocks;
        }
        return 0;
    }

    // Pseudo-paths for stage-3 action-row edits (off by default).
    std::vector<std::string> action_row_paths() const { return {"lm.action_embed", "lm.head.w"}; }

private:
    TinyVlaPolicy() = default;

    struct ActiveAdapter {
        std::string a_path;
        std::string b_path;
        double scaling = 1.0;
        double dropout_p = 0.0;
    };

    Tensor<S> linear(Tape<S>* tape, const Tensor<S>& x, const std::string& wpath, Rng* drop) const {
        Tensor<S> y = matmul_nt(tape, x, store_.at(wpath));
        const auto it = active_.find(wpath);
        if (it != active_.end()) {
            const ActiveAdapter& ad = it->second;
            Tensor<S> ax = matmul_nt(tape, x, store_.at(ad.a_path));
            if (drop && ad.dropout_p > 0.0) ax = dropout(tape, ax, ad.dropout_p, *drop);
            Tensor<S> delta = matmul_nt(tape, ax, store_.at(ad.b_path));
            y = add(tape, y, scale(tape, delta, ad.scaling));
        }
        return y;
    }

    Tensor<S> embed(Tape<S>* tape, const std::string& table_path, const std::vector<int>& ids,
                    Rng* drop) const {
        Tensor<S> y = gather_rows(tape, store_.at(table_path), ids);
        const auto it = active_.find(table_path);
        if (it != active_.end()) {
            const ActiveAdapter& ad = it->second;
            Tensor<S> brows = gather_rows(tape, store_.at(ad.b_path), ids);
            if (drop && ad.dropout_p > 0.0) brows = dropout(tape, brows, ad.dropout_p, *drop);
            Tensor<S> delta = matmul(tape, brows, store_.at(ad.a_path));
            y = add(tape, y, scale(tape, delta, ad.scaling));
        }
        return y;
    }

    Tensor<S> attention(Tape<S>* tape, const Tensor<S>& x, const std::string& prefix, bool causal,
                        Rng* drop) const {
        const int dh = cfg_.d_model / cfg_.n_heads;
        Tensor<S> q = linear(tape, x, prefix + "attn.wq", drop);
        Tensor<S> k = linear(tape, x, prefix + "attn.wk", drop);
        Tensor<S> v = linear(tape, x, prefix + "attn.wv", drop);
        std::vector<Tensor<S>> heads;
        heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int h = 0; h < cfg_.n_heads; ++h) {
            Tensor<S> qh = slice_cols(tape, q, h * dh, dh);
            Tensor<S> kh = slice_cols(tape, k, h * dh, dh);
            Tensor<S> vh = slice_cols(tape, v, h * dh, dh);
            Tensor<S> scores = scale(tape, matmul_nt(tape, qh, kh), inv_sqrt);
            Tensor<S> probs = causal ? causal_softmax(tape, scores) : softmax_rows(tape, scores);
            heads.push_back(matmul(tape, probs, vh));
        }
        Tensor<S> merged = concat_cols(tape, heads);
        return linear(tape, merged, prefix + "attn.wo", drop);
    }

    Tensor<S> block(Tape<S>* tape, const Tensor<S>& x_in, const std::string& prefix, bool causal,
                    Rng* drop) const {
        Tensor<S> h = layer_norm(tape, x_in, store_.at(prefix + "ln1.g"), store_.at(prefix + "ln1.b"));
        Tensor<S> x = add(tape, x_in, attention(tape, h, prefix, causal, drop));
        Tensor<S> h2 = layer_norm(tape, x, store_.at(prefix + "ln2.g"), store_.at(prefix + "ln2.b"));
        Tensor<S> m = linear(tape, h2, prefix + "mlp.fc1.w", drop);
        m = add_rowvec(tape, m, store_.at(prefix + "mlp.fc1.b"));
        m = gelu(tape, m);
        m = linear(tape, m, prefix + "mlp.fc2.w", drop);
        m = add_rowvec(tape, m, store_.at(prefix + "mlp.fc2.b"));
        return add(tape, x, m);
    }

    void add_block_params(const std::string& prefix, Component comp, int layer, Rng& rng) {
        const int d = cfg_.d_model;
        const int hid = cfg_.mlp_hidden();
        auto w = [&](Eigen::Index r, Eigen::Index c) { return Tensor<S>::randn(r, c, 0.02, rng); };
        store_.add(prefix + "ln1.g", Tensor<S>(Mat<S>::Ones(1, d)), comp, layer, false);
        store_.add(prefix + "ln1.b", Tensor<S>::zeros(1, d), comp, layer, false);
        store_.add(prefix + "attn.wq", w(d, d), comp, layer, true);
        store_.add(prefix + "attn.wk", w(d, d), comp, layer, true);
        store_.add(prefix + "attn.wv", w(d, d), comp, layer, true);
        store_.add(prefix + "attn.wo", w(d, d), comp, layer, true);
        store_.add(prefix + "ln2.g", Tensor<S>(Mat<S>::Ones(1, d)), comp, layer, false);
        store_.add(prefix + "ln2.b", Tensor<S>::zeros(1, d), comp, layer, false);
        store_.add(prefix + "mlp.fc1.w", w(hid, d), comp, layer, true);
        store_.add(prefix + "mlp.fc1.b", Tensor<S>::zeros(1, hid), comp, layer, false);
        store_.add(prefix + "mlp.fc2.w", w(d, hid), comp, layer, true);
        store_.add(prefix + "mlp.fc2.b", Tensor<S>::zeros(1, d), comp, layer, false);
    }

    void init_params() {
        Rng rng(derive_seed(seed_, "policy_init"));
        const int d = cfg_.d_model;
        auto w = [&](Eigen::Index r, Eigen::Index c) { return Tensor<S>::randn(r, c, 0.02, rng); };

        store_.add("vision.cell_embed.w", w(d, cfg_.scene_channels()), Component::Vision, -1, true);
        store_.add("vision.cell_embed.b", Tensor<S>::zeros(1, d), Component::Vision, -1, false);
        store_.add("vision.pos", w(cfg_.vision_tokens(), d), Component::Vision, -1, false, true);
        for (int b = 0; b < cfg_.vision_blocks; ++b)
            add_block_params("vision.b" + std::to_string(b) + ".", Component::Vision, b, rng);

        store_.add("proj.fc1.w", w(d, d), Component::Projector, 0, true);
        store_.add("proj.fc1.b", Tensor<S>::zeros(1, d), Component::Projector, 0, false);
        store_.add("proj.fc2.w", w(d, d), Component::Projector, 1, true);
        store_.add("proj.fc2.b", Tensor<S>::zeros(1, d), Component::Projector, 1, false);

        store_.add("lm.instr_embed", w(cfg_.instr_vocab, d), Component::Backbone, -1, true, true);
        store_.add("lm.action_embed", w(cfg_.action_vocab, d), Component::Backbone, -1, true, true);
        store_.add("lm.pos", w(cfg_.context_len(), d), Component::Backbone, -1, false, true);
        for (int b = 0; b < cfg_.lm_blocks; ++b)
            add_block_params("lm.b" + std::to_string(b) + ".", Component::Backbone, b, rng);
        store_.add("lm.ln_f.g", Tensor<S>(Mat<S>::Ones(1, d)), Component::Backbone, -1, false);
        store_.add("lm.ln_f.b", Tensor<S>::zeros(1, d), Component::Backbone, -1, false);
        store_.add("lm.head.w", w(cfg_.action_vocab, d), Component::Backbone, -1, true);
    }

    PolicyConfig cfg_;
    std::uint64_t seed_ = 0;
    ParamStore<S> store_;
    std::map<std::string, ActiveAdapter> active_;
};

// Deep frozen snapshot of a policy taken before unlearning.
template <typename S>
struct FrozenReference {
    TinyVlaPolicy<S> model;
    std::uint64_t fingerprint = 0;

    explicit FrozenReference(const TinyVlaPolicy<S>& source)
        : model(source.clone()), fingerprint(source.params().fingerprint()) {
        model.params().set_requires_grad_all(false);
    }
};

}  // namespace forgelab
