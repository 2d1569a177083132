#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "forgelab/tensor.hpp"

namespace forgelab {

enum class Component { Vision, Projector, Backbone };

inline const char* component_tag(Component c) {
    switch (c) {
        case Component::Vision: return "V";
        case Component::Projector: return "P";
        case Component::Backbone: return "L";
    }
    return "?";
}

inline Component component_from_tag(const std::string& tag) {
    if (tag == "V") return Component::Vision;
    if (tag == "P") return Component::Projector;
    if (tag == "L") return Component::Backbone;
    throw ValueError("unknown component tag '" + tag + "'");
}

template <typename S>
struct ParamEntry {
    Tensor<S> tensor;
    Component component = Component::Backbone;
    int layer = -1;           // block index; -1 for shared params
    bool is_weight = false;   // true for genuine 2-D weight matrices
    bool is_embedding = false;
};

// Named parameter tree. std::map keeps iteration lexicographic, which fixes
// flatten order, checkpoint payload order, and every other traversal.
template <typename S>
class ParamStore {
public:
    void add(const std::string& path, Tensor<S> t, Component comp, int layer, bool is_weight,
             bool is_embedding = false) {
        if (map_.count(path)) throw ValueError("duplicate parameter path '" + path + "'");
        map_[path] = ParamEntry<S>{std::move(t), comp, layer, is_weight, is_embedding};
    }

    bool contains(const std::string& path) const { return map_.count(path) != 0; }

    void erase(const std::string& path) { map_.erase(path); }

    ParamEntry<S>& entry(const std::string& path) {
        auto it = map_.find(path);
        if (it == map_.end()) throw ValueError("unknown parameter path '" + path + "'");
        return it->second;
    }
    const ParamEntry<S>& entry(const std::string& path) const {
        auto it = map_.find(path);
        if (it == map_.end()) throw ValueError("unknown parameter path '" + path + "'");
        return it->second;
    }

    Tensor<S>& at(const std::string& path) { return entry(path).tensor; }
    const Tensor<S>& at(const std::string& path) const { return entry(path).tensor; }

    std::vector<std::string> paths() const {
        std::vector<std::string> out;
        out.reserve(map_.size());
        for (const auto& [k, v] : map_) out.push_back(k);
        return out;
    }

    std::size_t size() const { return map_.size(); }

    auto begin() { return map_.begin(); }
    auto end() { return map_.end(); }
    auto begin() const { return map_.begin(); }
    auto end() const { return map_.end(); }

    void zero_grads() {
        for (auto& [k, e] : map_) e.tensor.zero_grad();
    }

    void set_requires_grad_all(bool v) {
        for (auto& [k, e] : map_) e.tensor.set_requires_grad(v);
    }

    // Deep copy: fresh storage for every tensor, grads not carried over.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [k, e] : map_) {
            Tensor<S> t(Mat<S>(e.tensor.value()), e.tensor.requires_grad());
            out.map_[k] = ParamEntry<S>{std::move(t), e.component, e.layer, e.is_weight, e.is_embedding};
        }
        return out;
    }

    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [k, e] : map_) {
            h = fnv1a64(k.data(), k.size(), h);
            const auto& m = e.tensor.value();
            h = fnv1a64(m.data(), sizeof(S) * static_cast<std::size_t>(m.size()), h);
        }
        return h;
    }

    std::int64_t total_size(const std::vector<std::string>& subset) const {
        std::int64_t n = 0;
        for (const auto& p : subset) n += entry(p).tensor.size();
        return n;
    }

private:
    std::map<std::string, ParamEntry<S>> map_;
};

template <typename S>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::map<std::string, Mat<S>> m;
    std::map<std::string, Mat<S>> v;
};

// Bias-corrected Adam on the listed paths only; everything else is untouched.
// Fails fast on missing grads and on non-finite results.
template <typename S>
void adam_step(ParamStore<S>& store, AdamState<S>& state, double lr,
               const std::vector<std::string>& active_paths) {
    for (const auto& p : active_paths) {
        if (!store.contains(p)) throw ValueError("adam_step: unknown path '" + p + "'");
        if (!store.at(p).has_grad()) throw ValueError("adam_step: path '" + p + "' has no gradient");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (const auto& p : active_paths) {
        Tensor<S>& t = store.at(p);
        const Mat<S>& g = t.grad();
        auto mi = state.m.find(p);
        if (mi == state.m.end()) {
            state.m[p] = Mat<S>::Zero(t.rows(), t.cols());
            state.v[p] = Mat<S>::Zero(t.rows(), t.cols());
        }
        Mat<S>& m = state.m[p];
        Mat<S>& v = state.v[p];
        m = static_cast<S>(state.beta1) * m + static_cast<S>(1.0 - state.beta1) * g;
        v = static_cast<S>(state.beta2) * v.array().matrix() +
            static_cast<S>(1.0 - state.beta2) * g.cwiseProduct(g);
        Mat<S> mhat = m / static_cast<S>(bc1);
        Mat<S> vhat = v / static_cast<S>(bc2);
        t.value().array() -= static_cast<S>(lr) * mhat.array() /
                             (vhat.array().sqrt() + static_cast<S>(state.eps));
        if (!all_finite(t.value()))
            throw NumericError("adam_step produced non-finite values in '" + p + "'");
    }
}

// Concatenates gradients in the given path order into one flat vector.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> flatten_grads(const ParamStore<S>& store,
                                                  const std::vector<std::string>& paths) {
    std::int64_t total = 0;
    for (const auto& p : paths) {
        const auto& t = store.at(p);
        if (!t.has_grad()) throw ValueError("flatten_grads: path '" + p + "' has no gradient");
        total += t.size();
    }
    Eigen::Matrix<S, Eigen::Dynamic, 1> flat(total);
    std::int64_t at = 0;
    for (const auto& p : paths) {
        const auto& g = store.at(p).grad();
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            for (Eigen::Index j = 0; j < g.cols(); ++j) flat(at++) = g(i, j);
    }
    return flat;
}

// Inverse of flatten_grads: writes per-path grads from the flat vector.
template <typename S>
void scatter_flat(ParamStore<S>& store, const Eigen::Matrix<S, Eigen::Dynamic, 1>& flat,
                  const std::vector<std::string>& paths) {
    std::int64_t total = 0;
    for (const auto& p : paths) total += store.at(p).size();
    if (total != flat.size())
        throw DimensionError("scatter_flat: vector length " + std::to_string(flat.size()) +
                             " does not match total parameter size " + std::to_string(total));
    std::int64_t at = 0;
    for (const auto& p : paths) {
        Tensor<S>& t = store.at(p);
        Mat<S> g(t.rows(), t.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = flat(at++);
        t.zero_grad();
        t.accumulate_grad(g);
    }
}

}  // namespace forgelab
