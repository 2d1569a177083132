#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "forgelab/common.hpp"
#include "forgelab/rng.hpp"

namespace forgelab {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Mat<float>;
using MatD = Mat<double>;

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

template <typename S>
struct TensorStorage {
    Mat<S> value;
    Mat<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
};

inline std::uint64_t next_tensor_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Dense 2-D tensor handle with shared storage. Values are immutable after a
// forward pass by convention; grads are the only buffers backward mutates.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Mat<S> value, bool requires_grad = false)
        : d_(std::make_shared<TensorStorage<S>>()) {
        d_->value = std::move(value);
        d_->requires_grad = requires_grad;
        d_->id = next_tensor_id();
    }

    static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false) {
        return Tensor(Mat<S>::Zero(rows, cols), requires_grad);
    }

    static Tensor scalar(S v) {
        Mat<S> m(1, 1);
        m(0, 0) = v;
        return Tensor(std::move(m));
    }

    static Tensor randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng,
                        bool requires_grad = false) {
        Mat<S> m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j)
                m(i, j) = static_cast<S>(stddev * rng.next_normal());
        return Tensor(std::move(m), requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    std::uint64_t id() const { return d_ ? d_->id : 0; }
    Eigen::Index rows() const { return d_->value.rows(); }
    Eigen::Index cols() const { return d_->value.cols(); }
    Eigen::Index size() const { return d_->value.size(); }
    bool is_scalar() const { return rows() == 1 && cols() == 1; }

    const Mat<S>& value() const { return d_->value; }
    Mat<S>& value() { return d_->value; }
    S item() const {
        if (!is_scalar()) throw DimensionError("item() on non-scalar tensor " + shape_str(rows(), cols()));
        return d_->value(0, 0);
    }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    bool has_grad() const { return d_ && d_->grad.size() != 0; }
    const Mat<S>& grad() const { return d_->grad; }
    Mat<S>& grad() { return d_->grad; }
    void zero_grad() { d_->grad.resize(0, 0); }

    void accumulate_grad(const Mat<S>& g) {
        if (g.rows() != rows() || g.cols() != cols())
            throw DimensionError("grad shape " + shape_str(g.rows(), g.cols()) +
                                 " does not match tensor " + shape_str(rows(), cols()));
        if (d_->grad.size() == 0) d_->grad = g;
        else d_->grad += g;
    }

    std::shared_ptr<TensorStorage<S>> storage() const { return d_; }

private:
    std::shared_ptr<TensorStorage<S>> d_;
};

template <typename S>
struct TapeNode {
    const char* op = "";
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
    std::function<void()> backward;
};

// Records forward operations in topological order; backward replays them in
// reverse exactly once and then clears the node list.
template <typename S>
class Tape {
public:
    void record(const char* op, std::vector<std::uint64_t> inputs, std::uint64_t output,
                std::function<void()> backward) {
        consumed_ = false;
        nodes_.push_back(TapeNode<S>{op, std::move(inputs), output, std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    void clear() {
        nodes_.clear();
        consumed_ = false;
    }

    void backward(Tensor<S>& loss) {
        if (!loss.defined() || !loss.is_scalar())
            throw DimensionError("backward requires a scalar loss");
        if (!loss.requires_grad()) {
            // No trainable leaves reach the loss: nothing to do.
            nodes_.clear();
            return;
        }
        if (consumed_) throw ValueError("backward called twice without a fresh forward pass");
        if (nodes_.empty()) throw ValueError("backward on an empty tape");
        loss.accumulate_grad(Mat<S>::Ones(1, 1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward) it->backward();
        }
        nodes_.clear();
        consumed_ = true;
    }

private:
    std::vector<TapeNode<S>> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <typename S>
bool out_grad_ready(const std::shared_ptr<TensorStorage<S>>& out) {
    return out->grad.size() != 0;
}

template <typename S>
void add_grad(const std::shared_ptr<TensorStorage<S>>& t, const Mat<S>& g) {
    if (!t->requires_grad) return;
    if (t->grad.size() == 0) t->grad = g;
    else t->grad += g;
}

template <typename S>
Tensor<S> make_out(Tape<S>* tape, Mat<S> value, bool requires_grad) {
    Tensor<S> out(std::move(value), tape != nullptr && requires_grad);
    return out;
}

inline double stable_log_sum_exp_row(const double* z, Eigen::Index n, double& max_out) {
    double m = z[0];
    for (Eigen::Index i = 1; i < n; ++i) m = std::max(m, z[i]);
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += std::exp(z[i] - m);
    max_out = m;
    return m + std::log(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// autodiff ops (free functions; tape == nullptr evaluates without recording)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.rows(), a.cols()) +
                             " vs " + shape_str(b.rows(), b.cols()));
    Mat<S> v(a.rows(), b.cols());
    v.noalias() = a.value() * b.value();
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto ad = a.storage(), bd = b.storage(), od = out.storage();
        tape->record("matmul", {a.id(), b.id()}, out.id(), [ad, bd, od]() {
            if (!detail::out_grad_ready(od)) return;
            const Mat<S>& gy = od->grad;
            if (ad->requires_grad) detail::add_grad(ad, Mat<S>(gy * bd->value.transpose()));
            if (bd->requires_grad) detail::add_grad(bd, Mat<S>(ad->value.transpose() * gy));
        });
    }
    return out;
}

// a [m x k] times b^T where b is [n x k]; the natural shape for weights
// stored out_features x in_features.
template <typename S>
Tensor<S> matmul_nt(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.rows(), a.cols()) +
                             " vs " + shape_str(b.rows(), b.cols()) + " transposed");
    Mat<S> v(a.rows(), b.rows());
    v.noalias() = a.value() * b.value().transpose();
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto ad = a.storage(), bd = b.storage(), od = out.storage();
        tape->record("matmul_nt", {a.id(), b.id()}, out.id(), [ad, bd, od]() {
            if (!detail::out_grad_ready(od)) return;
            const Mat<S>& gy = od->grad;
            if (ad->requires_grad) detail::add_grad(ad, Mat<S>(gy * bd->value));
            if (bd->requires_grad) detail::add_grad(bd, Mat<S>(gy.transpose() * ad->value));
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("add: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                             shape_str(b.rows(), b.cols()));
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(a.value() + b.value()), rg);
    if (tape && rg) {
        auto ad = a.storage(), bd = b.storage(), od = out.storage();
        tape->record("add", {a.id(), b.id()}, out.id(), [ad, bd, od]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(ad, od->grad);
            detail::add_grad(bd, od->grad);
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("sub: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                             shape_str(b.rows(), b.cols()));
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(a.value() - b.value()), rg);
    if (tape && rg) {
        auto ad = a.storage(), bd = b.storage(), od = out.storage();
        tape->record("sub", {a.id(), b.id()}, out.id(), [ad, bd, od]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(ad, od->grad);
            if (bd->requires_grad) detail::add_grad(bd, Mat<S>(-od->grad));
        });
    }
    return out;
}

// Broadcasts a 1 x n row vector over every row of a.
template <typename S>
Tensor<S> add_rowvec(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw DimensionError("add_rowvec: expected 1x" + std::to_string(a.cols()) + ", got " +
                             shape_str(row.rows(), row.cols()));
    Mat<S> v = a.value();
    v.rowwise() += row.value().row(0);
    const bool rg = a.requires_grad() || row.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto ad = a.storage(), bd = row.storage(), od = out.storage();
        tape->record("add_rowvec", {a.id(), row.id()}, out.id(), [ad, bd, od]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(ad, od->grad);
            if (bd->requires_grad) detail::add_grad(bd, Mat<S>(od->grad.colwise().sum()));
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("mul: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                             shape_str(b.rows(), b.cols()));
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(a.value().cwiseProduct(b.value())), rg);
    if (tape && rg) {
        auto ad = a.storage(), bd = b.storage(), od = out.storage();
        tape->record("mul", {a.id(), b.id()}, out.id(), [ad, bd, od]() {
            if (!detail::out_grad_ready(od)) return;
            if (ad->requires_grad) detail::add_grad(ad, Mat<S>(od->grad.cwiseProduct(bd->value)));
            if (bd->requires_grad) detail::add_grad(bd, Mat<S>(od->grad.cwiseProduct(ad->value)));
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, double c) {
    const bool rg = a.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(a.value() * static_cast<S>(c)), rg);
    if (tape && rg) {
        auto ad = a.storage(), od = out.storage();
        tape->record("scale", {a.id()}, out.id(), [ad, od, c]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(ad, Mat<S>(od->grad * static_cast<S>(c)));
        });
    }
    return out;
}

template <typename S>
Tensor<S> add_const(Tape<S>* tape, const Tensor<S>& a, double c) {
    const bool rg = a.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(a.value().array() + static_cast<S>(c)), rg);
    if (tape && rg) {
        auto ad = a.storage(), od = out.storage();
        tape->record("add_const", {a.id()}, out.id(), [ad, od]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(ad, od->grad);
        });
    }
    return out;
}

template <typename S>
Tensor<S> gelu(Tape<S>* tape, const Tensor<S>& a) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    Mat<S> v(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const double x = static_cast<double>(a.value()(i, j));
            const double t = std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x));
            v(i, j) = static_cast<S>(0.5 * x * (1.0 + t));
        }
    }
    const bool rg = a.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto ad = a.storage(), od = out.storage();
        tape->record("gelu", {a.id()}, out.id(), [ad, od]() {
            if (!detail::out_grad_ready(od)) return;
            Mat<S> gx(ad->value.rows(), ad->value.cols());
            for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                for (Eigen::Index j = 0; j < gx.cols(); ++j) {
                    const double x = static_cast<double>(ad->value(i, j));
                    const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
                    const double t = std::tanh(u);
                    const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
                    const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    gx(i, j) = static_cast<S>(d * static_cast<double>(od->grad(i, j)));
                }
            }
            detail::add_grad(ad, gx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> softplus(Tape<S>* tape, const Tensor<S>& a) {
    Mat<S> v(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const double x = static_cast<double>(a.value()(i, j));
            v(i, j) = static_cast<S>(x > 30.0 ? x : std::log1p(std::exp(x)));
        }
    }
    const bool rg = a.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto ad = a.storage(), od = out.storage();
        tape->record("softplus", {a.id()}, out.id(), [ad, od]() {
            if (!detail::out_grad_ready(od)) return;
            Mat<S> gx(ad->value.rows(), ad->value.cols());
            for (Eigen::Index i = 0; i < gx.rows(); ++i)
                for (Eigen::Index j = 0; j < gx.cols(); ++j) {
                    const double x = static_cast<double>(ad->value(i, j));
                    gx(i, j) = static_cast<S>(static_cast<double>(od->grad(i, j)) / (1.0 + std::exp(-x)));
                }
            detail::add_grad(ad, gx);
        });
    }
    return out;
}

// Per-row layer normalization with learned gain/bias (both 1 x d).
template <typename S>
Tensor<S> layer_norm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
    const Eigen::Index n = x.cols();
    if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
        throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(n));
    Mat<S> xhat(x.rows(), n), v(x.rows(), n);
    std::vector<double> inv_sigma(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double mean = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) mean += static_cast<double>(x.value()(i, j));
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double d = static_cast<double>(x.value()(i, j)) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(i)] = is;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double h = (static_cast<double>(x.value()(i, j)) - mean) * is;
            xhat(i, j) = static_cast<S>(h);
            v(i, j) = static_cast<S>(h * static_cast<double>(gain.value()(0, j)) +
                                     static_cast<double>(bias.value()(0, j)));
        }
    }
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto xd = x.storage(), gd = gain.storage(), bd = bias.storage(), od = out.storage();
        auto xh = std::make_shared<Mat<S>>(std::move(xhat));
        auto is = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        tape->record("layer_norm", {x.id(), gain.id(), bias.id()}, out.id(), [xd, gd, bd, od, xh, is, n]() {
            if (!detail::out_grad_ready(od)) return;
            const Mat<S>& gy = od->grad;
            if (gd->requires_grad) detail::add_grad(gd, Mat<S>(gy.cwiseProduct(*xh).colwise().sum()));
            if (bd->requires_grad) detail::add_grad(bd, Mat<S>(gy.colwise().sum()));
            if (xd->requires_grad) {
                Mat<S> gx(gy.rows(), n);
                for (Eigen::Index i = 0; i < gy.rows(); ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (Eigen::Index j = 0; j < n; ++j) {
                        const double gxh = static_cast<double>(gy(i, j)) * static_cast<double>(gd->value(0, j));
                        s1 += gxh;
                        s2 += gxh * static_cast<double>((*xh)(i, j));
                    }
                    s1 /= static_cast<double>(n);
                    s2 /= static_cast<double>(n);
                    const double isg = (*is)[static_cast<std::size_t>(i)];
                    for (Eigen::Index j = 0; j < n; ++j) {
                        const double gxh = static_cast<double>(gy(i, j)) * static_cast<double>(gd->value(0, j));
                        gx(i, j) = static_cast<S>((gxh - s1 - static_cast<double>((*xh)(i, j)) * s2) * isg);
                    }
                }
                detail::add_grad(xd, gx);
            }
        });
    }
    return out;
}

namespace detail {

// Shared softmax forward/backward; when causal is set, row i only looks at
// columns 0..i.
template <typename S>
Tensor<S> softmax_impl(Tape<S>* tape, const Tensor<S>& x, bool causal, const char* name) {
    if (causal && x.rows() != x.cols())
        throw DimensionError("causal softmax expects a square matrix, got " + shape_str(x.rows(), x.cols()));
    Mat<S> p = Mat<S>::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::Index limit = causal ? i + 1 : x.cols();
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < limit; ++j) m = std::max(m, static_cast<double>(x.value()(i, j)));
        double s = 0.0;
        for (Eigen::Index j = 0; j < limit; ++j) s += std::exp(static_cast<double>(x.value()(i, j)) - m);
        for (Eigen::Index j = 0; j < limit; ++j)
            p(i, j) = static_cast<S>(std::exp(static_cast<double>(x.value()(i, j)) - m) / s);
    }
    const bool rg = x.requires_grad();
    Tensor<S> out = make_out(tape, std::move(p), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        tape->record(name, {x.id()}, out.id(), [xd, od]() {
            if (!out_grad_ready(od)) return;
            const Mat<S>& gy = od->grad;
            const Mat<S>& pv = od->value;
            Mat<S> gx(gy.rows(), gy.cols());
            for (Eigen::Index i = 0; i < gy.rows(); ++i) {
                double dot = 0.0;
                for (Eigen::Index j = 0; j < gy.cols(); ++j)
                    dot += static_cast<double>(gy(i, j)) * static_cast<double>(pv(i, j));
                for (Eigen::Index j = 0; j < gy.cols(); ++j)
                    gx(i, j) = static_cast<S>((static_cast<double>(gy(i, j)) - dot) *
                                              static_cast<double>(pv(i, j)));
            }
            add_grad(xd, gx);
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> softmax_rows(Tape<S>* tape, const Tensor<S>& x) {
    return detail::softmax_impl(tape, x, false, "softmax");
}

template <typename S>
Tensor<S> causal_softmax(Tape<S>* tape, const Tensor<S>& x) {
    return detail::softmax_impl(tape, x, true, "causal_softmax");
}

namespace detail {

template <typename S>
Tensor<S> token_nll_impl(Tape<S>* tape, const Tensor<S>& logits, const std::vector<int>& targets,
                         int ignore_id, bool mean_reduction, const char* name) {
    if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
        throw DimensionError("targets length " + std::to_string(targets.size()) +
                             " does not match logit rows " + std::to_string(logits.rows()));
    const Eigen::Index vocab = logits.cols();
    std::vector<char> active(targets.size(), 0);
    Eigen::Index count = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == ignore_id) continue;
        if (targets[i] < 0 || targets[i] >= vocab)
            throw ValueError("target id " + std::to_string(targets[i]) + " outside vocabulary of size " +
                             std::to_string(vocab));
        active[i] = 1;
        ++count;
    }
    if (count == 0) throw ValueError("cross entropy: empty loss support (all positions ignored)");

    // Log-sum-exp and the final reduction run in double regardless of S.
    std::vector<double> row(static_cast<std::size_t>(vocab));
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (!active[i]) continue;
        for (Eigen::Index j = 0; j < vocab; ++j)
            row[static_cast<std::size_t>(j)] = static_cast<double>(logits.value()(static_cast<Eigen::Index>(i), j));
        double m = 0.0;
        const double lse = stable_log_sum_exp_row(row.data(), vocab, m);
        total += lse - row[static_cast<std::size_t>(targets[i])];
    }
    const double denom = mean_reduction ? static_cast<double>(count) : 1.0;
    Tensor<S> out = make_out(tape, Mat<S>(Mat<S>::Constant(1, 1, static_cast<S>(total / denom))),
                             logits.requires_grad());
    if (tape && logits.requires_grad()) {
        auto ld = logits.storage(), od = out.storage();
        auto tg = std::make_shared<std::vector<int>>(targets);
        auto act = std::make_shared<std::vector<char>>(std::move(active));
        tape->record(name, {logits.id()}, out.id(), [ld, od, tg, act, denom]() {
            if (!out_grad_ready(od)) return;
            const double go = static_cast<double>(od->grad(0, 0)) / denom;
            const Eigen::Index vocab = ld->value.cols();
            Mat<S> gx = Mat<S>::Zero(ld->value.rows(), vocab);
            std::vector<double> row(static_cast<std::size_t>(vocab));
            for (Eigen::Index i = 0; i < ld->value.rows(); ++i) {
                if (!(*act)[static_cast<std::size_t>(i)]) continue;
                for (Eigen::Index j = 0; j < vocab; ++j) row[static_cast<std::size_t>(j)] = static_cast<double>(ld->value(i, j));
                double m = 0.0;
                const double lse = stable_log_sum_exp_row(row.data(), vocab, m);
                for (Eigen::Index j = 0; j < vocab; ++j) {
                    double p = std::exp(row[static_cast<std::size_t>(j)] - lse);
                    if (j == (*tg)[static_cast<std::size_t>(i)]) p -= 1.0;
                    gx(i, j) = static_cast<S>(p * go);
                }
            }
            add_grad(ld, gx);
        });
    }
    return out;
}

}  // namespace detail

// Mean over non-ignored rows of -log softmax(logits)[target].
template <typename S>
Tensor<S> cross_entropy_logits(Tape<S>* tape, const Tensor<S>& logits, const std::vector<int>& targets,
                               int ignore_id = -1) {
    return detail::token_nll_impl(tape, logits, targets, ignore_id, true, "cross_entropy");
}

// Summed negative log likelihood (no averaging); building block for batched
// token-weighted losses and sequence log probabilities.
template <typename S>
Tensor<S> cross_entropy_sum(Tape<S>* tape, const Tensor<S>& logits, const std::vector<int>& targets,
                            int ignore_id = -1) {
    return detail::token_nll_impl(tape, logits, targets, ignore_id, false, "cross_entropy_sum");
}

// Sum over rows of log softmax(logits)[target].
template <typename S>
Tensor<S> sequence_log_prob(Tape<S>* tape, const Tensor<S>& logits, const std::vector<int>& targets) {
    Tensor<S> nll = cross_entropy_sum(tape, logits, targets, -1);
    return scale(tape, nll, -1.0);
}

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)). Gradient
// flows into whichever side requires grad.
template <typename S>
Tensor<S> kl_divergence(Tape<S>* tape, const Tensor<S>& p_logits, const Tensor<S>& q_logits) {
    if (p_logits.rows() != q_logits.rows() || p_logits.cols() != q_logits.cols())
        throw DimensionError("kl_divergence: shape mismatch " + shape_str(p_logits.rows(), p_logits.cols()) +
                             " vs " + shape_str(q_logits.rows(), q_logits.cols()));
    const Eigen::Index rows = p_logits.rows(), vocab = p_logits.cols();
    std::vector<double> pr(static_cast<std::size_t>(vocab)), qr(static_cast<std::size_t>(vocab));
    double total = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < vocab; ++j) {
            pr[static_cast<std::size_t>(j)] = static_cast<double>(p_logits.value()(i, j));
            qr[static_cast<std::size_t>(j)] = static_cast<double>(q_logits.value()(i, j));
        }
        double mp = 0.0, mq = 0.0;
        const double lsep = detail::stable_log_sum_exp_row(pr.data(), vocab, mp);
        const double lseq = detail::stable_log_sum_exp_row(qr.data(), vocab, mq);
        for (Eigen::Index j = 0; j < vocab; ++j) {
            const double lp = pr[static_cast<std::size_t>(j)] - lsep;
            total += std::exp(lp) * (lp - (qr[static_cast<std::size_t>(j)] - lseq));
        }
    }
    const double denom = static_cast<double>(rows);
    const bool rg = p_logits.requires_grad() || q_logits.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(Mat<S>::Constant(1, 1, static_cast<S>(total / denom))), rg);
    if (tape && rg) {
        auto pd = p_logits.storage(), qd = q_logits.storage(), od = out.storage();
        tape->record("kl_divergence", {p_logits.id(), q_logits.id()}, out.id(), [pd, qd, od, denom]() {
            if (!detail::out_grad_ready(od)) return;
            const double go = static_cast<double>(od->grad(0, 0)) / denom;
            const Eigen::Index rows = pd->value.rows(), vocab = pd->value.cols();
            std::vector<double> pr(static_cast<std::size_t>(vocab)), qr(static_cast<std::size_t>(vocab));
            Mat<S> gp, gq;
            if (pd->requires_grad) gp = Mat<S>::Zero(rows, vocab);
            if (qd->requires_grad) gq = Mat<S>::Zero(rows, vocab);
            for (Eigen::Index i = 0; i < rows; ++i) {
                for (Eigen::Index j = 0; j < vocab; ++j) {
                    pr[static_cast<std::size_t>(j)] = static_cast<double>(pd->value(i, j));
                    qr[static_cast<std::size_t>(j)] = static_cast<double>(qd->value(i, j));
                }
                double mp = 0.0, mq = 0.0;
                const double lsep = detail::stable_log_sum_exp_row(pr.data(), vocab, mp);
                const double lseq = detail::stable_log_sum_exp_row(qr.data(), vocab, mq);
                double kl_row = 0.0;
                for (Eigen::Index j = 0; j < vocab; ++j) {
                    const double lp = pr[static_cast<std::size_t>(j)] - lsep;
                    kl_row += std::exp(lp) * (lp - (qr[static_cast<std::size_t>(j)] - lseq));
                }
                for (Eigen::Index j = 0; j < vocab; ++j) {
                    const double lp = pr[static_cast<std::size_t>(j)] - lsep;
                    const double lq = qr[static_cast<std::size_t>(j)] - lseq;
                    const double p = std::exp(lp), q = std::exp(lq);
                    if (pd->requires_grad) gp(i, j) = static_cast<S>(go * p * (lp - lq - kl_row));
                    if (qd->requires_grad) gq(i, j) = static_cast<S>(go * (q - p));
                }
            }
            if (pd->requires_grad) detail::add_grad(pd, gp);
            if (qd->requires_grad) detail::add_grad(qd, gq);
        });
    }
    return out;
}

// Column means collapsed to one row (mean pooling over tokens).
template <typename S>
Tensor<S> mean_rows(Tape<S>* tape, const Tensor<S>& x) {
    const double inv = 1.0 / static_cast<double>(x.rows());
    Mat<S> v = Mat<S>(x.value().colwise().sum()) * static_cast<S>(inv);
    const bool rg = x.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        tape->record("mean_rows", {x.id()}, out.id(), [xd, od, inv]() {
            if (!detail::out_grad_ready(od)) return;
            Mat<S> gx(xd->value.rows(), xd->value.cols());
            for (Eigen::Index i = 0; i < gx.rows(); ++i) gx.row(i) = od->grad.row(0) * static_cast<S>(inv);
            detail::add_grad(xd, gx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& x) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) total += static_cast<double>(x.value()(i, j));
    const bool rg = x.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(Mat<S>::Constant(1, 1, static_cast<S>(total))), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        tape->record("sum_all", {x.id()}, out.id(), [xd, od]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(xd, Mat<S>(Mat<S>::Constant(xd->value.rows(), xd->value.cols(), od->grad(0, 0))));
        });
    }
    return out;
}

// Squared Frobenius norm as a 1x1 tensor.
template <typename S>
Tensor<S> squared_norm(Tape<S>* tape, const Tensor<S>& x) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double v = static_cast<double>(x.value()(i, j));
            total += v * v;
        }
    const bool rg = x.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(Mat<S>::Constant(1, 1, static_cast<S>(total))), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        tape->record("squared_norm", {x.id()}, out.id(), [xd, od]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(xd, Mat<S>(xd->value * static_cast<S>(2.0 * static_cast<double>(od->grad(0, 0)))));
        });
    }
    return out;
}

template <typename S>
Tensor<S> slice_rows(Tape<S>* tape, const Tensor<S>& x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.rows())
        throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of " + std::to_string(x.rows()) + " rows");
    const bool rg = x.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(x.value().middleRows(start, count)), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        tape->record("slice_rows", {x.id()}, out.id(), [xd, od, start, count]() {
            if (!detail::out_grad_ready(od)) return;
            Mat<S> gx = Mat<S>::Zero(xd->value.rows(), xd->value.cols());
            gx.middleRows(start, count) = od->grad;
            detail::add_grad(xd, gx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> slice_cols(Tape<S>* tape, const Tensor<S>& x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.cols())
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of " + std::to_string(x.cols()) + " cols");
    const bool rg = x.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(x.value().middleCols(start, count)), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        tape->record("slice_cols", {x.id()}, out.id(), [xd, od, start, count]() {
            if (!detail::out_grad_ready(od)) return;
            Mat<S> gx = Mat<S>::Zero(xd->value.rows(), xd->value.cols());
            gx.middleCols(start, count) = od->grad;
            detail::add_grad(xd, gx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_rows(Tape<S>* tape, const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty input list");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    bool rg = false;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch");
        rows += p.rows();
        rg = rg || p.requires_grad();
    }
    Mat<S> v(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        std::vector<std::shared_ptr<TensorStorage<S>>> ins;
        std::vector<std::uint64_t> ids;
        for (const auto& p : parts) {
            ins.push_back(p.storage());
            ids.push_back(p.id());
        }
        auto od = out.storage();
        tape->record("concat_rows", std::move(ids), out.id(), [ins, od]() {
            if (!detail::out_grad_ready(od)) return;
            Eigen::Index at = 0;
            for (const auto& in : ins) {
                if (in->requires_grad)
                    detail::add_grad(in, Mat<S>(od->grad.middleRows(at, in->value.rows())));
                at += in->value.rows();
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_cols(Tape<S>* tape, const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: empty input list");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    bool rg = false;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
        cols += p.cols();
        rg = rg || p.requires_grad();
    }
    Mat<S> v(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        std::vector<std::shared_ptr<TensorStorage<S>>> ins;
        std::vector<std::uint64_t> ids;
        for (const auto& p : parts) {
            ins.push_back(p.storage());
            ids.push_back(p.id());
        }
        auto od = out.storage();
        tape->record("concat_cols", std::move(ids), out.id(), [ins, od]() {
            if (!detail::out_grad_ready(od)) return;
            Eigen::Index at = 0;
            for (const auto& in : ins) {
                if (in->requires_grad)
                    detail::add_grad(in, Mat<S>(od->grad.middleCols(at, in->value.cols())));
                at += in->value.cols();
            }
        });
    }
    return out;
}

// Embedding lookup: rows of `table` selected by id, gradient scatter-added.
template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, const Tensor<S>& table, const std::vector<int>& ids) {
    Mat<S> v(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows())
            throw ValueError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(table.rows()) + " rows");
        v.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    const bool rg = table.requires_grad();
    Tensor<S> out = detail::make_out(tape, std::move(v), rg);
    if (tape && rg) {
        auto td = table.storage(), od = out.storage();
        auto idv = std::make_shared<std::vector<int>>(ids);
        tape->record("gather_rows", {table.id()}, out.id(), [td, od, idv]() {
            if (!detail::out_grad_ready(od)) return;
            Mat<S> gx = Mat<S>::Zero(td->value.rows(), td->value.cols());
            for (std::size_t i = 0; i < idv->size(); ++i)
                gx.row((*idv)[i]) += od->grad.row(static_cast<Eigen::Index>(i));
            detail::add_grad(td, gx);
        });
    }
    return out;
}

// Inverted dropout on activations; the caller owns the rng stream.
template <typename S>
Tensor<S> dropout(Tape<S>* tape, const Tensor<S>& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw ValueError("dropout probability must be < 1");
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    Mat<S> mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            mask(i, j) = rng.next_bernoulli(p) ? S(0) : keep_scale;
    const bool rg = x.requires_grad();
    Tensor<S> out = detail::make_out(tape, Mat<S>(x.value().cwiseProduct(mask)), rg);
    if (tape && rg) {
        auto xd = x.storage(), od = out.storage();
        auto mk = std::make_shared<Mat<S>>(std::move(mask));
        tape->record("dropout", {x.id()}, out.id(), [xd, od, mk]() {
            if (!detail::out_grad_ready(od)) return;
            detail::add_grad(xd, Mat<S>(od->grad.cwiseProduct(*mk)));
        });
    }
    return out;
}

template <typename S>
bool all_finite(const Mat<S>& m) {
    return m.allFinite();
}

}  // namespace forgelab
