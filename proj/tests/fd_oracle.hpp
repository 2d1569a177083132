#pragma once

// Finite-difference gradient oracle shared by the tensor unit tests and the
// acceptance suite. Graphs are built in double precision and every analytic
// gradient entry is compared against a central difference.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "forgelab/rng.hpp"
#include "forgelab/tensor.hpp"

namespace forgelab::testing {

struct GraphCase {
    std::vector<Tensor<double>> params;
    std::function<Tensor<double>(Tape<double>*, std::vector<Tensor<double>>&)> build;
    std::string name;
};

inline Tensor<double> rand_param(Rng& rng, int r, int c, double std_ = 0.5) {
    return Tensor<double>::randn(r, c, std_, rng, true);
}

inline std::vector<int> rand_targets(Rng& rng, int n, int vocab) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = rng.next_int(0, vocab - 1);
    return t;
}

// Builds one of six graph families covering every differentiable op the
// policy forward uses.
inline GraphCase make_random_case(Rng& rng, int variant) {
    GraphCase gc;
    const int n = rng.next_int(2, 6);   // batch rows
    const int d = rng.next_int(2, 8);   // width
    const int h = rng.next_int(2, 8);   // hidden
    const int v = rng.next_int(2, 8);   // vocab
    switch (variant % 6) {
        case 0: {  // two-layer MLP into cross entropy
            gc.name = "mlp_ce";
            Tensor<double> x(Mat<double>::Random(n, d));
            auto w1 = rand_param(rng, h, d);
            auto b1 = rand_param(rng, 1, h, 0.1);
            auto w2 = rand_param(rng, v, h);
            auto b2 = rand_param(rng, 1, v, 0.1);
            gc.params = {w1, b1, w2, b2};
            auto targets = rand_targets(rng, n, v);
            gc.build = [x, targets](Tape<double>* tape, std::vector<Tensor<double>>& p) {
                auto h1 = gelu(tape, add_rowvec(tape, matmul_nt(tape, x, p[0]), p[1]));
                auto logits = add_rowvec(tape, matmul_nt(tape, h1, p[2]), p[3]);
                return cross_entropy_logits(tape, logits, targets);
            };
            break;
        }
        case 1: {  // layer norm + causal attention head
            gc.name = "attn_causal";
            Tensor<double> x(Mat<double>::Random(n, d));
            auto g = rand_param(rng, 1, d, 0.2);
            auto b = rand_param(rng, 1, d, 0.2);
            auto wq = rand_param(rng, d, d);
            auto wk = rand_param(rng, d, d);
            auto wv = rand_param(rng, d, d);
            gc.params = {g, b, wq, wk, wv};
            gc.build = [x, d](Tape<double>* tape, std::vector<Tensor<double>>& p) {
                auto hn = layer_norm(tape, x, p[0], p[1]);
                auto q = matmul_nt(tape, hn, p[2]);
                auto k = matmul_nt(tape, hn, p[3]);
                auto vv = matmul_nt(tape, hn, p[4]);
                auto scores = scale(tape, matmul_nt(tape, q, k), 1.0 / std::sqrt(static_cast<double>(d)));
                auto probs = causal_softmax(tape, scores);
                auto o = matmul(tape, probs, vv);
                return squared_norm(tape, mean_rows(tape, o));
            };
            break;
        }
        case 2: {  // KL with both sides trainable
            gc.name = "kl_both";
            Tensor<double> x(Mat<double>::Random(n, d));
            auto wp = rand_param(rng, v, d);
            auto wq = rand_param(rng, v, d);
            gc.params = {wp, wq};
            gc.build = [x](Tape<double>* tape, std::vector<Tensor<double>>& p) {
                auto lp = matmul_nt(tape, x, p[0]);
                auto lq = matmul_nt(tape, x, p[1]);
                return kl_divergence(tape, lp, lq);
            };
            break;
        }
        case 3: {  // embedding gather + concat + slice + softplus
            gc.name = "gather_concat";
            auto table = rand_param(rng, v, d);
            auto w = rand_param(rng, h, d);
            gc.params = {table, w};
            auto ids = rand_targets(rng, n, v);
            auto ids2 = rand_targets(rng, n, v);
            gc.build = [ids, ids2](Tape<double>* tape, std::vector<Tensor<double>>& p) {
                auto e1 = gather_rows(tape, p[0], ids);
                auto e2 = gather_rows(tape, p[0], ids2);
                auto cat = concat_rows(tape, {e1, e2});
                auto hdn = softplus(tape, matmul_nt(tape, cat, p[1]));
                auto sl = slice_rows(tape, hdn, 0, std::min<Eigen::Index>(2, hdn.rows()));
                return sum_all(tape, sl);
            };
            break;
        }
        case 4: {  // elementwise mix: mul / sub / scale / add_const / softmax
            gc.name = "elementwise_mix";
            auto a = rand_param(rng, n, d);
            auto b = rand_param(rng, n, d);
            gc.params = {a, b};
            gc.build = [](Tape<double>* tape, std::vector<Tensor<double>>& p) {
                auto prod = mul(tape, p[0], p[1]);
                auto diff = sub(tape, prod, scale(tape, p[1], 0.5));
                auto shifted = add_const(tape, diff, 0.25);
                auto sm = softmax_rows(tape, shifted);
                auto mixed = mul(tape, sm, add(tape, p[0], p[1]));
                return squared_norm(tape, mixed);
            };
            break;
        }
        default: {  // sequence log prob through a projection, NPO-style
            gc.name = "seq_logprob";
            Tensor<double> x(Mat<double>::Random(n, d));
            auto w = rand_param(rng, v, d);
            gc.params = {w};
            auto targets = rand_targets(rng, n, v);
            gc.build = [x, targets](Tape<double>* tape, std::vector<Tensor<double>>& p) {
                auto logits = matmul_nt(tape, x, p[0]);
                auto ll = sequence_log_prob(tape, logits, targets);
                return softplus(tape, scale(tape, ll, 0.3));
            };
            break;
        }
    }
    return gc;
}

// Central-difference comparison at step h; returns false and fills diag on
// the first entry whose error exceeds tol relative to max(|fd|, 1e-3).
inline bool check_case_gradients(GraphCase& gc, double h, double tol, std::string* diag) {
    for (auto& p : gc.params) p.zero_grad();
    Tape<double> tape;
    Tensor<double> loss = gc.build(&tape, gc.params);
    tape.backward(loss);

    std::vector<Mat<double>> analytic;
    for (auto& p : gc.params)
        analytic.push_back(p.has_grad() ? p.grad() : Mat<double>::Zero(p.rows(), p.cols()));

    for (std::size_t pi = 0; pi < gc.params.size(); ++pi) {
        auto& p = gc.params[pi];
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            for (Eigen::Index j = 0; j < p.cols(); ++j) {
                const double orig = p.value()(i, j);
                p.value()(i, j) = orig + h;
                const double up = gc.build(nullptr, gc.params).item();
                p.value()(i, j) = orig - h;
                const double dn = gc.build(nullptr, gc.params).item();
                p.value()(i, j) = orig;
                const double fd = (up - dn) / (2.0 * h);
                const double ad = analytic[pi](i, j);
                const double err = std::abs(ad - fd);
                if (err > tol * std::max(std::abs(fd), 1e-3)) {
                    if (diag)
                        *diag = gc.name + " param " + std::to_string(pi) + " (" + std::to_string(i) + "," +
                                std::to_string(j) + "): analytic " + std::to_string(ad) + " vs fd " +
                                std::to_string(fd);
                    return false;
                }
            }
        }
    }
    return true;
}

}  // namespace forgelab::testing
