#include "doctest.h"

#include <cstring>

#include "forgelab/param_store.hpp"
#include "forgelab/rng.hpp"

using namespace forgelab;

namespace {

ParamStore<double> small_store(Rng& rng) {
    ParamStore<double> store;
    store.add("a.w", Tensor<double>::randn(3, 1, 1.0, rng, true), Component::Vision, 0, true);
    store.add("b.w", Tensor<double>::randn(2, 1, 1.0, rng, true), Component::Backbone, 0, true);
    return store;
}

}  // namespace

TEST_SUITE_BEGIN("param_store");

TEST_CASE("paths are unique and ordered") {
    Rng rng(3);
    ParamStore<double> store = small_store(rng);
    CHECK_THROWS_AS(store.add("a.w", Tensor<double>::zeros(1, 1), Component::Vision, 0, true), ValueError);
    const auto paths = store.paths();
    CHECK(paths == std::vector<std::string>{"a.w", "b.w"});
    CHECK_THROWS_AS(store.at("missing"), ValueError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Rng rng(4);
    ParamStore<double> store = small_store(rng);
    AdamState<double> state;
    const Mat<double> before = store.at("a.w").value();
    store.at("a.w").accumulate_grad(Mat<double>::Zero(3, 1));
    store.at("b.w").accumulate_grad(Mat<double>::Zero(2, 1));
    adam_step(store, state, 0.1, {"a.w", "b.w"});
    CHECK(store.at("a.w").value() == before);
    CHECK(state.t == 1);
}

TEST_CASE("adam: first step moves by about -lr * sign(g)") {
    Rng rng(5);
    ParamStore<double> store = small_store(rng);
    AdamState<double> state;
    Mat<double> g(3, 1);
    g << 0.3, -2.0, 1e-4;
    const Mat<double> before = store.at("a.w").value();
    store.at("a.w").accumulate_grad(g);
    const double lr = 0.01;
    adam_step(store, state, lr, {"a.w"});
    const Mat<double> delta = store.at("a.w").value() - before;
    for (int i = 0; i < 3; ++i)
        CHECK(delta(i, 0) == doctest::Approx(-lr * (g(i, 0) > 0 ? 1.0 : -1.0)).epsilon(1e-3));
}

TEST_CASE("adam: inactive paths stay bit-identical, missing grads are named") {
    Rng rng(6);
    ParamStore<double> store = small_store(rng);
    AdamState<double> state;
    const Mat<double> frozen = store.at("b.w").value();
    store.at("a.w").accumulate_grad(Mat<double>::Ones(3, 1));
    store.at("b.w").accumulate_grad(Mat<double>::Ones(2, 1));
    adam_step(store, state, 0.05, {"a.w"});
    CHECK(std::memcmp(frozen.data(), store.at("b.w").value().data(), sizeof(double) * 2) == 0);

    store.zero_grads();
    CHECK_THROWS_WITH_AS(adam_step(store, state, 0.05, {"a.w"}), doctest::Contains("a.w"), ValueError);
}

TEST_CASE("adam is bit-deterministic") {
    auto run = []() {
        Rng rng(7);
        ParamStore<double> store = small_store(rng);
        AdamState<double> state;
        for (int step = 0; step < 5; ++step) {
            store.zero_grads();
            store.at("a.w").accumulate_grad(Mat<double>::Constant(3, 1, 0.1 * (step + 1)));
            store.at("b.w").accumulate_grad(Mat<double>::Constant(2, 1, -0.2));
            adam_step(store, state, 0.01, {"a.w", "b.w"});
        }
        return std::make_pair(Mat<double>(store.at("a.w").value()), Mat<double>(store.at("b.w").value()));
    };
    const auto r1 = run();
    const auto r2 = run();
    CHECK(std::memcmp(r1.first.data(), r2.first.data(), sizeof(double) * 3) == 0);
    CHECK(std::memcmp(r1.second.data(), r2.second.data(), sizeof(double) * 2) == 0);
}

TEST_CASE("flatten and scatter are exact inverses") {
    Rng rng(8);
    ParamStore<double> store = small_store(rng);
    Mat<double> ga = Mat<double>::Random(3, 1), gb = Mat<double>::Random(2, 1);
    store.at("a.w").accumulate_grad(ga);
    store.at("b.w").accumulate_grad(gb);
    const std::vector<std::string> order{"a.w", "b.w"};
    auto flat = flatten_grads(store, order);
    CHECK(flat.size() == 5);
    scatter_flat(store, flat, order);
    CHECK(store.at("a.w").grad() == ga);
    CHECK(store.at("b.w").grad() == gb);

    Eigen::Matrix<double, Eigen::Dynamic, 1> wrong(4);
    wrong.setZero();
    CHECK_THROWS_AS(scatter_flat(store, wrong, order), DimensionError);
}

TEST_CASE("clone is deep and fingerprint tracks values") {
    Rng rng(9);
    ParamStore<double> store = small_store(rng);
    ParamStore<double> copy = store.clone();
    CHECK(copy.fingerprint() == store.fingerprint());
    copy.at("a.w").value()(0, 0) += 1.0;
    CHECK(copy.fingerprint() != store.fingerprint());
    CHECK(store.at("a.w").value()(0, 0) != copy.at("a.w").value()(0, 0));
}

TEST_SUITE_END();
