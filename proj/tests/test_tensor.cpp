#include "doctest.h"

#include <cmath>

#include "fd_oracle.hpp"
#include "forgelab/tensor.hpp"

using namespace forgelab;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul basics") {
    Tensor<double> eye(Mat<double>(MatD::Identity(2, 2)));
    Mat<double> m(2, 2);
    m << 1, 2, 3, 4;
    Tensor<double> a(m);
    Tensor<double> r = matmul<double>(nullptr, eye, a);
    CHECK(r.value() == a.value());

    Mat<double> row(1, 2), col(2, 1);
    row << 1, 2;
    col << 3, 4;
    Tensor<double> out = matmul<double>(nullptr, Tensor<double>(row), Tensor<double>(col));
    CHECK(out.rows() == 1);
    CHECK(out.cols() == 1);
    CHECK(out.item() == doctest::Approx(11.0));

    Mat<double> bad(1, 2);
    bad << 3, 4;
    CHECK_THROWS_AS(matmul<double>(nullptr, Tensor<double>(row), Tensor<double>(bad)), DimensionError);
    CHECK_THROWS_WITH_AS(matmul<double>(nullptr, Tensor<double>(row), Tensor<double>(bad)),
                         doctest::Contains("1x2"), DimensionError);
}

TEST_CASE("cross entropy reference values") {
    SUBCASE("uniform logits give ln V") {
        for (const int v : {2, 6, 9, 16}) {
            Tensor<double> logits(Mat<double>::Constant(3, v, 0.7));
            std::vector<int> targets{0, v - 1, v / 2};
            const double ce = cross_entropy_logits<double>(nullptr, logits, targets).item();
            CHECK(ce == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-9));
        }
    }
    SUBCASE("near one-hot logit") {
        Mat<double> logits = Mat<double>::Zero(1, 9);
        logits(0, 4) = 30.0;
        const double ce = cross_entropy_logits<double>(nullptr, Tensor<double>(logits), {4}).item();
        CHECK(ce < 1e-9);
    }
    SUBCASE("hand-computed binary case") {
        Mat<double> logits(1, 2);
        logits << 1.0, 0.0;
        const double ce = cross_entropy_logits<double>(nullptr, Tensor<double>(logits), {0}).item();
        CHECK(ce == doctest::Approx(0.3132617).epsilon(1e-6));
    }
    SUBCASE("errors") {
        Tensor<double> logits(Mat<double>::Zero(2, 4));
        CHECK_THROWS_WITH_AS(cross_entropy_logits<double>(nullptr, logits, {3, 3}, 3).item(),
                             doctest::Contains("empty loss support"), ValueError);
        CHECK_THROWS_AS(cross_entropy_logits<double>(nullptr, logits, {0, 4}).item(), ValueError);
    }
}

TEST_CASE("kl divergence reference values") {
    SUBCASE("identical logits") {
        Tensor<double> p(Mat<double>::Random(4, 6));
        const double kl = kl_divergence<double>(nullptr, p, p).item();
        CHECK(std::abs(kl) < 1e-9);
    }
    SUBCASE("two-category hand case") {
        Mat<double> pl(1, 2), ql(1, 2);
        pl << 0.0, 0.0;
        ql << std::log(3.0), 0.0;
        const double kl = kl_divergence<double>(nullptr, Tensor<double>(pl), Tensor<double>(ql)).item();
        CHECK(kl == doctest::Approx(0.1438410).epsilon(1e-6));
    }
    SUBCASE("non-negative on random pairs, zero for shifted logits") {
        Rng rng(7);
        for (int trial = 0; trial < 50; ++trial) {
            Tensor<float> p = Tensor<float>::randn(3, 9, 2.0, rng);
            Tensor<float> q = Tensor<float>::randn(3, 9, 2.0, rng);
            CHECK(kl_divergence<float>(nullptr, p, q).item() >= -1e-9f);
            Mat<float> shifted = p.value();
            for (Eigen::Index i = 0; i < shifted.rows(); ++i)
                shifted.row(i).array() += static_cast<float>(rng.next_normal());
            const float kl = kl_divergence<float>(nullptr, p, Tensor<float>(shifted)).item();
            CHECK(std::abs(kl) < 1e-9f);
        }
    }
    SUBCASE("shape mismatch") {
        Tensor<double> p(Mat<double>::Zero(2, 3)), q(Mat<double>::Zero(2, 4));
        CHECK_THROWS_AS(kl_divergence<double>(nullptr, p, q), DimensionError);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    Tensor<float> x = Tensor<float>::randn(5, 9, 3.0, rng);
    Tensor<float> p = softmax_rows<float>(nullptr, x);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        CHECK(p.value().row(i).sum() == doctest::Approx(1.0f).epsilon(1e-6));
    Tensor<float> pc = causal_softmax<float>(nullptr, Tensor<float>(Mat<float>::Random(6, 6)));
    for (Eigen::Index i = 0; i < 6; ++i) {
        CHECK(pc.value().row(i).sum() == doctest::Approx(1.0f).epsilon(1e-6));
        for (Eigen::Index j = i + 1; j < 6; ++j) CHECK(pc.value()(i, j) == 0.0f);
    }
}

TEST_CASE("backward: product rule and edge cases") {
    SUBCASE("x*y gradients") {
        Tensor<double> x(Mat<double>::Constant(1, 1, 2.0), true);
        Tensor<double> y(Mat<double>::Constant(1, 1, 3.0), true);
        Tape<double> tape;
        Tensor<double> loss = mul(&tape, x, y);
        tape.backward(loss);
        CHECK(x.grad()(0, 0) == doctest::Approx(3.0));
        CHECK(y.grad()(0, 0) == doctest::Approx(2.0));
    }
    SUBCASE("no trainable leaves is a no-op") {
        Tensor<double> x(Mat<double>::Constant(1, 1, 2.0));
        Tensor<double> y(Mat<double>::Constant(1, 1, 3.0));
        Tape<double> tape;
        Tensor<double> loss = mul(&tape, x, y);
        CHECK_NOTHROW(tape.backward(loss));
        CHECK(!x.has_grad());
        CHECK(!y.has_grad());
    }
    SUBCASE("non-scalar loss rejected") {
        Tensor<double> x(Mat<double>::Zero(2, 2), true);
        Tape<double> tape;
        Tensor<double> y = scale(&tape, x, 2.0);
        CHECK_THROWS_AS(tape.backward(y), DimensionError);
    }
    SUBCASE("second backward without fresh forward is an error") {
        Tensor<double> x(Mat<double>::Constant(1, 1, 2.0), true);
        Tape<double> tape;
        Tensor<double> loss = scale(&tape, x, 2.0);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), ValueError);
    }
}

TEST_CASE("random small graphs match central finite differences") {
    Rng rng(1234);
    std::string diag;
    for (int i = 0; i < 60; ++i) {
        auto gc = testing::make_random_case(rng, i);
        const bool ok = testing::check_case_gradients(gc, 1e-5, 1e-5, &diag);
        CAPTURE(diag);
        CHECK(ok);
    }
}

TEST_CASE("two-layer net gradient matches finite differences") {
    Rng rng(99);
    auto gc = testing::make_random_case(rng, 0);
    std::string diag;
    CHECK(testing::check_case_gradients(gc, 1e-5, 1e-5, &diag));
}

TEST_CASE("layer_norm and dropout behave") {
    Rng rng(5);
    Tensor<double> x = Tensor<double>::randn(4, 8, 1.0, rng);
    Tensor<double> g(Mat<double>::Ones(1, 8));
    Tensor<double> b(Mat<double>::Zero(1, 8));
    Tensor<double> y = layer_norm<double>(nullptr, x, g, b);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        CHECK(y.value().row(i).mean() == doctest::Approx(0.0).epsilon(1e-9));
        const double var = y.value().row(i).array().square().mean();
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }

    Rng drop_rng(7);
    Tensor<double> kept = dropout<double>(nullptr, x, 0.0, drop_rng);
    CHECK(kept.value() == x.value());
    Tensor<double> dropped = dropout<double>(nullptr, x, 0.5, drop_rng);
    int zeros = 0;
    for (Eigen::Index i = 0; i < dropped.size(); ++i)
        if (dropped.value()(i / 8, i % 8) == 0.0) ++zeros;
    CHECK(zeros > 0);
}

TEST_SUITE_END();
