#include <doctest.h>

#include "bus/errors.hpp"
#include "bus/gradcheck.hpp"
#include "bus/rng.hpp"
#include "bus/tensor.hpp"

#include <cmath>

using namespace bus;

TEST_CASE("matmul identity and hand sums") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(eye, eye);
    CHECK(c.data() == std::vector<double>{1, 0, 0, 1});

    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {1, 1});
    Tensor r = matmul(a, b);
    CHECK(r.at(0, 0) == doctest::Approx(3.0));
    CHECK(r.at(1, 0) == doctest::Approx(7.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("softmax rows: symmetry, stabilization, row sums") {
    Tensor x = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (int j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor big = Tensor::from_data({1, 3}, {1000, 0, 0});
    Tensor yb = softmax_rows(big);
    CHECK(yb.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(yb.at(0, 1) == doctest::Approx(0.0));

    Rng rng(7);
    Tensor r = Tensor::randn({5, 9}, rng, 3.0);
    Tensor yr = softmax_rows(r);
    for (int i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 9; ++j) {
            const double v = yr.at(i, j);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x = Tensor::from_data({1, 2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(softmax_rows(x), NumericError);
}

TEST_CASE("layer_norm constant row maps to bias under eps guard") {
    Tensor x = Tensor::full({2, 4}, 3.25);
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor y = layer_norm(x, gain, bias, 1e-5);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) CHECK(y.at(i, j) == doctest::Approx(0.0));
}

TEST_CASE("layer_norm leaves a normalized row nearly fixed as eps shrinks") {
    Tensor x = Tensor::from_data({1, 2}, {1, -1});
    Tensor gain = Tensor::full({2}, 1.0);
    Tensor bias = Tensor::zeros({2});
    Tensor y = layer_norm(x, gain, bias, 1e-12);
    CHECK(y.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm rows have zero mean and unit variance pre-affine") {
    Rng rng(11);
    Tensor x = Tensor::randn({4, 8}, rng, 2.0);
    Tensor gain = Tensor::full({8}, 1.0);
    Tensor bias = Tensor::zeros({8});
    Tensor y = layer_norm(x, gain, bias, 1e-9);
    for (int i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < 8; ++j) mean += y.at(i, j);
        mean /= 8;
        for (int j = 0; j < 8; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        var /= 8;
        CHECK(std::abs(mean) <= 1e-7);
        CHECK(std::abs(var - 1.0) <= 1e-6);
    }
}

TEST_CASE("analytic point values: sigmoid and binary cross-entropy") {
    Tensor zero = Tensor::from_data({1}, {0.0});
    CHECK(sigmoid(zero).item() == doctest::Approx(0.5).epsilon(1e-15));

    Tensor half = Tensor::from_data({1}, {0.5});
    CHECK(bce_mean(half, {1.0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("finite differences pass for every primitive op") {
    auto reports = run_op_gradchecks(1234);
    CHECK(reports.size() >= 25);
    for (const auto& r : reports) {
        INFO(r.name, " max_err=", r.max_err);
        CHECK(r.pass);
    }
}

TEST_CASE("backward leaves unrelated tensors with exactly zero grad") {
    Tensor used = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor unused = Tensor::from_data({2}, {3.0, 4.0}, true);
    Tensor loss = sum_all(mul(used, used));
    backward(loss);
    CHECK(unused.grad()[0] == 0.0);
    CHECK(unused.grad()[1] == 0.0);
    CHECK(used.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("repeated forward+backward from one seed is bit-identical") {
    auto run = [] {
        Rng rng(99);
        Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 4}, rng, 1.0, true);
        Tensor loss = sum_all(gelu(matmul(a, b)));
        backward(loss);
        std::vector<double> out = loss.data();
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("no-grad mode records no graph") {
    Tensor a = Tensor::from_data({2}, {1.0, 2.0}, true);
    NoGradGuard guard;
    Tensor y = scale(a, 2.0);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gather is differentiable in values with constant indices") {
    Tensor x = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tensor y = gather_rows(x, {2, 0});
    Tensor loss = sum_all(y);
    backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 1, 0, 0, 1, 1});
}

TEST_CASE("minmax_norm maps constant vectors to one half") {
    Tensor v = Tensor::full({4}, 2.5, true);
    Tensor y = minmax_norm(v);
    for (double val : y.data()) CHECK(val == 0.5);
    backward(sum_all(y));
    for (double g : v.grad()) CHECK(g == 0.0);

    Tensor single = Tensor::from_data({1}, {42.0});
    CHECK(minmax_norm(single).data()[0] == 0.5);
}

TEST_CASE("weighted_mean_rows degenerates to uniform at zero weights") {
    Tensor s = Tensor::from_data({2, 2}, {0, 2, 4, 6});
    Tensor w = Tensor::zeros({2});
    Tensor m = weighted_mean_rows(s, w);
    CHECK(m.at(0, 0) == doctest::Approx(2.0));
    CHECK(m.at(0, 1) == doctest::Approx(4.0));
}

TEST_CASE("cross_entropy_rows matches a direct evaluation") {
    Tensor logits = Tensor::from_data({2, 3}, {1, 2, 3, 0, 0, 0});
    Tensor loss = cross_entropy_rows(logits, {2, 1});
    const double lse0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    const double expect = 0.5 * ((lse0 - 3.0) + std::log(3.0));
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-12));
}
