#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "ctg/gradcheck.hpp"
#include "ctg/ops.hpp"
#include "ctg/rng.hpp"

using namespace ctg;
using namespace ctg::autodiff;

namespace {

// independent scalar oracle for -log softmax(logits)[target]
double nll_oracle(const std::vector<double>& logits, std::size_t target) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return -(logits[target] - mx - std::log(sum));
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Tape tape;
    Tensor x = tape.input({2}, {0.0, 0.0});
    Tensor s = ops::softmax(x);
    CHECK(s.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.values()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one with entries in [0,1]") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tape tape;
        std::vector<double> vals(4 * 9);
        for (auto& v : vals) v = rng.gaussian(0.0, 5.0);
        Tensor s = ops::softmax(tape.input({4, 9}, vals));
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                double p = s.at(r, j);
                CHECK(p >= 0.0);
                CHECK(p <= 1.0);
                sum += p;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("one-hot matmul selects the matching matrix row") {
    Tape tape;
    const std::size_t V = 6, d = 3;
    std::vector<double> emb(V * d);
    for (std::size_t i = 0; i < emb.size(); ++i) emb[i] = 0.1 * static_cast<double>(i);
    Tensor E = tape.input({V, d}, emb);
    std::vector<double> onehot(V, 0.0);
    onehot[4] = 1.0;
    Tensor row = ops::matmul(tape.constant({1, V}, onehot), E);
    for (std::size_t j = 0; j < d; ++j) {
        CHECK(row.values()[j] == doctest::Approx(emb[4 * d + j]).epsilon(1e-15));
    }
}

TEST_CASE("cross entropy of confident correct logits is near zero") {
    const std::vector<double> logits = {10.0, -10.0};
    const double expected = nll_oracle(logits, 0);
    REQUIRE(expected < 1e-4);

    Tape tape;
    Tensor loss = ops::cross_entropy_mean(tape.input({1, 2}, logits), {0});
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-9));
    CHECK(loss.item() < 1e-4);
}

TEST_CASE("backward of sum fills ones") {
    Tape tape;
    Tensor x = tape.input({3}, {1.0, -2.0, 0.5});
    tape.backward(ops::sum_all(x));
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of sum of squares doubles the input") {
    Tape tape;
    Tensor x = tape.input({2}, {1.0, 2.0});
    tape.backward(ops::sum_all(ops::mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("cross entropy through a linear layer matches finite differences") {
    Rng rng(42);
    std::vector<double> w(3 * 4), xv(4);
    for (auto& v : w) v = rng.gaussian(0.0, 1.0);
    for (auto& v : xv) v = rng.gaussian(0.0, 1.0);

    auto f = [&xv](Tape& tape, const Tensor& W) {
        Tensor x = tape.constant({4, 1}, xv);
        Tensor logits = ops::transpose(ops::matmul(W, x));  // 1x3
        return ops::cross_entropy_mean(logits, {2});
    };
    auto res = grad_check(f, Tensor({3, 4}, w), 1e-5, 1e-4);
    CHECK(res.pass);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("backward rejects non-scalar root") {
    Tape tape;
    Tensor x = tape.input({2}, {1.0, 2.0});
    Tensor y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("disconnected leaf gets a zero gradient") {
    Tape tape;
    Tensor x = tape.input({2}, {1.0, 2.0});
    Tensor unused = tape.input({3}, {5.0, 6.0, 7.0});
    tape.backward(ops::sum_all(x));
    for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("detached tensors never receive gradient") {
    Tensor plain({2}, {1.0, 2.0});
    CHECK_FALSE(plain.on_tape());
    CHECK_FALSE(plain.has_grad());

    Tape tape;
    Tensor x = tape.input({2}, {3.0, 4.0});
    tape.backward(ops::sum_all(ops::mul(x, plain)));
    CHECK_FALSE(plain.has_grad());  // lifted copy is a constant on the tape
    CHECK(x.grad()[0] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("shape mismatch diagnostics name the op and shapes") {
    Tape tape;
    Tensor a = tape.input({2, 3}, std::vector<double>(6, 0.0));
    Tensor b = tape.input({3, 2}, std::vector<double>(6, 0.0));
    try {
        ops::add(a, b);
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[3x2]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::matmul(a, a), std::invalid_argument);
}

TEST_CASE("ste_one_hot forward is an exact one-hot at the argmax") {
    Tape tape;
    Tensor y = ops::ste_one_hot(tape.input({3}, {0.1, 0.7, 0.2}));
    CHECK(y.values() == std::vector<double>{0.0, 1.0, 0.0});

    Tensor tie = ops::ste_one_hot(tape.input({3}, {3.0, 3.0, 1.0}));
    CHECK(tie.values() == std::vector<double>{1.0, 0.0, 0.0});  // tie -> lowest index

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Tape tp;
        std::vector<double> v(17);
        for (auto& x : v) x = rng.gaussian(0.0, 2.0);
        Tensor oh = ops::ste_one_hot(tp.input({17}, v));
        int ones = 0;
        for (std::size_t i = 0; i < oh.size(); ++i) {
            if (oh.values()[i] == 1.0) {
                ++ones;
                CHECK(i == ops::argmax(std::span<const double>(v)));
            } else {
                CHECK(oh.values()[i] == 0.0);
            }
        }
        CHECK(ones == 1);
    }
}

TEST_CASE("ste_one_hot backward passes the upstream gradient unchanged") {
    Tape tape;
    Tensor x = tape.input({4}, {0.4, 0.1, 0.9, -0.3});
    Tensor y = ops::ste_one_hot(x);
    // scalar = <y, c> so the upstream gradient on y equals c
    const std::vector<double> c = {2.0, -1.0, 0.5, 3.0};
    Tensor probe = tape.constant({4}, c);
    tape.backward(ops::sum_all(ops::mul(y, probe)));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(x.grad()[i] == doctest::Approx(c[i]).epsilon(1e-15));
    }
}

TEST_CASE("ste_one_hot rejects NaN logits") {
    Tape tape;
    Tensor x = tape.input({2}, {0.0, std::nan("")});
    CHECK_THROWS_AS(ops::ste_one_hot(x), std::invalid_argument);
}

TEST_CASE("grad_check sees the zero gradient of sum of softmax") {
    Rng rng(11);
    std::vector<double> v(6);
    for (auto& x : v) x = rng.gaussian(0.0, 1.0);
    auto f = [](Tape&, const Tensor& x) { return ops::sum_all(ops::softmax(x)); };
    auto res = grad_check(f, Tensor({6}, v));
    CHECK(res.pass);

    Tape tape;
    Tensor x = tape.input({6}, v);
    tape.backward(f(tape, x));
    for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("grad_check passes a layer-norm scalar at random points") {
    Rng rng(13);
    std::vector<double> v(2 * 6);
    for (auto& x : v) x = rng.gaussian(0.0, 1.5);
    auto f = [](Tape& tape, const Tensor& x) {
        Tensor gamma = tape.constant({6}, {1.0, 0.5, 2.0, -1.0, 0.3, 1.2});
        Tensor beta = tape.constant({6}, {0.1, 0.0, -0.2, 0.4, 0.0, 0.0});
        return ops::mean_all(ops::gelu(ops::layer_norm(x, gamma, beta)));
    };
    auto res = grad_check(f, Tensor({2, 6}, v), 1e-5, 1e-4);
    CHECK(res.pass);
}

TEST_CASE("grad_check reports non-finite evaluations instead of crashing") {
    auto f = [](Tape& tape, const Tensor& x) {
        Tensor inf = tape.constant({1}, {std::numeric_limits<double>::infinity()});
        return ops::sum_all(ops::mul(ops::sum_all(x), inf));
    };
    auto res = grad_check(f, Tensor::scalar(1.0));
    CHECK_FALSE(res.pass);
    CHECK_FALSE(res.finite);
    CHECK_FALSE(res.note.empty());
}

TEST_CASE("every differentiable op kind passes the finite-difference battery") {
    auto report = op_gradcheck_battery(10);
    for (const auto& check : report) {
        INFO(check.op, " max_rel_err=", check.max_rel_err, " note=", check.note);
        if (check.skipped) {
            CHECK(check.op == "ste_one_hot");
            CHECK_FALSE(check.note.empty());
        } else {
            CHECK(check.pass);
            CHECK(check.max_rel_err <= 1e-4);
        }
    }
}

TEST_CASE("causal softmax ignores entries above the diagonal") {
    Tape tape;
    std::vector<double> v = {1.0, 99.0, 99.0,
                             0.5, 0.5, 99.0,
                             0.2, 0.4, 0.6};
    Tensor s = ops::causal_softmax(tape.input({3, 3}, v));
    CHECK(s.at(0, 0) == doctest::Approx(1.0));
    CHECK(s.at(0, 1) == 0.0);
    CHECK(s.at(0, 2) == 0.0);
    CHECK(s.at(1, 0) == doctest::Approx(0.5));
    CHECK(s.at(1, 1) == doctest::Approx(0.5));
    CHECK(s.at(1, 2) == 0.0);
}

TEST_CASE("repetition penalty op follows the divide/multiply convention") {
    Tape tape;
    Tensor x = tape.input({1, 4}, {2.4, -1.0, 3.0, 0.5});
    std::vector<char> mask = {1, 1, 0, 0};
    Tensor y = ops::repetition_penalty(x, mask, 1.2);
    CHECK(y.values()[0] == doctest::Approx(2.0));
    CHECK(y.values()[1] == doctest::Approx(-1.2));
    CHECK(y.values()[2] == doctest::Approx(3.0));
    CHECK(y.values()[3] == doctest::Approx(0.5));
    CHECK_THROWS_AS(ops::repetition_penalty(x, mask, 0.9), std::invalid_argument);
}
