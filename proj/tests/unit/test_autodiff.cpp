#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "qrvae/autodiff.hpp"

using namespace qrvae;

TEST_CASE("tensor rejects inconsistent shapes") {
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK(Tensor().size() == 1);
    CHECK(Tensor::eye(3)[4] == 1.0);
}

TEST_CASE("worked forward examples") {
    Tape t;
    auto a = t.constant(Tensor::vector({1, 2}));
    auto b = t.constant(Tensor::vector({3, 4}));
    CHECK(add(a, b).value() == Tensor::vector({4, 6}));

    auto m = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
    CHECK(matmul(t.constant(Tensor::eye(3)), t.constant(m)).value() == m);

    CHECK(sum(exp(t.constant(Tensor(Shape{3}, 0.0)))).value().item() == 3.0);
}

TEST_CASE("worked backward examples") {
    {
        Tape t;
        auto x = t.variable(Tensor::vector({1, 2}));
        t.backward(sum(square(x)));
        CHECK(x.grad() == Tensor::vector({2, 4}));
    }
    {
        Tape t;
        auto x = t.variable(Tensor::scalar(0.0));
        t.backward(sigmoid(x));
        CHECK(x.grad().item() == doctest::Approx(0.25));
    }
}

TEST_CASE("backward contract") {
    Tape t;
    auto x = t.variable(Tensor::vector({1, 2}));
    CHECK_THROWS(t.backward(x));  // not scalar
    auto l = sum(x);
    t.backward(l);
    CHECK_THROWS(t.backward(l));
    t.reset();
    CHECK(t.size() == 0);
}

TEST_CASE("domain errors") {
    Tape t;
    CHECK_THROWS_AS(log(t.constant(Tensor::vector({1, 0}))), NumericError);
    CHECK_THROWS_AS(sqrt(t.constant(Tensor::vector({-1}))), NumericError);
    CHECK_THROWS_AS(add(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{2, 2}))), ShapeError);
    CHECK_THROWS_AS(matmul(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{2, 3}))), ShapeError);
}

TEST_CASE("broadcasting") {
    CHECK(broadcast_shapes({2, 1, 3}, {4, 1}) == Shape{2, 4, 3});
    CHECK_THROWS_AS(broadcast_shapes({2, 3}, {3, 2}), ShapeError);
    Tape t;
    auto a = t.variable(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    auto b = t.variable(Tensor::vector({10, 20, 30}));
    auto y = a + b;
    CHECK(y.value() == Tensor::matrix(2, 3, {11, 22, 33, 14, 25, 36}));
    t.backward(sum(y));
    CHECK(b.grad() == Tensor::vector({2, 2, 2}));
}

TEST_CASE("slice, concat and reshape") {
    Tape t;
    auto a = t.variable(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    auto s = slice(a, 1, 1, 2);
    CHECK(s.value() == Tensor::matrix(2, 2, {2, 3, 5, 6}));
    std::vector<Var> parts{s, slice(a, 1, 0, 1)};
    auto c = concat(parts, 1);
    CHECK(c.value() == Tensor::matrix(2, 3, {2, 3, 1, 5, 6, 4}));
    CHECK(reshape(a, {3, 2}).value().shape() == Shape{3, 2});
    t.backward(sum(c));
    CHECK(a.grad() == Tensor(Shape{2, 3}, 1.0));
}

TEST_CASE("kinks take subgradient zero") {
    Tape t;
    auto x = t.variable(Tensor::vector({0.0, 1.0, -1.0}));
    t.backward(sum(relu(x) + maximum(x, 1.0)));
    CHECK(x.grad() == Tensor::vector({0.0, 1.0, 0.0}));
}

TEST_CASE("every op matches central differences") {
    oracle::Gen g(11);
    const std::vector<std::pair<const char*, std::function<Var(const Var&)>>> unary{
        {"exp", [](const Var& v) { return exp(v); }},
        {"square", [](const Var& v) { return square(v); }},
        {"neg", [](const Var& v) { return neg(v); }},
        {"relu", [](const Var& v) { return relu(v); }},
        {"sigmoid", [](const Var& v) { return sigmoid(v); }},
        {"max-const", [](const Var& v) { return maximum(v, 0.3); }},
        {"mean", [](const Var& v) { return mean(v); }},
        {"sum-axis", [](const Var& v) { return sum(v, 1); }},
        {"reshape", [](const Var& v) { return reshape(v, {v.value().size()}); }},
        {"slice", [](const Var& v) { return slice(v, 1, 1, 2); }},
        {"broadcast", [](const Var& v) { return broadcast_to(v, {2, v.shape()[0], v.shape()[1]}); }},
        {"clamp", [](const Var& v) { return clamp(v, -1.0, 1.0); }},
    };
    for (int inst = 0; inst < 20; ++inst) {
        const Shape s{g.index(1, 4), g.index(3, 5)};
        for (const auto& [name, f] : unary) {
            CAPTURE(name);
            Parameter p("x", g.tensor(s));
            const auto seed = g.rng();
            CHECK(oracle::gradient_error([&](Tape& t) { return oracle::project(t, f(t.parameter(p)), seed); }, {&p}) <
                  1e-4);
        }
        for (const char* name : {"log", "sqrt"}) {
            CAPTURE(name);
            Parameter p("x", g.tensor(s, 0.5, 2.0));
            const bool is_log = name[0] == 'l';
            CHECK(oracle::gradient_error(
                      [&](Tape& t) {
                          auto v = t.parameter(p);
                          return oracle::project(t, is_log ? log(v) : sqrt(v), 3);
                      },
                      {&p}) < 1e-4);
        }
        Parameter a("a", g.tensor(s)), b("b", g.tensor({s[1]})), m("m", g.tensor({s[1], 3}));
        CHECK(oracle::gradient_error([&](Tape& t) { return oracle::project(t, t.parameter(a) * t.parameter(b), 5); },
                                     {&a, &b}) < 1e-4);
        CHECK(oracle::gradient_error([&](Tape& t) { return oracle::project(t, t.parameter(a) - t.parameter(b), 6); },
                                     {&a, &b}) < 1e-4);
        CHECK(oracle::gradient_error([&](Tape& t) { return oracle::project(t, matmul(t.parameter(a), t.parameter(m)), 7); },
                                     {&a, &m}) < 1e-4);
        CHECK(oracle::gradient_error(
                  [&](Tape& t) {
                      std::vector<Var> parts{t.parameter(a), square(t.parameter(a))};
                      return oracle::project(t, concat(parts, 0), 8);
                  },
                  {&a}) < 1e-4);
    }
}

TEST_CASE("backward is linear in the loss") {
    oracle::Gen g(5);
    for (int inst = 0; inst < 20; ++inst) {
        Parameter x("x", g.tensor({3, 4}));
        const double ca = g.uniform(-2, 2), cb = g.uniform(-2, 2);
        auto l1 = [&](Tape& t) { return sum(sigmoid(t.parameter(x)) * t.parameter(x)); };
        auto l2 = [&](Tape& t) { return sum(exp(scale(t.parameter(x), 0.3))); };
        auto grad_of = [&](const std::function<Var(Tape&)>& f) {
            x.zero_grad();
            Tape t;
            t.backward(f(t));
            return x.grad;
        };
        Tensor g1 = grad_of(l1), g2 = grad_of(l2);
        Tensor gc = grad_of([&](Tape& t) { return scale(l1(t), ca) + scale(l2(t), cb); });
        for (std::size_t i = 0; i < gc.size(); ++i) CHECK(gc[i] == doctest::Approx(ca * g1[i] + cb * g2[i]).epsilon(1e-12));
    }
}

TEST_CASE("forward is bitwise deterministic") {
    oracle::Gen g(9);
    Tensor a = g.tensor({17, 33}), b = g.tensor({33, 5});
    auto run = [&] {
        Tape t;
        return sum(matmul(t.constant(a), t.constant(b))).value().item();
    };
    CHECK(run() == run());
}
