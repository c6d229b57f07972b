#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dipa/gradcheck.hpp"
#include "dipa/tape.hpp"

using namespace dipa;

TEST_CASE("linear map adjoint: d(sum(gamma * x))/dgamma = x") {
    const TensorD x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    const TensorD gamma(Shape{3}, {0.5, -1, 2});
    const TensorD beta(Shape{3});

    Tape<double> tape;
    const int g = tape.leaf(gamma);
    const int b = tape.leaf(beta);
    const int y = tape.scale_shift(tape.constant(x), g, b);
    const int loss = tape.sum(y);

    const GradMap<double> grads = tape.backward(loss);
    const TensorD& dg = grads.at(g);
    // column sums of x
    CHECK(dg[0] == doctest::Approx(5.0));
    CHECK(dg[1] == doctest::Approx(7.0));
    CHECK(dg[2] == doctest::Approx(9.0));
    const TensorD& db = grads.at(b);
    for (double v : db.data()) CHECK(v == doctest::Approx(2.0));  // row count
}

TEST_CASE("l2_normalize gradient is orthogonal to the input direction") {
    Rng rng(13);
    TensorD x(Shape{1, 5});
    TensorD w(Shape{1, 5});
    for (auto& v : x.data()) v = rng.normal();
    for (auto& v : w.data()) v = rng.normal();

    Tape<double> tape;
    const int xi = tape.leaf(x);
    const int loss = tape.sum(tape.mul(tape.l2_normalize(xi), tape.constant(w)));
    const GradMap<double> grads = tape.backward(loss);

    double dot = 0.0;
    const TensorD& g = grads.at(xi);
    for (std::size_t i = 0; i < 5; ++i) dot += g[i] * x[i];
    CHECK(std::abs(dot) < 1e-10);
}

TEST_CASE("unreachable leaves get zero gradients") {
    Tape<double> tape;
    const int used = tape.leaf(TensorD(Shape{2}, {1, 2}));
    const int unused = tape.leaf(TensorD(Shape{3}, {1, 2, 3}));
    const int loss = tape.sum(used);
    const GradMap<double> grads = tape.backward(loss);
    CHECK(grads.size() == 2);
    for (double v : grads.at(unused).data()) CHECK(v == 0.0);
    for (double v : grads.at(used).data()) CHECK(v == 1.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape<double> tape;
    const int leaf = tape.leaf(TensorD(Shape{2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(leaf), UsageError);
}

TEST_CASE("finite-difference suite over every adjoint (f64)") {
    const auto checks = gradcheck::run_op_suite<double>(17, 1e-5);
    CHECK(checks.size() >= 19);
    for (const auto& c : checks) {
        INFO("op ", c.name);
        CHECK(c.max_rel_err < 1e-4);
    }
}

TEST_CASE("end-to-end gradient through a 2-block encoder (f64)") {
    const auto check = gradcheck::run_end_to_end<double>(17, 1e-5);
    CHECK(check.max_rel_err < 1e-4);
}

TEST_CASE("corrupted adjoint is caught and named") {
    corrupt_adjoint_for_testing<double>(OpKind::ScaleShift);
    const auto checks = gradcheck::run_op_suite<double>(17, 1e-5);
    reset_adjoints<double>();

    bool scale_shift_failed = false;
    for (const auto& c : checks)
        if (c.name == "scale_shift") scale_shift_failed = c.max_rel_err >= 1e-4;
    CHECK(scale_shift_failed);

    // registry restored
    const auto clean = gradcheck::run_op_suite<double>(17, 1e-5);
    for (const auto& c : clean) CHECK(c.max_rel_err < 1e-4);
}

TEST_CASE("gradients of the proxy-anchor loss flow to embeddings and anchors") {
    Rng rng(23);
    TensorD emb(Shape{6, 4}), anc(Shape{3, 4});
    for (auto& v : emb.data()) v = rng.normal();
    for (auto& v : anc.data()) v = rng.normal();
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};

    Tape<double> tape;
    const int e = tape.leaf(emb);
    const int a = tape.leaf(anc);
    const int loss = tape.proxy_anchor_loss(tape.cosine_sim(e, a), labels, {});
    const GradMap<double> grads = tape.backward(loss);

    double norm_e = 0.0, norm_a = 0.0;
    for (double v : grads.at(e).data()) norm_e += v * v;
    for (double v : grads.at(a).data()) norm_a += v * v;
    CHECK(norm_e > 0.0);
    CHECK(norm_a > 0.0);
}
