#include <catch2/catch_amalgamated.hpp>

#include <mdnn/ops.hpp>

#include "oracles.hpp"

using namespace mdnn;

namespace {

template<class R>
std::complex<R> c(double re, double im = 0)
{
    return {R(re), R(im)};
}

} // namespace

TEST_CASE("multiplication nlop evaluates and stores its inputs")
{
    auto f = nlop_mul<double>({1});
    auto x1 = MdArray<double>::scalar(c<double>(2));
    auto x2 = MdArray<double>::scalar(c<double>(3, 1));
    auto y = f.apply({x1, x2});
    CHECK(y[0].data()[0] == c<double>(6, 2));

    // derivative w.r.t. x1 multiplies by the stored x2
    auto d = f.derivative(0, 0, MdArray<double>::scalar(c<double>(1)));
    CHECK(d.data()[0] == c<double>(3, 1));
    auto d2 = f.derivative(0, 1, MdArray<double>::scalar(c<double>(1)));
    CHECK(d2.data()[0] == c<double>(2));
}

TEST_CASE("repeated application is bitwise identical")
{
    Rng rng(4);
    auto f = nlop_mul<float>({8});
    auto a = oracle::random_array<float>({8}, rng);
    auto b = oracle::random_array<float>({8}, rng);
    auto y1 = f.apply({a, b});
    auto y2 = f.apply({a, b});
    CHECK(std::memcmp(y1[0].data(), y2[0].data(), sizeof(std::complex<float>) * 8) == 0);
}

TEST_CASE("derivatives of elementary complex maps")
{
    SECTION("square: DF(1) = 2x at x = 1+i")
    {
        auto f = nlop_square<double>({1});
        f.apply({MdArray<double>::scalar(c<double>(1, 1))});
        auto d = f.derivative(0, 0, MdArray<double>::scalar(c<double>(1)));
        CHECK(d.data()[0].real() == Catch::Approx(2));
        CHECK(d.data()[0].imag() == Catch::Approx(2));
    }
    SECTION("conjugate is R-linear: DF(i) = -i")
    {
        auto f = nlop_zconj<double>({1});
        f.apply({MdArray<double>::scalar(c<double>(0.3, -0.7))});
        auto d = f.derivative(0, 0, MdArray<double>::scalar(c<double>(0, 1)));
        CHECK(d.data()[0].real() == Catch::Approx(0));
        CHECK(d.data()[0].imag() == Catch::Approx(-1));
    }
    SECTION("x conj(x): adjoint derivative of 1 is 2x")
    {
        // J(x) = mul(x, conj(x)) built with combine + link + duplicate
        auto conj = nlop_zconj<double>({1});
        auto mul = nlop_mul<double>({1});
        auto h = link(combine(conj, mul), 0, 2); // conj output -> mul arg 2
        auto f = duplicate(h, 0, 1);             // one x feeds both branches
        auto x = MdArray<double>::scalar(c<double>(1, 2));
        auto y = f.apply({x});
        CHECK(y[0].data()[0].real() == Catch::Approx(5));
        CHECK(y[0].data()[0].imag() == Catch::Approx(0).margin(1e-14));
        auto g = f.adjoint_derivative(0, 0, MdArray<double>::scalar(c<double>(1)));
        CHECK(g.data()[0].real() == Catch::Approx(2));
        CHECK(g.data()[0].imag() == Catch::Approx(4));
    }
}

TEST_CASE("gradient of real-valued functionals")
{
    SECTION("Re(x) has gradient 1")
    {
        auto f = nlop_zreal<double>({1});
        f.apply({MdArray<double>::scalar(c<double>(0.2, 0.9))});
        auto g = f.gradient(0);
        CHECK(g.data()[0].real() == Catch::Approx(1));
        CHECK(g.data()[0].imag() == Catch::Approx(0).margin(1e-14));
    }
    SECTION("sum |x|^2 has gradient 2x")
    {
        Rng rng(8);
        auto f = Nlop<double>(std::make_shared<ZssNode<double>>(Dims{5}));
        auto x = oracle::random_array<double>({5}, rng);
        f.apply({x});
        auto g = f.gradient(0);
        for (long k = 0; k < 5; k++)
            CHECK(std::abs(g.data()[k] - c<double>(2) * x.data()[k]) < 1e-12);

        // matches central finite differences on real and imaginary parts
        auto fd = oracle::fd_directional(f, {x}, 0, 0, MdArray<double>::filled({5}, c<double>(0)), 1e-6);
        (void)fd;
        CHECK(oracle::fd_check_all(f, {x}, 1e-6) < 1e-6);
    }
    SECTION("constants have zero derivative")
    {
        auto zero = linop_scale<double>({3}, c<double>(0));
        auto f = chain(nlop_from_linop(zero), Nlop<double>(std::make_shared<ZssNode<double>>(Dims{3})));
        Rng rng(9);
        auto x = oracle::random_array<double>({3}, rng);
        f.apply({x});
        auto g = f.gradient(0);
        CHECK(md_znorm(g) == 0.0);
    }
}

TEST_CASE("chain composes values and derivatives")
{
    SECTION("3 x^2 at x = 1+i")
    {
        auto f = nlop_square<double>({1});
        auto g = nlop_from_linop(linop_scale<double>({1}, c<double>(3)));
        auto h = chain(f, g);
        auto y = h.apply({MdArray<double>::scalar(c<double>(1, 1))});
        CHECK(y[0].data()[0].real() == Catch::Approx(0).margin(1e-14));
        CHECK(y[0].data()[0].imag() == Catch::Approx(6));
        auto d = h.derivative(0, 0, MdArray<double>::scalar(c<double>(1)));
        CHECK(d.data()[0].real() == Catch::Approx(6));
        CHECK(d.data()[0].imag() == Catch::Approx(6));
    }
    SECTION("chain with the identity is a no-op")
    {
        Rng rng(12);
        auto f = nlop_square<float>({4});
        auto h = chain(f, nlop_from_linop(linop_identity<float>({4})));
        auto x = oracle::random_array<float>({4}, rng);
        auto y1 = nlop_square<float>({4}).apply({x});
        auto y2 = h.apply({x});
        for (long k = 0; k < 4; k++)
            CHECK(y1[0].data()[k] == y2[0].data()[k]);
    }
    SECTION("adjoint of the chained derivative is the reversed composition")
    {
        Rng rng(14);
        for (int trial = 0; trial < 10; trial++) {
            auto f = nlop_square<double>({4});
            auto w = oracle::random_array<double>({4, 4}, rng);
            auto h = chain(f, nlop_from_linop(linop_matrix<double>(w)));
            auto x = oracle::random_array<double>({4}, rng);
            h.apply({x});
            auto jc = oracle::jacobian_via_deriv(h, 0, 0);
            auto jr = oracle::jacobian_via_adjoint(h, 0, 0);
            CHECK(oracle::max_abs_diff(jc, jr) < 1e-12);
        }
    }
}

TEST_CASE("combine, link and duplicate build the Fig.-2C operator")
{
    // J(x1, x2) = F(x1, G(x1, x2)) with F = add, G = mul
    auto build = [] {
        auto f = nlop_add<double>({1});
        auto g = nlop_mul<double>({1});
        auto h = combine(f, g);     // inputs: f1 f2 g1 g2, outputs: f g
        h = link(h, 1, 1);          // g output -> f's second input
        return duplicate(h, 0, 1);  // x1 feeds f and g
    };
    auto j = build();
    REQUIRE(j.n_in() == 2);
    REQUIRE(j.n_out() == 1);

    auto x1 = MdArray<double>::scalar(c<double>(2));
    auto x2 = MdArray<double>::scalar(c<double>(3));
    auto y = j.apply({x1, x2});
    CHECK(y[0].data()[0].real() == Catch::Approx(8));

    // dJ/dx1 = 1 + x2 = 4, dJ/dx2 = x1 = 2 (unit probes)
    auto one = MdArray<double>::scalar(c<double>(1));
    CHECK(j.derivative(0, 0, one).data()[0].real() == Catch::Approx(4));
    CHECK(j.derivative(0, 1, one).data()[0].real() == Catch::Approx(2));

    SECTION("duplicate implements the sum rule")
    {
        auto f = duplicate(nlop_add<double>({1}), 0, 1);
        f.apply({MdArray<double>::scalar(c<double>(1.5))});
        CHECK(f.derivative(0, 0, one).data()[0].real() == Catch::Approx(2));
    }
    SECTION("combine keeps parts independent")
    {
        Rng rng(20);
        auto f = nlop_square<double>({3});
        auto g = nlop_zconj<double>({3});
        auto h = combine(f, g);
        auto a = oracle::random_array<double>({3}, rng);
        auto b = oracle::random_array<double>({3}, rng);
        auto y2 = h.apply({a, b});
        auto ya = nlop_square<double>({3}).apply({a});
        auto yb = nlop_zconj<double>({3}).apply({b});
        for (long k = 0; k < 3; k++) {
            CHECK(y2[0].data()[k] == ya[0].data()[k]);
            CHECK(y2[1].data()[k] == yb[0].data()[k]);
        }
        // cross derivatives are structural zeros
        auto dz = h.derivative(1, 0, a);
        CHECK(md_znorm(dz) == 0.0);
    }
    SECTION("self-cycle is rejected")
    {
        auto f = nlop_mul<double>({1});
        CHECK_THROWS_AS(link(f, 0, 0), ShapeError);
    }
    SECTION("index out of range")
    {
        auto f = nlop_mul<double>({1});
        CHECK_THROWS_AS(link(f, 2, 0), ShapeError);
        CHECK_THROWS_AS(duplicate(f, 0, 5), ShapeError);
    }
}

TEST_CASE("derivatives require a prior forward pass and fresh state")
{
    auto f = nlop_square<double>({2});
    auto probe = MdArray<double>({2});
    CHECK_THROWS_AS(f.derivative(0, 0, probe), StaleDerivativeError);

    SECTION("interleaved forwards of a shared part invalidate handles")
    {
        auto node = std::make_shared<SquareNode<double>>(Dims{2});
        auto a = Nlop<double>(node);
        auto b = chain(Nlop<double>(node), nlop_zconj<double>({2}));
        Rng rng(33);
        auto x = oracle::random_array<double>({2}, rng);
        a.apply({x});
        b.apply({x}); // re-applies the shared node
        CHECK_THROWS_AS(a.derivative(0, 0, x), StaleDerivativeError);
        b.derivative(0, 0, x); // b's state is current
    }
}

TEST_CASE("holomorphic operators commute with multiplication by i")
{
    Rng rng(41);
    auto f = nlop_square<double>({4});
    auto x = oracle::random_array<double>({4}, rng);
    auto dx = oracle::random_array<double>({4}, rng);
    f.apply({x});
    auto idx = dx.clone();
    md_foreach(idx, [](auto& v) { v *= std::complex<double>(0, 1); });
    auto a = f.derivative(0, 0, idx);
    auto b = f.derivative(0, 0, dx);
    md_foreach(b, [](auto& v) { v *= std::complex<double>(0, 1); });
    for (long k = 0; k < 4; k++)
        CHECK(std::abs(a.data()[k] - b.data()[k]) < 1e-14);
}

TEST_CASE("finite differences confirm atomic derivatives")
{
    Rng rng(55);
    Dims dims{3};
    auto x = oracle::random_array<double>(dims, rng);
    auto y = oracle::random_array<double>(dims, rng);

    auto check1 = [&](Nlop<double> f) {
        CHECK(oracle::fd_check_all(f, {x}) < 1e-6);
    };
    check1(nlop_square<double>(dims));
    check1(nlop_zconj<double>(dims));
    check1(nlop_zreal<double>(dims));
    check1(Nlop<double>(std::make_shared<ZimagNode<double>>(dims)));
    check1(Nlop<double>(std::make_shared<CReluNode<double>>(dims)));
    check1(Nlop<double>(std::make_shared<CardioidNode<double>>(dims)));
    check1(Nlop<double>(std::make_shared<SigmoidNode<double>>(dims)));
    check1(Nlop<double>(std::make_shared<ExpRealNode<double>>(dims)));

    auto mul = nlop_mul<double>(dims);
    CHECK(oracle::fd_check_all(mul, {x, y}) < 1e-6);
    auto add = nlop_add<double>(dims);
    CHECK(oracle::fd_check_all(add, {x, y}) < 1e-6);
}

TEST_CASE("random graphs: forward and adjoint Jacobians agree")
{
    Rng rng(77);
    for (int trial = 0; trial < 30; trial++) {
        Dims dims{1 + long(rng.below(4))};
        auto g = oracle::random_graph<double>(rng, dims, 1 + int(rng.below(4)));
        std::vector<MdArray<double>> in;
        for (int i = 0; i < g.n_in(); i++)
            in.push_back(oracle::random_array<double>(dims, rng));
        g.apply(in);
        for (int o = 0; o < g.n_out(); o++)
            for (int i = 0; i < g.n_in(); i++) {
                auto jc = oracle::jacobian_via_deriv(g, o, i);
                auto jr = oracle::jacobian_via_adjoint(g, o, i);
                CHECK(oracle::max_abs_diff(jc, jr) < 1e-10);
            }
    }
}

TEST_CASE("checkpointing reproduces results bitwise and recomputes")
{
    Rng rng(91);
    Dims dims{4};

    auto build = [&] {
        auto f = nlop_square<float>(dims);
        auto g = chain(f, Nlop<float>(std::make_shared<CReluNode<float>>(dims)));
        return chain(g, nlop_from_linop(linop_dft<float>(dims, 1UL)));
    };
    auto plain = build();
    std::shared_ptr<CheckpointNode<float>> handle;
    auto wrapped = checkpoint(build(), &handle);

    auto x = oracle::random_array<float>(dims, rng);
    auto y1 = plain.apply({x});
    auto y2 = wrapped.apply({x});
    CHECK(std::memcmp(y1[0].data(), y2[0].data(), sizeof(std::complex<float>) * 4) == 0);
    CHECK(handle->reexecutions() == 0);

    auto dy = oracle::random_array<float>(dims, rng);
    auto g1 = plain.adjoint_derivative(0, 0, dy);
    auto g2 = wrapped.adjoint_derivative(0, 0, dy);
    CHECK(std::memcmp(g1.data(), g2.data(), sizeof(std::complex<float>) * 4) == 0);
    CHECK(handle->reexecutions() == 1);

    auto d1 = plain.derivative(0, 0, dy);
    auto d2 = wrapped.derivative(0, 0, dy);
    CHECK(std::memcmp(d1.data(), d2.data(), sizeof(std::complex<float>) * 4) == 0);
    CHECK(handle->reexecutions() == 2);

    SECTION("derivative before forward fails")
    {
        std::shared_ptr<CheckpointNode<float>> h2;
        auto w2 = checkpoint(build(), &h2);
        CHECK_THROWS_AS(w2.derivative(0, 0, x), StaleDerivativeError);
    }
}

TEST_CASE("checkpointed dropout replays the same mask")
{
    Dims dims{16};
    auto make = [&](uint64_t seed) {
        return Nlop<float>(std::make_shared<DropoutNode<float>>(dims, 0.4, seed, 1, true));
    };
    auto plain = make(5);
    auto wrapped = checkpoint(make(5));
    Rng rng(6);
    auto x = oracle::random_array<float>(dims, rng);

    auto y1 = plain.apply({x});
    auto y2 = wrapped.apply({x});
    CHECK(std::memcmp(y1[0].data(), y2[0].data(), sizeof(std::complex<float>) * 16) == 0);

    auto dy = oracle::random_array<float>(dims, rng);
    auto g1 = plain.adjoint_derivative(0, 0, dy);
    auto g2 = wrapped.adjoint_derivative(0, 0, dy);
    CHECK(std::memcmp(g1.data(), g2.data(), sizeof(std::complex<float>) * 16) == 0);
}
