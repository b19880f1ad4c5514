#include <catch2/catch_amalgamated.hpp>

#include <mdnn/nn.hpp>

#include "oracles.hpp"

using namespace mdnn;

namespace {

template<class R>
std::vector<MdArray<R>> named_inputs(const Model<R>& m, std::map<std::string, MdArray<R>> values)
{
    std::vector<MdArray<R>> in;
    for (const auto& a : m.args)
        in.push_back(values.at(a.name));
    return in;
}

} // namespace

TEST_CASE("dense layer computes W x + b")
{
    SECTION("identity weights pass the input through")
    {
        auto layer = dense_layer<double>("fc", 3, 3, 2);
        MdArray<double> w({3, 3});
        for (long k = 0; k < 3; k++)
            w.at({k, k}) = {1, 0};
        MdArray<double> b({3, 1});
        Rng rng(2);
        auto x = oracle::random_array<double>({3, 2}, rng);
        auto y = layer.op.apply(named_inputs<double>(layer, {{"fc_w", w}, {"fc_b", b}, {"x", x}}));
        for (long k = 0; k < x.size(); k++)
            CHECK(std::abs(y[0].data()[k] - x.data()[k]) < 1e-14);
    }
    SECTION("random case matches explicit arithmetic")
    {
        Rng rng(3);
        auto layer = dense_layer<double>("fc", 2, 3, 1);
        auto w = oracle::random_array<double>({3, 2}, rng);
        auto b = oracle::random_array<double>({3, 1}, rng);
        auto x = oracle::random_array<double>({2, 1}, rng);
        auto y = layer.op.apply(named_inputs<double>(layer, {{"fc_w", w}, {"fc_b", b}, {"x", x}}));
        for (long i = 0; i < 3; i++) {
            auto want = b.at({i, 0});
            for (long j = 0; j < 2; j++)
                want += w.at({i, j}) * x.at({j, 0});
            CHECK(std::abs(y[0].at({i, 0}) - want) < 1e-13);
        }
    }
    SECTION("gradients under mse match finite differences")
    {
        Rng rng(5);
        auto layer = dense_layer<double>("fc", 3, 2, 2);
        auto joint = model_chain(layer, loss_model<double>(LossKind::Mse, {2, 2}), "prediction");
        auto w = oracle::random_array<double>({2, 3}, rng);
        auto b = oracle::random_array<double>({2, 1}, rng);
        auto x = oracle::random_array<double>({3, 2}, rng);
        auto ref = oracle::random_array<double>({2, 2}, rng);
        auto in = named_inputs<double>(joint, {{"fc_w", w}, {"fc_b", b}, {"x", x}, {"reference", ref}});
        CHECK(oracle::scalar_fd_grad_err(joint.op, in, joint.arg_index("fc_w")) < 1e-6);
        CHECK(oracle::scalar_fd_grad_err(joint.op, in, joint.arg_index("fc_b")) < 1e-6);
        CHECK(oracle::scalar_fd_grad_err(joint.op, in, joint.arg_index("x")) < 1e-6);
    }
}

TEST_CASE("convolution layers")
{
    SECTION("delta kernel is the identity map")
    {
        ConvSpec spec;
        spec.in_dims = {6, 5, 1};
        spec.axes = {0, 1};
        spec.kernel = {3, 3};
        spec.chan_dim = 2;
        spec.out_channels = 1;
        spec.pad_same = true;
        auto layer = conv_layer<double>("c", spec);
        MdArray<double> w({3, 3, 1, 1});
        w.at({1, 1, 0, 0}) = {1, 0}; // centered delta
        Rng rng(7);
        auto x = oracle::random_array<double>({6, 5, 1}, rng);
        auto y = layer.op.apply(named_inputs<double>(layer, {{"c_w", w}, {"x", x}}));
        for (long k = 0; k < x.size(); k++)
            CHECK(std::abs(y[0].data()[k] - x.data()[k]) < 1e-14);
    }
    SECTION("1-d kernel against the sliding-window oracle")
    {
        ConvSpec spec;
        spec.in_dims = {4};
        spec.axes = {0};
        spec.kernel = {3};
        spec.chan_dim = -1;
        // use a trailing channel dim of size 1
        spec.in_dims = {4, 1};
        spec.axes = {0};
        spec.kernel = {3};
        spec.chan_dim = 1;
        spec.out_channels = 1;
        auto layer = conv_layer<double>("c", spec);
        MdArray<double> w({3, 1, 1});
        w.at({0, 0, 0}) = {1, 0};
        w.at({1, 0, 0}) = {0, 0};
        w.at({2, 0, 0}) = {-1, 0};
        MdArray<double> x({4, 1});
        for (long k = 0; k < 4; k++)
            x.at({k, 0}) = {double(k + 1), 0};
        auto y = layer.op.apply(named_inputs<double>(layer, {{"c_w", w}, {"x", x}}));
        REQUIRE(y[0].dims() == Dims{2, 1});
        CHECK(y[0].at({0, 0}).real() == Catch::Approx(-2));
        CHECK(y[0].at({1, 0}).real() == Catch::Approx(-2));
    }
    SECTION("transposed convolution is the adjoint for all paddings")
    {
        Rng rng(11);
        for (bool same : {false, true}) {
            ConvSpec spec;
            spec.in_dims = {6, 7, 2};
            spec.axes = {0, 1};
            spec.kernel = {3, 3};
            spec.chan_dim = 2;
            spec.out_channels = 3;
            spec.pad_same = same;

            auto fwd = conv_layer<double>("c", spec);
            ConvSpec tspec = spec;
            tspec.transposed = true;
            auto bwd = conv_layer<double>("c", tspec);

            auto w = oracle::random_array<double>({3, 3, 2, 3}, rng);
            auto x = oracle::random_array<double>(spec.in_dims, rng);
            auto y = oracle::random_array<double>(spec.out_dims(), rng);

            auto cx = fwd.op.apply(named_inputs<double>(fwd, {{"c_w", w}, {"x", x}}))[0];
            auto cty = bwd.op.apply(named_inputs<double>(bwd, {{"c_w", w}, {"x", y}}))[0];
            auto lhs = md_zdot(cx, y);
            auto rhs = md_zdot(x, cty);
            CHECK(std::abs(std::complex<double>(lhs - rhs))
                  <= 1e-10 * md_znorm(cx) * md_znorm(y));
        }
    }
    SECTION("kernel larger than the input is rejected")
    {
        ConvSpec spec;
        spec.in_dims = {2, 1};
        spec.axes = {0};
        spec.kernel = {5};
        spec.chan_dim = 1;
        CHECK_THROWS_AS(conv_layer<double>("c", spec), ShapeError);
    }
    SECTION("weight and input gradients match finite differences")
    {
        Rng rng(13);
        ConvSpec spec;
        spec.in_dims = {5, 4, 2};
        spec.axes = {0, 1};
        spec.kernel = {3, 3};
        spec.chan_dim = 2;
        spec.out_channels = 2;
        spec.pad_same = true;
        auto layer = conv_layer<double>("c", spec, true);
        auto joint = model_chain(layer, loss_model<double>(LossKind::Mse, spec.out_dims()), "prediction");
        auto w = oracle::random_array<double>({3, 3, 2, 2}, rng);
        auto b = oracle::random_array<double>({1, 1, 2}, rng);
        auto x = oracle::random_array<double>(spec.in_dims, rng);
        auto ref = oracle::random_array<double>(spec.out_dims(), rng);
        auto in = named_inputs<double>(joint, {{"c_w", w}, {"c_b", b}, {"x", x}, {"reference", ref}});
        CHECK(oracle::scalar_fd_grad_err(joint.op, in, joint.arg_index("c_w")) < 1e-6);
        CHECK(oracle::scalar_fd_grad_err(joint.op, in, joint.arg_index("c_b")) < 1e-6);
        CHECK(oracle::scalar_fd_grad_err(joint.op, in, joint.arg_index("x")) < 1e-6);
    }
}

TEST_CASE("activations")
{
    SECTION("crelu clips real and imaginary parts independently")
    {
        auto f = nlop_activation<double>("crelu", {1});
        auto y = f.apply({MdArray<double>::scalar({1, -2})});
        CHECK(y[0].data()[0] == std::complex<double>(1, 0));
    }
    SECTION("cardioid keeps positive reals and kills negative reals")
    {
        auto f = nlop_activation<double>("cardioid", {2});
        MdArray<double> x({2});
        x.data()[0] = {0.7, 0};
        x.data()[1] = {-0.7, 0};
        auto y = f.apply({x});
        CHECK(y[0].data()[0].real() == Catch::Approx(0.7));
        CHECK(std::abs(y[0].data()[1]) < 1e-12);
    }
    SECTION("softmax normalizes along the class axis")
    {
        auto f = nlop_activation<double>("softmax", {2}, 0);
        MdArray<double> x({2});
        auto y = f.apply({x});
        CHECK(y[0].data()[0].real() == Catch::Approx(0.5));
        CHECK(y[0].data()[1].real() == Catch::Approx(0.5));

        Rng rng(17);
        auto f2 = nlop_activation<double>("softmax", {4, 3}, 0);
        auto z = oracle::random_array<double>({4, 3}, rng, 2.0);
        auto s = f2.apply({z});
        for (long j = 0; j < 3; j++) {
            double sum = 0;
            for (long i = 0; i < 4; i++)
                sum += s[0].at({i, j}).real();
            CHECK(sum == Catch::Approx(1.0).margin(1e-6));
        }
        CHECK(oracle::fd_check_all(f2, {z}) < 1e-6);
    }
    SECTION("sigmoid acts on the real part")
    {
        auto f = nlop_activation<double>("sigmoid", {1});
        auto y = f.apply({MdArray<double>::scalar({0, 5})});
        CHECK(y[0].data()[0].real() == Catch::Approx(0.5));
        CHECK(y[0].data()[0].imag() == 0.0);
    }
}

TEST_CASE("batch normalization")
{
    const Dims dims{4, 3}; // 4 samples (dim 0) x 3 features
    const unsigned long flags = 0b01UL;

    SECTION("constant batch maps to zero")
    {
        auto layer = batchnorm_layer<double>("bn", dims, flags, true);
        MdArray<double> x = MdArray<double>::filled(dims, {2.5, -1});
        MdArray<double> mean({1, 3}), var = MdArray<double>::filled({1, 3}, {1, 0});
        auto outs = layer.op.apply(named_inputs<double>(layer, {{"x", x}, {"bn_mean", mean}, {"bn_var", var}}));
        CHECK(md_zmax_abs(outs[0]) < 1e-6);
    }
    SECTION("train mode標 normalizes to zero mean and unit variance")
    {
        Rng rng(19);
        auto layer = batchnorm_layer<double>("bn", dims, flags, true, 1e-12);
        auto x = oracle::random_array<double>(dims, rng);
        MdArray<double> mean({1, 3}), var = MdArray<double>::filled({1, 3}, {1, 0});
        auto outs = layer.op.apply(named_inputs<double>(layer, {{"x", x}, {"bn_mean", mean}, {"bn_var", var}}));
        for (long f = 0; f < 3; f++) {
            std::complex<double> mu = 0;
            double v = 0;
            for (long s = 0; s < 4; s++)
                mu += outs[0].at({s, f});
            mu /= 4.0;
            for (long s = 0; s < 4; s++)
                v += std::norm(outs[0].at({s, f}) - mu);
            v /= 4.0;
            CHECK(std::abs(mu) < 1e-5);
            CHECK(v == Catch::Approx(1.0).margin(1e-5));
        }
    }
    SECTION("infer mode applies the stored statistics")
    {
        Rng rng(23);
        auto layer = batchnorm_layer<double>("bn", dims, flags, false, 1e-5);
        auto x = oracle::random_array<double>(dims, rng);
        auto mean = oracle::random_array<double>({1, 3}, rng);
        MdArray<double> var({1, 3});
        md_foreach(var, [&](auto& v) { v = {rng.uniform(0.5, 2.0), 0}; });
        auto outs = layer.op.apply(named_inputs<double>(layer, {{"x", x}, {"bn_mean", mean}, {"bn_var", var}}));
        for (long s = 0; s < 4; s++)
            for (long f = 0; f < 3; f++) {
                auto want = (x.at({s, f}) - mean.at({0, f})) / std::sqrt(var.at({0, f}).real() + 1e-5);
                CHECK(std::abs(outs[0].at({s, f}) - want) < 1e-12);
            }
    }
    SECTION("derivatives pass finite differences in both modes")
    {
        Rng rng(29);
        auto x = oracle::random_array<double>(dims, rng);
        auto mean = oracle::random_array<double>({1, 3}, rng, 0.2);
        MdArray<double> var({1, 3});
        md_foreach(var, [&](auto& v) { v = {rng.uniform(0.5, 2.0), 0}; });

        for (bool train : {true, false}) {
            auto layer = batchnorm_layer<double>("bn", dims, flags, train);
            std::vector<MdArray<double>> in = {x, mean, var};
            layer.op.apply(in);
            // x-derivative of the normalized output
            for (int o = 0; o < (train ? 3 : 1); o++) {
                auto jc = oracle::jacobian_via_deriv(layer.op, o, 0);
                auto jr = oracle::jacobian_via_adjoint(layer.op, o, 0);
                CHECK(oracle::max_abs_diff(jc, jr) < 1e-10);
            }
            CHECK(oracle::fd_check_all(layer.op, in) < 1e-5);
        }
    }
}

TEST_CASE("max pooling and dropout")
{
    SECTION("window of 2 picks the larger magnitude")
    {
        auto layer = maxpool_layer<double>({4}, {2});
        MdArray<double> x({4});
        x.data()[0] = {1, 0};
        x.data()[1] = {5, 0};
        x.data()[2] = {2, 0};
        x.data()[3] = {3, 0};
        auto y = layer.op.apply({x});
        CHECK(y[0].data()[0].real() == Catch::Approx(5));
        CHECK(y[0].data()[1].real() == Catch::Approx(3));

        auto jc = oracle::jacobian_via_deriv(layer.op, 0, 0);
        auto jr = oracle::jacobian_via_adjoint(layer.op, 0, 0);
        CHECK(oracle::max_abs_diff(jc, jr) < 1e-14);
    }
    SECTION("rate zero is the identity")
    {
        Rng rng(31);
        auto layer = dropout_layer<double>({8}, 0.0, 1, 7, true);
        auto x = oracle::random_array<double>({8}, rng);
        auto y = layer.op.apply({x});
        for (long k = 0; k < 8; k++)
            CHECK(y[0].data()[k] == x.data()[k]);
        CHECK_THROWS_AS(dropout_layer<double>({8}, 1.0, 1, 7, true), ConfigError);
    }
    SECTION("expected value over seeded draws matches the input")
    {
        const long n = 16;
        MdArray<double> x = MdArray<double>::filled({n}, {1, 0});
        auto node = std::make_shared<DropoutNode<double>>(Dims{n}, 0.3, 99, 3, true);
        auto f = Nlop<double>(node);
        std::vector<double> mean(n, 0);
        const int draws = 10000;
        for (int d = 0; d < draws; d++) {
            auto y = f.apply({x});
            for (long k = 0; k < n; k++)
                mean[k] += y[0].data()[k].real() / draws;
        }
        for (long k = 0; k < n; k++)
            CHECK(mean[k] == Catch::Approx(1.0).margin(0.02 * 3));
        double grand = 0;
        for (long k = 0; k < n; k++)
            grand += mean[k] / n;
        CHECK(grand == Catch::Approx(1.0).margin(0.02));
    }
    SECTION("infer mode is the identity")
    {
        Rng rng(37);
        auto layer = dropout_layer<double>({8}, 0.5, 1, 7, false);
        auto x = oracle::random_array<double>({8}, rng);
        auto y = layer.op.apply({x});
        for (long k = 0; k < 8; k++)
            CHECK(y[0].data()[k] == x.data()[k]);
    }
}

TEST_CASE("losses")
{
    Rng rng(41);
    SECTION("mse of identical arrays is zero; gradient checks")
    {
        auto x = oracle::random_array<double>({5}, rng);
        auto f = nlop_loss<double>(LossKind::Mse, {5});
        auto y = f.apply({x, x});
        CHECK(y[0].data()[0].real() == 0.0);

        auto a = oracle::random_array<double>({5}, rng);
        auto b = oracle::random_array<double>({5}, rng);
        std::vector<MdArray<double>> in{a, b};
        f.apply(in);
        CHECK(oracle::scalar_fd_grad_err(f, in, 0) < 1e-6);
        CHECK(oracle::scalar_fd_grad_err(f, in, 1) < 1e-6);
    }
    SECTION("mad of scalars is the absolute difference")
    {
        auto f = nlop_loss<double>(LossKind::Mad, {1});
        auto y = f.apply({MdArray<double>::scalar({3, 0}), MdArray<double>::scalar({1, 0})});
        CHECK(y[0].data()[0].real() == Catch::Approx(2));

        auto a = oracle::random_array<double>({4}, rng);
        auto b = oracle::random_array<double>({4}, rng);
        auto g = nlop_loss<double>(LossKind::Mad, {4});
        std::vector<MdArray<double>> in{a, b};
        g.apply(in);
        CHECK(oracle::scalar_fd_grad_err(g, in, 0) < 1e-6);
    }
    SECTION("cce of a matching one-hot pair is zero")
    {
        MdArray<double> p({3, 1}), r({3, 1});
        p.at({1, 0}) = {1, 0};
        r.at({1, 0}) = {1, 0};
        auto f = nlop_loss<double>(LossKind::Cce, {3, 1}, 0);
        auto y = f.apply({p, r});
        CHECK(y[0].data()[0].real() == Catch::Approx(0).margin(1e-12));

        // gradient check at a smooth interior point
        MdArray<double> pp({3, 2}), rr({3, 2});
        md_foreach(pp, [&](auto& v) { v = {rng.uniform(0.1, 0.9), 0}; });
        md_foreach(rr, [&](auto& v) { v = {rng.uniform(0.0, 1.0), 0}; });
        auto g = nlop_loss<double>(LossKind::Cce, {3, 2}, 0);
        std::vector<MdArray<double>> in{pp, rr};
        g.apply(in);
        CHECK(oracle::scalar_fd_grad_err(g, in, 0) < 1e-6);
    }
}

TEST_CASE("rbf activation")
{
    Rng rng(47);
    std::vector<double> centers{-1.0, -0.5, 0.0, 0.5, 1.0};
    const double sigma = 0.5;
    Dims zdims{6, 2}; // 6 positions x 2 filters
    auto node = std::make_shared<RbfNode<double>>(zdims, 1, centers, sigma);
    auto f = Nlop<double>(node);

    SECTION("zero weights give zero output")
    {
        auto z = oracle::random_array<double>(zdims, rng);
        MdArray<double> w({2, 5});
        auto y = f.apply({z, w});
        CHECK(md_zmax_abs(y[0]) == 0.0);
    }
    SECTION("single basis evaluated at its center returns the weight")
    {
        auto g = Nlop<double>(std::make_shared<RbfNode<double>>(Dims{1, 1}, 1, std::vector<double>{0.25}, 1.0));
        auto z = MdArray<double>::filled({1, 1}, {0.25, 0});
        auto w = MdArray<double>::filled({1, 1}, {0.8, 0});
        auto y = g.apply({z, w});
        CHECK(y[0].data()[0].real() == Catch::Approx(0.8));
    }
    SECTION("matches direct summation and finite differences")
    {
        auto z = oracle::random_array<double>(zdims, rng);
        auto w = oracle::random_array<double>({2, 5}, rng);
        md_foreach(z, [](auto& v) { v = {v.real(), 0}; });
        md_foreach(w, [](auto& v) { v = {v.real(), 0}; });
        auto y = f.apply({z, w});
        for (long k = 0; k < 6; k++)
            for (long fm = 0; fm < 2; fm++) {
                double acc = 0;
                for (int j = 0; j < 5; j++) {
                    double d = (z.at({k, fm}).real() - centers[j]) / sigma;
                    acc += w.at({fm, j}).real() * std::exp(-d * d / 2);
                }
                CHECK(y[0].at({k, fm}).real() == Catch::Approx(acc).margin(1e-12));
            }
        std::vector<MdArray<double>> in{z, w};
        CHECK(oracle::fd_check_all(f, in) < 1e-6);
        CHECK_THROWS_AS(RbfNode<double>(zdims, 1, std::vector<double>{0.5, 0.0}, 1.0), ConfigError);
        CHECK_THROWS_AS(RbfNode<double>(zdims, 1, centers, -1.0), ConfigError);
    }
}

TEST_CASE("model bookkeeping")
{
    auto layer = dense_layer<float>("fc", 4, 3, 1);
    CHECK(layer.num_real_params() == 2 * (3 * 4 + 3));
    CHECK(layer.arg_index("fc_w") == 0);
    CHECK_THROWS_AS(layer.arg_index("nope"), ConfigError);

    auto w = layer.init_weights(123);
    CHECK(w.count("fc_w") == 1);
    CHECK(w.count("fc_b") == 1);
    CHECK(md_zmax_abs(w.at("fc_b")) == 0.0);
    CHECK(md_zmax_abs(w.at("fc_w")) > 0.0);

    // same seed reproduces the same initialization bitwise
    auto w2 = layer.init_weights(123);
    CHECK(std::memcmp(w.at("fc_w").data(), w2.at("fc_w").data(),
                      sizeof(std::complex<float>) * w.at("fc_w").size()) == 0);

    // set by name, get by name
    Rng rng(53);
    auto arr = oracle::random_array<float>({3, 4}, rng);
    w["fc_w"] = arr;
    CHECK(std::memcmp(w.at("fc_w").data(), arr.data(), sizeof(std::complex<float>) * arr.size()) == 0);
}
