#include <catch2/catch_amalgamated.hpp>

#include <mdnn/optim.hpp>
#include <mdnn/recon.hpp>

#include "oracles.hpp"

using namespace mdnn;

namespace {

/// Rank-16 dense toy model: y = W x with features on dim 1 of x, outputs on
/// dim 0 of y and the batch on dim 15.
Model<double> toy_dense(long in_f, long out_f, long batch)
{
    Dims iter(max_rank, 1), xd(max_rank, 1), yd(max_rank, 1), wd(max_rank, 1);
    iter[0] = out_f;
    iter[1] = in_f;
    iter[max_rank - 1] = batch;
    xd[1] = in_f;
    xd[max_rank - 1] = batch;
    yd[0] = out_f;
    yd[max_rank - 1] = batch;
    wd[0] = out_f;
    wd[1] = in_f;

    Model<double> m;
    m.op = Nlop<double>(std::make_shared<TenMulNode<double>>(
        "dense16", iter, yd, mdnn::detail::stride_for(yd, iter), wd, mdnn::detail::stride_for(wd, iter),
        xd, mdnn::detail::stride_for(xd, iter)));
    m.args = {{"w", ArgKind::Weights, Initializer::glorot(in_f, out_f), nullptr, false},
              {"x", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    m.rebatch = [in_f, out_f](long b) { return toy_dense(in_f, out_f, b); };
    return m;
}

} // namespace

TEST_CASE("sgd step")
{
    auto th = MdArray<double>::scalar({1, 0});
    auto g = MdArray<double>::scalar({0.5, 0});
    sgd_step(th, g, 0.1);
    CHECK(th.data()[0].real() == Catch::Approx(0.95));

    auto th2 = MdArray<double>::scalar({0.3, -0.4});
    sgd_step(th2, MdArray<double>::scalar({0, 0}), 0.1);
    CHECK(th2.data()[0] == std::complex<double>(0.3, -0.4));

    auto th3 = MdArray<double>::scalar({1, 1});
    sgd_step(th3, MdArray<double>::scalar({0, 1}), 1.0);
    CHECK(th3.data()[0] == std::complex<double>(1, 0));

    auto bad = MdArray<double>::scalar({std::nan(""), 0});
    CHECK_THROWS_AS(sgd_step(th3, bad, 0.1), SolverError);
}

TEST_CASE("adam step")
{
    AdamParams p;
    SECTION("zero gradient leaves weights unchanged")
    {
        auto th = MdArray<double>::scalar({2, -1});
        AdamState<double> st;
        adam_step(th, MdArray<double>::scalar({0, 0}), st, p, 0.1);
        CHECK(th.data()[0] == std::complex<double>(2, -1));
    }
    SECTION("first step moves by about the learning rate")
    {
        auto th = MdArray<double>::scalar({1, 0});
        AdamState<double> st;
        adam_step(th, MdArray<double>::scalar({4, 0}), st, p, 0.01);
        // bias correction makes mhat/sqrt(vhat) = sign(g) on step 1
        CHECK(std::abs(th.data()[0].real() - (1 - 0.01)) < 1e-6);
    }
    SECTION("trajectory matches the scripted reference formulas")
    {
        Rng rng(7);
        const long n = 5;
        auto th = oracle::random_array<double>({n}, rng);
        auto ref = th.clone();
        AdamState<double> st;

        std::vector<std::complex<double>> m(n, 0);
        std::vector<double> v(n, 0);
        const double lr = 0.05;

        for (int t = 1; t <= 100; t++) {
            // gradient of 0.5 sum |th - c|^2 with c = 0 is th itself
            auto g = th.clone();
            auto gref = ref.clone();
            adam_step(th, g, st, p, lr);
            for (long k = 0; k < n; k++) {
                auto gv = gref.data()[k];
                m[k] = p.beta1 * m[k] + (1 - p.beta1) * gv;
                v[k] = p.beta2 * v[k] + (1 - p.beta2) * std::norm(gv);
                auto mh = m[k] / (1 - std::pow(p.beta1, t));
                auto vh = v[k] / (1 - std::pow(p.beta2, t));
                ref.data()[k] -= lr * mh / (std::sqrt(vh) + p.eps);
            }
            for (long k = 0; k < n; k++)
                CHECK(std::abs(th.data()[k] - ref.data()[k]) < 1e-12);
        }
    }
}

TEST_CASE("ipalm step")
{
    SECTION("zero inertia and identity prox reduce to block gradient descent")
    {
        IpalmParams p;
        p.alpha = p.beta = 0;
        std::vector<MdArray<double>> th{MdArray<double>::scalar({1, 0}), MdArray<double>::scalar({2, 0})};
        std::vector<IpalmState<double>> st;
        auto grad = [](int j, const std::vector<MdArray<double>>& cur) {
            return cur[j].clone(); // f = 0.5 sum |th_j|^2 per block
        };
        ipalm_step<double>(th, grad, st, p, 0.25);
        CHECK(th[0].data()[0].real() == Catch::Approx(0.75));
        CHECK(th[1].data()[0].real() == Catch::Approx(1.5));
    }
    SECTION("soft-threshold prox shrinks toward zero under zero gradient")
    {
        IpalmParams p;
        p.alpha = p.beta = 0;
        std::vector<MdArray<double>> th{MdArray<double>::scalar({1, 0})};
        std::vector<IpalmState<double>> st;
        std::vector<std::shared_ptr<const Prox<double>>> prox{std::make_shared<SoftThreshold<double>>(1.0)};
        auto grad = [](int, const std::vector<MdArray<double>>&) {
            return MdArray<double>::scalar({0, 0});
        };
        ipalm_step<double>(th, grad, st, p, 0.3); // threshold tau*lambda = 0.3
        CHECK(th[0].data()[0].real() == Catch::Approx(0.7));
    }
    SECTION("quadratic toy converges to the closed-form minimizer")
    {
        Rng rng(11);
        const long n = 4;
        auto a = oracle::random_array<double>({n, n}, rng);
        // make it well conditioned: A = a^H a + I
        MdArray<double> h({n, n});
        for (long i = 0; i < n; i++)
            for (long j = 0; j < n; j++) {
                std::complex<double> acc = i == j ? 1.0 : 0.0;
                for (long k = 0; k < n; k++)
                    acc += std::conj(a.at({k, i})) * a.at({k, j});
                h.at({i, j}) = acc;
            }
        auto b = oracle::random_array<double>({n}, rng);
        // minimize 0.5 th^H H th - Re(b^H th); minimizer solves H th = b
        auto hop = linop_matrix<double>(h);
        auto sol = cg_solve<double>([&](const MdArray<double>& v) { return hop.forward(v); }, b, 100, 1e-14);

        IpalmParams p;
        p.alpha = p.beta = 0.4;
        std::vector<MdArray<double>> th{MdArray<double>({n})};
        std::vector<IpalmState<double>> st;
        auto grad = [&](int, const std::vector<MdArray<double>>& cur) {
            auto g = hop.forward(cur[0]);
            md_axpy(g, std::complex<double>(-1), b);
            return g;
        };
        double lr = 0.1;
        long it = 0;
        for (; it < 500; it++) {
            ipalm_step<double>(th, grad, st, p, lr);
            auto diff = th[0].clone();
            md_axpy(diff, std::complex<double>(-1), sol);
            if (md_znorm(diff) < 1e-6 * std::max(1.0, md_znorm(sol)))
                break;
        }
        CHECK(it < 500);
    }
    SECTION("trajectory matches a scripted implementation")
    {
        IpalmParams p; // defaults alpha = beta = 0.5
        std::vector<MdArray<double>> th{MdArray<double>::scalar({1.0, 0.5})};
        std::vector<IpalmState<double>> st;
        auto grad = [](int, const std::vector<MdArray<double>>& cur) {
            return cur[0].clone();
        };
        std::complex<double> t = {1.0, 0.5}, prev = t;
        const double lr = 0.12;
        for (int k = 0; k < 100; k++) {
            ipalm_step<double>(th, grad, st, p, lr);
            auto y = t + p.alpha * (t - prev);
            auto z = t + p.beta * (t - prev);
            auto next = y - lr * z;
            prev = t;
            t = next;
            CHECK(std::abs(th[0].data()[0] - t) < 1e-12);
        }
    }
}

TEST_CASE("mini-batch training on a linear-regression toy")
{
    const long in_f = 2, out_f = 1, n_items = 16;
    Rng rng(21);

    // ground truth W and noise-free targets
    auto w_true = oracle::random_array<double>({out_f, in_f}, rng);
    Dims xd(max_rank, 1), yd(max_rank, 1);
    xd[1] = in_f;
    xd[max_rank - 1] = n_items;
    yd[0] = out_f;
    yd[max_rank - 1] = n_items;
    auto xs = oracle::random_array<double>(xd, rng);
    MdArray<double> ys(yd);
    for (long s = 0; s < n_items; s++)
        for (long o = 0; o < out_f; o++) {
            std::complex<double> acc = 0;
            for (long i = 0; i < in_f; i++)
                acc += w_true.at({o, i}) * xs.data()[i + in_f * s];
            ys.data()[o + out_f * s] = acc;
        }

    Dataset<double> data;
    data.add("x", xs);
    data.add("reference", ys);

    auto model = toy_dense(in_f, out_f, 4);

    SECTION("loss decreases and weights reach the least-squares solution")
    {
        TrainConfig cfg;
        cfg.algo = OptAlgo::Adam;
        cfg.lr = 0.05;
        cfg.batch_size = 4;
        cfg.epochs = 300;
        cfg.seed = 5;
        cfg.verbose = false;
        std::map<std::string, MdArray<double>> weights;
        auto res = train(model, LossKind::Mse, data, cfg, weights);
        CHECK(res.epoch_loss.front() > res.epoch_loss.back());
        CHECK(res.epoch_loss.back() < 1e-8);
        for (long k = 0; k < w_true.size(); k++)
            CHECK(std::abs(weights.at("w").data()[k] - w_true.data()[k]) < 1e-4);
    }
    SECTION("zero epochs leave the seeded initialization untouched")
    {
        TrainConfig cfg;
        cfg.epochs = 0;
        cfg.seed = 9;
        cfg.verbose = false;
        std::map<std::string, MdArray<double>> weights;
        train(model, LossKind::Mse, data, cfg, weights);
        auto init = model.init_weights(9);
        CHECK(std::memcmp(weights.at("w").data(), init.at("w").data(),
                          sizeof(std::complex<double>) * init.at("w").size()) == 0);
    }
    SECTION("same seed gives bitwise identical histories and weights")
    {
        TrainConfig cfg;
        cfg.algo = OptAlgo::Sgd;
        cfg.lr = 0.05;
        cfg.batch_size = 4;
        cfg.epochs = 5;
        cfg.seed = 33;
        cfg.verbose = false;
        std::map<std::string, MdArray<double>> w1, w2;
        auto r1 = train(model, LossKind::Mse, data, cfg, w1);
        auto r2 = train(model, LossKind::Mse, data, cfg, w2);
        REQUIRE(r1.epoch_loss.size() == r2.epoch_loss.size());
        for (size_t k = 0; k < r1.epoch_loss.size(); k++)
            CHECK(std::memcmp(&r1.epoch_loss[k], &r2.epoch_loss[k], sizeof(double)) == 0);
        CHECK(std::memcmp(w1.at("w").data(), w2.at("w").data(),
                          sizeof(std::complex<double>) * w1.at("w").size()) == 0);
    }
    SECTION("data arrays are never modified")
    {
        auto snapshot = xs.clone();
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.verbose = false;
        std::map<std::string, MdArray<double>> weights;
        train(model, LossKind::Mse, data, cfg, weights);
        CHECK(std::memcmp(snapshot.data(), xs.data(), sizeof(std::complex<double>) * xs.size()) == 0);
    }
    SECTION("dataset smaller than one batch errors unless drop-last is off")
    {
        TrainConfig cfg;
        cfg.batch_size = 64;
        cfg.epochs = 1;
        cfg.verbose = false;
        std::map<std::string, MdArray<double>> weights;
        CHECK_THROWS_AS(train(model, LossKind::Mse, data, cfg, weights), ConfigError);
        cfg.drop_last = false;
        std::map<std::string, MdArray<double>> w2;
        auto res = train(model, LossKind::Mse, data, cfg, w2); // one partial batch
        CHECK(res.steps == 1);
    }
    SECTION("ipalm training also reduces the loss")
    {
        TrainConfig cfg;
        cfg.algo = OptAlgo::Ipalm;
        cfg.lr = 0.05;
        cfg.batch_size = 8;
        cfg.epochs = 120;
        cfg.seed = 3;
        cfg.verbose = false;
        std::map<std::string, MdArray<double>> weights;
        auto res = train(model, LossKind::Mse, data, cfg, weights);
        CHECK(res.epoch_loss.back() < res.epoch_loss.front() * 1e-3);
    }
}
