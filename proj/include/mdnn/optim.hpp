#pragma once

#include <cstdio>
#include <functional>

#include "nn.hpp"

namespace mdnn {

enum class OptAlgo { Sgd, Adam, Ipalm };

inline OptAlgo opt_algo_from_string(const std::string& s)
{
    if (s == "sgd") return OptAlgo::Sgd;
    if (s == "adam") return OptAlgo::Adam;
    if (s == "ipalm") return OptAlgo::Ipalm;
    throw ConfigError("unknown optimizer: " + s);
}

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct IpalmParams {
    double alpha = 0.5; // inertia for the proximal point
    double beta = 0.5;  // inertia for the gradient point
};

struct TrainConfig {
    OptAlgo algo = OptAlgo::Adam;
    double lr = 1e-3;
    long batch_size = 1;
    long epochs = 1;
    uint64_t seed = 42;
    bool deterministic = true;
    bool drop_last = true;
    bool verbose = true;
    double clip = 0; // max gradient norm, 0 = off
    AdamParams adam;
    IpalmParams ipalm;

    void validate() const
    {
        if (!(lr > 0))
            throw ConfigError("train: learning rate must be positive");
        if (batch_size < 1)
            throw ConfigError("train: batch size must be >= 1");
        if (epochs < 0)
            throw ConfigError("train: epochs must be >= 0");
        auto chk = [](double b) { return b >= 0 && b < 1; };
        if (!chk(adam.beta1) || !chk(adam.beta2))
            throw ConfigError("train: Adam betas must be in [0, 1)");
    }
};

template<class R>
void check_gradient_finite(const MdArray<R>& g, const std::string& what)
{
    if (!md_all_finite(g))
        throw SolverError("non-finite gradient for " + what);
}

/// theta' = theta - eta g; real and imaginary parts update independently.
template<class R>
void sgd_step(MdArray<R>& theta, const MdArray<R>& g, R eta)
{
    check_gradient_finite(g, "sgd step");
    md_zip(theta, g, [eta](auto& t, const auto& gv) { t -= eta * gv; });
}

/// Adam moment buffers: complex first moment, |g|^2 second moment (one real
/// step-size denominator per complex weight) and a step counter.
template<class R>
struct AdamState {
    MdArray<R> m, v;
    long t = 0;
};

template<class R>
void adam_step(MdArray<R>& theta, const MdArray<R>& g, AdamState<R>& st, const AdamParams& p, R lr)
{
    check_gradient_finite(g, "adam step");
    if (!theta.has_default_strides())
        throw ConfigError("adam_step: weights must have default strides");
    if (!st.m.valid()) {
        st.m = MdArray<R>(theta.dims());
        st.v = MdArray<R>(theta.dims());
        st.t = 0;
    }
    st.t++;
    const R b1 = R(p.beta1), b2 = R(p.beta2), eps = R(p.eps);
    const R c1 = R(1) / R(1 - std::pow(p.beta1, st.t));
    const R c2 = R(1) / R(1 - std::pow(p.beta2, st.t));

    auto gc = g.has_default_strides() ? g : g.clone();
    const auto* gv = gc.data();
    auto* mv = st.m.data();
    auto* vv = st.v.data();
    auto* tv = theta.data();
    for (long k = 0; k < theta.size(); k++) {
        mv[k] = b1 * mv[k] + (R(1) - b1) * gv[k];
        vv[k] = std::complex<R>(b2 * vv[k].real() + (R(1) - b2) * std::norm(gv[k]), 0);
        R denom = std::sqrt(vv[k].real() * c2) + eps;
        tv[k] -= lr * (mv[k] * c1) / denom;
    }
}

template<class R>
struct IpalmState {
    MdArray<R> prev; // previous iterate of the block
};

/// One iPALM sweep over all blocks: inertial extrapolation, a gradient step
/// at the second extrapolation point, then the proximal map. The gradient
/// oracle is called per block with partially updated iterates (Gauss-Seidel
/// order).
template<class R>
void ipalm_step(std::vector<MdArray<R>>& theta,
                const std::function<MdArray<R>(int, const std::vector<MdArray<R>>&)>& grad,
                std::vector<IpalmState<R>>& state, const IpalmParams& p, R lr,
                const std::vector<std::shared_ptr<const Prox<R>>>& prox = {})
{
    if (state.size() != theta.size())
        state.resize(theta.size());
    std::vector<MdArray<R>> cur;
    for (auto& t : theta)
        cur.push_back(t.clone());

    for (size_t j = 0; j < theta.size(); j++) {
        auto& st = state[j];
        if (!st.prev.valid())
            st.prev = theta[j].clone();

        MdArray<R> y = theta[j].clone(); // prox extrapolation
        MdArray<R> z = theta[j].clone(); // gradient extrapolation
        md_zip(y, st.prev, [&](auto& a, const auto& pv) { a += R(p.alpha) * (a - pv); });
        md_zip(z, st.prev, [&](auto& a, const auto& pv) { a += R(p.beta) * (a - pv); });

        cur[j] = z;
        MdArray<R> g = grad(int(j), cur);
        check_gradient_finite(g, "ipalm block " + std::to_string(j));

        md_zip(y, g, [lr](auto& a, const auto& gv) { a -= lr * gv; });
        if (j < prox.size() && prox[j])
            prox[j]->apply(y, lr);

        st.prev = std::move(theta[j]);
        theta[j] = y.clone();
        cur[j] = y;
    }
}

// ---------------------------------------------------------------------------
// mini-batch training
// ---------------------------------------------------------------------------

/// Named arrays stacked along the batch dimension 15.
template<class R>
struct Dataset {
    long n = 0;
    std::map<std::string, MdArray<R>> arrays;

    void add(const std::string& name, MdArray<R> a)
    {
        if (a.rank() != max_rank)
            throw ShapeError("dataset arrays must have rank 16 (batch on dim 15)");
        if (n == 0)
            n = a.dims()[max_rank - 1];
        else if (a.dims()[max_rank - 1] != n)
            throw ShapeError("dataset: inconsistent item count for '" + name + "'");
        arrays.emplace(name, std::move(a));
    }
};

template<class R>
struct TrainResult {
    std::vector<double> epoch_loss;
    long steps = 0;
};

namespace detail {

/// Copy the selected items into a batch-sized array (batch on dim 15).
template<class R>
MdArray<R> gather_batch(const MdArray<R>& src, std::span<const long> items)
{
    Dims bd = src.dims();
    bd[max_rank - 1] = long(items.size());
    MdArray<R> out(bd);
    for (size_t k = 0; k < items.size(); k++) {
        auto dst = out.slice(max_rank - 1, long(k));
        auto s = src.slice(max_rank - 1, items[k]);
        md_copy2(dst.dims(), dst, dst.strides(), s, s.strides());
    }
    return out;
}

template<class R>
void clip_gradient(MdArray<R>& g, double clip)
{
    if (clip <= 0)
        return;
    double nrm = md_znorm(g);
    if (nrm > clip)
        md_foreach(g, [f = R(clip / nrm)](auto& v) { v *= f; });
}

} // namespace detail

/// Join a model's main output with a loss nlop and train its weights-kind
/// inputs by mini-batch gradient descent. Data-kind arguments are fed from
/// the dataset (a "reference" array feeds the loss); moving statistics flow
/// through their designated same-named outputs. Identical seed and config
/// give bitwise identical weights.
template<class R>
TrainResult<R> train(const Model<R>& model, LossKind loss_kind, const Dataset<R>& data,
                     const TrainConfig& cfg, std::map<std::string, MdArray<R>>& weights,
                     const std::string& main_output = "out")
{
    cfg.validate();
    if (data.n < cfg.batch_size && cfg.drop_last)
        throw ConfigError("train: dataset smaller than one batch (" + std::to_string(data.n)
                          + " < " + std::to_string(cfg.batch_size) + ")");

    if (weights.empty())
        weights = model.init_weights(cfg.seed);

    // the model must match the configured batch size; rebuild if it can
    Model<R> base = model;
    long model_batch = 1;
    for (size_t i = 0; i < base.args.size(); i++)
        if (base.args[i].kind == ArgKind::Data)
            model_batch = std::max(model_batch, base.op.in_dims(int(i))[max_rank - 1]);
    if (model_batch != cfg.batch_size) {
        if (!model.rebatch)
            throw ConfigError("train: model batch size " + std::to_string(model_batch)
                              + " does not match configured " + std::to_string(cfg.batch_size));
        base = model.rebatch(cfg.batch_size);
    }

    // join loss; keep any extra outputs (moving statistics) of the model
    auto make_joint = [&](const Model<R>& m) {
        auto loss = loss_model<R>(loss_kind, m.op.out_dims(m.output_index(main_output)));
        return model_chain(m, loss, "prediction", m.output_index(main_output));
    };
    Model<R> joint = make_joint(base);
    Model<R> joint_rem; // lazily built for a trailing partial batch
    long rem_size = -1;

    TrainResult<R> result;
    std::vector<AdamState<R>> adam_state(joint.args.size());
    std::vector<IpalmState<R>> ipalm_state(joint.args.size());

    const long nb = cfg.batch_size;
    for (long epoch = 0; epoch < cfg.epochs; epoch++) {
        // reproducible shuffle keyed by (seed, epoch)
        std::vector<long> order(data.n);
        for (long k = 0; k < data.n; k++)
            order[k] = k;
        Rng rng(hash_rand(cfg.seed, uint64_t(epoch) + 0x517cc1b7u));
        for (long k = data.n - 1; k > 0; k--)
            std::swap(order[k], order[rng.below(uint64_t(k + 1))]);

        double loss_sum = 0;
        long steps = 0;
        for (long pos = 0; pos < data.n; pos += nb) {
            long cnt = std::min(nb, data.n - pos);
            if (cnt < nb) {
                if (cfg.drop_last)
                    break;
                if (!model.rebatch)
                    throw ConfigError("train: partial batch requires a rebatchable model");
                if (rem_size != cnt) {
                    Model<R> rm = base.rebatch ? base.rebatch(cnt) : model.rebatch(cnt);
                    joint_rem = make_joint(rm);
                    rem_size = cnt;
                }
            }
            Model<R>& J = (cnt == nb) ? joint : joint_rem;

            std::map<std::string, MdArray<R>> batch;
            std::span<const long> items(order.data() + pos, size_t(cnt));
            for (size_t ai = 0; ai < J.args.size(); ai++) {
                const auto& a = J.args[ai];
                if (a.kind != ArgKind::Data)
                    continue;
                auto it = data.arrays.find(a.name);
                if (it == data.arrays.end())
                    throw ConfigError("train: dataset is missing array '" + a.name + "'");
                // batch-independent inputs (e.g. a shared sampling pattern)
                // pass through unchanged
                if (it->second.dims() == J.op.in_dims(int(ai)))
                    batch[a.name] = it->second;
                else
                    batch[a.name] = detail::gather_batch(it->second, items);
            }

            double loss_val = run_step(J, weights, batch, cfg, adam_state, ipalm_state);
            loss_sum += loss_val;
            steps++;
            result.steps++;
        }
        double mean_loss = steps ? loss_sum / double(steps) : 0.0;
        result.epoch_loss.push_back(mean_loss);
        if (cfg.verbose)
            std::printf("epoch %ld loss %.8g\n", epoch + 1, mean_loss);
    }
    return result;
}

template<class R>
double run_step(Model<R>& joint, std::map<std::string, MdArray<R>>& weights,
                const std::map<std::string, MdArray<R>>& batch, const TrainConfig& cfg,
                std::vector<AdamState<R>>& adam_state, std::vector<IpalmState<R>>& ipalm_state)
{
    const int loss_idx = joint.output_index("loss");

    auto eval = [&](const std::map<std::string, MdArray<R>>& w) {
        return joint.op.apply(joint.gather_inputs(w, batch));
    };

    std::vector<int> weight_args;
    for (size_t i = 0; i < joint.args.size(); i++)
        if (joint.args[i].kind == ArgKind::Weights)
            weight_args.push_back(int(i));

    double loss_val = 0;

    if (cfg.algo == OptAlgo::Ipalm) {
        std::vector<MdArray<R>> theta;
        for (int i : weight_args)
            theta.push_back(weights.at(joint.args[i].name));
        std::vector<std::shared_ptr<const Prox<R>>> prox;
        for (int i : weight_args)
            prox.push_back(joint.args[i].prox);

        auto grad = [&](int block, const std::vector<MdArray<R>>& cur) {
            auto w = weights;
            for (size_t k = 0; k < cur.size(); k++)
                w[joint.args[weight_args[k]].name] = cur[k];
            auto outs = eval(w);
            loss_val = outs[loss_idx].data()[0].real();
            if (!std::isfinite(loss_val))
                throw SolverError("training aborted: non-finite loss");
            auto g = joint.op.adjoint_derivative(loss_idx, weight_args[block],
                                                 MdArray<R>::scalar(std::complex<R>(1)));
            detail::clip_gradient(g, cfg.clip);
            if (joint.args[weight_args[block]].real_weights)
                md_foreach(g, [](auto& v) { v = std::complex<R>(v.real(), 0); });
            return g;
        };
        std::vector<IpalmState<R>> st;
        for (int i : weight_args)
            st.push_back(std::move(ipalm_state[i]));
        ipalm_step<R>(theta, grad, st, cfg.ipalm, R(cfg.lr), prox);
        for (size_t k = 0; k < weight_args.size(); k++) {
            ipalm_state[weight_args[k]] = std::move(st[k]);
            weights[joint.args[weight_args[k]].name] = theta[k];
        }
        bool has_stats = false;
        for (const auto& a : joint.args)
            has_stats |= a.kind == ArgKind::MovingStats;
        if (has_stats) {
            auto outs = eval(weights);
            update_stats(joint, outs, weights);
        }
        return loss_val;
    }

    auto outs = eval(weights);
    loss_val = outs[loss_idx].data()[0].real();
    if (!std::isfinite(loss_val))
        throw SolverError("training aborted: non-finite loss");

    auto grads = joint.op.adjoint_all(loss_idx, MdArray<R>::scalar(std::complex<R>(1)));

    for (int i : weight_args) {
        const auto& arg = joint.args[i];
        auto& w = weights.at(arg.name);
        auto& g = grads[i];
        detail::clip_gradient(g, cfg.clip);
        if (arg.real_weights)
            md_foreach(g, [](auto& v) { v = std::complex<R>(v.real(), 0); });

        if (cfg.algo == OptAlgo::Sgd)
            sgd_step(w, g, R(cfg.lr));
        else
            adam_step(w, g, adam_state[i], cfg.adam, R(cfg.lr));

        if (arg.real_weights)
            md_foreach(w, [](auto& v) { v = std::complex<R>(v.real(), 0); });
        if (arg.prox)
            arg.prox->apply(w, R(cfg.lr));
    }
    update_stats(joint, outs, weights);
    return loss_val;
}

/// Copy moving-statistics outputs back into their same-named inputs.
template<class R>
void update_stats(const Model<R>& joint, const std::vector<MdArray<R>>& outs,
                  std::map<std::string, MdArray<R>>& weights)
{
    for (const auto& a : joint.args) {
        if (a.kind != ArgKind::MovingStats)
            continue;
        for (size_t o = 0; o < joint.out_names.size(); o++)
            if (joint.out_names[o] == a.name) {
                weights[a.name] = outs[o].clone();
                break;
            }
    }
}

} // namespace mdnn
