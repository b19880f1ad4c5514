#pragma once

#include <map>

#include "ops.hpp"

namespace mdnn {

/// How the training loop treats an operator argument.
enum class ArgKind { Data, Weights, MovingStats };

struct Initializer {
    enum Kind { None, Constant, GlorotUniform } kind = None;
    double value = 0;
    long fan_in = 0, fan_out = 0;

    static Initializer constant(double v)
    {
        Initializer i;
        i.kind = Constant;
        i.value = v;
        return i;
    }
    static Initializer glorot(long fan_in, long fan_out)
    {
        Initializer i;
        i.kind = GlorotUniform;
        i.fan_in = fan_in;
        i.fan_out = fan_out;
        return i;
    }
};

/// Proximal operator attached to a weights argument.
template<class R>
struct Prox {
    virtual ~Prox() = default;
    virtual void apply(MdArray<R>& w, R tau) const = 0;
};

template<class R>
struct SoftThreshold : Prox<R> {
    explicit SoftThreshold(R lambda) : lambda(lambda) {}
    void apply(MdArray<R>& w, R tau) const override
    {
        R t = tau * lambda;
        md_foreach(w, [t](auto& v) {
            R m = std::abs(v);
            v = m > t ? v * ((m - t) / m) : std::complex<R>(0);
        });
    }
    R lambda;
};

/// Projection onto { Re >= 0, Im = 0 }; used for nonnegative scalars.
template<class R>
struct NonNegProx : Prox<R> {
    void apply(MdArray<R>& w, R) const override
    {
        md_foreach(w, [](auto& v) { v = std::complex<R>(v.real() > 0 ? v.real() : 0, 0); });
    }
};

/// Named-argument wrapper around an nlop: every input carries a name, a kind
/// and (for weights) an initializer, an optional proximal operator and a
/// real-valuedness flag. Moving-statistics inputs pair with the output of the
/// same name, through which the training loop carries them forward.
template<class R>
class Model {
public:
    struct Arg {
        std::string name;
        ArgKind kind = ArgKind::Data;
        Initializer init;
        std::shared_ptr<const Prox<R>> prox;
        bool real_weights = false;
    };

    Nlop<R> op;
    std::vector<Arg> args;
    std::vector<std::string> out_names;
    std::function<Model<R>(long)> rebatch; // optional rebuild for another batch size

    bool valid() const { return op.valid(); }

    int arg_index(const std::string& name) const
    {
        for (size_t i = 0; i < args.size(); i++)
            if (args[i].name == name)
                return int(i);
        throw ConfigError("model: no argument named '" + name + "'");
    }

    int output_index(const std::string& name) const
    {
        for (size_t i = 0; i < out_names.size(); i++)
            if (out_names[i] == name)
                return int(i);
        throw ConfigError("model: no output named '" + name + "'");
    }

    const Dims& arg_dims(int i) const { return op.in_dims(i); }

    /// Total count of real-valued trainable parameters.
    long num_real_params() const
    {
        long n = 0;
        for (size_t i = 0; i < args.size(); i++)
            if (args[i].kind == ArgKind::Weights)
                n += md_size(op.in_dims(int(i))) * (args[i].real_weights ? 1 : 2);
        return n;
    }

    /// Seeded initialization of all weights and moving statistics. Each array
    /// draws from its own stream derived from (seed, name), so the result is
    /// independent of argument order.
    std::map<std::string, MdArray<R>> init_weights(uint64_t seed) const
    {
        std::map<std::string, MdArray<R>> w;
        for (size_t i = 0; i < args.size(); i++) {
            const auto& a = args[i];
            if (a.kind == ArgKind::Data)
                continue;
            MdArray<R> arr(op.in_dims(int(i)));
            switch (a.init.kind) {
            case Initializer::None:
                break;
            case Initializer::Constant:
                arr.fill(std::complex<R>(R(a.init.value), 0));
                break;
            case Initializer::GlorotUniform: {
                Rng rng(derive_seed(seed, a.name));
                double bound = std::sqrt(6.0 / double(a.init.fan_in + a.init.fan_out));
                md_foreach(arr, [&](auto& v) {
                    double re = rng.uniform(-bound, bound);
                    double im = a.real_weights ? 0.0 : rng.uniform(-bound, bound);
                    v = std::complex<R>(R(re), R(im));
                });
                break;
            }
            }
            w.emplace(a.name, std::move(arr));
        }
        return w;
    }

    /// Assemble the input vector from named arrays (weights/statistics) and
    /// named data arrays, in argument order.
    std::vector<MdArray<R>> gather_inputs(const std::map<std::string, MdArray<R>>& weights,
                                          const std::map<std::string, MdArray<R>>& data) const
    {
        std::vector<MdArray<R>> in;
        for (const auto& a : args) {
            const auto& src = (a.kind == ArgKind::Data) ? data : weights;
            auto it = src.find(a.name);
            if (it == src.end())
                throw ConfigError("model: missing array for argument '" + a.name + "'");
            in.push_back(it->second);
        }
        return in;
    }
};

/// Feed `a`'s output `a_out` (default: the one named "out") into `b`'s input
/// named `b_in`; remaining arguments stack a-then-b, outputs keep a's other
/// outputs then b's.
template<class R>
Model<R> model_chain(const Model<R>& a, const Model<R>& b, const std::string& b_in, int a_out = -1)
{
    if (a_out < 0)
        a_out = a.output_index("out");
    int bi = b.arg_index(b_in);
    Model<R> m;
    m.op = link(combine(a.op, b.op), a_out, a.op.n_in() + bi);
    m.args = a.args;
    for (size_t i = 0; i < b.args.size(); i++)
        if (int(i) != bi)
            m.args.push_back(b.args[i]);
    m.out_names = a.out_names;
    m.out_names.erase(m.out_names.begin() + a_out);
    m.out_names.insert(m.out_names.end(), b.out_names.begin(), b.out_names.end());
    return m;
}

/// Feed model output `out_idx` into the argument named `arg`.
template<class R>
Model<R> model_link(Model<R> m, int out_idx, const std::string& arg)
{
    int ai = m.arg_index(arg);
    m.op = link(m.op, out_idx, ai);
    m.args.erase(m.args.begin() + ai);
    m.out_names.erase(m.out_names.begin() + out_idx);
    return m;
}

template<class R>
Model<R> model_combine(const Model<R>& a, const Model<R>& b)
{
    Model<R> m;
    m.op = combine(a.op, b.op);
    m.args = a.args;
    m.args.insert(m.args.end(), b.args.begin(), b.args.end());
    m.out_names = a.out_names;
    m.out_names.insert(m.out_names.end(), b.out_names.begin(), b.out_names.end());
    return m;
}

/// Merge all same-named arguments (weight sharing / common data inputs).
template<class R>
Model<R> model_dedupe(Model<R> m)
{
    for (size_t i = 0; i < m.args.size(); i++)
        for (size_t j = i + 1; j < m.args.size();) {
            if (m.args[j].name == m.args[i].name) {
                m.op = duplicate(m.op, int(i), int(j));
                m.args.erase(m.args.begin() + j);
            } else {
                j++;
            }
        }
    return m;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// Identity starting point for chained construction.
template<class R>
Model<R> model_input(const std::string& name, Dims dims)
{
    Model<R> m;
    m.op = nlop_from_linop(linop_identity<R>(dims), "input");
    m.args = {{name, ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

/// Fully connected layer y = W x + b on inputs [in_features, batch].
/// Weights: W [out_features, in_features] (Glorot), b [out_features, 1].
template<class R>
Model<R> dense_layer(const std::string& name, long in_features, long out_features, long batch = 1)
{
    if (in_features < 1 || out_features < 1)
        throw ConfigError("dense: feature counts must be positive");
    Dims x_dims{in_features, batch};
    Dims y_dims{out_features, batch};
    Dims w_dims{out_features, in_features};
    Dims b_dims{out_features, 1};

    // iteration (o, i, b)
    Dims iter{out_features, in_features, batch};
    auto matmul = Nlop<R>(std::make_shared<TenMulNode<R>>(
        name + "_matvec", iter, y_dims, Dims{1, 0, out_features},
        w_dims, Dims{1, out_features, 0}, x_dims, Dims{0, 1, in_features}));
    auto bias = Nlop<R>(std::make_shared<BroadcastAddNode<R>>(y_dims, b_dims));

    Model<R> m;
    m.op = link(combine(matmul, bias), 0, 2); // matmul output -> bias x-input
    m.args = {{name + "_w", ArgKind::Weights, Initializer::glorot(in_features, out_features), nullptr, false},
              {"x", ArgKind::Data, {}, nullptr, false},
              {name + "_b", ArgKind::Weights, Initializer::constant(0), nullptr, false}};
    m.out_names = {"out"};
    return m;
}

/// Geometry of an N-d convolution layer acting on arbitrary dims.
struct ConvSpec {
    Dims in_dims;
    std::vector<int> axes; // convolved axes, ascending
    Dims kernel;           // kernel extent per axis
    int chan_dim = -1;     // input channel axis (size may be > 1)
    long out_channels = 1;
    bool pad_same = false; // false: valid
    bool transposed = false;

    Dims weight_dims() const
    {
        Dims w = kernel;
        w.push_back(in_dims.at(chan_dim));
        w.push_back(out_channels);
        return w;
    }

    Dims out_dims() const
    {
        Dims out = in_dims;
        for (size_t a = 0; a < axes.size(); a++) {
            long n = in_dims[axes[a]];
            if (!pad_same) {
                if (kernel[a] > n)
                    throw ShapeError("conv: kernel larger than input on axis " + std::to_string(axes[a]));
                out[axes[a]] = n - kernel[a] + 1;
            }
        }
        out[chan_dim] = out_channels;
        return out;
    }
};

namespace detail {

/// Build the tenmul wiring of a valid cross-correlation:
/// out[.., ox, .., f] += in[.., ox+kx, .., c] * w[kx.., c, f].
template<class R>
std::shared_ptr<TenMulNode<R>> conv_tenmul(const std::string& name, const ConvSpec& spec,
                                           const Dims& in_dims, const Dims& out_dims)
{
    Dims w_dims = spec.weight_dims();
    Dims si = default_strides(in_dims);
    Dims so = default_strides(out_dims);
    Dims sw = default_strides(w_dims);

    Dims iter, to, ti, tw;
    auto push = [&](long n, long o, long i, long w) {
        iter.push_back(n);
        to.push_back(o);
        ti.push_back(i);
        tw.push_back(w);
    };
    for (int d = 0; d < int(in_dims.size()); d++) {
        auto ax = std::find(spec.axes.begin(), spec.axes.end(), d);
        if (ax != spec.axes.end()) {
            size_t a = ax - spec.axes.begin();
            push(out_dims[d], so[d], si[d], 0);           // output position
            push(spec.kernel[a], 0, si[d], sw[a]);        // kernel offset
        } else if (d == spec.chan_dim) {
            push(in_dims[d], 0, si[d], sw[spec.axes.size()]);     // input channels
            push(spec.out_channels, so[d], 0, sw[spec.axes.size() + 1]); // filters
        } else {
            push(in_dims[d], so[d], si[d], 0);
        }
    }
    if (spec.transposed)
        return std::make_shared<TenMulNode<R>>(name, iter, in_dims, ti, out_dims, to, w_dims, tw);
    return std::make_shared<TenMulNode<R>>(name, iter, out_dims, to, in_dims, ti, w_dims, tw);
}

} // namespace detail

/// Convolution layer (cross-correlation convention, no kernel flip). The
/// transposed variant is the exact adjoint of the forward map with the same
/// weights. Padding: valid or same (zero padding, centered).
template<class R>
Model<R> conv_layer(const std::string& name, ConvSpec spec, bool bias = false)
{
    if (spec.axes.size() != spec.kernel.size())
        throw ConfigError("conv: one kernel extent per axis required");
    for (size_t a = 0; a < spec.axes.size(); a++)
        if (!spec.pad_same && spec.kernel[a] > spec.in_dims.at(spec.axes[a]))
            throw ShapeError("conv: kernel larger than padded input");

    // geometry of the underlying valid convolution
    Dims padded = spec.in_dims;
    Dims corner(spec.in_dims.size(), 0);
    if (spec.pad_same) {
        for (size_t a = 0; a < spec.axes.size(); a++) {
            padded[spec.axes[a]] += spec.kernel[a] - 1;
            corner[spec.axes[a]] = (spec.kernel[a] - 1) / 2;
        }
    }
    Dims out = spec.out_dims();
    Dims conv_out = out;
    if (spec.pad_same)
        for (size_t a = 0; a < spec.axes.size(); a++)
            conv_out[spec.axes[a]] = padded[spec.axes[a]] - spec.kernel[a] + 1; // == in extent

    long fan_k = 1;
    for (long k : spec.kernel)
        fan_k *= k;
    auto w_init = Initializer::glorot(fan_k * spec.in_dims[spec.chan_dim], fan_k * spec.out_channels);

    Model<R> m;
    if (!spec.transposed) {
        ConvSpec vspec = spec;
        vspec.in_dims = padded;
        auto core = Nlop<R>(detail::conv_tenmul<R>(name + "_conv", vspec, padded, conv_out));
        if (spec.pad_same) {
            auto pad = nlop_from_linop(linop_pad<R>(spec.in_dims, padded, corner), "pad");
            // pad output feeds the tenmul input (slot 0)
            m.op = link(combine(pad, core), 0, 1);
        } else {
            m.op = core;
        }
        m.args = {{"x", ArgKind::Data, {}, nullptr, false},
                  {name + "_w", ArgKind::Weights, w_init, nullptr, false}};
    } else {
        // adjoint direction: maps conv_out-shaped input back to in_dims; the
        // weights enter conjugated so the map is the exact adjoint of the
        // forward convolution with the same filter array
        ConvSpec vspec = spec;
        vspec.transposed = true;
        vspec.in_dims = padded;
        auto scatter = Nlop<R>(detail::conv_tenmul<R>(name + "_convT", vspec, padded, conv_out));
        auto conjw = nlop_zconj<R>(spec.weight_dims());
        auto core = link(combine(conjw, scatter), 0, 2); // inputs: (w, y)
        if (spec.pad_same) {
            auto crop = Linop<R>(padded, spec.in_dims,
                                 [p = linop_pad<R>(spec.in_dims, padded, corner)](const MdArray<R>& x) {
                                     return p.adjoint(x);
                                 },
                                 [p = linop_pad<R>(spec.in_dims, padded, corner)](const MdArray<R>& y) {
                                     return p.forward(y);
                                 });
            core = chain(core, nlop_from_linop(crop, "crop"));
        }
        m.op = core;
        m.args = {{name + "_w", ArgKind::Weights, w_init, nullptr, false},
                  {"x", ArgKind::Data, {}, nullptr, false}};
    }
    m.out_names = {"out"};

    if (bias) {
        Dims final_out = spec.transposed ? spec.in_dims : out;
        Dims b_dims(final_out.size(), 1);
        b_dims[spec.chan_dim] = final_out[spec.chan_dim];
        auto add = Nlop<R>(std::make_shared<BroadcastAddNode<R>>(final_out, b_dims));
        Model<R> bm;
        bm.op = add;
        bm.args = {{"x", ArgKind::Data, {}, nullptr, false},
                   {name + "_b", ArgKind::Weights, Initializer::constant(0), nullptr, false}};
        bm.out_names = {"out"};
        m = model_chain(m, bm, "x");
    }
    return m;
}

template<class R>
Model<R> activation_layer(const std::string& kind, Dims dims, int class_dim = -1)
{
    Model<R> m;
    m.op = nlop_activation<R>(kind, std::move(dims), class_dim);
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

/// Pre-affine batch normalization; moving statistics ride along as a
/// same-named input/output pair of kind MovingStats.
template<class R>
Model<R> batchnorm_layer(const std::string& name, Dims dims, unsigned long norm_flags, bool train,
                         double epsilon = 1e-5, double momentum = 0.1)
{
    auto node = std::make_shared<BatchNormNode<R>>(dims, norm_flags, train, epsilon, momentum);
    Model<R> m;
    m.op = Nlop<R>(node);
    m.args = {{"x", ArgKind::Data, {}, nullptr, false},
              {name + "_mean", ArgKind::MovingStats, Initializer::constant(0), nullptr, false},
              {name + "_var", ArgKind::MovingStats, Initializer::constant(1), nullptr, false}};
    m.out_names = train ? std::vector<std::string>{"out", name + "_mean", name + "_var"}
                        : std::vector<std::string>{"out"};
    return m;
}

template<class R>
Model<R> maxpool_layer(Dims dims, Dims window)
{
    Model<R> m;
    m.op = Nlop<R>(std::make_shared<MaxPoolNode<R>>(std::move(dims), std::move(window)));
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

template<class R>
Model<R> dropout_layer(Dims dims, double rate, uint64_t seed, uint64_t layer_id, bool train)
{
    Model<R> m;
    m.op = Nlop<R>(std::make_shared<DropoutNode<R>>(std::move(dims), rate, seed, layer_id, train));
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

/// Loss fragment with inputs (prediction, reference) and scalar output
/// "loss"; reference becomes a data argument of that name.
template<class R>
Model<R> loss_model(LossKind kind, Dims dims, const std::string& ref_name = "reference", int class_dim = -1)
{
    Model<R> m;
    m.op = nlop_loss<R>(kind, std::move(dims), class_dim);
    m.args = {{"prediction", ArgKind::Data, {}, nullptr, false},
              {ref_name, ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"loss"};
    return m;
}

} // namespace mdnn
