#pragma once

#include <optional>
#include <span>

#include "linop.hpp"

namespace mdnn {

/// Atomic non-linear operator with I inputs, O outputs, and a derivative
/// linop per (input, output) pair. Derivatives are always evaluated at the
/// arguments of the most recent forward call; the generation counter lets
/// callers detect stale derivative state.
///
/// For operators that are not complex-linear, `adjoint` implements the
/// transpose of the real-valued Jacobian under C ~ R^2, i.e. it satisfies
/// Re<DF(dx), dy> = Re<dx, DF^H(dy)> for all probes.
template<class R>
class NlopNode {
public:
    virtual ~NlopNode() = default;

    virtual std::string name() const = 0;
    virtual int n_in() const = 0;
    virtual int n_out() const = 0;
    virtual const Dims& in_dims(int i) const = 0;
    virtual const Dims& out_dims(int o) const = 0;

    /// Compute outputs and refresh the evaluation state. `store` false skips
    /// retaining derivative state (used by the checkpointing container).
    /// Inputs and outputs arrive with default (column-major) strides; the
    /// graph normalizes caller-provided views before dispatch.
    virtual void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) = 0;

    /// dy = D_i F_o dx.
    virtual void deriv(int o, int i, const MdArray<R>& dx, MdArray<R>& dy) = 0;

    /// dx = (D_i F_o)^H dy.
    virtual void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) = 0;

    /// Structurally zero derivative for the pair (o, i).
    virtual bool zero_deriv(int o, int i) const
    {
        (void)o; (void)i;
        return false;
    }

    /// True if DF is linear over C for every input (holomorphic operator).
    virtual bool holomorphic() const { return false; }

    /// Cotangent on output o propagated to every input at once. Containers
    /// override this so one backward batch triggers one recomputation.
    virtual void adjoint_all(int o, const MdArray<R>& dy, std::vector<MdArray<R>>& dx)
    {
        dx.assign(n_in(), MdArray<R>{});
        for (int i = 0; i < n_in(); i++) {
            if (zero_deriv(o, i))
                continue;
            MdArray<R> g(in_dims(i));
            adjoint(o, i, dy, g);
            dx[i] = std::move(g);
        }
    }

    // Stochastic nodes (dropout) expose a replayable draw counter so that
    // checkpointed re-execution reproduces the same masks.
    virtual bool has_rng() const { return false; }
    virtual uint64_t rng_counter() const { return 0; }
    virtual void set_rng_counter(uint64_t) {}

    uint64_t generation() const { return gen_; }

protected:
    void bump_generation() { ++gen_; }
    void require_forward() const
    {
        if (gen_ == 0)
            throw StaleDerivativeError(name() + ": derivative requested before any forward call");
    }

private:
    uint64_t gen_ = 0;
};

/// Non-linear operator: a DAG of atomic nodes with named input slots and
/// output ports. Composition (chain / combine / link / duplicate) rewires
/// the flattened graph; forward and derivative evaluations are topological
/// sweeps with multivariate accumulation at fan-in and fan-out points.
template<class R>
class Nlop {
public:
    struct Src {
        int node; // -1: graph input slot `port`
        int port;
        bool operator==(const Src&) const = default;
    };

    Nlop() = default;

    explicit Nlop(std::shared_ptr<NlopNode<R>> node)
    {
        nodes_.push_back(node);
        in_srcs_.push_back({});
        n_in_ = node->n_in();
        for (int i = 0; i < n_in_; i++) {
            in_srcs_[0].push_back({-1, i});
            in_dims_.push_back(node->in_dims(i));
        }
        for (int o = 0; o < node->n_out(); o++)
            outputs_.push_back({0, o});
        finalize();
    }

    bool valid() const { return !nodes_.empty(); }
    int n_in() const { return n_in_; }
    int n_out() const { return int(outputs_.size()); }
    const Dims& in_dims(int i) const { return in_dims_.at(i); }
    const Dims& out_dims(int o) const
    {
        auto s = outputs_.at(o);
        return nodes_[s.node]->out_dims(s.port);
    }

    /// Forward pass; refreshes all node evaluation states.
    std::vector<MdArray<R>> apply(std::span<const MdArray<R>> in)
    {
        if (long(in.size()) != n_in_)
            throw ShapeError("nlop apply: expected " + std::to_string(n_in_) + " inputs, got "
                             + std::to_string(in.size()));
        for (int i = 0; i < n_in_; i++) {
            if (!in[i].valid())
                throw ShapeError("nlop apply: input " + std::to_string(i) + " is uninitialized");
            if (in[i].dims() != in_dims_[i])
                throw ShapeError("nlop apply: input " + std::to_string(i) + " expected "
                                 + dims_to_string(in_dims_[i]) + ", got " + dims_to_string(in[i].dims()));
        }
        std::vector<MdArray<R>> norm;
        for (int i = 0; i < n_in_; i++)
            norm.push_back(in[i].has_default_strides() ? in[i] : in[i].clone());
        auto vals = run_forward(std::span<const MdArray<R>>(norm.data(), norm.size()), true);
        last_gens_.resize(nodes_.size());
        for (size_t n = 0; n < nodes_.size(); n++)
            last_gens_[n] = nodes_[n]->generation();
        has_forward_ = true;

        std::vector<MdArray<R>> out;
        for (auto s : outputs_)
            out.push_back(vals[s.node][s.port]);
        return out;
    }

    std::vector<MdArray<R>> apply(const std::vector<MdArray<R>>& in)
    {
        return apply(std::span<const MdArray<R>>(in.data(), in.size()));
    }

    /// dy = D_i F_o dx at the last forward call's arguments.
    MdArray<R> derivative(int o, int i, const MdArray<R>& dx)
    {
        check_state();
        if (dx.dims() != in_dims(i))
            throw ShapeError("nlop derivative: probe shape mismatch");
        MdArray<R> dxn = dx.has_default_strides() ? dx : dx.clone();

        // forward tangent sweep from input slot i
        std::vector<std::vector<MdArray<R>>> tan(nodes_.size());
        for (size_t n = 0; n < nodes_.size(); n++)
            tan[n].resize(nodes_[n]->n_out());

        for (int ni : topo_) {
            auto& node = *nodes_[ni];
            for (int p = 0; p < node.n_out(); p++) {
                MdArray<R> acc;
                for (int k = 0; k < node.n_in(); k++) {
                    auto s = in_srcs_[ni][k];
                    const MdArray<R>* t = nullptr;
                    if (s.node < 0) {
                        if (s.port != i)
                            continue;
                        t = &dxn;
                    } else {
                        if (!tan[s.node][s.port].valid())
                            continue;
                        t = &tan[s.node][s.port];
                    }
                    if (node.zero_deriv(p, k))
                        continue;
                    MdArray<R> dy(node.out_dims(p));
                    node.deriv(p, k, *t, dy);
                    if (!acc.valid())
                        acc = std::move(dy);
                    else
                        md_axpy(acc, std::complex<R>(1), dy);
                }
                if (acc.valid())
                    tan[ni][p] = std::move(acc);
            }
        }
        auto s = outputs_.at(o);
        if (tan[s.node][s.port].valid())
            return tan[s.node][s.port];
        return MdArray<R>(out_dims(o)); // structurally zero
    }

    /// Cotangents of output o for every graph input (one backward sweep).
    std::vector<MdArray<R>> adjoint_all(int o, const MdArray<R>& dy)
    {
        check_state();
        if (dy.dims() != out_dims(o))
            throw ShapeError("nlop adjoint: probe shape mismatch");

        std::vector<std::vector<MdArray<R>>> cot(nodes_.size());
        for (size_t n = 0; n < nodes_.size(); n++)
            cot[n].resize(nodes_[n]->n_out());
        std::vector<MdArray<R>> in_cot(n_in_);

        auto os = outputs_.at(o);
        cot[os.node][os.port] = dy.clone(); // clone also normalizes strides

        std::vector<MdArray<R>> contrib;
        for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
            int ni = *it;
            auto& node = *nodes_[ni];
            for (int p = 0; p < node.n_out(); p++) {
                if (!cot[ni][p].valid())
                    continue;
                node.adjoint_all(p, cot[ni][p], contrib);
                for (int k = 0; k < node.n_in(); k++) {
                    if (!contrib[k].valid())
                        continue;
                    auto s = in_srcs_[ni][k];
                    MdArray<R>& dst = (s.node < 0) ? in_cot[s.port] : cot[s.node][s.port];
                    if (!dst.valid())
                        dst = std::move(contrib[k]);
                    else
                        md_axpy(dst, std::complex<R>(1), contrib[k]);
                }
            }
        }
        for (int i = 0; i < n_in_; i++)
            if (!in_cot[i].valid())
                in_cot[i] = MdArray<R>(in_dims_[i]);
        return in_cot;
    }

    /// dx = (D_i F_o)^H dy.
    MdArray<R> adjoint_derivative(int o, int i, const MdArray<R>& dy)
    {
        return adjoint_all(o, dy)[i];
    }

    /// Gradient of a real-scalar-output operator: DF^H(1) for input i.
    MdArray<R> gradient(int i)
    {
        if (n_out() != 1 || md_size(out_dims(0)) != 1)
            throw ShapeError("gradient requires a scalar output");
        return adjoint_derivative(0, i, MdArray<R>::scalar(std::complex<R>(1)));
    }

    const std::vector<std::shared_ptr<NlopNode<R>>>& nodes() const { return nodes_; }

    // -- composition algebra ------------------------------------------------

    /// Stack inputs and outputs of f then g into one operator.
    friend Nlop combine(const Nlop& f, const Nlop& g)
    {
        Nlop h;
        h.nodes_ = f.nodes_;
        h.in_srcs_ = f.in_srcs_;
        h.n_in_ = f.n_in_ + g.n_in_;
        h.in_dims_ = f.in_dims_;
        h.in_dims_.insert(h.in_dims_.end(), g.in_dims_.begin(), g.in_dims_.end());
        h.outputs_ = f.outputs_;

        const int nshift = int(f.nodes_.size());
        for (size_t n = 0; n < g.nodes_.size(); n++) {
            h.nodes_.push_back(g.nodes_[n]);
            auto srcs = g.in_srcs_[n];
            for (auto& s : srcs) {
                if (s.node < 0)
                    s.port += f.n_in_;
                else
                    s.node += nshift;
            }
            h.in_srcs_.push_back(std::move(srcs));
        }
        for (auto s : g.outputs_)
            h.outputs_.push_back({s.node + nshift, s.port});
        h.finalize();
        return h;
    }

    /// Feed output `o` into input `i`; both leave the signature. The result
    /// must stay evaluable (acyclic), which is checked at construction.
    friend Nlop link(const Nlop& h, int o, int i)
    {
        if (o < 0 || o >= h.n_out() || i < 0 || i >= h.n_in())
            throw ShapeError("link: index out of range");
        if (h.out_dims(o) != h.in_dims(i))
            throw ShapeError("link: output " + dims_to_string(h.out_dims(o))
                             + " does not match input " + dims_to_string(h.in_dims(i)));
        Nlop r = h;
        r.has_forward_ = false;
        auto src = h.outputs_[o];
        for (auto& srcs : r.in_srcs_)
            for (auto& s : srcs) {
                if (s.node < 0 && s.port == i)
                    s = src;
                else if (s.node < 0 && s.port > i)
                    s.port--;
            }
        r.outputs_.erase(r.outputs_.begin() + o);
        r.in_dims_.erase(r.in_dims_.begin() + i);
        r.n_in_--;
        r.finalize();
        return r;
    }

    /// Merge input j into input i; the derivative with respect to the merged
    /// input is the sum of both branch derivatives.
    friend Nlop duplicate(const Nlop& h, int i, int j)
    {
        if (i < 0 || j < 0 || i >= h.n_in() || j >= h.n_in() || i == j)
            throw ShapeError("duplicate: index out of range");
        if (h.in_dims(i) != h.in_dims(j))
            throw ShapeError("duplicate: input shapes differ");
        Nlop r = h;
        r.has_forward_ = false;
        for (auto& srcs : r.in_srcs_)
            for (auto& s : srcs) {
                if (s.node < 0 && s.port == j)
                    s.port = i < j ? i : i - 1;
                else if (s.node < 0 && s.port > j)
                    s.port--;
            }
        r.in_dims_.erase(r.in_dims_.begin() + j);
        r.n_in_--;
        r.finalize();
        return r;
    }

    /// g after f; f must have one output and g one input.
    friend Nlop chain(const Nlop& f, const Nlop& g)
    {
        if (f.n_out() != 1)
            throw ShapeError("chain: first operator must have a single output");
        if (g.n_in() != 1)
            throw ShapeError("chain: second operator must have a single input");
        return link(combine(f, g), 0, f.n_in());
    }

private:
    void check_state()
    {
        if (!has_forward_)
            throw StaleDerivativeError("nlop derivative requested before any forward call");
        for (size_t n = 0; n < nodes_.size(); n++)
            if (nodes_[n]->generation() != last_gens_[n])
                throw StaleDerivativeError("nlop derivative state is stale: '" + nodes_[n]->name()
                                           + "' was re-applied after this operator's forward pass");
    }

    std::vector<std::vector<MdArray<R>>> run_forward(std::span<const MdArray<R>> in, bool store)
    {
        std::vector<std::vector<MdArray<R>>> vals(nodes_.size());
        std::vector<MdArray<R>> args;
        std::vector<MdArray<R>> outs;
        for (int ni : topo_) {
            auto& node = *nodes_[ni];
            args.clear();
            for (int k = 0; k < node.n_in(); k++) {
                auto s = in_srcs_[ni][k];
                args.push_back(s.node < 0 ? in[s.port] : vals[s.node][s.port]);
            }
            outs.clear();
            for (int p = 0; p < node.n_out(); p++)
                outs.emplace_back(node.out_dims(p));
            node.forward(std::span<const MdArray<R>>(args.data(), args.size()),
                         std::span<MdArray<R>>(outs.data(), outs.size()), store);
            vals[ni] = std::move(outs);
        }
        return vals;
    }

    void finalize()
    {
        // validate wiring shapes
        for (size_t n = 0; n < nodes_.size(); n++) {
            if (int(in_srcs_[n].size()) != nodes_[n]->n_in())
                throw ShapeError("nlop wiring: port count mismatch");
            for (int k = 0; k < nodes_[n]->n_in(); k++) {
                auto s = in_srcs_[n][k];
                const Dims& have = (s.node < 0) ? in_dims_.at(s.port)
                                                : nodes_.at(s.node)->out_dims(s.port);
                if (have != nodes_[n]->in_dims(k))
                    throw ShapeError("nlop wiring: shape mismatch into '" + nodes_[n]->name() + "'");
            }
        }
        // topological order (Kahn)
        std::vector<int> indeg(nodes_.size(), 0);
        for (size_t n = 0; n < nodes_.size(); n++)
            for (auto s : in_srcs_[n])
                if (s.node >= 0)
                    indeg[n]++;
        topo_.clear();
        std::vector<int> ready;
        for (size_t n = 0; n < nodes_.size(); n++)
            if (indeg[n] == 0)
                ready.push_back(int(n));
        while (!ready.empty()) {
            // smallest index first: deterministic order
            auto it = std::min_element(ready.begin(), ready.end());
            int n = *it;
            ready.erase(it);
            topo_.push_back(n);
            for (size_t m = 0; m < nodes_.size(); m++)
                for (auto s : in_srcs_[m])
                    if (s.node == n && --indeg[m] == 0)
                        ready.push_back(int(m));
        }
        if (topo_.size() != nodes_.size())
            throw ShapeError("nlop wiring: graph contains a cycle");
        has_forward_ = false;
    }

    std::vector<std::shared_ptr<NlopNode<R>>> nodes_;
    std::vector<std::vector<Src>> in_srcs_;
    std::vector<Src> outputs_;
    std::vector<Dims> in_dims_;
    int n_in_ = 0;

    std::vector<uint64_t> last_gens_;
    std::vector<int> topo_;
    bool has_forward_ = false;

    template<class> friend class CheckpointNode;
};

/// Checkpointing container: forward stores only the operator inputs, and any
/// derivative evaluation first re-runs the inner forward on the stored
/// inputs. Stochastic nodes are rewound to their recorded draw counters, so
/// re-execution is bitwise identical to the original pass.
template<class R>
class CheckpointNode : public NlopNode<R> {
public:
    explicit CheckpointNode(Nlop<R> inner) : inner_(std::move(inner))
    {
        for (int i = 0; i < inner_.n_in(); i++)
            in_dims_.push_back(inner_.in_dims(i));
        for (int o = 0; o < inner_.n_out(); o++)
            out_dims_.push_back(inner_.out_dims(o));
    }

    std::string name() const override { return "checkpoint"; }
    int n_in() const override { return int(in_dims_.size()); }
    int n_out() const override { return int(out_dims_.size()); }
    const Dims& in_dims(int i) const override { return in_dims_.at(i); }
    const Dims& out_dims(int o) const override { return out_dims_.at(o); }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        rng_counters_.clear();
        for (auto& n : inner_.nodes())
            if (n->has_rng())
                rng_counters_.push_back(n->rng_counter());
        saved_in_.clear();
        for (auto& a : in)
            saved_in_.push_back(a.clone());
        auto vals = inner_.run_forward(in, false);
        for (int o = 0; o < n_out(); o++)
            out[o] = vals[inner_.outputs_[o].node][inner_.outputs_[o].port];
        this->bump_generation();
    }

    void deriv(int o, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        reexecute();
        dy = inner_.derivative(o, i, dx);
    }

    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        reexecute();
        dx = inner_.adjoint_derivative(o, i, dy);
    }

    void adjoint_all(int o, const MdArray<R>& dy, std::vector<MdArray<R>>& dx) override
    {
        reexecute();
        dx = inner_.adjoint_all(o, dy);
    }

    /// Forward re-executions performed so far (one per derivative batch).
    long reexecutions() const { return reexec_; }

private:
    void reexecute()
    {
        this->require_forward();
        size_t ri = 0;
        for (auto& n : inner_.nodes())
            if (n->has_rng())
                n->set_rng_counter(rng_counters_.at(ri++));
        inner_.apply(std::span<const MdArray<R>>(saved_in_.data(), saved_in_.size()));
        reexec_++;
    }

    Nlop<R> inner_;
    std::vector<Dims> in_dims_, out_dims_;
    std::vector<MdArray<R>> saved_in_;
    std::vector<uint64_t> rng_counters_;
    long reexec_ = 0;
};

template<class R>
Nlop<R> checkpoint(const Nlop<R>& f, std::shared_ptr<CheckpointNode<R>>* handle = nullptr)
{
    auto node = std::make_shared<CheckpointNode<R>>(f);
    if (handle)
        *handle = node;
    return Nlop<R>(node);
}

} // namespace mdnn
