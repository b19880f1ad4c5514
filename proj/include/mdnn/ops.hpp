#pragma once

#include "nlop.hpp"

namespace mdnn {

namespace detail {

template<class R>
class AtomNode : public NlopNode<R> {
public:
    AtomNode(std::string name, std::vector<Dims> in, std::vector<Dims> out)
        : name_(std::move(name)), ins_(std::move(in)), outs_(std::move(out))
    {
    }
    std::string name() const override { return name_; }
    int n_in() const override { return int(ins_.size()); }
    int n_out() const override { return int(outs_.size()); }
    const Dims& in_dims(int i) const override { return ins_.at(i); }
    const Dims& out_dims(int o) const override { return outs_.at(o); }

protected:
    std::string name_;
    std::vector<Dims> ins_, outs_;
};

} // namespace detail

// ---------------------------------------------------------------------------
// linear / bilinear atoms
// ---------------------------------------------------------------------------

/// Wrap a linop as a (holomorphic) nlop.
template<class R>
class LinopNode : public detail::AtomNode<R> {
public:
    LinopNode(Linop<R> a, std::string name = "linop")
        : detail::AtomNode<R>(std::move(name), {a.in_dims()}, {a.out_dims()}), a_(std::move(a))
    {
    }
    bool holomorphic() const override { return true; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        out[0] = a_.forward(in[0]);
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = a_.forward(dx);
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = a_.adjoint(dy);
    }
    const Linop<R>& op() const { return a_; }

private:
    Linop<R> a_;
};

/// Generic bilinear contraction out[p.so] += x1[p.s1] * x2[p.s2]; the one
/// kernel behind elementwise products, dense layers and convolutions.
/// Derivatives reuse the same iteration domain with the written argument
/// swapped, which makes every adjoint another md-function call.
template<class R>
class TenMulNode : public detail::AtomNode<R> {
public:
    TenMulNode(std::string name, Dims iter, Dims out_dims, Dims so,
               Dims in1_dims, Dims s1, Dims in2_dims, Dims s2)
        : detail::AtomNode<R>(std::move(name), {std::move(in1_dims), std::move(in2_dims)}, {std::move(out_dims)}),
          iter_(std::move(iter)), so_(std::move(so)), s1_(std::move(s1)), s2_(std::move(s2))
    {
    }
    bool holomorphic() const override { return true; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        out[0].clear();
        md_fmac2(iter_, out[0], so_, in[0], s1_, in[1], s2_);
        if (store) {
            x1_ = in[0].clone();
            x2_ = in[1].clone();
        } else {
            x1_ = {};
            x2_ = {};
        }
        this->bump_generation();
    }

    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy.clear();
        if (i == 0)
            md_fmac2(iter_, dy, so_, dx, s1_, x2_, s2_);
        else
            md_fmac2(iter_, dy, so_, x1_, s1_, dx, s2_);
    }

    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx.clear();
        if (i == 0)
            md_zfmacc2(iter_, dx, s1_, dy, so_, x2_, s2_);
        else
            md_zfmacc2(iter_, dx, s2_, dy, so_, x1_, s1_);
    }

    KernelClass kernel_class() const { return detect_kernel_class(iter_, so_, s1_, s2_); }

private:
    Dims iter_, so_, s1_, s2_;
    MdArray<R> x1_, x2_;
};

/// x1 + x2 or x1 - x2 on matching shapes.
template<class R>
class AddNode : public detail::AtomNode<R> {
public:
    AddNode(Dims dims, bool subtract = false)
        : detail::AtomNode<R>(subtract ? "sub" : "add", {dims, dims}, {dims}), sub_(subtract)
    {
    }
    bool holomorphic() const override { return true; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        if (sub_)
            md_sub2(this->outs_[0], out[0], out[0].strides(), in[0], in[0].strides(), in[1], in[1].strides());
        else
            md_add2(this->outs_[0], out[0], out[0].strides(), in[0], in[0].strides(), in[1], in[1].strides());
        this->bump_generation();
    }
    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = dx.clone();
        if (sub_ && i == 1)
            md_smul2(dy.dims(), dy, dy.strides(), dy, dy.strides(), std::complex<R>(-1));
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }

private:
    bool sub_;
};

/// x + broadcast(b); b dims are 1 on broadcast axes.
template<class R>
class BroadcastAddNode : public detail::AtomNode<R> {
public:
    BroadcastAddNode(Dims x_dims, Dims b_dims)
        : detail::AtomNode<R>("add_bcast", {x_dims, b_dims}, {x_dims})
    {
        if (x_dims.size() != b_dims.size())
            throw ShapeError("add_bcast: rank mismatch");
        for (size_t d = 0; d < x_dims.size(); d++)
            if (b_dims[d] != 1 && b_dims[d] != x_dims[d])
                throw ShapeError("add_bcast: dim " + std::to_string(d) + " not broadcastable");
    }
    bool holomorphic() const override { return true; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        out[0].copy_from(in[0]);
        accumulate(out[0], in[1]);
        this->bump_generation();
    }
    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        if (i == 0) {
            dy = dx.clone();
        } else {
            dy.clear();
            accumulate(dy, dx);
        }
    }
    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        if (i == 0) {
            dx = dy.clone();
        } else {
            dx.clear();
            Dims sb = bstrides(dx);
            auto one = MdArray<R>::scalar(std::complex<R>(1));
            md_fmac2(this->outs_[0], dx, sb, dy, dy.strides(), one, Dims(dy.rank(), 0));
        }
    }

private:
    Dims bstrides(const MdArray<R>& b) const
    {
        Dims sb = b.strides();
        for (size_t d = 0; d < sb.size(); d++)
            if (b.dims()[d] == 1)
                sb[d] = 0;
        return sb;
    }
    void accumulate(MdArray<R>& out, const MdArray<R>& b) const
    {
        auto one = MdArray<R>::scalar(std::complex<R>(1));
        md_fmac2(this->outs_[0], out, out.strides(), b, bstrides(b), one, Dims(out.rank(), 0));
    }
};

/// Replicate one input into n identical outputs; cotangents from all
/// consumers sum at the source.
template<class R>
class ForkNode : public detail::AtomNode<R> {
public:
    ForkNode(Dims dims, int n)
        : detail::AtomNode<R>("fork", {dims}, std::vector<Dims>(size_t(n), dims))
    {
    }
    bool holomorphic() const override { return true; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        for (auto& o : out)
            o.copy_from(in[0]);
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = dx.clone();
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = dy.clone();
    }
};

// ---------------------------------------------------------------------------
// R-linear atoms (C ~ R^2 maps that are not complex-linear)
// ---------------------------------------------------------------------------

/// Complex conjugation; DF(dx) = conj(dx), with Jacobian diag(1, -1).
template<class R>
class ZconjNode : public detail::AtomNode<R> {
public:
    explicit ZconjNode(Dims dims) : detail::AtomNode<R>("zconj", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        md_conj2(this->outs_[0], out[0], out[0].strides(), in[0], in[0].strides());
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        md_conj2(dx.dims(), dy, dy.strides(), dx, dx.strides());
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }
};

/// Real part as a real-valued output.
template<class R>
class ZrealNode : public detail::AtomNode<R> {
public:
    explicit ZrealNode(Dims dims) : detail::AtomNode<R>("zreal", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        take(out[0], in[0]);
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        take(dy, dx);
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }

private:
    void take(MdArray<R>& out, const MdArray<R>& in) const
    {
        md_zip(out, in, [](auto& y, const auto& x) { y = std::complex<R>(x.real(), 0); });
    }
};

/// Imaginary part as a real-valued output; adjoint embeds back as i*Re(dy).
template<class R>
class ZimagNode : public detail::AtomNode<R> {
public:
    explicit ZimagNode(Dims dims) : detail::AtomNode<R>("zimag", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        md_zip(out[0], in[0], [](auto& y, const auto& x) { y = std::complex<R>(x.imag(), 0); });
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        md_zip(dy, dx, [](auto& y, const auto& x) { y = std::complex<R>(x.imag(), 0); });
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(dy.dims());
        md_zip(dx, dy, [](auto& x, const auto& y) { x = std::complex<R>(0, y.real()); });
    }
};

/// Split a complex array into two real channels along `chan_dim` (size 1 in,
/// size 2 out). The adjoint recombines channel 0 + i * channel 1.
template<class R>
class RealChanNode : public detail::AtomNode<R> {
public:
    RealChanNode(Dims in_dims, int chan_dim)
        : detail::AtomNode<R>("real_chan", {in_dims}, {chan_out(in_dims, chan_dim)}), cd_(chan_dim)
    {
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        split(out[0], in[0]);
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(this->outs_[0]);
        split(dy, dx);
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(this->ins_[0]);
        join(dx, dy);
    }

    static Dims chan_out(Dims d, int chan_dim)
    {
        if (d.at(chan_dim) != 1)
            throw ShapeError("real_chan: channel dim must have size 1");
        d[chan_dim] = 2;
        return d;
    }

    void split(MdArray<R>& out, const MdArray<R>& in) const
    {
        auto re = out.slice(cd_, 0);
        auto im = out.slice(cd_, 1);
        detail::md_apply2(in.dims(), re, re.strides(), in, in.strides(),
                          [](auto& y, const auto& x) { y = std::complex<R>(x.real(), 0); });
        detail::md_apply2(in.dims(), im, im.strides(), in, in.strides(),
                          [](auto& y, const auto& x) { y = std::complex<R>(x.imag(), 0); });
    }
    void join(MdArray<R>& out, const MdArray<R>& in) const
    {
        auto re = in.slice(cd_, 0);
        auto im = in.slice(cd_, 1);
        detail::md_apply2(out.dims(), out, out.strides(), re, re.strides(),
                          [](auto& y, const auto& x) { y = std::complex<R>(x.real(), 0); });
        detail::md_apply2(out.dims(), out, out.strides(), im, im.strides(),
                          [](auto& y, const auto& x) { y += std::complex<R>(0, x.real()); });
    }

private:
    int cd_;
};

/// Recombine two real channels into one complex array; adjoint of RealChan.
template<class R>
class ChanCplxNode : public detail::AtomNode<R> {
public:
    ChanCplxNode(Dims in_dims, int chan_dim)
        : detail::AtomNode<R>("chan_cplx", {in_dims}, {chan_in(in_dims, chan_dim)}),
          pair_(chan_in(in_dims, chan_dim), chan_dim)
    {
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        pair_.join(out[0], in[0]);
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(this->outs_[0]);
        pair_.join(dy, dx);
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(this->ins_[0]);
        pair_.split(dx, dy);
    }

private:
    static Dims chan_in(Dims d, int chan_dim)
    {
        if (d.at(chan_dim) != 2)
            throw ShapeError("chan_cplx: channel dim must have size 2");
        d[chan_dim] = 1;
        return d;
    }
    RealChanNode<R> pair_;
};

// ---------------------------------------------------------------------------
// non-linear atoms
// ---------------------------------------------------------------------------

/// y = x^2 (holomorphic test op).
template<class R>
class SquareNode : public detail::AtomNode<R> {
public:
    explicit SquareNode(Dims dims) : detail::AtomNode<R>("square", {dims}, {dims}) {}
    bool holomorphic() const override { return true; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        md_mul2(this->outs_[0], out[0], out[0].strides(), in[0], in[0].strides(), in[0], in[0].strides());
        x_ = store ? in[0].clone() : MdArray<R>{};
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        md_mul2(dx.dims(), dy, dy.strides(), x_, x_.strides(), dx, dx.strides());
        md_smul2(dy.dims(), dy, dy.strides(), dy, dy.strides(), std::complex<R>(2));
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(dy.dims());
        md_zfmacc2(dy.dims(), dx, dx.strides(), dy, dy.strides(), x_, x_.strides());
        md_smul2(dx.dims(), dx, dx.strides(), dx, dx.strides(), std::complex<R>(2));
    }

private:
    MdArray<R> x_;
};

/// CReLU: relu(Re x) + i relu(Im x), applied componentwise.
template<class R>
class CReluNode : public detail::AtomNode<R> {
public:
    explicit CReluNode(Dims dims) : detail::AtomNode<R>("crelu", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        md_zip(out[0], in[0], [](auto& y, const auto& x) {
            y = std::complex<R>(x.real() > 0 ? x.real() : 0, x.imag() > 0 ? x.imag() : 0);
        });
        x_ = store ? in[0].clone() : MdArray<R>{};
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = dx.clone();
        md_zip(dy, x_, [](auto& d, const auto& x) {
            d = std::complex<R>(x.real() > 0 ? d.real() : 0, x.imag() > 0 ? d.imag() : 0);
        });
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }

private:
    MdArray<R> x_;
};

/// Complex cardioid: (1 + cos(arg z)) z / 2, with 0 -> 0.
/// Wirtinger derivatives: dF/dz = (1+cos p)/2 + i sin(p)/4,
/// dF/dz. = -(i/4) e^{2ip} sin p, where p = arg z.
template<class R>
class CardioidNode : public detail::AtomNode<R> {
public:
    explicit CardioidNode(Dims dims) : detail::AtomNode<R>("cardioid", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        md_zip(out[0], in[0], [](auto& y, const auto& x) {
            if (x == std::complex<R>(0)) {
                y = 0;
                return;
            }
            R p = std::arg(x);
            y = x * (R(0.5) * (R(1) + std::cos(p)));
        });
        x_ = store ? in[0].clone() : MdArray<R>{};
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        apply_w(dy, dx, false);
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(dy.dims());
        apply_w(dx, dy, true);
    }

private:
    void apply_w(MdArray<R>& out, const MdArray<R>& d, bool adj)
    {
        auto dc = d.clone();
        const auto* xs = x_.data();
        const auto* dv = dc.data();
        auto* ov = out.data();
        for (long k = 0; k < x_.size(); k++) {
            auto x = xs[k];
            if (x == std::complex<R>(0)) {
                ov[k] = 0;
                continue;
            }
            R p = std::arg(x);
            std::complex<R> u(R(0.5) * (R(1) + std::cos(p)), R(0.25) * std::sin(p));
            std::complex<R> e2ip = std::polar(R(1), 2 * p);
            std::complex<R> v = std::complex<R>(0, R(-0.25)) * e2ip * std::sin(p);
            // DF(d) = u d + v conj(d); DF^H(d) = conj(u) d + v conj(d)
            ov[k] = (adj ? std::conj(u) : u) * dv[k] + v * std::conj(dv[k]);
        }
    }

    MdArray<R> x_;
};

/// Logistic sigmoid of the real part; output is real-valued.
template<class R>
class SigmoidNode : public detail::AtomNode<R> {
public:
    explicit SigmoidNode(Dims dims) : detail::AtomNode<R>("sigmoid", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        md_zip(out[0], in[0], [](auto& y, const auto& x) {
            y = std::complex<R>(R(1) / (R(1) + std::exp(-x.real())), 0);
        });
        y_ = store ? out[0].clone() : MdArray<R>{};
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        auto dc = dx.clone();
        dy = MdArray<R>(dx.dims());
        const auto* ys = y_.data();
        const auto* dv = dc.data();
        auto* ov = dy.data();
        for (long k = 0; k < y_.size(); k++) {
            R s = ys[k].real();
            ov[k] = std::complex<R>(s * (1 - s) * dv[k].real(), 0);
        }
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }

private:
    MdArray<R> y_;
};

/// Softmax of the real part along `class_dim`; real-valued output summing to
/// one over the class axis.
template<class R>
class SoftmaxNode : public detail::AtomNode<R> {
public:
    SoftmaxNode(Dims dims, int class_dim)
        : detail::AtomNode<R>("softmax", {dims}, {dims}), cd_(class_dim)
    {
        if (class_dim < 0 || class_dim >= int(dims.size()))
            throw ConfigError("softmax: class axis out of range");
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        auto xc = in[0].clone();
        auto yc = MdArray<R>(this->outs_[0]);
        const long n = this->ins_[0][cd_];
        const long s = default_strides(this->ins_[0])[cd_];
        const auto* xv = xc.data();
        auto* yv = yc.data();
        for_each_line(this->ins_[0], [&](long base) {
            R mx = xv[base].real();
            for (long k = 1; k < n; k++)
                mx = std::max(mx, xv[base + k * s].real());
            R sum = 0;
            for (long k = 0; k < n; k++)
                sum += std::exp(xv[base + k * s].real() - mx);
            for (long k = 0; k < n; k++) {
                R e = std::exp(xv[base + k * s].real() - mx);
                yv[base + k * s] = std::complex<R>(e / sum, 0);
            }
        });
        out[0].copy_from(yc);
        y_ = store ? std::move(yc) : MdArray<R>{};
        this->bump_generation();
    }

    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        jac(dy, dx);
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(dy.dims());
        jac(dx, dy); // real Jacobian is symmetric
    }

private:
    // enumerate offsets of class-axis lines; arrays here share default strides
    template<class F>
    void for_each_line(const Dims& dims, F f) const
    {
        Dims idx(dims.size(), 0);
        Dims str = default_strides(dims);
        long off = 0;
        for (;;) {
            f(off);
            int d = 0;
            for (; d < int(dims.size()); d++) {
                if (d == cd_)
                    continue;
                off += str[d];
                if (++idx[d] < dims[d])
                    break;
                off -= dims[d] * str[d];
                idx[d] = 0;
            }
            if (d == int(dims.size()))
                return;
        }
    }

    void jac(MdArray<R>& out, const MdArray<R>& d) const
    {
        auto dc = d.clone();
        auto oc = MdArray<R>(out.dims());
        const long n = this->ins_[0][cd_];
        const long s = default_strides(this->ins_[0])[cd_];
        const auto* yv = y_.data();
        const auto* dv = dc.data();
        auto* ov = oc.data();
        for_each_line(this->ins_[0], [&](long base) {
            R dot = 0;
            for (long k = 0; k < n; k++)
                dot += yv[base + k * s].real() * dv[base + k * s].real();
            for (long k = 0; k < n; k++) {
                R yk = yv[base + k * s].real();
                ov[base + k * s] = std::complex<R>(yk * (dv[base + k * s].real() - dot), 0);
            }
        });
        out.copy_from(oc);
    }

    int cd_;
    MdArray<R> y_;
};

/// exp(Re x) as a real-valued output (used to keep trainable scalars
/// positive).
template<class R>
class ExpRealNode : public detail::AtomNode<R> {
public:
    explicit ExpRealNode(Dims dims) : detail::AtomNode<R>("exp_real", {dims}, {dims}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        md_zip(out[0], in[0], [](auto& y, const auto& x) { y = std::complex<R>(std::exp(x.real()), 0); });
        y_ = store ? out[0].clone() : MdArray<R>{};
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        auto dc = dx.clone();
        dy = MdArray<R>(dx.dims());
        const auto* ys = y_.data();
        const auto* dv = dc.data();
        auto* ov = dy.data();
        for (long k = 0; k < y_.size(); k++)
            ov[k] = std::complex<R>(ys[k].real() * dv[k].real(), 0);
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }

private:
    MdArray<R> y_;
};

/// Max-magnitude pooling with per-dim window sizes (must divide the input);
/// the adjoint routes each cotangent to the argmax position. Ties pick the
/// lowest linear index.
template<class R>
class MaxPoolNode : public detail::AtomNode<R> {
public:
    MaxPoolNode(Dims in_dims, Dims window)
        : detail::AtomNode<R>("maxpool", {in_dims}, {pooled(in_dims, window)}), win_(std::move(window))
    {
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        const auto& id = this->ins_[0];
        const auto& od = this->outs_[0];
        Dims is = default_strides(id), os = default_strides(od);
        auto xc = in[0].clone();
        const auto* xv = xc.data();
        auto* yv = out[0].data();
        arg_.assign(md_size(od), 0);

        Dims oidx(od.size(), 0);
        long oo = 0;
        for (;;) {
            // scan the window
            Dims widx(id.size(), 0);
            long best_off = -1;
            R best = -1;
            for (;;) {
                long xo = 0;
                for (size_t d = 0; d < id.size(); d++)
                    xo += (oidx[d] * win_[d] + widx[d]) * is[d];
                R mag = std::abs(xv[xo]);
                if (mag > best) {
                    best = mag;
                    best_off = xo;
                }
                size_t d = 0;
                for (; d < id.size(); d++) {
                    if (++widx[d] < win_[d])
                        break;
                    widx[d] = 0;
                }
                if (d == id.size())
                    break;
            }
            yv[oo] = xv[best_off];
            arg_[oo] = best_off;

            size_t d = 0;
            for (; d < od.size(); d++) {
                oo += os[d];
                if (++oidx[d] < od[d])
                    break;
                oo -= od[d] * os[d];
                oidx[d] = 0;
            }
            if (d == od.size())
                break;
        }
        this->bump_generation();
    }

    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        auto dc = dx.clone();
        dy = MdArray<R>(this->outs_[0]);
        for (long o = 0; o < long(arg_.size()); o++)
            dy.data()[o] = dc.data()[arg_[o]];
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        auto dc = dy.clone();
        dx = MdArray<R>(this->ins_[0]);
        for (long o = 0; o < long(arg_.size()); o++)
            dx.data()[arg_[o]] = dc.data()[o];
    }

private:
    static Dims pooled(const Dims& in, const Dims& win)
    {
        if (in.size() != win.size())
            throw ShapeError("maxpool: window rank mismatch");
        Dims out(in.size());
        for (size_t d = 0; d < in.size(); d++) {
            if (win[d] < 1 || in[d] % win[d] != 0)
                throw ShapeError("maxpool: window must divide input on dim " + std::to_string(d));
            out[d] = in[d] / win[d];
        }
        return out;
    }

    Dims win_;
    std::vector<long> arg_;
};

/// Dropout with a counter-based mask keyed by (seed, layer id, step); train
/// mode zeroes with probability `rate` and scales survivors by 1/(1-rate).
template<class R>
class DropoutNode : public detail::AtomNode<R> {
public:
    DropoutNode(Dims dims, double rate, uint64_t seed, uint64_t layer_id, bool train)
        : detail::AtomNode<R>("dropout", {dims}, {dims}), rate_(rate),
          key_(hash_rand(seed, layer_id ^ 0xd509f0u)), train_(train)
    {
        if (rate < 0 || rate >= 1)
            throw ConfigError("dropout: rate must be in [0, 1)");
    }

    bool has_rng() const override { return true; }
    uint64_t rng_counter() const override { return step_; }
    void set_rng_counter(uint64_t c) override { step_ = c; }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool) override
    {
        if (!train_ || rate_ == 0) {
            out[0].copy_from(in[0]);
            mask_.assign(md_size(this->ins_[0]), 1);
            if (train_)
                step_++;
            this->bump_generation();
            return;
        }
        const long n = md_size(this->ins_[0]);
        mask_.resize(n);
        const uint64_t thresh = uint64_t(rate_ * 0x1p64);
        for (long k = 0; k < n; k++)
            mask_[k] = hash_rand(key_, step_ * uint64_t(n) + uint64_t(k)) >= thresh;
        step_++;
        apply_mask(out[0], in[0]);
        this->bump_generation();
    }

    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(dx.dims());
        apply_mask(dy, dx);
    }
    void adjoint(int o, int i, const MdArray<R>& dy, MdArray<R>& dx) override { deriv(o, i, dy, dx); }

private:
    void apply_mask(MdArray<R>& out, const MdArray<R>& in) const
    {
        if (!train_ || rate_ == 0) {
            out.copy_from(in);
            return;
        }
        const R scale = R(1.0 / (1.0 - rate_));
        auto ic = in.clone();
        auto oc = MdArray<R>(out.dims());
        const auto* iv = ic.data();
        auto* ov = oc.data();
        for (long k = 0; k < long(mask_.size()); k++)
            ov[k] = mask_[k] ? iv[k] * scale : std::complex<R>(0);
        out.copy_from(oc);
    }

    double rate_;
    uint64_t key_;
    bool train_;
    uint64_t step_ = 0;
    std::vector<uint8_t> mask_;
};

// ---------------------------------------------------------------------------
// losses (real scalar outputs)
// ---------------------------------------------------------------------------

enum class LossKind { Mse, Mad, Cce };

/// Mean squared error (1/n) sum |p - r|^2 over all elements.
template<class R>
class MseNode : public detail::AtomNode<R> {
public:
    explicit MseNode(Dims dims) : detail::AtomNode<R>("mse", {dims, dims}, {Dims{1}}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        diff_ = MdArray<R>(this->ins_[0]);
        md_sub2(diff_.dims(), diff_, diff_.strides(), in[0], in[0].strides(), in[1], in[1].strides());
        double acc = 0;
        md_foreach(diff_, [&](auto& v) { acc += std::norm(std::complex<double>(v.real(), v.imag())); });
        out[0].data()[0] = std::complex<R>(R(acc / double(md_size(this->ins_[0]))), 0);
        if (!store)
            diff_ = {};
        this->bump_generation();
    }
    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        auto z = md_zdot(dx, diff_);
        R v = R(2) / R(md_size(this->ins_[0])) * z.real();
        dy = MdArray<R>::scalar(std::complex<R>(i == 0 ? v : -v, 0));
    }
    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        R f = R(2) / R(md_size(this->ins_[0])) * dy.data()[0].real() * (i == 0 ? R(1) : R(-1));
        dx = MdArray<R>(this->ins_[0]);
        md_smul2(dx.dims(), dx, dx.strides(), diff_, diff_.strides(), std::complex<R>(f, 0));
    }

private:
    MdArray<R> diff_;
};

/// Mean absolute difference (1/n) sum |p - r|.
template<class R>
class MadNode : public detail::AtomNode<R> {
public:
    explicit MadNode(Dims dims) : detail::AtomNode<R>("mad", {dims, dims}, {Dims{1}}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        diff_ = MdArray<R>(this->ins_[0]);
        md_sub2(diff_.dims(), diff_, diff_.strides(), in[0], in[0].strides(), in[1], in[1].strides());
        double acc = 0;
        md_foreach(diff_, [&](auto& v) { acc += std::abs(std::complex<double>(v.real(), v.imag())); });
        out[0].data()[0] = std::complex<R>(R(acc / double(md_size(this->ins_[0]))), 0);
        if (!store)
            diff_ = {};
        this->bump_generation();
    }
    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        // d|u| = Re(du conj(u)) / |u|
        double acc = 0;
        auto dc = dx.clone();
        const auto* dv = dc.data();
        const auto* uv = diff_.data();
        for (long k = 0; k < md_size(dx.dims()); k++) {
            R m = std::abs(uv[k]);
            if (m > 0)
                acc += (dv[k] * std::conj(uv[k])).real() / m;
        }
        R v = R(acc / double(md_size(this->ins_[0])));
        dy = MdArray<R>::scalar(std::complex<R>(i == 0 ? v : -v, 0));
    }
    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        R f = dy.data()[0].real() / R(md_size(this->ins_[0])) * (i == 0 ? R(1) : R(-1));
        dx = MdArray<R>(this->ins_[0]);
        auto* xv = dx.data();
        const auto* uv = diff_.data();
        for (long k = 0; k < md_size(dx.dims()); k++) {
            R m = std::abs(uv[k]);
            xv[k] = m > 0 ? uv[k] / m * f : std::complex<R>(0);
        }
    }

private:
    MdArray<R> diff_;
};

/// Categorical cross-entropy -(1/n_pos) sum ref * log(pred) with pred taken
/// from the real part and clamped at 1e-12; n_pos counts class-axis lines.
template<class R>
class CceNode : public detail::AtomNode<R> {
public:
    CceNode(Dims dims, int class_dim)
        : detail::AtomNode<R>("cce", {dims, dims}, {Dims{1}}), cd_(class_dim)
    {
        norm_ = R(md_size(dims) / dims.at(class_dim));
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        p_ = in[0].clone();
        r_ = in[1].clone();
        double acc = 0;
        const auto* pv = p_.data();
        const auto* rv = r_.data();
        for (long k = 0; k < p_.size(); k++)
            acc -= rv[k].real() * std::log(clamped(pv[k].real()));
        out[0].data()[0] = std::complex<R>(R(acc) / norm_, 0);
        if (!store) {
            p_ = {};
            r_ = {};
        }
        this->bump_generation();
    }
    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        auto dc = dx.clone();
        const auto* dv = dc.data();
        const auto* pv = p_.data();
        const auto* rv = r_.data();
        double acc = 0;
        for (long k = 0; k < p_.size(); k++) {
            if (i == 0)
                acc -= pv[k].real() > eps_ ? rv[k].real() / pv[k].real() * dv[k].real() : 0;
            else
                acc -= std::log(clamped(pv[k].real())) * dv[k].real();
        }
        dy = MdArray<R>::scalar(std::complex<R>(R(acc) / norm_, 0));
    }
    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        R g = dy.data()[0].real() / norm_;
        dx = MdArray<R>(this->ins_[0]);
        auto* xv = dx.data();
        const auto* pv = p_.data();
        const auto* rv = r_.data();
        for (long k = 0; k < p_.size(); k++) {
            if (i == 0)
                xv[k] = std::complex<R>(pv[k].real() > eps_ ? -rv[k].real() / pv[k].real() * g : 0, 0);
            else
                xv[k] = std::complex<R>(-std::log(clamped(pv[k].real())) * g, 0);
        }
    }

private:
    static constexpr R eps_ = R(1e-12);
    R clamped(R v) const { return v > eps_ ? v : eps_; }
    int cd_;
    R norm_;
    MdArray<R> p_, r_;
};

/// Sum of squared magnitudes sum |x|^2; gradient is 2x.
template<class R>
class ZssNode : public detail::AtomNode<R> {
public:
    explicit ZssNode(Dims dims) : detail::AtomNode<R>("zss", {dims}, {Dims{1}}) {}

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        double acc = 0;
        auto xc = in[0].clone();
        md_foreach(xc, [&](auto& v) { acc += std::norm(std::complex<double>(v.real(), v.imag())); });
        out[0].data()[0] = std::complex<R>(R(acc), 0);
        x_ = store ? std::move(xc) : MdArray<R>{};
        this->bump_generation();
    }
    void deriv(int, int, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        auto z = md_zdot(dx, x_);
        dy = MdArray<R>::scalar(std::complex<R>(2 * z.real(), 0));
    }
    void adjoint(int, int, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        dx = MdArray<R>(this->ins_[0]);
        md_smul2(dx.dims(), dx, dx.strides(), x_, x_.strides(), std::complex<R>(2 * dy.data()[0].real(), 0));
    }

private:
    MdArray<R> x_;
};

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Pre-affine batch normalization over the axes selected by `norm_flags`
/// (statistics are shared across those axes and kept per remaining feature).
/// Train mode normalizes with batch statistics and emits updated moving
/// statistics as extra outputs: stat' = (1-momentum) stat + momentum batch.
/// Inference mode normalizes with the moving statistics inputs.
///
/// Inputs: (x, moving_mean, moving_var); outputs train: (y, mean', var'),
/// infer: (y). The variance is the biased batch estimate E|x - mu|^2.
template<class R>
class BatchNormNode : public detail::AtomNode<R> {
public:
    BatchNormNode(Dims dims, unsigned long norm_flags, bool train,
                  double epsilon = 1e-5, double momentum = 0.1)
        : detail::AtomNode<R>("batchnorm",
                              {dims, stat_dims(dims, norm_flags), stat_dims(dims, norm_flags)},
                              train ? std::vector<Dims>{dims, stat_dims(dims, norm_flags), stat_dims(dims, norm_flags)}
                                    : std::vector<Dims>{dims}),
          flags_(norm_flags), train_(train), eps_(R(epsilon)), mom_(R(momentum))
    {
        m_ = R(1);
        for (size_t d = 0; d < dims.size(); d++)
            if (flags_ & (1UL << d))
                m_ *= R(dims[d]);
        sdims_ = stat_dims(dims, norm_flags);
        sstr_bcast_ = default_strides(sdims_);
        for (size_t d = 0; d < dims.size(); d++)
            if (flags_ & (1UL << d))
                sstr_bcast_[d] = 0;
    }

    bool zero_deriv(int o, int i) const override
    {
        if (!train_)
            return false;
        // y does not depend on the moving statistics in train mode, and the
        // emitted mean'/var' do not mix with each other's inputs
        if (o == 0)
            return i != 0;
        if (o == 1)
            return i == 2;
        return i == 1;
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        const Dims& xd = this->ins_[0];
        if (train_) {
            // batch statistics
            MdArray<R> mu(sdims_), var(sdims_);
            auto one = MdArray<R>::scalar(std::complex<R>(1));
            md_fmac2(xd, mu, sstr_bcast_, in[0], in[0].strides(), one, Dims(xd.size(), 0));
            md_smul2(sdims_, mu, mu.strides(), mu, mu.strides(), std::complex<R>(R(1) / m_, 0));

            MdArray<R> u(xd);
            md_sub2(xd, u, u.strides(), in[0], in[0].strides(), mu, sstr_bcast_);
            md_zfmacc2(xd, var, sstr_bcast_, u, u.strides(), u, u.strides());
            md_smul2(sdims_, var, var.strides(), var, var.strides(), std::complex<R>(R(1) / m_, 0));

            MdArray<R> istd(sdims_);
            md_zip(istd, var, [this](auto& s, const auto& v) {
                s = std::complex<R>(R(1) / std::sqrt(v.real() + eps_), 0);
            });
            md_mul2(xd, out[0], out[0].strides(), u, u.strides(), istd, sstr_bcast_);

            // moving statistics update
            md_zip(out[1], mu, [this](auto& y, const auto& b) { y = mom_ * b; });
            md_axpy(out[1], std::complex<R>(1 - mom_, 0), in[1]);
            md_zip(out[2], var, [this](auto& y, const auto& b) { y = mom_ * b; });
            md_axpy(out[2], std::complex<R>(1 - mom_, 0), in[2]);

            if (store) {
                u_ = std::move(u);
                istd_ = std::move(istd);
            } else {
                u_ = {};
                istd_ = {};
            }
        } else {
            MdArray<R> istd(sdims_);
            md_zip(istd, in[2], [this](auto& s, const auto& v) {
                s = std::complex<R>(R(1) / std::sqrt(v.real() + eps_), 0);
            });
            MdArray<R> u(xd);
            md_sub2(xd, u, u.strides(), in[0], in[0].strides(), in[1], sstr_bcast_);
            md_mul2(xd, out[0], out[0].strides(), u, u.strides(), istd, sstr_bcast_);
            if (store) {
                u_ = std::move(u);
                istd_ = std::move(istd);
            } else {
                u_ = {};
                istd_ = {};
            }
        }
        this->bump_generation();
    }

    void deriv(int o, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        const Dims& xd = this->ins_[0];
        auto one = MdArray<R>::scalar(std::complex<R>(1));

        if (!train_) {
            dy = MdArray<R>(xd);
            if (i == 0) {
                md_mul2(xd, dy, dy.strides(), dx, dx.strides(), istd_, sstr_bcast_);
            } else if (i == 1) {
                md_mul2(xd, dy, dy.strides(), dx, sstr_bcast_, istd_, sstr_bcast_);
                md_smul2(xd, dy, dy.strides(), dy, dy.strides(), std::complex<R>(-1));
            } else {
                // dy = -u * istd^3 * Re(dvar) / 2
                MdArray<R> f(sdims_);
                md_zip(f, istd_, [](auto& a, const auto& s) { a = s * s * s; });
                md_zip(f, dx, [](auto& a, const auto& d) { a *= std::complex<R>(-d.real() / 2, 0); });
                md_mul2(xd, dy, dy.strides(), u_, u_.strides(), f, sstr_bcast_);
            }
            return;
        }

        if (o == 0) { // normalized output w.r.t. x
            // dmu = mean(dx); dv = (2/m) Re sum dx conj(u)
            MdArray<R> dmu(sdims_), dv(sdims_);
            md_fmac2(xd, dmu, sstr_bcast_, dx, dx.strides(), one, Dims(xd.size(), 0));
            md_smul2(sdims_, dmu, dmu.strides(), dmu, dmu.strides(), std::complex<R>(R(1) / m_, 0));
            md_zfmacc2(xd, dv, sstr_bcast_, dx, dx.strides(), u_, u_.strides());
            md_zip(dv, dv, [this](auto& a, const auto&) { a = std::complex<R>(2 * a.real() / m_, 0); });

            dy = MdArray<R>(xd);
            md_sub2(xd, dy, dy.strides(), dx, dx.strides(), dmu, sstr_bcast_);
            md_mul2(xd, dy, dy.strides(), dy, dy.strides(), istd_, sstr_bcast_);
            MdArray<R> f(sdims_);
            md_zip(f, istd_, [](auto& a, const auto& s) { a = s * s * s; });
            md_zip(f, dv, [](auto& a, const auto& d) { a *= std::complex<R>(-d.real() / 2, 0); });
            MdArray<R> corr(xd);
            md_mul2(xd, corr, corr.strides(), u_, u_.strides(), f, sstr_bcast_);
            md_axpy(dy, std::complex<R>(1), corr);
            return;
        }

        // moving-statistics outputs
        dy = MdArray<R>(sdims_);
        if (i != 0) { // w.r.t. own moving input
            md_smul2(sdims_, dy, dy.strides(), dx, dx.strides(), std::complex<R>(1 - mom_, 0));
            return;
        }
        if (o == 1) { // mean' w.r.t. x
            md_fmac2(xd, dy, sstr_bcast_, dx, dx.strides(), one, Dims(xd.size(), 0));
            md_smul2(sdims_, dy, dy.strides(), dy, dy.strides(), std::complex<R>(mom_ / m_, 0));
        } else { // var' w.r.t. x
            md_zfmacc2(xd, dy, sstr_bcast_, dx, dx.strides(), u_, u_.strides());
            md_zip(dy, dy, [this](auto& a, const auto&) {
                a = std::complex<R>(mom_ * 2 * a.real() / m_, 0);
            });
        }
    }

    void adjoint(int o, int i, const MdArray<R>& g, MdArray<R>& dx) override
    {
        this->require_forward();
        const Dims& xd = this->ins_[0];
        auto one = MdArray<R>::scalar(std::complex<R>(1));

        if (!train_) {
            if (i == 0) {
                dx = MdArray<R>(xd);
                md_mul2(xd, dx, dx.strides(), g, g.strides(), istd_, sstr_bcast_);
            } else if (i == 1) {
                dx = MdArray<R>(sdims_);
                md_fmac2(xd, dx, sstr_bcast_, g, g.strides(), one, Dims(xd.size(), 0));
                md_zip(dx, istd_, [](auto& a, const auto& s) { a *= -s; });
            } else {
                // dvar = -Re(sum conj(u) g) istd^3 / 2 (real)
                dx = MdArray<R>(sdims_);
                md_zfmacc2(xd, dx, sstr_bcast_, g, g.strides(), u_, u_.strides());
                long flat = 0;
                const auto* sv = istd_.data();
                md_foreach(dx, [&](auto& a) {
                    R s = sv[flat++].real();
                    a = std::complex<R>(-a.real() * s * s * s / 2, 0);
                });
            }
            return;
        }

        if (o == 0) {
            if (i != 0)
                throw StaleDerivativeError("batchnorm: structurally zero adjoint requested");
            // dx_j = g_j/s - mean(g)/s - u_j Re(sum g conj(u)) istd^3 / m
            MdArray<R> gm(sdims_), p(sdims_);
            md_fmac2(xd, gm, sstr_bcast_, g, g.strides(), one, Dims(xd.size(), 0));
            md_smul2(sdims_, gm, gm.strides(), gm, gm.strides(), std::complex<R>(R(1) / m_, 0));
            md_zfmacc2(xd, p, sstr_bcast_, g, g.strides(), u_, u_.strides());

            dx = MdArray<R>(xd);
            md_sub2(xd, dx, dx.strides(), g, g.strides(), gm, sstr_bcast_);
            md_mul2(xd, dx, dx.strides(), dx, dx.strides(), istd_, sstr_bcast_);

            MdArray<R> f(sdims_);
            md_zip(f, istd_, [](auto& a, const auto& s) { a = s * s * s; });
            md_zip(f, p, [this](auto& a, const auto& pv) { a *= std::complex<R>(-pv.real() / m_, 0); });
            MdArray<R> corr(xd);
            md_mul2(xd, corr, corr.strides(), u_, u_.strides(), f, sstr_bcast_);
            md_axpy(dx, std::complex<R>(1), corr);
            return;
        }

        if (i != 0) {
            dx = MdArray<R>(sdims_);
            md_smul2(sdims_, dx, dx.strides(), g, g.strides(), std::complex<R>(1 - mom_, 0));
            return;
        }
        dx = MdArray<R>(xd);
        if (o == 1) {
            md_smul2(xd, dx, dx.strides(), g, sstr_bcast_, std::complex<R>(mom_ / m_, 0));
        } else {
            MdArray<R> f(sdims_);
            md_zip(f, g, [this](auto& a, const auto& gv) {
                a = std::complex<R>(mom_ * 2 * gv.real() / m_, 0);
            });
            md_mul2(xd, dx, dx.strides(), u_, u_.strides(), f, sstr_bcast_);
        }
    }

    static Dims stat_dims(Dims dims, unsigned long flags)
    {
        for (size_t d = 0; d < dims.size(); d++)
            if (flags & (1UL << d))
                dims[d] = 1;
        return dims;
    }

private:
    unsigned long flags_;
    bool train_;
    R eps_, mom_, m_;
    Dims sdims_, sstr_bcast_;
    MdArray<R> u_, istd_;
};

// ---------------------------------------------------------------------------
// Gaussian radial basis activation
// ---------------------------------------------------------------------------

/// phi(z)_k = sum_j w[f,j] exp(-(z_k - mu_j)^2 / (2 sigma^2)) acting on the
/// real part (z is real-valued in use); differentiable in both z and w.
/// w dims are [n_filters, n_w]; `filter_dim` locates the filter axis in z.
template<class R>
class RbfNode : public detail::AtomNode<R> {
public:
    RbfNode(Dims z_dims, int filter_dim, std::vector<R> centers, R sigma)
        : detail::AtomNode<R>("rbf", {z_dims, Dims{z_dims.at(filter_dim), long(centers.size())}}, {z_dims}),
          fd_(filter_dim), mu_(std::move(centers)), sigma_(sigma)
    {
        if (!(sigma > 0))
            throw ConfigError("rbf: width must be positive");
        for (size_t j = 1; j < mu_.size(); j++)
            if (!(mu_[j] > mu_[j - 1]))
                throw ConfigError("rbf: centers must be strictly increasing");
    }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        z_ = in[0].clone();
        w_ = in[1].clone();
        const long nw = long(mu_.size());
        const long nf = this->ins_[1][0];
        const auto* wv = w_.data();
        visit([&](long k, long f, R zk, std::complex<R>* yv) {
            R acc = 0;
            for (long j = 0; j < nw; j++)
                acc += wv[f + j * nf].real() * gauss(zk, mu_[j]);
            yv[k] = std::complex<R>(acc, 0);
        }, out[0].data());
        if (!store) {
            z_ = {};
            w_ = {};
        }
        this->bump_generation();
    }

    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        dy = MdArray<R>(this->outs_[0]);
        auto dc = dx.clone();
        const long nw = long(mu_.size());
        const long nf = this->ins_[1][0];
        const auto* wv = w_.data();
        const auto* dv = dc.data();
        visit([&](long k, long f, R zk, std::complex<R>* yv) {
            R acc = 0;
            for (long j = 0; j < nw; j++) {
                R e = gauss(zk, mu_[j]);
                if (i == 0)
                    acc += wv[f + j * nf].real() * e * (-(zk - mu_[j]) / (sigma_ * sigma_));
                else
                    acc += dv[f + j * nf].real() * e;
            }
            if (i == 0)
                acc *= dv[k].real();
            yv[k] = std::complex<R>(acc, 0);
        }, dy.data());
    }

    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        auto gc = dy.clone();
        const auto* gv = gc.data();
        const long nw = long(mu_.size());
        const long nf = this->ins_[1][0];
        const auto* wv = w_.data();
        if (i == 0) {
            dx = MdArray<R>(this->ins_[0]);
            visit([&](long k, long f, R zk, std::complex<R>* xv) {
                R acc = 0;
                for (long j = 0; j < nw; j++)
                    acc += wv[f + j * nf].real() * gauss(zk, mu_[j]) * (-(zk - mu_[j]) / (sigma_ * sigma_));
                xv[k] = std::complex<R>(acc * gv[k].real(), 0);
            }, dx.data());
        } else {
            dx = MdArray<R>(this->ins_[1]);
            auto* xv = dx.data();
            visit([&](long k, long f, R zk, std::complex<R>*) {
                R g = gv[k].real();
                for (long j = 0; j < nw; j++)
                    xv[f + j * nf] += std::complex<R>(gauss(zk, mu_[j]) * g, 0);
            }, nullptr);
        }
    }

private:
    R gauss(R z, R mu) const
    {
        R d = (z - mu) / sigma_;
        return std::exp(-d * d / 2);
    }

    /// Visit every z element with its flat index and filter coordinate.
    template<class F>
    void visit(F f, std::complex<R>* target)
    {
        const Dims& zd = this->ins_[0];
        Dims str = default_strides(zd);
        const auto* zv = z_.data();
        Dims idx(zd.size(), 0);
        long off = 0;
        for (;;) {
            f(off, idx[fd_], zv[off].real(), target);
            size_t d = 0;
            for (; d < zd.size(); d++) {
                off += str[d];
                if (++idx[d] < zd[d])
                    break;
                off -= zd[d] * str[d];
                idx[d] = 0;
            }
            if (d == zd.size())
                break;
        }
    }

    int fd_;
    std::vector<R> mu_;
    R sigma_;
    MdArray<R> z_, w_;
};

// ---------------------------------------------------------------------------
// factories
// ---------------------------------------------------------------------------

template<class R>
Nlop<R> nlop_from_linop(Linop<R> a, std::string name = "linop")
{
    return Nlop<R>(std::make_shared<LinopNode<R>>(std::move(a), std::move(name)));
}

/// Elementwise multiplication nlop on matching shapes.
template<class R>
Nlop<R> nlop_mul(Dims dims)
{
    Dims str = default_strides(dims);
    return Nlop<R>(std::make_shared<TenMulNode<R>>("mul", dims, dims, str, dims, str, dims, str));
}

template<class R>
Nlop<R> nlop_add(Dims dims, bool subtract = false)
{
    return Nlop<R>(std::make_shared<AddNode<R>>(std::move(dims), subtract));
}

template<class R>
Nlop<R> nlop_zconj(Dims dims) { return Nlop<R>(std::make_shared<ZconjNode<R>>(std::move(dims))); }

template<class R>
Nlop<R> nlop_zreal(Dims dims) { return Nlop<R>(std::make_shared<ZrealNode<R>>(std::move(dims))); }

template<class R>
Nlop<R> nlop_square(Dims dims) { return Nlop<R>(std::make_shared<SquareNode<R>>(std::move(dims))); }

template<class R>
Nlop<R> nlop_activation(const std::string& kind, Dims dims, int class_dim = -1)
{
    if (kind == "crelu")
        return Nlop<R>(std::make_shared<CReluNode<R>>(std::move(dims)));
    if (kind == "cardioid")
        return Nlop<R>(std::make_shared<CardioidNode<R>>(std::move(dims)));
    if (kind == "sigmoid")
        return Nlop<R>(std::make_shared<SigmoidNode<R>>(std::move(dims)));
    if (kind == "softmax")
        return Nlop<R>(std::make_shared<SoftmaxNode<R>>(std::move(dims), class_dim));
    throw ConfigError("unknown activation: " + kind);
}

template<class R>
Nlop<R> nlop_loss(LossKind kind, Dims dims, int class_dim = -1)
{
    switch (kind) {
    case LossKind::Mse: return Nlop<R>(std::make_shared<MseNode<R>>(std::move(dims)));
    case LossKind::Mad: return Nlop<R>(std::make_shared<MadNode<R>>(std::move(dims)));
    case LossKind::Cce: return Nlop<R>(std::make_shared<CceNode<R>>(std::move(dims), class_dim));
    }
    throw ConfigError("unknown loss");
}

} // namespace mdnn
