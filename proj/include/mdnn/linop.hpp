#pragma once

#include <functional>

#include "fft.hpp"
#include "mdarray.hpp"

namespace mdnn {

/// Linear operator bundling a forward map, its adjoint and optionally the
/// normal map A^H A. Adjointness is with respect to the complex inner
/// product <x,y> = sum x conj(y).
template<class R>
class Linop {
public:
    using Fn = std::function<MdArray<R>(const MdArray<R>&)>;

    Linop() = default;
    Linop(Dims in, Dims out, Fn fwd, Fn adj, Fn normal = nullptr)
        : in_dims_(std::move(in)), out_dims_(std::move(out)),
          fwd_(std::move(fwd)), adj_(std::move(adj)), normal_(std::move(normal))
    {
    }

    const Dims& in_dims() const { return in_dims_; }
    const Dims& out_dims() const { return out_dims_; }
    bool valid() const { return bool(fwd_); }

    MdArray<R> forward(const MdArray<R>& x) const
    {
        if (x.dims() != in_dims_)
            throw ShapeError("linop forward: expected " + dims_to_string(in_dims_)
                             + ", got " + dims_to_string(x.dims()));
        return fwd_(x);
    }

    MdArray<R> adjoint(const MdArray<R>& y) const
    {
        if (y.dims() != out_dims_)
            throw ShapeError("linop adjoint: expected " + dims_to_string(out_dims_)
                             + ", got " + dims_to_string(y.dims()));
        return adj_(y);
    }

    bool has_normal() const { return bool(normal_); }

    MdArray<R> normal(const MdArray<R>& x) const
    {
        if (normal_)
            return normal_(x);
        return adjoint(forward(x));
    }

private:
    Dims in_dims_, out_dims_;
    Fn fwd_, adj_, normal_;
};

template<class R>
Linop<R> linop_identity(Dims dims)
{
    return Linop<R>(dims, dims,
                    [](const MdArray<R>& x) { return x.clone(); },
                    [](const MdArray<R>& y) { return y.clone(); },
                    [](const MdArray<R>& x) { return x.clone(); });
}

template<class R>
Linop<R> linop_scale(Dims dims, std::complex<R> s)
{
    auto scale = [dims](std::complex<R> f, const MdArray<R>& x) {
        MdArray<R> out(dims);
        md_smul2(dims, out, out.strides(), x, x.strides(), f);
        return out;
    };
    return Linop<R>(dims, dims,
                    [=](const MdArray<R>& x) { return scale(s, x); },
                    [=](const MdArray<R>& y) { return scale(std::conj(s), y); });
}

/// Elementwise multiplication with a fixed array; `diag` dims must match the
/// operand per dimension or be 1 (broadcast).
template<class R>
Linop<R> linop_diag(Dims dims, MdArray<R> diag)
{
    if (diag.rank() != long(dims.size()))
        throw ShapeError("linop_diag: rank mismatch");
    Dims dstr = diag.strides();
    for (int d = 0; d < diag.rank(); d++) {
        if (diag.dims()[d] == 1)
            dstr[d] = 0;
        else if (diag.dims()[d] != dims[d])
            throw ShapeError("linop_diag: dim " + std::to_string(d) + " not broadcastable");
    }
    auto dd = diag;
    auto fwd = [dims, dd, dstr](const MdArray<R>& x) {
        MdArray<R> out(dims);
        md_mul2(dims, out, out.strides(), x, x.strides(), dd, dstr);
        return out;
    };
    auto adj = [dims, dd, dstr](const MdArray<R>& y) {
        MdArray<R> out(dims);
        md_zfmacc2(dims, out, out.strides(), y, y.strides(), dd, dstr);
        return out;
    };
    return Linop<R>(dims, dims, fwd, adj);
}

/// Dense matrix operator; mat dims are [out_features, in_features].
template<class R>
Linop<R> linop_matrix(MdArray<R> mat)
{
    if (mat.rank() != 2)
        throw ShapeError("linop_matrix: matrix must be rank 2");
    const long m = mat.dims()[0], n = mat.dims()[1];
    Dims in{n}, out{m};
    Dims iter{m, n};
    auto fwd = [=](const MdArray<R>& x) {
        MdArray<R> y(out);
        md_fmac2(iter, y, Dims{1, 0}, mat, mat.strides(), x, Dims{0, 1});
        return y;
    };
    auto adj = [=](const MdArray<R>& y) {
        MdArray<R> x(in);
        md_zfmacc2(iter, x, Dims{0, 1}, y, Dims{1, 0}, mat, mat.strides());
        return x;
    };
    return Linop<R>(in, out, fwd, adj);
}

/// Unitary DFT along flagged dims; adjoint equals the inverse transform.
template<class R>
Linop<R> linop_dft(Dims dims, unsigned long flags)
{
    return Linop<R>(dims, dims,
                    [flags](const MdArray<R>& x) { return dft(x, flags, false); },
                    [flags](const MdArray<R>& y) { return dft(y, flags, true); },
                    [](const MdArray<R>& x) { return x.clone(); });
}

/// Zero-pad into a larger array at a per-dim corner offset; adjoint crops.
template<class R>
Linop<R> linop_pad(Dims in_dims, Dims out_dims, Dims corner)
{
    if (in_dims.size() != out_dims.size() || corner.size() != in_dims.size())
        throw ShapeError("linop_pad: rank mismatch");
    for (size_t d = 0; d < in_dims.size(); d++)
        if (corner[d] < 0 || corner[d] + in_dims[d] > out_dims[d])
            throw ShapeError("linop_pad: window outside output");
    auto fwd = [=](const MdArray<R>& x) {
        MdArray<R> y(out_dims);
        long off = 0;
        for (size_t d = 0; d < corner.size(); d++)
            off += corner[d] * y.strides()[d];
        auto win = y.view(in_dims, y.strides(), off);
        md_copy2(in_dims, win, win.strides(), x, x.strides());
        return y;
    };
    auto adj = [=](const MdArray<R>& y) {
        MdArray<R> x(in_dims);
        long off = 0;
        for (size_t d = 0; d < corner.size(); d++)
            off += corner[d] * y.strides()[d];
        auto win = y.view(in_dims, y.strides(), off);
        md_copy2(in_dims, x, x.strides(), win, win.strides());
        return x;
    };
    return Linop<R>(in_dims, out_dims, fwd, adj);
}

/// Extract [pos, pos+len) along one dim; adjoint embeds into zeros.
template<class R>
Linop<R> linop_slice(Dims in_dims, int dim, long pos, long len)
{
    Dims out_dims = in_dims;
    out_dims.at(dim) = len;
    Dims corner(in_dims.size(), 0);
    corner[dim] = pos;
    auto pad = linop_pad<R>(out_dims, in_dims, corner);
    return Linop<R>(in_dims, out_dims,
                    [pad](const MdArray<R>& x) { return pad.adjoint(x); },
                    [pad](const MdArray<R>& y) { return pad.forward(y); });
}

/// Sum over flagged dims; adjoint broadcasts back.
template<class R>
Linop<R> linop_sum(Dims in_dims, unsigned long flags)
{
    Dims out_dims = in_dims;
    for (size_t d = 0; d < in_dims.size(); d++)
        if (flags & (1UL << d))
            out_dims[d] = 1;
    auto fwd = [=](const MdArray<R>& x) {
        MdArray<R> y(out_dims);
        Dims sy = y.strides();
        for (size_t d = 0; d < in_dims.size(); d++)
            if (flags & (1UL << d))
                sy[d] = 0;
        auto ones = MdArray<R>::scalar(std::complex<R>(1));
        md_fmac2(in_dims, y, sy, x, x.strides(), ones, Dims(in_dims.size(), 0));
        return y;
    };
    auto adj = [=](const MdArray<R>& y) {
        MdArray<R> x(in_dims);
        Dims sy = y.strides();
        for (size_t d = 0; d < in_dims.size(); d++)
            if (flags & (1UL << d))
                sy[d] = 0;
        md_copy2(in_dims, x, x.strides(), y, sy);
        return x;
    };
    return Linop<R>(in_dims, out_dims, fwd, adj);
}

/// B after A: forward B(A(x)), adjoint A^H(B^H(y)).
template<class R>
Linop<R> linop_chain(Linop<R> a, Linop<R> b)
{
    if (a.out_dims() != b.in_dims())
        throw ShapeError("linop_chain: shape mismatch " + dims_to_string(a.out_dims())
                         + " vs " + dims_to_string(b.in_dims()));
    return Linop<R>(a.in_dims(), b.out_dims(),
                    [a, b](const MdArray<R>& x) { return b.forward(a.forward(x)); },
                    [a, b](const MdArray<R>& y) { return a.adjoint(b.adjoint(y)); });
}

} // namespace mdnn
