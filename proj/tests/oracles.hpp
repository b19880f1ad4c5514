#pragma once

// Test-side reference implementations, independent of the library's
// evaluation paths: naive DFT, inner-product probes, finite differences and
// dense real-Jacobian assembly.

#include <mdnn/nlop.hpp>
#include <mdnn/ops.hpp>

namespace oracle {

using namespace mdnn;

template<class R>
MdArray<R> random_array(const Dims& dims, Rng& rng, double amp = 1.0)
{
    MdArray<R> a(dims);
    md_foreach(a, [&](auto& v) {
        v = std::complex<R>(R(rng.uniform(-amp, amp)), R(rng.uniform(-amp, amp)));
    });
    return a;
}

/// O(N^2) reference DFT, unitary normalization.
template<class R>
std::vector<std::complex<R>> naive_dft(const std::vector<std::complex<R>>& x, bool inverse)
{
    const long n = long(x.size());
    std::vector<std::complex<R>> y(n);
    const double sign = inverse ? 1.0 : -1.0;
    for (long k = 0; k < n; k++) {
        std::complex<double> acc = 0;
        for (long j = 0; j < n; j++) {
            double ang = sign * 2.0 * M_PI * double((j * k) % n) / double(n);
            acc += std::complex<double>(x[j].real(), x[j].imag())
                   * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        acc /= std::sqrt(double(n));
        y[k] = {R(acc.real()), R(acc.imag())};
    }
    return y;
}

/// max |<Ax,y> - <x,A^H y>| / (|Ax| |y|) over n random probes.
template<class R>
double adjoint_mismatch(const Linop<R>& a, int n_probes, uint64_t seed)
{
    Rng rng(seed);
    double worst = 0;
    for (int p = 0; p < n_probes; p++) {
        auto x = random_array<R>(a.in_dims(), rng);
        auto y = random_array<R>(a.out_dims(), rng);
        auto ax = a.forward(x);
        auto ahy = a.adjoint(y);
        auto lhs = md_zdot(ax, y);
        auto rhs = md_zdot(x, ahy);
        double denom = md_znorm(ax) * md_znorm(y);
        if (denom == 0)
            continue;
        worst = std::max(worst, std::abs(std::complex<double>(lhs - rhs)) / denom);
    }
    return worst;
}

/// Central finite difference of output o with respect to input i along a
/// complex direction.
template<class R>
MdArray<R> fd_directional(Nlop<R>& f, const std::vector<MdArray<R>>& in, int o, int i,
                          const MdArray<R>& dir, double h)
{
    auto shifted = [&](double s) {
        auto args = in;
        args[i] = in[i].clone();
        md_axpy(args[i], std::complex<R>(R(s), 0), dir);
        return f.apply(args)[o];
    };
    auto plus = shifted(h);
    auto minus = shifted(-h);
    MdArray<R> out(plus.dims());
    md_sub2(out.dims(), out, out.strides(), plus, plus.strides(), minus, minus.strides());
    md_foreach(out, [h](auto& v) { v /= R(2 * h); });
    f.apply(in); // restore derivative state at the base point
    return out;
}

/// Real 2M x 2N Jacobian of (o, i), columns [Re dx_k, Im dx_k] and rows
/// interleaved [Re dy_j, Im dy_j].
template<class R>
std::vector<double> jacobian_via_deriv(Nlop<R>& f, int o, int i)
{
    const long n = md_size(f.in_dims(i));
    const long m = md_size(f.out_dims(o));
    std::vector<double> jac(4 * m * n);
    for (long k = 0; k < n; k++)
        for (int part = 0; part < 2; part++) {
            MdArray<R> e(f.in_dims(i));
            e.data()[k] = part ? std::complex<R>(0, 1) : std::complex<R>(1, 0);
            auto dy = f.derivative(o, i, e);
            const long col = 2 * k + part;
            for (long j = 0; j < m; j++) {
                jac[(2 * j) * 2 * n + col] = dy.data()[j].real();
                jac[(2 * j + 1) * 2 * n + col] = dy.data()[j].imag();
            }
        }
    return jac;
}

template<class R>
std::vector<double> jacobian_via_adjoint(Nlop<R>& f, int o, int i)
{
    const long n = md_size(f.in_dims(i));
    const long m = md_size(f.out_dims(o));
    std::vector<double> jac(4 * m * n);
    for (long j = 0; j < m; j++)
        for (int part = 0; part < 2; part++) {
            MdArray<R> e(f.out_dims(o));
            e.data()[j] = part ? std::complex<R>(0, 1) : std::complex<R>(1, 0);
            auto dx = f.adjoint_derivative(o, i, e);
            const long row = 2 * j + part;
            for (long k = 0; k < n; k++) {
                jac[row * 2 * n + 2 * k] = dx.data()[k].real();
                jac[row * 2 * n + 2 * k + 1] = dx.data()[k].imag();
            }
        }
    return jac;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    double m = 0;
    for (size_t k = 0; k < a.size(); k++)
        m = std::max(m, std::abs(a[k] - b[k]));
    return m;
}

/// Check every derivative pair of f against central finite differences at
/// the given inputs; returns the worst relative error.
template<class R>
double fd_check_all(Nlop<R>& f, const std::vector<MdArray<R>>& in, double h = 1e-6)
{
    f.apply(in);
    double worst = 0;
    for (int o = 0; o < f.n_out(); o++)
        for (int i = 0; i < f.n_in(); i++) {
            const long n = md_size(f.in_dims(i));
            for (long k = 0; k < n; k++)
                for (int part = 0; part < 2; part++) {
                    MdArray<R> e(f.in_dims(i));
                    e.data()[k] = part ? std::complex<R>(0, 1) : std::complex<R>(1, 0);
                    auto fd = fd_directional(f, in, o, i, e, h);
                    auto an = f.derivative(o, i, e);
                    double num = 0, den = 0;
                    for (long j = 0; j < fd.size(); j++) {
                        num = std::max(num, std::abs(std::complex<double>(
                                                an.data()[j].real() - fd.data()[j].real(),
                                                an.data()[j].imag() - fd.data()[j].imag())));
                        den = std::max(den, std::abs(std::complex<double>(fd.data()[j].real(),
                                                                          fd.data()[j].imag())));
                    }
                    worst = std::max(worst, num / std::max(den, 1.0));
                }
        }
    return worst;
}

/// Gradient check for a real-scalar-output operator: compare DF^H(1) for
/// input i against central finite differences of every real/imaginary
/// component. Returns the worst relative error.
template<class R>
double scalar_fd_grad_err(Nlop<R>& f, const std::vector<MdArray<R>>& in, int i, double h = 1e-6,
                          int out_idx = -1)
{
    if (out_idx < 0)
        out_idx = 0;
    auto loss_at = [&](const std::vector<MdArray<R>>& args) {
        return double(f.apply(args)[out_idx].data()[0].real());
    };
    f.apply(in);
    auto grad = f.adjoint_derivative(out_idx, i, MdArray<R>::scalar(std::complex<R>(1)));

    double worst = 0, scale = 1;
    const long n = md_size(f.in_dims(i));
    for (long k = 0; k < n; k++)
        for (int part = 0; part < 2; part++) {
            auto args = in;
            args[i] = in[i].clone();
            auto delta = part ? std::complex<R>(0, R(h)) : std::complex<R>(R(h), 0);
            args[i].data()[k] += delta;
            double lp = loss_at(args);
            args[i] = in[i].clone();
            args[i].data()[k] -= delta;
            double lm = loss_at(args);
            double fd = (lp - lm) / (2 * h);
            double an = part ? grad.data()[k].imag() : grad.data()[k].real();
            worst = std::max(worst, std::abs(fd - an));
            scale = std::max(scale, std::abs(fd));
        }
    f.apply(in);
    return worst / scale;
}

/// Build a random composition of atomic operators (all on the same shape)
/// via combine/link/duplicate/chain; at least one input and output survive.
template<class R>
Nlop<R> random_graph(Rng& rng, const Dims& dims, int n_ops)
{
    auto atomic = [&]() -> Nlop<R> {
        switch (rng.below(6)) {
        case 0: return nlop_mul<R>(dims);
        case 1: return nlop_add<R>(dims);
        case 2: return nlop_square<R>(dims);
        case 3: return nlop_zconj<R>(dims);
        case 4: return Nlop<R>(std::make_shared<CReluNode<R>>(dims));
        default: return nlop_add<R>(dims, true);
        }
    };
    Nlop<R> h = atomic();
    for (int step = 0; step < n_ops; step++) {
        Nlop<R> g = atomic();
        int link_in = int(h.n_in() + rng.below(uint64_t(g.n_in())));
        int link_out = int(rng.below(uint64_t(h.n_out())));
        h = link(combine(h, g), link_out, link_in);
        if (h.n_in() > 2 && rng.below(3) == 0) {
            int i = int(rng.below(uint64_t(h.n_in())));
            int j = int(rng.below(uint64_t(h.n_in())));
            if (i != j)
                h = duplicate(h, i, j);
        }
    }
    return h;
}

} // namespace oracle
