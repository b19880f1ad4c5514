#pragma once

#include <map>
#include <numbers>

#include "mdarray.hpp"

namespace mdnn {

namespace detail {

inline bool is_pow2(long n) { return n > 0 && (n & (n - 1)) == 0; }

inline long next_pow2(long n)
{
    long m = 1;
    while (m < n)
        m <<= 1;
    return m;
}

/// Iterative radix-2 transform, unnormalized. Twiddles from double trig.
template<class R>
struct Pow2Plan {
    long n;
    std::vector<std::complex<R>> tw_fwd, tw_inv; // per-position twiddles, all stages packed
    std::vector<long> rev;

    explicit Pow2Plan(long n_) : n(n_)
    {
        rev.resize(n);
        int lg = 0;
        while ((1L << lg) < n)
            lg++;
        for (long i = 0; i < n; i++) {
            long r = 0;
            for (int b = 0; b < lg; b++)
                if (i & (1L << b))
                    r |= 1L << (lg - 1 - b);
            rev[i] = r;
        }
        for (long m = 2; m <= n; m <<= 1) {
            for (long k = 0; k < m / 2; k++) {
                double ang = -2.0 * std::numbers::pi * double(k) / double(m);
                tw_fwd.emplace_back(R(std::cos(ang)), R(std::sin(ang)));
                tw_inv.emplace_back(R(std::cos(ang)), R(-std::sin(ang)));
            }
        }
    }

    void run(std::complex<R>* x, bool inverse) const
    {
        for (long i = 0; i < n; i++)
            if (rev[i] > i)
                std::swap(x[i], x[rev[i]]);
        const auto* tw = inverse ? tw_inv.data() : tw_fwd.data();
        long toff = 0;
        for (long m = 2; m <= n; m <<= 1) {
            const long h = m / 2;
            for (long base = 0; base < n; base += m) {
                for (long k = 0; k < h; k++) {
                    const auto w = tw[toff + k];
                    const auto u = x[base + k];
                    const auto t = std::complex<R>(
                        x[base + k + h].real() * w.real() - x[base + k + h].imag() * w.imag(),
                        x[base + k + h].real() * w.imag() + x[base + k + h].imag() * w.real());
                    x[base + k] = u + t;
                    x[base + k + h] = u - t;
                }
            }
            toff += h;
        }
    }
};

/// Chirp-z (Bluestein) plan for arbitrary lengths on top of a padded
/// power-of-two transform.
template<class R>
struct BluesteinPlan {
    long n, m;
    std::vector<std::complex<R>> chirp;      // exp(-i pi k^2 / n)
    std::vector<std::complex<R>> kernel_fwd; // fft of conj chirp, forward direction
    std::vector<std::complex<R>> kernel_inv;
    const Pow2Plan<R>* pow2;

    BluesteinPlan(long n_, const Pow2Plan<R>& p2) : n(n_), m(p2.n), pow2(&p2)
    {
        chirp.resize(n);
        for (long k = 0; k < n; k++) {
            // k^2 mod 2n keeps the phase argument small
            long q = (k * k) % (2 * n);
            double ang = -std::numbers::pi * double(q) / double(n);
            chirp[k] = {R(std::cos(ang)), R(std::sin(ang))};
        }
        auto make_kernel = [&](bool inverse) {
            std::vector<std::complex<R>> b(m, std::complex<R>(0));
            for (long k = 0; k < n; k++) {
                auto c = inverse ? chirp[k] : std::conj(chirp[k]);
                b[k] = c;
                if (k > 0)
                    b[m - k] = c;
            }
            pow2->run(b.data(), false);
            return b;
        };
        kernel_fwd = make_kernel(false);
        kernel_inv = make_kernel(true);
    }

    void run(std::complex<R>* x, bool inverse) const
    {
        std::vector<std::complex<R>> a(m, std::complex<R>(0));
        for (long k = 0; k < n; k++) {
            auto c = inverse ? std::conj(chirp[k]) : chirp[k];
            a[k] = x[k] * c;
        }
        pow2->run(a.data(), false);
        const auto& kern = inverse ? kernel_inv : kernel_fwd;
        for (long k = 0; k < m; k++)
            a[k] *= kern[k];
        pow2->run(a.data(), true);
        const R scale = R(1) / R(m);
        for (long k = 0; k < n; k++) {
            auto c = inverse ? std::conj(chirp[k]) : chirp[k];
            x[k] = a[k] * c * scale;
        }
    }
};

template<class R>
struct FftPlans {
    std::map<long, std::unique_ptr<Pow2Plan<R>>> pow2;
    std::map<long, std::unique_ptr<BluesteinPlan<R>>> blue;

    const Pow2Plan<R>& get_pow2(long n)
    {
        auto& p = pow2[n];
        if (!p)
            p = std::make_unique<Pow2Plan<R>>(n);
        return *p;
    }

    void run(std::complex<R>* x, long n, bool inverse)
    {
        if (n == 1)
            return;
        if (is_pow2(n)) {
            get_pow2(n).run(x, inverse);
            return;
        }
        auto& p = blue[n];
        if (!p) {
            const auto& p2 = get_pow2(next_pow2(2 * n - 1));
            p = std::make_unique<BluesteinPlan<R>>(n, p2);
        }
        p->run(x, inverse);
    }
};

template<class R>
FftPlans<R>& fft_plans()
{
    thread_local FftPlans<R> plans;
    return plans;
}

} // namespace detail

/// Unnormalized 1-d transform of a contiguous line (any length).
template<class R>
void fft_line(std::complex<R>* x, long n, bool inverse)
{
    detail::fft_plans<R>().run(x, n, inverse);
}

/// Unitary multidimensional DFT along the dims selected by `flags`
/// (bit d selects dimension d). Normalization is 1/sqrt(N) per transformed
/// axis in both directions, so inverse(forward(x)) == x and norms are
/// preserved.
template<class R>
MdArray<R> dft(const MdArray<R>& a, unsigned long flags, bool inverse)
{
    for (int d = a.rank(); d < max_rank; d++)
        if (flags & (1UL << d))
            throw ConfigError("dft: flag selects nonexistent dimension " + std::to_string(d));
    if (flags >> max_rank)
        throw ConfigError("dft: flag selects nonexistent dimension");

    MdArray<R> out = a.clone();
    const Dims& dims = out.dims();
    const Dims& str = out.strides();

    for (int d = 0; d < out.rank(); d++) {
        if (!(flags & (1UL << d)) || dims[d] == 1)
            continue;
        const long n = dims[d];
        const R scale = R(1.0 / std::sqrt(double(n)));
        std::vector<std::complex<R>> line(n);
        auto* base = out.data();

        // iterate over all lines along dim d
        Dims idx(out.rank(), 0);
        long off = 0;
        for (;;) {
            for (long k = 0; k < n; k++)
                line[k] = base[off + k * str[d]];
            fft_line(line.data(), n, inverse);
            for (long k = 0; k < n; k++)
                base[off + k * str[d]] = line[k] * scale;

            int e = 0;
            for (; e < out.rank(); e++) {
                if (e == d)
                    continue;
                off += str[e];
                if (++idx[e] < dims[e])
                    break;
                off -= dims[e] * str[e];
                idx[e] = 0;
            }
            if (e == out.rank())
                break;
        }
    }
    return out;
}

} // namespace mdnn
