#pragma once

#include "recon.hpp"

namespace mdnn {

/// Synthetic data generation: randomized ellipse phantoms with smooth phase,
/// smooth unit-normalized coil maps, regular undersampling with an
/// auto-calibration block, and complex Gaussian k-space noise.
struct SimConfig {
    long slices = 20;
    long size = 32;
    long coils = 4;
    long accel = 4;
    long acl_lines = 8;
    double noise_sigma = 0.001;
    uint64_t seed = 1;

    void validate() const
    {
        if (slices < 1 || size < 2 || coils < 1)
            throw ConfigError("simulate: invalid geometry");
        if (accel < 1)
            throw ConfigError("simulate: acceleration must be >= 1");
        if (acl_lines < 0 || acl_lines > size)
            throw ConfigError("simulate: acl lines must be within the image size");
    }
};

template<class R>
struct SimData {
    MdArray<R> kspace;    // [X, Y, 1, NC, 1, ..., B]
    MdArray<R> coils;     // [X, Y, 1, NC, 1, ..., B]
    MdArray<R> reference; // [X, Y, 1, 1, 1, ..., B]
    MdArray<R> pattern;   // [1, Y]
};

namespace detail {

template<class R>
void draw_phantom(MdArray<R> img, Rng& rng)
{
    const long nx = img.dims()[dim_x], ny = img.dims()[dim_y];
    const int n_ell = 4 + int(rng.below(5));
    struct Ell {
        double cx, cy, ax, ay, cs, sn, amp;
    };
    std::vector<Ell> ells;
    for (int e = 0; e < n_ell; e++) {
        double th = rng.uniform(0, 2 * M_PI);
        ells.push_back({rng.uniform(-0.55, 0.55), rng.uniform(-0.55, 0.55),
                        rng.uniform(0.12, 0.5), rng.uniform(0.12, 0.5),
                        std::cos(th), std::sin(th), rng.uniform(0.25, 1.0)});
    }
    double p1 = rng.uniform(-2, 2), p2 = rng.uniform(-2, 2), p3 = rng.uniform(-1, 1);

    auto* v = img.data();
    for (long j = 0; j < ny; j++) {
        double y = 2.0 * double(j) / double(ny - 1) - 1.0;
        for (long i = 0; i < nx; i++) {
            double x = 2.0 * double(i) / double(nx - 1) - 1.0;
            double mag = 0;
            for (const auto& e : ells) {
                double dx = x - e.cx, dy = y - e.cy;
                double u = (dx * e.cs + dy * e.sn) / e.ax;
                double w = (-dx * e.sn + dy * e.cs) / e.ay;
                double r2 = u * u + w * w;
                if (r2 < 1.0)
                    mag += e.amp * (1.0 - r2); // smooth bump inside the ellipse
            }
            double ph = p1 * x + p2 * y + p3 * x * y;
            v[i + nx * j] = std::complex<R>(R(mag * std::cos(ph)), R(mag * std::sin(ph)));
        }
    }
}

template<class R>
void draw_coils(MdArray<R> maps, Rng& rng)
{
    const long nx = maps.dims()[dim_x], ny = maps.dims()[dim_y];
    const long nc = maps.dims()[dim_coil];
    const long cstride = maps.strides()[dim_coil];
    auto* v = maps.data();

    for (long c = 0; c < nc; c++) {
        double ang = 2 * M_PI * (double(c) + rng.uniform(-0.15, 0.15)) / double(nc);
        double cx = 1.3 * std::cos(ang), cy = 1.3 * std::sin(ang);
        double w = rng.uniform(0.9, 1.3);
        double px = rng.uniform(-0.8, 0.8), py = rng.uniform(-0.8, 0.8);
        for (long j = 0; j < ny; j++) {
            double y = 2.0 * double(j) / double(ny - 1) - 1.0;
            for (long i = 0; i < nx; i++) {
                double x = 2.0 * double(i) / double(nx - 1) - 1.0;
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                double mag = std::exp(-d2 / (2 * w * w));
                double ph = px * x + py * y;
                v[i + nx * j + c * cstride] =
                    std::complex<R>(R(mag * std::cos(ph)), R(mag * std::sin(ph)));
            }
        }
    }
    // per-pixel sum_c |C_c|^2 = 1
    for (long j = 0; j < ny; j++)
        for (long i = 0; i < nx; i++) {
            double ss = 0;
            for (long c = 0; c < nc; c++)
                ss += std::norm(std::complex<double>(v[i + nx * j + c * cstride].real(),
                                                     v[i + nx * j + c * cstride].imag()));
            R f = R(1.0 / std::sqrt(ss));
            for (long c = 0; c < nc; c++)
                v[i + nx * j + c * cstride] *= f;
        }
}

} // namespace detail

/// Regular undersampling of every accel-th line plus a centered block of
/// auto-calibration lines around DC (wrap-around indexing).
template<class R>
MdArray<R> make_pattern(long size, long accel, long acl_lines)
{
    Dims pd(max_rank, 1);
    pd[dim_y] = size;
    MdArray<R> p(pd);
    auto* v = p.data();
    for (long k = 0; k < size; k++) {
        bool regular = (k % accel) == 0;
        long dist = std::min(k, size - k); // distance to DC, wrap-around
        bool acl = 2 * dist < acl_lines;
        v[k] = (regular || acl) ? std::complex<R>(1) : std::complex<R>(0);
    }
    return p;
}

template<class R>
SimData<R> simulate(const SimConfig& cfg)
{
    cfg.validate();
    SenseDims sd{cfg.size, cfg.size, cfg.coils, 1, cfg.slices};

    SimData<R> out;
    out.reference = MdArray<R>(sd.image());
    out.coils = MdArray<R>(sd.coil_maps());
    out.pattern = make_pattern<R>(cfg.size, cfg.accel, cfg.acl_lines);

    for (long s = 0; s < cfg.slices; s++) {
        Rng prng(hash_rand(cfg.seed, 2 * uint64_t(s)));
        Rng crng(hash_rand(cfg.seed, 2 * uint64_t(s) + 1));
        detail::draw_phantom<R>(out.reference.slice(dim_batch, s), prng);
        detail::draw_coils<R>(out.coils.slice(dim_batch, s), crng);
    }

    auto sense = build_sense<R>(out.coils, out.pattern);
    auto clean = sense.forward(out.reference);

    // complex Gaussian noise on the sampled locations
    MdArray<R> noise(clean.dims());
    Rng nrng(hash_rand(cfg.seed, 0x6e015eULL));
    md_foreach(noise, [&](auto& v) {
        v = std::complex<R>(R(cfg.noise_sigma * nrng.gauss()), R(cfg.noise_sigma * nrng.gauss()));
    });
    out.kspace = MdArray<R>(clean.dims());
    md_add2(clean.dims(), out.kspace, out.kspace.strides(), clean, clean.strides(), noise, noise.strides());
    md_mul2(clean.dims(), out.kspace, out.kspace.strides(), out.kspace, out.kspace.strides(),
            out.pattern, detail::stride_into(out.pattern, clean.dims()));
    return out;
}

} // namespace mdnn
