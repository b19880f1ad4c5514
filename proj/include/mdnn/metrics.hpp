#pragma once

#include <limits>

#include "mdarray.hpp"

namespace mdnn {

struct Metrics {
    double mse = 0;
    double psnr = 0; // +inf for identical images
};

/// MSE and PSNR over magnitude images, optionally restricted to the nonzero
/// entries of a mask; psnr = 20 log10(max |reference| / rmse).
template<class R>
Metrics eval_metrics(const MdArray<R>& recon, const MdArray<R>& reference,
                     const MdArray<R>* mask = nullptr)
{
    if (recon.dims() != reference.dims())
        throw ShapeError("metrics: shape mismatch " + dims_to_string(recon.dims()) + " vs "
                         + dims_to_string(reference.dims()));
    if (mask && mask->dims() != recon.dims())
        throw ShapeError("metrics: mask shape mismatch");

    auto rc = recon.clone();
    auto rf = reference.clone();
    MdArray<R> mc = mask ? mask->clone() : MdArray<R>{};
    const auto* a = rc.data();
    const auto* b = rf.data();
    const auto* m = mask ? mc.data() : nullptr;

    double se = 0, peak = 0;
    long count = 0;
    for (long k = 0; k < rc.size(); k++) {
        if (m && m[k] == std::complex<R>(0))
            continue;
        double da = std::abs(std::complex<double>(a[k].real(), a[k].imag()));
        double db = std::abs(std::complex<double>(b[k].real(), b[k].imag()));
        se += (da - db) * (da - db);
        peak = std::max(peak, db);
        count++;
    }
    if (count == 0)
        throw ConfigError("metrics: empty mask");

    Metrics out;
    out.mse = se / double(count);
    double rmse = std::sqrt(out.mse);
    out.psnr = rmse == 0 ? std::numeric_limits<double>::infinity()
                         : 20.0 * std::log10(peak / rmse);
    return out;
}

} // namespace mdnn
