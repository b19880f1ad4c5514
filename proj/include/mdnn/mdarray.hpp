#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <complex>
#include <cstring>
#include <functional>
#include <memory>
#include <span>

#include "common.hpp"

namespace mdnn {

/// Strided multidimensional array of complex scalars.
///
/// An array is described by its rank, dimensions and element-granularity
/// strides; the element at multi-index p lives at offset p.s into the shared
/// buffer. Freshly allocated arrays are column-major (default_strides) and
/// zero-initialized. Views alias the parent buffer without copying.
template<class R>
class MdArray {
public:
    using real_type = R;
    using value_type = std::complex<R>;

    MdArray() = default;

    explicit MdArray(Dims dims) : dims_(std::move(dims))
    {
        check_rank(dims_);
        strides_ = default_strides(dims_);
        buf_len_ = md_size(dims_);
        buf_ = std::shared_ptr<value_type[]>(new value_type[buf_len_]());
    }

    static MdArray zeros(Dims dims) { return MdArray(std::move(dims)); }

    static MdArray filled(Dims dims, value_type v)
    {
        MdArray a(std::move(dims));
        std::fill_n(a.buf_.get(), a.buf_len_, v);
        return a;
    }

    static MdArray scalar(value_type v) { return filled({1}, v); }

    int rank() const { return int(dims_.size()); }
    const Dims& dims() const { return dims_; }
    const Dims& strides() const { return strides_; }
    long size() const { return md_size(dims_); }
    bool valid() const { return bool(buf_); }

    value_type* data() { return buf_.get() + offset_; }
    const value_type* data() const { return buf_.get() + offset_; }

    /// Buffer the array (or its view chain) lives in; used for alias checks.
    const void* buffer_id() const { return buf_.get(); }
    long buffer_len() const { return buf_len_; }
    long offset() const { return offset_; }
    bool is_view() const { return view_; }

    bool has_default_strides() const { return strides_ == default_strides(dims_); }

    value_type& at(std::span<const long> idx)
    {
        return buf_[offset_ + check_index(idx)];
    }
    const value_type& at(std::span<const long> idx) const
    {
        return buf_[offset_ + check_index(idx)];
    }
    value_type& at(std::initializer_list<long> idx) { return at(std::span<const long>(idx.begin(), idx.size())); }
    const value_type& at(std::initializer_list<long> idx) const { return at(std::span<const long>(idx.begin(), idx.size())); }

    /// View with explicit geometry. Every reachable offset is bounds-checked.
    MdArray view(Dims new_dims, Dims new_strides, long extra_offset = 0) const
    {
        check_rank(new_dims);
        if (new_dims.size() != new_strides.size())
            throw ShapeError("view: dims/strides rank mismatch");
        long lo = 0, hi = 0;
        for (size_t i = 0; i < new_dims.size(); i++) {
            long span = (new_dims[i] - 1) * new_strides[i];
            if (span < 0) lo += span; else hi += span;
        }
        long base = offset_ + extra_offset;
        if (base + lo < 0 || base + hi >= buf_len_)
            throw BoundsError("view of dims " + dims_to_string(new_dims)
                              + " reaches outside buffer of length " + std::to_string(buf_len_));
        MdArray v;
        v.buf_ = buf_;
        v.buf_len_ = buf_len_;
        v.offset_ = base;
        v.dims_ = std::move(new_dims);
        v.strides_ = std::move(new_strides);
        v.view_ = true;
        return v;
    }

    /// Restrict dimension `dim` to [pos, pos+len); rank is preserved.
    MdArray slice(int dim, long pos, long len = 1) const
    {
        if (dim < 0 || dim >= rank() || pos < 0 || pos + len > dims_[dim])
            throw BoundsError("slice out of range on dim " + std::to_string(dim));
        Dims nd = dims_;
        nd[dim] = len;
        return view(nd, strides_, pos * strides_[dim]);
    }

    MdArray transposed(int d1, int d2) const
    {
        Dims nd = dims_, ns = strides_;
        std::swap(nd.at(d1), nd.at(d2));
        std::swap(ns.at(d1), ns.at(d2));
        return view(std::move(nd), std::move(ns));
    }

    /// Reinterpret as `dims` (same element count) without copying; requires
    /// default strides.
    MdArray reshaped(Dims dims) const
    {
        if (md_size(dims) != size())
            throw ShapeError("reshape " + dims_to_string(dims_) + " -> " + dims_to_string(dims));
        if (!has_default_strides())
            throw ShapeError("reshape requires default strides");
        return view(dims, default_strides(dims));
    }

    /// Deep copy with default strides.
    MdArray clone() const
    {
        MdArray out(dims_);
        out.copy_from(*this);
        return out;
    }

    void copy_from(const MdArray& src);      // defined below (needs md_copy2)
    void clear();
    void fill(value_type v);

    template<class R2>
    MdArray<R2> cast() const
    {
        MdArray<R2> out(dims_);
        auto* d = out.data();
        long i = 0;
        for_each_offset([&](long off) {
            auto v = buf_[offset_ + off];
            d[i++] = std::complex<R2>(R2(v.real()), R2(v.imag()));
        });
        return out;
    }

    /// Visit all elements in canonical order (dim 0 fastest), passing offsets.
    template<class F>
    void for_each_offset(F&& f) const
    {
        Dims idx(rank(), 0);
        long off = 0;
        for (;;) {
            f(off);
            int d = 0;
            for (; d < rank(); d++) {
                off += strides_[d];
                if (++idx[d] < dims_[d])
                    break;
                off -= dims_[d] * strides_[d];
                idx[d] = 0;
            }
            if (d == rank())
                return;
        }
    }

private:
    template<class> friend class MdArray;

    long check_index(std::span<const long> idx) const
    {
        if (long(idx.size()) != rank())
            throw ShapeError("index rank mismatch");
        long off = 0;
        for (int i = 0; i < rank(); i++) {
            if (idx[i] < 0 || idx[i] >= dims_[i])
                throw BoundsError("index out of range on dim " + std::to_string(i));
            off += idx[i] * strides_[i];
        }
        return off;
    }

    std::shared_ptr<value_type[]> buf_;
    long buf_len_ = 0;
    long offset_ = 0;
    Dims dims_;
    Dims strides_;
    bool view_ = false;
};

using MdArrayF = MdArray<float>;
using MdArrayD = MdArray<double>;

// ---------------------------------------------------------------------------
// md-functions: loop over an iteration domain and apply a scalar kernel on
// elements accessed through per-array strides.
//
// Iteration (and hence accumulation) order is fixed: dimension 0 is the
// innermost loop. Specialized inner kernels preserve this per-element order
// exactly, so results are run-to-run bitwise stable. OpenMP parallelization
// is applied only across loop dimensions whose written cells are provably
// disjoint, which keeps the per-cell accumulation order independent of the
// worker count.
// ---------------------------------------------------------------------------

enum class KernelClass { Generic, Dot, MatMul, Convolution };

inline const char* to_string(KernelClass k)
{
    switch (k) {
    case KernelClass::Dot: return "dot";
    case KernelClass::MatMul: return "matmul";
    case KernelClass::Convolution: return "convolution";
    default: return "generic";
    }
}

namespace detail {

template<int NA>
struct IterPlan {
    int rank = 0;
    std::array<long, max_rank> dims{};
    std::array<std::array<long, max_rank>, NA> str{};
    long total = 1;
};

/// Drop size-1 dims and merge adjacent dims that are contiguous for every
/// argument; result has at least rank 1.
template<int NA>
IterPlan<NA> make_plan(const Dims& dims, const std::array<const Dims*, NA>& strides)
{
    for (auto* s : strides)
        if (s->size() != dims.size())
            throw ShapeError("md-function stride rank mismatch");

    IterPlan<NA> p;
    for (size_t d = 0; d < dims.size(); d++) {
        if (dims[d] == 1)
            continue;
        p.dims[p.rank] = dims[d];
        for (int a = 0; a < NA; a++)
            p.str[a][p.rank] = (*strides[a])[d];
        p.rank++;
        p.total *= dims[d];
    }
    if (p.rank == 0) {
        p.dims[0] = 1;
        p.rank = 1;
    }
    // merge adjacent
    int w = 0;
    for (int d = 1; d < p.rank; d++) {
        bool mergeable = true;
        for (int a = 0; a < NA; a++)
            if (p.str[a][d] != p.str[a][w] * p.dims[w])
                mergeable = false;
        if (mergeable) {
            p.dims[w] *= p.dims[d];
        } else {
            ++w;
            p.dims[w] = p.dims[d];
            for (int a = 0; a < NA; a++)
                p.str[a][w] = p.str[a][d];
        }
    }
    p.rank = w + 1;
    return p;
}

template<int NA>
void check_bounds(const Dims& dims, const std::array<const Dims*, NA>& strides,
                  const std::array<long, NA>& buf_avail_lo, const std::array<long, NA>& buf_avail_hi)
{
    for (int a = 0; a < NA; a++) {
        long lo = 0, hi = 0;
        for (size_t d = 0; d < dims.size(); d++) {
            long span = (dims[d] - 1) * (*strides[a])[d];
            if (span < 0) lo += span; else hi += span;
        }
        if (lo < buf_avail_lo[a] || hi > buf_avail_hi[a])
            throw BoundsError("md-function argument " + std::to_string(a)
                              + " reaches outside its buffer");
    }
}

/// Conservative write/read overlap check, active unless NDEBUG.
template<class R>
void check_alias(const Dims& dims, const MdArray<R>& a, const Dims& sa,
                 const MdArray<R>& b, const Dims& sb)
{
#ifndef NDEBUG
    if (a.buffer_id() != b.buffer_id())
        return;
    if (a.offset() == b.offset() && sa == sb)
        return; // identical access pattern: read-then-write per cell is fine
    long alo = a.offset(), ahi = a.offset(), blo = b.offset(), bhi = b.offset();
    for (size_t d = 0; d < dims.size(); d++) {
        long spa = (dims[d] - 1) * sa[d];
        long spb = (dims[d] - 1) * sb[d];
        if (spa < 0) alo += spa; else ahi += spa;
        if (spb < 0) blo += spb; else bhi += spb;
    }
    if (ahi >= blo && bhi >= alo)
        throw AliasError("md-function output overlaps an input with a different access pattern");
#else
    (void)dims; (void)a; (void)sa; (void)b; (void)sb;
#endif
}

/// Pick an outer loop dimension that can be parallelized without changing
/// any per-cell accumulation order: written cells of distinct indices along
/// the chosen dim must be disjoint, which holds if its write stride strictly
/// dominates the write span of all other dims.
template<int NA>
int parallel_dim(const IterPlan<NA>& p, int write_arg)
{
    long other_span = 0;
    for (int d = 0; d < p.rank; d++)
        other_span += (p.dims[d] - 1) * std::abs(p.str[write_arg][d]);
    int best = -1;
    for (int d = 1; d < p.rank; d++) {
        long s = std::abs(p.str[write_arg][d]);
        if (s == 0 || p.dims[d] < 2)
            continue;
        long span_excl = other_span - (p.dims[d] - 1) * s;
        if (s > span_excl && (best < 0 || p.dims[d] > p.dims[best]))
            best = d;
    }
    return best;
}

/// Run `inner(offs_a.., n0, strides0..)` for every outer index combination.
/// Inner is called with base offsets for each argument.
template<int NA, class Inner>
void run_plan(const IterPlan<NA>& p, Inner&& inner, int par_dim)
{
    const long n0 = p.dims[0];
    auto body = [&](long fixed_dim, long fixed_idx) {
        std::array<long, max_rank> idx{};
        std::array<long, NA> off{};
        for (int a = 0; a < NA; a++)
            off[a] = fixed_dim >= 0 ? fixed_idx * p.str[a][fixed_dim] : 0;
        for (;;) {
            inner(off, n0);
            int d = 1;
            for (; d < p.rank; d++) {
                if (d == fixed_dim)
                    continue;
                for (int a = 0; a < NA; a++)
                    off[a] += p.str[a][d];
                if (++idx[d] < p.dims[d])
                    break;
                for (int a = 0; a < NA; a++)
                    off[a] -= p.dims[d] * p.str[a][d];
                idx[d] = 0;
            }
            if (d >= p.rank)
                return;
        }
    };

    if (par_dim > 0 && p.total >= (1L << 15)) {
#pragma omp parallel for schedule(static)
        for (long i = 0; i < p.dims[par_dim]; i++)
            body(par_dim, i);
    } else {
        body(-1, 0);
    }
}

} // namespace detail

/// detect_kernel_class: classify a (dims, s^a, s^b, s^c) stride triple.
/// Specialization never changes results beyond floating-point reordering;
/// Generic is the universal fallback.
inline KernelClass detect_kernel_class(const Dims& dims, const Dims& sa, const Dims& sb, const Dims& sc)
{
    std::array<const Dims*, 3> strides = {&sa, &sb, &sc};
    auto p = detail::make_plan<3>(dims, strides);

    auto is_dot = [&](int ib, int ic) {
        return p.rank == 1 && p.str[0][0] == 0 && p.str[ib][0] == 1 && p.str[ic][0] == 1;
    };
    if (is_dot(1, 2))
        return KernelClass::Dot;

    if (p.rank == 3) {
        // out(m,n) += b(m,k) * c(k,n) in any dim permutation / b-c order
        int perm[3] = {0, 1, 2};
        std::sort(perm, perm + 3);
        do {
            int m = perm[0], n = perm[1], k = perm[2];
            for (int swap = 0; swap < 2; swap++) {
                int ib = swap ? 2 : 1, ic = swap ? 1 : 2;
                bool a_ok = p.str[0][m] != 0 && p.str[0][n] != 0 && p.str[0][k] == 0;
                bool b_ok = p.str[ib][m] != 0 && p.str[ib][n] == 0 && p.str[ib][k] != 0;
                bool c_ok = p.str[ic][m] == 0 && p.str[ic][n] != 0 && p.str[ic][k] != 0;
                if (a_ok && b_ok && c_ok)
                    return KernelClass::MatMul;
            }
        } while (std::next_permutation(perm, perm + 3));
    }

    // convolution: an input dim pair sharing one memory stride (sliding
    // window), split between an output-position dim and a kernel dim
    for (int in_arg = 1; in_arg <= 2; in_arg++) {
        int ker_arg = 3 - in_arg;
        for (int i = 0; i < p.rank; i++)
            for (int j = 0; j < p.rank; j++) {
                if (i == j)
                    continue;
                if (p.str[in_arg][i] != 0 && p.str[in_arg][i] == p.str[in_arg][j]
                    && p.str[0][i] != 0 && p.str[0][j] == 0
                    && p.str[ker_arg][i] == 0 && p.str[ker_arg][j] != 0)
                    return KernelClass::Convolution;
            }
    }
    return KernelClass::Generic;
}

namespace detail {

// Hot inner kernels work on the interleaved real representation to avoid
// libcall complex multiplies; per-element order matches the naive loop.
template<class R>
inline void fmac_inner(std::complex<R>* a, const std::complex<R>* b, const std::complex<R>* c,
                       long n, long sa, long sb, long sc, bool conj_c)
{
    R* ap = reinterpret_cast<R*>(a);
    const R* bp = reinterpret_cast<const R*>(b);
    const R* cp = reinterpret_cast<const R*>(c);
    const R csign = conj_c ? R(-1) : R(1);

    if (sa == 1 && sb == 1 && sc == 0) {
        const R cr = cp[0], ci = csign * cp[1];
        for (long i = 0; i < n; i++) {
            const R br = bp[2 * i], bi = bp[2 * i + 1];
            ap[2 * i] += br * cr - bi * ci;
            ap[2 * i + 1] += br * ci + bi * cr;
        }
        return;
    }
    if (sa == 1 && sc == 1 && sb == 0) {
        const R br = bp[0], bi = bp[1];
        for (long i = 0; i < n; i++) {
            const R cr = cp[2 * i], ci = csign * cp[2 * i + 1];
            ap[2 * i] += br * cr - bi * ci;
            ap[2 * i + 1] += br * ci + bi * cr;
        }
        return;
    }
    if (sa == 0 && sb == 1 && sc == 1) {
        R accr = ap[0], acci = ap[1];
        for (long i = 0; i < n; i++) {
            const R br = bp[2 * i], bi = bp[2 * i + 1];
            const R cr = cp[2 * i], ci = csign * cp[2 * i + 1];
            accr += br * cr - bi * ci;
            acci += br * ci + bi * cr;
        }
        ap[0] = accr;
        ap[1] = acci;
        return;
    }
    for (long i = 0; i < n; i++) {
        const R br = bp[2 * i * sb], bi = bp[2 * i * sb + 1];
        const R cr = cp[2 * i * sc], ci = csign * cp[2 * i * sc + 1];
        ap[2 * i * sa] += br * cr - bi * ci;
        ap[2 * i * sa + 1] += br * ci + bi * cr;
    }
}

template<class R>
void md_fmac_impl(const Dims& dims, MdArray<R>& a, const Dims& sa,
                  const MdArray<R>& b, const Dims& sb,
                  const MdArray<R>& c, const Dims& sc, bool conj_c)
{
    std::array<const Dims*, 3> strides = {&sa, &sb, &sc};
    detail::check_bounds<3>(dims, strides,
                            {-a.offset(), -b.offset(), -c.offset()},
                            {a.buffer_len() - 1 - a.offset(), b.buffer_len() - 1 - b.offset(),
                             c.buffer_len() - 1 - c.offset()});
    detail::check_alias(dims, a, sa, b, sb);
    detail::check_alias(dims, a, sa, c, sc);

    auto p = detail::make_plan<3>(dims, strides);
    auto* pa = a.data();
    const auto* pb = b.data();
    const auto* pc = c.data();
    const long s0a = p.str[0][0], s0b = p.str[1][0], s0c = p.str[2][0];
    detail::run_plan<3>(p, [=](const std::array<long, 3>& off, long n0) {
        fmac_inner(pa + off[0], pb + off[1], pc + off[2], n0, s0a, s0b, s0c, conj_c);
    }, detail::parallel_dim<3>(p, 0));
}

} // namespace detail

/// a[p.s^a] += b[p.s^b] * c[p.s^c] over the iteration domain `dims`.
template<class R>
void md_fmac2(const Dims& dims, MdArray<R>& a, const Dims& sa,
              const MdArray<R>& b, const Dims& sb, const MdArray<R>& c, const Dims& sc)
{
    detail::md_fmac_impl(dims, a, sa, b, sb, c, sc, false);
}

/// a[p.s^a] += b[p.s^b] * conj(c[p.s^c]).
template<class R>
void md_zfmacc2(const Dims& dims, MdArray<R>& a, const Dims& sa,
                const MdArray<R>& b, const Dims& sb, const MdArray<R>& c, const Dims& sc)
{
    detail::md_fmac_impl(dims, a, sa, b, sb, c, sc, true);
}

namespace detail {

template<class R, class Op>
void md_apply2(const Dims& dims, MdArray<R>& a, const Dims& sa,
               const MdArray<R>& b, const Dims& sb, Op op)
{
    std::array<const Dims*, 2> strides = {&sa, &sb};
    detail::check_bounds<2>(dims, strides, {-a.offset(), -b.offset()},
                            {a.buffer_len() - 1 - a.offset(), b.buffer_len() - 1 - b.offset()});
    detail::check_alias(dims, a, sa, b, sb);
    auto p = detail::make_plan<2>(dims, strides);
    auto* pa = a.data();
    const auto* pb = b.data();
    const long s0a = p.str[0][0], s0b = p.str[1][0];
    detail::run_plan<2>(p, [=](const std::array<long, 2>& off, long n0) {
        auto* x = pa + off[0];
        const auto* y = pb + off[1];
        for (long i = 0; i < n0; i++)
            op(x[i * s0a], y[i * s0b]);
    }, detail::parallel_dim<2>(p, 0));
}

template<class R, class Op>
void md_apply3(const Dims& dims, MdArray<R>& a, const Dims& sa,
               const MdArray<R>& b, const Dims& sb, const MdArray<R>& c, const Dims& sc, Op op)
{
    std::array<const Dims*, 3> strides = {&sa, &sb, &sc};
    detail::check_bounds<3>(dims, strides,
                            {-a.offset(), -b.offset(), -c.offset()},
                            {a.buffer_len() - 1 - a.offset(), b.buffer_len() - 1 - b.offset(),
                             c.buffer_len() - 1 - c.offset()});
    detail::check_alias(dims, a, sa, b, sb);
    detail::check_alias(dims, a, sa, c, sc);
    auto p = detail::make_plan<3>(dims, strides);
    auto* pa = a.data();
    const auto* pb = b.data();
    const auto* pc = c.data();
    const long s0a = p.str[0][0], s0b = p.str[1][0], s0c = p.str[2][0];
    detail::run_plan<3>(p, [=](const std::array<long, 3>& off, long n0) {
        auto* x = pa + off[0];
        const auto* y = pb + off[1];
        const auto* z = pc + off[2];
        for (long i = 0; i < n0; i++)
            op(x[i * s0a], y[i * s0b], z[i * s0c]);
    }, detail::parallel_dim<3>(p, 0));
}

} // namespace detail

template<class R>
void md_copy2(const Dims& dims, MdArray<R>& a, const Dims& sa, const MdArray<R>& b, const Dims& sb)
{
    detail::md_apply2(dims, a, sa, b, sb, [](auto& x, const auto& y) { x = y; });
}

template<class R>
void md_add2(const Dims& dims, MdArray<R>& a, const Dims& sa,
             const MdArray<R>& b, const Dims& sb, const MdArray<R>& c, const Dims& sc)
{
    detail::md_apply3(dims, a, sa, b, sb, c, sc, [](auto& x, const auto& y, const auto& z) { x = y + z; });
}

template<class R>
void md_sub2(const Dims& dims, MdArray<R>& a, const Dims& sa,
             const MdArray<R>& b, const Dims& sb, const MdArray<R>& c, const Dims& sc)
{
    detail::md_apply3(dims, a, sa, b, sb, c, sc, [](auto& x, const auto& y, const auto& z) { x = y - z; });
}

template<class R>
void md_mul2(const Dims& dims, MdArray<R>& a, const Dims& sa,
             const MdArray<R>& b, const Dims& sb, const MdArray<R>& c, const Dims& sc)
{
    detail::md_apply3(dims, a, sa, b, sb, c, sc, [](auto& x, const auto& y, const auto& z) {
        x = std::complex<R>(y.real() * z.real() - y.imag() * z.imag(),
                            y.real() * z.imag() + y.imag() * z.real());
    });
}

template<class R>
void md_smul2(const Dims& dims, MdArray<R>& a, const Dims& sa,
              const MdArray<R>& b, const Dims& sb, std::complex<R> s)
{
    detail::md_apply2(dims, a, sa, b, sb, [s](auto& x, const auto& y) {
        x = std::complex<R>(y.real() * s.real() - y.imag() * s.imag(),
                            y.real() * s.imag() + y.imag() * s.real());
    });
}

template<class R>
void md_conj2(const Dims& dims, MdArray<R>& a, const Dims& sa, const MdArray<R>& b, const Dims& sb)
{
    detail::md_apply2(dims, a, sa, b, sb, [](auto& x, const auto& y) { x = std::conj(y); });
}

// Same-shape conveniences using each array's own strides.

template<class R>
void md_fmac(MdArray<R>& a, const MdArray<R>& b, const MdArray<R>& c)
{
    if (a.dims() != b.dims() || a.dims() != c.dims())
        throw ShapeError("md_fmac shape mismatch");
    md_fmac2(a.dims(), a, a.strides(), b, b.strides(), c, c.strides());
}

template<class R>
void MdArray<R>::copy_from(const MdArray<R>& src)
{
    if (src.dims() != dims_)
        throw ShapeError("copy_from shape mismatch " + dims_to_string(src.dims())
                         + " -> " + dims_to_string(dims_));
    md_copy2(dims_, *this, strides_, src, src.strides());
}

template<class R>
void MdArray<R>::clear()
{
    fill(value_type(0));
}

template<class R>
void MdArray<R>::fill(value_type v)
{
    if (!view_ && has_default_strides()) {
        std::fill_n(data(), size(), v);
        return;
    }
    auto* base = buf_.get() + offset_;
    for_each_offset([&](long off) { base[off] = v; });
}

// Elementwise helpers used by optimizers and tests; same-shape, own strides.

template<class R, class F>
void md_zip(MdArray<R>& a, const MdArray<R>& b, F f)
{
    if (a.dims() != b.dims())
        throw ShapeError("md_zip shape mismatch");
    detail::md_apply2(a.dims(), a, a.strides(), b, b.strides(), f);
}

template<class R, class F>
void md_foreach(MdArray<R>& a, F f)
{
    auto* base = a.data();
    a.for_each_offset([&](long off) { f(base[off]); });
}

template<class R>
void md_axpy(MdArray<R>& a, std::complex<R> alpha, const MdArray<R>& x)
{
    md_zip(a, x, [alpha](auto& av, const auto& xv) { av += alpha * xv; });
}

template<class R>
std::complex<R> md_zdot(const MdArray<R>& a, const MdArray<R>& b)
{
    if (a.dims() != b.dims())
        throw ShapeError("md_zdot shape mismatch");
    // <a, b> = sum a * conj(b), accumulated in double independent of R
    std::complex<double> acc = 0;
    const auto* pa = a.data();
    const auto* pb = b.data();
    Dims idx(a.rank(), 0);
    long oa = 0, ob = 0;
    for (;;) {
        std::complex<double> va(pa[oa].real(), pa[oa].imag());
        std::complex<double> vb(pb[ob].real(), pb[ob].imag());
        acc += va * std::conj(vb);
        int d = 0;
        for (; d < a.rank(); d++) {
            oa += a.strides()[d];
            ob += b.strides()[d];
            if (++idx[d] < a.dims()[d])
                break;
            oa -= a.dims()[d] * a.strides()[d];
            ob -= b.dims()[d] * b.strides()[d];
            idx[d] = 0;
        }
        if (d == a.rank())
            break;
    }
    return {R(acc.real()), R(acc.imag())};
}

template<class R>
double md_znorm(const MdArray<R>& a)
{
    double acc = 0;
    const auto* p = a.data();
    a.for_each_offset([&](long off) { acc += std::norm(std::complex<double>(p[off].real(), p[off].imag())); });
    return std::sqrt(acc);
}

template<class R>
double md_zmax_abs(const MdArray<R>& a)
{
    double m = 0;
    const auto* p = a.data();
    a.for_each_offset([&](long off) { m = std::max(m, double(std::abs(p[off]))); });
    return m;
}

template<class R>
bool md_all_finite(const MdArray<R>& a)
{
    bool ok = true;
    const auto* p = a.data();
    a.for_each_offset([&](long off) {
        if (!std::isfinite(p[off].real()) || !std::isfinite(p[off].imag()))
            ok = false;
    });
    return ok;
}

} // namespace mdnn
