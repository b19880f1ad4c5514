#pragma once

#include "optim.hpp"

namespace mdnn {

// Array layout follows the BART dimension convention: dims 0/1 are the image
// plane, dim 3 the receive coils, dim 4 the coil-sensitivity map sets
// (soft-SENSE) and dim 15 the batch; all other dims stay 1.
inline constexpr int dim_x = 0;
inline constexpr int dim_y = 1;
inline constexpr int dim_chan = 2; // network feature channels
inline constexpr int dim_coil = 3;
inline constexpr int dim_maps = 4;
inline constexpr int dim_batch = 15;
inline constexpr unsigned long fft_flags = (1UL << dim_x) | (1UL << dim_y);

struct SenseDims {
    long x = 0, y = 0, coils = 1, maps = 1, batch = 1;

    Dims image() const { return make(1, maps); }
    Dims coil_img() const { return make(coils, 1); }
    Dims coil_maps() const { return make(coils, maps); }
    Dims pattern() const
    {
        Dims d(max_rank, 1);
        d[dim_y] = y;
        return d;
    }

private:
    Dims make(long nc, long nm) const
    {
        Dims d(max_rank, 1);
        d[dim_x] = x;
        d[dim_y] = y;
        d[dim_coil] = nc;
        d[dim_maps] = nm;
        d[dim_batch] = batch;
        return d;
    }
};

namespace detail {

template<class R>
Dims stride_into(const MdArray<R>& a, const Dims& iter)
{
    Dims s = a.strides();
    for (size_t d = 0; d < s.size(); d++)
        if (a.dims()[d] == 1 && iter[d] != 1)
            s[d] = 0;
    return s;
}

inline Dims stride_for(const Dims& adims, const Dims& iter)
{
    Dims s = default_strides(adims);
    for (size_t d = 0; d < adims.size(); d++)
        if (adims[d] == 1 && iter[d] != 1)
            s[d] = 0;
    return s;
}

} // namespace detail

template<class R>
void check_pattern_binary(const MdArray<R>& pattern)
{
    bool ok = true;
    md_foreach(const_cast<MdArray<R>&>(pattern), [&](auto& v) {
        if (v.imag() != 0 || (v.real() != 0 && v.real() != 1))
            ok = false;
    });
    if (!ok)
        throw ConfigError("sense: sampling pattern must be binary");
}

/// SENSE operator A = P F C for fixed coil maps and sampling pattern.
/// Images carry the map-set dim; k-space carries the coil dim. Supports any
/// number of map sets (soft-SENSE).
template<class R>
Linop<R> build_sense(const MdArray<R>& coils, const MdArray<R>& pattern)
{
    check_pattern_binary(pattern);
    if (coils.rank() != max_rank || pattern.rank() != max_rank)
        throw ShapeError("sense: coils/pattern must have rank 16");

    SenseDims sd;
    sd.x = coils.dims()[dim_x];
    sd.y = coils.dims()[dim_y];
    sd.coils = coils.dims()[dim_coil];
    sd.maps = coils.dims()[dim_maps];
    sd.batch = coils.dims()[dim_batch];

    Dims img = sd.image(), cimg = sd.coil_img();
    auto C = coils.clone();
    auto P = pattern.clone();

    auto fwd = [=](const MdArray<R>& x) {
        Dims iter = sd.coil_maps();
        iter[dim_batch] = sd.batch;
        MdArray<R> ci(cimg);
        md_fmac2(iter, ci, detail::stride_for(cimg, iter), x, detail::stride_for(img, iter),
                 C, detail::stride_into(C, iter));
        auto k = dft(ci, fft_flags, false);
        MdArray<R> out(cimg);
        md_mul2(cimg, out, out.strides(), k, k.strides(), P, detail::stride_into(P, cimg));
        return out;
    };
    auto adj = [=](const MdArray<R>& y) {
        MdArray<R> t(cimg);
        md_mul2(cimg, t, t.strides(), y, y.strides(), P, detail::stride_into(P, cimg));
        auto ci = dft(t, fft_flags, true);
        Dims iter = sd.coil_maps();
        iter[dim_batch] = sd.batch;
        MdArray<R> x(img);
        md_zfmacc2(iter, x, detail::stride_for(img, iter), ci, detail::stride_for(cimg, iter),
                   C, detail::stride_into(C, iter));
        return x;
    };
    return Linop<R>(img, cimg, fwd, adj);
}

/// x0 = A^H y, the canonical network initialization.
template<class R>
MdArray<R> adjoint_recon(const Linop<R>& sense, const MdArray<R>& kspace)
{
    return sense.adjoint(kspace);
}

// ---------------------------------------------------------------------------
// conjugate gradients
// ---------------------------------------------------------------------------

struct CgStatus {
    long iterations = 0;
    double rel_residual = 0;
    bool converged = false;
};

/// Solve M x = b for a Hermitian positive-definite map given as a callback.
template<class R, class Op>
MdArray<R> cg_solve(Op&& op, const MdArray<R>& b, long max_iter, double tol, CgStatus* status = nullptr)
{
    MdArray<R> x(b.dims());
    MdArray<R> r = b.clone();
    MdArray<R> p = r.clone();
    const double bnorm = md_znorm(b);
    double rs = md_zdot(r, r).real();
    CgStatus st;
    if (bnorm == 0) {
        if (status)
            *status = {0, 0.0, true};
        return x;
    }
    for (st.iterations = 0; st.iterations < max_iter; st.iterations++) {
        if (std::sqrt(rs) <= tol * bnorm) {
            st.converged = true;
            break;
        }
        MdArray<R> ap = op(p);
        double pap = md_zdot(p, ap).real();
        if (!std::isfinite(pap) || pap <= 0)
            throw SolverError("cg: numerical breakdown (p^H A p = " + std::to_string(pap) + ")");
        R alpha = R(rs / pap);
        md_axpy(x, std::complex<R>(alpha), p);
        md_axpy(r, std::complex<R>(-alpha), ap);
        double rs_new = md_zdot(r, r).real();
        if (!std::isfinite(rs_new))
            throw SolverError("cg: non-finite residual");
        R beta = R(rs_new / rs);
        md_zip(p, r, [beta](auto& pv, const auto& rv) { pv = rv + beta * pv; });
        rs = rs_new;
    }
    st.rel_residual = std::sqrt(rs) / bnorm;
    st.converged = st.converged || st.rel_residual <= tol;
    if (status)
        *status = st;
    return x;
}

/// Solve (A^H A + lambda) x = b by conjugate gradients.
template<class R>
MdArray<R> cg_normal_solve(const Linop<R>& a, R lambda, const MdArray<R>& b, long max_iter,
                           double tol, CgStatus* status = nullptr)
{
    if (lambda < 0)
        throw ConfigError("cg_normal_solve: lambda must be nonnegative");
    return cg_solve<R>([&](const MdArray<R>& v) {
        auto w = a.normal(v);
        md_axpy(w, std::complex<R>(lambda), v);
        return w;
    }, b, max_iter, tol, status);
}

// ---------------------------------------------------------------------------
// parametrized inverse operator
// ---------------------------------------------------------------------------

/// Inverse of a parametrized positive-definite self-adjoint operator.
///
/// Given S with inputs (x, p_1..p_k) applying S_p x (linear and self-adjoint
/// in x for admissible parameters), this container computes S^-1(y, p...) by
/// conjugate gradients. Derivatives are expressed through S itself:
///   D_y S^-1 = S_p^-1,
///   D_p S^-1 dp = -S_p^-1 (D_p S|_{x*, p} dp),  x* = S^-1(y, p),
/// with adjoints composed accordingly; every inverse application is another
/// CG solve. The wrapped operator is owned by the container and must not be
/// applied elsewhere.
template<class R>
class InverseNode : public NlopNode<R> {
public:
    InverseNode(Nlop<R> s, long max_iter, double tol)
        : s_(std::move(s)), max_iter_(max_iter), tol_(tol)
    {
        if (s_.n_out() != 1)
            throw ConfigError("inverse: operator must have a single output");
        if (s_.n_in() < 2)
            throw ConfigError("inverse: operator needs an x input and at least one parameter");
        if (s_.out_dims(0) != s_.in_dims(0))
            throw ConfigError("inverse: operator must map x to its own shape");
    }

    std::string name() const override { return "inverse"; }
    int n_in() const override { return s_.n_in(); }
    int n_out() const override { return 1; }
    const Dims& in_dims(int i) const override { return i == 0 ? s_.out_dims(0) : s_.in_dims(i); }
    const Dims& out_dims(int) const override { return s_.in_dims(0); }

    void forward(std::span<const MdArray<R>> in, std::span<MdArray<R>> out, bool store) override
    {
        params_.clear();
        for (int i = 1; i < int(in.size()); i++)
            params_.push_back(in[i].clone());
        xstar_ = cg_apply(in[0], &last_status_);
        out[0] = xstar_.clone();
        if (!store) {
            // inputs stay: derivative evaluation re-solves from them
        }
        settled_ = false;
        this->bump_generation();
    }

    void deriv(int, int i, const MdArray<R>& dx, MdArray<R>& dy) override
    {
        this->require_forward();
        if (i == 0) {
            dy = cg_apply(dx, nullptr);
            return;
        }
        settle();
        auto w = s_.derivative(0, i, dx);
        dy = cg_apply(w, nullptr);
        md_foreach(dy, [](auto& v) { v = -v; });
    }

    void adjoint(int, int i, const MdArray<R>& dy, MdArray<R>& dx) override
    {
        this->require_forward();
        auto z = cg_apply(dy, nullptr); // S_p^-1 is self-adjoint
        if (i == 0) {
            dx = std::move(z);
            return;
        }
        settle();
        dx = s_.adjoint_derivative(0, i, z);
        md_foreach(dx, [](auto& v) { v = -v; });
    }

    void adjoint_all(int o, const MdArray<R>& dy, std::vector<MdArray<R>>& dx) override
    {
        this->require_forward();
        auto z = cg_apply(dy, nullptr);
        settle();
        dx = s_.adjoint_all(0, z);
        for (int i = 1; i < int(dx.size()); i++)
            md_foreach(dx[i], [](auto& v) { v = -v; });
        dx[0] = std::move(z);
        (void)o;
    }

    const CgStatus& last_status() const { return last_status_; }

private:
    std::vector<MdArray<R>> assemble(const MdArray<R>& x) const
    {
        std::vector<MdArray<R>> in;
        in.push_back(x);
        for (const auto& p : params_)
            in.push_back(p);
        return in;
    }

    MdArray<R> cg_apply(const MdArray<R>& b, CgStatus* status)
    {
        CgStatus st;
        auto x = cg_solve<R>([&](const MdArray<R>& v) { return s_.apply(assemble(v))[0]; },
                             b, max_iter_, tol_, &st);
        settled_ = false;
        if (status)
            *status = st;
        return x;
    }

    /// Re-apply S at (x*, p) so that its derivative state matches Eq.-12's
    /// evaluation point.
    void settle()
    {
        if (settled_)
            return;
        s_.apply(assemble(xstar_));
        settled_ = true;
    }

    Nlop<R> s_;
    long max_iter_;
    double tol_;
    std::vector<MdArray<R>> params_;
    MdArray<R> xstar_;
    CgStatus last_status_;
    bool settled_ = false;
};

template<class R>
Nlop<R> make_inverse_nlop(Nlop<R> s, long max_iter = 10, double tol = 1e-6)
{
    return Nlop<R>(std::make_shared<InverseNode<R>>(std::move(s), max_iter, tol));
}

// ---------------------------------------------------------------------------
// model fragments shared by the unrolled networks
// ---------------------------------------------------------------------------

namespace detail {

template<class R>
std::shared_ptr<TenMulNode<R>> tenmul(const std::string& name, const Dims& iter,
                                      const Dims& out, const Dims& a, const Dims& b)
{
    return std::make_shared<TenMulNode<R>>(name, iter, out, stride_for(out, iter),
                                           a, stride_for(a, iter), b, stride_for(b, iter));
}

/// coil images = sum_maps coils * image
template<class R>
Model<R> coil_mul_fragment(const SenseDims& sd)
{
    Dims iter = sd.coil_maps();
    Model<R> m;
    m.op = Nlop<R>(tenmul<R>("coil_mul", iter, sd.coil_img(), sd.image(), sd.coil_maps()));
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}, {"coils", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

/// image = sum_coils conj(coils) * coil images
template<class R>
Model<R> coil_adj_fragment(const SenseDims& sd)
{
    Dims iter = sd.coil_maps();
    auto conj = Nlop<R>(std::make_shared<ZconjNode<R>>(sd.coil_maps()));
    auto mul = Nlop<R>(tenmul<R>("coil_adj", iter, sd.image(), sd.coil_img(), sd.coil_maps()));
    Model<R> m;
    m.op = link(combine(conj, mul), 0, 2); // conj output -> mul's coil slot
    m.args = {{"coils", ArgKind::Data, {}, nullptr, false}, {"x", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

template<class R>
Model<R> pattern_mul_fragment(const SenseDims& sd, const std::string& name)
{
    Model<R> m;
    m.op = Nlop<R>(tenmul<R>(name, sd.coil_img(), sd.coil_img(), sd.coil_img(), sd.pattern()));
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}, {"pattern", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

template<class R>
Model<R> fft_fragment(const SenseDims& sd, bool inverse)
{
    Model<R> m;
    m.op = nlop_from_linop(Linop<R>(sd.coil_img(), sd.coil_img(),
                                    [inverse](const MdArray<R>& x) { return dft(x, fft_flags, inverse); },
                                    [inverse](const MdArray<R>& y) { return dft(y, fft_flags, !inverse); }),
                           inverse ? "ifft" : "fft");
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

/// A x = P F C x with coils and pattern as data inputs.
template<class R>
Model<R> sense_forward_fragment(const SenseDims& sd)
{
    auto m = model_chain(coil_mul_fragment<R>(sd), fft_fragment<R>(sd, false), "x");
    return model_chain(m, pattern_mul_fragment<R>(sd, "sample"), "x");
}

/// A^H y = C^H F^H P^H y.
template<class R>
Model<R> sense_adjoint_fragment(const SenseDims& sd)
{
    auto m = model_chain(pattern_mul_fragment<R>(sd, "sample_adj"), fft_fragment<R>(sd, true), "x");
    return model_chain(m, coil_adj_fragment<R>(sd), "x");
}

/// A^H A x (pattern applied once; P^H P = P).
template<class R>
Model<R> sense_normal_fragment(const SenseDims& sd)
{
    auto m = model_chain(coil_mul_fragment<R>(sd), fft_fragment<R>(sd, false), "x");
    m = model_chain(m, pattern_mul_fragment<R>(sd, "sample"), "x");
    m = model_chain(m, fft_fragment<R>(sd, true), "x");
    return model_chain(m, coil_adj_fragment<R>(sd), "x");
}

/// Multiply by a real scalar parameter (broadcast), e.g. a trained step size.
template<class R>
Model<R> scalar_mul_fragment(const SenseDims& sd, const std::string& scalar_name, ArgKind kind)
{
    Dims sdims(max_rank, 1);
    Dims iter = sd.image();
    Model<R> m;
    m.op = Nlop<R>(tenmul<R>("scale_" + scalar_name, iter, sd.image(), sd.image(), sdims));
    m.args = {{"x", ArgKind::Data, {}, nullptr, false}, {scalar_name, kind, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

template<class R>
Model<R> sub_fragment(Dims dims)
{
    Model<R> m;
    m.op = nlop_add<R>(dims, true);
    m.args = {{"a", ArgKind::Data, {}, nullptr, false}, {"b", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

template<class R>
Model<R> add_fragment(Dims dims)
{
    Model<R> m;
    m.op = nlop_add<R>(dims, false);
    m.args = {{"a", ArgKind::Data, {}, nullptr, false}, {"b", ArgKind::Data, {}, nullptr, false}};
    m.out_names = {"out"};
    return m;
}

} // namespace detail

/// Data-scaling convention: scale = 1 / max |x0| per batch item, applied to
/// the k-space (and reference during training); the inverse is re-applied to
/// the network output.
template<class R>
struct NormalizeResult {
    MdArray<R> scale; // per-item, dims [1,...,1,B]
    MdArray<R> scaled;
};

template<class R>
NormalizeResult<R> normalize(const MdArray<R>& x0, const MdArray<R>& y)
{
    const long b = x0.dims()[dim_batch];
    Dims sdims(max_rank, 1);
    sdims[dim_batch] = b;
    NormalizeResult<R> r;
    r.scale = MdArray<R>(sdims);
    for (long k = 0; k < b; k++) {
        double m = md_zmax_abs(x0.slice(dim_batch, k));
        if (m == 0)
            throw SolverError("normalize: adjoint reconstruction is zero for item " + std::to_string(k));
        r.scale.data()[k] = std::complex<R>(R(1.0 / m), 0);
    }
    r.scaled = MdArray<R>(y.dims());
    md_mul2(y.dims(), r.scaled, r.scaled.strides(), y, y.strides(),
            r.scale, detail::stride_into(r.scale, y.dims()));
    return r;
}

template<class R>
MdArray<R> apply_scale(const MdArray<R>& a, const MdArray<R>& scale, bool invert)
{
    MdArray<R> s = scale.clone();
    if (invert)
        md_foreach(s, [](auto& v) { v = std::complex<R>(1) / v; });
    MdArray<R> out(a.dims());
    md_mul2(a.dims(), out, out.strides(), a, a.strides(), s, detail::stride_into(s, a.dims()));
    return out;
}

// ---------------------------------------------------------------------------
// Variational Network
// ---------------------------------------------------------------------------

struct VarNetConfig {
    long iterations = 10; // T
    long filters = 24;    // N_k
    long kernel = 11;
    long rbf = 31;        // N_w

    long im_x = 0, im_y = 0, coils = 1, maps = 1, batch = 1;

    SenseDims sense() const { return {im_x, im_y, coils, maps, batch}; }

    void validate() const
    {
        if (iterations < 1 || filters < 1 || kernel < 1 || rbf < 2)
            throw ConfigError("varnet: invalid hyperparameters");
        if (im_x < 1 || im_y < 1)
            throw ConfigError("varnet: image size not set");
    }
};

namespace detail {

/// Regularizer gradient of one VarNet iteration:
/// sum_i K_i^T rbf_i(Re(K_i x)), on the first map set only.
template<class R>
Model<R> varnet_reg_fragment(const VarNetConfig& cfg, const std::string& prefix)
{
    SenseDims sd = cfg.sense();
    SenseDims sd1 = sd;
    sd1.maps = 1;

    Dims img1 = sd1.image();
    Model<R> m;
    if (sd.maps > 1) {
        Model<R> sl;
        sl.op = nlop_from_linop(linop_slice<R>(sd.image(), dim_maps, 0, 1), "first_map");
        sl.args = {{"x", ArgKind::Data, {}, nullptr, false}};
        sl.out_names = {"out"};
        m = std::move(sl);
    }

    // complex image -> two real channels on dim_chan
    Model<R> rc;
    rc.op = Nlop<R>(std::make_shared<RealChanNode<R>>(img1, dim_chan));
    rc.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    rc.out_names = {"out"};
    m = m.valid() ? model_chain(m, rc, "x") : std::move(rc);

    Dims chan_img = img1;
    chan_img[dim_chan] = 2;

    ConvSpec spec;
    spec.in_dims = chan_img;
    spec.axes = {dim_x, dim_y};
    spec.kernel = {cfg.kernel, cfg.kernel};
    spec.chan_dim = dim_chan;
    spec.out_channels = cfg.filters;
    spec.pad_same = true;

    auto conv = conv_layer<R>(prefix + "_k", spec);
    conv.args[conv.arg_index(prefix + "_k_w")].real_weights = true;
    m = model_chain(m, conv, "x");

    Dims feat = spec.out_dims();
    // discard the imaginary part of the convolved images
    Model<R> re;
    re.op = nlop_zreal<R>(feat);
    re.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    re.out_names = {"out"};
    m = model_chain(m, re, "x");

    // trained activation from Gaussian radial basis functions on [-1, 1]
    std::vector<R> centers(cfg.rbf);
    R spacing = R(2.0 / double(cfg.rbf - 1));
    for (long j = 0; j < cfg.rbf; j++)
        centers[j] = R(-1) + R(j) * spacing;
    Model<R> act;
    act.op = Nlop<R>(std::make_shared<RbfNode<R>>(feat, dim_chan, centers, spacing));
    act.args = {{"x", ArgKind::Data, {}, nullptr, false},
                {prefix + "_rbf_w", ArgKind::Weights, Initializer::constant(0), nullptr, true}};
    act.out_names = {"out"};
    m = model_chain(m, act, "x");

    ConvSpec tspec = spec;
    tspec.transposed = true;
    auto convt = conv_layer<R>(prefix + "_k", tspec);
    convt.args[convt.arg_index(prefix + "_k_w")].real_weights = true;
    m = model_chain(m, convt, "x");

    Model<R> cc;
    cc.op = Nlop<R>(std::make_shared<ChanCplxNode<R>>(chan_img, dim_chan));
    cc.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    cc.out_names = {"out"};
    m = model_chain(m, cc, "x");

    if (sd.maps > 1) {
        Model<R> em;
        em.op = nlop_from_linop(Linop<R>(img1, sd.image(),
                                         [s = linop_slice<R>(sd.image(), dim_maps, 0, 1)](const MdArray<R>& v) {
                                             return s.adjoint(v);
                                         },
                                         [s = linop_slice<R>(sd.image(), dim_maps, 0, 1)](const MdArray<R>& v) {
                                             return s.forward(v);
                                         }),
                                "embed_map");
        em.args = {{"x", ArgKind::Data, {}, nullptr, false}};
        em.out_names = {"out"};
        m = model_chain(m, em, "x");
    }
    // shared filter weights between K and K^T
    return model_dedupe(std::move(m));
}

} // namespace detail

/// One VarNet update (Eq.-9 form):
/// x' = x - sum_i K_i^T rbf_i(Re(K_i x)) - lambda_t (A^H A x - x0),
/// where x0 = A^H y enters as the data argument "x0". Arguments: x, x0,
/// coils, pattern and the iteration's weights.
template<class R>
Model<R> varnet_step_model(const VarNetConfig& cfg, const std::string& prefix)
{
    SenseDims sd = cfg.sense();
    Dims img = sd.image();

    Model<R> reg = detail::varnet_reg_fragment<R>(cfg, prefix);

    // data-consistency gradient scaled by the trained step size
    Model<R> dc = detail::sense_normal_fragment<R>(sd);
    dc = model_chain(dc, detail::sub_fragment<R>(img), "a"); // (A^H A x) - b
    dc = model_chain(dc, detail::scalar_mul_fragment<R>(sd, prefix + "_lam", ArgKind::Weights), "x");
    auto& lam = dc.args[dc.arg_index(prefix + "_lam")];
    lam.init = Initializer::constant(1.0);
    lam.real_weights = true;
    lam.prox = std::make_shared<NonNegProx<R>>();

    Model<R> m = model_combine(reg, dc);                          // outputs: [reg, dc]
    m = model_chain(m, detail::add_fragment<R>(img), "a", 0);     // outputs: [dc, reg+?]
    m = model_link(m, 0, "b");                                    // reg + dc
    m = model_chain(m, detail::sub_fragment<R>(img), "b", 0);     // a - (reg + dc)
    for (auto& a : m.args) {
        if (a.name == "a")
            a.name = "x"; // minuend is x^t, merged with reg/dc inputs below
        else if (a.name == "b")
            a.name = "x0";
    }
    return model_dedupe(std::move(m));
}

/// Build the unrolled Variational Network. Data inputs: kspace, coils,
/// pattern; weights per iteration: it<t>_k_w (conv filters with 2 real
/// channels), it<t>_rbf_w, it<t>_lam (projected to >= 0). The single output
/// is the reconstructed image (first map set updated in place).
template<class R>
Model<R> build_varnet(const VarNetConfig& cfg)
{
    cfg.validate();
    SenseDims sd = cfg.sense();
    Dims img = sd.image();

    // x0 = A^H y feeds both the initialization and every step's dc term
    Model<R> adj = detail::sense_adjoint_fragment<R>(sd);
    adj.args[adj.arg_index("x")].name = "kspace";

    Model<R> fork;
    fork.op = Nlop<R>(std::make_shared<ForkNode<R>>(img, 2));
    fork.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    fork.out_names = {"out", "x0src"};

    Model<R> net = model_chain(adj, fork, "x");
    for (long t = 0; t < cfg.iterations; t++) {
        auto step = varnet_step_model<R>(cfg, "it" + std::to_string(t));
        net = model_chain(net, step, "x", net.output_index("out"));
        net = model_dedupe(std::move(net)); // merge coils/pattern/x0 across steps
    }
    net = model_link(net, net.output_index("x0src"), "x0");
    net.rebatch = [cfg](long b) {
        VarNetConfig c = cfg;
        c.batch = b;
        return build_varnet<R>(c);
    };
    return net;
}

// ---------------------------------------------------------------------------
// MoDL
// ---------------------------------------------------------------------------

struct ModlConfig {
    long iterations = 10;  // T, shared weights
    long layers = 5;       // L conv layers per residual block
    long filters = 32;     // F_c complex filters
    long kernel = 3;
    long cg_iter = 10;
    double cg_tol = 1e-7;
    double lambda_init = 0.05;

    long im_x = 0, im_y = 0, coils = 1, maps = 1, batch = 1;
    bool train_mode = true;

    SenseDims sense() const { return {im_x, im_y, coils, maps, batch}; }

    void validate() const
    {
        if (iterations < 1 || layers < 1 || filters < 1 || cg_iter < 1)
            throw ConfigError("modl: invalid hyperparameters");
        if (im_x < 1 || im_y < 1)
            throw ConfigError("modl: image size not set");
    }
};

namespace detail {

/// Residual denoiser D_W: L conv layers (batch norm + CReLU between them)
/// with a skip connection, on the first map set. Block statistics outputs
/// are suffixed with `stat_suffix` so unrolled copies stay distinguishable.
template<class R>
Model<R> modl_denoiser_fragment(const ModlConfig& cfg, const std::string& stat_suffix)
{
    SenseDims sd = cfg.sense();
    SenseDims sd1 = sd;
    sd1.maps = 1;
    Dims img1 = sd1.image();

    Model<R> m;
    if (sd.maps > 1) {
        Model<R> sl;
        sl.op = nlop_from_linop(linop_slice<R>(sd.image(), dim_maps, 0, 1), "first_map");
        sl.args = {{"x", ArgKind::Data, {}, nullptr, false}};
        sl.out_names = {"out"};
        m = std::move(sl);
    }

    Dims cur = img1;
    const unsigned long bn_flags = (1UL << dim_x) | (1UL << dim_y) | (1UL << dim_batch);
    for (long l = 0; l < cfg.layers; l++) {
        const bool last = l + 1 == cfg.layers;
        ConvSpec spec;
        spec.in_dims = cur;
        spec.axes = {dim_x, dim_y};
        spec.kernel = {cfg.kernel, cfg.kernel};
        spec.chan_dim = dim_chan;
        spec.out_channels = last ? 1 : cfg.filters;
        spec.pad_same = true;
        auto conv = conv_layer<R>("dw" + std::to_string(l), spec, last);
        m = m.valid() ? model_chain(m, conv, "x") : std::move(conv);
        cur = spec.out_dims();
        if (last)
            break;

        auto bn = batchnorm_layer<R>("dw" + std::to_string(l) + "_bn", cur, bn_flags, cfg.train_mode);
        if (!stat_suffix.empty() && cfg.train_mode)
            for (auto& n : bn.out_names)
                if (n != "out")
                    n += stat_suffix;
        m = model_chain(m, bn, "x");

        // per-channel trainable affine after normalization
        Dims gdims(max_rank, 1);
        gdims[dim_chan] = cur[dim_chan];
        Model<R> gamma;
        gamma.op = Nlop<R>(tenmul<R>("bn_scale" + std::to_string(l), cur, cur, cur, gdims));
        gamma.args = {{"x", ArgKind::Data, {}, nullptr, false},
                      {"dw" + std::to_string(l) + "_g", ArgKind::Weights, Initializer::constant(1), nullptr, false}};
        gamma.out_names = {"out"};
        m = model_chain(m, gamma, "x");

        Model<R> beta;
        beta.op = Nlop<R>(std::make_shared<BroadcastAddNode<R>>(cur, gdims));
        beta.args = {{"x", ArgKind::Data, {}, nullptr, false},
                     {"dw" + std::to_string(l) + "_beta", ArgKind::Weights, Initializer::constant(0), nullptr, false}};
        beta.out_names = {"out"};
        m = model_chain(m, beta, "x");

        Model<R> act;
        act.op = Nlop<R>(std::make_shared<CReluNode<R>>(cur));
        act.args = {{"x", ArgKind::Data, {}, nullptr, false}};
        act.out_names = {"out"};
        m = model_chain(m, act, "x");
    }

    if (sd.maps > 1) {
        Model<R> em;
        em.op = nlop_from_linop(Linop<R>(img1, sd.image(),
                                         [s = linop_slice<R>(sd.image(), dim_maps, 0, 1)](const MdArray<R>& v) {
                                             return s.adjoint(v);
                                         },
                                         [s = linop_slice<R>(sd.image(), dim_maps, 0, 1)](const MdArray<R>& v) {
                                             return s.forward(v);
                                         }),
                                "embed_map");
        em.args = {{"x", ArgKind::Data, {}, nullptr, false}};
        em.out_names = {"out"};
        m = model_chain(m, em, "x");
    }

    // residual skip: D_W(x) = x + cnn(x)
    Model<R> fork;
    fork.op = Nlop<R>(std::make_shared<ForkNode<R>>(sd.image(), 2));
    fork.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    fork.out_names = {"cnn_in", "skip"};
    Model<R> f = model_chain(fork, m, "x", 0);                  // outputs [skip, cnn_out]
    f = model_chain(f, add_fragment<R>(sd.image()), "a", 1);    // cnn_out -> add.a
    f = model_link(f, 0, "b");                                  // skip -> add.b
    return f;
}

/// S(x; lambda, coils, pattern) = A^H A x + lambda x, the operator family
/// inverted by the data-consistency block.
template<class R>
Model<R> modl_normal_plus_lambda(const SenseDims& sd)
{
    Model<R> nrm = sense_normal_fragment<R>(sd);                 // args x coils pattern
    Model<R> lam = scalar_mul_fragment<R>(sd, "lambda", ArgKind::Data);
    Model<R> m = model_combine(nrm, lam);                        // outs [A^HAx, lam x]
    m = model_chain(m, add_fragment<R>(sd.image()), "a", 0);
    m = model_link(m, 0, "b");
    // merge the two x inputs; order afterwards: x, coils, pattern, lambda
    m = model_dedupe(std::move(m));
    // reorder arguments to (x, lambda, coils, pattern) for the inverse node
    // by relabeling: inverse treats input 0 as x and the rest as parameters.
    return m;
}

} // namespace detail

/// One MoDL update: x' = (A^H A + lambda)^{-1} (x0 + lambda D_W(x)).
/// Arguments: x, x0, coils, pattern, lam_log and the denoiser weights.
template<class R>
Model<R> modl_step_model(const ModlConfig& cfg, const std::string& stat_suffix = "")
{
    SenseDims sd = cfg.sense();
    Dims img = sd.image();
    Dims sdims(max_rank, 1);

    Model<R> dw = detail::modl_denoiser_fragment<R>(cfg, stat_suffix);

    // lambda = exp(lam_log), shared between the rhs and the inverse
    Model<R> lam;
    lam.op = Nlop<R>(std::make_shared<ExpRealNode<R>>(sdims));
    lam.args = {{"lam_log", ArgKind::Weights, Initializer::constant(std::log(cfg.lambda_init)), nullptr, true}};
    lam.out_names = {"out"};
    Model<R> lam_fork;
    lam_fork.op = Nlop<R>(std::make_shared<ForkNode<R>>(sdims, 2));
    lam_fork.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    lam_fork.out_names = {"lam_rhs", "lam_inv"};
    lam = model_chain(lam, lam_fork, "x");

    // rhs = x0 + lambda D_W(x)
    Model<R> rhs = model_chain(dw, detail::scalar_mul_fragment<R>(sd, "lam_mul", ArgKind::Data), "x");
    rhs = model_chain(rhs, detail::add_fragment<R>(img), "a");
    rhs.out_names[rhs.output_index("out")] = "rhs";
    // rhs args now: x (denoiser), its weights/statistics, lam_mul, b (= x0)

    // inverse of S(x; coils, pattern, lambda); input 0 is the solve side,
    // the remaining inputs are parameters in Eq.-12's sense
    auto s_model = detail::modl_normal_plus_lambda<R>(sd);
    Model<R> inv;
    inv.op = make_inverse_nlop<R>(s_model.op, cfg.cg_iter, cfg.cg_tol);
    inv.args = s_model.args;
    inv.args[0] = {"y", ArgKind::Data, {}, nullptr, false};
    inv.out_names = {"out"};

    Model<R> m = model_combine(lam, model_combine(rhs, inv));
    m = model_link(m, m.output_index("lam_rhs"), "lam_mul");
    m = model_link(m, m.output_index("lam_inv"), "lambda");
    m = model_link(m, m.output_index("rhs"), "y");
    for (auto& a : m.args)
        if (a.name == "b")
            a.name = "x0";
    return model_dedupe(std::move(m));
}

/// Build the unrolled MoDL network with weights shared across iterations.
/// Data inputs: kspace, coils, pattern; weights: dw<l>_w/_b/_g/_beta and
/// lam_log; moving statistics dw<l>_bn_mean/_var ride along (the designated
/// update comes from the last unrolled iteration).
template<class R>
Model<R> build_modl(const ModlConfig& cfg)
{
    cfg.validate();
    SenseDims sd = cfg.sense();
    Dims img = sd.image();

    Model<R> adj = detail::sense_adjoint_fragment<R>(sd);
    adj.args[adj.arg_index("x")].name = "kspace";

    Model<R> fork;
    fork.op = Nlop<R>(std::make_shared<ForkNode<R>>(img, 2));
    fork.args = {{"x", ArgKind::Data, {}, nullptr, false}};
    fork.out_names = {"out", "x0src"};

    Model<R> net = model_chain(adj, fork, "x");
    for (long t = 0; t < cfg.iterations; t++) {
        const bool last = t + 1 == cfg.iterations;
        auto step = modl_step_model<R>(cfg, last ? "" : "@" + std::to_string(t));
        net = model_chain(net, step, "x", net.output_index("out"));
        net = model_dedupe(std::move(net)); // weight sharing across iterations
    }
    net = model_link(net, net.output_index("x0src"), "x0");
    net.rebatch = [cfg](long b) {
        ModlConfig c = cfg;
        c.batch = b;
        return build_modl<R>(c);
    };
    return net;
}

/// Plain CG-SENSE baseline: x = (A^H A + lambda)^{-1} A^H y.
template<class R>
MdArray<R> cg_sense(const Linop<R>& sense, const MdArray<R>& kspace, R lambda,
                    long max_iter = 30, double tol = 1e-6)
{
    auto b = sense.adjoint(kspace);
    return cg_normal_solve(sense, lambda, b, max_iter, tol);
}

} // namespace mdnn
