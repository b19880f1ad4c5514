#pragma once

#include <CLI11.hpp>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cfl.hpp"
#include "metrics.hpp"
#include "simulate.hpp"

namespace mdnn {
namespace cli {

inline void check_dim_match(const std::string& file_a, const MdArray<float>& a,
                            const std::string& file_b, const MdArray<float>& b, int dim)
{
    if (a.dims()[dim] != b.dims()[dim])
        throw ShapeError("file '" + file_a + "' dimension " + std::to_string(dim) + " (="
                         + std::to_string(a.dims()[dim]) + ") does not match file '" + file_b
                         + "' dimension " + std::to_string(dim) + " (=" + std::to_string(b.dims()[dim]) + ")");
}

/// Estimate the sampling pattern from k-space: a phase-encode line counts as
/// sampled iff any coil of any item has a nonzero value there.
inline MdArray<float> estimate_pattern(const MdArray<float>& kspace)
{
    Dims pd(max_rank, 1);
    pd[dim_y] = kspace.dims()[dim_y];
    MdArray<float> p(pd);
    auto kc = kspace.clone();
    const auto* kv = kc.data();
    Dims str = default_strides(kspace.dims());
    const long ny = kspace.dims()[dim_y];
    const long line = str[dim_y];
    const long total = kspace.size();
    for (long y = 0; y < ny; y++) {
        bool any = false;
        for (long off = y * line; off < total && !any; off += ny * line)
            for (long k = 0; k < line; k++)
                if (kv[off + k] != std::complex<float>(0)) {
                    any = true;
                    break;
                }
        p.data()[y] = any ? 1.f : 0.f;
    }
    return p;
}

struct ReconetOptions {
    std::string network = "varnet";
    bool do_train = false, do_apply = false;
    bool normalize = false;
    bool deterministic = false;
    std::string pattern_file, init_weights;
    long iterations = -1, filters = -1, kernel = -1, rbf = -1;
    long layers = -1, cg_iter = -1;
    long epochs = 10, batch_size = 10;
    double lr = -1;
    std::string optimizer;
    uint64_t seed = 42;
    int threads = 0;
    std::string kspace_file, coils_file, weights_dir, target_file;
};

inline void fill_meta(WeightsBundle& b, const ReconetOptions& o, const VarNetConfig& vn,
                      const ModlConfig& md)
{
    b.meta["network"] = o.network;
    b.meta["normalize"] = o.normalize ? "1" : "0";
    b.meta["seed"] = std::to_string(o.seed);
    if (o.network == "varnet") {
        b.meta["iterations"] = std::to_string(vn.iterations);
        b.meta["filters"] = std::to_string(vn.filters);
        b.meta["kernel"] = std::to_string(vn.kernel);
        b.meta["rbf"] = std::to_string(vn.rbf);
    } else {
        b.meta["iterations"] = std::to_string(md.iterations);
        b.meta["layers"] = std::to_string(md.layers);
        b.meta["filters"] = std::to_string(md.filters);
        b.meta["kernel"] = std::to_string(md.kernel);
        b.meta["cg_iter"] = std::to_string(md.cg_iter);
    }
}

inline long meta_long(const WeightsBundle& b, const std::string& key, long fallback)
{
    auto it = b.meta.find(key);
    return it == b.meta.end() ? fallback : std::stol(it->second);
}

inline int cmd_reconet(ReconetOptions o)
{
#ifdef _OPENMP
    if (o.threads > 0)
        omp_set_num_threads(o.threads);
#endif
    if (o.do_train == o.do_apply)
        throw ConfigError("reconet: exactly one of --train / --apply is required");
    if (o.network != "varnet" && o.network != "modl")
        throw ConfigError("reconet: --network must be varnet or modl");

    auto kspace = cfl_read(o.kspace_file);
    auto coils = cfl_read(o.coils_file);
    for (int d : {dim_x, dim_y, dim_coil, dim_batch})
        check_dim_match(o.coils_file, coils, o.kspace_file, kspace, d);

    MdArray<float> pattern = o.pattern_file.empty() ? estimate_pattern(kspace)
                                                    : cfl_read(o.pattern_file);
    check_dim_match(o.pattern_file.empty() ? "<estimated pattern>" : o.pattern_file, pattern,
                    o.kspace_file, kspace, dim_y);
    check_pattern_binary(pattern);

    const long n = kspace.dims()[dim_batch];
    const long maps = coils.dims()[dim_maps];

    VarNetConfig vn;
    ModlConfig md;
    vn.im_x = md.im_x = kspace.dims()[dim_x];
    vn.im_y = md.im_y = kspace.dims()[dim_y];
    vn.coils = md.coils = kspace.dims()[dim_coil];
    vn.maps = md.maps = maps;

    WeightsBundle bundle;
    if (o.do_apply || !o.init_weights.empty()) {
        bundle = WeightsBundle::load(o.do_apply ? o.weights_dir : o.init_weights);
        if (bundle.meta_or("network", o.network) != o.network)
            throw ConfigError("weights bundle was trained for network '"
                              + bundle.meta_or("network", "?") + "', not '" + o.network + "'");
        auto take = [&](const std::string& key, long& dst) { dst = meta_long(bundle, key, dst); };
        if (o.network == "varnet") {
            take("iterations", vn.iterations);
            take("filters", vn.filters);
            take("kernel", vn.kernel);
            take("rbf", vn.rbf);
        } else {
            take("iterations", md.iterations);
            take("layers", md.layers);
            take("filters", md.filters);
            take("kernel", md.kernel);
            take("cg_iter", md.cg_iter);
        }
        if (o.do_apply)
            o.normalize = bundle.meta_or("normalize", "0") == "1";
    }
    auto override_long = [](long flag, long& dst, const char* what, bool frozen) {
        if (flag < 0)
            return;
        if (frozen && flag != dst)
            throw ConfigError(std::string("flag --") + what + " conflicts with the weights bundle");
        dst = flag;
    };
    const bool frozen = o.do_apply;
    if (o.network == "varnet") {
        override_long(o.iterations, vn.iterations, "iterations", frozen);
        override_long(o.filters, vn.filters, "filters", frozen);
        override_long(o.kernel, vn.kernel, "kernel", frozen);
        override_long(o.rbf, vn.rbf, "rbf", frozen);
    } else {
        override_long(o.iterations, md.iterations, "iterations", frozen);
        override_long(o.layers, md.layers, "layers", frozen);
        override_long(o.filters, md.filters, "filters", frozen);
        override_long(o.cg_iter, md.cg_iter, "cg-iter", frozen);
    }

    // per-item scaling from the adjoint reconstruction
    MdArray<float> scale;
    if (o.normalize) {
        auto sense = build_sense<float>(coils, pattern);
        auto x0 = sense.adjoint(kspace);
        auto nr = normalize(x0, kspace);
        scale = nr.scale;
        kspace = nr.scaled;
    }

    if (o.do_train) {
        auto reference = cfl_read(o.target_file);
        for (int d : {dim_x, dim_y, dim_batch})
            check_dim_match(o.target_file, reference, o.kspace_file, kspace, d);
        if (o.normalize)
            reference = apply_scale(reference, scale, false);

        TrainConfig tc;
        tc.epochs = o.epochs;
        tc.batch_size = o.batch_size;
        tc.seed = o.seed;
        tc.deterministic = o.deterministic;
        tc.drop_last = true;
        if (!o.optimizer.empty())
            tc.algo = opt_algo_from_string(o.optimizer);
        else
            tc.algo = o.network == "varnet" ? OptAlgo::Ipalm : OptAlgo::Adam;
        tc.lr = o.lr > 0 ? o.lr : (o.network == "varnet" ? 1e-2 : 1e-3);

        Model<float> net;
        if (o.network == "varnet") {
            vn.batch = tc.batch_size;
            net = build_varnet<float>(vn);
        } else {
            md.batch = tc.batch_size;
            md.train_mode = true;
            net = build_modl<float>(md);
        }

        Dataset<float> data;
        data.add("kspace", kspace);
        data.add("coils", coils);
        data.add("reference", reference);
        data.arrays.emplace("pattern", pattern); // batch-independent input

        std::map<std::string, MdArray<float>> weights;
        for (const auto& [name, arr] : bundle.arrays)
            weights.emplace(name, arr);

        train(net, LossKind::Mse, data, tc, weights);

        WeightsBundle out;
        fill_meta(out, o, vn, md);
        out.meta["epochs"] = std::to_string(o.epochs);
        for (const auto& [name, arr] : weights)
            out.arrays.emplace(name, arr);
        out.save(o.weights_dir);
        return 0;
    }

    // apply
    std::map<std::string, MdArray<float>> weights;
    for (const auto& [name, arr] : bundle.arrays)
        weights.emplace(name, arr);

    SenseDims sdn{kspace.dims()[dim_x], kspace.dims()[dim_y], kspace.dims()[dim_coil], maps, n};
    MdArray<float> output(sdn.image());

    const long chunk = std::min(n, o.batch_size);
    Model<float> net;
    long built = -1;
    for (long pos = 0; pos < n; pos += chunk) {
        long cnt = std::min(chunk, n - pos);
        if (built != cnt) {
            if (o.network == "varnet") {
                vn.batch = cnt;
                net = build_varnet<float>(vn);
            } else {
                md.batch = cnt;
                md.train_mode = false;
                net = build_modl<float>(md);
            }
            built = cnt;
        }
        std::map<std::string, MdArray<float>> dmap;
        dmap["kspace"] = kspace.slice(dim_batch, pos, cnt).clone();
        dmap["coils"] = coils.slice(dim_batch, pos, cnt).clone();
        dmap["pattern"] = pattern;
        auto outs = net.op.apply(net.gather_inputs(weights, dmap));
        auto res = outs[net.output_index("out")];
        auto dst = output.slice(dim_batch, pos, cnt);
        md_copy2(dst.dims(), dst, dst.strides(), res, res.strides());
    }
    if (o.normalize)
        output = apply_scale(output, scale, true);
    cfl_write(o.target_file, output);
    return 0;
}

inline int run(std::vector<std::string> args)
{
    CLI::App app{"complex-valued autodiff toolbox for unrolled MRI reconstruction"};
    app.require_subcommand(1);

    // ---- simulate ----
    SimConfig sim;
    std::string sim_out = ".";
    auto* s = app.add_subcommand("simulate", "generate a synthetic phantom dataset");
    s->add_option("--slices", sim.slices, "number of slices");
    s->add_option("--size", sim.size, "image size (square)");
    s->add_option("--coils", sim.coils, "number of receive coils");
    s->add_option("--accel", sim.accel, "regular undersampling factor");
    s->add_option("--acl", sim.acl_lines, "auto-calibration lines");
    s->add_option("--sigma", sim.noise_sigma, "k-space noise standard deviation");
    s->add_option("--seed", sim.seed, "rng seed");
    s->add_option("--out", sim_out, "output directory");

    // ---- reconet ----
    ReconetOptions ro;
    auto* r = app.add_subcommand("reconet", "train or apply an unrolled reconstruction network");
    r->add_option("--network", ro.network, "varnet or modl");
    r->add_flag("--train", ro.do_train, "training mode");
    r->add_flag("--apply", ro.do_apply, "inference mode");
    r->add_flag("--normalize", ro.normalize, "scale data so max |A^H y| = 1 per item");
    r->add_flag("--deterministic", ro.deterministic, "bitwise reproducible execution");
    r->add_option("--pattern", ro.pattern_file, "sampling pattern file (else estimated)");
    r->add_option("--init", ro.init_weights, "warm-start weights bundle");
    r->add_option("-T,--iterations", ro.iterations, "unrolled iterations");
    r->add_option("--filters", ro.filters, "convolution filters");
    r->add_option("--kernel", ro.kernel, "convolution kernel size");
    r->add_option("--rbf", ro.rbf, "radial basis functions (varnet)");
    r->add_option("--layers", ro.layers, "conv layers per block (modl)");
    r->add_option("--cg-iter", ro.cg_iter, "cg iterations (modl)");
    r->add_option("--epochs", ro.epochs, "training epochs");
    r->add_option("--batch-size", ro.batch_size, "mini-batch size");
    r->add_option("--lr", ro.lr, "learning rate");
    r->add_option("--optimizer", ro.optimizer, "sgd, adam or ipalm");
    r->add_option("--seed", ro.seed, "rng seed");
    r->add_option("--threads", ro.threads, "md-function worker threads");
    r->add_option("kspace", ro.kspace_file, "k-space cfl")->required();
    r->add_option("coils", ro.coils_file, "coil sensitivities cfl")->required();
    r->add_option("weights", ro.weights_dir, "weights bundle directory")->required();
    r->add_option("target", ro.target_file, "reference cfl (train) / output cfl (apply)")->required();

    // ---- metrics ----
    std::string m_recon, m_ref, m_mask;
    auto* m = app.add_subcommand("metrics", "mse / psnr between magnitude images");
    m->add_option("reconstruction", m_recon)->required();
    m->add_option("reference", m_ref)->required();
    m->add_option("--mask", m_mask, "foreground mask cfl");

    std::vector<const char*> argv;
    argv.push_back("mdnn");
    for (auto& a : args)
        argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (s->parsed()) {
            auto data = simulate<float>(sim);
            cfl_write(sim_out + "/kspace", data.kspace);
            cfl_write(sim_out + "/coils", data.coils);
            cfl_write(sim_out + "/reference", data.reference);
            cfl_write(sim_out + "/pattern", data.pattern);
            return 0;
        }
        if (r->parsed())
            return cmd_reconet(ro);
        if (m->parsed()) {
            auto rec = cfl_read(m_recon);
            auto ref = cfl_read(m_ref);
            Metrics mt;
            if (!m_mask.empty()) {
                auto mask = cfl_read(m_mask);
                mt = eval_metrics(rec, ref, &mask);
            } else {
                mt = eval_metrics<float>(rec, ref);
            }
            std::printf("mse %.8g\n", mt.mse);
            if (std::isinf(mt.psnr))
                std::printf("psnr inf\n");
            else
                std::printf("psnr %.8g\n", mt.psnr);
            return 0;
        }
    } catch (const ShapeError& e) {
        std::cerr << "error (shape): " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error (io): " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error (config): " << e.what() << "\n";
        return 4;
    } catch (const SolverError& e) {
        std::cerr << "error (solver): " << e.what() << "\n";
        return 5;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace cli
} // namespace mdnn
