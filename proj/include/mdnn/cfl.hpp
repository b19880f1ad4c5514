#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mdarray.hpp"

namespace mdnn {

static_assert(std::endian::native == std::endian::little,
              "cfl i/o assumes a little-endian host");

/// File pair convention: `<base>.hdr` is a text header listing 16 dimensions
/// after a `# Dimensions` line; `<base>.cfl` is the raw payload of
/// interleaved single-precision (real, imag) values in column-major order.
/// Batched datasets stack along dimension 15.
inline void cfl_write(const std::string& base, const MdArray<float>& a)
{
    if (a.rank() > max_rank)
        throw IoError("cfl_write: rank too large");
    Dims dims(max_rank, 1);
    for (int d = 0; d < a.rank(); d++)
        dims[d] = a.dims()[d];

    auto parent = std::filesystem::path(base).parent_path();
    if (!parent.empty())
        std::filesystem::create_directories(parent);

    std::ofstream hdr(base + ".hdr");
    if (!hdr)
        throw IoError("cannot write " + base + ".hdr");
    hdr << "# Dimensions\n";
    for (int d = 0; d < max_rank; d++)
        hdr << dims[d] << (d + 1 < max_rank ? " " : "\n");
    hdr.close();

    auto flat = a.has_default_strides() ? a : a.clone();
    std::ofstream cfl(base + ".cfl", std::ios::binary);
    if (!cfl)
        throw IoError("cannot write " + base + ".cfl");
    cfl.write(reinterpret_cast<const char*>(flat.data()),
              std::streamsize(sizeof(std::complex<float>)) * flat.size());
    if (!cfl)
        throw IoError("short write to " + base + ".cfl");
}

inline MdArray<float> cfl_read(const std::string& base)
{
    std::ifstream hdr(base + ".hdr");
    if (!hdr)
        throw IoError("missing file " + base + ".hdr");
    Dims dims;
    std::string line;
    while (std::getline(hdr, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        std::istringstream is(line);
        long v;
        while (is >> v)
            dims.push_back(v);
        if (!dims.empty())
            break;
    }
    if (dims.empty())
        throw IoError("corrupt header in " + base + ".hdr");
    if (dims.size() > max_rank)
        throw IoError("corrupt header in " + base + ".hdr: too many dimensions");
    dims.resize(max_rank, 1);
    for (long d : dims)
        if (d < 1)
            throw IoError("corrupt header in " + base + ".hdr: nonpositive dimension");

    std::ifstream cfl(base + ".cfl", std::ios::binary | std::ios::ate);
    if (!cfl)
        throw IoError("missing file " + base + ".cfl");
    const long expect = md_size(dims) * long(sizeof(std::complex<float>));
    if (long(cfl.tellg()) != expect)
        throw IoError("corrupt file " + base + ".cfl: payload is " + std::to_string(long(cfl.tellg()))
                      + " bytes, header implies " + std::to_string(expect));
    cfl.seekg(0);
    MdArray<float> a(dims);
    cfl.read(reinterpret_cast<char*>(a.data()), expect);
    if (!cfl)
        throw IoError("short read from " + base + ".cfl");
    return a;
}

/// Weight bundle: a directory of cfl pairs (one per named array) plus a text
/// manifest with the network configuration echo. Arrays and keys are written
/// in sorted order so identical contents give identical bytes.
struct WeightsBundle {
    std::map<std::string, std::string> meta;
    std::map<std::string, MdArray<float>> arrays;

    void save(const std::string& dir) const
    {
        std::filesystem::create_directories(dir);
        std::ofstream mf(dir + "/manifest.txt");
        if (!mf)
            throw IoError("cannot write " + dir + "/manifest.txt");
        mf << "format 1\n";
        for (const auto& [k, v] : meta)
            mf << k << " " << v << "\n";
        for (const auto& [name, arr] : arrays) {
            mf << "array " << name << "\n";
            cfl_write(dir + "/" + name, arr);
        }
    }

    static WeightsBundle load(const std::string& dir)
    {
        std::ifstream mf(dir + "/manifest.txt");
        if (!mf)
            throw IoError("missing weights manifest in " + dir);
        WeightsBundle b;
        std::string line;
        while (std::getline(mf, line)) {
            if (line.empty())
                continue;
            auto sp = line.find(' ');
            std::string key = line.substr(0, sp);
            std::string val = sp == std::string::npos ? "" : line.substr(sp + 1);
            if (key == "format") {
                if (val != "1")
                    throw IoError("unsupported weights format " + val);
            } else if (key == "array") {
                b.arrays.emplace(val, cfl_read(dir + "/" + val));
            } else {
                b.meta[key] = val;
            }
        }
        return b;
    }

    std::string meta_or(const std::string& key, const std::string& fallback) const
    {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }
};

} // namespace mdnn
