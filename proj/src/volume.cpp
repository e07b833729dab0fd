#include "brainstrip/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace brainstrip {

const char* dtype_name(DType dtype) {
    switch (dtype) {
        case DType::UInt8: return "uint8";
        case DType::Int16: return "int16";
        case DType::Float32: return "float32";
        case DType::Float64: return "float64";
    }
    return "unknown";
}

static void check_geometry(const Dims& dims, const Spacing& spacing) {
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0)
        throw ValueError("volume dims must be positive");
    if (spacing.sx <= 0.0 || spacing.sy <= 0.0 || spacing.sz <= 0.0)
        throw ValueError("volume spacing must be strictly positive");
}

Volume3D::Volume3D(Dims dims, Spacing spacing, Origin origin, DType dtype)
    : dims_(dims), spacing_(spacing), origin_(origin), dtype_(dtype),
      data_(dims.count(), 0.0) {
    check_geometry(dims, spacing);
}

Volume3D::Volume3D(Dims dims, std::vector<double> data, Spacing spacing,
                   Origin origin, DType dtype)
    : dims_(dims), spacing_(spacing), origin_(origin), dtype_(dtype),
      data_(std::move(data)) {
    check_geometry(dims, spacing);
    if (data_.size() != dims.count())
        throw ValueError("volume data length does not match dims");
}

Volume3D Volume3D::with_dtype(DType dtype) const {
    Volume3D out = *this;
    out.dtype_ = dtype;
    return out;
}

bool same_grid(const Volume3D& a, const Volume3D& b) {
    return a.dims() == b.dims() && a.spacing() == b.spacing() &&
           a.origin() == b.origin();
}

bool is_binary_mask(const Volume3D& v) {
    return std::all_of(v.data().begin(), v.data().end(),
                       [](double x) { return x == 0.0 || x == 1.0; });
}

bool is_probability_map(const Volume3D& v) {
    return std::all_of(v.data().begin(), v.data().end(),
                       [](double x) { return x >= 0.0 && x <= 1.0; });
}

namespace {

struct AxisMap {
    // Corner-aligned source coordinate for output index i is i * step.
    double step = 0.0;
};

AxisMap axis_map(std::size_t n_in, std::size_t n_out, Interp method) {
    AxisMap m;
    if (n_out > 1) {
        if (n_in > 1) {
            m.step = static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
        } else {
            m.step = 0.0;
        }
    } else {
        // Collapsing a non-trivial axis to one sample has no corner-aligned
        // inverse; only nearest is allowed and it samples coordinate 0.
        if (n_in > 1 && method == Interp::Trilinear)
            throw ValueError("degenerate trilinear resample: target dim 1 on an axis with input dim > 1");
        m.step = 0.0;
    }
    return m;
}

double out_spacing(std::size_t n_in, std::size_t n_out, double s_in) {
    if (n_in > 1 && n_out > 1)
        return s_in * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
    return s_in;
}

}  // namespace

Volume3D resample_to_grid(const Volume3D& vol, Dims target, Interp method) {
    if (target.nx == 0 || target.ny == 0 || target.nz == 0)
        throw ValueError("resample target dims must be positive");
    const Dims& in = vol.dims();
    const AxisMap mx = axis_map(in.nx, target.nx, method);
    const AxisMap my = axis_map(in.ny, target.ny, method);
    const AxisMap mz = axis_map(in.nz, target.nz, method);

    Spacing sp{out_spacing(in.nx, target.nx, vol.spacing().sx),
               out_spacing(in.ny, target.ny, vol.spacing().sy),
               out_spacing(in.nz, target.nz, vol.spacing().sz)};
    Volume3D out(target, sp, vol.origin(), vol.dtype());

    for (std::size_t z = 0; z < target.nz; ++z) {
        const double wz = static_cast<double>(z) * mz.step;
        for (std::size_t y = 0; y < target.ny; ++y) {
            const double wy = static_cast<double>(y) * my.step;
            for (std::size_t x = 0; x < target.nx; ++x) {
                const double wx = static_cast<double>(x) * mx.step;
                double v;
                if (method == Interp::Nearest) {
                    const std::size_t ix = std::min<std::size_t>(
                        in.nx - 1, static_cast<std::size_t>(std::llround(wx)));
                    const std::size_t iy = std::min<std::size_t>(
                        in.ny - 1, static_cast<std::size_t>(std::llround(wy)));
                    const std::size_t iz = std::min<std::size_t>(
                        in.nz - 1, static_cast<std::size_t>(std::llround(wz)));
                    v = vol.at(ix, iy, iz);
                } else {
                    const std::size_t x0 = std::min<std::size_t>(
                        in.nx - 1, static_cast<std::size_t>(wx));
                    const std::size_t y0 = std::min<std::size_t>(
                        in.ny - 1, static_cast<std::size_t>(wy));
                    const std::size_t z0 = std::min<std::size_t>(
                        in.nz - 1, static_cast<std::size_t>(wz));
                    const std::size_t x1 = std::min(x0 + 1, in.nx - 1);
                    const std::size_t y1 = std::min(y0 + 1, in.ny - 1);
                    const std::size_t z1 = std::min(z0 + 1, in.nz - 1);
                    const double fx = wx - static_cast<double>(x0);
                    const double fy = wy - static_cast<double>(y0);
                    const double fz = wz - static_cast<double>(z0);
                    const double c000 = vol.at(x0, y0, z0), c100 = vol.at(x1, y0, z0);
                    const double c010 = vol.at(x0, y1, z0), c110 = vol.at(x1, y1, z0);
                    const double c001 = vol.at(x0, y0, z1), c101 = vol.at(x1, y0, z1);
                    const double c011 = vol.at(x0, y1, z1), c111 = vol.at(x1, y1, z1);
                    const double c00 = c000 + fx * (c100 - c000);
                    const double c10 = c010 + fx * (c110 - c010);
                    const double c01 = c001 + fx * (c101 - c001);
                    const double c11 = c011 + fx * (c111 - c011);
                    const double c0 = c00 + fy * (c10 - c00);
                    const double c1 = c01 + fy * (c11 - c01);
                    v = c0 + fz * (c1 - c0);
                }
                out.at(x, y, z) = v;
            }
        }
    }
    return out;
}

Volume3D whiten(const Volume3D& vol) {
    const std::size_t n = vol.size();
    if (n < 2) throw ValueError("whiten requires at least 2 voxels");
    double mean = 0.0;
    for (double v : vol.data()) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : vol.data()) {
        const double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    if (var == 0.0) throw ValueError("whiten: constant volume has zero variance");
    const double inv_sd = 1.0 / std::sqrt(var);

    const DType dt = (vol.dtype() == DType::UInt8 || vol.dtype() == DType::Int16)
                         ? DType::Float32
                         : vol.dtype();
    Volume3D out(vol.dims(), vol.spacing(), vol.origin(), dt);
    for (std::size_t i = 0; i < n; ++i) out[i] = (vol[i] - mean) * inv_sd;
    return out;
}

double volume_mean(const Volume3D& v) {
    double s = 0.0;
    for (double x : v.data()) s += x;
    return s / static_cast<double>(v.size());
}

std::pair<double, double> volume_minmax(const Volume3D& v) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : v.data()) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    return {lo, hi};
}

}  // namespace brainstrip
