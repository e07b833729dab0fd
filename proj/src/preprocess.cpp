#include "brainstrip/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

namespace brainstrip {

namespace {

std::array<double, 9> matmul3(const std::array<double, 9>& a,
                              const std::array<double, 9>& b) {
    std::array<double, 9> c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
}

std::array<double, 9> transpose3(const std::array<double, 9>& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

// Euler angles (a, b, g) with M = Rx(a)*Ry(b)*Rz(g).
std::array<double, 3> euler_from_matrix(const std::array<double, 9>& m) {
    const double sb = std::clamp(m[2], -1.0, 1.0);
    const double b = std::asin(sb);
    double a, g;
    if (std::abs(sb) < 1.0 - 1e-12) {
        a = std::atan2(-m[5], m[8]);
        g = std::atan2(-m[1], m[0]);
    } else {
        // Gimbal lock: fold the indeterminate rotation into a.
        a = std::atan2(m[7], m[4]);
        g = 0.0;
    }
    return {a, b, g};
}

std::array<double, 3> physical_center(const Volume3D& v) {
    return {v.origin().ox + 0.5 * static_cast<double>(v.dims().nx - 1) * v.spacing().sx,
            v.origin().oy + 0.5 * static_cast<double>(v.dims().ny - 1) * v.spacing().sy,
            v.origin().oz + 0.5 * static_cast<double>(v.dims().nz - 1) * v.spacing().sz};
}

}  // namespace

std::array<double, 9> RigidTransform::rotation_matrix() const {
    const double ca = std::cos(rx), sa = std::sin(rx);
    const double cb = std::cos(ry), sb = std::sin(ry);
    const double cg = std::cos(rz), sg = std::sin(rz);
    const std::array<double, 9> mx{1, 0, 0, 0, ca, -sa, 0, sa, ca};
    const std::array<double, 9> my{cb, 0, sb, 0, 1, 0, -sb, 0, cb};
    const std::array<double, 9> mz{cg, -sg, 0, sg, cg, 0, 0, 0, 1};
    return matmul3(mx, matmul3(my, mz));
}

std::array<double, 3> RigidTransform::map_point(
    const std::array<double, 3>& p, const std::array<double, 3>& center) const {
    const auto r = rotation_matrix();
    const double dx = p[0] - center[0], dy = p[1] - center[1], dz = p[2] - center[2];
    return {r[0] * dx + r[1] * dy + r[2] * dz + center[0] + tx,
            r[3] * dx + r[4] * dy + r[5] * dz + center[1] + ty,
            r[6] * dx + r[7] * dy + r[8] * dz + center[2] + tz};
}

RigidTransform RigidTransform::inverse() const {
    const auto rt = transpose3(rotation_matrix());
    const auto angles = euler_from_matrix(rt);
    RigidTransform inv;
    inv.rx = angles[0];
    inv.ry = angles[1];
    inv.rz = angles[2];
    inv.tx = -(rt[0] * tx + rt[1] * ty + rt[2] * tz);
    inv.ty = -(rt[3] * tx + rt[4] * ty + rt[5] * tz);
    inv.tz = -(rt[6] * tx + rt[7] * ty + rt[8] * tz);
    return inv;
}

RigidTransform RigidTransform::compose(const RigidTransform& a,
                                       const RigidTransform& b) {
    const auto ra = a.rotation_matrix();
    const auto rb = b.rotation_matrix();
    const auto r = matmul3(ra, rb);
    const auto angles = euler_from_matrix(r);
    RigidTransform c;
    c.rx = angles[0];
    c.ry = angles[1];
    c.rz = angles[2];
    c.tx = ra[0] * b.tx + ra[1] * b.ty + ra[2] * b.tz + a.tx;
    c.ty = ra[3] * b.tx + ra[4] * b.ty + ra[5] * b.tz + a.ty;
    c.tz = ra[6] * b.tx + ra[7] * b.ty + ra[8] * b.tz + a.tz;
    return c;
}

std::string RigidTransform::to_string() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %.17g %.17g", rx, ry,
                  rz, tx, ty, tz);
    return buf;
}

RigidTransform RigidTransform::from_string(const std::string& line) {
    std::istringstream in(line);
    RigidTransform t;
    if (!(in >> t.rx >> t.ry >> t.rz >> t.tx >> t.ty >> t.tz))
        throw FormatError("rigid transform line must hold 6 numbers");
    return t;
}

Volume3D denoise_curvature_flow(const Volume3D& vol, std::size_t steps, double dt) {
    if (!(dt > 0.0 && dt <= 0.25))
        throw ValueError("denoise_curvature_flow: dt must lie in (0, 0.25]");
    if (steps == 0) return vol;

    const Dims d = vol.dims();
    Volume3D cur = vol;
    Volume3D next(d, vol.spacing(), vol.origin(), vol.dtype());

    auto clampi = [](std::ptrdiff_t i, std::ptrdiff_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1));
    };

    for (std::size_t step = 0; step < steps; ++step) {
        for (std::size_t z = 0; z < d.nz; ++z)
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const auto ix = static_cast<std::ptrdiff_t>(x);
                    const auto iy = static_cast<std::ptrdiff_t>(y);
                    const auto iz = static_cast<std::ptrdiff_t>(z);
                    auto v = [&](std::ptrdiff_t xx, std::ptrdiff_t yy, std::ptrdiff_t zz) {
                        return cur.at(clampi(xx, static_cast<std::ptrdiff_t>(d.nx)),
                                      clampi(yy, static_cast<std::ptrdiff_t>(d.ny)),
                                      clampi(zz, static_cast<std::ptrdiff_t>(d.nz)));
                    };
                    const double c = v(ix, iy, iz);
                    const double xp = v(ix + 1, iy, iz), xm = v(ix - 1, iy, iz);
                    const double yp = v(ix, iy + 1, iz), ym = v(ix, iy - 1, iz);
                    const double zp = v(ix, iy, iz + 1), zm = v(ix, iy, iz - 1);
                    const double gx = 0.5 * (xp - xm);
                    const double gy = 0.5 * (yp - ym);
                    const double gz = 0.5 * (zp - zm);
                    const double gxx = xp - 2.0 * c + xm;
                    const double gyy = yp - 2.0 * c + ym;
                    const double gzz = zp - 2.0 * c + zm;
                    const double gxy = 0.25 * (v(ix + 1, iy + 1, iz) - v(ix + 1, iy - 1, iz) -
                                               v(ix - 1, iy + 1, iz) + v(ix - 1, iy - 1, iz));
                    const double gxz = 0.25 * (v(ix + 1, iy, iz + 1) - v(ix + 1, iy, iz - 1) -
                                               v(ix - 1, iy, iz + 1) + v(ix - 1, iy, iz - 1));
                    const double gyz = 0.25 * (v(ix, iy + 1, iz + 1) - v(ix, iy + 1, iz - 1) -
                                               v(ix, iy - 1, iz + 1) + v(ix, iy - 1, iz - 1));
                    const double g2 = gx * gx + gy * gy + gz * gz;

                    double update = 0.0;
                    if (g2 > 1e-12) {
                        const double num = gxx * (gy * gy + gz * gz) +
                                           gyy * (gx * gx + gz * gz) +
                                           gzz * (gx * gx + gy * gy) -
                                           2.0 * (gx * gy * gxy + gx * gz * gxz +
                                                  gy * gz * gyz);
                        update = dt * num / g2;
                    }

                    // Monotone scheme: stay within the 3x3x3 neighborhood range.
                    double lo = c, hi = c;
                    for (std::ptrdiff_t ddz = -1; ddz <= 1; ++ddz)
                        for (std::ptrdiff_t ddy = -1; ddy <= 1; ++ddy)
                            for (std::ptrdiff_t ddx = -1; ddx <= 1; ++ddx) {
                                const double n = v(ix + ddx, iy + ddy, iz + ddz);
                                lo = std::min(lo, n);
                                hi = std::max(hi, n);
                            }
                    next.at(x, y, z) = std::clamp(c + update, lo, hi);
                }
        std::swap(cur, next);
    }
    return cur;
}

namespace {

// Monomial exponents x^a y^b z^c with a+b+c <= order.
std::vector<std::array<int, 3>> polynomial_terms(int order) {
    std::vector<std::array<int, 3>> terms;
    for (int a = 0; a <= order; ++a)
        for (int b = 0; b + a <= order; ++b)
            for (int c = 0; c + a + b <= order; ++c) terms.push_back({a, b, c});
    return terms;
}

// Gauss-Jordan solve with partial pivoting; k <= 20.
std::vector<double> solve_dense(std::vector<double> a, std::vector<double> rhs,
                                std::size_t k) {
    for (std::size_t col = 0; col < k; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < k; ++r)
            if (std::abs(a[r * k + col]) > std::abs(a[piv * k + col])) piv = r;
        if (std::abs(a[piv * k + col]) < 1e-12)
            throw Error("bias-field fit: singular normal equations");
        if (piv != col) {
            for (std::size_t c = 0; c < k; ++c) std::swap(a[piv * k + c], a[col * k + c]);
            std::swap(rhs[piv], rhs[col]);
        }
        const double inv = 1.0 / a[col * k + col];
        for (std::size_t c = 0; c < k; ++c) a[col * k + c] *= inv;
        rhs[col] *= inv;
        for (std::size_t r = 0; r < k; ++r) {
            if (r == col) continue;
            const double f = a[r * k + col];
            if (f == 0.0) continue;
            for (std::size_t c = 0; c < k; ++c) a[r * k + c] -= f * a[col * k + c];
            rhs[r] -= f * rhs[col];
        }
    }
    return rhs;
}

}  // namespace

std::pair<Volume3D, Volume3D> correct_bias_field(const Volume3D& vol, int order) {
    if (order < 1 || order > 3)
        throw ValueError("correct_bias_field: order must be 1, 2, or 3");
    for (double v : vol.data())
        if (!(v > 0.0))
            throw ValueError("correct_bias_field: non-positive voxel encountered");

    const Dims d = vol.dims();
    const auto terms = polynomial_terms(order);
    const std::size_t k = terms.size();

    const double mean = volume_mean(vol);
    const double candidate_floor = 0.5 * mean;

    auto coord = [](std::size_t i, std::size_t n) {
        return n > 1 ? 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0
                     : 0.0;
    };

    std::vector<double> basis(k);
    auto fill_basis = [&](double u, double v, double w) {
        for (std::size_t t = 0; t < k; ++t) {
            double m = 1.0;
            for (int e = 0; e < terms[t][0]; ++e) m *= u;
            for (int e = 0; e < terms[t][1]; ++e) m *= v;
            for (int e = 0; e < terms[t][2]; ++e) m *= w;
            basis[t] = m;
        }
    };

    std::vector<double> ata(k * k, 0.0), atb(k, 0.0);
    std::size_t n_candidates = 0;
    for (int pass = 0; pass < 2; ++pass) {
        const bool use_all = pass == 1;
        std::fill(ata.begin(), ata.end(), 0.0);
        std::fill(atb.begin(), atb.end(), 0.0);
        n_candidates = 0;
        for (std::size_t z = 0; z < d.nz; ++z)
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const double value = vol.at(x, y, z);
                    if (!use_all && value < candidate_floor) continue;
                    ++n_candidates;
                    fill_basis(coord(x, d.nx), coord(y, d.ny), coord(z, d.nz));
                    const double L = std::log(value);
                    for (std::size_t i = 0; i < k; ++i) {
                        atb[i] += basis[i] * L;
                        for (std::size_t j = i; j < k; ++j)
                            ata[i * k + j] += basis[i] * basis[j];
                    }
                }
        if (n_candidates >= k) break;
        // Too few bright voxels to pin the fit; fall back to all voxels.
    }
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < i; ++j) ata[i * k + j] = ata[j * k + i];

    const std::vector<double> coef = solve_dense(std::move(ata), std::move(atb), k);

    Volume3D field(d, vol.spacing(), vol.origin(), DType::Float64);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                fill_basis(coord(x, d.nx), coord(y, d.ny), coord(z, d.nz));
                double p = 0.0;
                for (std::size_t t = 0; t < k; ++t) p += coef[t] * basis[t];
                field.at(x, y, z) = std::exp(p);
            }

    const double field_mean = volume_mean(field);
    for (double& f : field.data()) f /= field_mean;

    Volume3D corrected(d, vol.spacing(), vol.origin(), vol.dtype());
    for (std::size_t i = 0; i < corrected.size(); ++i)
        corrected[i] = vol[i] / field[i];
    return {std::move(corrected), std::move(field)};
}

Volume3D apply_transform(const Volume3D& vol, const RigidTransform& xform,
                         const Volume3D& target_grid, Interp method) {
    const Dims td = target_grid.dims();
    Volume3D out(td, target_grid.spacing(), target_grid.origin(), vol.dtype());
    const auto center = physical_center(target_grid);
    const auto r = xform.rotation_matrix();
    const Spacing ts = target_grid.spacing();
    const Origin to = target_grid.origin();
    const Spacing ss = vol.spacing();
    const Origin so = vol.origin();
    const Dims sd = vol.dims();

    for (std::size_t z = 0; z < td.nz; ++z)
        for (std::size_t y = 0; y < td.ny; ++y)
            for (std::size_t x = 0; x < td.nx; ++x) {
                const double px = to.ox + static_cast<double>(x) * ts.sx - center[0];
                const double py = to.oy + static_cast<double>(y) * ts.sy - center[1];
                const double pz = to.oz + static_cast<double>(z) * ts.sz - center[2];
                const double qx = r[0] * px + r[1] * py + r[2] * pz + center[0] + xform.tx;
                const double qy = r[3] * px + r[4] * py + r[5] * pz + center[1] + xform.ty;
                const double qz = r[6] * px + r[7] * py + r[8] * pz + center[2] + xform.tz;
                const double ux = (qx - so.ox) / ss.sx;
                const double uy = (qy - so.oy) / ss.sy;
                const double uz = (qz - so.oz) / ss.sz;

                double value = 0.0;
                if (method == Interp::Nearest) {
                    const auto nx = std::llround(ux);
                    const auto ny = std::llround(uy);
                    const auto nz = std::llround(uz);
                    if (nx >= 0 && ny >= 0 && nz >= 0 &&
                        nx < static_cast<long long>(sd.nx) &&
                        ny < static_cast<long long>(sd.ny) &&
                        nz < static_cast<long long>(sd.nz))
                        value = vol.at(static_cast<std::size_t>(nx),
                                       static_cast<std::size_t>(ny),
                                       static_cast<std::size_t>(nz));
                } else {
                    const double fx = std::floor(ux), fy = std::floor(uy), fz = std::floor(uz);
                    if (fx >= -1.0 && fy >= -1.0 && fz >= -1.0 &&
                        fx < static_cast<double>(sd.nx) &&
                        fy < static_cast<double>(sd.ny) &&
                        fz < static_cast<double>(sd.nz)) {
                        const auto x0 = static_cast<long long>(fx);
                        const auto y0 = static_cast<long long>(fy);
                        const auto z0 = static_cast<long long>(fz);
                        const double wx = ux - fx, wy = uy - fy, wz = uz - fz;
                        auto sample = [&](long long xx, long long yy, long long zz) {
                            if (xx < 0 || yy < 0 || zz < 0 ||
                                xx >= static_cast<long long>(sd.nx) ||
                                yy >= static_cast<long long>(sd.ny) ||
                                zz >= static_cast<long long>(sd.nz))
                                return 0.0;  // out-of-bounds background
                            return vol.at(static_cast<std::size_t>(xx),
                                          static_cast<std::size_t>(yy),
                                          static_cast<std::size_t>(zz));
                        };
                        const double c00 = sample(x0, y0, z0) * (1 - wx) + sample(x0 + 1, y0, z0) * wx;
                        const double c10 = sample(x0, y0 + 1, z0) * (1 - wx) + sample(x0 + 1, y0 + 1, z0) * wx;
                        const double c01 = sample(x0, y0, z0 + 1) * (1 - wx) + sample(x0 + 1, y0, z0 + 1) * wx;
                        const double c11 = sample(x0, y0 + 1, z0 + 1) * (1 - wx) + sample(x0 + 1, y0 + 1, z0 + 1) * wx;
                        const double c0 = c00 * (1 - wy) + c10 * wy;
                        const double c1 = c01 * (1 - wy) + c11 * wy;
                        value = c0 * (1 - wz) + c1 * wz;
                    }
                }
                out.at(x, y, z) = value;
            }
    return out;
}

namespace {

double metric_value(const Volume3D& warped, const Volume3D& fixed, RegMetric metric) {
    const std::size_t n = fixed.size();
    if (metric == RegMetric::MeanSquaredError) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = warped[i] - fixed[i];
            acc += diff * diff;
        }
        return acc / static_cast<double>(n);
    }
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += warped[i];
        mb += fixed[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = warped[i] - ma;
        const double db = fixed[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return -sab / std::sqrt(saa * sbb);
}

double variance(const Volume3D& v) {
    const double m = volume_mean(v);
    double acc = 0.0;
    for (double x : v.data()) acc += (x - m) * (x - m);
    return acc / static_cast<double>(v.size());
}

struct ScaledParams {
    // Rotations are scaled by the characteristic length so that one unit of
    // any component displaces roughly one millimetre.
    std::array<double, 6> u{};
    double length = 1.0;

    RigidTransform to_transform() const {
        return RigidTransform{u[0] / length, u[1] / length, u[2] / length,
                              u[3], u[4], u[5]};
    }
    static ScaledParams from_transform(const RigidTransform& t, double length) {
        ScaledParams p;
        p.length = length;
        p.u = {t.rx * length, t.ry * length, t.rz * length, t.tx, t.ty, t.tz};
        return p;
    }
};

}  // namespace

RigidTransform register_rigid(const Volume3D& moving, const Volume3D& fixed,
                              const RegistrationOptions& opts) {
    if (opts.pyramid_levels < 1)
        throw ValueError("register_rigid: pyramid_levels must be >= 1");
    if (opts.max_iterations < 1)
        throw ValueError("register_rigid: max_iterations must be >= 1");
    if (variance(moving) == 0.0 || variance(fixed) == 0.0)
        throw ValueError("register_rigid: volumes must be non-constant");

    const double ex = static_cast<double>(fixed.dims().nx - 1) * fixed.spacing().sx;
    const double ey = static_cast<double>(fixed.dims().ny - 1) * fixed.spacing().sy;
    const double ez = static_cast<double>(fixed.dims().nz - 1) * fixed.spacing().sz;
    const double char_length = 0.5 * std::sqrt(ex * ex + ey * ey + ez * ez);

    RigidTransform current;

    for (std::size_t level = 0; level < opts.pyramid_levels; ++level) {
        const std::size_t factor = std::size_t{1} << (opts.pyramid_levels - 1 - level);
        auto shrink = [factor](std::size_t n) {
            return std::max<std::size_t>(2, (n + factor - 1) / factor);
        };
        const Dims ld{shrink(fixed.dims().nx), shrink(fixed.dims().ny),
                      shrink(fixed.dims().nz)};
        const Volume3D f = ld == fixed.dims() ? fixed
                                              : resample_to_grid(fixed, ld, Interp::Trilinear);
        const Dims md{shrink(moving.dims().nx), shrink(moving.dims().ny),
                      shrink(moving.dims().nz)};
        const Volume3D m = md == moving.dims()
                               ? moving
                               : resample_to_grid(moving, md, Interp::Trilinear);

        const double min_spacing =
            std::min({f.spacing().sx, f.spacing().sy, f.spacing().sz});
        const double fd_step = 0.25 * min_spacing;

        auto evaluate = [&](const ScaledParams& p) {
            return metric_value(apply_transform(m, p.to_transform(), f), f,
                                opts.metric);
        };

        ScaledParams p = ScaledParams::from_transform(current, char_length);
        double best = evaluate(p);
        const double initial_metric = best;
        double step = level == 0 ? std::max(opts.initial_step_mm, 2.0 * min_spacing)
                                 : 2.0 * min_spacing;
        std::size_t accepted = 0;

        for (std::size_t it = 0;
             it < opts.max_iterations && step >= opts.step_tolerance_mm; ++it) {
            std::array<double, 6> g{};
            double gnorm = 0.0;
            for (int i = 0; i < 6; ++i) {
                ScaledParams plus = p, minus = p;
                plus.u[i] += fd_step;
                minus.u[i] -= fd_step;
                g[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * fd_step);
                gnorm += g[i] * g[i];
            }
            gnorm = std::sqrt(gnorm);
            if (gnorm == 0.0) break;

            bool moved = false;
            while (step >= opts.step_tolerance_mm) {
                ScaledParams trial = p;
                for (int i = 0; i < 6; ++i) trial.u[i] -= step * g[i] / gnorm;
                const double value = evaluate(trial);
                if (value < best - 1e-15) {
                    p = trial;
                    best = value;
                    ++accepted;
                    moved = true;
                    step = std::min(step * 1.5, 2.0 * char_length);
                    break;
                }
                step *= 0.5;
            }
            if (!moved) break;
        }

        current = p.to_transform();

        if (level == 0 && accepted == 0) {
            // No progress at the coarsest level. Fine when the initial fit is
            // already tight (e.g. moving == fixed); a failure when the images
            // remain essentially unexplained.
            bool unexplained;
            if (opts.metric == RegMetric::MeanSquaredError)
                unexplained = initial_metric > 0.25 * variance(f);
            else
                unexplained = initial_metric > -0.25;  // metric is -NCC
            if (unexplained)
                throw ConvergenceError(
                    "register_rigid: coarsest level failed to improve a poor initial fit",
                    current);
        }
    }

    return current;
}

}  // namespace brainstrip
