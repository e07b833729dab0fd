#include "brainstrip/labelgen.hpp"

#include <algorithm>
#include <vector>

namespace brainstrip {

Volume3D fuse_probability_maps(const Volume3D& gm, const Volume3D& wm,
                               const Volume3D& csf) {
    if (!same_grid(gm, wm) || !same_grid(gm, csf))
        throw ValueError("fuse_probability_maps: grid mismatch");
    if (!is_probability_map(gm) || !is_probability_map(wm) || !is_probability_map(csf))
        throw ValueError("fuse_probability_maps: values must lie in [0, 1]");
    Volume3D out(gm.dims(), gm.spacing(), gm.origin(), DType::Float32);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::min(1.0, gm[i] + wm[i] + csf[i]);
    return out;
}

Volume3D threshold_mask(const Volume3D& pmap, double tau) {
    if (tau < 0.0 || tau > 1.0)
        throw ValueError("threshold_mask: tau must lie in [0, 1]");
    Volume3D out(pmap.dims(), pmap.spacing(), pmap.origin(), DType::UInt8);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = pmap[i] >= tau ? 1.0 : 0.0;
    return out;
}

Volume3D fill_holes_3d(const Volume3D& mask) {
    if (!is_binary_mask(mask))
        throw ValueError("fill_holes_3d: input must be binary");
    const Dims d = mask.dims();
    const std::size_t n = d.count();

    // Flood-fill the background from every border voxel (6-connectivity);
    // unreached background is enclosed and becomes foreground.
    std::vector<std::uint8_t> outside(n, 0);
    std::vector<std::size_t> stack;
    stack.reserve(n / 8 + 16);

    auto try_seed = [&](std::size_t x, std::size_t y, std::size_t z) {
        const std::size_t i = mask.index(x, y, z);
        if (mask[i] == 0.0 && !outside[i]) {
            outside[i] = 1;
            stack.push_back(i);
        }
    };
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x)
                if (x == 0 || y == 0 || z == 0 || x == d.nx - 1 || y == d.ny - 1 ||
                    z == d.nz - 1)
                    try_seed(x, y, z);

    const std::size_t sx = 1, sy = d.nx, sz = d.nx * d.ny;
    while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        const std::size_t x = i % d.nx;
        const std::size_t y = (i / d.nx) % d.ny;
        const std::size_t z = i / sz;
        auto visit = [&](std::size_t j) {
            if (mask[j] == 0.0 && !outside[j]) {
                outside[j] = 1;
                stack.push_back(j);
            }
        };
        if (x > 0) visit(i - sx);
        if (x + 1 < d.nx) visit(i + sx);
        if (y > 0) visit(i - sy);
        if (y + 1 < d.ny) visit(i + sy);
        if (z > 0) visit(i - sz);
        if (z + 1 < d.nz) visit(i + sz);
    }

    Volume3D out(d, mask.spacing(), mask.origin(), DType::UInt8);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (mask[i] == 1.0 || !outside[i]) ? 1.0 : 0.0;
    return out;
}

Volume3D make_spm12p_label(const Volume3D& gm, const Volume3D& wm,
                           const Volume3D& csf, const LabelGenConfig& cfg) {
    Volume3D mask = threshold_mask(fuse_probability_maps(gm, wm, csf), cfg.tau);
    if (cfg.fill_holes) mask = fill_holes_3d(mask);
    return mask;
}

}  // namespace brainstrip
