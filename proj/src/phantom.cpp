#include "brainstrip/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "brainstrip/nifti.hpp"
#include "brainstrip/rng.hpp"

namespace brainstrip {

namespace {

enum class Tissue { Background, Csf, Gm, Wm, Skull, Tumor, Necrosis };

TissueContrast contrast_of(const ContrastTable& t, Tissue tissue) {
    switch (tissue) {
        case Tissue::Background: return t.background;
        case Tissue::Csf: return t.csf;
        case Tissue::Gm: return t.gm;
        case Tissue::Wm: return t.wm;
        case Tissue::Skull: return t.skull;
        case Tissue::Tumor: return t.tumor;
        case Tissue::Necrosis: return t.necrosis;
    }
    return t.background;
}

void validate_spec(const PhantomSpec& spec) {
    for (double a : spec.brain_semi_axes)
        if (!(a > 0.0 && a <= 0.5))
            throw ValueError("brain semi-axes must lie in (0, 0.5]");
    if (spec.noise_sigma < 0.0) throw ValueError("noise_sigma must be >= 0");
    if (spec.bias_field_amplitude < 0.0)
        throw ValueError("bias_field_amplitude must be >= 0");
    if (spec.tumor) {
        if (spec.tumor->necrotic_core_radius >= spec.tumor->radius)
            throw ValueError("necrotic core must be strictly inside the tumor");
    }
}

}  // namespace

TumorSpec PhantomSpec::default_tumor(Dims dims) {
    TumorSpec t;
    const double nx = static_cast<double>(dims.nx);
    t.center = {0.60 * nx, 0.55 * static_cast<double>(dims.ny),
                0.50 * static_cast<double>(dims.nz)};
    t.radius = 0.15 * nx;
    t.necrotic_core_radius = 0.085 * nx;
    return t;
}

PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                             std::string case_id) {
    validate_spec(spec);
    const Dims d = spec.dims;
    const double cx = 0.5 * static_cast<double>(d.nx - 1);
    const double cy = 0.5 * static_cast<double>(d.ny - 1);
    const double cz = 0.5 * static_cast<double>(d.nz - 1);
    const double ax = spec.brain_semi_axes[0] * static_cast<double>(d.nx);
    const double ay = spec.brain_semi_axes[1] * static_cast<double>(d.ny);
    const double az = spec.brain_semi_axes[2] * static_cast<double>(d.nz);
    const double mean_axis = (ax + ay + az) / 3.0;

    if (spec.tumor) {
        const TumorSpec& t = *spec.tumor;
        const double ex = (t.center[0] - cx) / ax;
        const double ey = (t.center[1] - cy) / ay;
        const double ez = (t.center[2] - cz) / az;
        const double e_center = std::sqrt(ex * ex + ey * ey + ez * ez);
        const double min_axis = std::min({ax, ay, az});
        if (e_center + t.radius / min_axis > 1.0)
            throw ValueError("tumor not contained in brain ellipsoid");
    }

    PhantomCase out;
    out.seed = seed;
    out.case_id = case_id.empty() ? "case_" + std::to_string(seed) : std::move(case_id);
    out.t1gd = Volume3D(d, {}, {}, DType::Float32);
    out.flair = Volume3D(d, {}, {}, DType::Float32);
    out.truth_mask = Volume3D(d, {}, {}, DType::UInt8);
    out.gm = Volume3D(d, {}, {}, DType::Float32);
    out.wm = Volume3D(d, {}, {}, DType::Float32);
    out.csf = Volume3D(d, {}, {}, DType::Float32);

    // Smooth multiplicative bias field: exponential of a random low-order
    // polynomial in normalized coordinates, scaled by the amplitude.
    Rng rng(mix_seed(seed, 0xb1a5));
    std::array<double, 9> bias_coef{};
    for (double& c : bias_coef) c = rng.uniform(-1.0, 1.0);
    const double amp = spec.bias_field_amplitude;

    Rng noise_rng(mix_seed(seed, 0x0153));

    for (std::size_t z = 0; z < d.nz; ++z) {
        for (std::size_t y = 0; y < d.ny; ++y) {
            for (std::size_t x = 0; x < d.nx; ++x) {
                const double ex = (static_cast<double>(x) - cx) / ax;
                const double ey = (static_cast<double>(y) - cy) / ay;
                const double ez = (static_cast<double>(z) - cz) / az;
                const double e = std::sqrt(ex * ex + ey * ey + ez * ez);

                Tissue tissue;
                bool in_brain = false;
                if (e <= 1.0) {
                    in_brain = true;
                    if (e <= 0.60)
                        tissue = Tissue::Wm;
                    else if (e <= 0.88)
                        tissue = Tissue::Gm;
                    else
                        tissue = Tissue::Csf;
                } else if ((e - 1.0) * mean_axis <= spec.skull_thickness) {
                    tissue = Tissue::Skull;
                } else {
                    tissue = Tissue::Background;
                }

                if (in_brain && spec.tumor) {
                    const TumorSpec& t = *spec.tumor;
                    const double dx = static_cast<double>(x) - t.center[0];
                    const double dy = static_cast<double>(y) - t.center[1];
                    const double dz = static_cast<double>(z) - t.center[2];
                    const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
                    if (r <= t.necrotic_core_radius)
                        tissue = Tissue::Necrosis;
                    else if (r <= t.radius)
                        tissue = Tissue::Tumor;
                }

                const std::size_t i = out.t1gd.index(x, y, z);
                out.truth_mask[i] = in_brain ? 1.0 : 0.0;
                // Crisp tissue probabilities; the enhancing tumor is folded
                // into the GM map, the necrotic core carries none.
                out.gm[i] = (tissue == Tissue::Gm || tissue == Tissue::Tumor) ? 1.0 : 0.0;
                out.wm[i] = tissue == Tissue::Wm ? 1.0 : 0.0;
                out.csf[i] = tissue == Tissue::Csf ? 1.0 : 0.0;

                const double u = 2.0 * static_cast<double>(x) / static_cast<double>(d.nx - 1) - 1.0;
                const double v = 2.0 * static_cast<double>(y) / static_cast<double>(d.ny - 1) - 1.0;
                const double w = 2.0 * static_cast<double>(z) / static_cast<double>(d.nz - 1) - 1.0;
                const double poly = bias_coef[0] * u + bias_coef[1] * v + bias_coef[2] * w +
                                    bias_coef[3] * u * v + bias_coef[4] * u * w +
                                    bias_coef[5] * v * w + bias_coef[6] * u * u +
                                    bias_coef[7] * v * v + bias_coef[8] * w * w;
                const double field = std::exp(amp * poly * 0.5);

                const TissueContrast c = contrast_of(spec.contrast, tissue);
                const double n1 = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise_rng.normal() : 0.0;
                const double n2 = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise_rng.normal() : 0.0;
                out.t1gd[i] = std::max(1e-3, (c.t1gd + n1) * field);
                out.flair[i] = std::max(1e-3, (c.flair + n2) * field);
            }
        }
    }
    return out;
}

void write_phantom_case(const PhantomCase& c, const PhantomSpec& spec,
                        const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path base(dir);
    write_nifti(c.t1gd, (base / "t1gd.nii").string());
    write_nifti(c.flair, (base / "flair.nii").string());
    write_nifti(c.truth_mask, (base / "truth.nii").string());
    write_nifti(c.gm, (base / "gm.nii").string());
    write_nifti(c.wm, (base / "wm.nii").string());
    write_nifti(c.csf, (base / "csf.nii").string());

    nlohmann::json j;
    j["case_id"] = c.case_id;
    j["seed"] = c.seed;
    j["dims"] = {spec.dims.nx, spec.dims.ny, spec.dims.nz};
    j["brain_semi_axes"] = spec.brain_semi_axes;
    j["skull_thickness"] = spec.skull_thickness;
    j["noise_sigma"] = spec.noise_sigma;
    j["bias_field_amplitude"] = spec.bias_field_amplitude;
    j["has_tumor"] = spec.tumor.has_value();
    if (spec.tumor) {
        j["tumor_center"] = spec.tumor->center;
        j["tumor_radius"] = spec.tumor->radius;
        j["necrotic_core_radius"] = spec.tumor->necrotic_core_radius;
    }
    std::ofstream rec(base / "spec.json");
    if (!rec) throw IoError("cannot write phantom record in " + dir);
    rec << j.dump(2) << "\n";
}

}  // namespace brainstrip
