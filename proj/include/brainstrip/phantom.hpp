#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "brainstrip/volume.hpp"

namespace brainstrip {

/// Per-tissue channel means (pseudo-T1Gd, pseudo-FLAIR).
struct TissueContrast {
    double t1gd = 0.0;
    double flair = 0.0;
};

struct ContrastTable {
    TissueContrast background{0.02, 0.02};
    TissueContrast csf{0.25, 0.10};
    TissueContrast gm{0.55, 0.60};
    TissueContrast wm{0.78, 0.45};
    TissueContrast skull{0.12, 0.10};
    TissueContrast tumor{0.95, 0.85};
    TissueContrast necrosis{0.04, 0.04};
};

/// Sphere in voxel coordinates. The necrotic core gets near-zero intensity
/// and zero tissue probabilities, so naive thresholding of the fused tissue
/// maps leaves an interior hole.
struct TumorSpec {
    std::array<double, 3> center{24.0, 24.0, 24.0};
    double radius = 7.0;
    double necrotic_core_radius = 4.0;
};

struct PhantomSpec {
    Dims dims{48, 48, 48};
    /// Brain ellipsoid semi-axes as fractions of dims, each in (0, 0.5].
    std::array<double, 3> brain_semi_axes{0.38, 0.34, 0.30};
    double skull_thickness = 2.0;  // voxels
    std::optional<TumorSpec> tumor;
    double noise_sigma = 0.03;
    double bias_field_amplitude = 0.15;
    ContrastTable contrast{};

    /// A tumor with a necrotic core placed off-center inside the brain,
    /// scaled to the phantom dims.
    static TumorSpec default_tumor(Dims dims);
};

struct PhantomCase {
    std::string case_id;
    std::uint64_t seed = 0;
    Volume3D t1gd;
    Volume3D flair;
    Volume3D truth_mask;
    Volume3D gm;
    Volume3D wm;
    Volume3D csf;
};

/// Builds a synthetic two-channel head phantom: WM core, GM rim, CSF gap
/// inside the brain ellipsoid, a skull shell outside it, and optionally a
/// tumor whose necrotic core zeroes the tissue probabilities. Channels are
/// (tissue mean + Gaussian noise) * smooth multiplicative bias field,
/// clamped to a small positive floor. Deterministic given (spec, seed).
/// Throws ValueError when the tumor is not contained in the brain.
PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                             std::string case_id = "");

/// Writes t1gd.nii, flair.nii, truth.nii, gm.nii, wm.nii, csf.nii and a flat
/// spec.json record into `dir` (created if missing).
void write_phantom_case(const PhantomCase& c, const PhantomSpec& spec,
                        const std::string& dir);

}  // namespace brainstrip
