#pragma once

#include <array>
#include <string>
#include <utility>

#include "brainstrip/volume.hpp"

namespace brainstrip {

/// 6-DOF rigid mapping: rotations (radians) applied about z, then y, then x,
/// about a volume's physical center, followed by a translation (mm).
struct RigidTransform {
    double rx = 0.0, ry = 0.0, rz = 0.0;  // radians
    double tx = 0.0, ty = 0.0, tz = 0.0;  // mm

    /// Row-major 3x3 rotation matrix Rx(rx)*Ry(ry)*Rz(rz).
    std::array<double, 9> rotation_matrix() const;

    /// Maps a physical point: R*(p - center) + center + t.
    std::array<double, 3> map_point(const std::array<double, 3>& p,
                                    const std::array<double, 3>& center) const;

    RigidTransform inverse() const;

    /// Functional composition: compose(A, B) maps p to A(B(p)); this is the
    /// transform equivalent to resampling with B after resampling with A.
    static RigidTransform compose(const RigidTransform& a, const RigidTransform& b);

    /// "rx ry rz tx ty tz" with round-trip precision.
    std::string to_string() const;
    static RigidTransform from_string(const std::string& line);
};

enum class RegMetric { MeanSquaredError, NormalizedCrossCorrelation };

struct RegistrationOptions {
    RegMetric metric = RegMetric::MeanSquaredError;
    std::size_t pyramid_levels = 3;
    std::size_t max_iterations = 60;   // descent iterations per level
    double initial_step_mm = 4.0;      // line-search start at the coarsest level
    double step_tolerance_mm = 0.01;   // converged when the step shrinks below
};

/// Thrown when the coarsest pyramid level cannot improve a markedly bad
/// initial fit; carries the best transform found so far.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& message, RigidTransform best)
        : Error(message), best_transform(best) {}
    RigidTransform best_transform;
};

/// Explicit finite-difference evolution of curvature flow dI/dt = kappa*|grad I|
/// for `steps` iterations in index space; boundary voxels use replicated-edge
/// neighbors, and each update is clamped to the local 3x3x3 range so the
/// scheme is monotone (global min/max bounds are preserved). dt must lie in
/// (0, 0.25] for stability.
Volume3D denoise_curvature_flow(const Volume3D& vol, std::size_t steps, double dt);

/// Log-domain polynomial bias-field estimate: fits a degree-`order`
/// polynomial (order in {1,2,3}) to the log-image over brain-candidate
/// voxels (intensity >= half the volume mean), exponentiates, normalizes the
/// field to mean 1, and divides it out. All voxels must be positive.
/// Returns (corrected, field). A deliberately simplified stand-in for full
/// histogram-sharpening bias correction.
std::pair<Volume3D, Volume3D> correct_bias_field(const Volume3D& vol, int order);

/// Intensity-based rigid registration: coarse-to-fine descent over the six
/// parameters with central finite-difference gradients and a backtracking
/// step. Deterministic given inputs and options. Throws ConvergenceError
/// when the coarsest level both fails to accept any step and leaves the
/// images essentially unexplained by the initial transform.
RigidTransform register_rigid(const Volume3D& moving, const Volume3D& fixed,
                              const RegistrationOptions& opts = {});

/// Resamples `vol` on the target grid: each target voxel's physical point p
/// is mapped through the transform (rotation about the target grid's
/// physical center) and `vol` is sampled there. Out-of-bounds samples are 0.
Volume3D apply_transform(const Volume3D& vol, const RigidTransform& xform,
                         const Volume3D& target_grid,
                         Interp method = Interp::Trilinear);

}  // namespace brainstrip
