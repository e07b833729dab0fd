#pragma once

#include "brainstrip/volume.hpp"

namespace brainstrip {

struct LabelGenConfig {
    double tau = 0.7;
    bool fill_holes = true;
};

/// Voxelwise sum of the three tissue probability maps, clipped to [0, 1].
/// Throws ValueError on grid mismatch or out-of-range probabilities.
Volume3D fuse_probability_maps(const Volume3D& gm, const Volume3D& wm,
                               const Volume3D& csf);

/// Binary mask: voxel = 1 iff pmap >= tau (ties included).
Volume3D threshold_mask(const Volume3D& pmap, double tau);

/// Fills every 6-connected background component that does not touch the
/// volume border. Foreground voxels are never removed.
Volume3D fill_holes_3d(const Volume3D& mask);

/// fuse -> threshold(cfg.tau) -> optional hole fill.
Volume3D make_spm12p_label(const Volume3D& gm, const Volume3D& wm,
                           const Volume3D& csf, const LabelGenConfig& cfg = {});

}  // namespace brainstrip
