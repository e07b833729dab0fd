#pragma once

#include <string>

#include "brainstrip/volume.hpp"

namespace brainstrip {

/// Reads a single-file little-endian NIfTI-1 volume. Supported datatype
/// codes: 2 (uint8), 4 (int16), 16 (float32), 64 (float64); 3 spatial
/// dimensions only. scl_slope / scl_inter are applied to the stored values
/// (a zero slope is treated as 1, per the format convention).
///
/// Throws IoError when the file cannot be opened, FormatError when the
/// header is malformed (the message names the offending field) or the data
/// section is truncated.
Volume3D read_nifti(const std::string& path);

/// Writes a single-file NIfTI-1 volume: 348-byte header, magic "n+1",
/// vox_offset 352, no extensions, little-endian. Voxels are stored with the
/// volume's dtype; integer dtypes are clamped and rounded.
///
/// Throws IoError on an unwritable path, ValueError when a dim exceeds the
/// 16-bit header field.
void write_nifti(const Volume3D& vol, const std::string& path);

}  // namespace brainstrip
