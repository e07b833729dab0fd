#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "brainstrip/error.hpp"

namespace brainstrip {

/// On-disk element kind of a volume. In memory every voxel is a double; the
/// dtype selects the NIfTI representation when the volume is written.
enum class DType : std::uint8_t { UInt8, Int16, Float32, Float64 };

const char* dtype_name(DType dtype);

struct Dims {
    std::size_t nx = 0, ny = 0, nz = 0;
    std::size_t count() const { return nx * ny * nz; }
    bool operator==(const Dims&) const = default;
};

struct Spacing {
    double sx = 1.0, sy = 1.0, sz = 1.0;
    bool operator==(const Spacing&) const = default;
};

struct Origin {
    double ox = 0.0, oy = 0.0, oz = 0.0;
    bool operator==(const Origin&) const = default;
};

/// A 3D scalar grid: carrier for images, probability maps, and binary masks.
/// Memory order is fixed x-fastest: linear index = x + nx*(y + ny*z).
/// Immutable by convention once filled; all free functions below are pure.
class Volume3D {
public:
    Volume3D() = default;

    /// Zero-filled volume. Throws ValueError on empty dims or non-positive
    /// spacing.
    Volume3D(Dims dims, Spacing spacing = {}, Origin origin = {},
             DType dtype = DType::Float64);

    /// Adopts an existing voxel array; data.size() must equal dims.count().
    Volume3D(Dims dims, std::vector<double> data, Spacing spacing = {},
             Origin origin = {}, DType dtype = DType::Float64);

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    const Origin& origin() const { return origin_; }
    DType dtype() const { return dtype_; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + dims_.nx * (y + dims_.ny * z);
    }
    double at(std::size_t x, std::size_t y, std::size_t z) const {
        return data_[index(x, y, z)];
    }
    double& at(std::size_t x, std::size_t y, std::size_t z) {
        return data_[index(x, y, z)];
    }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    /// Same-shape copy with a different dtype tag.
    Volume3D with_dtype(DType dtype) const;

private:
    Dims dims_;
    Spacing spacing_;
    Origin origin_;
    DType dtype_ = DType::Float64;
    std::vector<double> data_;
};

enum class Interp { Trilinear, Nearest };

/// True when dims, spacing, and origin all match exactly.
bool same_grid(const Volume3D& a, const Volume3D& b);

/// Values are exactly 0 or 1.
bool is_binary_mask(const Volume3D& v);

/// Values lie in [0, 1].
bool is_probability_map(const Volume3D& v);

/// Resamples onto target dims with the corner-aligned convention: output
/// voxel i maps to input coordinate i*(Nin-1)/(Nout-1) per axis. Output
/// spacing is rescaled so the physical corner positions are preserved.
/// Masks must use Interp::Nearest. Throws ValueError when a target axis
/// collapses to 1 while the input axis is larger and the method is
/// trilinear (degenerate mapping).
Volume3D resample_to_grid(const Volume3D& vol, Dims target_dims, Interp method);

/// Zero-mean unit-variance normalization (population, divide-by-N).
/// Integer dtypes are promoted to Float32. Throws ValueError on a constant
/// volume (zero variance).
Volume3D whiten(const Volume3D& vol);

double volume_mean(const Volume3D& v);
std::pair<double, double> volume_minmax(const Volume3D& v);

}  // namespace brainstrip
