#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "brainstrip/autodiff.hpp"
#include "brainstrip/volume.hpp"

namespace brainstrip {

/// Desk-scale Dense-Vnet configuration: an initial stride-2 convolution
/// followed by three dense feature stacks at successively halved internal
/// resolutions, convolutional skip paths, and upsampled-concatenated
/// outputs mapped to class logits.
struct DenseVnetConfig {
    std::size_t in_channels = 2;                      // 1 or 2
    std::size_t num_classes = 2;                      // background, brain
    std::array<std::size_t, 3> stack_growth{4, 8, 16};
    std::array<std::size_t, 3> units_per_stack{4, 4, 4};
    std::size_t input_window = 48;                    // cubic, divisible by 4

    void validate() const;  // throws ValueError
};

/// Ordered named parameter collection plus the config that built it.
/// Parameters are leaf autodiff tensors; forward() builds a fresh graph on
/// top of them, so the network is safe for concurrent inference and
/// single-writer training.
class Network {
public:
    Network(DenseVnetConfig cfg, std::vector<std::pair<std::string, autodiff::Tensor>> params);

    const DenseVnetConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, autodiff::Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, autodiff::Tensor>>& parameters() const { return params_; }

    /// Total scalar parameter count.
    std::size_t parameter_count() const;

    /// Logits [B, num_classes, s, s, s] for input [B, in_channels, s, s, s];
    /// spatial dims must be divisible by 4.
    autodiff::Tensor forward(const autodiff::Tensor& x) const;

    /// Deep copy with freshly allocated parameter tensors.
    Network clone() const;

    /// Overwrites parameter values from (name, values) pairs; shapes must match.
    void load_parameter_values(const std::vector<autodiff::NamedTensor>& entries);

private:
    DenseVnetConfig cfg_;
    std::vector<std::pair<std::string, autodiff::Tensor>> params_;
};

/// Builds a Dense-Vnet with deterministic uniform He-style (fan-in scaled)
/// initialization from the seed. Biases start at zero.
Network build_dense_vnet(const DenseVnetConfig& cfg, std::uint64_t seed);

/// Whole-volume inference: whiten each channel, resample to the network
/// window, forward, per-voxel argmax (tie -> background), resample the mask
/// back to the input grid with nearest interpolation. `flair` is required
/// iff the network was built with 2 input channels.
Volume3D predict_mask(const Network& net, const Volume3D& t1gd,
                      const Volume3D* flair = nullptr);

/// Volume voxels reordered into a tensor spatial block. Volumes store x
/// fastest, tensors z fastest; these keep axis identities aligned.
std::vector<double> volume_to_tensor_block(const Volume3D& vol);
Volume3D tensor_block_to_volume(const std::vector<double>& block, Dims dims,
                                Spacing spacing, Origin origin, DType dtype);

}  // namespace brainstrip
