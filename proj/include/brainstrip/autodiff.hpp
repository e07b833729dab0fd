#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "brainstrip/error.hpp"

namespace brainstrip::autodiff {

/// Tensor layout is (batch, channels, x, y, z) with z fastest in memory.
/// A scalar has an empty shape.
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Value-semantics handle onto a shared autodiff graph node. Graphs are
/// acyclic and built forward; backward() walks them in reverse topological
/// order. Gradients accumulate on leaf tensors across backward calls; the
/// caller resets them between optimization steps.
class Tensor {
public:
    Tensor();
    ~Tensor();
    Tensor(const Tensor&);
    Tensor(Tensor&&) noexcept;
    Tensor& operator=(const Tensor&);
    Tensor& operator=(Tensor&&) noexcept;

    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    bool requires_grad() const;

    std::vector<double>& values();
    const std::vector<double>& values() const;

    /// Gradient buffer, allocated as zeros on first access.
    std::vector<double>& grad();
    bool has_grad() const;
    void zero_grad();

    double item() const;

    struct Node;
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> node);
    std::shared_ptr<Node> node_;

    friend Tensor make_op(Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents,
                          std::function<void(Node&)> backward_fn);
};

/// 3D cross-correlation with zero padding.
/// x: [B, Cin, X, Y, Z], w: [Cout, Cin, kx, ky, kz], b: [Cout].
/// Output spatial dim = floor((n + 2*pad - k) / stride) + 1.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride = 1, std::size_t pad = 0);

/// Corner-aligned trilinear resize of the spatial dims to `target`.
Tensor resize_trilinear(const Tensor& x, std::array<std::size_t, 3> target);

/// Corner-aligned trilinear upsampling by an integer factor >= 2.
Tensor trilinear_upsample(const Tensor& x, std::size_t factor);

Tensor leaky_relu(const Tensor& x, double negative_slope = 0.01);

/// Concatenates along the channel axis; batch and spatial dims must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);

/// Extracts one channel, keeping the channel axis: output [B, 1, X, Y, Z].
Tensor slice_channel(const Tensor& x, std::size_t channel);

/// Softmax across the channel axis, per voxel.
Tensor softmax_channels(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& numerator, const Tensor& denominator);
/// Elementwise scale * x + shift.
Tensor affine(const Tensor& x, double scale, double shift);
/// Sum of all elements, as a scalar tensor.
Tensor sum_all(const Tensor& x);

/// Soft dice loss 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) where p
/// is the softmax foreground (channel 1) probability of the logits
/// [B, 2, X, Y, Z] and g the target [B, 1, X, Y, Z].
Tensor dice_loss(const Tensor& logits, const Tensor& target,
                 double epsilon = 1e-5);

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate adjoints are reset per call.
void backward(const Tensor& loss);

struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;
};

/// One Adam update with bias correction:
/// m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2,
/// param <- param - lr * mhat / (sqrt(vhat) + eps).
void adam_step(std::span<double> param, std::span<const double> grad,
               AdamState& state, const AdamConfig& cfg);

/// One named entry of the parameter container.
struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

/// Length-prefixed little-endian binary container with magic header "CKPT1".
void save_tensor_container(std::ostream& out, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_tensor_container(std::istream& in);

}  // namespace brainstrip::autodiff
