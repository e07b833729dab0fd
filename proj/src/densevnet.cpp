#include "brainstrip/densevnet.hpp"

#include <cmath>

#include "brainstrip/rng.hpp"

namespace brainstrip {

using autodiff::Shape;
using autodiff::Tensor;

namespace {

constexpr double kLeakySlope = 0.01;

struct ParamBuilder {
    std::vector<std::pair<std::string, Tensor>> params;
    Rng rng;

    explicit ParamBuilder(std::uint64_t seed) : rng(seed) {}

    void conv(const std::string& name, std::size_t out_c, std::size_t in_c,
              std::size_t k) {
        const std::size_t fan_in = in_c * k * k * k;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<double> w(out_c * in_c * k * k * k);
        for (double& v : w) v = rng.uniform(-bound, bound);
        params.emplace_back(name + ".w",
                            Tensor::from_values({out_c, in_c, k, k, k}, std::move(w), true));
        params.emplace_back(name + ".b",
                            Tensor::from_values({out_c}, std::vector<double>(out_c, 0.0), true));
    }
};

}  // namespace

void DenseVnetConfig::validate() const {
    if (in_channels != 1 && in_channels != 2)
        throw ValueError("dense-vnet config: in_channels must be 1 or 2");
    if (num_classes != 2)
        throw ValueError("dense-vnet config: num_classes must be 2");
    for (std::size_t g : stack_growth)
        if (g == 0) throw ValueError("dense-vnet config: stack growth must be positive");
    for (std::size_t u : units_per_stack)
        if (u == 0) throw ValueError("dense-vnet config: units per stack must be positive");
    if (input_window < 8 || input_window % 4 != 0)
        throw ValueError("dense-vnet config: input window must be >= 8 and divisible by 4");
}

Network::Network(DenseVnetConfig cfg,
                 std::vector<std::pair<std::string, Tensor>> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

Network Network::clone() const {
    std::vector<std::pair<std::string, Tensor>> copy;
    copy.reserve(params_.size());
    for (const auto& [name, t] : params_)
        copy.emplace_back(name, Tensor::from_values(t.shape(), t.values(), true));
    return Network(cfg_, std::move(copy));
}

void Network::load_parameter_values(const std::vector<autodiff::NamedTensor>& entries) {
    for (const autodiff::NamedTensor& e : entries) {
        bool found = false;
        for (auto& [name, t] : params_) {
            if (name == e.name) {
                if (t.shape() != e.shape)
                    throw ValueError("parameter shape mismatch for " + e.name);
                t.values() = e.values;
                found = true;
                break;
            }
        }
        if (!found) throw ValueError("unknown parameter name: " + e.name);
    }
}

Network build_dense_vnet(const DenseVnetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamBuilder pb(seed);

    // Initial stride-2 convolution feeds the first stack.
    pb.conv("initial", cfg.stack_growth[0], cfg.in_channels, 3);

    std::size_t stack_in = cfg.stack_growth[0];
    std::size_t skip_channels_total = 0;
    for (std::size_t level = 0; level < 3; ++level) {
        const std::size_t growth = cfg.stack_growth[level];
        std::size_t in_c = stack_in;
        for (std::size_t u = 0; u < cfg.units_per_stack[level]; ++u) {
            pb.conv("stack" + std::to_string(level) + ".unit" + std::to_string(u),
                    growth, in_c, 3);
            in_c += growth;
        }
        const std::size_t stack_out = cfg.units_per_stack[level] * growth;
        pb.conv("skip" + std::to_string(level), growth, stack_out, 3);
        skip_channels_total += growth;
        if (level < 2) {
            pb.conv("down" + std::to_string(level), cfg.stack_growth[level + 1],
                    stack_out, 3);
            stack_in = cfg.stack_growth[level + 1];
        }
    }
    pb.conv("final", cfg.num_classes, skip_channels_total, 3);

    return Network(cfg, std::move(pb.params));
}

namespace {

const Tensor& find_param(const std::vector<std::pair<std::string, Tensor>>& params,
                         const std::string& name) {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw ValueError("missing network parameter: " + name);
}

}  // namespace

Tensor Network::forward(const Tensor& x) const {
    if (!x.defined() || x.shape().size() != 5)
        throw ValueError("forward: input must be [B, C, X, Y, Z]");
    if (x.shape()[1] != cfg_.in_channels)
        throw ValueError("forward: input channel count does not match config");
    const std::size_t sx = x.shape()[2], sy = x.shape()[3], sz = x.shape()[4];
    for (std::size_t s : {sx, sy, sz})
        if (s < 8 || s % 4 != 0)
            throw ValueError("forward: spatial dims must be >= 8 and divisible by 4");

    auto conv_block = [&](const Tensor& in, const std::string& name,
                          std::size_t stride) {
        const Tensor& w = find_param(params_, name + ".w");
        const Tensor& b = find_param(params_, name + ".b");
        return leaky_relu(autodiff::conv3d(in, w, b, stride, 1), kLeakySlope);
    };

    Tensor h = conv_block(x, "initial", 2);
    const std::array<std::size_t, 3> common{h.shape()[2], h.shape()[3], h.shape()[4]};

    std::vector<Tensor> skips;
    for (std::size_t level = 0; level < 3; ++level) {
        // Dense feature stack: each unit consumes the concatenation of the
        // stack input and all previous unit outputs.
        std::vector<Tensor> feed{h};
        std::vector<Tensor> outputs;
        for (std::size_t u = 0; u < cfg_.units_per_stack[level]; ++u) {
            const Tensor in = feed.size() == 1 ? feed[0] : autodiff::concat_channels(feed);
            const Tensor out = conv_block(
                in, "stack" + std::to_string(level) + ".unit" + std::to_string(u), 1);
            outputs.push_back(out);
            feed.push_back(out);
        }
        const Tensor stack_out =
            outputs.size() == 1 ? outputs[0] : autodiff::concat_channels(outputs);

        const Tensor& sw = find_param(params_, "skip" + std::to_string(level) + ".w");
        const Tensor& sb = find_param(params_, "skip" + std::to_string(level) + ".b");
        Tensor skip = autodiff::conv3d(stack_out, sw, sb, 1, 1);
        if (skip.shape()[2] != common[0] || skip.shape()[3] != common[1] ||
            skip.shape()[4] != common[2])
            skip = autodiff::resize_trilinear(skip, common);
        skips.push_back(skip);

        if (level < 2) h = conv_block(stack_out, "down" + std::to_string(level), 2);
    }

    const Tensor merged = autodiff::concat_channels(skips);
    const Tensor& fw = find_param(params_, "final.w");
    const Tensor& fb = find_param(params_, "final.b");
    const Tensor logits_half = autodiff::conv3d(merged, fw, fb, 1, 1);
    return autodiff::resize_trilinear(logits_half, {sx, sy, sz});
}

std::vector<double> volume_to_tensor_block(const Volume3D& vol) {
    const Dims d = vol.dims();
    std::vector<double> block(d.count());
    for (std::size_t x = 0; x < d.nx; ++x)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t z = 0; z < d.nz; ++z)
                block[(x * d.ny + y) * d.nz + z] = vol.at(x, y, z);
    return block;
}

Volume3D tensor_block_to_volume(const std::vector<double>& block, Dims dims,
                                Spacing spacing, Origin origin, DType dtype) {
    Volume3D vol(dims, spacing, origin, dtype);
    for (std::size_t x = 0; x < dims.nx; ++x)
        for (std::size_t y = 0; y < dims.ny; ++y)
            for (std::size_t z = 0; z < dims.nz; ++z)
                vol.at(x, y, z) = block[(x * dims.ny + y) * dims.nz + z];
    return vol;
}

Volume3D predict_mask(const Network& net, const Volume3D& t1gd,
                      const Volume3D* flair) {
    const DenseVnetConfig& cfg = net.config();
    if (cfg.in_channels == 2 && flair == nullptr)
        throw ValueError("predict_mask: network requires a FLAIR channel");
    if (cfg.in_channels == 1 && flair != nullptr)
        throw ValueError("predict_mask: network takes a single channel");
    if (flair && !same_grid(t1gd, *flair))
        throw ValueError("predict_mask: channels must share one grid");

    const std::size_t w = cfg.input_window;
    const Dims window{w, w, w};
    std::vector<const Volume3D*> channels{&t1gd};
    if (flair) channels.push_back(flair);

    std::vector<double> input;
    input.reserve(cfg.in_channels * window.count());
    for (const Volume3D* ch : channels) {
        const Volume3D resized = resample_to_grid(whiten(*ch), window, Interp::Trilinear);
        const std::vector<double> block = volume_to_tensor_block(resized);
        input.insert(input.end(), block.begin(), block.end());
    }

    const Tensor x = Tensor::from_values({1, cfg.in_channels, w, w, w}, std::move(input));
    const Tensor logits = net.forward(x);

    const std::vector<double>& lv = logits.values();
    const std::size_t vox = window.count();
    std::vector<double> fg(vox);
    for (std::size_t i = 0; i < vox; ++i) fg[i] = lv[vox + i] > lv[i] ? 1.0 : 0.0;
    const Volume3D window_mask =
        tensor_block_to_volume(fg, window, Spacing{}, Origin{}, DType::UInt8);

    Volume3D out = resample_to_grid(window_mask, t1gd.dims(), Interp::Nearest);
    return Volume3D(t1gd.dims(), std::move(out.data()), t1gd.spacing(),
                    t1gd.origin(), DType::UInt8);
}

}  // namespace brainstrip
