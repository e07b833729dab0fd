#include "brainstrip/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <unordered_set>

namespace brainstrip::autodiff {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

struct Tensor::Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

Tensor::Tensor() = default;
Tensor::~Tensor() = default;
Tensor::Tensor(const Tensor&) = default;
Tensor::Tensor(Tensor&&) noexcept = default;
Tensor& Tensor::operator=(const Tensor&) = default;
Tensor& Tensor::operator=(Tensor&&) noexcept = default;
Tensor::Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
    if (values.size() != shape_size(shape))
        throw ValueError("tensor values length does not match shape");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(shape_size(shape), 0.0);
    return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_values(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
std::vector<double>& Tensor::values() { return node_->value; }
const std::vector<double>& Tensor::values() const { return node_->value; }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (node_->value.size() != 1) throw ValueError("item() requires a scalar tensor");
    return node_->value[0];
}

using Node = Tensor::Node;

Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->is_leaf = false;
    for (const Tensor& p : parents)
        node->requires_grad = node->requires_grad || p.requires_grad();
    if (node->requires_grad) {
        node->backward_fn = std::move(backward_fn);
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.node());
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ValueError("backward requires a scalar loss");

    // Reverse topological order via iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    Node* root = loss.node().get();
    if (root->requires_grad || root->is_leaf) {
        stack.push_back({root, 0});
        seen.insert(root);
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Intermediate adjoints are scratch space per sweep; leaf gradients
    // persist and accumulate across sweeps.
    for (Node* n : order) {
        if (!n->is_leaf) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

namespace {

void check_5d(const Tensor& x, const char* what) {
    if (!x.defined() || x.shape().size() != 5)
        throw ValueError(std::string(what) + " must be a 5-D tensor (B, C, X, Y, Z)");
}

struct ConvDims {
    std::size_t B, Ci, Nx, Ny, Nz;
    std::size_t Co, Kx, Ky, Kz;
    std::size_t Ox, Oy, Oz;
    std::size_t Px, Py, Pz;  // padded input dims
    std::size_t stride, pad;
};

std::size_t conv_out(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
    if (n + 2 * p < k) throw ValueError("conv3d: kernel larger than padded input");
    return (n + 2 * p - k) / s + 1;
}

// Copies x into a zero-padded buffer, one (b, c) plane at a time.
std::vector<double> pad_input(const std::vector<double>& x, const ConvDims& d) {
    std::vector<double> xp(d.B * d.Ci * d.Px * d.Py * d.Pz, 0.0);
    const std::int64_t planes = static_cast<std::int64_t>(d.B * d.Ci);
#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < planes; ++bc) {
        const std::size_t src0 = static_cast<std::size_t>(bc) * d.Nx * d.Ny * d.Nz;
        const std::size_t dst0 = static_cast<std::size_t>(bc) * d.Px * d.Py * d.Pz;
        for (std::size_t ix = 0; ix < d.Nx; ++ix)
            for (std::size_t iy = 0; iy < d.Ny; ++iy) {
                const double* src = &x[src0 + (ix * d.Ny + iy) * d.Nz];
                double* dst = &xp[dst0 + ((ix + d.pad) * d.Py + iy + d.pad) * d.Pz + d.pad];
                std::memcpy(dst, src, d.Nz * sizeof(double));
            }
    }
    return xp;
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad) {
    check_5d(x, "conv3d input");
    check_5d(w, "conv3d weight");
    if (stride < 1) throw ValueError("conv3d: stride must be >= 1");

    ConvDims d;
    d.B = x.shape()[0];
    d.Ci = x.shape()[1];
    d.Nx = x.shape()[2];
    d.Ny = x.shape()[3];
    d.Nz = x.shape()[4];
    d.Co = w.shape()[0];
    d.Kx = w.shape()[2];
    d.Ky = w.shape()[3];
    d.Kz = w.shape()[4];
    d.stride = stride;
    d.pad = pad;
    if (w.shape()[1] != d.Ci)
        throw ValueError("conv3d: weight input channels do not match input");
    if (!b.defined() || b.shape() != Shape{d.Co})
        throw ValueError("conv3d: bias shape must be [out_channels]");
    d.Ox = conv_out(d.Nx, d.Kx, stride, pad);
    d.Oy = conv_out(d.Ny, d.Ky, stride, pad);
    d.Oz = conv_out(d.Nz, d.Kz, stride, pad);
    d.Px = d.Nx + 2 * pad;
    d.Py = d.Ny + 2 * pad;
    d.Pz = d.Nz + 2 * pad;

    const std::vector<double> xp = pad_input(x.values(), d);
    const std::vector<double>& wv = w.values();
    const std::vector<double>& bv = b.values();

    std::vector<double> y(d.B * d.Co * d.Ox * d.Oy * d.Oz);
    const std::int64_t bco = static_cast<std::int64_t>(d.B * d.Co);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < bco; ++i) {
        const std::size_t bb = static_cast<std::size_t>(i) / d.Co;
        const std::size_t co = static_cast<std::size_t>(i) % d.Co;
        double* yplane = &y[static_cast<std::size_t>(i) * d.Ox * d.Oy * d.Oz];
        std::fill(yplane, yplane + d.Ox * d.Oy * d.Oz, bv[co]);
        for (std::size_t ci = 0; ci < d.Ci; ++ci) {
            const double* xplane = &xp[(bb * d.Ci + ci) * d.Px * d.Py * d.Pz];
            const double* wk = &wv[(co * d.Ci + ci) * d.Kx * d.Ky * d.Kz];
            for (std::size_t kx = 0; kx < d.Kx; ++kx)
                for (std::size_t ky = 0; ky < d.Ky; ++ky)
                    for (std::size_t kz = 0; kz < d.Kz; ++kz) {
                        const double wval = wk[(kx * d.Ky + ky) * d.Kz + kz];
                        if (wval == 0.0) continue;
                        for (std::size_t ox = 0; ox < d.Ox; ++ox) {
                            const std::size_t ix = ox * d.stride + kx;
                            for (std::size_t oy = 0; oy < d.Oy; ++oy) {
                                const std::size_t iy = oy * d.stride + ky;
                                double* yrow = &yplane[(ox * d.Oy + oy) * d.Oz];
                                const double* xrow =
                                    &xplane[(ix * d.Py + iy) * d.Pz + kz];
                                if (d.stride == 1) {
                                    for (std::size_t oz = 0; oz < d.Oz; ++oz)
                                        yrow[oz] += wval * xrow[oz];
                                } else {
                                    for (std::size_t oz = 0; oz < d.Oz; ++oz)
                                        yrow[oz] += wval * xrow[oz * d.stride];
                                }
                            }
                        }
                    }
        }
    }

    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto backward_fn = [d, xn, wn, bn](Node& self) {
        const std::vector<double>& dy = self.grad;
        const std::size_t ovox = d.Ox * d.Oy * d.Oz;

        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t co = 0; co < d.Co; ++co) {
                double acc = 0.0;
                for (std::size_t bb = 0; bb < d.B; ++bb) {
                    const double* dyp = &dy[(bb * d.Co + co) * ovox];
                    for (std::size_t o = 0; o < ovox; ++o) acc += dyp[o];
                }
                bn->grad[co] += acc;
            }
        }

        if (wn->requires_grad || xn->requires_grad) {
            const std::vector<double> xp = pad_input(xn->value, d);

            if (wn->requires_grad) {
                wn->ensure_grad();
                const std::int64_t coci = static_cast<std::int64_t>(d.Co * d.Ci);
#pragma omp parallel for schedule(static)
                for (std::int64_t i = 0; i < coci; ++i) {
                    const std::size_t co = static_cast<std::size_t>(i) / d.Ci;
                    const std::size_t ci = static_cast<std::size_t>(i) % d.Ci;
                    double* dwk = &wn->grad[(co * d.Ci + ci) * d.Kx * d.Ky * d.Kz];
                    for (std::size_t kx = 0; kx < d.Kx; ++kx)
                        for (std::size_t ky = 0; ky < d.Ky; ++ky)
                            for (std::size_t kz = 0; kz < d.Kz; ++kz) {
                                double acc = 0.0;
                                for (std::size_t bb = 0; bb < d.B; ++bb) {
                                    const double* dyp = &dy[(bb * d.Co + co) * ovox];
                                    const double* xplane =
                                        &xp[(bb * d.Ci + ci) * d.Px * d.Py * d.Pz];
                                    for (std::size_t ox = 0; ox < d.Ox; ++ox) {
                                        const std::size_t ix = ox * d.stride + kx;
                                        for (std::size_t oy = 0; oy < d.Oy; ++oy) {
                                            const std::size_t iy = oy * d.stride + ky;
                                            const double* dyrow =
                                                &dyp[(ox * d.Oy + oy) * d.Oz];
                                            const double* xrow =
                                                &xplane[(ix * d.Py + iy) * d.Pz + kz];
                                            if (d.stride == 1) {
                                                for (std::size_t oz = 0; oz < d.Oz; ++oz)
                                                    acc += dyrow[oz] * xrow[oz];
                                            } else {
                                                for (std::size_t oz = 0; oz < d.Oz; ++oz)
                                                    acc += dyrow[oz] * xrow[oz * d.stride];
                                            }
                                        }
                                    }
                                }
                                dwk[(kx * d.Ky + ky) * d.Kz + kz] += acc;
                            }
                }
            }

            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<double> dxp(xp.size(), 0.0);
                const std::vector<double>& wv = wn->value;
                const std::int64_t bci = static_cast<std::int64_t>(d.B * d.Ci);
#pragma omp parallel for schedule(static)
                for (std::int64_t i = 0; i < bci; ++i) {
                    const std::size_t bb = static_cast<std::size_t>(i) / d.Ci;
                    const std::size_t ci = static_cast<std::size_t>(i) % d.Ci;
                    double* dxplane = &dxp[static_cast<std::size_t>(i) * d.Px * d.Py * d.Pz];
                    for (std::size_t co = 0; co < d.Co; ++co) {
                        const double* dyp = &dy[(bb * d.Co + co) * ovox];
                        const double* wk = &wv[(co * d.Ci + ci) * d.Kx * d.Ky * d.Kz];
                        for (std::size_t kx = 0; kx < d.Kx; ++kx)
                            for (std::size_t ky = 0; ky < d.Ky; ++ky)
                                for (std::size_t kz = 0; kz < d.Kz; ++kz) {
                                    const double wval = wk[(kx * d.Ky + ky) * d.Kz + kz];
                                    if (wval == 0.0) continue;
                                    for (std::size_t ox = 0; ox < d.Ox; ++ox) {
                                        const std::size_t ix = ox * d.stride + kx;
                                        for (std::size_t oy = 0; oy < d.Oy; ++oy) {
                                            const std::size_t iy = oy * d.stride + ky;
                                            const double* dyrow =
                                                &dyp[(ox * d.Oy + oy) * d.Oz];
                                            double* dxrow =
                                                &dxplane[(ix * d.Py + iy) * d.Pz + kz];
                                            if (d.stride == 1) {
                                                for (std::size_t oz = 0; oz < d.Oz; ++oz)
                                                    dxrow[oz] += wval * dyrow[oz];
                                            } else {
                                                for (std::size_t oz = 0; oz < d.Oz; ++oz)
                                                    dxrow[oz * d.stride] += wval * dyrow[oz];
                                            }
                                        }
                                    }
                                }
                    }
                }
                // Crop the padded gradient back onto x.
#pragma omp parallel for schedule(static)
                for (std::int64_t i = 0; i < bci; ++i) {
                    const std::size_t src0 = static_cast<std::size_t>(i) * d.Px * d.Py * d.Pz;
                    const std::size_t dst0 = static_cast<std::size_t>(i) * d.Nx * d.Ny * d.Nz;
                    for (std::size_t ix = 0; ix < d.Nx; ++ix)
                        for (std::size_t iy = 0; iy < d.Ny; ++iy) {
                            const double* src =
                                &dxp[src0 + ((ix + d.pad) * d.Py + iy + d.pad) * d.Pz + d.pad];
                            double* dst = &xn->grad[dst0 + (ix * d.Ny + iy) * d.Nz];
                            for (std::size_t iz = 0; iz < d.Nz; ++iz) dst[iz] += src[iz];
                        }
                }
            }
        }
    };

    return make_op({d.B, d.Co, d.Ox, d.Oy, d.Oz}, std::move(y), {x, w, b},
                   std::move(backward_fn));
}

namespace {

struct AxisWeights {
    std::vector<std::size_t> i0, i1;
    std::vector<double> f;
};

AxisWeights axis_weights(std::size_t n_in, std::size_t n_out) {
    AxisWeights aw;
    aw.i0.resize(n_out);
    aw.i1.resize(n_out);
    aw.f.resize(n_out);
    const double step = (n_out > 1 && n_in > 1)
                            ? static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1)
                            : 0.0;
    for (std::size_t i = 0; i < n_out; ++i) {
        const double u = static_cast<double>(i) * step;
        std::size_t i0 = std::min<std::size_t>(n_in - 1, static_cast<std::size_t>(u));
        aw.i0[i] = i0;
        aw.i1[i] = std::min(i0 + 1, n_in - 1);
        aw.f[i] = u - static_cast<double>(i0);
    }
    return aw;
}

}  // namespace

Tensor resize_trilinear(const Tensor& x, std::array<std::size_t, 3> target) {
    check_5d(x, "resize input");
    const std::size_t B = x.shape()[0], C = x.shape()[1];
    const std::size_t Nx = x.shape()[2], Ny = x.shape()[3], Nz = x.shape()[4];
    const std::size_t Tx = target[0], Ty = target[1], Tz = target[2];
    if (Tx == 0 || Ty == 0 || Tz == 0)
        throw ValueError("resize target dims must be positive");

    const AxisWeights ax = axis_weights(Nx, Tx);
    const AxisWeights ay = axis_weights(Ny, Ty);
    const AxisWeights az = axis_weights(Nz, Tz);

    std::vector<double> y(B * C * Tx * Ty * Tz);
    const std::int64_t planes = static_cast<std::int64_t>(B * C);
    const std::vector<double>& xv = x.values();
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* xi = &xv[static_cast<std::size_t>(p) * Nx * Ny * Nz];
        double* yo = &y[static_cast<std::size_t>(p) * Tx * Ty * Tz];
        for (std::size_t ox = 0; ox < Tx; ++ox)
            for (std::size_t oy = 0; oy < Ty; ++oy)
                for (std::size_t oz = 0; oz < Tz; ++oz) {
                    const double fx = ax.f[ox], fy = ay.f[oy], fz = az.f[oz];
                    double acc = 0.0;
                    for (int cx = 0; cx < 2; ++cx)
                        for (int cy = 0; cy < 2; ++cy)
                            for (int cz = 0; cz < 2; ++cz) {
                                const std::size_t ix = cx ? ax.i1[ox] : ax.i0[ox];
                                const std::size_t iy = cy ? ay.i1[oy] : ay.i0[oy];
                                const std::size_t iz = cz ? az.i1[oz] : az.i0[oz];
                                const double wgt = (cx ? fx : 1.0 - fx) *
                                                   (cy ? fy : 1.0 - fy) *
                                                   (cz ? fz : 1.0 - fz);
                                acc += wgt * xi[(ix * Ny + iy) * Nz + iz];
                            }
                    yo[(ox * Ty + oy) * Tz + oz] = acc;
                }
    }

    auto xn = x.node();
    auto backward_fn = [B, C, Nx, Ny, Nz, Tx, Ty, Tz, ax, ay, az, xn](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const std::vector<double>& dy = self.grad;
        const std::int64_t planes = static_cast<std::int64_t>(B * C);
#pragma omp parallel for schedule(static)
        for (std::int64_t p = 0; p < planes; ++p) {
            const double* dyo = &dy[static_cast<std::size_t>(p) * Tx * Ty * Tz];
            double* dxi = &xn->grad[static_cast<std::size_t>(p) * Nx * Ny * Nz];
            for (std::size_t ox = 0; ox < Tx; ++ox)
                for (std::size_t oy = 0; oy < Ty; ++oy)
                    for (std::size_t oz = 0; oz < Tz; ++oz) {
                        const double g = dyo[(ox * Ty + oy) * Tz + oz];
                        if (g == 0.0) continue;
                        const double fx = ax.f[ox], fy = ay.f[oy], fz = az.f[oz];
                        for (int cx = 0; cx < 2; ++cx)
                            for (int cy = 0; cy < 2; ++cy)
                                for (int cz = 0; cz < 2; ++cz) {
                                    const std::size_t ix = cx ? ax.i1[ox] : ax.i0[ox];
                                    const std::size_t iy = cy ? ay.i1[oy] : ay.i0[oy];
                                    const std::size_t iz = cz ? az.i1[oz] : az.i0[oz];
                                    const double wgt = (cx ? fx : 1.0 - fx) *
                                                       (cy ? fy : 1.0 - fy) *
                                                       (cz ? fz : 1.0 - fz);
                                    dxi[(ix * Ny + iy) * Nz + iz] += wgt * g;
                                }
                    }
        }
    };

    return make_op({B, C, Tx, Ty, Tz}, std::move(y), {x}, std::move(backward_fn));
}

Tensor trilinear_upsample(const Tensor& x, std::size_t factor) {
    check_5d(x, "upsample input");
    if (factor < 2) throw ValueError("trilinear_upsample: factor must be >= 2");
    for (std::size_t axis = 2; axis < 5; ++axis)
        if (x.shape()[axis] < 2)
            throw ValueError("trilinear_upsample: spatial dims must be >= 2");
    return resize_trilinear(
        x, {x.shape()[2] * factor, x.shape()[3] * factor, x.shape()[4] * factor});
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
    std::vector<double> y(x.size());
    const std::vector<double>& xv = x.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = xv[i] >= 0.0 ? xv[i] : negative_slope * xv[i];
    auto xn = x.node();
    auto backward_fn = [xn, negative_slope](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] +=
                self.grad[i] * (xn->value[i] >= 0.0 ? 1.0 : negative_slope);
    };
    return make_op(x.shape(), std::move(y), {x}, std::move(backward_fn));
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_channels: no inputs");
    check_5d(parts[0], "concat input");
    const Shape& s0 = parts[0].shape();
    std::size_t c_total = 0;
    for (const Tensor& p : parts) {
        check_5d(p, "concat input");
        const Shape& s = p.shape();
        if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[4] != s0[4])
            throw ValueError("concat_channels: batch/spatial dims mismatch");
        c_total += s[1];
    }
    const std::size_t B = s0[0];
    const std::size_t vox = s0[2] * s0[3] * s0[4];

    std::vector<double> y(B * c_total * vox);
    std::vector<std::size_t> offsets;  // channel offset per part
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const std::size_t pc = p.shape()[1];
        const std::vector<double>& pv = p.values();
        for (std::size_t bb = 0; bb < B; ++bb)
            std::memcpy(&y[(bb * c_total + off) * vox], &pv[bb * pc * vox],
                        pc * vox * sizeof(double));
        off += pc;
    }

    std::vector<std::shared_ptr<Node>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    std::vector<std::size_t> part_channels;
    for (const Tensor& p : parts) part_channels.push_back(p.shape()[1]);

    auto backward_fn = [B, vox, c_total, nodes, offsets, part_channels](Node& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            Node* pn = nodes[k].get();
            if (!pn->requires_grad) continue;
            pn->ensure_grad();
            const std::size_t pc = part_channels[k];
            for (std::size_t bb = 0; bb < B; ++bb) {
                const double* src = &self.grad[(bb * c_total + offsets[k]) * vox];
                double* dst = &pn->grad[bb * pc * vox];
                for (std::size_t i = 0; i < pc * vox; ++i) dst[i] += src[i];
            }
        }
    };

    return make_op({B, c_total, s0[2], s0[3], s0[4]}, std::move(y), parts,
                   std::move(backward_fn));
}

Tensor slice_channel(const Tensor& x, std::size_t channel) {
    check_5d(x, "slice input");
    const std::size_t B = x.shape()[0], C = x.shape()[1];
    if (channel >= C) throw ValueError("slice_channel: channel out of range");
    const std::size_t vox = x.shape()[2] * x.shape()[3] * x.shape()[4];
    std::vector<double> y(B * vox);
    for (std::size_t bb = 0; bb < B; ++bb)
        std::memcpy(&y[bb * vox], &x.values()[(bb * C + channel) * vox],
                    vox * sizeof(double));
    auto xn = x.node();
    auto backward_fn = [B, C, vox, channel, xn](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t bb = 0; bb < B; ++bb) {
            const double* src = &self.grad[bb * vox];
            double* dst = &xn->grad[(bb * C + channel) * vox];
            for (std::size_t i = 0; i < vox; ++i) dst[i] += src[i];
        }
    };
    return make_op({B, 1, x.shape()[2], x.shape()[3], x.shape()[4]}, std::move(y),
                   {x}, std::move(backward_fn));
}

Tensor softmax_channels(const Tensor& x) {
    check_5d(x, "softmax input");
    const std::size_t B = x.shape()[0], C = x.shape()[1];
    const std::size_t vox = x.shape()[2] * x.shape()[3] * x.shape()[4];
    std::vector<double> y(x.size());
    const std::vector<double>& xv = x.values();
    const std::int64_t bvox = static_cast<std::int64_t>(B * vox);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < bvox; ++i) {
        const std::size_t bb = static_cast<std::size_t>(i) / vox;
        const std::size_t v = static_cast<std::size_t>(i) % vox;
        const std::size_t base = bb * C * vox + v;
        double mx = xv[base];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * vox]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double e = std::exp(xv[base + c * vox] - mx);
            y[base + c * vox] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t c = 0; c < C; ++c) y[base + c * vox] *= inv;
    }

    auto xn = x.node();
    auto backward_fn = [B, C, vox, xn](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const std::int64_t bvox = static_cast<std::int64_t>(B * vox);
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < bvox; ++i) {
            const std::size_t bb = static_cast<std::size_t>(i) / vox;
            const std::size_t v = static_cast<std::size_t>(i) % vox;
            const std::size_t base = bb * C * vox + v;
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c)
                dot += self.value[base + c * vox] * self.grad[base + c * vox];
            for (std::size_t c = 0; c < C; ++c)
                xn->grad[base + c * vox] +=
                    self.value[base + c * vox] * (self.grad[base + c * vox] - dot);
        }
    };
    return make_op(x.shape(), std::move(y), {x}, std::move(backward_fn));
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ValueError(std::string(what) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] + b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    auto backward_fn = [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i];
        }
    };
    return make_op(a.shape(), std::move(y), {a, b}, std::move(backward_fn));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] * b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    auto backward_fn = [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->value[i];
        }
    };
    return make_op(a.shape(), std::move(y), {a, b}, std::move(backward_fn));
}

Tensor divide(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "divide");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] / b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    auto backward_fn = [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
        }
    };
    return make_op(a.shape(), std::move(y), {a, b}, std::move(backward_fn));
}

Tensor affine(const Tensor& x, double scale, double shift) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale * x.values()[i] + shift;
    auto xn = x.node();
    auto backward_fn = [xn, scale](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += scale * self.grad[i];
    };
    return make_op(x.shape(), std::move(y), {x}, std::move(backward_fn));
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto xn = x.node();
    auto backward_fn = [xn](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
    return make_op(Shape{}, {s}, {x}, std::move(backward_fn));
}

Tensor dice_loss(const Tensor& logits, const Tensor& target, double epsilon) {
    check_5d(logits, "dice_loss logits");
    check_5d(target, "dice_loss target");
    if (logits.shape()[1] != 2)
        throw ValueError("dice_loss: logits must have 2 channels");
    if (target.shape()[1] != 1)
        throw ValueError("dice_loss: target must have 1 channel");
    if (logits.shape()[0] != target.shape()[0] ||
        logits.shape()[2] != target.shape()[2] ||
        logits.shape()[3] != target.shape()[3] ||
        logits.shape()[4] != target.shape()[4])
        throw ValueError("dice_loss: logits/target dims mismatch");

    const Tensor probs = softmax_channels(logits);
    const Tensor p = slice_channel(probs, 1);
    const Tensor intersection = sum_all(mul(p, target));
    const Tensor denom = add(sum_all(p), sum_all(target));
    const Tensor ratio =
        divide(affine(intersection, 2.0, epsilon), affine(denom, 1.0, epsilon));
    return affine(ratio, -1.0, 1.0);
}

void adam_step(std::span<double> param, std::span<const double> grad,
               AdamState& state, const AdamConfig& cfg) {
    if (param.size() != grad.size())
        throw ValueError("adam_step: param/grad size mismatch");
    if (state.m.empty()) state.m.assign(param.size(), 0.0);
    if (state.v.empty()) state.v.assign(param.size(), 0.0);
    if (state.m.size() != param.size() || state.v.size() != param.size())
        throw ValueError("adam_step: state size mismatch");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        param[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

namespace {

constexpr char kMagic[5] = {'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_le(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("tensor container truncated");
    return v;
}

}  // namespace

void save_tensor_container(std::ostream& out,
                           const std::vector<NamedTensor>& entries) {
    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint64_t>(out, entries.size());
    for (const NamedTensor& e : entries) {
        if (e.values.size() != shape_size(e.shape))
            throw ValueError("tensor container: entry values do not match shape: " + e.name);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (std::size_t d : e.shape) write_le<std::uint64_t>(out, d);
        write_le<std::uint64_t>(out, e.values.size());
        out.write(reinterpret_cast<const char*>(e.values.data()),
                  static_cast<std::streamsize>(e.values.size() * sizeof(double)));
    }
    if (!out) throw IoError("tensor container write failed");
}

std::vector<NamedTensor> load_tensor_container(std::istream& in) {
    char magic[5];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("tensor container: bad magic (expected CKPT1)");
    const auto count = read_le<std::uint64_t>(in);
    std::vector<NamedTensor> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor e;
        const auto name_len = read_le<std::uint32_t>(in);
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw FormatError("tensor container truncated in entry name");
        const auto ndim = read_le<std::uint32_t>(in);
        e.shape.resize(ndim);
        for (auto& d : e.shape)
            d = static_cast<std::size_t>(read_le<std::uint64_t>(in));
        const auto nval = read_le<std::uint64_t>(in);
        if (nval != shape_size(e.shape))
            throw FormatError("tensor container: value count does not match shape");
        e.values.resize(nval);
        in.read(reinterpret_cast<char*>(e.values.data()),
                static_cast<std::streamsize>(nval * sizeof(double)));
        if (!in) throw FormatError("tensor container truncated in entry values");
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace brainstrip::autodiff
