#include "rangegen/nn/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "rangegen/errors.hpp"

namespace rangegen::nn {

namespace {

std::atomic<uint64_t> g_next_id{1};
thread_local int g_no_grad_depth = 0;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::shared_ptr<Node> new_node(Shape shape, const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.resize(numel_of(n->shape));
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    n->op = op;
    return n;
}

/// Creates the result node of an op. Parents and the backward closure are
/// recorded only when gradients are both enabled and needed.
Tensor make_op(Shape shape, const char* op, std::initializer_list<Tensor> inputs,
               const std::function<void(Node&)>& backward_fn) {
    auto n = new_node(std::move(shape), op);
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) needs_grad = needs_grad || t.node()->requires_grad;
    }
    if (needs_grad) {
        n->requires_grad = true;
        for (const Tensor& t : inputs) n->parents.push_back(t.node());
        n->backward = backward_fn;
    }
    return Tensor(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

int wrap(int i, int n) {
    i %= n;
    return i < 0 ? i + n : i;
}

Tensor unary_pointwise(const Tensor& a, const char* op,
                       const std::function<double(double)>& f,
                       const std::function<double(double, double)>& df_from_x_y) {
    Tensor out = make_op(a.shape(), op, {a}, [a, df_from_x_y](Node& self) {
        a.node()->ensure_grad();
        const double* x = a.node()->value.data();
        const double* y = self.value.data();
        double* gx = a.node()->grad.data();
        const double* g = self.grad.data();
        for (size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * df_from_x_y(x[i], y[i]);
    });
    const double* x = a.data();
    double* y = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) y[i] = f(x[i]);
    return out;
}

}  // namespace

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = new_node(shape, "leaf");
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(const Shape& shape, double value) {
    auto n = new_node(shape, "leaf");
    std::fill(n->value.begin(), n->value.end(), value);
    return Tensor(n);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
        throw std::invalid_argument("from_data: size mismatch");
    auto n = new_node(shape, "leaf");
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

double Tensor::item() const {
    if (numel() != 1) throw std::logic_error("item(): tensor is not scalar");
    return node_->value[0];
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Tensor& root) {
    if (root.numel() != 1) throw std::logic_error("backward: root must be scalar");
    if (!root.node()->requires_grad) return;

    // Collect the reachable grad-requiring subgraph and run it in reverse
    // creation order (a valid topological order for a forward-built DAG).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

    root.node()->ensure_grad();
    root.node()->grad[0] += 1.0;
    for (Node* n : order) {
        if (n->backward) n->backward(*n);
    }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_op(a.shape(), "add", {a, b}, [a, b](Node& self) {
        a.node()->ensure_grad();
        b.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) {
            a.node()->grad[i] += self.grad[i];
            b.node()->grad[i] += self.grad[i];
        }
    });
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_op(a.shape(), "sub", {a, b}, [a, b](Node& self) {
        a.node()->ensure_grad();
        b.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) {
            a.node()->grad[i] += self.grad[i];
            b.node()->grad[i] -= self.grad[i];
        }
    });
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_op(a.shape(), "mul", {a, b}, [a, b](Node& self) {
        a.node()->ensure_grad();
        b.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) {
            a.node()->grad[i] += self.grad[i] * b.node()->value[i];
            b.node()->grad[i] += self.grad[i] * a.node()->value[i];
        }
    });
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = make_op(a.shape(), "scale", {a}, [a, s](Node& self) {
        a.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) a.node()->grad[i] += self.grad[i] * s;
    });
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = make_op(a.shape(), "add_scalar", {a}, [a](Node& self) {
        a.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) a.node()->grad[i] += self.grad[i];
    });
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + s;
    return out;
}

Tensor abs(const Tensor& a) {
    return unary_pointwise(a, "abs", [](double x) { return std::abs(x); },
                           [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor silu(const Tensor& a) {
    return unary_pointwise(
        a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor relu(const Tensor& a) {
    return unary_pointwise(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_pointwise(a, "leaky_relu",
                           [slope](double x) { return x > 0.0 ? x : slope * x; },
                           [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor tanh(const Tensor& a) {
    return unary_pointwise(a, "tanh", [](double x) { return std::tanh(x); },
                           [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_pointwise(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                           [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary_pointwise(
        a, "softplus",
        [](double x) { return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0))); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor mask_mul(const Tensor& a, const std::vector<double>& mask) {
    if (static_cast<int64_t>(mask.size()) != a.numel())
        throw std::invalid_argument("mask_mul: size mismatch");
    Tensor out = make_op(a.shape(), "mask_mul", {a}, [a, mask](Node& self) {
        a.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i)
            a.node()->grad[i] += self.grad[i] * mask[i];
    });
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * mask[i];
    return out;
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
    Tensor out = make_op({1}, "sum", {a}, [a](Node& self) {
        a.node()->ensure_grad();
        const double g = self.grad[0];
        for (double& gx : a.node()->grad) gx += g;
    });
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---- shape ----

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (numel_of(shape) != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor out = make_op(shape, "reshape", {a}, [a](Node& self) {
        a.node()->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i) a.node()->grad[i] += self.grad[i];
    });
    std::copy(a.data(), a.data() + a.numel(), out.data());
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const int height = parts[0].dim(1), width = parts[0].dim(2);
    int channels = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 3 || p.dim(1) != height || p.dim(2) != width)
            throw std::invalid_argument("concat_channels: spatial shape mismatch");
        channels += p.dim(0);
    }
    const int64_t plane = static_cast<int64_t>(height) * width;

    auto n = new_node({channels, height, width}, "concat_channels");
    bool needs_grad = false;
    if (grad_enabled())
        for (const Tensor& p : parts) needs_grad = needs_grad || p.node()->requires_grad;
    if (needs_grad) {
        n->requires_grad = true;
        for (const Tensor& p : parts) n->parents.push_back(p.node());
        auto parts_copy = parts;
        n->backward = [parts_copy](Node& self) {
            int64_t offset = 0;
            for (const Tensor& p : parts_copy) {
                p.node()->ensure_grad();
                const int64_t sz = p.numel();
                for (int64_t i = 0; i < sz; ++i) p.node()->grad[i] += self.grad[offset + i];
                offset += sz;
            }
        };
    }
    int64_t offset = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), n->value.data() + offset);
        offset += p.numel();
    }
    return Tensor(n);
}

Tensor slice_channels(const Tensor& a, int begin, int end) {
    if (a.ndim() != 3 || begin < 0 || end > a.dim(0) || begin >= end)
        throw std::invalid_argument("slice_channels: bad range");
    const int height = a.dim(1), width = a.dim(2);
    const int64_t plane = static_cast<int64_t>(height) * width;
    Tensor out = make_op({end - begin, height, width}, "slice_channels", {a},
                         [a, begin, plane](Node& self) {
                             a.node()->ensure_grad();
                             const int64_t base = begin * plane;
                             for (size_t i = 0; i < self.value.size(); ++i)
                                 a.node()->grad[base + i] += self.grad[i];
                         });
    std::copy(a.data() + begin * plane, a.data() + end * plane, out.data());
    return out;
}

Tensor image_to_rows(const Tensor& a) {
    if (a.ndim() != 3) throw std::invalid_argument("image_to_rows: expected [C,H,W]");
    const int channels = a.dim(0);
    const int64_t plane = static_cast<int64_t>(a.dim(1)) * a.dim(2);
    Tensor out = make_op({static_cast<int>(plane), channels}, "image_to_rows", {a},
                         [a, channels, plane](Node& self) {
                             a.node()->ensure_grad();
                             for (int64_t p = 0; p < plane; ++p)
                                 for (int c = 0; c < channels; ++c)
                                     a.node()->grad[c * plane + p] +=
                                         self.grad[p * channels + c];
                         });
    for (int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < channels; ++c)
            out.data()[p * channels + c] = a.data()[c * plane + p];
    return out;
}

Tensor rows_to_image(const Tensor& a, int height, int width) {
    if (a.ndim() != 2 || a.dim(0) != height * width)
        throw std::invalid_argument("rows_to_image: shape mismatch");
    const int channels = a.dim(1);
    const int64_t plane = static_cast<int64_t>(height) * width;
    Tensor out = make_op({channels, height, width}, "rows_to_image", {a},
                         [a, channels, plane](Node& self) {
                             a.node()->ensure_grad();
                             for (int64_t p = 0; p < plane; ++p)
                                 for (int c = 0; c < channels; ++c)
                                     a.node()->grad[p * channels + c] +=
                                         self.grad[c * plane + p];
                         });
    for (int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < channels; ++c)
            out.data()[c * plane + p] = a.data()[p * channels + c];
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("transpose: expected [m,n]");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = make_op({n, m}, "transpose", {a}, [a, m, n](Node& self) {
        a.node()->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                a.node()->grad[static_cast<int64_t>(i) * n + j] +=
                    self.grad[static_cast<int64_t>(j) * m + i];
    });
    CMapRM in(a.data(), m, n);
    MapRM(out.data(), n, m) = in.transpose();
    return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_op({m, n}, "matmul", {a, b}, [a, b, m, k, n](Node& self) {
        a.node()->ensure_grad();
        b.node()->ensure_grad();
        CMapRM g(self.grad.data(), m, n);
        CMapRM av(a.data(), m, k);
        CMapRM bv(b.data(), k, n);
        MapRM(a.node()->grad.data(), m, k).noalias() += g * bv.transpose();
        MapRM(b.node()->grad.data(), k, n).noalias() += av.transpose() * g;
    });
    CMapRM av(a.data(), m, k);
    CMapRM bv(b.data(), k, n);
    MapRM(out.data(), m, n).noalias() = av * bv;
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    if (a.ndim() != 2 || bias.ndim() != 1 || bias.dim(0) != a.dim(1))
        throw std::invalid_argument("add_rowvec: shape mismatch");
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor out = make_op(a.shape(), "add_rowvec", {a, bias}, [a, bias, rows, cols](Node& self) {
        a.node()->ensure_grad();
        bias.node()->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                const double g = self.grad[static_cast<int64_t>(i) * cols + j];
                a.node()->grad[static_cast<int64_t>(i) * cols + j] += g;
                bias.node()->grad[j] += g;
            }
    });
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out.data()[static_cast<int64_t>(i) * cols + j] =
                a.data()[static_cast<int64_t>(i) * cols + j] + bias.data()[j];
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("softmax_rows: expected [m,n]");
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor out = make_op(a.shape(), "softmax_rows", {a}, [a, rows, cols](Node& self) {
        a.node()->ensure_grad();
        for (int i = 0; i < rows; ++i) {
            const double* y = self.value.data() + static_cast<int64_t>(i) * cols;
            const double* g = self.grad.data() + static_cast<int64_t>(i) * cols;
            double* gx = a.node()->grad.data() + static_cast<int64_t>(i) * cols;
            double dot = 0.0;
            for (int j = 0; j < cols; ++j) dot += g[j] * y[j];
            for (int j = 0; j < cols; ++j) gx[j] += y[j] * (g[j] - dot);
        }
    });
    for (int i = 0; i < rows; ++i) {
        const double* x = a.data() + static_cast<int64_t>(i) * cols;
        double* y = out.data() + static_cast<int64_t>(i) * cols;
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double total = 0.0;
        for (int j = 0; j < cols; ++j) total += (y[j] = std::exp(x[j] - mx));
        for (int j = 0; j < cols; ++j) y[j] /= total;
    }
    return out;
}

// ---- image ops ----

namespace {

struct ConvGeom {
    int in_c, in_h, in_w;
    int out_c, out_h, out_w;
    int kh, kw, sy, sx, pad_y, pad_x;
    int64_t cols_k, cols_n;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int sy, int sx) {
    if (x.ndim() != 3 || w.ndim() != 4) throw std::invalid_argument("conv2d: bad ranks");
    ConvGeom g;
    g.in_c = x.dim(0);
    g.in_h = x.dim(1);
    g.in_w = x.dim(2);
    g.out_c = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.sy = sy;
    g.sx = sx;
    if (w.dim(1) != g.in_c) throw std::invalid_argument("conv2d: channel mismatch");
    if (g.in_w % sx != 0) throw std::invalid_argument("conv2d: width not divisible by stride");
    g.pad_y = g.kh % 2 == 0 ? g.kh / 2 - 1 : g.kh / 2;
    g.pad_x = g.kw % 2 == 0 ? g.kw / 2 - 1 : g.kw / 2;
    g.out_h = (g.in_h + 2 * g.pad_y - g.kh) / sy + 1;
    g.out_w = g.in_w / sx;
    if (g.out_h < 1) throw std::invalid_argument("conv2d: kernel taller than padded input");
    g.cols_k = static_cast<int64_t>(g.in_c) * g.kh * g.kw;
    g.cols_n = static_cast<int64_t>(g.out_h) * g.out_w;
    return g;
}

// Patch matrix: one column per output pixel, kernel taps ordered (c, ky, kx).
// Width wraps circularly, height is zero padded.
void im2col(const double* x, const ConvGeom& g, double* cols) {
    for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
            const int64_t col_index = static_cast<int64_t>(oy) * g.out_w + ox;
            double* col = cols + col_index;
            for (int c = 0; c < g.in_c; ++c) {
                const double* plane = x + static_cast<int64_t>(c) * g.in_h * g.in_w;
                for (int ky = 0; ky < g.kh; ++ky) {
                    const int iy = oy * g.sy + ky - g.pad_y;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int ix = wrap(ox * g.sx + kx - g.pad_x, g.in_w);
                        const int64_t k =
                            (static_cast<int64_t>(c) * g.kh + ky) * g.kw + kx;
                        col[k * g.cols_n] =
                            (iy >= 0 && iy < g.in_h)
                                ? plane[static_cast<int64_t>(iy) * g.in_w + ix]
                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const double* cols, const ConvGeom& g, double* gx) {
    for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
            const int64_t col_index = static_cast<int64_t>(oy) * g.out_w + ox;
            const double* col = cols + col_index;
            for (int c = 0; c < g.in_c; ++c) {
                double* plane = gx + static_cast<int64_t>(c) * g.in_h * g.in_w;
                for (int ky = 0; ky < g.kh; ++ky) {
                    const int iy = oy * g.sy + ky - g.pad_y;
                    if (iy < 0 || iy >= g.in_h) continue;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int ix = wrap(ox * g.sx + kx - g.pad_x, g.in_w);
                        const int64_t k =
                            (static_cast<int64_t>(c) * g.kh + ky) * g.kw + kx;
                        plane[static_cast<int64_t>(iy) * g.in_w + ix] += col[k * g.cols_n];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride_y,
              int stride_x) {
    const ConvGeom g = conv_geometry(x, weight, stride_y, stride_x);
    const bool with_bias = bias.defined();
    if (with_bias && (bias.ndim() != 1 || bias.dim(0) != g.out_c))
        throw std::invalid_argument("conv2d: bias shape mismatch");

    // Column-major patch matrix: rows = kernel taps, cols = output pixels.
    auto cols = std::make_shared<std::vector<double>>(g.cols_k * g.cols_n);
    im2col(x.data(), g, cols->data());

    auto backward_fn = [x, weight, bias, g, cols, with_bias](Node& self) {
        x.node()->ensure_grad();
        weight.node()->ensure_grad();
        CMapRM gy(self.grad.data(), g.out_c, g.cols_n);
        // dW = dY * colsT
        Eigen::Map<const Eigen::MatrixXd> colm(cols->data(), g.cols_n, g.cols_k);
        MapRM(weight.node()->grad.data(), g.out_c, g.cols_k).noalias() += gy * colm;
        // dcols = WT * dY, then scatter back to the input image.
        CMapRM wv(weight.data(), g.out_c, g.cols_k);
        std::vector<double> dcols(g.cols_k * g.cols_n);
        Eigen::Map<Eigen::MatrixXd>(dcols.data(), g.cols_n, g.cols_k).noalias() =
            gy.transpose() * wv;
        col2im_accumulate(dcols.data(), g, x.node()->grad.data());
        if (with_bias) {
            bias.node()->ensure_grad();
            for (int c = 0; c < g.out_c; ++c) {
                double acc = 0.0;
                const double* row = self.grad.data() + static_cast<int64_t>(c) * g.cols_n;
                for (int64_t i = 0; i < g.cols_n; ++i) acc += row[i];
                bias.node()->grad[c] += acc;
            }
        }
    };

    Tensor out = with_bias
                     ? make_op({g.out_c, g.out_h, g.out_w}, "conv2d", {x, weight, bias},
                               backward_fn)
                     : make_op({g.out_c, g.out_h, g.out_w}, "conv2d", {x, weight}, backward_fn);

    CMapRM wv(weight.data(), g.out_c, g.cols_k);
    Eigen::Map<const Eigen::MatrixXd> colm(cols->data(), g.cols_n, g.cols_k);
    MapRM yv(out.data(), g.out_c, g.cols_n);
    yv.noalias() = wv * colm.transpose();
    if (with_bias)
        for (int c = 0; c < g.out_c; ++c) yv.row(c).array() += bias.data()[c];
    if (!out.node()->requires_grad) cols.reset();  // free the patch cache in inference mode
    return out;
}

Tensor bias_add_channels(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 3 || bias.ndim() != 1 || bias.dim(0) != x.dim(0))
        throw std::invalid_argument("bias_add_channels: shape mismatch");
    const int channels = x.dim(0);
    const int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    Tensor out =
        make_op(x.shape(), "bias_add_channels", {x, bias}, [x, bias, channels, plane](Node& self) {
            x.node()->ensure_grad();
            bias.node()->ensure_grad();
            for (int c = 0; c < channels; ++c) {
                double acc = 0.0;
                for (int64_t i = 0; i < plane; ++i) {
                    const double g = self.grad[c * plane + i];
                    x.node()->grad[c * plane + i] += g;
                    acc += g;
                }
                bias.node()->grad[c] += acc;
            }
        });
    for (int c = 0; c < channels; ++c)
        for (int64_t i = 0; i < plane; ++i)
            out.data()[c * plane + i] = x.data()[c * plane + i] + bias.data()[c];
    return out;
}

Tensor upsample_nearest(const Tensor& x, int factor_y, int factor_x) {
    if (x.ndim() != 3) throw std::invalid_argument("upsample_nearest: expected [C,H,W]");
    const int channels = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
    const int out_h = in_h * factor_y, out_w = in_w * factor_x;
    Tensor out = make_op({channels, out_h, out_w}, "upsample_nearest", {x},
                         [x, channels, in_h, in_w, out_h, out_w, factor_y, factor_x](Node& self) {
                             x.node()->ensure_grad();
                             for (int c = 0; c < channels; ++c)
                                 for (int oy = 0; oy < out_h; ++oy)
                                     for (int ox = 0; ox < out_w; ++ox)
                                         x.node()->grad[(static_cast<int64_t>(c) * in_h +
                                                         oy / factor_y) *
                                                            in_w +
                                                        ox / factor_x] +=
                                             self.grad[(static_cast<int64_t>(c) * out_h + oy) *
                                                           out_w +
                                                       ox];
                         });
    for (int c = 0; c < channels; ++c)
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox)
                out.data()[(static_cast<int64_t>(c) * out_h + oy) * out_w + ox] =
                    x.data()[(static_cast<int64_t>(c) * in_h + oy / factor_y) * in_w +
                             ox / factor_x];
    return out;
}

Tensor avg_pool(const Tensor& x, int window_y, int window_x) {
    if (x.ndim() != 3 || x.dim(1) % window_y != 0 || x.dim(2) % window_x != 0)
        throw std::invalid_argument("avg_pool: window must divide spatial dims");
    const int channels = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
    const int out_h = in_h / window_y, out_w = in_w / window_x;
    const double inv = 1.0 / (window_y * window_x);
    Tensor out = make_op({channels, out_h, out_w}, "avg_pool", {x},
                         [x, channels, in_h, in_w, out_h, out_w, window_y, window_x,
                          inv](Node& self) {
                             x.node()->ensure_grad();
                             for (int c = 0; c < channels; ++c)
                                 for (int oy = 0; oy < out_h; ++oy)
                                     for (int ox = 0; ox < out_w; ++ox) {
                                         const double g =
                                             self.grad[(static_cast<int64_t>(c) * out_h + oy) *
                                                           out_w +
                                                       ox] *
                                             inv;
                                         for (int wy = 0; wy < window_y; ++wy)
                                             for (int wx = 0; wx < window_x; ++wx)
                                                 x.node()->grad[(static_cast<int64_t>(c) * in_h +
                                                                 oy * window_y + wy) *
                                                                    in_w +
                                                                ox * window_x + wx] += g;
                                     }
                         });
    for (int c = 0; c < channels; ++c)
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox) {
                double acc = 0.0;
                for (int wy = 0; wy < window_y; ++wy)
                    for (int wx = 0; wx < window_x; ++wx)
                        acc += x.data()[(static_cast<int64_t>(c) * in_h + oy * window_y + wy) *
                                            in_w +
                                        ox * window_x + wx];
                out.data()[(static_cast<int64_t>(c) * out_h + oy) * out_w + ox] = acc * inv;
            }
    return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
    if (x.ndim() != 3) throw std::invalid_argument("group_norm: expected [C,H,W]");
    const int channels = x.dim(0);
    if (channels % groups != 0)
        throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (gamma.dim(0) != channels || beta.dim(0) != channels)
        throw std::invalid_argument("group_norm: affine shape mismatch");
    const int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const int group_c = channels / groups;
    const int64_t group_n = group_c * plane;

    auto mean_istd = std::make_shared<std::vector<double>>(2 * groups);
    Tensor out = make_op(
        x.shape(), "group_norm", {x, gamma, beta},
        [x, gamma, beta, groups, group_c, plane, group_n, mean_istd](Node& self) {
            x.node()->ensure_grad();
            gamma.node()->ensure_grad();
            beta.node()->ensure_grad();
            for (int g = 0; g < groups; ++g) {
                const double mu = (*mean_istd)[2 * g];
                const double istd = (*mean_istd)[2 * g + 1];
                const int64_t base = static_cast<int64_t>(g) * group_n;
                // Accumulate dγ, dβ and the two reduction terms of dx.
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int cc = 0; cc < group_c; ++cc) {
                    const int c = g * group_c + cc;
                    double dgamma = 0.0, dbeta = 0.0;
                    for (int64_t i = 0; i < plane; ++i) {
                        const int64_t idx = base + cc * plane + i;
                        const double xhat = (x.node()->value[idx] - mu) * istd;
                        const double go = self.grad[idx];
                        dgamma += go * xhat;
                        dbeta += go;
                        const double dxhat = go * gamma.node()->value[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    gamma.node()->grad[c] += dgamma;
                    beta.node()->grad[c] += dbeta;
                }
                const double inv_n = 1.0 / static_cast<double>(group_n);
                for (int cc = 0; cc < group_c; ++cc) {
                    const int c = g * group_c + cc;
                    const double gc = gamma.node()->value[c];
                    for (int64_t i = 0; i < plane; ++i) {
                        const int64_t idx = base + cc * plane + i;
                        const double xhat = (x.node()->value[idx] - mu) * istd;
                        const double dxhat = self.grad[idx] * gc;
                        x.node()->grad[idx] +=
                            istd * (dxhat - inv_n * (sum_dxhat + xhat * sum_dxhat_xhat));
                    }
                }
            }
        });

    for (int g = 0; g < groups; ++g) {
        const int64_t base = static_cast<int64_t>(g) * group_n;
        double mu = 0.0;
        for (int64_t i = 0; i < group_n; ++i) mu += x.data()[base + i];
        mu /= static_cast<double>(group_n);
        double var = 0.0;
        for (int64_t i = 0; i < group_n; ++i) {
            const double d = x.data()[base + i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(group_n);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*mean_istd)[2 * g] = mu;
        (*mean_istd)[2 * g + 1] = istd;
        for (int cc = 0; cc < group_c; ++cc) {
            const int c = g * group_c + cc;
            const double gc = gamma.data()[c], bc = beta.data()[c];
            for (int64_t i = 0; i < plane; ++i) {
                const int64_t idx = base + cc * plane + i;
                out.data()[idx] = (x.data()[idx] - mu) * istd * gc + bc;
            }
        }
    }
    return out;
}

// ---- special ----

Tensor detach(const Tensor& a) {
    auto n = new_node(a.shape(), "detach");
    n->value = a.node()->value;
    return Tensor(n);
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
    if (table.ndim() != 2) throw std::invalid_argument("gather_rows: expected [K,c]");
    const int dim = table.dim(1);
    const int n = static_cast<int>(indices.size());
    Tensor out = make_op({n, dim}, "gather_rows", {table}, [table, indices, dim](Node& self) {
        table.node()->ensure_grad();
        for (size_t i = 0; i < indices.size(); ++i)
            for (int j = 0; j < dim; ++j)
                table.node()->grad[static_cast<int64_t>(indices[i]) * dim + j] +=
                    self.grad[static_cast<int64_t>(i) * dim + j];
    });
    for (int i = 0; i < n; ++i)
        std::copy(table.data() + static_cast<int64_t>(indices[i]) * dim,
                  table.data() + static_cast<int64_t>(indices[i] + 1) * dim,
                  out.data() + static_cast<int64_t>(i) * dim);
    return out;
}

Tensor coord_image(const Tensor& v, const SensorConfig& cfg) {
    if (v.ndim() != 3 || v.dim(0) != 1 || v.dim(1) != cfg.height || v.dim(2) != cfg.width)
        throw std::invalid_argument("coord_image: expected [1,H,W] matching the sensor");
    const int height = cfg.height, width = cfg.width;
    const int64_t plane = static_cast<int64_t>(height) * width;

    // Pixel-center unit ray directions, shared by forward and backward.
    auto dirs = std::make_shared<std::vector<double>>(3 * plane);
    const double span = cfg.fov_up_rad() - cfg.fov_down_rad();
    for (int r = 0; r < height; ++r) {
        const double pitch = (1.0 - (r + 0.5) / height) * span + cfg.fov_down_rad();
        for (int c = 0; c < width; ++c) {
            const double yaw = (2.0 * (c + 0.5) / width - 1.0) * M_PI;
            const int64_t i = static_cast<int64_t>(r) * width + c;
            (*dirs)[i] = std::cos(yaw) * std::cos(pitch);
            (*dirs)[plane + i] = -std::sin(yaw) * std::cos(pitch);
            (*dirs)[2 * plane + i] = std::sin(pitch);
        }
    }

    const double omega = cfg.omega;
    const double ln2 = M_LN2;
    Tensor out = make_op({3, height, width}, "coord_image", {v},
                         [v, dirs, plane, omega, ln2](Node& self) {
                             v.node()->ensure_grad();
                             for (int64_t i = 0; i < plane; ++i) {
                                 const double vv = v.node()->value[i];
                                 const double ddepth_dv =
                                     ln2 * omega * std::exp2(omega * vv);
                                 double acc = 0.0;
                                 for (int axis = 0; axis < 3; ++axis)
                                     acc += self.grad[axis * plane + i] *
                                            (*dirs)[axis * plane + i];
                                 v.node()->grad[i] += acc * ddepth_dv;
                             }
                         });
    for (int64_t i = 0; i < plane; ++i) {
        const double depth = std::exp2(omega * v.data()[i]) - 1.0;
        for (int axis = 0; axis < 3; ++axis)
            out.data()[axis * plane + i] = (*dirs)[axis * plane + i] * depth;
    }
    return out;
}

}  // namespace rangegen::nn
