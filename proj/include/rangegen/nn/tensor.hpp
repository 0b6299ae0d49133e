#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rangegen/sensor.hpp"

namespace rangegen::nn {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& shape);

/// One value in the computation graph. Gradients are accumulated into
/// `grad` during backward(); intermediate nodes free themselves when the
/// forward graph goes out of scope.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily
    bool requires_grad = false;
    uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

/// Reverse-mode autodiff tensor. Values are double precision throughout;
/// parameters are kept on the f32 grid by the optimizer so that checkpoints
/// (which store f32) round-trip exactly.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value) { return full({1}, value); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[i]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }
    double item() const;

    double* grad() {
        node_->ensure_grad();
        return node_->grad.data();
    }
    bool requires_grad() const { return node_->requires_grad; }

    std::shared_ptr<Node> node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

/// While a guard is alive, new ops record no parents or backward closures:
/// forward values only. Used by samplers and metrics.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

/// Runs reverse-mode accumulation from a scalar root.
void backward(const Tensor& root);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor mask_mul(const Tensor& a, const std::vector<double>& mask);  // constant mask

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat_channels(const std::vector<Tensor>& parts);   // CHW along C
Tensor slice_channels(const Tensor& a, int begin, int end);  // CHW
Tensor image_to_rows(const Tensor& a);  // [C,H,W] -> [H*W, C]
Tensor rows_to_image(const Tensor& a, int height, int width);
Tensor transpose(const Tensor& a);  // [m,n] -> [n,m]

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor add_rowvec(const Tensor& a, const Tensor& bias);   // [n,c] + [c]
Tensor softmax_rows(const Tensor& a);

// ---- image ops (layout [C,H,W]; width is circular, height zero-padded) ----
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride_y,
              int stride_x);
Tensor bias_add_channels(const Tensor& x, const Tensor& bias);  // [C,H,W] + [C]
Tensor upsample_nearest(const Tensor& x, int factor_y, int factor_x);
Tensor avg_pool(const Tensor& x, int window_y, int window_x);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-6);

// ---- special ----
Tensor detach(const Tensor& a);
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);  // [K,c] -> [n,c]

/// Per-pixel 3D coordinates from a [1,H,W] grid of pixel values, using the
/// sensor's pixel-center ray directions. Output is [3,H,W] in meters.
Tensor coord_image(const Tensor& v, const SensorConfig& cfg);

}  // namespace rangegen::nn
