#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "datl/matrix.hpp"
#include "datl/rng.hpp"

namespace datl {

struct SGDConfig {
    double learning_rate = 0.01;
    std::size_t batch_size = 16;
    std::size_t epochs = 200;

    void validate() const;  // throws std::invalid_argument
};

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)).
Matrix init_glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out);

struct DenseGrads {
    Matrix weights;
    std::vector<double> bias;
};

/// Fully connected layer. forward() caches its input so backward() can form
/// the weight gradient; backward before any forward is a state error.
class DenseLayer {
public:
    DenseLayer() = default;
    DenseLayer(std::size_t fan_in, std::size_t fan_out, Rng& rng);

    /// x*W + b with the bias broadcast over rows. Caches x.
    Matrix forward(const Matrix& x);

    /// Same product without touching the cache (evaluation path).
    Matrix forward_nocache(const Matrix& x) const;

    /// grad_in = grad_out * W^T, grad_w = cached_input^T * grad_out,
    /// grad_b = column sums of grad_out. Pass need_input_grad = false at the
    /// first layer of a network to skip the unused input gradient.
    std::pair<Matrix, DenseGrads> backward(const Matrix& grad_out,
                                           bool need_input_grad = true) const;

    std::size_t fan_in() const { return weights.rows; }
    std::size_t fan_out() const { return weights.cols; }
    std::size_t parameter_count() const { return weights.size() + bias.size(); }

    Matrix weights;             // fan_in x fan_out
    std::vector<double> bias;   // fan_out
    std::optional<Matrix> cached_input;
};

Matrix relu(const Matrix& x);

/// Passes gradient where x > 0, zero elsewhere (subgradient 0 at exactly 0).
Matrix relu_backward(const Matrix& x, const Matrix& grad_out);

Matrix softmax_rows(const Matrix& logits);

/// Index of the row maximum; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Matrix& m);

struct SoftmaxCEResult {
    double loss = 0.0;
    Matrix grad_logits;
};

/// Mean over rows of -log softmax(logits)[label], stabilized by per-row max
/// subtraction. grad = (softmax - onehot) / n_rows.
SoftmaxCEResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels);

/// p <- p - lr * g, shape-checked.
void sgd_step(Matrix& param, const Matrix& grad, double lr);
void sgd_step(std::vector<double>& param, const std::vector<double>& grad, double lr);
void sgd_step(DenseLayer& layer, const DenseGrads& grads, double lr);

/// Mutable view over one flat parameter array, used by the gradient checker
/// and by anything that walks a model's parameters in a fixed order.
struct ParamRef {
    double* data = nullptr;
    std::size_t size = 0;
};

/// Central finite differences per parameter against the supplied analytic
/// gradient. loss() must recompute the scalar loss at the current parameter
/// values. Returns max |analytic - numeric| / max(1, |numeric|).
double grad_check(std::span<const ParamRef> params,
                  std::span<const std::vector<double>> analytic,
                  const std::function<double()>& loss,
                  double eps);

}  // namespace datl
