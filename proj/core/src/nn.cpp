#include "datl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace datl {

void SGDConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("SGDConfig: learning_rate must be > 0");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("SGDConfig: batch_size must be >= 1");
    }
    if (epochs < 1) {
        throw std::invalid_argument("SGDConfig: epochs must be >= 1");
    }
}

Matrix init_glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    if (fan_in < 1 || fan_out < 1) {
        throw std::invalid_argument("init_glorot: fans must be >= 1");
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (double& v : w.values) {
        v = rng.uniform(-bound, bound);
    }
    return w;
}

DenseLayer::DenseLayer(std::size_t fan_in, std::size_t fan_out, Rng& rng)
    : bias(fan_out, 0.0) {
    if (fan_in == 0) {
        // Degenerate input (e.g. an empty latent slice): logits come from the
        // bias alone.
        weights = Matrix(0, fan_out);
    } else {
        weights = init_glorot(rng, fan_in, fan_out);
    }
}

Matrix DenseLayer::forward_nocache(const Matrix& x) const {
    if (x.cols != weights.rows) {
        throw std::invalid_argument("dense_forward: input " + shape_str(x) +
                                    " does not match weights " + shape_str(weights));
    }
    Matrix out = weights.rows == 0 ? Matrix(x.rows, weights.cols) : matmul(x, weights);
    for (std::size_t i = 0; i < out.rows; ++i) {
        double* row = out.row_ptr(i);
        for (std::size_t j = 0; j < out.cols; ++j) {
            row[j] += bias[j];
        }
    }
    return out;
}

Matrix DenseLayer::forward(const Matrix& x) {
    Matrix out = forward_nocache(x);
    cached_input = x;
    return out;
}

std::pair<Matrix, DenseGrads> DenseLayer::backward(const Matrix& grad_out,
                                                   bool need_input_grad) const {
    if (!cached_input.has_value()) {
        throw std::runtime_error("dense_backward: backward called before forward");
    }
    const Matrix& x = *cached_input;
    if (grad_out.rows != x.rows || grad_out.cols != weights.cols) {
        throw std::invalid_argument("dense_backward: grad_out " + shape_str(grad_out) +
                                    " does not match forward output shape");
    }
    DenseGrads grads;
    grads.weights = weights.rows == 0 ? Matrix(0, weights.cols) : matmul_tn(x, grad_out);
    grads.bias = column_sums(grad_out);
    Matrix grad_in;
    if (need_input_grad) {
        grad_in = weights.rows == 0 ? Matrix(grad_out.rows, 0) : matmul_nt(grad_out, weights);
    }
    return {std::move(grad_in), std::move(grads)};
}

Matrix relu(const Matrix& x) {
    Matrix out = x;
    for (double& v : out.values) {
        v = v > 0.0 ? v : 0.0;
    }
    return out;
}

Matrix relu_backward(const Matrix& x, const Matrix& grad_out) {
    if (!x.same_shape(grad_out)) {
        throw std::invalid_argument("relu_backward: shape mismatch " + shape_str(x) + " vs " +
                                    shape_str(grad_out));
    }
    Matrix out = grad_out;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (!(x.values[i] > 0.0)) out.values[i] = 0.0;
    }
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out = logits;
    for (std::size_t i = 0; i < out.rows; ++i) {
        double* row = out.row_ptr(i);
        double mx = row[0];
        for (std::size_t j = 1; j < out.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < out.cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < out.cols; ++j) row[j] /= sum;
    }
    return out;
}

std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(m.rows, 0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.row_ptr(i);
        std::size_t best = 0;
        for (std::size_t j = 1; j < m.cols; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

SoftmaxCEResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
    if (labels.size() != logits.rows) {
        throw std::invalid_argument("softmax_cross_entropy: one label per row required");
    }
    if (logits.cols == 0 || logits.rows == 0) {
        throw std::invalid_argument("softmax_cross_entropy: empty logits");
    }
    const auto k = static_cast<int>(logits.cols);
    for (int label : labels) {
        if (label < 0 || label >= k) {
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                        " outside [0, " + std::to_string(k) + ")");
        }
    }

    SoftmaxCEResult result;
    result.grad_logits = Matrix(logits.rows, logits.cols);
    const double inv_n = 1.0 / static_cast<double>(logits.rows);
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.rows; ++i) {
        const double* in = logits.row_ptr(i);
        double* out = result.grad_logits.row_ptr(i);
        double mx = in[0];
        for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        const auto label = static_cast<std::size_t>(labels[i]);
        loss -= in[label] - mx - std::log(sum);
        for (std::size_t j = 0; j < logits.cols; ++j) out[j] /= sum;
        out[label] -= 1.0;
        for (std::size_t j = 0; j < logits.cols; ++j) out[j] *= inv_n;
    }
    result.loss = loss * inv_n;
    return result;
}

void sgd_step(Matrix& param, const Matrix& grad, double lr) {
    if (!param.same_shape(grad)) {
        throw std::invalid_argument("sgd_step: param " + shape_str(param) + " vs grad " +
                                    shape_str(grad));
    }
    for (std::size_t i = 0; i < param.values.size(); ++i) {
        param.values[i] -= lr * grad.values[i];
    }
}

void sgd_step(std::vector<double>& param, const std::vector<double>& grad, double lr) {
    if (param.size() != grad.size()) {
        throw std::invalid_argument("sgd_step: vector size mismatch");
    }
    for (std::size_t i = 0; i < param.size(); ++i) {
        param[i] -= lr * grad[i];
    }
}

void sgd_step(DenseLayer& layer, const DenseGrads& grads, double lr) {
    sgd_step(layer.weights, grads.weights, lr);
    sgd_step(layer.bias, grads.bias, lr);
}

double grad_check(std::span<const ParamRef> params,
                  std::span<const std::vector<double>> analytic,
                  const std::function<double()>& loss,
                  double eps) {
    if (!(eps > 0.0)) {
        throw std::invalid_argument("grad_check: eps must be > 0");
    }
    if (params.size() != analytic.size()) {
        throw std::invalid_argument("grad_check: one analytic gradient per parameter required");
    }
    double max_rel = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (params[p].size != analytic[p].size()) {
            throw std::invalid_argument("grad_check: gradient size mismatch at parameter " +
                                        std::to_string(p));
        }
        for (std::size_t i = 0; i < params[p].size; ++i) {
            double& v = params[p].data[i];
            const double saved = v;
            v = saved + eps;
            const double plus = loss();
            v = saved - eps;
            const double minus = loss();
            v = saved;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double rel =
                std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace datl
