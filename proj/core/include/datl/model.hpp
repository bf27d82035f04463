#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "datl/matrix.hpp"
#include "datl/nn.hpp"
#include "datl/rng.hpp"

namespace datl {

/// What the main classifier is fed in place of the subject identity.
/// onehot_train is the training-time choice (true subject known); the other
/// three are test-time options for subjects unseen during training.
enum class ConditioningMode { onehot_train, zeros, uniform, nuisance_posterior };

std::string to_string(ConditioningMode mode);
ConditioningMode conditioning_mode_from_string(const std::string& name);

/// round-half-up of total * frac, the rule that fixes the nuisance slice
/// width for fractional splits.
std::size_t round_half_up_fraction(std::size_t total, double frac);

struct ModelConfig {
    std::size_t input_dim = 2100;  // C*T after flattening
    std::size_t latent_dim = 100;  // d
    double r_n = 0.0;              // nuisance fraction of the latent
    std::size_t head_hidden = 100;
    std::size_t num_classes = 4;   // L
    std::size_t num_subjects = 20; // S
    ConditioningMode conditioning_mode = ConditioningMode::nuisance_posterior;

    void validate() const;
    std::size_t nuisance_dim() const { return round_half_up_fraction(latent_dim, r_n); }
    std::size_t adversary_dim() const { return latent_dim - nuisance_dim(); }
};

struct MlpGrads {
    DenseGrads hidden;
    DenseGrads output;

    void scale(double factor);
    void add_scaled(const MlpGrads& other, double factor);
};

/// Two dense layers with a ReLU between them. The encoder and all three
/// heads share this shape; only the dimensions differ.
struct Mlp {
    DenseLayer hidden;
    DenseLayer output;
    Matrix cached_preact;  // hidden pre-activations from the last caching forward

    Mlp() = default;
    Mlp(std::size_t in, std::size_t mid, std::size_t out, Rng& rng);

    Matrix forward(const Matrix& x);
    Matrix forward_nocache(const Matrix& x) const;
    std::pair<Matrix, MlpGrads> backward(const Matrix& grad_out,
                                         bool need_input_grad = true) const;

    std::size_t parameter_count() const {
        return hidden.parameter_count() + output.parameter_count();
    }
    void apply(const MlpGrads& grads, double lr);
};

/// Column partition of the latent: z_a = first d - round_half_up(d*r_n)
/// columns, z_n = the rest. Concatenating the parts reproduces z exactly.
std::pair<Matrix, Matrix> split_latent(const Matrix& z, double r_n);

Matrix concat_cols(const Matrix& a, const Matrix& b);

/// Length-S conditioning vector for one subject id (1-based).
std::vector<double> condition_vector(int subject_id, ConditioningMode mode, std::size_t num_subjects,
                                     const std::vector<double>* nuisance_logits = nullptr);

struct DisentangledModel {
    ModelConfig config;
    Mlp encoder;          // theta
    Mlp adversary_head;   // phi, reads z_a, outputs S logits
    Mlp nuisance_head;    // psi, reads z_n, outputs S logits
    Mlp classifier_head;  // gamma, reads [z, s_cond], outputs L logits

    DisentangledModel() = default;
    DisentangledModel(const ModelConfig& cfg, Rng& rng);

    Matrix encode(const Matrix& x_batch);                 // caches for backward
    Matrix encode_nocache(const Matrix& x_batch) const;

    std::size_t parameter_count() const;
    /// theta, phi, psi, gamma in declaration order; used by the gradient
    /// checker and the checkpoint writer.
    std::vector<ParamRef> parameters();

    void save(const std::filesystem::path& path) const;
    static DisentangledModel load(const std::filesystem::path& path);
};

struct HeadOutputs {
    Matrix y_logits;     // n x L
    Matrix adv_logits;   // n x S
    Matrix nuis_logits;  // n x S
};

/// All three heads with a caller-supplied conditioning matrix (n x S).
/// Caches every layer input for the backward passes.
HeadOutputs forward_all(DisentangledModel& m, const Matrix& x_batch, const Matrix& s_cond);

/// Same computation without touching any cache.
HeadOutputs forward_all_nocache(const DisentangledModel& m, const Matrix& x_batch,
                                const Matrix& s_cond);

/// Evaluation-path forward: builds the conditioning matrix from the mode and
/// runs all heads without caching. subject_ids are only consulted in
/// onehot_train mode.
HeadOutputs infer(const DisentangledModel& m, const Matrix& x_batch,
                  std::span<const int> subject_ids, ConditioningMode mode);

}  // namespace datl
