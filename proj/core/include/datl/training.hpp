#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "datl/data.hpp"
#include "datl/model.hpp"
#include "datl/nn.hpp"

namespace datl {

struct TrainConfig {
    double lambda_a = 0.0;  // adversary weight
    double lambda_n = 0.0;  // nuisance weight
    double r_n = 0.0;       // nuisance fraction of the latent
    SGDConfig sgd;          // lr 0.01, batch 16, epochs 200 (not from any reference)
    std::uint64_t seed = 1;
    ConditioningMode conditioning_mode = ConditioningMode::nuisance_posterior;
    std::size_t early_stop_patience = 50;  // epochs without val improvement
    std::size_t adversary_steps = 1;       // probe sub-steps per batch
    bool nuisance_in_joint_step = true;    // psi also steps with the lambda_n term

    void validate() const;
};

/// The joint objective minimized by the encoder-classifier group:
/// ce_task + lambda_n * ce_nuis - lambda_a * ce_adv.
double encoder_classifier_loss(double ce_task, double ce_nuis, double ce_adv, double lambda_a,
                               double lambda_n);

struct Batch {
    Matrix x;                      // n x input_dim
    std::vector<int> labels;       // task classes, 0-based
    std::vector<int> subject_ids;  // 1-based
};

struct TrialTensor {
    Matrix x;
    std::vector<int> labels;
    std::vector<int> subject_ids;
};

TrialTensor to_tensor(std::span<const TrialRecord> trials);

/// Thrown when a loss goes non-finite mid-run; carries the diagnostic.
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BatchUpdateReport {
    double task_ce = 0.0;
    double adv_ce = 0.0;       // before the adversary sub-update
    double nuis_ce = 0.0;      // before the nuisance sub-update
    double encoder_loss = 0.0; // joint objective value at the joint sub-step
};

/// Sub-step (1): adversary parameters step on CE(s | z_a), encoder frozen.
/// Returns the CE before the first update.
double probe_update_adversary(DisentangledModel& m, const Batch& batch, double lr,
                              std::size_t steps = 1);

/// Sub-step (2): nuisance parameters step on CE(s | z_n), encoder frozen.
double probe_update_nuisance(DisentangledModel& m, const Batch& batch, double lr,
                             std::size_t steps = 1);

struct ModelGrads {
    MlpGrads encoder;
    MlpGrads adversary;
    MlpGrads nuisance;
    MlpGrads classifier;
};

struct JointLoss {
    double task_ce = 0.0;
    double adv_ce = 0.0;
    double nuis_ce = 0.0;

    double combined(double lambda_a, double lambda_n) const {
        return encoder_classifier_loss(task_ce, nuis_ce, adv_ce, lambda_a, lambda_n);
    }
};

/// Loss and gradient of the joint objective with respect to every parameter
/// group. The encoder gradient assembles the task term with the
/// lambda-weighted head terms flowing through the respective latent slices;
/// adversary/nuisance gradients carry their -lambda_a / +lambda_n scaling.
/// Conditioning is the true-subject one-hot (training path).
std::pair<JointLoss, ModelGrads> joint_loss_and_gradients(DisentangledModel& m,
                                                          const Batch& batch, double lambda_a,
                                                          double lambda_n);

/// Forward-only value of the same objective at the current parameters.
JointLoss joint_loss(const DisentangledModel& m, const Batch& batch);

/// Gradients flattened in DisentangledModel::parameters() order.
std::vector<std::vector<double>> flatten_grads(const ModelGrads& grads);

/// Smallest |hidden pre-activation| across all four blocks for this batch.
/// Finite-difference checks resample inputs whose margin is within the
/// perturbation of a ReLU kink.
double min_preactivation_margin(const DisentangledModel& m, const Batch& batch);

/// One batch, three sub-updates in fixed order: adversary probe, nuisance
/// probe, then the encoder-classifier joint step with the adversary frozen.
BatchUpdateReport train_batch(DisentangledModel& m, const Batch& batch, const TrainConfig& cfg);

struct EpochStats {
    double task_ce = 0.0;       // means over the epoch's batches
    double adv_ce = 0.0;
    double nuis_ce = 0.0;
    double encoder_loss = 0.0;
    double val_main_acc = 0.0;
    double val_adv_acc = 0.0;
    double val_nuis_acc = 0.0;
};

using EpochHistory = std::vector<EpochStats>;

struct TrainResult {
    EpochHistory history;
    std::size_t best_epoch = 0;
    double best_val_main_acc = 0.0;
};

/// Shuffles per epoch with the seeded generator, runs train_batch over all
/// batches, and restores the parameter snapshot with the best validation
/// main accuracy (ties keep the earliest epoch). Validation metrics use the
/// true-subject one-hot since validation subjects appear in training.
TrainResult train(DisentangledModel& m, std::span<const TrialRecord> train_trials,
                  std::span<const TrialRecord> val_trials, const TrainConfig& cfg);

}  // namespace datl
