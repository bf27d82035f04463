#include "datl/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace datl {

void TrainConfig::validate() const {
    if (lambda_a < 0.0 || lambda_n < 0.0) {
        throw std::invalid_argument("TrainConfig: lambda_a and lambda_n must be >= 0");
    }
    if (r_n < 0.0 || r_n > 1.0) {
        throw std::invalid_argument("TrainConfig: r_n must be in [0, 1]");
    }
    if (adversary_steps < 1) {
        throw std::invalid_argument("TrainConfig: adversary_steps must be >= 1");
    }
    sgd.validate();
}

double encoder_classifier_loss(double ce_task, double ce_nuis, double ce_adv, double lambda_a,
                               double lambda_n) {
    return ce_task + lambda_n * ce_nuis - lambda_a * ce_adv;
}

TrialTensor to_tensor(std::span<const TrialRecord> trials) {
    TrialTensor tensor;
    tensor.x = flatten_trials(trials);
    tensor.labels.reserve(trials.size());
    tensor.subject_ids.reserve(trials.size());
    for (const auto& t : trials) {
        tensor.labels.push_back(t.label);
        tensor.subject_ids.push_back(t.subject_id);
    }
    return tensor;
}

namespace {

std::vector<int> subject_classes(std::span<const int> subject_ids) {
    std::vector<int> classes(subject_ids.size());
    for (std::size_t i = 0; i < subject_ids.size(); ++i) {
        classes[i] = subject_ids[i] - 1;
    }
    return classes;
}

Matrix onehot_condition(std::span<const int> subject_ids, std::size_t num_subjects) {
    Matrix cond(subject_ids.size(), num_subjects);
    for (std::size_t i = 0; i < subject_ids.size(); ++i) {
        const auto cv = condition_vector(subject_ids[i], ConditioningMode::onehot_train,
                                         num_subjects);
        std::copy(cv.begin(), cv.end(), cond.row_ptr(i));
    }
    return cond;
}

void check_finite(double value, const char* what) {
    if (!std::isfinite(value)) {
        throw TrainingDiverged(std::string("training diverged: ") + what + " = " +
                               std::to_string(value));
    }
}

/// Both probe updates off a single encoder pass; the encoder cache is left
/// untouched so the joint step can run its own forward afterwards.
std::pair<double, double> probe_updates(DisentangledModel& m, const Batch& batch, double lr,
                                        std::size_t adversary_steps) {
    const Matrix z = m.encode_nocache(batch.x);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    const auto subjects = subject_classes(batch.subject_ids);

    double first_adv_ce = 0.0;
    for (std::size_t step = 0; step < adversary_steps; ++step) {
        Matrix logits = m.adversary_head.forward(z_a);
        auto ce = softmax_cross_entropy(logits, subjects);
        if (step == 0) first_adv_ce = ce.loss;
        auto [unused, grads] = m.adversary_head.backward(ce.grad_logits, false);
        m.adversary_head.apply(grads, lr);
    }

    Matrix logits = m.nuisance_head.forward(z_n);
    auto ce = softmax_cross_entropy(logits, subjects);
    const double nuis_ce = ce.loss;
    auto [unused, grads] = m.nuisance_head.backward(ce.grad_logits, false);
    m.nuisance_head.apply(grads, lr);

    return {first_adv_ce, nuis_ce};
}

}  // namespace

double probe_update_adversary(DisentangledModel& m, const Batch& batch, double lr,
                              std::size_t steps) {
    const Matrix z = m.encode_nocache(batch.x);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    const auto subjects = subject_classes(batch.subject_ids);
    double first_ce = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        Matrix logits = m.adversary_head.forward(z_a);
        auto ce = softmax_cross_entropy(logits, subjects);
        if (step == 0) first_ce = ce.loss;
        auto [unused, grads] = m.adversary_head.backward(ce.grad_logits, false);
        m.adversary_head.apply(grads, lr);
    }
    return first_ce;
}

double probe_update_nuisance(DisentangledModel& m, const Batch& batch, double lr,
                             std::size_t steps) {
    const Matrix z = m.encode_nocache(batch.x);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    const auto subjects = subject_classes(batch.subject_ids);
    double first_ce = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        Matrix logits = m.nuisance_head.forward(z_n);
        auto ce = softmax_cross_entropy(logits, subjects);
        if (step == 0) first_ce = ce.loss;
        auto [unused, grads] = m.nuisance_head.backward(ce.grad_logits, false);
        m.nuisance_head.apply(grads, lr);
    }
    return first_ce;
}

std::pair<JointLoss, ModelGrads> joint_loss_and_gradients(DisentangledModel& m,
                                                          const Batch& batch, double lambda_a,
                                                          double lambda_n) {
    const auto subjects = subject_classes(batch.subject_ids);
    const Matrix s_cond = onehot_condition(batch.subject_ids, m.config.num_subjects);

    HeadOutputs heads = forward_all(m, batch.x, s_cond);
    auto task = softmax_cross_entropy(heads.y_logits, batch.labels);
    auto adv = softmax_cross_entropy(heads.adv_logits, subjects);
    auto nuis = softmax_cross_entropy(heads.nuis_logits, subjects);

    JointLoss loss{task.loss, adv.loss, nuis.loss};
    ModelGrads grads;

    // task term: classifier backward; only the latent slice of its input
    // gradient flows on into the encoder
    auto [clf_grad_in, clf_grads] = m.classifier_head.backward(task.grad_logits);
    grads.classifier = std::move(clf_grads);
    const std::size_t d = m.config.latent_dim;
    Matrix grad_z(clf_grad_in.rows, d);
    for (std::size_t i = 0; i < clf_grad_in.rows; ++i) {
        std::copy(clf_grad_in.row_ptr(i), clf_grad_in.row_ptr(i) + d, grad_z.row_ptr(i));
    }

    // head terms enter the encoder through their latent slices; the exact-zero
    // lambda cases are skipped so a plain discriminative run stays bit-identical
    // to a trainer that never touches the heads
    auto [adv_grad_in, adv_grads] = m.adversary_head.backward(adv.grad_logits);
    grads.adversary = std::move(adv_grads);
    grads.adversary.scale(-lambda_a);
    const std::size_t dim_a = m.config.adversary_dim();
    if (lambda_a != 0.0) {
        for (std::size_t i = 0; i < grad_z.rows; ++i) {
            double* dst = grad_z.row_ptr(i);
            const double* src = adv_grad_in.row_ptr(i);
            for (std::size_t j = 0; j < dim_a; ++j) dst[j] -= lambda_a * src[j];
        }
    }

    auto [nuis_grad_in, nuis_grads] = m.nuisance_head.backward(nuis.grad_logits);
    grads.nuisance = std::move(nuis_grads);
    grads.nuisance.scale(lambda_n);
    if (lambda_n != 0.0) {
        const std::size_t dim_n = m.config.nuisance_dim();
        for (std::size_t i = 0; i < grad_z.rows; ++i) {
            double* dst = grad_z.row_ptr(i) + dim_a;
            const double* src = nuis_grad_in.row_ptr(i);
            for (std::size_t j = 0; j < dim_n; ++j) dst[j] += lambda_n * src[j];
        }
    }

    auto [enc_grad_in, enc_grads] = m.encoder.backward(grad_z, false);
    grads.encoder = std::move(enc_grads);
    return {loss, grads};
}

JointLoss joint_loss(const DisentangledModel& m, const Batch& batch) {
    const auto subjects = subject_classes(batch.subject_ids);
    const Matrix s_cond = onehot_condition(batch.subject_ids, m.config.num_subjects);
    HeadOutputs heads = forward_all_nocache(m, batch.x, s_cond);
    JointLoss loss;
    loss.task_ce = softmax_cross_entropy(heads.y_logits, batch.labels).loss;
    loss.adv_ce = softmax_cross_entropy(heads.adv_logits, subjects).loss;
    loss.nuis_ce = softmax_cross_entropy(heads.nuis_logits, subjects).loss;
    return loss;
}

std::vector<std::vector<double>> flatten_grads(const ModelGrads& grads) {
    std::vector<std::vector<double>> flat;
    for (const MlpGrads* mlp :
         {&grads.encoder, &grads.adversary, &grads.nuisance, &grads.classifier}) {
        flat.push_back(mlp->hidden.weights.values);
        flat.push_back(mlp->hidden.bias);
        flat.push_back(mlp->output.weights.values);
        flat.push_back(mlp->output.bias);
    }
    return flat;
}

double min_preactivation_margin(const DisentangledModel& m, const Batch& batch) {
    const Matrix s_cond = onehot_condition(batch.subject_ids, m.config.num_subjects);
    double margin = std::numeric_limits<double>::infinity();
    const auto update = [&margin](const Matrix& preact) {
        for (double v : preact.values) margin = std::min(margin, std::abs(v));
    };
    const Matrix enc_pre = m.encoder.hidden.forward_nocache(batch.x);
    update(enc_pre);
    const Matrix z = m.encoder.output.forward_nocache(relu(enc_pre));
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    update(m.adversary_head.hidden.forward_nocache(z_a));
    update(m.nuisance_head.hidden.forward_nocache(z_n));
    update(m.classifier_head.hidden.forward_nocache(concat_cols(z, s_cond)));
    return margin;
}

BatchUpdateReport train_batch(DisentangledModel& m, const Batch& batch, const TrainConfig& cfg) {
    if (batch.x.rows == 0) {
        throw std::invalid_argument("train_batch: empty batch");
    }
    if (batch.labels.size() != batch.x.rows || batch.subject_ids.size() != batch.x.rows) {
        throw std::invalid_argument("train_batch: labels/subjects must match batch rows");
    }
    const double lr = cfg.sgd.learning_rate;

    BatchUpdateReport report;
    auto [adv_ce, nuis_ce] = probe_updates(m, batch, lr, cfg.adversary_steps);
    report.adv_ce = adv_ce;
    report.nuis_ce = nuis_ce;
    check_finite(adv_ce, "adversary CE");
    check_finite(nuis_ce, "nuisance CE");

    auto [loss, grads] = joint_loss_and_gradients(m, batch, cfg.lambda_a, cfg.lambda_n);
    report.task_ce = loss.task_ce;
    report.encoder_loss = loss.combined(cfg.lambda_a, cfg.lambda_n);
    check_finite(loss.task_ce, "task CE");
    check_finite(report.encoder_loss, "encoder loss");

    m.encoder.apply(grads.encoder, lr);
    m.classifier_head.apply(grads.classifier, lr);
    if (cfg.nuisance_in_joint_step && cfg.lambda_n != 0.0) {
        m.nuisance_head.apply(grads.nuisance, lr);
    }
    return report;
}

namespace {

struct HeadAccuracies {
    double main = 0.0;
    double adv = 0.0;
    double nuis = 0.0;
};

HeadAccuracies head_accuracies(const DisentangledModel& m, const TrialTensor& tensor,
                               ConditioningMode mode) {
    HeadOutputs heads = infer(m, tensor.x, tensor.subject_ids, mode);
    const auto y_pred = argmax_rows(heads.y_logits);
    const auto adv_pred = argmax_rows(heads.adv_logits);
    const auto nuis_pred = argmax_rows(heads.nuis_logits);
    HeadAccuracies acc;
    const std::size_t n = tensor.labels.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (y_pred[i] == tensor.labels[i]) acc.main += 1.0;
        if (adv_pred[i] == tensor.subject_ids[i] - 1) acc.adv += 1.0;
        if (nuis_pred[i] == tensor.subject_ids[i] - 1) acc.nuis += 1.0;
    }
    acc.main /= static_cast<double>(n);
    acc.adv /= static_cast<double>(n);
    acc.nuis /= static_cast<double>(n);
    return acc;
}

struct ModelSnapshot {
    Mlp encoder, adversary, nuisance, classifier;

    static ModelSnapshot take(const DisentangledModel& m) {
        return {m.encoder, m.adversary_head, m.nuisance_head, m.classifier_head};
    }
    void restore(DisentangledModel& m) const {
        m.encoder = encoder;
        m.adversary_head = adversary;
        m.nuisance_head = nuisance;
        m.classifier_head = classifier;
    }
};

}  // namespace

TrainResult train(DisentangledModel& m, std::span<const TrialRecord> train_trials,
                  std::span<const TrialRecord> val_trials, const TrainConfig& cfg) {
    cfg.validate();
    if (train_trials.empty()) {
        throw std::invalid_argument("train: empty training set");
    }
    const TrialTensor train_tensor = to_tensor(train_trials);
    const bool have_val = !val_trials.empty();
    TrialTensor val_tensor;
    if (have_val) val_tensor = to_tensor(val_trials);

    const std::size_t n = train_trials.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg.seed);

    TrainResult result;
    double best = -std::numeric_limits<double>::infinity();
    ModelSnapshot best_params = ModelSnapshot::take(m);

    for (std::size_t epoch = 0; epoch < cfg.sgd.epochs; ++epoch) {
        rng.shuffle(order);

        EpochStats stats;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += cfg.sgd.batch_size) {
            const std::size_t count = std::min(cfg.sgd.batch_size, n - start);
            Batch batch;
            batch.x = Matrix(count, train_tensor.x.cols);
            batch.labels.resize(count);
            batch.subject_ids.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t src = order[start + i];
                std::copy(train_tensor.x.row_ptr(src),
                          train_tensor.x.row_ptr(src) + train_tensor.x.cols,
                          batch.x.row_ptr(i));
                batch.labels[i] = train_tensor.labels[src];
                batch.subject_ids[i] = train_tensor.subject_ids[src];
            }
            const BatchUpdateReport report = train_batch(m, batch, cfg);
            stats.task_ce += report.task_ce;
            stats.adv_ce += report.adv_ce;
            stats.nuis_ce += report.nuis_ce;
            stats.encoder_loss += report.encoder_loss;
            ++batches;
        }
        stats.task_ce /= static_cast<double>(batches);
        stats.adv_ce /= static_cast<double>(batches);
        stats.nuis_ce /= static_cast<double>(batches);
        stats.encoder_loss /= static_cast<double>(batches);

        if (have_val) {
            const HeadAccuracies acc =
                head_accuracies(m, val_tensor, ConditioningMode::onehot_train);
            stats.val_main_acc = acc.main;
            stats.val_adv_acc = acc.adv;
            stats.val_nuis_acc = acc.nuis;
        }
        result.history.push_back(stats);

        if (have_val) {
            if (stats.val_main_acc > best) {
                best = stats.val_main_acc;
                result.best_epoch = epoch;
                best_params = ModelSnapshot::take(m);
            } else if (epoch - result.best_epoch >= cfg.early_stop_patience) {
                break;
            }
        } else {
            result.best_epoch = epoch;
        }
    }

    if (have_val) {
        best_params.restore(m);
        result.best_val_main_acc = best;
    }
    return result;
}

}  // namespace datl
