#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "datl/data.hpp"
#include "datl/model.hpp"
#include "datl/training.hpp"

namespace datl {

struct TrialPrediction {
    int y_true = 0;
    int y_pred = 0;
    int s_true = 0;       // 1-based subject id
    int s_pred_adv = 0;   // 0-based class index
    int s_pred_nuis = 0;  // 0-based class index
};

struct EvalResult {
    double main_acc = 0.0;
    double adv_acc = 0.0;
    double nuis_acc = 0.0;
    std::vector<TrialPrediction> predictions;
};

/// Argmax decoding per head over preprocessed trials. With windowing
/// enabled each trial's prediction is the majority vote over its windows
/// (ties resolve to the lowest class index).
EvalResult evaluate(const DisentangledModel& m, std::span<const TrialRecord> trials,
                    ConditioningMode mode, const WindowConfig& window = {});

struct FoldResult {
    int held_out_subject = 0;
    std::size_t n_test_trials = 0;
    double main_acc = 0.0;
    double adv_acc = 0.0;
    double nuis_acc = 0.0;
    std::vector<TrialPrediction> predictions;
    bool failed = false;
    std::string failure;
};

struct SweepRow {
    double lambda_a = 0.0;
    double lambda_n = 0.0;
    double r_n = 0.0;
    double main_acc = 0.0;  // pooled: total correct / total trials
    double adv_acc = 0.0;
    double nuis_acc = 0.0;
    std::vector<FoldResult> per_fold;  // one entry per held-out subject
    std::size_t n_folds_failed = 0;
};

struct RunOptions {
    std::size_t jobs = 1;
    std::size_t repeats = 1;
    double val_frac = 0.1;
    std::size_t latent_dim = 100;
    std::size_t head_hidden = 100;
    WindowConfig window;
    std::filesystem::path log_dir;  // per-fold NDJSON training logs when set
};

/// One fold of the LOSO protocol: split, standardize with the fold's
/// training statistics, train, evaluate on the held-out subject. The fold
/// seed derives as config seed + held-out subject id. Optionally hands back
/// the trained model and its epoch history.
FoldResult run_single_fold(const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt,
                           int held_out_subject, DisentangledModel* model_out = nullptr,
                           EpochHistory* history_out = nullptr);

/// Full leave-one-subject-out pass at one hyperparameter point. Fold seeds
/// derive as config seed + held-out subject id; folds run in parallel when
/// jobs > 1 with results merged by fold index. A fold whose training
/// diverges is marked failed and the row is flagged.
SweepRow run_loso(const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt = {});

struct SweepPoint {
    double lambda_a = 0.0;
    double lambda_n = 0.0;
    double r_n = 0.0;
};

/// The eight-row default grid: (0,0,0), (0.005,0,0), (0.1,0,0) and
/// (0.1, lambda_n, 0.2) for lambda_n in {0.001, 0.005, 0.05, 0.1, 0.2}.
std::vector<SweepPoint> table1_grid();

std::vector<SweepRow> sweep(const Dataset& ds, std::span<const SweepPoint> grid,
                            const TrainConfig& base, const RunOptions& opt = {});

/// Among rows whose main accuracy is within epsilon of the best, picks the
/// one maximizing nuis_acc - adv_acc; ties prefer smaller lambda_n, then
/// smaller lambda_a, then smaller r_n. Invariant to row order.
SweepRow select_config(std::span<const SweepRow> rows, double epsilon);

enum class LatentSlice { task, nuisance };  // z_a or z_n

/// Trains a fresh linear softmax probe on the chosen latent slice to
/// predict the subject and reports its held-out accuracy. The model itself
/// is left untouched.
double probe_subject_information(const DisentangledModel& m,
                                 std::span<const TrialRecord> trials, LatentSlice slice,
                                 std::uint64_t seed = 1, double train_frac = 0.75);

struct BoxStats {
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double min = 0.0;
    double max = 0.0;
};

/// Linear-interpolation quantiles over a copy of the values.
BoxStats box_stats(std::vector<double> values);

/// Writes sweep_table.csv and per_subject.json under out_dir. Numbers are
/// emitted in shortest-round-trip form so parsing them back reproduces the
/// in-memory metrics exactly.
void emit_reports(std::span<const SweepRow> rows, const std::filesystem::path& out_dir);

std::vector<SweepRow> parse_sweep_table(const std::filesystem::path& csv_path);
std::vector<SweepRow> parse_per_subject(const std::filesystem::path& json_path);

/// Full-fidelity row dump used by the report command to re-emit the files
/// above without re-running the sweep.
void save_sweep_rows(std::span<const SweepRow> rows, const std::filesystem::path& json_path);
std::vector<SweepRow> load_sweep_rows(const std::filesystem::path& json_path);

/// One NDJSON record per epoch: fold id, epoch, the four training losses
/// and the three validation accuracies.
void write_training_log(const std::filesystem::path& path, int fold_id,
                        const EpochHistory& history);

}  // namespace datl
