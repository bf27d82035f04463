#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "datl/matrix.hpp"

namespace datl {

// Label assignment fixed by the manifest contract.
inline constexpr int kLabelPhysical = 0;
inline constexpr int kLabelCognitive = 1;
inline constexpr int kLabelEmotional = 2;
inline constexpr int kLabelRelaxation = 3;

/// One recorded trial: C channels by T samples at 1 Hz.
struct TrialRecord {
    int subject_id = 0;  // 1-based
    int label = 0;       // 0-based class index
    int trial_id = 0;
    Matrix signal;       // C x T
};

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

struct Dataset {
    std::vector<TrialRecord> trials;
    std::size_t num_subjects = 0;  // S
    std::size_t num_classes = 0;   // L
    std::optional<ChannelStats> normalization;  // set once standardized

    std::size_t channels() const { return trials.empty() ? 0 : trials.front().signal.rows; }
    std::size_t samples() const { return trials.empty() ? 0 : trials.front().signal.cols; }
};

/// Reads manifest.csv (header subject_id,trial_id,label,native_rate_hz,path)
/// and every referenced trial file. Relative paths resolve against the
/// manifest's directory. Files recorded above 1 Hz are mean-pooled per
/// second on load so every TrialRecord is C x T at 1 Hz.
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Keeps the lowest-trial_id relaxation trial per subject, drops the other
/// relaxation trials, leaves every other class untouched. Subjects with no
/// relaxation trial are retained with a warning on stderr.
Dataset dedup_relaxation(const Dataset& ds);

/// Mean over each 1-second window, then cropped to target_len. Throws if
/// fewer than target_len seconds of signal are available.
std::vector<double> downsample_to_1hz(std::span<const double> raw, double native_rate_hz,
                                      std::size_t target_len);

/// Per-channel mean and population standard deviation over all samples of
/// the given trials.
ChannelStats compute_channel_stats(std::span<const TrialRecord> stats_source);

/// (x - mean_c) / max(stddev_c, 1e-8) per channel.
std::vector<TrialRecord> standardize_trials(std::span<const TrialRecord> trials,
                                            const ChannelStats& stats);

/// Standardizes the whole dataset with statistics computed from
/// stats_source only (normally the training split), so validation and test
/// trials never leak into the statistics.
Dataset standardize(const Dataset& ds, std::span<const TrialRecord> stats_source);

struct LosoSplit {
    std::vector<TrialRecord> train;
    std::vector<TrialRecord> val;
    std::vector<TrialRecord> test;
};

/// test = every trial of the held-out subject; the remainder is shuffled
/// with the seeded generator and split round_half_up(val_frac * n) / rest.
LosoSplit loso_split(const Dataset& ds, int held_out_subject, double val_frac,
                     std::uint64_t seed);

/// Row-major concatenation of channels; element (c, t) lands at c*T + t.
std::vector<double> flatten(const TrialRecord& trial);
Matrix unflatten(std::span<const double> values, std::size_t channels, std::size_t samples);

/// One matrix row per trial.
Matrix flatten_trials(std::span<const TrialRecord> trials);

/// X[c,t] = mu_y[c,t] + nu_s[c] + eps with per-class patterns of scale
/// task_effect, per-subject channel offsets of scale subject_effect and
/// i.i.d. Gaussian noise.
struct SyntheticConfig {
    std::size_t num_subjects = 20;
    std::size_t num_classes = 4;
    std::size_t channels = 7;
    std::size_t samples = 300;
    double task_effect = 1.0;     // sigma_y
    double subject_effect = 1.0;  // sigma_s
    double noise = 0.1;           // sigma_eps
    std::uint64_t seed = 1;
    std::size_t trials_per_pair = 1;

    void validate() const;
};

Dataset synth_generate(const SyntheticConfig& cfg);

/// Writes manifest.csv plus one trial CSV per record under dir, using the
/// same schema load_dataset reads. Returns the manifest path.
std::filesystem::path write_dataset_csv(const Dataset& ds, const std::filesystem::path& dir);

/// Optional sliding-window augmentation. Disabled when window == 0;
/// stride == 0 means non-overlapping windows (stride = window).
struct WindowConfig {
    std::size_t window = 0;
    std::size_t stride = 0;

    bool enabled() const { return window > 0; }
    std::size_t effective_stride() const { return stride == 0 ? window : stride; }
    void validate(std::size_t samples) const;
    std::size_t windows_per_trial(std::size_t samples) const;
};

/// Each trial becomes one record per window position, labels preserved.
std::vector<TrialRecord> expand_windows(std::span<const TrialRecord> trials,
                                        const WindowConfig& wc);

}  // namespace datl
