#include "datl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

#include "datl/io_util.hpp"
#include "datl/model.hpp"  // round_half_up_fraction
#include "datl/rng.hpp"

namespace datl {

namespace {

const std::vector<std::string> kManifestHeader = {"subject_id", "trial_id", "label",
                                                  "native_rate_hz", "path"};
const std::vector<std::string> kCanonicalChannels = {"eda",   "temp",       "acc_x", "acc_y",
                                                     "acc_z", "heart_rate", "spo2"};
constexpr std::size_t kCanonicalSamples = 300;

std::string loc(const std::filesystem::path& file, std::size_t line) {
    return file.string() + ":" + std::to_string(line);
}

bool is_generic_header(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (fields[i] != "ch" + std::to_string(i)) return false;
    }
    return !fields.empty();
}

/// Reads one trial CSV: canonical 7-channel header with exactly T=300
/// seconds of signal, or a generic ch0..chN header (synthetic dumps) whose
/// length fixes T. Returns the C x T matrix at 1 Hz.
Matrix read_trial_file(const std::filesystem::path& file, double native_rate_hz,
                       std::optional<std::size_t>& expected_samples) {
    std::ifstream in(file);
    if (!in) {
        throw std::runtime_error("cannot open trial file: " + file.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error(loc(file, 1) + ": empty trial file");
    }
    const auto header = split_csv_line(line);
    bool canonical = header == kCanonicalChannels;
    if (!canonical && !is_generic_header(header)) {
        throw std::runtime_error(loc(file, 1) +
                                 ": trial header must be the canonical channel list "
                                 "(eda,temp,acc_x,acc_y,acc_z,heart_rate,spo2) or ch0..chN");
    }
    const std::size_t channels = header.size();

    std::vector<std::vector<double>> columns(channels);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != channels) {
            throw std::runtime_error(loc(file, line_no) + ": expected " +
                                     std::to_string(channels) + " columns, got " +
                                     std::to_string(fields.size()));
        }
        for (std::size_t c = 0; c < channels; ++c) {
            columns[c].push_back(parse_double(fields[c], loc(file, line_no)));
        }
    }
    const std::size_t raw_samples = columns.empty() ? 0 : columns[0].size();

    std::size_t target = 0;
    if (canonical) {
        target = kCanonicalSamples;
    } else {
        const auto rate = static_cast<std::size_t>(native_rate_hz);
        target = raw_samples / std::max<std::size_t>(rate, 1);
    }
    if (expected_samples.has_value() && target != *expected_samples) {
        throw std::runtime_error(file.string() + ": trial length " + std::to_string(target) +
                                 " differs from previous trials (" +
                                 std::to_string(*expected_samples) + ")");
    }
    expected_samples = target;

    Matrix signal(channels, target);
    for (std::size_t c = 0; c < channels; ++c) {
        std::vector<double> samples;
        try {
            samples = downsample_to_1hz(columns[c], native_rate_hz, target);
        } catch (const std::exception& e) {
            throw std::runtime_error(file.string() + ": " + e.what());
        }
        std::copy(samples.begin(), samples.end(), signal.row_ptr(c));
    }
    return signal;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw std::runtime_error("cannot open manifest: " + manifest_path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error(loc(manifest_path, 1) + ": empty manifest (missing header)");
    }
    if (split_csv_line(line) != kManifestHeader) {
        throw std::runtime_error(loc(manifest_path, 1) +
                                 ": manifest header must be "
                                 "subject_id,trial_id,label,native_rate_hz,path");
    }

    const auto base_dir = manifest_path.parent_path();
    Dataset ds;
    std::optional<std::size_t> expected_samples;
    std::optional<std::size_t> expected_channels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != kManifestHeader.size()) {
            throw std::runtime_error(loc(manifest_path, line_no) + ": expected " +
                                     std::to_string(kManifestHeader.size()) + " fields, got " +
                                     std::to_string(fields.size()));
        }
        const std::string where = loc(manifest_path, line_no);
        TrialRecord trial;
        trial.subject_id = static_cast<int>(parse_long(fields[0], where));
        trial.trial_id = static_cast<int>(parse_long(fields[1], where));
        trial.label = static_cast<int>(parse_long(fields[2], where));
        const double rate = parse_double(fields[3], where);
        if (trial.subject_id < 1) {
            throw std::runtime_error(where + ": subject_id must be >= 1");
        }
        if (trial.label < 0) {
            throw std::runtime_error(where + ": label must be >= 0");
        }
        if (!(rate >= 1.0) || rate != std::floor(rate)) {
            throw std::runtime_error(where + ": native_rate_hz must be an integer >= 1");
        }
        std::filesystem::path trial_path(fields[4]);
        if (trial_path.is_relative()) trial_path = base_dir / trial_path;

        trial.signal = read_trial_file(trial_path, rate, expected_samples);
        if (expected_channels.has_value() && trial.signal.rows != *expected_channels) {
            throw std::runtime_error(trial_path.string() + ": channel count " +
                                     std::to_string(trial.signal.rows) +
                                     " differs from previous trials");
        }
        expected_channels = trial.signal.rows;

        ds.num_subjects = std::max(ds.num_subjects, static_cast<std::size_t>(trial.subject_id));
        ds.num_classes = std::max(ds.num_classes, static_cast<std::size_t>(trial.label) + 1);
        ds.trials.push_back(std::move(trial));
    }
    return ds;
}

Dataset dedup_relaxation(const Dataset& ds) {
    // lowest trial_id relaxation trial per subject
    std::map<int, int> keep;
    std::map<int, bool> has_relaxation;
    for (const auto& t : ds.trials) {
        has_relaxation.try_emplace(t.subject_id, false);
        if (t.label == kLabelRelaxation) {
            has_relaxation[t.subject_id] = true;
            auto [it, inserted] = keep.try_emplace(t.subject_id, t.trial_id);
            if (!inserted) it->second = std::min(it->second, t.trial_id);
        }
    }
    for (const auto& [subject, has] : has_relaxation) {
        if (!has) {
            std::cerr << "warning: subject " << subject
                      << " has no relaxation trial; subject retained as-is\n";
        }
    }
    Dataset out;
    out.num_subjects = ds.num_subjects;
    out.num_classes = ds.num_classes;
    out.normalization = ds.normalization;
    for (const auto& t : ds.trials) {
        if (t.label == kLabelRelaxation && t.trial_id != keep.at(t.subject_id)) continue;
        out.trials.push_back(t);
    }
    return out;
}

std::vector<double> downsample_to_1hz(std::span<const double> raw, double native_rate_hz,
                                      std::size_t target_len) {
    if (!(native_rate_hz >= 1.0) || native_rate_hz != std::floor(native_rate_hz)) {
        throw std::invalid_argument("downsample_to_1hz: native rate must be an integer >= 1");
    }
    const auto rate = static_cast<std::size_t>(native_rate_hz);
    const std::size_t seconds = raw.size() / rate;
    if (seconds < target_len) {
        throw std::invalid_argument("downsample_to_1hz: signal has " + std::to_string(seconds) +
                                    " full seconds, need " + std::to_string(target_len));
    }
    std::vector<double> out(target_len);
    for (std::size_t s = 0; s < target_len; ++s) {
        double acc = 0.0;
        for (std::size_t k = 0; k < rate; ++k) {
            acc += raw[s * rate + k];
        }
        out[s] = acc / static_cast<double>(rate);
    }
    return out;
}

ChannelStats compute_channel_stats(std::span<const TrialRecord> stats_source) {
    if (stats_source.empty()) {
        throw std::invalid_argument("compute_channel_stats: no trials");
    }
    const std::size_t channels = stats_source.front().signal.rows;
    ChannelStats stats;
    stats.mean.assign(channels, 0.0);
    stats.stddev.assign(channels, 0.0);
    std::size_t count = 0;
    for (const auto& t : stats_source) {
        count += t.signal.cols;
        for (std::size_t c = 0; c < channels; ++c) {
            const double* row = t.signal.row_ptr(c);
            for (std::size_t i = 0; i < t.signal.cols; ++i) stats.mean[c] += row[i];
        }
    }
    for (std::size_t c = 0; c < channels; ++c) stats.mean[c] /= static_cast<double>(count);
    for (const auto& t : stats_source) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double* row = t.signal.row_ptr(c);
            for (std::size_t i = 0; i < t.signal.cols; ++i) {
                const double d = row[i] - stats.mean[c];
                stats.stddev[c] += d * d;
            }
        }
    }
    for (std::size_t c = 0; c < channels; ++c) {
        stats.stddev[c] = std::sqrt(stats.stddev[c] / static_cast<double>(count));
    }
    return stats;
}

std::vector<TrialRecord> standardize_trials(std::span<const TrialRecord> trials,
                                            const ChannelStats& stats) {
    std::vector<TrialRecord> out(trials.begin(), trials.end());
    for (auto& t : out) {
        if (t.signal.rows != stats.mean.size()) {
            throw std::invalid_argument("standardize: channel count mismatch");
        }
        for (std::size_t c = 0; c < t.signal.rows; ++c) {
            const double mu = stats.mean[c];
            const double sigma = std::max(stats.stddev[c], 1e-8);
            double* row = t.signal.row_ptr(c);
            for (std::size_t i = 0; i < t.signal.cols; ++i) {
                row[i] = (row[i] - mu) / sigma;
            }
        }
    }
    return out;
}

Dataset standardize(const Dataset& ds, std::span<const TrialRecord> stats_source) {
    const ChannelStats stats = compute_channel_stats(stats_source);
    Dataset out;
    out.num_subjects = ds.num_subjects;
    out.num_classes = ds.num_classes;
    out.trials = standardize_trials(ds.trials, stats);
    out.normalization = stats;
    return out;
}

LosoSplit loso_split(const Dataset& ds, int held_out_subject, double val_frac,
                     std::uint64_t seed) {
    if (!(val_frac > 0.0 && val_frac < 1.0)) {
        throw std::invalid_argument("loso_split: val_frac must be in (0, 1)");
    }
    LosoSplit split;
    std::vector<std::size_t> remaining;
    for (std::size_t i = 0; i < ds.trials.size(); ++i) {
        if (ds.trials[i].subject_id == held_out_subject) {
            split.test.push_back(ds.trials[i]);
        } else {
            remaining.push_back(i);
        }
    }
    if (split.test.empty()) {
        throw std::invalid_argument("loso_split: subject " + std::to_string(held_out_subject) +
                                    " has no trials");
    }
    Rng rng(seed);
    rng.shuffle(remaining);
    const std::size_t val_count = round_half_up_fraction(remaining.size(), val_frac);
    for (std::size_t i = 0; i < remaining.size(); ++i) {
        auto& dst = i < val_count ? split.val : split.train;
        dst.push_back(ds.trials[remaining[i]]);
    }
    return split;
}

std::vector<double> flatten(const TrialRecord& trial) {
    return trial.signal.values;  // row-major already matches c*T + t
}

Matrix unflatten(std::span<const double> values, std::size_t channels, std::size_t samples) {
    if (values.size() != channels * samples) {
        throw std::invalid_argument("unflatten: value count does not match shape");
    }
    Matrix m(channels, samples);
    std::copy(values.begin(), values.end(), m.values.begin());
    return m;
}

Matrix flatten_trials(std::span<const TrialRecord> trials) {
    if (trials.empty()) {
        throw std::invalid_argument("flatten_trials: no trials");
    }
    const std::size_t dim = trials.front().signal.size();
    Matrix out(trials.size(), dim);
    for (std::size_t i = 0; i < trials.size(); ++i) {
        if (trials[i].signal.size() != dim) {
            throw std::invalid_argument("flatten_trials: inconsistent trial shapes");
        }
        std::copy(trials[i].signal.values.begin(), trials[i].signal.values.end(),
                  out.row_ptr(i));
    }
    return out;
}

void SyntheticConfig::validate() const {
    if (num_subjects < 1 || num_classes < 2 || channels < 1 || samples < 1) {
        throw std::invalid_argument("SyntheticConfig: dimensions must be positive");
    }
    if (task_effect < 0.0 || subject_effect < 0.0 || noise < 0.0) {
        throw std::invalid_argument("SyntheticConfig: effect scales must be >= 0");
    }
    if (trials_per_pair < 1) {
        throw std::invalid_argument("SyntheticConfig: trials_per_pair must be >= 1");
    }
}

Dataset synth_generate(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    // fixed per-class patterns, drawn once per seed
    std::vector<Matrix> class_pattern(cfg.num_classes);
    for (auto& pattern : class_pattern) {
        pattern = Matrix(cfg.channels, cfg.samples);
        for (double& v : pattern.values) v = rng.normal(0.0, cfg.task_effect);
    }
    // per-subject channel offsets
    std::vector<std::vector<double>> subject_offset(cfg.num_subjects,
                                                    std::vector<double>(cfg.channels));
    for (auto& offsets : subject_offset) {
        for (double& v : offsets) v = rng.normal(0.0, cfg.subject_effect);
    }

    Dataset ds;
    ds.num_subjects = cfg.num_subjects;
    ds.num_classes = cfg.num_classes;
    for (std::size_t s = 0; s < cfg.num_subjects; ++s) {
        for (std::size_t y = 0; y < cfg.num_classes; ++y) {
            for (std::size_t k = 0; k < cfg.trials_per_pair; ++k) {
                TrialRecord trial;
                trial.subject_id = static_cast<int>(s + 1);
                trial.label = static_cast<int>(y);
                trial.trial_id = static_cast<int>(y * cfg.trials_per_pair + k);
                trial.signal = Matrix(cfg.channels, cfg.samples);
                for (std::size_t c = 0; c < cfg.channels; ++c) {
                    double* row = trial.signal.row_ptr(c);
                    const double* pat = class_pattern[y].row_ptr(c);
                    const double off = subject_offset[s][c];
                    for (std::size_t t = 0; t < cfg.samples; ++t) {
                        row[t] = pat[t] + off + rng.normal(0.0, cfg.noise);
                    }
                }
                ds.trials.push_back(std::move(trial));
            }
        }
    }
    return ds;
}

std::filesystem::path write_dataset_csv(const Dataset& ds, const std::filesystem::path& dir) {
    const auto trials_dir = dir / "trials";
    std::filesystem::create_directories(trials_dir);
    const auto manifest_path = dir / "manifest.csv";
    std::ofstream manifest(manifest_path);
    if (!manifest) {
        throw std::runtime_error("cannot write manifest: " + manifest_path.string());
    }
    manifest << "subject_id,trial_id,label,native_rate_hz,path\n";

    const std::size_t channels = ds.channels();
    const bool canonical = channels == kCanonicalChannels.size();
    for (const auto& t : ds.trials) {
        const std::string name =
            "s" + std::to_string(t.subject_id) + "_t" + std::to_string(t.trial_id) + ".csv";
        manifest << t.subject_id << ',' << t.trial_id << ',' << t.label << ",1,trials/" << name
                 << "\n";
        std::ofstream trial(trials_dir / name);
        if (!trial) {
            throw std::runtime_error("cannot write trial file: " + (trials_dir / name).string());
        }
        for (std::size_t c = 0; c < channels; ++c) {
            if (c) trial << ',';
            trial << (canonical ? kCanonicalChannels[c] : "ch" + std::to_string(c));
        }
        trial << "\n";
        for (std::size_t i = 0; i < t.signal.cols; ++i) {
            for (std::size_t c = 0; c < channels; ++c) {
                if (c) trial << ',';
                trial << format_double(t.signal(c, i));
            }
            trial << "\n";
        }
    }
    return manifest_path;
}

void WindowConfig::validate(std::size_t samples) const {
    if (!enabled()) return;
    if (window > samples) {
        throw std::invalid_argument("window length exceeds trial length");
    }
}

std::size_t WindowConfig::windows_per_trial(std::size_t samples) const {
    if (!enabled()) return 1;
    return (samples - window) / effective_stride() + 1;
}

std::vector<TrialRecord> expand_windows(std::span<const TrialRecord> trials,
                                        const WindowConfig& wc) {
    if (!wc.enabled()) {
        return {trials.begin(), trials.end()};
    }
    std::vector<TrialRecord> out;
    for (const auto& t : trials) {
        wc.validate(t.signal.cols);
        const std::size_t stride = wc.effective_stride();
        for (std::size_t start = 0; start + wc.window <= t.signal.cols; start += stride) {
            TrialRecord w;
            w.subject_id = t.subject_id;
            w.label = t.label;
            w.trial_id = t.trial_id;
            w.signal = Matrix(t.signal.rows, wc.window);
            for (std::size_t c = 0; c < t.signal.rows; ++c) {
                const double* src = t.signal.row_ptr(c) + start;
                std::copy(src, src + wc.window, w.signal.row_ptr(c));
            }
            out.push_back(std::move(w));
        }
    }
    return out;
}

}  // namespace datl
