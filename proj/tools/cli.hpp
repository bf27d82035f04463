#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "datl/data.hpp"
#include "datl/training.hpp"

namespace datl::cli {

/// The full merged configuration: built-in defaults, overlaid by a config
/// file, overlaid by command-line overrides (in that precedence order).
struct AppConfig {
    TrainConfig train;
    std::size_t latent_dim = 100;
    std::size_t head_hidden = 100;
    double val_frac = 0.1;
    std::size_t window = 0;
    std::size_t stride = 0;
    std::size_t jobs = 1;
    std::size_t repeats = 1;
};

/// Flat JSON mirroring the config field names; the sgd group nests one
/// level and is addressed with dotted override keys (sgd.learning_rate).
std::string config_to_json_string(const AppConfig& cfg);
AppConfig config_from_json_string(const std::string& text, const AppConfig& base = {});
AppConfig config_from_file(const std::string& path, const AppConfig& base = {});

/// key=value with a dotted key referencing an existing config entry;
/// unknown keys are rejected.
void apply_override(AppConfig& cfg, const std::string& assignment);

/// "subjects=20,classes=4,channels=7,samples=300,task_effect=1,
///  subject_effect=1,noise=0.1,trials_per_pair=1" with every key optional.
SyntheticConfig parse_synth_spec(const std::string& spec, std::uint64_t seed);

struct RunSpec {
    enum class Command { synth, train, loso, sweep, gradcheck, report };

    Command command = Command::sweep;
    AppConfig config;
    std::string data_path;   // manifest to load (dedup applied)
    std::string synth_spec;  // in-memory synthetic source
    std::string grid = "table1";
    std::string grid_file;
    std::string out_dir = "runs";
    std::string in_dir;      // report input run directory
    int held_out = -1;       // train command fold
    double epsilon = 0.01;   // select_config main-accuracy band
};

struct ParseOutcome {
    std::optional<RunSpec> spec;  // empty when help or a usage error was handled
    int exit_code = 0;
};

ParseOutcome parse_args(int argc, const char* const* argv);

/// Dispatches a parsed spec. Exit codes: 0 success, 1 validation error,
/// 2 runtime failure.
int run(const RunSpec& spec);

int main(int argc, const char* const* argv);

}  // namespace datl::cli
