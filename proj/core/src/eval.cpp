#include "datl/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

#include "datl/io_util.hpp"
#include "json.hpp"

namespace datl {

namespace {

using nlohmann::json;

int majority_vote(std::span<const int> votes) {
    std::map<int, std::size_t> counts;
    for (int v : votes) ++counts[v];
    int best = votes.front();
    std::size_t best_count = 0;
    for (const auto& [value, count] : counts) {
        if (count > best_count) {  // map iterates ascending, ties keep the lowest
            best = value;
            best_count = count;
        }
    }
    return best;
}

}  // namespace

EvalResult evaluate(const DisentangledModel& m, std::span<const TrialRecord> trials,
                    ConditioningMode mode, const WindowConfig& window) {
    if (trials.empty()) {
        throw std::invalid_argument("evaluate: empty trial list");
    }
    EvalResult result;
    std::size_t main_correct = 0, adv_correct = 0, nuis_correct = 0;
    for (const auto& trial : trials) {
        std::vector<TrialRecord> units;
        if (window.enabled()) {
            units = expand_windows(std::span(&trial, 1), window);
        } else {
            units.push_back(trial);
        }
        const TrialTensor tensor = to_tensor(units);
        const HeadOutputs heads = infer(m, tensor.x, tensor.subject_ids, mode);
        const auto y_votes = argmax_rows(heads.y_logits);
        const auto adv_votes = argmax_rows(heads.adv_logits);
        const auto nuis_votes = argmax_rows(heads.nuis_logits);

        TrialPrediction pred;
        pred.y_true = trial.label;
        pred.s_true = trial.subject_id;
        pred.y_pred = majority_vote(y_votes);
        pred.s_pred_adv = majority_vote(adv_votes);
        pred.s_pred_nuis = majority_vote(nuis_votes);
        if (pred.y_pred == pred.y_true) ++main_correct;
        if (pred.s_pred_adv == trial.subject_id - 1) ++adv_correct;
        if (pred.s_pred_nuis == trial.subject_id - 1) ++nuis_correct;
        result.predictions.push_back(pred);
    }
    const auto n = static_cast<double>(trials.size());
    result.main_acc = static_cast<double>(main_correct) / n;
    result.adv_acc = static_cast<double>(adv_correct) / n;
    result.nuis_acc = static_cast<double>(nuis_correct) / n;
    return result;
}

namespace {

FoldResult run_fold(const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt,
                    int held_out_subject, std::uint64_t fold_seed) {
    FoldResult fold;
    fold.held_out_subject = held_out_subject;
    try {
        LosoSplit split = loso_split(ds, held_out_subject, opt.val_frac, fold_seed);
        fold.n_test_trials = split.test.size();

        const ChannelStats stats = compute_channel_stats(split.train);
        auto train_trials = standardize_trials(split.train, stats);
        const auto val_trials = standardize_trials(split.val, stats);
        const auto test_trials = standardize_trials(split.test, stats);
        if (opt.window.enabled()) {
            train_trials = expand_windows(train_trials, opt.window);
        }

        ModelConfig mcfg;
        mcfg.input_dim = ds.channels() *
                         (opt.window.enabled() ? opt.window.window : ds.samples());
        mcfg.latent_dim = opt.latent_dim;
        mcfg.r_n = cfg.r_n;
        mcfg.head_hidden = opt.head_hidden;
        mcfg.num_classes = ds.num_classes;
        mcfg.num_subjects = ds.num_subjects;
        mcfg.conditioning_mode = cfg.conditioning_mode;

        Rng init_rng(fold_seed);
        DisentangledModel model(mcfg, init_rng);

        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = fold_seed;
        const TrainResult trained = train(model, train_trials, val_trials, fold_cfg);

        if (!opt.log_dir.empty()) {
            std::filesystem::create_directories(opt.log_dir);
            const auto name = "fold_s" + std::to_string(held_out_subject) + "_seed" +
                              std::to_string(fold_seed) + ".ndjson";
            write_training_log(opt.log_dir / name, held_out_subject, trained.history);
        }

        const EvalResult eval =
            evaluate(model, test_trials, cfg.conditioning_mode, opt.window);
        fold.main_acc = eval.main_acc;
        fold.adv_acc = eval.adv_acc;
        fold.nuis_acc = eval.nuis_acc;
        fold.predictions = eval.predictions;
    } catch (const TrainingDiverged& e) {
        fold.failed = true;
        fold.failure = e.what();
    }
    return fold;
}

}  // namespace

SweepRow run_loso(const Dataset& ds, const TrainConfig& cfg, const RunOptions& opt) {
    cfg.validate();
    if (ds.num_subjects < 2) {
        throw std::invalid_argument("run_loso: at least two subjects required");
    }
    std::set<int> subject_set;
    for (const auto& t : ds.trials) subject_set.insert(t.subject_id);
    const std::vector<int> subjects(subject_set.begin(), subject_set.end());

    struct Task {
        int subject;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (std::size_t rep = 0; rep < std::max<std::size_t>(opt.repeats, 1); ++rep) {
        for (int subject : subjects) {
            tasks.push_back({subject, cfg.seed + rep * 1000003ULL +
                                          static_cast<std::uint64_t>(subject)});
        }
    }

    std::vector<FoldResult> raw(tasks.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(opt.jobs, tasks.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            raw[i] = run_fold(ds, cfg, opt, tasks[i].subject, tasks[i].seed);
        }
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= tasks.size()) break;
                raw[i] = run_fold(ds, cfg, opt, tasks[i].subject, tasks[i].seed);
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    SweepRow row;
    row.lambda_a = cfg.lambda_a;
    row.lambda_n = cfg.lambda_n;
    row.r_n = cfg.r_n;

    // merge repeats by held-out subject; pooled metrics count every repeat
    std::size_t total = 0;
    double main_sum = 0.0, adv_sum = 0.0, nuis_sum = 0.0;
    std::map<int, std::vector<const FoldResult*>> by_subject;
    for (const auto& fold : raw) {
        by_subject[fold.held_out_subject].push_back(&fold);
        if (fold.failed) {
            ++row.n_folds_failed;
            continue;
        }
        total += fold.n_test_trials;
        main_sum += fold.main_acc * static_cast<double>(fold.n_test_trials);
        adv_sum += fold.adv_acc * static_cast<double>(fold.n_test_trials);
        nuis_sum += fold.nuis_acc * static_cast<double>(fold.n_test_trials);
    }
    if (total > 0) {
        row.main_acc = main_sum / static_cast<double>(total);
        row.adv_acc = adv_sum / static_cast<double>(total);
        row.nuis_acc = nuis_sum / static_cast<double>(total);
    }

    for (int subject : subjects) {
        const auto& reps = by_subject.at(subject);
        FoldResult merged;
        merged.held_out_subject = subject;
        std::size_t ok = 0;
        for (const FoldResult* r : reps) {
            if (r->failed) continue;
            if (ok == 0) {
                merged.n_test_trials = r->n_test_trials;
                merged.predictions = r->predictions;
            }
            merged.main_acc += r->main_acc;
            merged.adv_acc += r->adv_acc;
            merged.nuis_acc += r->nuis_acc;
            ++ok;
        }
        if (ok == 0) {
            merged.failed = true;
            merged.failure = reps.front()->failure;
            merged.n_test_trials = reps.front()->n_test_trials;
        } else {
            merged.main_acc /= static_cast<double>(ok);
            merged.adv_acc /= static_cast<double>(ok);
            merged.nuis_acc /= static_cast<double>(ok);
        }
        row.per_fold.push_back(std::move(merged));
    }
    return row;
}

std::vector<SweepPoint> table1_grid() {
    std::vector<SweepPoint> grid = {{0.0, 0.0, 0.0}, {0.005, 0.0, 0.0}, {0.1, 0.0, 0.0}};
    for (double lambda_n : {0.001, 0.005, 0.05, 0.1, 0.2}) {
        grid.push_back({0.1, lambda_n, 0.2});
    }
    return grid;
}

std::vector<SweepRow> sweep(const Dataset& ds, std::span<const SweepPoint> grid,
                            const TrainConfig& base, const RunOptions& opt) {
    if (grid.empty()) {
        throw std::invalid_argument("sweep: empty grid");
    }
    std::vector<SweepRow> rows;
    rows.reserve(grid.size());
    for (const auto& point : grid) {
        TrainConfig cfg = base;
        cfg.lambda_a = point.lambda_a;
        cfg.lambda_n = point.lambda_n;
        cfg.r_n = point.r_n;
        rows.push_back(run_loso(ds, cfg, opt));
    }
    return rows;
}

SweepRow select_config(std::span<const SweepRow> rows, double epsilon) {
    if (rows.empty()) {
        throw std::invalid_argument("select_config: no rows");
    }
    double best_main = -1.0;
    for (const auto& row : rows) best_main = std::max(best_main, row.main_acc);

    const SweepRow* best = nullptr;
    for (const auto& row : rows) {
        if (row.main_acc < best_main - epsilon) continue;
        if (best == nullptr) {
            best = &row;
            continue;
        }
        const double gap = row.nuis_acc - row.adv_acc;
        const double best_gap = best->nuis_acc - best->adv_acc;
        if (gap > best_gap ||
            (gap == best_gap &&
             std::tie(row.lambda_n, row.lambda_a, row.r_n) <
                 std::tie(best->lambda_n, best->lambda_a, best->r_n))) {
            best = &row;
        }
    }
    return *best;
}

double probe_subject_information(const DisentangledModel& m,
                                 std::span<const TrialRecord> trials, LatentSlice slice,
                                 std::uint64_t seed, double train_frac) {
    if (trials.size() < 2) {
        throw std::invalid_argument("probe: need at least two trials");
    }
    const TrialTensor tensor = to_tensor(trials);
    const Matrix z = m.encode_nocache(tensor.x);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    const Matrix& features = slice == LatentSlice::task ? z_a : z_n;

    const std::size_t n = trials.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    std::size_t train_count = round_half_up_fraction(n, train_frac);
    train_count = std::clamp<std::size_t>(train_count, 1, n - 1);

    std::set<int> train_subjects;
    for (std::size_t i = 0; i < train_count; ++i) {
        train_subjects.insert(tensor.subject_ids[order[i]]);
    }
    if (train_subjects.size() < 2) {
        throw std::invalid_argument("probe: probe-train split has a single subject class");
    }

    DenseLayer probe(features.cols, m.config.num_subjects, rng);

    constexpr std::size_t kEpochs = 200;
    constexpr std::size_t kBatch = 16;
    constexpr double kLr = 0.1;
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + train_count);
    for (std::size_t epoch = 0; epoch < kEpochs; ++epoch) {
        rng.shuffle(train_idx);
        for (std::size_t start = 0; start < train_idx.size(); start += kBatch) {
            const std::size_t count = std::min(kBatch, train_idx.size() - start);
            Matrix x(count, features.cols);
            std::vector<int> y(count);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t src = train_idx[start + i];
                std::copy(features.row_ptr(src), features.row_ptr(src) + features.cols,
                          x.row_ptr(i));
                y[i] = tensor.subject_ids[src] - 1;
            }
            Matrix logits = probe.forward(x);
            auto ce = softmax_cross_entropy(logits, y);
            auto [unused, grads] = probe.backward(ce.grad_logits, false);
            sgd_step(probe, grads, kLr);
        }
    }

    std::size_t correct = 0;
    const std::size_t test_count = n - train_count;
    Matrix x(test_count, features.cols);
    std::vector<int> y(test_count);
    for (std::size_t i = 0; i < test_count; ++i) {
        const std::size_t src = order[train_count + i];
        std::copy(features.row_ptr(src), features.row_ptr(src) + features.cols, x.row_ptr(i));
        y[i] = tensor.subject_ids[src] - 1;
    }
    const auto pred = argmax_rows(probe.forward_nocache(x));
    for (std::size_t i = 0; i < test_count; ++i) {
        if (pred[i] == y[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test_count);
}

BoxStats box_stats(std::vector<double> values) {
    if (values.empty()) {
        throw std::invalid_argument("box_stats: no values");
    }
    std::sort(values.begin(), values.end());
    const auto quantile = [&](double p) {
        const double pos = p * static_cast<double>(values.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = static_cast<std::size_t>(std::ceil(pos));
        const double frac = pos - static_cast<double>(lo);
        return values[lo] + frac * (values[hi] - values[lo]);
    };
    BoxStats stats;
    stats.min = values.front();
    stats.max = values.back();
    stats.q1 = quantile(0.25);
    stats.median = quantile(0.5);
    stats.q3 = quantile(0.75);
    return stats;
}

namespace {

json fold_to_json(const FoldResult& fold) {
    return json{{"held_out_subject", fold.held_out_subject},
                {"n_test_trials", fold.n_test_trials},
                {"main_acc", fold.main_acc},
                {"adv_acc", fold.adv_acc},
                {"nuis_acc", fold.nuis_acc},
                {"failed", fold.failed}};
}

FoldResult fold_from_json(const json& j) {
    FoldResult fold;
    fold.held_out_subject = j.at("held_out_subject").get<int>();
    fold.n_test_trials = j.at("n_test_trials").get<std::size_t>();
    fold.main_acc = j.at("main_acc").get<double>();
    fold.adv_acc = j.at("adv_acc").get<double>();
    fold.nuis_acc = j.at("nuis_acc").get<double>();
    fold.failed = j.at("failed").get<bool>();
    return fold;
}

json row_header_json(const SweepRow& row) {
    return json{{"lambda_a", row.lambda_a}, {"lambda_n", row.lambda_n}, {"r_n", row.r_n},
                {"main_acc", row.main_acc}, {"adv_acc", row.adv_acc},
                {"nuis_acc", row.nuis_acc}, {"n_folds_failed", row.n_folds_failed}};
}

void row_header_from_json(const json& j, SweepRow& row) {
    row.lambda_a = j.at("lambda_a").get<double>();
    row.lambda_n = j.at("lambda_n").get<double>();
    row.r_n = j.at("r_n").get<double>();
    row.main_acc = j.at("main_acc").get<double>();
    row.adv_acc = j.at("adv_acc").get<double>();
    row.nuis_acc = j.at("nuis_acc").get<double>();
    row.n_folds_failed = j.at("n_folds_failed").get<std::size_t>();
}

}  // namespace

void emit_reports(std::span<const SweepRow> rows, const std::filesystem::path& out_dir) {
    if (rows.empty()) {
        throw std::invalid_argument("emit_reports: no rows");
    }
    std::filesystem::create_directories(out_dir);

    const auto csv_path = out_dir / "sweep_table.csv";
    std::ofstream csv(csv_path);
    if (!csv) {
        throw std::runtime_error("cannot write " + csv_path.string());
    }
    csv << "lambda_a,lambda_n,r_n,main_acc,adv_acc,nuis_acc,n_folds_failed\n";
    for (const auto& row : rows) {
        csv << format_double(row.lambda_a) << ',' << format_double(row.lambda_n) << ','
            << format_double(row.r_n) << ',' << format_double(row.main_acc) << ','
            << format_double(row.adv_acc) << ',' << format_double(row.nuis_acc) << ','
            << row.n_folds_failed << "\n";
    }
    csv.close();

    json per_subject = json::array();
    for (const auto& row : rows) {
        json entry = row_header_json(row);
        json folds = json::array();
        std::vector<double> fold_main;
        for (const auto& fold : row.per_fold) {
            folds.push_back(fold_to_json(fold));
            if (!fold.failed) fold_main.push_back(fold.main_acc);
        }
        entry["folds"] = std::move(folds);
        if (!fold_main.empty()) {
            const BoxStats box = box_stats(fold_main);
            entry["main_acc_box"] = {{"median", box.median}, {"q1", box.q1}, {"q3", box.q3},
                                     {"min", box.min},       {"max", box.max}};
        }
        per_subject.push_back(std::move(entry));
    }
    const auto json_path = out_dir / "per_subject.json";
    std::ofstream js(json_path);
    if (!js) {
        throw std::runtime_error("cannot write " + json_path.string());
    }
    js << per_subject.dump(2) << "\n";
}

std::vector<SweepRow> parse_sweep_table(const std::filesystem::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) {
        throw std::runtime_error("cannot open " + csv_path.string());
    }
    std::string line;
    if (!std::getline(in, line) ||
        split_csv_line(line) !=
            std::vector<std::string>{"lambda_a", "lambda_n", "r_n", "main_acc", "adv_acc",
                                     "nuis_acc", "n_folds_failed"}) {
        throw std::runtime_error(csv_path.string() + ": unexpected header");
    }
    std::vector<SweepRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 7) {
            throw std::runtime_error(csv_path.string() + ":" + std::to_string(line_no) +
                                     ": expected 7 fields");
        }
        const std::string where = csv_path.string() + ":" + std::to_string(line_no);
        SweepRow row;
        row.lambda_a = parse_double(fields[0], where);
        row.lambda_n = parse_double(fields[1], where);
        row.r_n = parse_double(fields[2], where);
        row.main_acc = parse_double(fields[3], where);
        row.adv_acc = parse_double(fields[4], where);
        row.nuis_acc = parse_double(fields[5], where);
        row.n_folds_failed = static_cast<std::size_t>(parse_long(fields[6], where));
        rows.push_back(row);
    }
    return rows;
}

std::vector<SweepRow> parse_per_subject(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) {
        throw std::runtime_error("cannot open " + json_path.string());
    }
    const json doc = json::parse(in);
    std::vector<SweepRow> rows;
    for (const auto& entry : doc) {
        SweepRow row;
        row_header_from_json(entry, row);
        for (const auto& fold : entry.at("folds")) {
            row.per_fold.push_back(fold_from_json(fold));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_sweep_rows(std::span<const SweepRow> rows, const std::filesystem::path& json_path) {
    json doc = json::array();
    for (const auto& row : rows) {
        json entry = row_header_json(row);
        json folds = json::array();
        for (const auto& fold : row.per_fold) {
            json f = fold_to_json(fold);
            if (fold.failed) f["failure"] = fold.failure;
            json preds = json::array();
            for (const auto& p : fold.predictions) {
                preds.push_back({{"y_true", p.y_true},
                                 {"y_pred", p.y_pred},
                                 {"s_true", p.s_true},
                                 {"s_pred_adv", p.s_pred_adv},
                                 {"s_pred_nuis", p.s_pred_nuis}});
            }
            f["predictions"] = std::move(preds);
            folds.push_back(std::move(f));
        }
        entry["folds"] = std::move(folds);
        doc.push_back(std::move(entry));
    }
    std::ofstream out(json_path);
    if (!out) {
        throw std::runtime_error("cannot write " + json_path.string());
    }
    out << doc.dump() << "\n";
}

std::vector<SweepRow> load_sweep_rows(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) {
        throw std::runtime_error("cannot open " + json_path.string());
    }
    const json doc = json::parse(in);
    std::vector<SweepRow> rows;
    for (const auto& entry : doc) {
        SweepRow row;
        row_header_from_json(entry, row);
        for (const auto& fj : entry.at("folds")) {
            FoldResult fold = fold_from_json(fj);
            if (fj.contains("failure")) fold.failure = fj.at("failure").get<std::string>();
            for (const auto& pj : fj.at("predictions")) {
                TrialPrediction p;
                p.y_true = pj.at("y_true").get<int>();
                p.y_pred = pj.at("y_pred").get<int>();
                p.s_true = pj.at("s_true").get<int>();
                p.s_pred_adv = pj.at("s_pred_adv").get<int>();
                p.s_pred_nuis = pj.at("s_pred_nuis").get<int>();
                fold.predictions.push_back(p);
            }
            row.per_fold.push_back(std::move(fold));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_training_log(const std::filesystem::path& path, int fold_id,
                        const EpochHistory& history) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write training log: " + path.string());
    }
    for (std::size_t epoch = 0; epoch < history.size(); ++epoch) {
        const EpochStats& s = history[epoch];
        const json record = {{"fold", fold_id},
                             {"epoch", epoch},
                             {"task_ce", s.task_ce},
                             {"adv_ce", s.adv_ce},
                             {"nuis_ce", s.nuis_ce},
                             {"encoder_loss", s.encoder_loss},
                             {"val_main_acc", s.val_main_acc},
                             {"val_adv_acc", s.val_adv_acc},
                             {"val_nuis_acc", s.val_nuis_acc}};
        out << record.dump() << "\n";
    }
}

}  // namespace datl
