#include "datl/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace datl {

std::string to_string(ConditioningMode mode) {
    switch (mode) {
        case ConditioningMode::onehot_train: return "onehot_train";
        case ConditioningMode::zeros: return "zeros";
        case ConditioningMode::uniform: return "uniform";
        case ConditioningMode::nuisance_posterior: return "nuisance_posterior";
    }
    throw std::logic_error("unreachable conditioning mode");
}

ConditioningMode conditioning_mode_from_string(const std::string& name) {
    if (name == "onehot_train") return ConditioningMode::onehot_train;
    if (name == "zeros") return ConditioningMode::zeros;
    if (name == "uniform") return ConditioningMode::uniform;
    if (name == "nuisance_posterior") return ConditioningMode::nuisance_posterior;
    throw std::invalid_argument("unknown conditioning mode: " + name);
}

std::size_t round_half_up_fraction(std::size_t total, double frac) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(total) * frac + 0.5));
}

void ModelConfig::validate() const {
    if (input_dim < 1) throw std::invalid_argument("ModelConfig: input_dim must be >= 1");
    if (latent_dim < 1) throw std::invalid_argument("ModelConfig: latent_dim must be >= 1");
    if (r_n < 0.0 || r_n > 1.0) throw std::invalid_argument("ModelConfig: r_n must be in [0, 1]");
    if (head_hidden < 1) throw std::invalid_argument("ModelConfig: head_hidden must be >= 1");
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes must be >= 2");
    if (num_subjects < 1) throw std::invalid_argument("ModelConfig: num_subjects must be >= 1");
}

void MlpGrads::scale(double factor) {
    for (double& v : hidden.weights.values) v *= factor;
    for (double& v : hidden.bias) v *= factor;
    for (double& v : output.weights.values) v *= factor;
    for (double& v : output.bias) v *= factor;
}

void MlpGrads::add_scaled(const MlpGrads& other, double factor) {
    for (std::size_t i = 0; i < hidden.weights.values.size(); ++i)
        hidden.weights.values[i] += factor * other.hidden.weights.values[i];
    for (std::size_t i = 0; i < hidden.bias.size(); ++i)
        hidden.bias[i] += factor * other.hidden.bias[i];
    for (std::size_t i = 0; i < output.weights.values.size(); ++i)
        output.weights.values[i] += factor * other.output.weights.values[i];
    for (std::size_t i = 0; i < output.bias.size(); ++i)
        output.bias[i] += factor * other.output.bias[i];
}

Mlp::Mlp(std::size_t in, std::size_t mid, std::size_t out, Rng& rng)
    : hidden(in, mid, rng), output(mid, out, rng) {}

Matrix Mlp::forward(const Matrix& x) {
    cached_preact = hidden.forward(x);
    return output.forward(relu(cached_preact));
}

Matrix Mlp::forward_nocache(const Matrix& x) const {
    return output.forward_nocache(relu(hidden.forward_nocache(x)));
}

std::pair<Matrix, MlpGrads> Mlp::backward(const Matrix& grad_out, bool need_input_grad) const {
    MlpGrads grads;
    auto [grad_act, out_grads] = output.backward(grad_out);
    grads.output = std::move(out_grads);
    Matrix grad_pre = relu_backward(cached_preact, grad_act);
    auto [grad_in, hid_grads] = hidden.backward(grad_pre, need_input_grad);
    grads.hidden = std::move(hid_grads);
    return {std::move(grad_in), std::move(grads)};
}

void Mlp::apply(const MlpGrads& grads, double lr) {
    sgd_step(hidden, grads.hidden, lr);
    sgd_step(output, grads.output, lr);
}

std::pair<Matrix, Matrix> split_latent(const Matrix& z, double r_n) {
    if (r_n < 0.0 || r_n > 1.0) {
        throw std::invalid_argument("split_latent: r_n must be in [0, 1]");
    }
    const std::size_t dim_n = round_half_up_fraction(z.cols, r_n);
    const std::size_t dim_a = z.cols - dim_n;
    Matrix z_a(z.rows, dim_a);
    Matrix z_n(z.rows, dim_n);
    for (std::size_t i = 0; i < z.rows; ++i) {
        const double* src = z.row_ptr(i);
        double* a = z_a.row_ptr(i);
        double* n = z_n.row_ptr(i);
        for (std::size_t j = 0; j < dim_a; ++j) a[j] = src[j];
        for (std::size_t j = 0; j < dim_n; ++j) n[j] = src[dim_a + j];
    }
    return {std::move(z_a), std::move(z_n)};
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) {
        throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a) + " vs " +
                                    shape_str(b));
    }
    Matrix out(a.rows, a.cols + b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* dst = out.row_ptr(i);
        const double* pa = a.row_ptr(i);
        const double* pb = b.row_ptr(i);
        for (std::size_t j = 0; j < a.cols; ++j) dst[j] = pa[j];
        for (std::size_t j = 0; j < b.cols; ++j) dst[a.cols + j] = pb[j];
    }
    return out;
}

std::vector<double> condition_vector(int subject_id, ConditioningMode mode,
                                     std::size_t num_subjects,
                                     const std::vector<double>* nuisance_logits) {
    std::vector<double> cond(num_subjects, 0.0);
    switch (mode) {
        case ConditioningMode::onehot_train: {
            if (subject_id < 1 || static_cast<std::size_t>(subject_id) > num_subjects) {
                throw std::invalid_argument("condition_vector: subject id " +
                                            std::to_string(subject_id) + " outside [1, " +
                                            std::to_string(num_subjects) + "]");
            }
            cond[static_cast<std::size_t>(subject_id - 1)] = 1.0;
            break;
        }
        case ConditioningMode::zeros:
            break;
        case ConditioningMode::uniform: {
            const double u = 1.0 / static_cast<double>(num_subjects);
            for (double& v : cond) v = u;
            break;
        }
        case ConditioningMode::nuisance_posterior: {
            if (nuisance_logits == nullptr) {
                throw std::invalid_argument(
                    "condition_vector: nuisance_posterior mode requires nuisance logits");
            }
            if (nuisance_logits->size() != num_subjects) {
                throw std::invalid_argument("condition_vector: logits length mismatch");
            }
            Matrix row(1, num_subjects);
            row.values = *nuisance_logits;
            Matrix soft = softmax_rows(row);
            cond = std::move(soft.values);
            break;
        }
    }
    return cond;
}

DisentangledModel::DisentangledModel(const ModelConfig& cfg, Rng& rng) : config(cfg) {
    config.validate();
    encoder = Mlp(cfg.input_dim, cfg.latent_dim, cfg.latent_dim, rng);
    adversary_head = Mlp(cfg.adversary_dim(), cfg.head_hidden, cfg.num_subjects, rng);
    nuisance_head = Mlp(cfg.nuisance_dim(), cfg.head_hidden, cfg.num_subjects, rng);
    classifier_head =
        Mlp(cfg.latent_dim + cfg.num_subjects, cfg.head_hidden, cfg.num_classes, rng);
}

Matrix DisentangledModel::encode(const Matrix& x_batch) {
    if (x_batch.cols != config.input_dim) {
        throw std::invalid_argument("encode: input " + shape_str(x_batch) + " does not match input_dim " +
                                    std::to_string(config.input_dim));
    }
    return encoder.forward(x_batch);
}

Matrix DisentangledModel::encode_nocache(const Matrix& x_batch) const {
    if (x_batch.cols != config.input_dim) {
        throw std::invalid_argument("encode: input " + shape_str(x_batch) + " does not match input_dim " +
                                    std::to_string(config.input_dim));
    }
    return encoder.forward_nocache(x_batch);
}

std::size_t DisentangledModel::parameter_count() const {
    return encoder.parameter_count() + adversary_head.parameter_count() +
           nuisance_head.parameter_count() + classifier_head.parameter_count();
}

std::vector<ParamRef> DisentangledModel::parameters() {
    std::vector<ParamRef> refs;
    for (Mlp* mlp : {&encoder, &adversary_head, &nuisance_head, &classifier_head}) {
        for (DenseLayer* layer : {&mlp->hidden, &mlp->output}) {
            refs.push_back({layer->weights.values.data(), layer->weights.values.size()});
            refs.push_back({layer->bias.data(), layer->bias.size()});
        }
    }
    return refs;
}

HeadOutputs forward_all(DisentangledModel& m, const Matrix& x_batch, const Matrix& s_cond) {
    if (s_cond.rows != x_batch.rows || s_cond.cols != m.config.num_subjects) {
        throw std::invalid_argument("forward_all: conditioning matrix " + shape_str(s_cond) +
                                    " must be n x S");
    }
    HeadOutputs out;
    Matrix z = m.encode(x_batch);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    out.adv_logits = m.adversary_head.forward(z_a);
    out.nuis_logits = m.nuisance_head.forward(z_n);
    out.y_logits = m.classifier_head.forward(concat_cols(z, s_cond));
    return out;
}

HeadOutputs forward_all_nocache(const DisentangledModel& m, const Matrix& x_batch,
                                const Matrix& s_cond) {
    if (s_cond.rows != x_batch.rows || s_cond.cols != m.config.num_subjects) {
        throw std::invalid_argument("forward_all: conditioning matrix " + shape_str(s_cond) +
                                    " must be n x S");
    }
    HeadOutputs out;
    Matrix z = m.encode_nocache(x_batch);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    out.adv_logits = m.adversary_head.forward_nocache(z_a);
    out.nuis_logits = m.nuisance_head.forward_nocache(z_n);
    out.y_logits = m.classifier_head.forward_nocache(concat_cols(z, s_cond));
    return out;
}

HeadOutputs infer(const DisentangledModel& m, const Matrix& x_batch,
                  std::span<const int> subject_ids, ConditioningMode mode) {
    HeadOutputs out;
    Matrix z = m.encode_nocache(x_batch);
    auto [z_a, z_n] = split_latent(z, m.config.r_n);
    out.adv_logits = m.adversary_head.forward_nocache(z_a);
    out.nuis_logits = m.nuisance_head.forward_nocache(z_n);

    const std::size_t s = m.config.num_subjects;
    Matrix s_cond(x_batch.rows, s);
    switch (mode) {
        case ConditioningMode::onehot_train: {
            if (subject_ids.size() != x_batch.rows) {
                throw std::invalid_argument("infer: one subject id per row required");
            }
            for (std::size_t i = 0; i < x_batch.rows; ++i) {
                auto cond = condition_vector(subject_ids[i], mode, s);
                std::copy(cond.begin(), cond.end(), s_cond.row_ptr(i));
            }
            break;
        }
        case ConditioningMode::zeros:
            break;
        case ConditioningMode::uniform: {
            const double u = 1.0 / static_cast<double>(s);
            for (double& v : s_cond.values) v = u;
            break;
        }
        case ConditioningMode::nuisance_posterior: {
            s_cond = softmax_rows(out.nuis_logits);
            break;
        }
    }
    out.y_logits = m.classifier_head.forward_nocache(concat_cols(z, s_cond));
    return out;
}

namespace {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
    return json{{"rows", m.rows}, {"cols", m.cols}, {"values", m.values}};
}

Matrix matrix_from_json(const json& j) {
    Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    m.values = j.at("values").get<std::vector<double>>();
    if (m.values.size() != m.rows * m.cols) {
        throw std::runtime_error("checkpoint: matrix value count does not match shape");
    }
    return m;
}

json layer_to_json(const DenseLayer& layer) {
    return json{{"w", matrix_to_json(layer.weights)}, {"b", layer.bias}};
}

void layer_from_json(const json& j, DenseLayer& layer) {
    layer.weights = matrix_from_json(j.at("w"));
    layer.bias = j.at("b").get<std::vector<double>>();
    if (layer.bias.size() != layer.weights.cols) {
        throw std::runtime_error("checkpoint: bias length does not match weights");
    }
}

json mlp_to_json(const Mlp& mlp) {
    return json{{"hidden", layer_to_json(mlp.hidden)}, {"output", layer_to_json(mlp.output)}};
}

void mlp_from_json(const json& j, Mlp& mlp) {
    layer_from_json(j.at("hidden"), mlp.hidden);
    layer_from_json(j.at("output"), mlp.output);
}

constexpr int kCheckpointVersion = 1;

}  // namespace

void DisentangledModel::save(const std::filesystem::path& path) const {
    json j;
    j["format_version"] = kCheckpointVersion;
    j["config"] = {{"input_dim", config.input_dim},
                   {"latent_dim", config.latent_dim},
                   {"r_n", config.r_n},
                   {"head_hidden", config.head_hidden},
                   {"num_classes", config.num_classes},
                   {"num_subjects", config.num_subjects},
                   {"conditioning_mode", to_string(config.conditioning_mode)}};
    j["parameters"] = {{"encoder", mlp_to_json(encoder)},
                       {"adversary_head", mlp_to_json(adversary_head)},
                       {"nuisance_head", mlp_to_json(nuisance_head)},
                       {"classifier_head", mlp_to_json(classifier_head)}};
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    }
    out << j.dump();
    out << "\n";
}

DisentangledModel DisentangledModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint: " + path.string());
    }
    json j = json::parse(in);
    if (j.at("format_version").get<int>() != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported format version");
    }
    DisentangledModel m;
    const json& c = j.at("config");
    m.config.input_dim = c.at("input_dim").get<std::size_t>();
    m.config.latent_dim = c.at("latent_dim").get<std::size_t>();
    m.config.r_n = c.at("r_n").get<double>();
    m.config.head_hidden = c.at("head_hidden").get<std::size_t>();
    m.config.num_classes = c.at("num_classes").get<std::size_t>();
    m.config.num_subjects = c.at("num_subjects").get<std::size_t>();
    m.config.conditioning_mode =
        conditioning_mode_from_string(c.at("conditioning_mode").get<std::string>());
    m.config.validate();

    const json& p = j.at("parameters");
    mlp_from_json(p.at("encoder"), m.encoder);
    mlp_from_json(p.at("adversary_head"), m.adversary_head);
    mlp_from_json(p.at("nuisance_head"), m.nuisance_head);
    mlp_from_json(p.at("classifier_head"), m.classifier_head);

    if (m.encoder.hidden.fan_in() != m.config.input_dim ||
        m.encoder.output.fan_out() != m.config.latent_dim ||
        m.adversary_head.hidden.fan_in() != m.config.adversary_dim() ||
        m.nuisance_head.hidden.fan_in() != m.config.nuisance_dim() ||
        m.classifier_head.hidden.fan_in() != m.config.latent_dim + m.config.num_subjects ||
        m.classifier_head.output.fan_out() != m.config.num_classes) {
        throw std::runtime_error("checkpoint: parameter shapes do not match config");
    }
    return m;
}

}  // namespace datl
