#pragma once

// Teacher -> student distillation trainer.
//
// A frozen teacher and a trainable student with the same number of layers
// are run on the same input sequences; the student minimizes the configured
// temporal-relation loss with Adam under a cosine learning-rate schedule.
// A run is a pure function of its config: batch order, initialization and
// synthetic data all derive from seeds, and per-item gradients are reduced
// in item order regardless of how many worker threads computed them.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "star/autodiff.hpp"
#include "star/checkpoint.hpp"
#include "star/model.hpp"
#include "star/rng.hpp"
#include "star/starloss.hpp"
#include "star/tensor_io.hpp"

namespace star {

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticConfig {
    std::size_t input_dim = 8;
    std::size_t seq_len = 12;
    std::size_t corpus_size = 64;
    std::uint64_t seed = 0;
    double noise_std = 0.1;
    /// Size of the shared codebook of "acoustic unit" vectors.
    std::size_t num_units = 16;
    std::size_t min_segment = 2;
    std::size_t max_segment = 6;

    friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
    j = nlohmann::json{{"input_dim", c.input_dim},     {"seq_len", c.seq_len},         {"corpus_size", c.corpus_size},
                       {"seed", c.seed},               {"noise_std", c.noise_std},     {"num_units", c.num_units},
                       {"min_segment", c.min_segment}, {"max_segment", c.max_segment}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
    if (!j.is_object()) throw ConfigError("synthetic data config must be an object");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "input_dim") c.input_dim = v.get<std::size_t>();
            else if (key == "seq_len" || key == "N") c.seq_len = v.get<std::size_t>();
            else if (key == "corpus_size") c.corpus_size = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "noise_std") c.noise_std = v.get<double>();
            else if (key == "num_units") c.num_units = v.get<std::size_t>();
            else if (key == "min_segment") c.min_segment = v.get<std::size_t>();
            else if (key == "max_segment") c.max_segment = v.get<std::size_t>();
            else throw ConfigError("unknown synthetic data key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("synthetic data key '" + key + "': " + e.what());
        }
    }
}

/// Sequences of piecewise-constant segments (length min..max_segment), each
/// segment a unit drawn from a seeded codebook, plus Gaussian noise.
/// Returns corpus_size tensors of shape input_dim x seq_len.
inline std::vector<Tensor> gen_synthetic(const SyntheticConfig& c) {
    if (c.input_dim < 1 || c.seq_len < 1 || c.corpus_size < 1 || c.num_units < 1)
        throw ConfigError("synthetic data: input_dim, seq_len, corpus_size and num_units must be positive");
    if (c.min_segment < 1 || c.max_segment < c.min_segment)
        throw ConfigError("synthetic data: need 1 <= min_segment <= max_segment");
    if (!(c.noise_std >= 0.0)) throw ConfigError("synthetic data: noise_std must be >= 0");
    Rng rng(c.seed);
    std::vector<std::vector<double>> units(c.num_units, std::vector<double>(c.input_dim));
    for (auto& u : units)
        for (double& v : u) v = rng.normal();
    std::vector<Tensor> corpus;
    corpus.reserve(c.corpus_size);
    for (std::size_t s = 0; s < c.corpus_size; ++s) {
        Tensor x({c.input_dim, c.seq_len});
        std::size_t t = 0;
        while (t < c.seq_len) {
            const std::size_t len = rng.uniform_int(c.min_segment, c.max_segment);
            const auto& unit = units[rng.uniform_int(0, c.num_units - 1)];
            for (std::size_t k = 0; k < len && t < c.seq_len; ++k, ++t)
                for (std::size_t i = 0; i < c.input_dim; ++i) x(i, t) = unit[i];
        }
        if (c.noise_std > 0.0)
            for (double& v : x.data()) v += c.noise_std * rng.normal();
        corpus.push_back(std::move(x));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Run configuration

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct DistillConfig {
    /// Exactly one of teacher / teacher_checkpoint is set.
    std::optional<ModelConfig> teacher;
    std::optional<std::filesystem::path> teacher_checkpoint;
    /// Self-supervised surrogate pre-training steps applied to the teacher.
    std::size_t teacher_warm_steps = 0;
    double teacher_warm_lr = 1e-3;
    ModelConfig student;
    StarLossConfig loss;
    std::size_t steps = 100;
    std::size_t batch_size = 4;
    std::size_t accumulate_steps = 1;
    double lr = 1e-3;
    std::size_t warmup_steps = 0;
    AdamConfig adam;
    /// Global-norm gradient clipping threshold; off when unset.
    std::optional<double> grad_clip;
    /// A step whose batch loss exceeds this multiple of the initial corpus
    /// loss counts as diverged; off when unset.
    std::optional<double> divergence_factor = 1e6;
    std::optional<SyntheticConfig> synthetic;
    std::vector<std::filesystem::path> files;
    std::uint64_t run_seed = 0;
    std::filesystem::path out_dir;
    /// Record wall-clock step time in the metrics (makes them run-dependent).
    bool record_wall_time = false;

    std::size_t items_per_step() const { return batch_size * accumulate_steps; }

    /// Checks everything that does not require loading files.
    void validate() const {
        if (teacher.has_value() == teacher_checkpoint.has_value())
            throw ConfigError("teacher must be either a model config or a checkpoint");
        student.validate();
        loss.validate();
        if (teacher) {
            teacher->validate();
            check_pair(*teacher, student);
        }
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (batch_size < 1 || accumulate_steps < 1) throw ConfigError("batch_size and accumulate_steps must be >= 1");
        if (!std::isfinite(lr) || lr <= 0.0) throw ConfigError("lr must be finite and > 0");
        if (warmup_steps >= steps && warmup_steps > 0) throw ConfigError("warmup_steps must be < steps");
        if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0");
        if (divergence_factor && !(*divergence_factor > 1.0)) throw ConfigError("divergence_factor must be > 1");
        if (synthetic.has_value() == !files.empty())
            throw ConfigError("data must be either synthetic or a file list");
        if (synthetic) {
            if (synthetic->input_dim != student.input_dim)
                throw ConfigError("synthetic input_dim " + std::to_string(synthetic->input_dim) +
                                  " differs from model input_dim " + std::to_string(student.input_dim));
            if (synthetic->corpus_size < batch_size) throw ConfigError("corpus_size must be >= batch_size");
        }
    }

    /// Layer-to-layer pairing requires equal depth and equal input width.
    static void check_pair(const ModelConfig& teacher, const ModelConfig& student) {
        if (teacher.num_layers != student.num_layers)
            throw ConfigError("teacher num_layers " + std::to_string(teacher.num_layers) +
                              " differs from student num_layers " + std::to_string(student.num_layers));
        if (teacher.input_dim != student.input_dim)
            throw ConfigError("teacher input_dim " + std::to_string(teacher.input_dim) +
                              " differs from student input_dim " + std::to_string(student.input_dim));
    }
};

inline nlohmann::json to_json_value(const DistillConfig& c) {
    nlohmann::json j;
    if (c.teacher) j["teacher"] = *c.teacher;
    else j["teacher"] = {{"checkpoint", c.teacher_checkpoint->string()}};
    j["teacher_warm_steps"] = c.teacher_warm_steps;
    j["teacher_warm_lr"] = c.teacher_warm_lr;
    j["student"] = c.student;
    j["loss"] = c.loss;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["accumulate_steps"] = c.accumulate_steps;
    j["lr"] = c.lr;
    j["warmup_steps"] = c.warmup_steps;
    j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
    j["grad_clip"] = c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr);
    j["divergence_factor"] = c.divergence_factor ? nlohmann::json(*c.divergence_factor) : nlohmann::json(nullptr);
    if (c.synthetic) j["data"] = {{"synthetic", *c.synthetic}};
    else {
        std::vector<std::string> f;
        for (const auto& p : c.files) f.push_back(p.string());
        j["data"] = {{"files", f}};
    }
    j["run_seed"] = c.run_seed;
    j["out_dir"] = c.out_dir.string();
    j["record_wall_time"] = c.record_wall_time;
    return j;
}

/// Strict parse of a run config; unknown keys anywhere are rejected.
inline DistillConfig parse_distill_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    DistillConfig c;
    bool have_student = false, have_teacher = false;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "teacher") {
                have_teacher = true;
                if (v.is_object() && v.contains("checkpoint")) {
                    if (v.size() != 1) throw ConfigError("teacher checkpoint form takes only 'checkpoint'");
                    c.teacher_checkpoint = v.at("checkpoint").get<std::string>();
                } else {
                    c.teacher = v.get<ModelConfig>();
                }
            } else if (key == "student") {
                have_student = true;
                c.student = v.get<ModelConfig>();
            } else if (key == "loss") c.loss = v.get<StarLossConfig>();
            else if (key == "teacher_warm_steps") c.teacher_warm_steps = v.get<std::size_t>();
            else if (key == "teacher_warm_lr") c.teacher_warm_lr = v.get<double>();
            else if (key == "steps") c.steps = v.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "accumulate_steps") c.accumulate_steps = v.get<std::size_t>();
            else if (key == "lr") c.lr = v.get<double>();
            else if (key == "warmup_steps") c.warmup_steps = v.get<std::size_t>();
            else if (key == "run_seed") c.run_seed = v.get<std::uint64_t>();
            else if (key == "out_dir") c.out_dir = v.get<std::string>();
            else if (key == "record_wall_time") c.record_wall_time = v.get<bool>();
            else if (key == "divergence_factor") {
                c.divergence_factor = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
            } else if (key == "grad_clip") {
                if (!v.is_null()) c.grad_clip = v.get<double>();
            } else if (key == "adam") {
                for (const auto& [ak, av] : v.items()) {
                    if (ak == "beta1") c.adam.beta1 = av.get<double>();
                    else if (ak == "beta2") c.adam.beta2 = av.get<double>();
                    else if (ak == "eps") c.adam.eps = av.get<double>();
                    else throw ConfigError("unknown adam key '" + ak + "'");
                }
            } else if (key == "data") {
                if (!v.is_object() || v.size() != 1) throw ConfigError("data must hold exactly one of synthetic/files");
                if (v.contains("synthetic")) c.synthetic = v.at("synthetic").get<SyntheticConfig>();
                else if (v.contains("files"))
                    for (const auto& f : v.at("files")) c.files.emplace_back(f.get<std::string>());
                else throw ConfigError("unknown data source '" + v.begin().key() + "'");
            } else throw ConfigError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    if (!have_teacher || !have_student) throw ConfigError("config needs both teacher and student");
    c.validate();
    return c;
}

inline DistillConfig load_distill_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_distill_config(j);
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Linear warmup to base_lr, then half-cosine decay toward 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup = 0) {
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
    const std::size_t span = total_steps > warmup ? total_steps - warmup : 1;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace detail {

inline std::vector<Tensor*> param_ptrs(EncoderParams<Tensor>& p) {
    std::vector<Tensor*> out;
    p.for_each([&out](const std::string&, ParamKind, Tensor& t) { out.push_back(&t); });
    return out;
}

inline std::vector<const Tensor*> param_ptrs(const EncoderParams<Tensor>& p) {
    std::vector<const Tensor*> out;
    p.for_each([&out](const std::string&, ParamKind, const Tensor& t) { out.push_back(&t); });
    return out;
}

}  // namespace detail

/// Adam with bias correction; no weight decay.
class Adam {
public:
    Adam(const std::vector<Shape>& shapes, AdamConfig cfg) : cfg_(cfg) {
        for (const Shape& s : shapes) {
            m_.emplace_back(s);
            v_.emplace_back(s);
        }
    }

    Adam(const EncoderParams<Tensor>& like, AdamConfig cfg) : Adam(shapes_of(like), cfg) {}

    void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw DimensionError("Adam: parameter count changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            const Tensor& g = *grads[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                double& m = m_[k][i];
                double& v = v_[k][i];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g[i];
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g[i] * g[i];
                p[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            }
        }
    }

    void step(EncoderParams<Tensor>& params, const EncoderParams<Tensor>& grads, double lr) {
        step(detail::param_ptrs(params), detail::param_ptrs(grads), lr);
    }

private:
    static std::vector<Shape> shapes_of(const EncoderParams<Tensor>& p) {
        std::vector<Shape> out;
        p.for_each([&out](const std::string&, ParamKind, const Tensor& t) { out.push_back(t.shape()); });
        return out;
    }

    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Parallel, order-deterministic batch evaluation

/// Worker count from STAR_THREADS (default: hardware concurrency).
inline std::size_t worker_count() {
    if (const char* env = std::getenv("STAR_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return static_cast<std::size_t>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to per-index slots; the caller reduces them in index order.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < n; i += workers) fn(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct ItemResult {
    double total = 0.0;
    std::optional<double> avg_attn, layer_wise, intra_layer;
    EncoderParams<Tensor> grads;
};

/// Loss and student-parameter gradients for one input sequence.
inline ItemResult student_item_gradient(const ModelWeights& student, const ForwardTrace& teacher_trace,
                                        const StarLossConfig& loss, const Tensor& input) {
    ad::Graph g;
    const auto leaves = as_leaves(g, student.params);
    const auto trace = forward_diff(student.config, leaves, g.constant(input));
    const auto teacher = lift(g, teacher_trace);
    const auto terms = star_loss_terms(loss, teacher, trace);
    g.backward(terms.total);
    ItemResult r;
    r.total = terms.total.value().item();
    if (terms.avg_attn) r.avg_attn = terms.avg_attn->value.value().item();
    if (terms.layer_wise) r.layer_wise = terms.layer_wise->value.value().item();
    if (terms.intra_layer) r.intra_layer = terms.intra_layer->value.value().item();
    r.grads = map_params(leaves, [](const std::string&, ParamKind, const ad::Var& v) { return v.grad(); });
    return r;
}

struct BatchResult {
    LossBreakdown loss;
    EncoderParams<Tensor> grads;
};

/// Mean loss and mean gradient over the given items, reduced in item order.
inline BatchResult batch_gradient(const ModelWeights& student, std::span<const ForwardTrace* const> teacher_traces,
                                  const StarLossConfig& loss, std::span<const Tensor* const> inputs,
                                  std::size_t workers) {
    const std::size_t n = inputs.size();
    std::vector<ItemResult> items(n);
    parallel_for(n, workers, [&](std::size_t i) {
        items[i] = student_item_gradient(student, *teacher_traces[i], loss, *inputs[i]);
    });
    BatchResult out;
    out.grads = map_params(student.params, [](const std::string&, ParamKind, const Tensor& t) { return Tensor(t.shape()); });
    std::vector<Tensor*> acc;
    out.grads.for_each([&acc](const std::string&, ParamKind, Tensor& t) { acc.push_back(&t); });
    auto add_opt = [](std::optional<double>& dst, const std::optional<double>& v) {
        if (v) dst = dst.value_or(0.0) + *v;
    };
    for (const ItemResult& it : items) {
        out.loss.total += it.total;
        add_opt(out.loss.avg_attn, it.avg_attn);
        add_opt(out.loss.layer_wise, it.layer_wise);
        add_opt(out.loss.intra_layer, it.intra_layer);
        std::size_t k = 0;
        it.grads.for_each([&](const std::string&, ParamKind, const Tensor& t) {
            Tensor& a = *acc[k++];
            for (std::size_t i = 0; i < t.size(); ++i) a[i] += t[i];
        });
    }
    const double inv = 1.0 / static_cast<double>(n);
    out.loss.total *= inv;
    for (auto* term : {&out.loss.avg_attn, &out.loss.layer_wise, &out.loss.intra_layer})
        if (*term) **term *= inv;
    for (Tensor* t : acc)
        for (double& v : t->data()) v *= inv;
    out.loss.config_digest = config_digest(loss);
    return out;
}

inline double global_norm(const EncoderParams<Tensor>& grads) {
    double s = 0.0;
    grads.for_each([&s](const std::string&, ParamKind, const Tensor& t) {
        for (double v : t.data()) s += v * v;
    });
    return std::sqrt(s);
}

/// Mean STaR loss of a student over a whole corpus (no gradients).
inline LossBreakdown evaluate(const ModelWeights& student, std::span<const ForwardTrace> teacher_traces,
                              const StarLossConfig& loss, std::span<const Tensor> corpus) {
    LossBreakdown mean;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const LossBreakdown b = star_loss(loss, teacher_traces[i], forward_with_trace(student, corpus[i]));
        mean.total += b.total;
        for (auto [dst, src] : {std::pair{&mean.avg_attn, &b.avg_attn}, std::pair{&mean.layer_wise, &b.layer_wise},
                                std::pair{&mean.intra_layer, &b.intra_layer}})
            if (*src) *dst = dst->value_or(0.0) + **src;
        for (const auto& [name, values] : b.per_layer) {
            auto& m = mean.per_layer[name];
            m.resize(values.size(), 0.0);
            for (std::size_t l = 0; l < values.size(); ++l) m[l] += values[l];
        }
    }
    const double inv = 1.0 / static_cast<double>(corpus.size());
    mean.total *= inv;
    for (auto* t : {&mean.avg_attn, &mean.layer_wise, &mean.intra_layer})
        if (*t) **t *= inv;
    for (auto& [name, values] : mean.per_layer)
        for (double& v : values) v *= inv;
    mean.config_digest = config_digest(loss);
    return mean;
}

// ---------------------------------------------------------------------------
// Data and teacher

inline std::vector<Tensor> load_corpus(const DistillConfig& cfg) {
    if (cfg.synthetic) return gen_synthetic(*cfg.synthetic);
    std::vector<Tensor> corpus;
    for (const auto& p : cfg.files) {
        Tensor t = io::load(p);
        if (t.rank() != 2 || t.rows() != cfg.student.input_dim)
            throw ConfigError(p.string() + ": expected input_dim x N tensor with input_dim " +
                              std::to_string(cfg.student.input_dim) + ", got " + shape_string(t.shape()));
        if (!corpus.empty() && t.cols() != corpus.front().cols())
            throw ConfigError(p.string() + ": sequence length differs from the first file");
        corpus.push_back(std::move(t));
    }
    if (corpus.size() < cfg.batch_size) throw ConfigError("corpus has fewer sequences than batch_size");
    return corpus;
}

/// Surrogate self-supervised training: a linear head on the last layer
/// reconstructs the original frames at masked (zeroed) time steps.
inline void warm_teacher(ModelWeights& teacher, std::span<const Tensor> corpus, std::size_t steps, double lr,
                         std::uint64_t seed) {
    if (steps == 0 || corpus.empty()) return;
    const ModelConfig& c = teacher.config;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    Tensor head_w({c.input_dim, c.width}), head_b({c.input_dim});
    const double bound = 1.0 / std::sqrt(static_cast<double>(c.width));
    for (double& v : head_w.data()) v = rng.uniform(-bound, bound);

    auto params = detail::param_ptrs(teacher.params);
    params.push_back(&head_w);
    params.push_back(&head_b);
    std::vector<Shape> shapes;
    for (const Tensor* t : params) shapes.push_back(t->shape());
    Adam opt(shapes, AdamConfig{});
    for (std::size_t step = 0; step < steps; ++step) {
        const Tensor& x = corpus[rng.uniform_int(0, corpus.size() - 1)];
        const std::size_t n = x.cols();
        Tensor mask({c.input_dim, n});
        Tensor masked = x;
        std::size_t count = 0;
        for (std::size_t t = 0; t < n; ++t) {
            if (rng.uniform() < 0.3 || (t + 1 == n && count == 0)) {
                ++count;
                for (std::size_t i = 0; i < c.input_dim; ++i) {
                    mask(i, t) = 1.0;
                    masked(i, t) = 0.0;
                }
            }
        }
        ad::Graph g;
        const auto leaves = as_leaves(g, teacher.params);
        const ad::Var hw = g.leaf(head_w), hb = g.leaf(head_b);
        const auto trace = forward_diff(c, leaves, g.constant(masked));
        const ad::Var pred = ad::add_col_bias(ad::matmul(hw, trace.features.back()), hb);
        const ad::Var err = ad::mul(ad::sub(pred, g.constant(x)), g.constant(mask));
        const ad::Var loss = ad::scale(ad::sum(ad::mul(err, err)), 1.0 / static_cast<double>(count * c.input_dim));
        g.backward(loss);
        std::vector<const Tensor*> grads;
        leaves.for_each([&grads](const std::string&, ParamKind, const ad::Var& v) { grads.push_back(&v.grad()); });
        grads.push_back(&hw.grad());
        grads.push_back(&hb.grad());
        opt.step(params, grads, lr);
    }
}

/// Loads or initializes the teacher, then applies the optional warm-up.
inline ModelWeights make_teacher(const DistillConfig& cfg, std::span<const Tensor> corpus) {
    ModelWeights teacher = cfg.teacher_checkpoint ? load_checkpoint(*cfg.teacher_checkpoint) : init_weights(*cfg.teacher);
    DistillConfig::check_pair(teacher.config, cfg.student);
    warm_teacher(teacher, corpus, cfg.teacher_warm_steps, cfg.teacher_warm_lr, teacher.config.seed);
    return teacher;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    std::optional<double> avg_attn, layer_wise, intra_layer;
    double grad_norm = 0.0;
    std::optional<double> wall_ms;

    nlohmann::json to_json() const {
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        nlohmann::json j{{"step", step},
                         {"lr", lr},
                         {"loss_total", loss_total},
                         {"avg_attn", opt(avg_attn)},
                         {"layer_wise", opt(layer_wise)},
                         {"intra_layer", opt(intra_layer)},
                         {"grad_norm", grad_norm}};
        if (wall_ms) j["wall_ms"] = *wall_ms;
        return j;
    }
};

struct TrainResult {
    ModelWeights student;
    LossBreakdown initial;
    LossBreakdown final;
    std::vector<MetricsRecord> metrics;
};

/// Trains `student` against the frozen `teacher` on `corpus`. When
/// cfg.out_dir is non-empty, writes metrics.jsonl (one line per step, flushed
/// as it goes) and the final student checkpoint under out_dir/student.
inline TrainResult distill(const ModelWeights& teacher, ModelWeights student, const DistillConfig& cfg,
                           std::span<const Tensor> corpus) {
    DistillConfig::check_pair(teacher.config, student.config);
    cfg.loss.validate();
    if (corpus.size() < cfg.batch_size) throw ConfigError("corpus has fewer sequences than batch_size");
    audit_shapes(teacher);
    audit_shapes(student);

    std::vector<ForwardTrace> teacher_traces;
    teacher_traces.reserve(corpus.size());
    for (const Tensor& x : corpus) teacher_traces.push_back(forward_with_trace(teacher, x));

    std::optional<std::ofstream> metrics_file;
    if (!cfg.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(cfg.out_dir, ec);
        if (ec) throw IoError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
        metrics_file.emplace(cfg.out_dir / "metrics.jsonl", std::ios::trunc);
        if (!*metrics_file) throw IoError("cannot write " + (cfg.out_dir / "metrics.jsonl").string());
    }

    TrainResult result;
    result.initial = evaluate(student, teacher_traces, cfg.loss, corpus);

    Rng order_rng(cfg.run_seed);
    std::vector<std::size_t> order(corpus.size());
    std::size_t cursor = order.size();
    auto next_index = [&] {
        if (cursor == order.size()) {
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[order_rng.uniform_int(0, i)]);
            cursor = 0;
        }
        return order[cursor++];
    };

    Adam opt(student.params, cfg.adam);
    const std::size_t workers = worker_count();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<const Tensor*> inputs;
        std::vector<const ForwardTrace*> traces;
        for (std::size_t i = 0; i < cfg.items_per_step(); ++i) {
            const std::size_t idx = next_index();
            inputs.push_back(&corpus[idx]);
            traces.push_back(&teacher_traces[idx]);
        }
        BatchResult batch = batch_gradient(student, traces, cfg.loss, inputs, workers);

        auto check = [step](const std::optional<double>& v, const char* name) {
            if (v && !std::isfinite(*v))
                throw NumericError(static_cast<long>(step), name,
                                   std::string("non-finite ") + name + " loss at step " + std::to_string(step));
        };
        check(batch.loss.avg_attn, "avg_attn");
        check(batch.loss.layer_wise, "layer_wise");
        check(batch.loss.intra_layer, "intra_layer");
        check(batch.loss.total, "total");
        if (cfg.divergence_factor && result.initial.total > 0.0 &&
            batch.loss.total > *cfg.divergence_factor * result.initial.total) {
            std::ostringstream msg;
            msg << "loss diverged at step " << step << ": " << batch.loss.total << " exceeds "
                << *cfg.divergence_factor << " x initial " << result.initial.total;
            throw NumericError(static_cast<long>(step), "total", msg.str());
        }

        const double norm = global_norm(batch.grads);
        if (!std::isfinite(norm))
            throw NumericError(static_cast<long>(step), "gradient",
                               "non-finite gradient norm at step " + std::to_string(step));
        if (cfg.grad_clip && norm > *cfg.grad_clip) {
            const double s = *cfg.grad_clip / norm;
            batch.grads.for_each([s](const std::string&, ParamKind, Tensor& t) {
                for (double& v : t.data()) v *= s;
            });
        }
        const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_steps);
        opt.step(student.params, batch.grads, lr);

        MetricsRecord rec;
        rec.step = step;
        rec.lr = lr;
        rec.loss_total = batch.loss.total;
        rec.avg_attn = batch.loss.avg_attn;
        rec.layer_wise = batch.loss.layer_wise;
        rec.intra_layer = batch.loss.intra_layer;
        rec.grad_norm = norm;
        if (cfg.record_wall_time)
            rec.wall_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        if (metrics_file) {
            *metrics_file << rec.to_json().dump() << "\n";
            metrics_file->flush();
            if (!*metrics_file) throw IoError("write failed: metrics.jsonl");
        }
        result.metrics.push_back(std::move(rec));
    }

    result.final = evaluate(student, teacher_traces, cfg.loss, corpus);
    if (!std::isfinite(result.final.total))
        throw NumericError(static_cast<long>(cfg.steps), "total", "non-finite loss after training");
    if (!cfg.out_dir.empty()) save_checkpoint(cfg.out_dir / "student", student);
    result.student = std::move(student);
    return result;
}

/// Full run from a config: data, teacher, student init, training. Also saves
/// the teacher checkpoint and the resolved config under out_dir.
inline TrainResult train(const DistillConfig& cfg) {
    cfg.validate();
    const std::vector<Tensor> corpus = load_corpus(cfg);
    const ModelWeights teacher = make_teacher(cfg, corpus);
    if (!cfg.out_dir.empty()) {
        save_checkpoint(cfg.out_dir / "teacher", teacher);
        std::ofstream f(cfg.out_dir / "config.json", std::ios::trunc);
        if (!f) throw IoError("cannot write " + (cfg.out_dir / "config.json").string());
        f << to_json_value(cfg).dump(2) << "\n";
    }
    return distill(teacher, init_weights(cfg.student), cfg, corpus);
}

}  // namespace star
