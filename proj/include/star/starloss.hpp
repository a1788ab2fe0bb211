#pragma once

// Temporal-relation distillation objectives.
//
// All three objectives compare N x N matrices (attention maps, temporal Gram
// matrices), so teacher and student may differ in channel width and head
// count without any projection parameters. Only the layer count L and the
// sequence length N must agree.

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "star/model.hpp"
#include "star/tensor.hpp"

namespace star {

enum class TgmNormalization { none, by_channels };
enum class SeqNormalization { none, by_steps };

NLOHMANN_JSON_SERIALIZE_ENUM(TgmNormalization, {{TgmNormalization::none, "none"},
                                                {TgmNormalization::by_channels, "by_channels"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SeqNormalization, {{SeqNormalization::none, "none"},
                                                {SeqNormalization::by_steps, "by_steps"}})

struct StarLossConfig {
    bool avg_attn = false;
    bool layer_wise = true;
    bool intra_layer = true;
    double avg_attn_weight = 1.0;
    double layer_wise_weight = 1.0;
    double intra_layer_weight = 1.0;
    /// Divide each Gram matrix by its channel width d.
    TgmNormalization tgm_normalization = TgmNormalization::by_channels;
    /// Divide each summed term by its number of (layer, step) terms.
    SeqNormalization seq_normalization = SeqNormalization::by_steps;
    /// Baseline: restrict the attention term to the last layer.
    bool last_layer_attn_only = false;

    void validate() const {
        if (!avg_attn && !layer_wise && !intra_layer) throw ConfigError("loss config enables no term");
        for (double w : {avg_attn_weight, layer_wise_weight, intra_layer_weight})
            if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
    }

    /// Same terms and weights, with the sums evaluated exactly as written
    /// (no channel or step normalization).
    StarLossConfig literal() const {
        StarLossConfig c = *this;
        c.tgm_normalization = TgmNormalization::none;
        c.seq_normalization = SeqNormalization::none;
        return c;
    }

    friend bool operator==(const StarLossConfig&, const StarLossConfig&) = default;
};

inline void to_json(nlohmann::json& j, const StarLossConfig& c) {
    j = nlohmann::json{{"avg_attn", c.avg_attn},
                       {"layer_wise", c.layer_wise},
                       {"intra_layer", c.intra_layer},
                       {"weights",
                        {{"avg_attn", c.avg_attn_weight},
                         {"layer_wise", c.layer_wise_weight},
                         {"intra_layer", c.intra_layer_weight}}},
                       {"tgm_normalization", c.tgm_normalization},
                       {"seq_normalization", c.seq_normalization},
                       {"last_layer_attn_only", c.last_layer_attn_only}};
}

inline void from_json(const nlohmann::json& j, StarLossConfig& c) {
    if (!j.is_object()) throw ConfigError("loss config must be a JSON object");
    auto parse_norm = [](const nlohmann::json& v, auto& out, const char* key) {
        using E = std::decay_t<decltype(out)>;
        const auto s = v.get<std::string>();
        const E parsed = nlohmann::json(s).get<E>();
        if (nlohmann::json(parsed).get<std::string>() != s)
            throw ConfigError(std::string("unknown value '") + s + "' for " + key);
        out = parsed;
    };
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "avg_attn") c.avg_attn = value.get<bool>();
            else if (key == "layer_wise") c.layer_wise = value.get<bool>();
            else if (key == "intra_layer") c.intra_layer = value.get<bool>();
            else if (key == "last_layer_attn_only") c.last_layer_attn_only = value.get<bool>();
            else if (key == "tgm_normalization") parse_norm(value, c.tgm_normalization, "tgm_normalization");
            else if (key == "seq_normalization") parse_norm(value, c.seq_normalization, "seq_normalization");
            else if (key == "weights") {
                if (!value.is_object()) throw ConfigError("weights must be an object");
                for (const auto& [wk, wv] : value.items()) {
                    if (wk == "avg_attn") c.avg_attn_weight = wv.get<double>();
                    else if (wk == "layer_wise") c.layer_wise_weight = wv.get<double>();
                    else if (wk == "intra_layer") c.intra_layer_weight = wv.get<double>();
                    else throw ConfigError("unknown loss weight '" + wk + "'");
                }
            } else throw ConfigError("unknown loss config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("loss config key '" + key + "': " + e.what());
        }
    }
    c.validate();
}

/// Element-wise mean of H attention maps.
template <class T>
T avg_attention(const std::vector<T>& maps) {
    if (maps.empty()) throw DimensionError("avg_attention: no maps");
    const Shape& shape = value_of(maps[0]).shape();
    for (const T& m : maps) {
        if (value_of(m).shape() != shape)
            throw DimensionError("avg_attention: mixed shapes " + shape_string(shape) + " and " +
                                 shape_string(value_of(m).shape()));
    }
    T acc = maps[0];
    for (std::size_t h = 1; h < maps.size(); ++h) acc = add(acc, maps[h]);
    if (maps.size() == 1) return acc;
    return scale(acc, 1.0 / static_cast<double>(maps.size()));
}

/// Temporal Gram matrix G = F^T F (N x N) of a d x N feature sequence.
template <class T>
T tgm(const T& f, TgmNormalization norm = TgmNormalization::by_channels) {
    T g = matmul(transpose(f), f);
    if (norm == TgmNormalization::by_channels) g = scale(g, 1.0 / static_cast<double>(value_of(f).rows()));
    return g;
}

/// Cross Gram between a layer's input and output: prev^T cur (N x N).
template <class T>
T intra_tgm(const T& prev, const T& cur, TgmNormalization norm = TgmNormalization::by_channels) {
    if (value_of(prev).shape() != value_of(cur).shape())
        throw DimensionError("intra_tgm: " + shape_string(value_of(prev).shape()) + " vs " +
                             shape_string(value_of(cur).shape()));
    T g = matmul(transpose(prev), cur);
    if (norm == TgmNormalization::by_channels) g = scale(g, 1.0 / static_cast<double>(value_of(cur).rows()));
    return g;
}

/// Channel (style) Gram F F^T, d x d.
inline Tensor channel_gram(const Tensor& f) { return matmul(f, transpose(f)); }

template <class T>
void check_alignment(const Trace<T>& teacher, const Trace<T>& student) {
    if (teacher.num_layers() != student.num_layers())
        throw AlignmentError("layer count differs: teacher L=" + std::to_string(teacher.num_layers()) +
                             ", student L=" + std::to_string(student.num_layers()));
    if (teacher.seq_len != student.seq_len)
        throw AlignmentError("sequence length differs: teacher N=" + std::to_string(teacher.seq_len) +
                             ", student N=" + std::to_string(student.seq_len));
    if (teacher.features.size() != teacher.num_layers() + 1 || student.features.size() != student.num_layers() + 1)
        throw AlignmentError("trace must hold L+1 feature matrices");
}

/// One objective's value plus its per-layer contributions (already
/// normalized, so they sum to the value).
template <class T>
struct TermValue {
    T value;
    std::vector<double> per_layer;
};

namespace detail {

template <class T>
TermValue<T> sum_terms(std::vector<T> terms, double divisor) {
    TermValue<T> out;
    for (T& t : terms) {
        if (divisor != 1.0) t = scale(t, 1.0 / divisor);
        out.per_layer.push_back(value_of(t).item());
    }
    out.value = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) out.value = add(out.value, terms[i]);
    return out;
}

}  // namespace detail

/// Sum over layers of row-wise KL(teacher avg map || student avg map).
template <class T>
TermValue<T> loss_avg_attn(const Trace<T>& teacher, const Trace<T>& student,
                           SeqNormalization seq = SeqNormalization::none, bool last_layer_only = false) {
    check_alignment(teacher, student);
    const std::size_t L = teacher.num_layers();
    const std::size_t first = last_layer_only ? L - 1 : 0;
    std::vector<T> terms;
    for (std::size_t l = first; l < L; ++l)
        terms.push_back(kl_div_rows(avg_attention(teacher.attn_maps[l]), avg_attention(student.attn_maps[l])));
    const double div = seq == SeqNormalization::by_steps
                           ? static_cast<double>(terms.size()) * static_cast<double>(teacher.seq_len)
                           : 1.0;
    return detail::sum_terms(std::move(terms), div);
}

/// Sum over l = 0..L of ||G(F_T^l) - G(F_S^l)||^2.
template <class T>
TermValue<T> loss_layer_wise(const Trace<T>& teacher, const Trace<T>& student,
                             TgmNormalization norm = TgmNormalization::none,
                             SeqNormalization seq = SeqNormalization::none) {
    check_alignment(teacher, student);
    std::vector<T> terms;
    for (std::size_t l = 0; l < teacher.features.size(); ++l)
        terms.push_back(frobenius_sq_diff(tgm(teacher.features[l], norm), tgm(student.features[l], norm)));
    const double n = static_cast<double>(teacher.seq_len);
    const double div = seq == SeqNormalization::by_steps ? static_cast<double>(terms.size()) * n * n : 1.0;
    return detail::sum_terms(std::move(terms), div);
}

/// Sum over l = 1..L of ||Gx(F_T^{l-1}, F_T^l) - Gx(F_S^{l-1}, F_S^l)||^2.
template <class T>
TermValue<T> loss_intra_layer(const Trace<T>& teacher, const Trace<T>& student,
                              TgmNormalization norm = TgmNormalization::none,
                              SeqNormalization seq = SeqNormalization::none) {
    check_alignment(teacher, student);
    std::vector<T> terms;
    for (std::size_t l = 1; l < teacher.features.size(); ++l)
        terms.push_back(frobenius_sq_diff(intra_tgm(teacher.features[l - 1], teacher.features[l], norm),
                                          intra_tgm(student.features[l - 1], student.features[l], norm)));
    const double n = static_cast<double>(teacher.seq_len);
    const double div = seq == SeqNormalization::by_steps ? static_cast<double>(terms.size()) * n * n : 1.0;
    return detail::sum_terms(std::move(terms), div);
}

template <class T>
struct LossTerms {
    T total;
    std::optional<TermValue<T>> avg_attn;
    std::optional<TermValue<T>> layer_wise;
    std::optional<TermValue<T>> intra_layer;
};

/// Evaluates the enabled objectives and their weighted sum.
template <class T>
LossTerms<T> star_loss_terms(const StarLossConfig& cfg, const Trace<T>& teacher, const Trace<T>& student) {
    cfg.validate();
    check_alignment(teacher, student);
    LossTerms<T> out;
    std::optional<T> total;
    auto accumulate = [&total](const T& term, double w) {
        const T weighted = scale(term, w);
        total = total ? add(*total, weighted) : weighted;
    };
    if (cfg.layer_wise) {
        out.layer_wise = loss_layer_wise(teacher, student, cfg.tgm_normalization, cfg.seq_normalization);
        accumulate(out.layer_wise->value, cfg.layer_wise_weight);
    }
    if (cfg.intra_layer) {
        out.intra_layer = loss_intra_layer(teacher, student, cfg.tgm_normalization, cfg.seq_normalization);
        accumulate(out.intra_layer->value, cfg.intra_layer_weight);
    }
    if (cfg.avg_attn) {
        out.avg_attn = loss_avg_attn(teacher, student, cfg.seq_normalization, cfg.last_layer_attn_only);
        accumulate(out.avg_attn->value, cfg.avg_attn_weight);
    }
    out.total = *total;
    return out;
}

inline std::string config_digest(const StarLossConfig& cfg) {
    const std::string s = nlohmann::json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Plain-number summary of one loss evaluation.
struct LossBreakdown {
    double total = 0.0;
    std::optional<double> avg_attn, layer_wise, intra_layer;
    std::map<std::string, std::vector<double>> per_layer;
    std::string config_digest;

    nlohmann::json to_json() const {
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        return {{"total", total},
                {"terms", {{"avg_attn", opt(avg_attn)}, {"layer_wise", opt(layer_wise)}, {"intra_layer", opt(intra_layer)}}},
                {"per_layer", per_layer},
                {"config_digest", config_digest}};
    }
};

template <class T>
LossBreakdown summarize(const StarLossConfig& cfg, const LossTerms<T>& terms) {
    LossBreakdown b;
    b.total = value_of(terms.total).item();
    auto take = [&b](const std::optional<TermValue<T>>& t, std::optional<double>& dst, const char* name) {
        if (!t) return;
        dst = value_of(t->value).item();
        b.per_layer[name] = t->per_layer;
    };
    take(terms.avg_attn, b.avg_attn, "avg_attn");
    take(terms.layer_wise, b.layer_wise, "layer_wise");
    take(terms.intra_layer, b.intra_layer, "intra_layer");
    b.config_digest = config_digest(cfg);
    return b;
}

inline LossBreakdown star_loss(const StarLossConfig& cfg, const ForwardTrace& teacher, const ForwardTrace& student) {
    return summarize(cfg, star_loss_terms(cfg, teacher, student));
}

}  // namespace star
