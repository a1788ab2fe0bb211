#pragma once

// Multi-head Transformer encoder whose forward pass records the quantities
// consumed by the temporal-relation distillation losses.
//
// The forward pass is written once, generic over the value type T. With
// T = Tensor it is a plain evaluation; with T = ad::Var it builds a graph.
// Both instantiations run the same kernels in the same order, so their values
// agree to the last bit.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "star/autodiff.hpp"
#include "star/rng.hpp"
#include "star/tensor.hpp"

namespace star {

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t width = 16;
    std::size_t num_heads = 2;
    std::size_t ffn_width = 32;
    std::size_t input_dim = 8;
    std::uint64_t seed = 0;
    /// Post-LayerNorm residual blocks (HuBERT style) instead of pre-LN.
    bool post_ln = false;

    std::size_t head_width() const { return width / num_heads; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
        if (width < 1 || num_heads < 1 || ffn_width < 1 || input_dim < 1)
            throw ConfigError("width, num_heads, ffn_width and input_dim must be positive");
        if (width % num_heads != 0)
            throw ConfigError("width " + std::to_string(width) + " is not divisible by num_heads " +
                              std::to_string(num_heads));
        if (width < 2) throw ConfigError("width must be >= 2 for LayerNorm");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

    // Full-scale shapes. Students keep the teacher's depth and shrink the
    // attention and FFN widths.
    static ModelConfig hubert_base() { return {12, 768, 12, 3072, 512, 0, true}; }
    static ModelConfig student_432_976() { return {12, 432, 12, 976, 512, 0, true}; }
    static ModelConfig student_432_1392() { return {12, 432, 12, 1392, 512, 0, true}; }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"num_layers", c.num_layers}, {"width", c.width},         {"num_heads", c.num_heads},
                       {"ffn_width", c.ffn_width},   {"input_dim", c.input_dim}, {"seed", c.seed},
                       {"post_ln", c.post_ln}};
}

/// Strict parse: unknown keys are rejected, missing keys keep defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "num_layers") c.num_layers = value.get<std::size_t>();
            else if (key == "width") c.width = value.get<std::size_t>();
            else if (key == "num_heads") c.num_heads = value.get<std::size_t>();
            else if (key == "ffn_width") c.ffn_width = value.get<std::size_t>();
            else if (key == "input_dim") c.input_dim = value.get<std::size_t>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "post_ln") c.post_ln = value.get<bool>();
            else throw ConfigError("unknown model config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("model config key '" + key + "': " + e.what());
        }
    }
}

enum class ParamKind { weight, bias, norm_gain, norm_bias };

template <class T>
struct LayerParams {
    T q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    T attn_norm_g, attn_norm_b;
    T ffn_norm_g, ffn_norm_b;
    T fc1_w, fc1_b, fc2_w, fc2_b;
};

/// All learnable parameters of one encoder. Weight matrices are stored
/// out x in and applied as W x to channel-major sequences.
template <class T>
struct EncoderParams {
    T in_w, in_b;
    std::vector<LayerParams<T>> layers;
    T norm_g, norm_b;

    /// Calls f(name, kind, T&) for every parameter in a fixed order.
    template <class F>
    void for_each(F&& f) {
        f(std::string("input_proj.weight"), ParamKind::weight, in_w);
        f(std::string("input_proj.bias"), ParamKind::bias, in_b);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layer." + std::to_string(i) + ".";
            LayerParams<T>& l = layers[i];
            f(p + "q_proj.weight", ParamKind::weight, l.q_w);
            f(p + "q_proj.bias", ParamKind::bias, l.q_b);
            f(p + "k_proj.weight", ParamKind::weight, l.k_w);
            f(p + "k_proj.bias", ParamKind::bias, l.k_b);
            f(p + "v_proj.weight", ParamKind::weight, l.v_w);
            f(p + "v_proj.bias", ParamKind::bias, l.v_b);
            f(p + "out_proj.weight", ParamKind::weight, l.o_w);
            f(p + "out_proj.bias", ParamKind::bias, l.o_b);
            f(p + "attn_norm.weight", ParamKind::norm_gain, l.attn_norm_g);
            f(p + "attn_norm.bias", ParamKind::norm_bias, l.attn_norm_b);
            f(p + "ffn_norm.weight", ParamKind::norm_gain, l.ffn_norm_g);
            f(p + "ffn_norm.bias", ParamKind::norm_bias, l.ffn_norm_b);
            f(p + "fc1.weight", ParamKind::weight, l.fc1_w);
            f(p + "fc1.bias", ParamKind::bias, l.fc1_b);
            f(p + "fc2.weight", ParamKind::weight, l.fc2_w);
            f(p + "fc2.bias", ParamKind::bias, l.fc2_b);
        }
        f(std::string("encoder_norm.weight"), ParamKind::norm_gain, norm_g);
        f(std::string("encoder_norm.bias"), ParamKind::norm_bias, norm_b);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<EncoderParams*>(this)->for_each(
            [&f](const std::string& name, ParamKind kind, T& v) { f(name, kind, static_cast<const T&>(v)); });
    }
};

/// Builds an EncoderParams<U> by applying fn(name, kind, const T&) to every entry.
template <class T, class Fn>
auto map_params(const EncoderParams<T>& src, Fn&& fn) {
    using U = std::decay_t<decltype(fn(std::string(), ParamKind::weight, std::declval<const T&>()))>;
    EncoderParams<U> out;
    out.layers.resize(src.layers.size());
    std::vector<const T*> in;
    src.for_each([&in](const std::string&, ParamKind, const T& v) { in.push_back(&v); });
    std::size_t i = 0;
    out.for_each([&](const std::string& name, ParamKind kind, U& dst) {
        dst = fn(name, kind, *in[i]);
        ++i;
    });
    return out;
}

/// Expected shape of every parameter for a configuration.
inline EncoderParams<Shape> param_shapes(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.width, f = c.ffn_width;
    EncoderParams<Shape> s;
    s.in_w = {d, c.input_dim};
    s.in_b = {d};
    s.layers.resize(c.num_layers);
    for (auto& l : s.layers) {
        l.q_w = l.k_w = l.v_w = l.o_w = {d, d};
        l.q_b = l.k_b = l.v_b = l.o_b = {d};
        l.attn_norm_g = l.attn_norm_b = l.ffn_norm_g = l.ffn_norm_b = {d};
        l.fc1_w = {f, d};
        l.fc1_b = {f};
        l.fc2_w = {d, f};
        l.fc2_b = {d};
    }
    s.norm_g = s.norm_b = {d};
    return s;
}

struct ModelWeights {
    ModelConfig config;
    EncoderParams<Tensor> params;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        params.for_each([&n](const std::string&, ParamKind, const Tensor& t) { n += t.size(); });
        return n;
    }
};

/// Checks that every parameter has the shape derived from the config.
inline void audit_shapes(const ModelWeights& w) {
    const auto expected = param_shapes(w.config);
    if (w.params.layers.size() != expected.layers.size())
        throw ConfigError("weights have " + std::to_string(w.params.layers.size()) + " layers, config says " +
                          std::to_string(expected.layers.size()));
    std::vector<const Shape*> shapes;
    expected.for_each([&shapes](const std::string&, ParamKind, const Shape& s) { shapes.push_back(&s); });
    std::size_t i = 0;
    w.params.for_each([&](const std::string& name, ParamKind, const Tensor& t) {
        if (t.shape() != *shapes[i])
            throw ConfigError("parameter " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                              shape_string(*shapes[i]));
        ++i;
    });
}

/// Linear weights ~ U(+-1/sqrt(fan_in)), biases 0, LayerNorm gain 1 / bias 0.
inline ModelWeights init_weights(const ModelConfig& config) {
    const auto shapes = param_shapes(config);
    Rng rng(config.seed);
    ModelWeights w{config, {}};
    w.params = map_params(shapes, [&rng](const std::string&, ParamKind kind, const Shape& s) {
        Tensor t(s);
        if (kind == ParamKind::weight) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(s[1]));
            for (double& v : t.data()) v = rng.uniform(-bound, bound);
        } else if (kind == ParamKind::norm_gain) {
            for (double& v : t.data()) v = 1.0;
        }
        return t;
    });
    return w;
}

/// Per-layer record of a forward pass.
///
/// features[0] is the input of the first Transformer layer and features[l]
/// the output of layer l, so there are L+1 of them, each d x N.
/// attn_maps[l-1][h] is the N x N attention map of head h in layer l.
template <class T>
struct Trace {
    std::vector<T> features;
    std::vector<std::vector<T>> attn_maps;
    std::size_t seq_len = 0;

    std::size_t num_layers() const { return attn_maps.size(); }
};

using ForwardTrace = Trace<Tensor>;

/// softmax(q^T k / sqrt(d_h)) for one head; q, k are d_h x N.
template <class T>
T attention_map(const T& q, const T& k) {
    const Tensor& qv = value_of(q);
    const Tensor& kv = value_of(k);
    if (qv.rank() != 2 || kv.rank() != 2 || qv.shape() != kv.shape())
        throw DimensionError("attention_map: q " + shape_string(qv.shape()) + " vs k " + shape_string(kv.shape()));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(qv.rows()));
    return softmax_rows(scale(matmul(transpose(q), k), inv_sqrt));
}

namespace detail {

template <class T>
T linear(const T& w, const T& b, const T& x) {
    return add_col_bias(matmul(w, x), b);
}

template <class T>
T self_attention(const ModelConfig& c, const LayerParams<T>& p, const T& x, std::vector<T>& maps) {
    const T q = linear(p.q_w, p.q_b, x);
    const T k = linear(p.k_w, p.k_b, x);
    const T v = linear(p.v_w, p.v_b, x);
    const std::size_t dh = c.head_width();
    std::vector<T> heads;
    heads.reserve(c.num_heads);
    for (std::size_t h = 0; h < c.num_heads; ++h) {
        T a = attention_map(slice_rows(q, h * dh, dh), slice_rows(k, h * dh, dh));
        // Column t of the head output is sum_s A[t, s] v[:, s].
        heads.push_back(matmul(slice_rows(v, h * dh, dh), transpose(a)));
        maps.push_back(std::move(a));
    }
    return linear(p.o_w, p.o_b, concat_rows(std::span<const T>(heads)));
}

template <class T>
T feed_forward(const LayerParams<T>& p, const T& x) {
    return linear(p.fc2_w, p.fc2_b, gelu(linear(p.fc1_w, p.fc1_b, x)));
}

}  // namespace detail

/// Forward pass generic over the value type. input is input_dim x N.
///
/// Pre-LN: x + MHSA(LN(x)), then x + FFN(LN(x)); the encoder norm is applied
/// to the last layer's output. Post-LN: LN(x + MHSA(x)), LN(x + FFN(x)); the
/// encoder norm is applied to the projected input, as in HuBERT.
template <class T>
Trace<T> forward_generic(const ModelConfig& c, const EncoderParams<T>& p, const T& input) {
    const Tensor& iv = value_of(input);
    if (iv.rank() != 2 || iv.rows() != c.input_dim)
        throw DimensionError("input " + shape_string(iv.shape()) + " does not match input_dim " +
                             std::to_string(c.input_dim));
    if (iv.cols() < 1) throw DimensionError("input sequence is empty");
    Trace<T> trace;
    trace.seq_len = iv.cols();
    T x = detail::linear(p.in_w, p.in_b, input);
    if (c.post_ln) x = layer_norm(x, p.norm_g, p.norm_b);
    trace.features.push_back(x);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const LayerParams<T>& lp = p.layers[l];
        std::vector<T> maps;
        if (c.post_ln) {
            x = layer_norm(add(x, detail::self_attention(c, lp, x, maps)), lp.attn_norm_g, lp.attn_norm_b);
            x = layer_norm(add(x, detail::feed_forward(lp, x)), lp.ffn_norm_g, lp.ffn_norm_b);
        } else {
            x = add(x, detail::self_attention(c, lp, layer_norm(x, lp.attn_norm_g, lp.attn_norm_b), maps));
            x = add(x, detail::feed_forward(lp, layer_norm(x, lp.ffn_norm_g, lp.ffn_norm_b)));
            if (l + 1 == p.layers.size()) x = layer_norm(x, p.norm_g, p.norm_b);
        }
        trace.features.push_back(x);
        trace.attn_maps.push_back(std::move(maps));
    }
    return trace;
}

inline ForwardTrace forward_with_trace(const ModelWeights& w, const Tensor& input) {
    audit_shapes(w);
    return forward_generic<Tensor>(w.config, w.params, input);
}

/// Registers every parameter as a trainable leaf of g.
inline EncoderParams<ad::Var> as_leaves(ad::Graph& g, const EncoderParams<Tensor>& p) {
    return map_params(p, [&g](const std::string&, ParamKind, const Tensor& t) { return g.leaf(t); });
}

inline EncoderParams<ad::Var> as_constants(ad::Graph& g, const EncoderParams<Tensor>& p) {
    return map_params(p, [&g](const std::string&, ParamKind, const Tensor& t) { return g.constant(t); });
}

inline Trace<ad::Var> forward_diff(const ModelConfig& c, const EncoderParams<ad::Var>& p, const ad::Var& input) {
    return forward_generic<ad::Var>(c, p, input);
}

/// Copies a plain trace into g as constants.
inline Trace<ad::Var> lift(ad::Graph& g, const ForwardTrace& t) {
    Trace<ad::Var> out;
    out.seq_len = t.seq_len;
    for (const Tensor& f : t.features) out.features.push_back(g.constant(f));
    for (const auto& layer : t.attn_maps) {
        std::vector<ad::Var> maps;
        for (const Tensor& a : layer) maps.push_back(g.constant(a));
        out.attn_maps.push_back(std::move(maps));
    }
    return out;
}

/// Plain values of a differentiable trace.
inline ForwardTrace values(const Trace<ad::Var>& t) {
    ForwardTrace out;
    out.seq_len = t.seq_len;
    for (const ad::Var& f : t.features) out.features.push_back(f.value());
    for (const auto& layer : t.attn_maps) {
        std::vector<Tensor> maps;
        for (const ad::Var& a : layer) maps.push_back(a.value());
        out.attn_maps.push_back(std::move(maps));
    }
    return out;
}

}  // namespace star
