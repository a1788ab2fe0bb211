#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "star/checkpoint.hpp"
#include "star/model.hpp"
#include "star/oracle.hpp"

using star::ModelConfig;
using star::ModelWeights;
using star::Tensor;

namespace {

Tensor random_input(std::size_t dim, std::size_t n, std::uint64_t seed) {
    star::Rng rng(seed);
    Tensor t({dim, n});
    for (double& v : t.data()) v = rng.uniform(-2.0, 2.0);
    return t;
}

ModelConfig small_config(bool post_ln = false) {
    ModelConfig c;
    c.num_layers = 2;
    c.width = 6;
    c.num_heads = 2;
    c.ffn_width = 8;
    c.input_dim = 4;
    c.seed = 42;
    c.post_ln = post_ln;
    return c;
}

}  // namespace

TEST(ModelConfig, Validation) {
    ModelConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    c.width = 8;
    c.num_heads = 3;
    EXPECT_THROW(c.validate(), star::ConfigError);
    c = small_config();
    c.num_layers = 0;
    EXPECT_THROW(c.validate(), star::ConfigError);
    EXPECT_THROW(star::init_weights(ModelConfig{1, 8, 3, 4, 2, 0, false}), star::ConfigError);
}

TEST(ModelConfig, FullScalePresetsAreValid) {
    for (const ModelConfig& c :
         {ModelConfig::hubert_base(), ModelConfig::student_432_976(), ModelConfig::student_432_1392()}) {
        EXPECT_NO_THROW(c.validate());
        EXPECT_EQ(c.num_layers, 12u);
    }
    EXPECT_EQ(ModelConfig::student_432_976().width, 432u);
    EXPECT_EQ(ModelConfig::student_432_1392().ffn_width, 1392u);
}

TEST(ModelConfig, JsonRejectsUnknownKeys) {
    const nlohmann::json j = small_config();
    EXPECT_EQ(j.get<ModelConfig>(), small_config());
    nlohmann::json bad = j;
    bad["dropout"] = 0.1;
    EXPECT_THROW(bad.get<ModelConfig>(), star::ConfigError);
}

TEST(InitWeights, DeterministicPerSeed) {
    const ModelWeights a = star::init_weights(small_config());
    const ModelWeights b = star::init_weights(small_config());
    EXPECT_EQ(a.params.in_w, b.params.in_w);
    EXPECT_EQ(a.params.layers[1].fc2_w, b.params.layers[1].fc2_w);
    ModelConfig other = small_config();
    other.seed = 43;
    EXPECT_NE(star::init_weights(other).params.in_w, a.params.in_w);
}

TEST(InitWeights, Distribution) {
    const ModelWeights w = star::init_weights(small_config());
    const double bound = 1.0 / std::sqrt(6.0);
    for (double v : w.params.layers[0].q_w.data()) EXPECT_LE(std::abs(v), bound);
    for (double v : w.params.layers[0].fc2_w.data()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(8.0));
    EXPECT_EQ(w.params.layers[0].q_b, Tensor({6}));
    EXPECT_EQ(w.params.layers[1].attn_norm_g, Tensor::filled({6}, 1.0));
    EXPECT_EQ(w.params.norm_b, Tensor({6}));
}

TEST(InitWeights, ShapeAuditCatchesCorruption) {
    ModelWeights w = star::init_weights(small_config());
    EXPECT_NO_THROW(star::audit_shapes(w));
    w.params.layers[1].fc1_w = Tensor({8, 5});
    EXPECT_THROW(star::audit_shapes(w), star::ConfigError);
    EXPECT_THROW(star::forward_with_trace(w, random_input(4, 3, 1)), star::ConfigError);
}

TEST(AttentionMap, Examples) {
    const Tensor uniform = star::attention_map(Tensor({2, 3}), Tensor({2, 3}));
    for (double v : uniform.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

    const Tensor a = star::attention_map(Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 0}}));
    const double e = std::exp(1.0);
    EXPECT_NEAR(a(0, 0), e / (e + 1.0), 1e-15);
    EXPECT_NEAR(a(0, 1), 1.0 / (e + 1.0), 1e-15);
    EXPECT_NEAR(a(0, 0), 0.7311, 1e-4);
    EXPECT_DOUBLE_EQ(a(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(a(1, 1), 0.5);

    EXPECT_THROW(star::attention_map(Tensor({2, 3}), Tensor({2, 4})), star::DimensionError);
}

TEST(Forward, TraceStructure) {
    ModelConfig c = small_config();
    c.num_layers = 1;
    const auto w = star::init_weights(c);
    const auto trace = star::forward_with_trace(w, random_input(4, 5, 3));
    EXPECT_EQ(trace.features.size(), 2u);
    ASSERT_EQ(trace.attn_maps.size(), 1u);
    EXPECT_EQ(trace.attn_maps[0].size(), 2u);
    EXPECT_EQ(trace.seq_len, 5u);
    for (const Tensor& f : trace.features) EXPECT_EQ(f.shape(), (star::Shape{6, 5}));
    for (const Tensor& a : trace.attn_maps[0]) EXPECT_EQ(a.shape(), (star::Shape{5, 5}));
}

TEST(Forward, ZerothFeatureIsProjectedInput) {
    const auto w = star::init_weights(small_config());
    const Tensor x = random_input(4, 5, 8);
    const auto trace = star::forward_with_trace(w, x);
    EXPECT_EQ(trace.features[0], star::add_col_bias(star::matmul(w.params.in_w, x), w.params.in_b));
}

TEST(Forward, Deterministic) {
    const auto w = star::init_weights(small_config());
    const Tensor x = random_input(4, 7, 4);
    const auto a = star::forward_with_trace(w, x);
    const auto b = star::forward_with_trace(w, x);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.attn_maps, b.attn_maps);
}

TEST(Forward, SingleStepMapsAreOne) {
    for (bool post_ln : {false, true}) {
        const auto trace = star::forward_with_trace(star::init_weights(small_config(post_ln)), random_input(4, 1, 5));
        for (const auto& layer : trace.attn_maps)
            for (const Tensor& a : layer) EXPECT_EQ(a, Tensor::matrix({{1.0}}));
    }
}

TEST(Forward, InputDimMismatch) {
    const auto w = star::init_weights(small_config());
    EXPECT_THROW(star::forward_with_trace(w, random_input(5, 3, 1)), star::DimensionError);
}

TEST(Forward, AttentionRowsSumToOne) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ModelConfig c = small_config(seed % 2 == 1);
        c.seed = seed;
        const auto trace = star::forward_with_trace(star::init_weights(c), random_input(4, 6, 100 + seed));
        for (const auto& layer : trace.attn_maps)
            for (const Tensor& a : layer)
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
                    EXPECT_NEAR(s, 1.0, 1e-9);
                }
    }
}

TEST(Forward, HeadPermutationInvariance) {
    ModelConfig c = small_config();
    c.num_heads = 3;
    const auto w = star::init_weights(c);
    const std::size_t dh = c.head_width();
    const std::vector<std::size_t> perm{2, 0, 1};  // new head h takes old head perm[h]

    ModelWeights p = w;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        auto& src = w.params.layers[l];
        auto& dst = p.params.layers[l];
        for (std::size_t h = 0; h < c.num_heads; ++h)
            for (std::size_t r = 0; r < dh; ++r) {
                const std::size_t to = h * dh + r, from = perm[h] * dh + r;
                for (std::size_t k = 0; k < c.width; ++k) {
                    dst.q_w(to, k) = src.q_w(from, k);
                    dst.k_w(to, k) = src.k_w(from, k);
                    dst.v_w(to, k) = src.v_w(from, k);
                    dst.o_w(k, to) = src.o_w(k, from);
                }
                dst.q_b[to] = src.q_b[from];
                dst.k_b[to] = src.k_b[from];
                dst.v_b[to] = src.v_b[from];
            }
    }
    const Tensor x = random_input(4, 5, 9);
    const auto a = star::forward_with_trace(w, x);
    const auto b = star::forward_with_trace(p, x);
    for (std::size_t l = 0; l < a.features.size(); ++l)
        for (std::size_t i = 0; i < a.features[l].size(); ++i) EXPECT_NEAR(a.features[l][i], b.features[l][i], 1e-9);
    for (std::size_t l = 0; l < c.num_layers; ++l)
        for (std::size_t h = 0; h < c.num_heads; ++h)
            for (std::size_t i = 0; i < a.attn_maps[l][h].size(); ++i)
                EXPECT_NEAR(b.attn_maps[l][h][i], a.attn_maps[l][perm[h]][i], 1e-12);
}

TEST(ForwardDiff, ValuesBitIdenticalToPlainPath) {
    for (bool post_ln : {false, true}) {
        const auto w = star::init_weights(small_config(post_ln));
        const Tensor x = random_input(4, 6, 10);
        star::ad::Graph g;
        const auto trace = star::forward_diff(w.config, star::as_leaves(g, w.params), g.constant(x));
        const auto plain = star::forward_with_trace(w, x);
        const auto diff = star::values(trace);
        EXPECT_EQ(diff.features, plain.features);
        EXPECT_EQ(diff.attn_maps, plain.attn_maps);
    }
}

TEST(ForwardDiff, InputProjectionGradientMatchesFiniteDifference) {
    for (bool post_ln : {false, true}) {
        ModelWeights w = star::init_weights(small_config(post_ln));
        const Tensor x = random_input(4, 5, 11);
        star::Rng rng(12);
        Tensor weights({6, 5});
        for (double& v : weights.data()) v = rng.uniform(-1.0, 1.0);

        // Weighted sum of the last feature matrix (a plain sum of a
        // LayerNorm output has an identically zero gradient).
        auto objective = [&](const ModelWeights& m) {
            return star::sum(star::mul(star::forward_with_trace(m, x).features.back(), weights)).item();
        };
        star::ad::Graph g;
        const auto leaves = star::as_leaves(g, w.params);
        const auto trace = star::forward_diff(w.config, leaves, g.constant(x));
        g.backward(star::ad::sum(star::ad::mul(trace.features.back(), g.constant(weights))));

        Tensor* targets[] = {&w.params.in_w, &w.params.in_b};
        const auto numeric = star::oracle::numeric_gradient([&] { return objective(w); }, targets);
        const auto cmp_w = star::oracle::compare_gradients(leaves.in_w.grad(), numeric[0]);
        const auto cmp_b = star::oracle::compare_gradients(leaves.in_b.grad(), numeric[1]);
        EXPECT_TRUE(cmp_w.ok()) << cmp_w.max_rel_error;
        EXPECT_TRUE(cmp_b.ok()) << cmp_b.max_rel_error;

        // Plain sum: analytic and numeric agree as well.
        star::ad::Graph g2;
        const auto leaves2 = star::as_leaves(g2, w.params);
        g2.backward(star::ad::sum(star::forward_diff(w.config, leaves2, g2.constant(x)).features.back()));
        const auto numeric_sum = star::oracle::numeric_gradient(
            [&] { return star::sum(star::forward_with_trace(w, x).features.back()).item(); }, targets);
        EXPECT_TRUE(star::oracle::compare_gradients(leaves2.in_w.grad(), numeric_sum[0]).ok());
    }
}

TEST(ForwardDiff, EveryParameterReceivesGradient) {
    for (bool post_ln : {false, true}) {
        const auto w = star::init_weights(small_config(post_ln));
        star::ad::Graph g;
        const auto leaves = star::as_leaves(g, w.params);
        const auto trace = star::forward_diff(w.config, leaves, g.constant(random_input(4, 5, 13)));
        star::Rng rng(14);
        Tensor weights({6, 5});
        for (double& v : weights.data()) v = rng.uniform(-1.0, 1.0);
        g.backward(star::ad::sum(star::ad::mul(trace.features.back(), g.constant(weights))));
        leaves.for_each([](const std::string& name, star::ParamKind, const star::ad::Var& v) {
            double mx = 0.0;
            for (double x : v.grad().data()) mx = std::max(mx, std::abs(x));
            EXPECT_GT(mx, 0.0) << name;
        });
    }
}

TEST(Checkpoint, RoundTripGivesBitIdenticalForward) {
    const auto dir = std::filesystem::temp_directory_path() / "star_ckpt_test";
    std::filesystem::remove_all(dir);
    const auto w = star::init_weights(small_config(true));
    star::save_checkpoint(dir, w);
    const auto loaded = star::load_checkpoint(dir);
    EXPECT_EQ(loaded.config, w.config);
    const Tensor x = random_input(4, 6, 15);
    EXPECT_EQ(star::forward_with_trace(loaded, x).features, star::forward_with_trace(w, x).features);

    // Manifest naming and parameter coverage.
    std::ifstream f(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(f);
    EXPECT_TRUE(manifest["parameters"].contains("layer.1.q_proj.weight"));
    EXPECT_TRUE(manifest["parameters"].contains("encoder_norm.bias"));
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ManifestMismatchRejected) {
    const auto dir = std::filesystem::temp_directory_path() / "star_ckpt_mismatch";
    std::filesystem::remove_all(dir);
    star::save_checkpoint(dir, star::init_weights(small_config()));
    std::ifstream in(dir / "manifest.json");
    auto manifest = nlohmann::json::parse(in);
    in.close();
    manifest["config"]["width"] = 8;
    std::ofstream(dir / "manifest.json") << manifest.dump();
    EXPECT_THROW(star::load_checkpoint(dir), star::ConfigError);
    EXPECT_THROW(star::load_checkpoint(dir / "nope"), star::IoError);
    std::filesystem::remove_all(dir);
}
