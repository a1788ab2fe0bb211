#pragma once

// `star` command line. Machine-readable output (one JSON document) goes to
// `out`; diagnostics and help go to `err`.
//
// Exit codes: 0 ok, 1 usage or config error, 2 numeric failure, 3 I/O error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "star/checkpoint.hpp"
#include "star/distill.hpp"
#include "star/gradcheck.hpp"
#include "star/oracle.hpp"
#include "star/starloss.hpp"
#include "star/tensor_io.hpp"

namespace star::cli {

enum Exit : int { ok = 0, usage = 1, numeric = 2, io_error = 3 };

namespace detail {

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal();
    return t;
}

// Best of `reps` timings, in milliseconds.
template <class Fn>
double time_ms(Fn&& fn, int reps) {
    double best = 0.0;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (r == 0 || ms < best) best = ms;
    }
    return best;
}

}  // namespace detail

struct DistillArgs {
    std::string config, out;
};

inline int cmd_distill(const DistillArgs& a, std::ostream& out, std::ostream& err) {
    DistillConfig cfg = parse_distill_config(detail::read_json(a.config));
    if (!a.out.empty()) cfg.out_dir = a.out;
    if (cfg.out_dir.empty()) throw ConfigError("no output directory: set out_dir in the config or pass --out");
    const TrainResult r = train(cfg);
    err << "distill: " << cfg.steps << " steps, loss " << r.initial.total << " -> " << r.final.total << ", outputs in "
        << cfg.out_dir.string() << "\n";
    out << r.final.to_json().dump() << "\n";
    return ok;
}

struct LossesArgs {
    std::string teacher, student, input, loss_config;
    bool paper_literal = false;
};

inline int cmd_losses(const LossesArgs& a, std::ostream& out, std::ostream&) {
    const ModelWeights teacher = load_checkpoint(a.teacher);
    const ModelWeights student = load_checkpoint(a.student);
    const Tensor input = io::load(a.input);
    StarLossConfig cfg;
    if (!a.loss_config.empty()) cfg = detail::read_json(a.loss_config).get<StarLossConfig>();
    if (a.paper_literal) cfg = cfg.literal();
    const LossBreakdown b = star_loss(cfg, forward_with_trace(teacher, input), forward_with_trace(student, input));
    out << b.to_json().dump() << "\n";
    return ok;
}

struct GradCheckArgs {
    std::uint64_t seed = 0;
};

inline int cmd_grad_check(const GradCheckArgs& a, std::ostream& out, std::ostream& err) {
    const ModelWeights teacher = init_weights({2, 8, 2, 16, 4, a.seed, false});
    const ModelWeights student = init_weights({2, 6, 2, 8, 4, a.seed + 1, false});
    const Tensor input = detail::random_tensor({4, 5}, a.seed + 2);
    const GradCheckReport r = check_student_gradients(teacher, student, input);
    nlohmann::json j = r.to_json();
    j["seed"] = a.seed;
    out << j.dump() << "\n";
    if (!r.ok()) {
        err << "grad-check: backward disagrees with finite differences\n";
        return numeric;
    }
    return ok;
}

struct TraceArgs {
    std::string ckpt, input, out;
};

inline int cmd_trace(const TraceArgs& a, std::ostream& out, std::ostream&) {
    const ModelWeights w = load_checkpoint(a.ckpt);
    const ForwardTrace t = forward_with_trace(w, io::load(a.input));
    const std::filesystem::path dir = a.out;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json features = nlohmann::json::array(), maps = nlohmann::json::array();
    for (std::size_t l = 0; l < t.features.size(); ++l) {
        const std::string name = "feature_" + std::to_string(l) + ".star";
        io::save(dir / name, t.features[l]);
        features.push_back(name);
    }
    for (std::size_t l = 0; l < t.num_layers(); ++l) {
        const std::string name = "attn_avg_" + std::to_string(l + 1) + ".star";
        io::save(dir / name, avg_attention(t.attn_maps[l]));
        maps.push_back(name);
    }
    out << nlohmann::json{{"num_layers", t.num_layers()}, {"seq_len", t.seq_len}, {"features", features}, {"attn_avg", maps}}
               .dump()
        << "\n";
    return ok;
}

struct GenDataArgs {
    std::string config, out;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out, std::ostream&) {
    const SyntheticConfig cfg = detail::read_json(a.config).get<SyntheticConfig>();
    const auto corpus = gen_synthetic(cfg);
    const std::filesystem::path dir = a.out;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::ostringstream name;
        name << "seq_" << std::setw(5) << std::setfill('0') << i << ".star";
        io::save(dir / name.str(), corpus[i]);
        files.push_back(name.str());
    }
    out << nlohmann::json{{"count", corpus.size()}, {"shape", {cfg.input_dim, cfg.seq_len}}, {"files", files}}.dump()
        << "\n";
    return ok;
}

struct BenchArgs {
    std::vector<std::size_t> sizes{64, 128};
    std::size_t channels = 64;
    int reps = 5;
};

inline int cmd_bench(const BenchArgs& a, std::ostream& out, std::ostream&) {
    nlohmann::json results = nlohmann::json::array();
    double sink = 0.0;
    for (std::size_t n : a.sizes) {
        if (n == 0) throw ConfigError("bench: sizes must be positive");
        const Tensor f = detail::random_tensor({a.channels, n}, n);
        const Tensor k = detail::random_tensor({a.channels, n}, n + 1);
        const double tgm_naive = detail::time_ms([&] { sink += oracle::naive_tgm(f)[0]; }, a.reps);
        const double tgm_fast = detail::time_ms([&] { sink += tgm(f, TgmNormalization::none)[0]; }, a.reps);
        const double att_naive = detail::time_ms([&] { sink += oracle::naive_attention_map(f, k)[0]; }, a.reps);
        const double att_fast = detail::time_ms([&] { sink += attention_map(f, k)[0]; }, a.reps);
        results.push_back({{"N", n}, {"kernel", "tgm"}, {"naive_ms", tgm_naive}, {"fast_ms", tgm_fast},
                           {"ratio", tgm_naive / tgm_fast}});
        results.push_back({{"N", n}, {"kernel", "attention"}, {"naive_ms", att_naive}, {"fast_ms", att_fast},
                           {"ratio", att_naive / att_fast}});
    }
    out << nlohmann::json{{"channels", a.channels}, {"reps", a.reps}, {"results", results}, {"checksum", sink}}.dump()
        << "\n";
    return ok;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Temporal-relation distillation toolkit", "star"};
    app.require_subcommand(1);

    DistillArgs distill_args;
    auto* distill = app.add_subcommand("distill", "Train a student against a teacher from a JSON config");
    distill->add_option("--config", distill_args.config, "Run config (JSON)")->required();
    distill->add_option("--out", distill_args.out, "Output directory (overrides out_dir)");

    LossesArgs losses_args;
    auto* losses = app.add_subcommand("losses", "Evaluate the loss terms for a teacher/student checkpoint pair");
    losses->add_option("--teacher", losses_args.teacher, "Teacher checkpoint directory")->required();
    losses->add_option("--student", losses_args.student, "Student checkpoint directory")->required();
    losses->add_option("--input", losses_args.input, "Input sequence (STAR tensor, input_dim x N)")->required();
    losses->add_option("--loss-config", losses_args.loss_config, "Loss config (JSON)");
    losses->add_flag("--paper-literal", losses_args.paper_literal, "Turn off all normalizations (plain sums)");

    GradCheckArgs grad_args;
    auto* grad = app.add_subcommand("grad-check", "Compare backward gradients against finite differences");
    grad->add_option("--seed", grad_args.seed, "Seed for models and input");

    TraceArgs trace_args;
    auto* trace = app.add_subcommand("trace", "Dump per-layer features and head-averaged attention maps");
    trace->add_option("--ckpt", trace_args.ckpt, "Checkpoint directory")->required();
    trace->add_option("--input", trace_args.input, "Input sequence (STAR tensor)")->required();
    trace->add_option("--out", trace_args.out, "Output directory")->required();

    GenDataArgs gen_args;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus as STAR tensor files");
    gen->add_option("--config", gen_args.config, "Synthetic data config (JSON)")->required();
    gen->add_option("--out", gen_args.out, "Output directory")->required();

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "Time the Gram and attention kernels against naive loops");
    bench->add_option("--sizes", bench_args.sizes, "Sequence lengths")->delimiter(',');
    bench->add_option("--channels", bench_args.channels, "Channel count");
    bench->add_option("--reps", bench_args.reps, "Repetitions (best time is kept)")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return ok;
    } catch (const CLI::CallForAllHelp&) {
        err << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return usage;
    }

    try {
        if (*distill) return cmd_distill(distill_args, out, err);
        if (*losses) return cmd_losses(losses_args, out, err);
        if (*grad) return cmd_grad_check(grad_args, out, err);
        if (*trace) return cmd_trace(trace_args, out, err);
        if (*gen) return cmd_gen_data(gen_args, out, err);
        if (*bench) return cmd_bench(bench_args, out, err);
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return numeric;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return io_error;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return usage;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return usage;
    }
    return usage;
}

}  // namespace star::cli
