#pragma once

// Backward-vs-finite-difference check of the distillation objectives with
// respect to every student parameter.

#include <string>
#include <vector>

#include "json.hpp"
#include "star/model.hpp"
#include "star/oracle.hpp"
#include "star/starloss.hpp"

namespace star {

struct TermGradCheck {
    std::string term;
    oracle::GradientComparison cmp;
};

struct GradCheckReport {
    std::vector<TermGradCheck> terms;
    std::size_t parameters = 0;

    bool ok() const {
        for (const auto& t : terms)
            if (!t.cmp.ok()) return false;
        return !terms.empty();
    }

    nlohmann::json to_json() const {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& t : terms)
            list.push_back({{"term", t.term},
                            {"coordinates", t.cmp.count},
                            {"failures", t.cmp.failures},
                            {"max_abs_error", t.cmp.max_abs_error},
                            {"max_rel_error", t.cmp.max_rel_error},
                            {"ok", t.cmp.ok()}});
        return {{"ok", ok()}, {"parameters", parameters}, {"terms", list}};
    }
};

/// One config per objective in isolation, plus all three combined.
inline std::vector<std::pair<std::string, StarLossConfig>> grad_check_objectives(const StarLossConfig& base = {}) {
    auto only = [&base](bool a, bool lw, bool il) {
        StarLossConfig c = base;
        c.avg_attn = a;
        c.layer_wise = lw;
        c.intra_layer = il;
        return c;
    };
    return {{"avg_attn", only(true, false, false)},
            {"layer_wise", only(false, true, false)},
            {"intra_layer", only(false, false, true)},
            {"combined", only(true, true, true)}};
}

inline oracle::GradientComparison check_objective(const ModelWeights& teacher, ModelWeights student,
                                                  const StarLossConfig& loss, const Tensor& input,
                                                  double rel_tol = 1e-4, double abs_tol = 1e-7) {
    const ForwardTrace teacher_trace = forward_with_trace(teacher, input);

    ad::Graph g;
    const auto leaves = as_leaves(g, student.params);
    const auto terms = star_loss_terms(loss, lift(g, teacher_trace), forward_diff(student.config, leaves, g.constant(input)));
    g.backward(terms.total);
    std::vector<Tensor> analytic;
    leaves.for_each([&analytic](const std::string&, ParamKind, const ad::Var& v) { analytic.push_back(v.grad()); });

    std::vector<Tensor*> ptrs;
    student.params.for_each([&ptrs](const std::string&, ParamKind, Tensor& t) { ptrs.push_back(&t); });
    const auto numeric = oracle::numeric_gradient(
        [&] { return star_loss(loss, teacher_trace, forward_with_trace(student, input)).total; }, ptrs);

    oracle::GradientComparison cmp;
    for (std::size_t i = 0; i < analytic.size(); ++i)
        cmp = oracle::merge(cmp, oracle::compare_gradients(analytic[i], numeric[i], rel_tol, abs_tol));
    return cmp;
}

/// Defaults to plain sums (no normalization) so gradients are not scaled
/// down into the absolute-tolerance band.
inline GradCheckReport check_student_gradients(const ModelWeights& teacher, const ModelWeights& student,
                                               const Tensor& input,
                                               const StarLossConfig& base = StarLossConfig{}.literal()) {
    GradCheckReport r;
    r.parameters = student.parameter_count();
    for (const auto& [name, cfg] : grad_check_objectives(base))
        r.terms.push_back({name, check_objective(teacher, student, cfg, input)});
    return r;
}

}  // namespace star
