#pragma once

// Blowup detection: static splice counting, synthesized self-nestings,
// measured growth curves, and invocation-count profiles over whole corpora.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "macroblow/expander.hpp"
#include "macroblow/sexpr.hpp"

namespace macroblow {

// Static pre-screen; measurement below is the authoritative signal.
inline std::int64_t count_body_splices(const MacroDef& def) { return def.splice_count; }

namespace detail {

struct ParamRole {
    bool bound_as_variable = false;
    bool used_numerically = false;
};

inline void scan_param_role(const SExpr& t, const std::string& param, ParamRole& role) {
    if (!t.is_cons())
        return;
    if (t.marker_payload(kQuote))
        return;
    auto is_param_unquote = [&](const SExpr& e) {
        auto u = e.marker_payload(kUnquote);
        return u && u->is_symbol_named(param);
    };
    if (t.headed_by("let") || t.headed_by("let*")) {
        if (t.tail().is_cons()) {
            for (const auto& b : t.tail().head().elements())
                if (b.is_cons() && is_param_unquote(b.head()))
                    role.bound_as_variable = true;
        }
    }
    if (t.headed_by("flet") || t.headed_by("labels")) {
        if (t.tail().is_cons()) {
            for (const auto& d : t.tail().head().elements()) {
                auto parts = d.elements();
                if (parts.size() < 2)
                    continue;
                for (const auto& p : parts[1].elements())
                    if (is_param_unquote(p))
                        role.bound_as_variable = true;
            }
        }
    }
    if (t.headed_by("lambda") && t.tail().is_cons()) {
        for (const auto& p : t.tail().head().elements())
            if (is_param_unquote(p))
                role.bound_as_variable = true;
    }
    if ((t.headed_by("1+") || t.headed_by("1-")) && t.tail().is_cons()) {
        if (is_param_unquote(t.tail().head()))
            role.used_numerically = true;
    }
    for (const SExpr* cur = &t; cur->is_cons(); cur = &cur->tail())
        scan_param_role(cur->head(), param, role);
}

}  // namespace detail

// Builds a depth-n self-nesting of the macro, one call per level, with
// `innermost` as the deepest body. Required params are auto-filled per
// level: a fresh symbol when the template binds the param as a variable,
// the level index otherwise.
inline SExpr synthesize_nesting(const MacroDef& def, int depth, const SExpr& innermost) {
    if (depth < 1)
        throw Error(ErrorCode::UnsupportedShape, "nesting depth must be at least 1");
    std::vector<bool> symbolic(def.required_params.size(), false);
    for (std::size_t i = 0; i < def.required_params.size(); ++i) {
        detail::ParamRole role;
        detail::scan_param_role(def.template_payload, def.required_params[i], role);
        if (role.bound_as_variable && role.used_numerically)
            throw Error(ErrorCode::UnsupportedShape,
                        def.name + ": parameter " + def.required_params[i] +
                            " is both a binding target and a number");
        symbolic[i] = role.bound_as_variable;
    }
    SExpr form = innermost;
    for (int level = depth; level >= 1; --level) {
        std::vector<SExpr> call{SExpr::symbol(def.name)};
        if (def.has_required_group) {
            std::vector<SExpr> group;
            for (std::size_t i = 0; i < def.required_params.size(); ++i)
                group.push_back(symbolic[i]
                                    ? SExpr::symbol("v" + std::to_string(level))
                                    : SExpr::integer(level));
            call.push_back(SExpr::list(std::move(group)));
        }
        call.push_back(std::move(form));
        form = SExpr::list(std::move(call));
    }
    return form;
}

// Probe body for growth measurement: a dozen small forms, so that constant
// template overhead does not swamp the size ratios at shallow depths.
inline SExpr default_probe_body() {
    std::vector<SExpr> forms{SExpr::symbol("progn")};
    for (int i = 0; i < 12; ++i)
        forms.push_back(SExpr::list({SExpr::symbol("princ"), SExpr::integer(i)}));
    return SExpr::list(std::move(forms));
}

struct GrowthCurve {
    std::string macro_name;
    std::vector<std::int64_t> sizes;        // node_count per depth, depth = index + 1
    std::vector<std::int64_t> invocations;  // macro-function calls per depth
    bool truncated = false;                 // expansion cap tripped

    int depths() const { return static_cast<int>(sizes.size()); }
};

inline GrowthCurve measure_growth(const MacroDef& def, const MacroEnv& env, int max_depth,
                                  const SExpr& probe = default_probe_body(),
                                  std::int64_t invocation_cap = kDefaultExpansionCap) {
    if (max_depth < 2)
        throw Error(ErrorCode::CurveTooShort, "need at least two depths");
    GrowthCurve curve{def.name, {}, {}, false};
    for (int n = 1; n <= max_depth; ++n) {
        SExpr form = synthesize_nesting(def, n, probe);
        ExpansionStats stats;
        SExpr expanded;
        try {
            expanded = macroexpand_all(form, env, stats, invocation_cap);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::ExpansionDepthExceeded) {
                curve.truncated = true;
                break;
            }
            throw;
        }
        curve.sizes.push_back(node_count(expanded));
        curve.invocations.push_back(stats.invocations_of(def.name));
    }
    return curve;
}

enum class Growth { Exponential, Linear, Constant, Unclassified };

inline const char* growth_name(Growth g) {
    switch (g) {
    case Growth::Exponential: return "exponential";
    case Growth::Linear: return "linear";
    case Growth::Constant: return "constant";
    case Growth::Unclassified: return "unclassified";
    }
    return "unclassified";
}

struct BlowupDiagnosis {
    std::string macro_name;
    std::int64_t static_splices = 0;
    Growth classification = Growth::Unclassified;
    double fitted_base = 0.0;  // last size ratio, rounded to 2 decimals

    std::int64_t predicted_size(int depth) const {
        switch (classification) {
        case Growth::Exponential:
            return std::llround(static_cast<double>(last_size) *
                                std::pow(raw_base, depth - last_depth));
        case Growth::Linear:
            return std::llround(static_cast<double>(last_size) +
                                mean_diff * (depth - last_depth));
        case Growth::Constant:
            return last_size;
        case Growth::Unclassified:
            return 0;
        }
        return 0;
    }

    // fit parameters
    std::int64_t last_size = 0;
    int last_depth = 0;
    double raw_base = 0.0;
    double mean_diff = 0.0;
};

// Exponential: the last three size ratios stay >= threshold and converge
// monotonically (template overhead makes real curves approach the base from
// above, so either monotone direction counts). Linear: first differences
// within 10% of their mean. Constant: flat sizes.
inline BlowupDiagnosis classify(const GrowthCurve& curve, std::int64_t static_splices = 0,
                                double exponential_threshold = 1.5) {
    if (curve.sizes.size() < 3)
        throw Error(ErrorCode::CurveTooShort,
                    curve.macro_name + ": " + std::to_string(curve.sizes.size()) +
                        " usable depths, need 3");
    BlowupDiagnosis diag;
    diag.macro_name = curve.macro_name;
    diag.static_splices = static_splices;
    diag.last_size = curve.sizes.back();
    diag.last_depth = curve.depths();

    std::vector<double> ratios;
    std::vector<double> diffs;
    for (std::size_t i = 1; i < curve.sizes.size(); ++i) {
        ratios.push_back(static_cast<double>(curve.sizes[i]) /
                         static_cast<double>(curve.sizes[i - 1]));
        diffs.push_back(static_cast<double>(curve.sizes[i] - curve.sizes[i - 1]));
    }
    diag.raw_base = ratios.back();
    diag.fitted_base = std::round(ratios.back() * 100.0) / 100.0;

    const std::size_t window = std::min<std::size_t>(3, ratios.size());
    const double eps = 0.02;
    bool all_big = true, non_inc = true, non_dec = true;
    for (std::size_t i = ratios.size() - window; i < ratios.size(); ++i) {
        if (ratios[i] < exponential_threshold)
            all_big = false;
        if (i > ratios.size() - window) {
            if (ratios[i] > ratios[i - 1] + eps)
                non_inc = false;
            if (ratios[i] < ratios[i - 1] - eps)
                non_dec = false;
        }
    }
    if (all_big && (non_inc || non_dec)) {
        diag.classification = Growth::Exponential;
        return diag;
    }

    double mean = 0.0;
    for (double d : diffs)
        mean += d;
    mean /= static_cast<double>(diffs.size());
    diag.mean_diff = mean;

    bool flat = true;
    for (double d : diffs)
        if (d != 0.0)
            flat = false;
    if (flat) {
        diag.classification = Growth::Constant;
        return diag;
    }
    if (mean > 0.0) {
        bool bounded = true;
        for (double d : diffs)
            if (std::abs(d - mean) > 0.1 * mean)
                bounded = false;
        if (bounded) {
            diag.classification = Growth::Linear;
            return diag;
        }
    }
    diag.classification = Growth::Unclassified;
    return diag;
}

inline BlowupDiagnosis diagnose(const MacroDef& def, const MacroEnv& env, int max_depth = 6) {
    return classify(measure_growth(def, env, max_depth), count_body_splices(def));
}

struct CorpusProfile {
    struct FileEntry {
        std::string name;
        std::size_t toplevel_forms = 0;
        ExpansionStats stats;
    };
    std::vector<FileEntry> files;
    ExpansionStats aggregate;
};

// Registers every defmacro and fully expands every other toplevel form,
// accumulating invocation counts per file and in aggregate.
inline CorpusProfile profile_corpus(const std::vector<std::pair<std::string, std::string>>& files,
                                    MacroEnv& env,
                                    std::int64_t invocation_cap = kDefaultExpansionCap) {
    CorpusProfile profile;
    int file_id = 0;
    for (const auto& [name, text] : files) {
        CorpusProfile::FileEntry entry;
        entry.name = name;
        auto forms = parse(text, file_id++);
        entry.toplevel_forms = forms.size();
        for (const auto& top : forms) {
            if (top.form.headed_by("defmacro")) {
                define_macro(top, env);
                continue;
            }
            macroexpand_all(top.form, env, entry.stats, invocation_cap);
        }
        profile.aggregate.merge(entry.stats);
        profile.files.push_back(std::move(entry));
    }
    return profile;
}

struct RatioReport {
    double ratio = 0.0;
    double depth_estimate = 0.0;  // log_base(ratio)
};

inline RatioReport ratio_report(std::int64_t before, std::int64_t after, double base) {
    if (after == 0)
        throw Error(ErrorCode::DivisionByZero, "comparison baseline is zero");
    RatioReport r;
    r.ratio = static_cast<double>(before) / static_cast<double>(after);
    r.depth_estimate = std::log(r.ratio) / std::log(base);
    return r;
}

struct ProfileComparison {
    RatioReport invocations;
    RatioReport nodes;
};

inline ProfileComparison compare_profiles(const CorpusProfile& before, const CorpusProfile& after,
                                          double base = 2.0) {
    ProfileComparison cmp;
    cmp.invocations = ratio_report(before.aggregate.total_invocations(),
                                   after.aggregate.total_invocations(), base);
    cmp.nodes = ratio_report(before.aggregate.nodes_after, after.aggregate.nodes_after, base);
    return cmp;
}

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

}  // namespace macroblow
