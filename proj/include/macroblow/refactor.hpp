#pragma once

// Rewrites exponential macros (two or more body splices) into linear ones.
//
// Strategy FLET hoists the body into one local function and calls it from
// the original branching structure; lexical context needed by the body
// moves into the function's lambda list, dynamic context stays where the
// branches established it.
//
// Strategy PROGV unifies the branches instead: normalize branching to ifs,
// unify the per-branch binding rows (self-bindings as placeholders for
// specials a branch leaves alone), merge everything into one binder with
// the condition factored into the value forms, then re-establish the
// conditionally-rebound specials through progv so an untouched special is
// never shadowed. The step-3 intermediate (merged-let) is kept available
// because it is the canonical broken rewrite: the self-binding shadows the
// live cell and mutations are lost on scope exit.

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "macroblow/analyzer.hpp"
#include "macroblow/expander.hpp"
#include "macroblow/interpreter.hpp"
#include "macroblow/sexpr.hpp"

namespace macroblow {

enum class Strategy { Flet, Progv, MergedLet, Auto };

inline const char* strategy_name(Strategy s) {
    switch (s) {
    case Strategy::Flet: return "flet";
    case Strategy::Progv: return "progv";
    case Strategy::MergedLet: return "merged-let";
    case Strategy::Auto: return "auto";
    }
    return "auto";
}

struct Binding {
    SExpr var;    // (unquote param) or a plain symbol
    SExpr value;
};

struct BranchArm {
    std::vector<Binding> bindings;   // from the arm's single let, possibly none
    bool sequential = false;         // bound via let*
    std::vector<SExpr> pre_forms;    // before the body splice
    std::vector<SExpr> post_forms;   // after the body splice
    bool has_splice = false;
};

// Flattened branch structure: arm i (i < conditions.size()) is selected by
// the first true condition, the last arm is the fallback. A non-branching
// template is a single arm with no conditions.
struct BranchTree {
    std::vector<SExpr> conditions;
    std::vector<BranchArm> arms;
};

struct BindingRow {
    SExpr var;
    bool is_special = false;     // earmuffed *name*
    std::vector<SExpr> values;   // value form per arm
    std::vector<bool> altered;   // true where the arm genuinely rebinds
};

namespace detail {

inline std::int64_t splice_count_in(const SExpr& form, const std::string& body_param) {
    if (!form.is_cons())
        return 0;
    if (form.marker_payload(kQuote))
        return 0;
    if (auto s = form.marker_payload(kUnquoteSplicing))
        return s->is_symbol_named(body_param) ? 1 : 0;
    std::int64_t n = 0;
    for (const SExpr* cur = &form; cur->is_cons(); cur = &cur->tail())
        n += splice_count_in(cur->head(), body_param);
    return n;
}

inline bool is_special_var(const SExpr& var) {
    return var.is_symbol() && var.symbol_name().size() >= 3 && var.symbol_name().front() == '*' &&
           var.symbol_name().back() == '*';
}

inline bool is_direct_splice(const SExpr& form, const std::string& body_param) {
    auto s = form.marker_payload(kUnquoteSplicing);
    return s && s->is_symbol_named(body_param);
}

inline bool contains_form(const SExpr& haystack, const SExpr& needle) {
    if (haystack == needle)
        return true;
    if (!haystack.is_cons() || haystack.marker_payload(kQuote))
        return false;
    for (const SExpr* cur = &haystack; cur->is_cons(); cur = &cur->tail())
        if (contains_form(cur->head(), needle))
            return true;
    return false;
}

class Normalizer {
public:
    Normalizer(const SExpr& payload, std::string body_param)
        : payload_(payload), bp_(std::move(body_param)) {}

    BranchTree run() {
        branch(payload_);
        std::int64_t covered = 0;
        for (const auto& arm : tree_.arms)
            covered += arm.has_splice ? 1 : 0;
        if (covered != splice_count_in(payload_, bp_))
            throw Error(ErrorCode::UnsupportedConstruct,
                        "body splice in a position the rewriter does not understand");
        return std::move(tree_);
    }

private:
    void branch(const SExpr& form) {
        if (form.headed_by("if")) {
            auto parts = form.tail().elements();
            if (parts.size() < 2 || parts.size() > 3)
                throw Error(ErrorCode::UnsupportedConstruct, "malformed if: " + print(form));
            require_clean(parts[0]);
            tree_.conditions.push_back(parts[0]);
            arm(parts[1]);
            else_chain(parts.size() == 3 ? parts[2] : SExpr::nil());
            return;
        }
        if (form.headed_by("when") || form.headed_by("unless")) {
            if (!form.tail().is_cons())
                throw Error(ErrorCode::UnsupportedConstruct, "malformed " + print(form));
            SExpr cond = form.tail().head();
            require_clean(cond);
            auto body = form.tail().tail().elements();
            tree_.conditions.push_back(cond);
            if (form.headed_by("when")) {
                arm_from_sequence(body);
                arm(SExpr::nil());
            } else {
                arm(SExpr::nil());
                arm_from_sequence(body);
            }
            return;
        }
        if (form.headed_by("cond")) {
            bool saw_default = false;
            for (const auto& clause : form.tail().elements()) {
                if (saw_default)
                    throw Error(ErrorCode::UnsupportedConstruct,
                                "cond clause after the default clause");
                if (!clause.is_cons())
                    throw Error(ErrorCode::UnsupportedConstruct,
                                "malformed cond clause: " + print(clause));
                auto body = clause.tail().elements();
                if (clause.head().is_symbol_named("t")) {
                    saw_default = true;
                    arm_from_sequence(body);
                } else {
                    require_clean(clause.head());
                    tree_.conditions.push_back(clause.head());
                    arm_from_sequence(body);
                }
            }
            if (!saw_default)
                arm(SExpr::nil());
            return;
        }
        arm(form);  // non-branching template: single arm
    }

    // Only the else position may continue the branch chain (cond shape).
    void else_chain(const SExpr& form) {
        bool branching = form.headed_by("if") || form.headed_by("when") ||
                         form.headed_by("unless") || form.headed_by("cond");
        if (branching && splice_count_in(form, bp_) > 0) {
            branch(form);
            return;
        }
        arm(form);
    }

    void arm(const SExpr& form) {
        if (form.is_nil()) {
            tree_.arms.push_back(BranchArm{});
            return;
        }
        if (form.headed_by("let") || form.headed_by("let*")) {
            if (!form.tail().is_cons())
                throw Error(ErrorCode::UnsupportedConstruct, "malformed let: " + print(form));
            BranchArm a;
            a.sequential = form.headed_by("let*");
            a.bindings = parse_bindings(form.tail().head());
            fill_leaf(a, form.tail().tail().elements());
            tree_.arms.push_back(std::move(a));
            return;
        }
        if (form.headed_by("progn")) {
            BranchArm a;
            fill_leaf(a, form.tail().elements());
            tree_.arms.push_back(std::move(a));
            return;
        }
        if (form.headed_by("if") || form.headed_by("when") || form.headed_by("unless") ||
            form.headed_by("cond")) {
            if (splice_count_in(form, bp_) > 0)
                throw Error(ErrorCode::UnsupportedConstruct,
                            "branching nested inside a branch arm: " + print(form));
        }
        BranchArm a;
        fill_leaf(a, {form});
        tree_.arms.push_back(std::move(a));
    }

    void arm_from_sequence(const std::vector<SExpr>& forms) {
        if (forms.size() == 1) {
            arm(forms[0]);
            return;
        }
        BranchArm a;
        fill_leaf(a, forms);
        tree_.arms.push_back(std::move(a));
    }

    void fill_leaf(BranchArm& a, const std::vector<SExpr>& forms) {
        int splice_at = -1;
        for (std::size_t i = 0; i < forms.size(); ++i) {
            if (is_direct_splice(forms[i], bp_)) {
                if (splice_at >= 0)
                    throw Error(ErrorCode::UnsupportedConstruct,
                                "more than one body splice in a single branch");
                splice_at = static_cast<int>(i);
            } else {
                require_clean(forms[i]);
            }
        }
        if (splice_at < 0) {
            a.pre_forms = forms;
            a.has_splice = false;
            return;
        }
        a.has_splice = true;
        a.pre_forms.assign(forms.begin(), forms.begin() + splice_at);
        a.post_forms.assign(forms.begin() + splice_at + 1, forms.end());
    }

    std::vector<Binding> parse_bindings(const SExpr& binding_list) {
        if (!binding_list.is_list())
            throw Error(ErrorCode::UnsupportedConstruct,
                        "malformed binding list: " + print(binding_list));
        std::vector<Binding> out;
        std::set<std::string> seen;
        for (const auto& b : binding_list.elements()) {
            Binding binding;
            if (b.is_symbol() || b.marker_payload(kUnquote)) {
                binding.var = b;
                binding.value = SExpr::nil();
            } else if (b.is_cons() &&
                       (b.tail().is_nil() ||
                        (b.tail().is_cons() && b.tail().tail().is_nil()))) {
                binding.var = b.head();
                binding.value = b.tail().is_nil() ? SExpr::nil() : b.tail().head();
            } else {
                throw Error(ErrorCode::UnsupportedConstruct, "malformed binding: " + print(b));
            }
            if (!binding.var.is_symbol() && !binding.var.marker_payload(kUnquote))
                throw Error(ErrorCode::UnsupportedConstruct,
                            "binding target must be a symbol or ,param: " + print(binding.var));
            require_clean(binding.value);
            if (!seen.insert(print(binding.var)).second)
                throw Error(ErrorCode::UnsupportedConstruct,
                            "duplicate binding of " + print(binding.var));
            out.push_back(std::move(binding));
        }
        return out;
    }

    void require_clean(const SExpr& form) {
        if (splice_count_in(form, bp_) > 0)
            throw Error(ErrorCode::UnsupportedConstruct,
                        "body splice in a position the rewriter does not understand: " +
                            print(form));
    }

    const SExpr& payload_;
    std::string bp_;
    BranchTree tree_;
};

}  // namespace detail

// Step 1: rewrite when/unless/cond into a flat if-chain over binder arms.
inline BranchTree normalize_branches(const SExpr& template_payload,
                                     const std::string& body_param) {
    return detail::Normalizer(template_payload, body_param).run();
}

inline BranchTree normalize_branches(const MacroDef& def) {
    return normalize_branches(def.template_payload, def.body_param);
}

// Step 2: one row per bound variable, covering every arm in source order of
// first appearance. A special missing from an arm gets the (var var)
// self-binding placeholder with altered=false. A lexical variable missing
// from an arm that splices the body means the body would run with the
// variable unbound there, so the macro is rejected.
inline std::vector<BindingRow> unify_bindings(const BranchTree& tree,
                                              bool require_splice_everywhere = true) {
    if (require_splice_everywhere)
        for (const auto& arm : tree.arms)
            if (!arm.has_splice)
                throw Error(ErrorCode::UnsupportedConstruct,
                            "a branch without the body splice cannot be merged");
    for (const auto& arm : tree.arms)
        if (arm.sequential && arm.bindings.size() > 1)
            throw Error(ErrorCode::UnsupportedConstruct,
                        "sequential (let*) bindings cannot be merged");

    std::vector<BindingRow> rows;
    std::map<std::string, std::size_t> index;
    const std::size_t n = tree.arms.size();
    for (const auto& arm : tree.arms) {
        for (const auto& b : arm.bindings) {
            std::string key = print(b.var);
            if (index.count(key))
                continue;
            index.emplace(key, rows.size());
            BindingRow row;
            row.var = b.var;
            row.is_special = detail::is_special_var(b.var);
            row.values.assign(n, SExpr::nil());
            row.altered.assign(n, false);
            rows.push_back(std::move(row));
        }
    }
    for (std::size_t ai = 0; ai < n; ++ai) {
        for (const auto& b : tree.arms[ai].bindings) {
            auto& row = rows[index.at(print(b.var))];
            row.values[ai] = b.value;
            row.altered[ai] = true;
        }
    }
    for (auto& row : rows) {
        for (std::size_t ai = 0; ai < n; ++ai) {
            if (row.altered[ai])
                continue;
            if (row.is_special) {
                row.values[ai] = row.var;  // dummy (var var): leave it alone
            } else if (tree.arms[ai].has_splice) {
                throw Error(ErrorCode::DefectiveMacro,
                            print(row.var) + " is bound in only some branches");
            }
        }
    }
    return rows;
}

namespace detail {

inline SExpr progn_wrap(const std::vector<SExpr>& forms) {
    if (forms.empty())
        return SExpr::nil();
    if (forms.size() == 1)
        return forms[0];
    std::vector<SExpr> out{SExpr::symbol("progn")};
    out.insert(out.end(), forms.begin(), forms.end());
    return SExpr::list(std::move(out));
}

inline SExpr make_if(SExpr cond, SExpr then_form, SExpr else_form) {
    return SExpr::list({SExpr::symbol("if"), std::move(cond), std::move(then_form),
                        std::move(else_form)});
}

inline SExpr splice_site(const std::string& body_param) {
    return SExpr::list({SExpr::symbol(kUnquoteSplicing), SExpr::symbol(body_param)});
}

// (progn ,@body): the splice needs an enclosing list to splice into, and
// single-form contexts need exactly one form however many the caller wrote.
inline SExpr progn_splice(const std::string& body_param) {
    return SExpr::list({SExpr::symbol("progn"), splice_site(body_param)});
}

struct UnifiedEmitter {
    const BranchTree& tree;
    const std::vector<BindingRow>& rows;
    GensymSource& gensyms;
    const std::string& body_param;
    bool keep_dummies_in_let;  // step-3 intermediate instead of progv

    SExpr emit() {
        const std::size_t arms = tree.arms.size();

        // Hoist each condition into a once-evaluated variable; later
        // conditions stay guarded so evaluation order matches the original
        // chain.
        std::vector<SExpr> guards;
        std::vector<SExpr> guard_bindings;
        for (std::size_t i = 0; i < tree.conditions.size(); ++i) {
            SExpr value = tree.conditions[i];
            for (std::size_t j = i; j-- > 0;)
                value = make_if(guards[j], SExpr::nil(), value);
            SExpr g = gensyms.fresh();
            guard_bindings.push_back(SExpr::list({g, value}));
            guards.push_back(g);
        }

        auto select = [&](const std::function<SExpr(std::size_t)>& per_arm) {
            SExpr out = per_arm(arms - 1);
            for (std::size_t i = guards.size(); i-- > 0;)
                out = make_if(guards[i], per_arm(i), out);
            return out;
        };
        auto row_value = [&](const BindingRow& row) {
            bool uniform = true;
            for (std::size_t ai = 1; ai < arms; ++ai)
                if (row.values[ai] != row.values[0])
                    uniform = false;
            if (uniform)
                return row.values[0];
            return select([&](std::size_t ai) { return row.values[ai]; });
        };

        std::vector<SExpr> let_rows;
        std::vector<const BindingRow*> progv_rows;
        for (const auto& row : rows) {
            bool all_altered = true, any_altered = false;
            for (bool a : row.altered) {
                all_altered = all_altered && a;
                any_altered = any_altered || a;
            }
            if (!any_altered)
                continue;  // never genuinely bound: a no-op row vanishes
            if (!row.is_special || all_altered || keep_dummies_in_let) {
                let_rows.push_back(SExpr::list({row.var, row_value(row)}));
            } else {
                progv_rows.push_back(&row);
            }
        }

        // innermost: value-preserving body wrap, then the arm tails
        SExpr vals = gensyms.fresh();
        bool any_post = false, any_pre = false;
        for (const auto& arm : tree.arms) {
            any_post = any_post || !arm.post_forms.empty();
            any_pre = any_pre || !arm.pre_forms.empty();
        }
        SExpr values_out = SExpr::list({SExpr::symbol("values-list"), vals});
        SExpr tail = any_post
            ? select([&](std::size_t ai) {
                  const auto& post = tree.arms[ai].post_forms;
                  return post.empty() ? values_out : progn_wrap(post);
              })
            : values_out;
        SExpr mv_wrap = SExpr::list(
            {SExpr::symbol("let"),
             SExpr::list({SExpr::list(
                 {vals, SExpr::list({SExpr::symbol("multiple-value-list"),
                                     progn_splice(body_param)})})}),
             tail});

        std::vector<SExpr> core;
        if (any_pre)
            core.push_back(select(
                [&](std::size_t ai) { return progn_wrap(tree.arms[ai].pre_forms); }));
        core.push_back(mv_wrap);

        // progv forms nest in row order around the body
        for (std::size_t i = progv_rows.size(); i-- > 0;) {
            const BindingRow& row = *progv_rows[i];
            SExpr symbols = select([&](std::size_t ai) {
                return row.altered[ai]
                    ? SExpr::list({SExpr::symbol(kQuote), SExpr::list({row.var})})
                    : SExpr::nil();
            });
            std::vector<SExpr> progv{SExpr::symbol("progv"), symbols,
                                     SExpr::list({SExpr::symbol("list"), row_value(row)})};
            progv.insert(progv.end(), core.begin(), core.end());
            core = {SExpr::list(std::move(progv))};
        }
        if (!let_rows.empty()) {
            std::vector<SExpr> let_form{SExpr::symbol("let"), SExpr::list(std::move(let_rows))};
            let_form.insert(let_form.end(), core.begin(), core.end());
            core = {SExpr::list(std::move(let_form))};
        }
        if (!guard_bindings.empty()) {
            std::vector<SExpr> let_form{SExpr::symbol("let"),
                                        SExpr::list(std::move(guard_bindings))};
            let_form.insert(let_form.end(), core.begin(), core.end());
            core = {SExpr::list(std::move(let_form))};
        }
        return progn_wrap(core);
    }
};

}  // namespace detail

// Step 3: one binder, the condition factored into the value forms. Keeps
// the special self-bindings as let rows, which is exactly the rewrite that
// shadows a live special and loses mutations on exit.
inline SExpr merge_branches(const BranchTree& tree, const std::vector<BindingRow>& rows,
                            GensymSource& gensyms, const std::string& body_param) {
    return detail::UnifiedEmitter{tree, rows, gensyms, body_param, true}.emit();
}

// Step 4: specials whose rebinding depends on the branch go through progv,
// binding the variable in exactly the arms that originally bound it.
inline SExpr progv_split(const BranchTree& tree, const std::vector<BindingRow>& rows,
                         GensymSource& gensyms, const std::string& body_param) {
    return detail::UnifiedEmitter{tree, rows, gensyms, body_param, false}.emit();
}

struct RefactorOutcome {
    std::string macro_name;
    Strategy strategy = Strategy::Auto;
    bool refactored = false;
    MacroDef new_def;     // valid iff refactored
    std::string reason;   // iff not refactored
    SourceSpan span;
    std::int64_t size_before = 0;  // depth-4 probe expansion
    std::int64_t size_after = 0;
};

namespace detail {

inline std::int64_t probe_expansion_size(const MacroDef& def, int depth) {
    try {
        MacroEnv env;
        env.define(def);
        ExpansionStats stats;
        SExpr form = synthesize_nesting(def, depth, default_probe_body());
        return node_count(macroexpand_all(form, env, stats));
    } catch (const Error&) {
        return 0;  // shape the prober cannot nest; sizes just go unreported
    }
}

inline MacroDef rebuild_def(const MacroDef& original, SExpr new_payload) {
    MacroDef out = original;
    out.template_payload = std::move(new_payload);
    out.quasiquoted = true;
    out.splice_count = splice_count_in(out.template_payload, out.body_param);
    return out;
}

inline RefactorOutcome finish_outcome(const MacroDef& original, Strategy strategy,
                                      SExpr new_payload) {
    RefactorOutcome out;
    out.macro_name = original.name;
    out.strategy = strategy;
    out.span = original.span;
    out.refactored = true;
    out.new_def = rebuild_def(original, std::move(new_payload));
    out.size_before = probe_expansion_size(original, 4);
    out.size_after = probe_expansion_size(out.new_def, 4);
    return out;
}

inline RefactorOutcome refused(const MacroDef& original, Strategy strategy, std::string reason) {
    RefactorOutcome out;
    out.macro_name = original.name;
    out.strategy = strategy;
    out.span = original.span;
    out.refactored = false;
    out.reason = std::move(reason);
    out.size_before = original.splice_count >= 2 ? probe_expansion_size(original, 4) : 0;
    return out;
}

// True when a body splice sits under a template-level lexical binding, in
// which case the no-analysis fallback must not detach the body.
inline bool splice_under_lexical_binding(const SExpr& form, const std::string& bp,
                                         bool under = false) {
    if (!form.is_cons())
        return false;
    if (form.marker_payload(kQuote))
        return false;
    if (is_direct_splice(form, bp))
        return under;
    if (form.headed_by("let") || form.headed_by("let*")) {
        bool binds_lexical = false;
        if (form.tail().is_cons() && form.tail().head().is_list()) {
            for (const auto& b : form.tail().head().elements()) {
                const SExpr& var = b.is_cons() ? b.head() : b;
                if (!is_special_var(var))
                    binds_lexical = true;
            }
        }
        bool body_under = under || binds_lexical;
        const SExpr* cur = form.tail().is_cons() ? &form.tail().tail() : nullptr;
        for (; cur && cur->is_cons(); cur = &cur->tail())
            if (splice_under_lexical_binding(cur->head(), bp, body_under))
                return true;
        return false;
    }
    for (const SExpr* cur = &form; cur->is_cons(); cur = &cur->tail())
        if (splice_under_lexical_binding(cur->head(), bp, under))
            return true;
    return false;
}

inline SExpr replace_splices(const SExpr& form, const SExpr& call, const std::string& bp) {
    if (!form.is_cons() || form.marker_payload(kQuote))
        return form;
    std::vector<SExpr> out;
    for (const SExpr* cur = &form; cur->is_cons(); cur = &cur->tail()) {
        const SExpr& e = cur->head();
        out.push_back(is_direct_splice(e, bp) ? call : replace_splices(e, call, bp));
    }
    return SExpr::list(std::move(out));
}

}  // namespace detail

// FLET rewrite. With the branch structure understood, lexical rows move
// into the local function's lambda list and the arms call it; when an arm
// runs extra forms that need those lexicals, the whole arm body folds into
// the function behind a branch-selector argument. Without an analyzable
// branch structure, every splice simply becomes a call to a zero-argument
// local function, which is valid as long as no lexical binding wraps a
// splice.
inline RefactorOutcome refactor_flet(const MacroDef& def, GensymSource& gensyms) {
    if (def.splice_count < 2)
        return detail::refused(def, Strategy::Flet, "not-exponential");
    const std::string& bp = def.body_param;
    try {
        BranchTree tree = normalize_branches(def);
        auto rows = unify_bindings(tree, /*require_splice_everywhere=*/false);

        std::vector<const BindingRow*> hoisted;
        for (const auto& row : rows)
            if (!row.is_special)
                hoisted.push_back(&row);

        // folding is needed when a spliced arm's own forms read a hoisted
        // lexical; arms without the splice never call the function and keep
        // their bindings, so they never force a fold
        bool fold = false;
        for (const auto& arm : tree.arms) {
            if (!arm.has_splice)
                continue;
            for (const auto* row : hoisted) {
                for (const auto& f : arm.pre_forms)
                    fold = fold || detail::contains_form(f, row->var);
                for (const auto& f : arm.post_forms)
                    fold = fold || detail::contains_form(f, row->var);
            }
        }

        SExpr fn = gensyms.fresh();
        std::vector<SExpr> fn_params;
        for (const auto* row : hoisted)
            fn_params.push_back(row->var);

        const std::size_t arms = tree.arms.size();
        SExpr selector;
        std::vector<SExpr> fn_body;
        if (!fold) {
            fn_body.push_back(detail::splice_site(bp));
        } else {
            selector = gensyms.fresh();
            fn_params.push_back(selector);
            auto dispatch = [&](const std::function<SExpr(std::size_t)>& per_arm) {
                if (arms == 2)
                    return detail::make_if(selector, per_arm(0), per_arm(1));
                SExpr out = per_arm(arms - 1);
                for (std::size_t i = arms - 1; i-- > 0;)
                    out = detail::make_if(
                        SExpr::list({SExpr::symbol("eq"), selector,
                                     SExpr::integer(static_cast<std::int64_t>(i))}),
                        per_arm(i), out);
                return out;
            };
            bool any_pre = false, any_post = false;
            for (const auto& arm : tree.arms) {
                any_pre = any_pre || !arm.pre_forms.empty();
                any_post = any_post || !arm.post_forms.empty();
            }
            if (any_pre)
                fn_body.push_back(dispatch([&](std::size_t ai) {
                    return detail::progn_wrap(tree.arms[ai].pre_forms);
                }));
            SExpr vals = gensyms.fresh();
            SExpr values_out = SExpr::list({SExpr::symbol("values-list"), vals});
            SExpr tail = any_post
                ? dispatch([&](std::size_t ai) {
                      const auto& post = tree.arms[ai].post_forms;
                      return post.empty() ? values_out : detail::progn_wrap(post);
                  })
                : values_out;
            fn_body.push_back(SExpr::list(
                {SExpr::symbol("let"),
                 SExpr::list({SExpr::list(
                     {vals, SExpr::list({SExpr::symbol("multiple-value-list"),
                                         detail::progn_splice(bp)})})}),
                 tail}));
        }

        auto selector_value = [&](std::size_t ai) {
            if (arms == 2)
                return ai == 0 ? SExpr::symbol("t") : SExpr::nil();
            return SExpr::integer(static_cast<std::int64_t>(ai));
        };

        auto arm_form = [&](std::size_t ai) {
            const BranchArm& arm = tree.arms[ai];
            std::vector<SExpr> forms;
            std::vector<SExpr> kept;
            if (!arm.has_splice) {
                // never calls the function: the arm stays as written
                for (const auto& b : arm.bindings)
                    kept.push_back(SExpr::list({b.var, b.value}));
                forms = arm.pre_forms;
                forms.insert(forms.end(), arm.post_forms.begin(), arm.post_forms.end());
            } else {
                if (!fold)
                    for (const auto& f : arm.pre_forms)
                        forms.push_back(f);
                std::vector<SExpr> call{fn};
                for (const auto* row : hoisted)
                    call.push_back(row->values[ai]);
                if (fold)
                    call.push_back(selector_value(ai));
                forms.push_back(SExpr::list(std::move(call)));
                if (!fold)
                    for (const auto& f : arm.post_forms)
                        forms.push_back(f);
                // dynamic context stays with the original branch
                for (const auto& b : arm.bindings)
                    if (detail::is_special_var(b.var))
                        kept.push_back(SExpr::list({b.var, b.value}));
            }
            if (kept.empty())
                return detail::progn_wrap(forms);
            std::vector<SExpr> let_form{SExpr::symbol("let"), SExpr::list(std::move(kept))};
            let_form.insert(let_form.end(), forms.begin(), forms.end());
            return SExpr::list(std::move(let_form));
        };

        SExpr structure = arm_form(arms - 1);
        for (std::size_t i = tree.conditions.size(); i-- > 0;)
            structure = detail::make_if(tree.conditions[i], arm_form(i), structure);

        std::vector<SExpr> fn_def{fn, SExpr::list(std::move(fn_params))};
        fn_def.insert(fn_def.end(), fn_body.begin(), fn_body.end());
        SExpr payload = SExpr::list({SExpr::symbol("flet"),
                                     SExpr::list({SExpr::list(std::move(fn_def))}), structure});
        return detail::finish_outcome(def, Strategy::Flet, std::move(payload));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::DefectiveMacro)
            return detail::refused(def, Strategy::Flet, "lexical-binding-asymmetry");
        if (e.code() != ErrorCode::UnsupportedConstruct)
            throw;
    }

    // no-analysis fallback: hoist the body only
    if (detail::splice_under_lexical_binding(def.template_payload, bp))
        return detail::refused(def, Strategy::Flet, "unsupported-structure");
    SExpr fn = gensyms.fresh();
    SExpr call = SExpr::list({fn});
    SExpr replaced = detail::replace_splices(def.template_payload, call, bp);
    SExpr payload = SExpr::list(
        {SExpr::symbol("flet"),
         SExpr::list({SExpr::list({fn, SExpr::nil(), detail::splice_site(bp)})}), replaced});
    return detail::finish_outcome(def, Strategy::Flet, std::move(payload));
}

namespace detail {

inline RefactorOutcome refactor_unified(const MacroDef& def, GensymSource& gensyms,
                                        Strategy strategy) {
    if (def.splice_count < 2)
        return refused(def, strategy, "not-exponential");
    try {
        BranchTree tree = normalize_branches(def);
        auto rows = unify_bindings(tree);
        SExpr payload = strategy == Strategy::MergedLet
            ? merge_branches(tree, rows, gensyms, def.body_param)
            : progv_split(tree, rows, gensyms, def.body_param);
        return finish_outcome(def, strategy, std::move(payload));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::DefectiveMacro)
            return refused(def, strategy, "lexical-binding-asymmetry");
        if (e.code() == ErrorCode::UnsupportedConstruct)
            return refused(def, strategy, "unsupported-structure");
        throw;
    }
}

}  // namespace detail

inline RefactorOutcome refactor_progv(const MacroDef& def, GensymSource& gensyms) {
    return detail::refactor_unified(def, gensyms, Strategy::Progv);
}

// Step-3-only rewrite, kept for demonstrating why the progv step matters.
inline RefactorOutcome refactor_merged_let(const MacroDef& def, GensymSource& gensyms) {
    return detail::refactor_unified(def, gensyms, Strategy::MergedLet);
}

// PROGV first (no extra function-call overhead, expansion keeps the source
// order), FLET as the fallback.
inline RefactorOutcome refactor_macro(const MacroDef& def, GensymSource& gensyms,
                                      Strategy strategy = Strategy::Auto) {
    switch (strategy) {
    case Strategy::Flet: return refactor_flet(def, gensyms);
    case Strategy::Progv: return refactor_progv(def, gensyms);
    case Strategy::MergedLet: return refactor_merged_let(def, gensyms);
    case Strategy::Auto: break;
    }
    RefactorOutcome progv = refactor_progv(def, gensyms);
    if (progv.refactored || progv.reason == "lexical-binding-asymmetry" ||
        progv.reason == "not-exponential")
        return progv;
    return refactor_flet(def, gensyms);
}

struct RefactorableCheck {
    bool ok = true;
    std::string reason;
};

// Dry run of normalize + unify. Lexical asymmetry (a macro-argument
// binding established in only some branches) defeats both strategies; a
// structure the unifier cannot handle is fine as long as the FLET fallback
// applies.
inline RefactorableCheck check_refactorable(const MacroDef& def) {
    if (def.splice_count < 2)
        return {true, ""};
    try {
        BranchTree tree = normalize_branches(def);
        unify_bindings(tree, /*require_splice_everywhere=*/false);
        return {true, ""};
    } catch (const Error& e) {
        if (e.code() == ErrorCode::DefectiveMacro)
            return {false, "lexical-binding-asymmetry"};
        if (e.code() != ErrorCode::UnsupportedConstruct)
            throw;
    }
    if (detail::splice_under_lexical_binding(def.template_payload, def.body_param))
        return {false, "unsupported-structure"};
    return {true, ""};
}

struct EquivalenceVerdict {
    std::string program;
    bool pass = false;
    std::string detail;
};

// Differential check: run each program with the original definition and
// with the refactored one substituted under the same name, then compare
// the full behavior records.
inline std::vector<EquivalenceVerdict> verify_equivalence(
    const MacroDef& original, const MacroDef& refactored,
    const std::vector<std::pair<std::string, std::string>>& programs) {
    std::vector<EquivalenceVerdict> out;
    for (const auto& [name, text] : programs) {
        EquivalenceVerdict v;
        v.program = name;
        try {
            auto forms = parse(text);
            MacroEnv env;
            env.define(original);
            BehaviorRecord a = observed_behavior(forms, env);
            BehaviorRecord b = observed_behavior(forms, env, {{original.name, refactored}});
            v.pass = (a == b);
            if (!v.pass)
                v.detail = "original " + render_record(a) + " / rewritten " + render_record(b);
        } catch (const Error& e) {
            v.pass = false;
            v.detail = e.what();
        }
        out.push_back(std::move(v));
    }
    return out;
}

// Random-program generator for differential testing. The options describe
// what a macro's callers look like; everything derived from the seed, so
// runs reproduce exactly.
struct GeneratorOptions {
    std::string support_code;  // defuns the macro's expansion relies on
    // special variable -> candidate initializer forms
    std::vector<std::pair<std::string, std::vector<std::string>>> randomized_specials;
    // statement templates; %d becomes a small integer, %v the macro-bound
    // variable for the current level
    std::vector<std::string> body_templates;
    bool param_is_variable = false;
};

inline std::vector<std::pair<std::string, std::string>> generate_programs(
    const MacroDef& def, const GeneratorOptions& opt, std::uint64_t seed, int count) {
    std::vector<std::pair<std::string, std::string>> out;
    for (int i = 0; i < count; ++i) {
        std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(i + 1));
        auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
        std::string text;
        for (const auto& [name, choices] : opt.randomized_specials)
            text += "(defvar " + name + " " + choices[pick(choices.size())] + ")\n";
        text += opt.support_code;
        text += print(def.definition_form()) + "\n";

        int depth = 1 + static_cast<int>(pick(5));
        std::function<std::string(int)> build = [&](int level) {
            std::string var = opt.param_is_variable ? "u" + std::to_string(level)
                                                    : std::to_string(pick(10));
            std::size_t stmts = 1 + pick(3);
            std::size_t nest_at = level < depth ? pick(stmts + 1) : stmts + 1;
            std::string call = "(" + def.name;
            if (def.has_required_group)
                call += " (" + var + ")";
            for (std::size_t pos = 0; pos <= stmts; ++pos) {
                if (pos == nest_at)
                    call += " " + build(level + 1);
                if (pos == stmts)
                    break;
                std::string stmt = opt.body_templates[pick(opt.body_templates.size())];
                for (std::string::size_type p; (p = stmt.find("%d")) != std::string::npos;)
                    stmt.replace(p, 2, std::to_string(pick(10)));
                for (std::string::size_type p; (p = stmt.find("%v")) != std::string::npos;)
                    stmt.replace(p, 2,
                                 opt.param_is_variable ? var : std::to_string(pick(10)));
                call += " " + stmt;
            }
            return call + ")";
        };
        text += build(1) + "\n";
        out.emplace_back("gen-" + def.name + "-" + std::to_string(i), std::move(text));
    }
    return out;
}

}  // namespace macroblow
