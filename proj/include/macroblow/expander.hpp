#pragma once

// Macro environment, quasiquote template substitution, macroexpand-1 and a
// recursive macroexpand-all with invocation accounting.
//
// Lambda lists support exactly one optional parenthesized required group
// followed by &body: (defmacro m ((a b) &body body) ...) or
// (defmacro m (&body body) ...). Required params substitute via ,param
// anywhere in the template; the body param may appear only as ,@param.
// Nested quasiquote is rejected.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "macroblow/sexpr.hpp"

namespace macroblow {

struct MacroDef {
    std::string name;
    std::vector<std::string> required_params;
    bool has_required_group = false;
    std::string body_param;
    // Substitution target: the quasiquote payload, progn-wrapped when the
    // definition had several template forms.
    SExpr template_payload;
    bool quasiquoted = true;
    std::int64_t splice_count = 0;  // ,@body occurrences outside quote
    SourceSpan span{};

    SExpr lambda_list() const {
        std::vector<SExpr> ll;
        if (has_required_group) {
            std::vector<SExpr> group;
            group.reserve(required_params.size());
            for (const auto& p : required_params)
                group.push_back(SExpr::symbol(p));
            ll.push_back(SExpr::list(std::move(group)));
        }
        ll.push_back(SExpr::symbol("&body"));
        ll.push_back(SExpr::symbol(body_param));
        return SExpr::list(std::move(ll));
    }

    // The canonical (defmacro ...) form for this definition.
    SExpr definition_form() const {
        SExpr tpl = quasiquoted
            ? SExpr::list({SExpr::symbol(kQuasiquote), template_payload})
            : template_payload;
        return SExpr::list({SExpr::symbol("defmacro"), SExpr::symbol(name), lambda_list(), tpl});
    }
};

class MacroEnv {
public:
    const MacroDef* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &defs_[it->second];
    }

    // Redefinition replaces in place, keeping the original position.
    void define(MacroDef def) {
        auto it = index_.find(def.name);
        if (it != index_.end()) {
            defs_[it->second] = std::move(def);
        } else {
            index_.emplace(def.name, defs_.size());
            defs_.push_back(std::move(def));
        }
    }

    const std::vector<MacroDef>& defs() const { return defs_; }

private:
    std::vector<MacroDef> defs_;
    std::map<std::string, std::size_t> index_;
};

struct ExpansionStats {
    std::map<std::string, std::int64_t> invocations;  // macro-function calls
    std::map<std::string, std::int64_t> max_self_nesting;
    std::int64_t nodes_before = 0;
    std::int64_t nodes_after = 0;

    std::int64_t total_invocations() const {
        std::int64_t n = 0;
        for (const auto& [_, c] : invocations)
            n += c;
        return n;
    }

    std::int64_t invocations_of(const std::string& name) const {
        auto it = invocations.find(name);
        return it == invocations.end() ? 0 : it->second;
    }

    void merge(const ExpansionStats& other) {
        for (const auto& [name, c] : other.invocations)
            invocations[name] += c;
        for (const auto& [name, d] : other.max_self_nesting) {
            auto& cur = max_self_nesting[name];
            if (d > cur)
                cur = d;
        }
        nodes_before += other.nodes_before;
        nodes_after += other.nodes_after;
    }
};

// Fresh-name source. Emitted names carry the reserved '#' marker, so they
// can never collide with anything the reader produces.
class GensymSource {
public:
    explicit GensymSource(std::string prefix = "g", std::uint64_t start = 1)
        : prefix_(std::move(prefix)), next_(start) {}

    SExpr fresh() { return SExpr::symbol("#:" + prefix_ + std::to_string(next_++)); }

private:
    std::string prefix_;
    std::uint64_t next_;
};

namespace detail {

struct TemplateScan {
    const std::string& body_param;
    std::int64_t splices = 0;

    void walk(const SExpr& t) {
        if (t.is_symbol_named(body_param))
            throw Error(ErrorCode::InvalidSplice,
                        "body parameter '" + body_param + "' used outside ,@");
        if (!t.is_cons())
            return;
        if (t.marker_payload(kQuote))
            return;  // quoted data is inert, splices inside it do not count
        if (t.marker_payload(kQuasiquote) || t.headed_by(kQuasiquote))
            throw Error(ErrorCode::NestedQuasiquote, "nested quasiquote in template");
        if (auto u = t.marker_payload(kUnquote)) {
            if (u->is_symbol_named(body_param))
                throw Error(ErrorCode::InvalidSplice,
                            "body parameter '" + body_param + "' must splice via ,@");
            walk_children(*u);
            return;
        }
        if (auto s = t.marker_payload(kUnquoteSplicing)) {
            if (!s->is_symbol_named(body_param))
                throw Error(ErrorCode::InvalidSplice,
                            ",@ is only supported on the body parameter, got " + print(*s));
            ++splices;
            return;
        }
        walk_children(t);
    }

    void walk_children(const SExpr& t) {
        const SExpr* cur = &t;
        while (cur->is_cons()) {
            walk(cur->head());
            cur = &cur->tail();
        }
    }
};

}  // namespace detail

// Ingests (defmacro name lambda-list template...) and registers the result.
inline MacroDef define_macro(const TopForm& top, MacroEnv& env) {
    const SExpr& form = top.form;
    if (!form.headed_by("defmacro"))
        throw Error(ErrorCode::MalformedLambdaList, "not a defmacro form", top.span);
    auto parts = form.elements();
    if (parts.size() < 4 || !parts[1].is_symbol())
        throw Error(ErrorCode::MalformedLambdaList,
                    "defmacro needs a name, a lambda list and a template", top.span);

    MacroDef def;
    def.name = parts[1].symbol_name();
    def.span = top.span;

    const SExpr& ll = parts[2];
    if (!ll.is_list())
        throw Error(ErrorCode::MalformedLambdaList, "lambda list must be a list", top.span);
    auto ll_parts = ll.elements();
    std::size_t i = 0;
    if (i < ll_parts.size() && ll_parts[i].is_list()) {
        def.has_required_group = true;
        for (const SExpr& p : ll_parts[i].elements()) {
            if (!p.is_symbol())
                throw Error(ErrorCode::MalformedLambdaList,
                            "required parameter is not a symbol: " + print(p), top.span);
            for (const auto& seen : def.required_params)
                if (seen == p.symbol_name())
                    throw Error(ErrorCode::DuplicateParam, p.symbol_name(), top.span);
            def.required_params.push_back(p.symbol_name());
        }
        ++i;
    }
    if (i >= ll_parts.size() || !ll_parts[i].is_symbol_named("&body"))
        throw Error(ErrorCode::MissingBodyParam, def.name, top.span);
    ++i;
    if (i >= ll_parts.size() || !ll_parts[i].is_symbol())
        throw Error(ErrorCode::MissingBodyParam, def.name, top.span);
    def.body_param = ll_parts[i].symbol_name();
    ++i;
    if (i != ll_parts.size())
        throw Error(ErrorCode::MalformedLambdaList,
                    "unexpected lambda list tail in " + def.name, top.span);
    for (const auto& p : def.required_params)
        if (p == def.body_param)
            throw Error(ErrorCode::DuplicateParam, p, top.span);

    // Template forms: each is either a quasiquote form or marker-free data.
    std::vector<SExpr> payloads;
    def.quasiquoted = false;
    for (std::size_t t = 3; t < parts.size(); ++t) {
        if (auto payload = parts[t].marker_payload(kQuasiquote)) {
            payloads.push_back(*payload);
            def.quasiquoted = true;
        } else {
            payloads.push_back(parts[t]);
        }
    }
    def.template_payload = payloads.size() == 1
        ? payloads.front()
        : [&] {
              std::vector<SExpr> wrapped{SExpr::symbol("progn")};
              wrapped.insert(wrapped.end(), payloads.begin(), payloads.end());
              return SExpr::list(std::move(wrapped));
          }();

    detail::TemplateScan scan{def.body_param};
    scan.walk(def.template_payload);
    def.splice_count = scan.splices;

    env.define(def);
    return *env.find(def.name);
}

inline MacroDef define_macro(const SExpr& form, MacroEnv& env) {
    return define_macro(TopForm{form, SourceSpan{}}, env);
}

namespace detail {

struct Substitution {
    const std::map<std::string, SExpr>& bindings;
    const std::string& body_param;
    const std::vector<SExpr>& body_forms;

    SExpr subst(const SExpr& t) const {
        if (t.is_atom())
            return t;
        if (t.marker_payload(kQuote))
            return t;
        if (t.marker_payload(kQuasiquote) || t.headed_by(kQuasiquote))
            throw Error(ErrorCode::NestedQuasiquote, "nested quasiquote in template");
        if (auto u = t.marker_payload(kUnquote)) {
            if (!u->is_symbol())
                throw Error(ErrorCode::UnboundTemplateVar, print(*u));
            auto it = bindings.find(u->symbol_name());
            if (it == bindings.end())
                throw Error(ErrorCode::UnboundTemplateVar, u->symbol_name());
            return it->second;
        }
        if (t.marker_payload(kUnquoteSplicing))
            throw Error(ErrorCode::SpliceOutsideList,
                        ",@ must appear as a list element, got " + print(t));
        std::vector<SExpr> out;
        const SExpr* cur = &t;
        while (cur->is_cons()) {
            const SExpr& e = cur->head();
            if (auto s = e.marker_payload(kUnquoteSplicing)) {
                if (!s->is_symbol_named(body_param))
                    throw Error(ErrorCode::InvalidSplice,
                                ",@ is only supported on the body parameter, got " + print(*s));
                out.insert(out.end(), body_forms.begin(), body_forms.end());
            } else {
                out.push_back(subst(e));
            }
            cur = &cur->tail();
        }
        return SExpr::list(std::move(out));
    }
};

}  // namespace detail

// Substitutes ,param and splices ,@body-param into the template. Accepts
// either a (quasiquote ...) form or a bare payload.
inline SExpr expand_quasiquote(const SExpr& tmpl, const std::map<std::string, SExpr>& bindings,
                               std::string_view body_param,
                               const std::vector<SExpr>& body_forms) {
    std::string bp(body_param);
    detail::Substitution sub{bindings, bp, body_forms};
    if (auto payload = tmpl.marker_payload(kQuasiquote))
        return sub.subst(*payload);
    return sub.subst(tmpl);
}

// One step: if form is a registered macro call, destructure its arguments
// against the definition and substitute. Arguments are never evaluated.
inline std::pair<SExpr, bool> macroexpand_1(const SExpr& form, const MacroEnv& env,
                                            ExpansionStats& stats) {
    if (!form.is_cons() || !form.head().is_symbol())
        return {form, false};
    const MacroDef* def = env.find(form.head().symbol_name());
    if (!def)
        return {form, false};

    auto args = form.tail().elements();
    std::map<std::string, SExpr> bindings;
    std::vector<SExpr> body_forms;
    if (def->has_required_group) {
        if (args.empty())
            throw Error(ErrorCode::ArityMismatch,
                        def->name + ": missing required argument group");
        if (!args[0].is_list())
            throw Error(ErrorCode::ArityMismatch,
                        def->name + ": first argument must be a parenthesized group, got " +
                            print(args[0]));
        auto group = args[0].elements();
        if (group.size() != def->required_params.size())
            throw Error(ErrorCode::ArityMismatch,
                        def->name + ": expected " + std::to_string(def->required_params.size()) +
                            " required arguments, got " + std::to_string(group.size()));
        for (std::size_t i = 0; i < group.size(); ++i)
            bindings.emplace(def->required_params[i], group[i]);
        body_forms.assign(args.begin() + 1, args.end());
    } else {
        body_forms = std::move(args);
    }

    SExpr expansion = expand_quasiquote(def->template_payload, bindings, def->body_param,
                                        body_forms);
    ++stats.invocations[def->name];
    return {std::move(expansion), true};
}

namespace detail {

class RecursiveExpander {
public:
    RecursiveExpander(const MacroEnv& env, ExpansionStats& stats, std::int64_t cap)
        : env_(env), stats_(stats), cap_(cap) {}

    SExpr walk(const SExpr& form) {
        if (form.is_cons() && form.head().is_symbol() &&
            env_.find(form.head().symbol_name()) != nullptr) {
            const std::string name = form.head().symbol_name();
            if (++used_ > cap_)
                throw Error(ErrorCode::ExpansionDepthExceeded,
                            "more than " + std::to_string(cap_) +
                                " macro invocations while expanding " + name);
            auto [expansion, did] = macroexpand_1(form, env_, stats_);
            std::int64_t& depth = nesting_[name];
            ++depth;
            std::int64_t& best = stats_.max_self_nesting[name];
            if (depth > best)
                best = depth;
            SExpr result = walk(expansion);
            --depth;
            return result;
        }
        if (!form.is_cons())
            return form;
        if (form.marker_payload(kQuote))
            return form;
        if (auto qq = form.marker_payload(kQuasiquote))
            return SExpr::list({SExpr::symbol(kQuasiquote), walk_quasiquote(*qq)});
        std::vector<SExpr> out;
        const SExpr* cur = &form;
        while (cur->is_cons()) {
            out.push_back(walk(cur->head()));
            cur = &cur->tail();
        }
        return SExpr::list(std::move(out));
    }

private:
    // Inside quasiquote only unquote positions hold live code.
    SExpr walk_quasiquote(const SExpr& t) {
        if (auto u = t.marker_payload(kUnquote))
            return SExpr::list({SExpr::symbol(kUnquote), walk(*u)});
        if (auto s = t.marker_payload(kUnquoteSplicing))
            return SExpr::list({SExpr::symbol(kUnquoteSplicing), walk(*s)});
        if (!t.is_cons())
            return t;
        std::vector<SExpr> out;
        const SExpr* cur = &t;
        while (cur->is_cons()) {
            out.push_back(walk_quasiquote(cur->head()));
            cur = &cur->tail();
        }
        return SExpr::list(std::move(out));
    }

    const MacroEnv& env_;
    ExpansionStats& stats_;
    std::int64_t cap_;
    std::int64_t used_ = 0;
    std::map<std::string, std::int64_t> nesting_;
};

}  // namespace detail

inline constexpr std::int64_t kDefaultExpansionCap = 10'000;

// Fixed-point expansion: expand at head position, then recurse into
// subforms. Never descends into quote payloads; descends into quasiquote
// only at unquote positions. The cap counts total invocations, since
// exponential macros are wide rather than deep.
inline SExpr macroexpand_all(const SExpr& form, const MacroEnv& env, ExpansionStats& stats,
                             std::int64_t invocation_cap = kDefaultExpansionCap) {
    stats.nodes_before += node_count(form);
    SExpr result = detail::RecursiveExpander(env, stats, invocation_cap).walk(form);
    stats.nodes_after += node_count(result);
    return result;
}

}  // namespace macroblow
