#pragma once

// Evaluator for the mini-Lisp: a Lisp-2 with lexical closures, dynamically
// scoped special variables (defvar/defparameter, let-on-special, progv) and
// multiple values. eval expects fully macroexpanded input; run_program
// composes expansion and evaluation per toplevel form.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "macroblow/expander.hpp"
#include "macroblow/sexpr.hpp"

namespace macroblow {

struct LexEnv;
struct Closure;

class Value {
    struct Sym {
        std::string name;
        friend bool operator==(const Sym&, const Sym&) = default;
    };
    struct Str {
        std::string value;
        friend bool operator==(const Str&, const Str&) = default;
    };
    using ListPtr = std::shared_ptr<const std::vector<Value>>;
    struct Multi {
        std::vector<Value> values;
    };
    using MultiPtr = std::shared_ptr<const Multi>;
    using ClosurePtr = std::shared_ptr<const Closure>;
    using Rep = std::variant<std::monostate, std::int64_t, Sym, Str, ListPtr, ClosurePtr, MultiPtr>;

public:
    Value() = default;  // nil

    static Value nil() { return Value(); }
    static Value integer(std::int64_t v) {
        Value out;
        out.rep_ = v;
        return out;
    }
    static Value symbol(std::string_view name) {
        Value out;
        out.rep_ = Sym{std::string(name)};
        return out;
    }
    static Value truth() { return symbol("t"); }
    static Value boolean(bool b) { return b ? truth() : nil(); }
    static Value string(std::string v) {
        Value out;
        out.rep_ = Str{std::move(v)};
        return out;
    }
    static Value list(std::vector<Value> values) {
        if (values.empty())
            return nil();
        Value out;
        out.rep_ = std::make_shared<const std::vector<Value>>(std::move(values));
        return out;
    }
    static Value closure(ClosurePtr c) {
        Value out;
        out.rep_ = std::move(c);
        return out;
    }
    // Single values passed in; never nests.
    static Value multiple(std::vector<Value> values) {
        Value out;
        out.rep_ = std::make_shared<const Multi>(Multi{std::move(values)});
        return out;
    }

    bool is_nil() const { return std::holds_alternative<std::monostate>(rep_); }
    bool is_integer() const { return std::holds_alternative<std::int64_t>(rep_); }
    bool is_symbol() const { return std::holds_alternative<Sym>(rep_); }
    bool is_string() const { return std::holds_alternative<Str>(rep_); }
    bool is_list() const { return std::holds_alternative<ListPtr>(rep_); }
    bool is_closure() const { return std::holds_alternative<ClosurePtr>(rep_); }
    bool is_multiple() const { return std::holds_alternative<MultiPtr>(rep_); }

    std::int64_t integer_value() const { return std::get<std::int64_t>(rep_); }
    const std::string& symbol_name() const { return std::get<Sym>(rep_).name; }
    const std::string& string_value() const { return std::get<Str>(rep_).value; }
    const std::vector<Value>& list_values() const {
        static const std::vector<Value> empty;
        return is_nil() ? empty : *std::get<ListPtr>(rep_);
    }
    const std::vector<Value>& multiple_values() const { return std::get<MultiPtr>(rep_)->values; }
    const ClosurePtr& closure_ptr() const { return std::get<ClosurePtr>(rep_); }

    bool truthy() const { return !is_nil(); }

    // In single-value context a multiple-values bundle collapses to its
    // first element, or nil when empty.
    Value single() const {
        if (!is_multiple())
            return *this;
        const auto& vs = multiple_values();
        return vs.empty() ? nil() : vs.front();
    }

    std::vector<Value> as_value_list() const {
        if (is_multiple())
            return multiple_values();
        return {*this};
    }

    // Structural equality (Lisp equal).
    friend bool operator==(const Value& a, const Value& b) {
        if (a.rep_.index() != b.rep_.index())
            return false;
        if (a.is_list()) {
            const auto& la = a.list_values();
            const auto& lb = b.list_values();
            return la == lb;
        }
        if (a.is_multiple())
            return a.multiple_values() == b.multiple_values();
        if (a.is_closure())
            return std::get<ClosurePtr>(a.rep_) == std::get<ClosurePtr>(b.rep_);
        return a.rep_ == b.rep_;
    }
    friend bool operator!=(const Value& a, const Value& b) { return !(a == b); }

    // Identity-flavored eq: atoms by value, composites by sharing.
    bool eq(const Value& other) const {
        if (rep_.index() != other.rep_.index())
            return false;
        if (is_list())
            return std::get<ListPtr>(rep_) == std::get<ListPtr>(other.rep_);
        if (is_closure() || is_multiple())
            return *this == other;
        if (is_string())
            return false;  // no string identity under value semantics
        return rep_ == other.rep_;
    }

private:
    Rep rep_{};
};

struct Closure {
    std::string name;  // empty for lambda
    std::vector<std::string> params;
    std::vector<SExpr> body;
    std::shared_ptr<LexEnv> env;
};

struct LexEnv {
    std::shared_ptr<LexEnv> parent;
    std::map<std::string, std::shared_ptr<Value>> vars;
    std::map<std::string, std::shared_ptr<const Closure>> funcs;  // Lisp-2

    static std::shared_ptr<LexEnv> child(std::shared_ptr<LexEnv> parent) {
        auto env = std::make_shared<LexEnv>();
        env->parent = std::move(parent);
        return env;
    }
};

inline std::shared_ptr<Value> lex_lookup(const std::shared_ptr<LexEnv>& env,
                                         const std::string& name) {
    for (const LexEnv* e = env.get(); e != nullptr; e = e->parent.get()) {
        auto it = e->vars.find(name);
        if (it != e->vars.end())
            return it->second;
    }
    return nullptr;
}

inline std::shared_ptr<const Closure> lex_function(const std::shared_ptr<LexEnv>& env,
                                                   const std::string& name) {
    for (const LexEnv* e = env.get(); e != nullptr; e = e->parent.get()) {
        auto it = e->funcs.find(name);
        if (it != e->funcs.end())
            return it->second;
    }
    return nullptr;
}

struct DynEnv {
    std::set<std::string> specials;
    std::map<std::string, std::shared_ptr<Value>> globals;
    std::vector<std::pair<std::string, std::shared_ptr<Value>>> stack;

    bool is_special(const std::string& name) const { return specials.count(name) != 0; }

    std::shared_ptr<Value> find(const std::string& name) const {
        for (auto it = stack.rbegin(); it != stack.rend(); ++it)
            if (it->first == name)
                return it->second;
        auto g = globals.find(name);
        return g == globals.end() ? nullptr : g->second;
    }

    void push_binding(const std::string& name, Value value) {
        stack.emplace_back(name, std::make_shared<Value>(std::move(value)));
    }

    std::size_t depth() const { return stack.size(); }
};

// Pops exactly the bindings pushed in its scope, also on error unwind.
class DynGuard {
public:
    explicit DynGuard(DynEnv& dyn) : dyn_(dyn), depth_(dyn.depth()) {}
    ~DynGuard() { dyn_.stack.resize(depth_); }
    DynGuard(const DynGuard&) = delete;
    DynGuard& operator=(const DynGuard&) = delete;

private:
    DynEnv& dyn_;
    std::size_t depth_;
};

struct RuntimeState {
    DynEnv dyn;
    std::vector<std::string> output;  // princ tokens, append-only
    std::map<std::string, std::shared_ptr<const Closure>> functions;  // defun
};

// princ rendering: integers in decimal, symbols lower-case, string contents
// verbatim, lists in list notation.
inline std::string render_value(const Value& v) {
    if (v.is_nil())
        return "nil";
    if (v.is_integer())
        return std::to_string(v.integer_value());
    if (v.is_symbol())
        return v.symbol_name();
    if (v.is_string())
        return v.string_value();
    if (v.is_closure())
        return "#<function " + v.closure_ptr()->name + ">";
    if (v.is_multiple()) {
        std::string out = "#<values";
        for (const auto& e : v.multiple_values())
            out += " " + render_value(e);
        return out + ">";
    }
    std::string out = "(";
    bool first = true;
    for (const auto& e : v.list_values()) {
        if (!first)
            out += ' ';
        first = false;
        out += render_value(e);
    }
    return out + ")";
}

inline Value value_from_sexpr(const SExpr& form) {
    if (form.is_nil())
        return Value::nil();
    if (form.is_integer())
        return Value::integer(form.integer_value());
    if (form.is_symbol())
        return Value::symbol(form.symbol_name());
    if (form.is_string())
        return Value::string(form.string_value());
    std::vector<Value> out;
    for (const auto& e : form.elements())
        out.push_back(value_from_sexpr(e));
    return Value::list(std::move(out));
}

namespace detail {

class Evaluator {
public:
    explicit Evaluator(RuntimeState& state) : state_(state) {}

    Value eval(const SExpr& form, const std::shared_ptr<LexEnv>& env) {
        if (form.is_nil())
            return Value::nil();
        if (form.is_integer())
            return Value::integer(form.integer_value());
        if (form.is_string())
            return Value::string(form.string_value());
        if (form.is_symbol())
            return eval_symbol(form.symbol_name(), env);
        return eval_list(form, env);
    }

    Value eval_single(const SExpr& form, const std::shared_ptr<LexEnv>& env) {
        return eval(form, env).single();
    }

private:
    // Reference resolution: specials are always dynamic; everything else is
    // lexical first, then the dynamic/global fallback.
    Value eval_symbol(const std::string& name, const std::shared_ptr<LexEnv>& env) {
        if (name == "t")
            return Value::truth();
        if (state_.dyn.is_special(name)) {
            if (auto cell = state_.dyn.find(name))
                return *cell;
            throw Error(ErrorCode::UnboundVariable, name + " (special, unbound)");
        }
        if (auto cell = lex_lookup(env, name))
            return *cell;
        if (auto cell = state_.dyn.find(name))
            return *cell;
        throw Error(ErrorCode::UnboundVariable, name);
    }

    Value eval_list(const SExpr& form, const std::shared_ptr<LexEnv>& env) {
        const SExpr& head = form.head();
        if (head.is_cons() && head.headed_by("lambda")) {
            Value fn = eval(head, env).single();
            return apply(fn, eval_args(form.tail(), env), form);
        }
        if (!head.is_symbol())
            throw Error(ErrorCode::NotAFunction, print(head));
        const std::string& op = head.symbol_name();
        const SExpr args = form.tail();

        if (op == kQuote)
            return value_from_sexpr(require_arity(form, 1, op)[0]);
        if (op == "if") {
            auto a = args.elements();
            if (a.size() < 2 || a.size() > 3)
                throw Error(ErrorCode::ArityMismatch, "if: " + print(form));
            if (eval_single(a[0], env).truthy())
                return eval(a[1], env);
            return a.size() == 3 ? eval(a[2], env) : Value::nil();
        }
        if (op == "when" || op == "unless") {
            if (!args.is_cons())
                throw Error(ErrorCode::ArityMismatch, op + ": " + print(form));
            bool test = eval_single(args.head(), env).truthy();
            if (op == "unless")
                test = !test;
            return test ? eval_body(args.tail(), env) : Value::nil();
        }
        if (op == "cond") {
            for (const auto& clause : args.elements()) {
                if (!clause.is_cons())
                    throw Error(ErrorCode::TypeError, "cond clause: " + print(clause));
                Value test = eval_single(clause.head(), env);
                if (test.truthy())
                    return clause.tail().is_nil() ? test : eval_body(clause.tail(), env);
            }
            return Value::nil();
        }
        if (op == "and") {
            Value last = Value::truth();
            for (const SExpr* cur = &args; cur->is_cons(); cur = &cur->tail()) {
                last = cur->tail().is_nil() ? eval(cur->head(), env)
                                            : eval_single(cur->head(), env);
                if (!last.single().truthy())
                    return last.single();
            }
            return last;
        }
        if (op == "or") {
            for (const SExpr* cur = &args; cur->is_cons(); cur = &cur->tail()) {
                Value v = cur->tail().is_nil() ? eval(cur->head(), env)
                                               : eval_single(cur->head(), env);
                if (v.single().truthy())
                    return v;
            }
            return Value::nil();
        }
        if (op == "progn")
            return eval_body(args, env);
        if (op == "let" || op == "let*")
            return eval_let(args, env, op == "let*");
        if (op == "flet" || op == "labels")
            return eval_flet(args, env, op == "labels");
        if (op == "lambda")
            return make_closure("", args, env);
        if (op == "setq")
            return eval_setq(args, env);
        if (op == "defvar" || op == "defparameter")
            return eval_defvar(args, env, op == "defparameter");
        if (op == "defun")
            return eval_defun(args, env);
        if (op == "progv")
            return eval_progv(args, env);
        if (op == "push")
            return eval_push(args, env);
        if (op == "multiple-value-list") {
            auto a = require_arity(form, 1, op);
            return Value::list(eval(a[0], env).as_value_list());
        }

        // function application
        auto arg_values = eval_args(args, env);
        if (auto local = lex_function(env, op))
            return apply_closure(*local, std::move(arg_values));
        auto g = state_.functions.find(op);
        if (g != state_.functions.end())
            return apply_closure(*g->second, std::move(arg_values));
        return apply_builtin(op, std::move(arg_values), form);
    }

    std::vector<SExpr> require_arity(const SExpr& form, std::size_t n, const std::string& op) {
        auto a = form.tail().elements();
        if (a.size() != n)
            throw Error(ErrorCode::ArityMismatch,
                        op + " expects " + std::to_string(n) + " arguments: " + print(form));
        return a;
    }

    Value eval_body(const SExpr& body, const std::shared_ptr<LexEnv>& env) {
        Value last = Value::nil();
        for (const SExpr* cur = &body; cur->is_cons(); cur = &cur->tail()) {
            if (cur->tail().is_nil())
                return eval(cur->head(), env);  // tail values propagate
            last = eval(cur->head(), env);
        }
        return last;
    }

    std::vector<Value> eval_args(const SExpr& args, const std::shared_ptr<LexEnv>& env) {
        std::vector<Value> out;
        for (const SExpr* cur = &args; cur->is_cons(); cur = &cur->tail())
            out.push_back(eval_single(cur->head(), env));
        return out;
    }

    Value eval_let(const SExpr& args, const std::shared_ptr<LexEnv>& env, bool sequential) {
        if (!args.is_cons())
            throw Error(ErrorCode::ArityMismatch, "let: missing binding list");
        DynGuard guard(state_.dyn);
        auto inner = LexEnv::child(env);
        if (sequential) {
            for (const auto& b : args.head().elements())
                bind_one(b, inner, inner);
        } else {
            // parallel: value forms see the outer environment
            std::vector<std::pair<SExpr, Value>> pending;
            for (const auto& b : args.head().elements()) {
                auto [var, value] = eval_binding(b, env);
                pending.emplace_back(var, std::move(value));
            }
            for (auto& [var, value] : pending)
                establish(var.symbol_name(), std::move(value), inner);
        }
        return eval_body(args.tail(), inner);
    }

    std::pair<SExpr, Value> eval_binding(const SExpr& b, const std::shared_ptr<LexEnv>& env) {
        if (b.is_symbol())
            return {b, Value::nil()};
        if (b.is_cons() && b.head().is_symbol() &&
            (b.tail().is_nil() || b.tail().tail().is_nil())) {
            Value v = b.tail().is_nil() ? Value::nil() : eval_single(b.tail().head(), env);
            return {b.head(), std::move(v)};
        }
        throw Error(ErrorCode::TypeError, "malformed binding: " + print(b));
    }

    void bind_one(const SExpr& b, const std::shared_ptr<LexEnv>& value_env,
                  const std::shared_ptr<LexEnv>& target) {
        auto [var, value] = eval_binding(b, value_env);
        establish(var.symbol_name(), std::move(value), target);
    }

    // A declared-special symbol gets a dynamic binding, anything else a
    // lexical one.
    void establish(const std::string& name, Value value, const std::shared_ptr<LexEnv>& target) {
        if (state_.dyn.is_special(name))
            state_.dyn.push_binding(name, std::move(value));
        else
            target->vars[name] = std::make_shared<Value>(std::move(value));
    }

    Value eval_flet(const SExpr& args, const std::shared_ptr<LexEnv>& env, bool recursive) {
        if (!args.is_cons())
            throw Error(ErrorCode::ArityMismatch, "flet: missing definitions");
        auto inner = LexEnv::child(env);
        for (const auto& d : args.head().elements()) {
            auto parts = d.elements();
            if (parts.size() < 2 || !parts[0].is_symbol() || !parts[1].is_list())
                throw Error(ErrorCode::TypeError, "malformed local function: " + print(d));
            auto fn = std::make_shared<Closure>();
            fn->name = parts[0].symbol_name();
            for (const auto& p : parts[1].elements()) {
                if (!p.is_symbol())
                    throw Error(ErrorCode::TypeError, "parameter is not a symbol: " + print(p));
                fn->params.push_back(p.symbol_name());
            }
            fn->body.assign(parts.begin() + 2, parts.end());
            fn->env = recursive ? inner : env;  // labels close over themselves
            inner->funcs[fn->name] = std::move(fn);
        }
        return eval_body(args.tail(), inner);
    }

    Value make_closure(const std::string& name, const SExpr& args,
                       const std::shared_ptr<LexEnv>& env) {
        if (!args.is_cons() || !args.head().is_list())
            throw Error(ErrorCode::TypeError, "lambda needs a parameter list");
        auto fn = std::make_shared<Closure>();
        fn->name = name;
        for (const auto& p : args.head().elements()) {
            if (!p.is_symbol())
                throw Error(ErrorCode::TypeError, "parameter is not a symbol: " + print(p));
            fn->params.push_back(p.symbol_name());
        }
        fn->body = args.tail().elements();
        fn->env = env;
        return Value::closure(std::move(fn));
    }

    Value eval_setq(const SExpr& args, const std::shared_ptr<LexEnv>& env) {
        auto parts = args.elements();
        if (parts.empty() || parts.size() % 2 != 0)
            throw Error(ErrorCode::ArityMismatch, "setq needs variable/value pairs");
        Value last = Value::nil();
        for (std::size_t i = 0; i < parts.size(); i += 2) {
            if (!parts[i].is_symbol())
                throw Error(ErrorCode::TypeError, "setq target: " + print(parts[i]));
            last = eval_single(parts[i + 1], env);
            assign(parts[i].symbol_name(), last, env);
        }
        return last;
    }

    // Assigns the innermost visible binding: dynamic for specials, else the
    // lexical cell, else an existing dynamic cell, else a fresh global.
    void assign(const std::string& name, const Value& value, const std::shared_ptr<LexEnv>& env) {
        if (state_.dyn.is_special(name)) {
            if (auto cell = state_.dyn.find(name)) {
                *cell = value;
                return;
            }
            state_.dyn.globals[name] = std::make_shared<Value>(value);
            return;
        }
        if (auto cell = lex_lookup(env, name)) {
            *cell = value;
            return;
        }
        if (auto cell = state_.dyn.find(name)) {
            *cell = value;
            return;
        }
        state_.dyn.globals[name] = std::make_shared<Value>(value);
    }

    Value eval_defvar(const SExpr& args, const std::shared_ptr<LexEnv>& env, bool always_set) {
        auto parts = args.elements();
        if (parts.empty() || parts.size() > 2 || !parts[0].is_symbol())
            throw Error(ErrorCode::ArityMismatch, "defvar: " + print(args));
        const std::string name = parts[0].symbol_name();
        state_.dyn.specials.insert(name);
        bool bound = state_.dyn.globals.count(name) != 0;
        if (always_set || !bound) {
            // defvar leaves an existing value alone and only then skips the init
            Value init = parts.size() == 2 ? eval_single(parts[1], env) : Value::nil();
            state_.dyn.globals[name] = std::make_shared<Value>(std::move(init));
        }
        return Value::symbol(name);
    }

    Value eval_defun(const SExpr& args, const std::shared_ptr<LexEnv>& env) {
        auto parts = args.elements();
        if (parts.size() < 2 || !parts[0].is_symbol() || !parts[1].is_list())
            throw Error(ErrorCode::TypeError, "defun: " + print(args));
        auto fn = std::make_shared<Closure>();
        fn->name = parts[0].symbol_name();
        for (const auto& p : parts[1].elements()) {
            if (!p.is_symbol())
                throw Error(ErrorCode::TypeError, "parameter is not a symbol: " + print(p));
            fn->params.push_back(p.symbol_name());
        }
        fn->body.assign(parts.begin() + 2, parts.end());
        fn->env = env;
        state_.functions[fn->name] = std::move(fn);
        return Value::symbol(parts[0].symbol_name());
    }

    Value eval_progv(const SExpr& args, const std::shared_ptr<LexEnv>& env) {
        auto parts = args.elements();
        if (parts.size() < 2)
            throw Error(ErrorCode::ArityMismatch, "progv needs symbols and values");
        Value syms = eval_single(parts[0], env);
        Value vals = eval_single(parts[1], env);
        if (!syms.is_nil() && !syms.is_list())
            throw Error(ErrorCode::TypeError, "progv symbol list: " + render_value(syms));
        if (!vals.is_nil() && !vals.is_list())
            throw Error(ErrorCode::TypeError, "progv value list: " + render_value(vals));
        DynGuard guard(state_.dyn);
        const auto& names = syms.list_values();
        const auto& values = vals.list_values();
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (!names[i].is_symbol())
                throw Error(ErrorCode::TypeError, "progv symbol: " + render_value(names[i]));
            // excess symbols are bound to nil, excess values are ignored
            state_.dyn.push_binding(names[i].symbol_name(),
                                    i < values.size() ? values[i] : Value::nil());
        }
        SExpr body = SExpr::nil();
        {
            std::vector<SExpr> rest(parts.begin() + 2, parts.end());
            body = SExpr::list(std::move(rest));
        }
        return eval_body(body, env);
    }

    Value eval_push(const SExpr& args, const std::shared_ptr<LexEnv>& env) {
        auto parts = args.elements();
        if (parts.size() != 2 || !parts[1].is_symbol())
            throw Error(ErrorCode::ArityMismatch, "push needs a value and a variable");
        Value item = eval_single(parts[0], env);
        const std::string name = parts[1].symbol_name();
        std::shared_ptr<Value> cell;
        if (state_.dyn.is_special(name)) {
            cell = state_.dyn.find(name);
        } else {
            cell = lex_lookup(env, name);
            if (!cell)
                cell = state_.dyn.find(name);
        }
        if (!cell)
            throw Error(ErrorCode::UnboundVariable, name);
        if (!cell->is_nil() && !cell->is_list())
            throw Error(ErrorCode::TypeError, "push onto non-list: " + render_value(*cell));
        std::vector<Value> out{std::move(item)};
        const auto& old = cell->list_values();
        out.insert(out.end(), old.begin(), old.end());
        *cell = Value::list(std::move(out));
        return *cell;
    }

    std::vector<Value> collect_single(std::vector<Value> args) {
        for (auto& a : args)
            a = a.single();
        return args;
    }

    Value apply(const Value& fn, std::vector<Value> args, const SExpr& form) {
        if (fn.is_closure())
            return apply_closure(*fn.closure_ptr(), std::move(args));
        if (fn.is_symbol()) {
            auto g = state_.functions.find(fn.symbol_name());
            if (g != state_.functions.end())
                return apply_closure(*g->second, std::move(args));
            return apply_builtin(fn.symbol_name(), std::move(args), form);
        }
        throw Error(ErrorCode::NotAFunction, render_value(fn) + " in " + print(form));
    }

    Value apply_closure(const Closure& fn, std::vector<Value> args) {
        if (args.size() != fn.params.size())
            throw Error(ErrorCode::ArityMismatch,
                        (fn.name.empty() ? std::string("lambda") : fn.name) + " expects " +
                            std::to_string(fn.params.size()) + " arguments, got " +
                            std::to_string(args.size()));
        auto inner = LexEnv::child(fn.env);
        for (std::size_t i = 0; i < args.size(); ++i)
            inner->vars[fn.params[i]] = std::make_shared<Value>(std::move(args[i]));
        Value last = Value::nil();
        for (std::size_t i = 0; i < fn.body.size(); ++i) {
            if (i + 1 == fn.body.size())
                return eval(fn.body[i], inner);
            last = eval(fn.body[i], inner);
        }
        return last;
    }

    Value apply_builtin(const std::string& op, std::vector<Value> args, const SExpr& form) {
        auto need = [&](std::size_t n) {
            if (args.size() != n)
                throw Error(ErrorCode::ArityMismatch,
                            op + " expects " + std::to_string(n) + " arguments: " + print(form));
        };
        auto need_int = [&](const Value& v) -> std::int64_t {
            if (!v.is_integer())
                throw Error(ErrorCode::TypeError, op + ": " + render_value(v));
            return v.integer_value();
        };
        if (op == "list")
            return Value::list(std::move(args));
        if (op == "cons") {
            need(2);
            if (!args[1].is_nil() && !args[1].is_list())
                throw Error(ErrorCode::TypeError, "cons onto non-list: " + render_value(args[1]));
            std::vector<Value> out{args[0]};
            const auto& rest = args[1].list_values();
            out.insert(out.end(), rest.begin(), rest.end());
            return Value::list(std::move(out));
        }
        if (op == "car") {
            need(1);
            if (args[0].is_nil())
                return Value::nil();
            if (!args[0].is_list())
                throw Error(ErrorCode::TypeError, "car: " + render_value(args[0]));
            return args[0].list_values().front();
        }
        if (op == "cdr") {
            need(1);
            if (args[0].is_nil())
                return Value::nil();
            if (!args[0].is_list())
                throw Error(ErrorCode::TypeError, "cdr: " + render_value(args[0]));
            const auto& vs = args[0].list_values();
            return Value::list(std::vector<Value>(vs.begin() + 1, vs.end()));
        }
        if (op == "eq") {
            need(2);
            return Value::boolean(args[0].eq(args[1]));
        }
        if (op == "equal") {
            need(2);
            return Value::boolean(args[0] == args[1]);
        }
        if (op == "null" || op == "not") {
            need(1);
            return Value::boolean(args[0].is_nil());
        }
        if (op == "1+") {
            need(1);
            return Value::integer(need_int(args[0]) + 1);
        }
        if (op == "1-") {
            need(1);
            return Value::integer(need_int(args[0]) - 1);
        }
        if (op == "princ") {
            need(1);
            state_.output.push_back(render_value(args[0]));
            return args[0];
        }
        if (op == "values")
            return Value::multiple(std::move(args));
        if (op == "values-list") {
            need(1);
            if (!args[0].is_nil() && !args[0].is_list())
                throw Error(ErrorCode::TypeError, "values-list: " + render_value(args[0]));
            return Value::multiple(args[0].list_values());
        }
        if (op == "funcall") {
            if (args.empty())
                throw Error(ErrorCode::ArityMismatch, "funcall needs a function");
            Value fn = args.front();
            args.erase(args.begin());
            return apply(fn, std::move(args), form);
        }
        throw Error(ErrorCode::UnboundFunction, op);
    }

    RuntimeState& state_;
};

}  // namespace detail

// Evaluates one fully macroexpanded form.
inline Value eval(const SExpr& form, const std::shared_ptr<LexEnv>& lex, RuntimeState& state) {
    return detail::Evaluator(state).eval(form, lex);
}

struct ProgramResult {
    Value final_value;
    std::vector<std::string> output;
    DynEnv dyn;
    ExpansionStats stats;
};

// defmacro forms register macros (overrides substitute same-named
// definitions, which is how refactorings are compared); every other form is
// fully expanded, then evaluated.
inline ProgramResult run_program(const std::vector<TopForm>& forms, MacroEnv env,
                                 const std::map<std::string, MacroDef>& overrides = {},
                                 std::int64_t invocation_cap = kDefaultExpansionCap) {
    RuntimeState state;
    ProgramResult result;
    auto root = std::make_shared<LexEnv>();
    for (const auto& [name, def] : overrides)
        if (env.find(name) != nullptr)
            env.define(def);
    for (const auto& top : forms) {
        try {
            if (top.form.headed_by("defmacro")) {
                MacroDef def = define_macro(top, env);
                auto it = overrides.find(def.name);
                if (it != overrides.end())
                    env.define(it->second);
                continue;
            }
            SExpr expanded = macroexpand_all(top.form, env, result.stats, invocation_cap);
            result.final_value = eval(expanded, root, state);
        } catch (const Error& e) {
            if (e.span().has_value())
                throw;
            throw e.with_span(top.span);
        }
    }
    result.output = std::move(state.output);
    result.dyn = std::move(state.dyn);
    return result;
}

// Observable behavior: final values, the print log, and the final global
// value of every special variable the program declared. Two programs are
// behaviorally equivalent iff these records are equal.
struct BehaviorRecord {
    std::vector<Value> final_values;
    std::vector<std::string> output;
    std::vector<std::pair<std::string, Value>> final_specials;  // sorted by name

    friend bool operator==(const BehaviorRecord&, const BehaviorRecord&) = default;
};

inline BehaviorRecord observed_behavior(const std::vector<TopForm>& program, const MacroEnv& env,
                                        const std::map<std::string, MacroDef>& overrides = {}) {
    ProgramResult r = run_program(program, env, overrides);
    BehaviorRecord record;
    record.final_values = r.final_value.as_value_list();
    record.output = std::move(r.output);
    for (const auto& name : r.dyn.specials) {
        auto cell = r.dyn.globals.find(name);
        record.final_specials.emplace_back(
            name, cell == r.dyn.globals.end() ? Value::nil() : *cell->second);
    }
    return record;
}

inline std::string render_record(const BehaviorRecord& r) {
    std::string out = "values:";
    for (const auto& v : r.final_values)
        out += " " + render_value(v);
    out += " | output:";
    for (const auto& t : r.output)
        out += " \"" + t + "\"";
    out += " | specials:";
    for (const auto& [name, v] : r.final_specials)
        out += " " + name + "=" + render_value(v);
    return out;
}

namespace detail {

struct FreeVarScan {
    const std::set<std::string>& known;  // specials and globals
    std::vector<std::string> found;
    std::set<std::string> seen;

    void note(const std::string& name, const std::set<std::string>& bound) {
        if (name == "t" || bound.count(name) || known.count(name) || seen.count(name))
            return;
        seen.insert(name);
        found.push_back(name);
    }

    void scan_body(const SExpr& body, std::set<std::string> bound) {
        for (const SExpr* cur = &body; cur->is_cons(); cur = &cur->tail())
            scan(cur->head(), bound);
    }

    void scan(const SExpr& form, std::set<std::string> bound) {
        if (form.is_symbol()) {
            note(form.symbol_name(), bound);
            return;
        }
        if (!form.is_cons())
            return;
        if (form.marker_payload(kQuote))
            return;
        const SExpr& head = form.head();
        if (!head.is_symbol()) {
            scan_body(form, bound);
            return;
        }
        const std::string& op = head.symbol_name();
        if (op == "let" || op == "let*") {
            if (!form.tail().is_cons())
                return;
            std::set<std::string> inner = bound;
            for (const auto& b : form.tail().head().elements()) {
                const SExpr& var = b.is_cons() ? b.head() : b;
                if (b.is_cons() && b.tail().is_cons())
                    scan(b.tail().head(), op == "let*" ? inner : bound);
                if (var.is_symbol())
                    inner.insert(var.symbol_name());
            }
            scan_body(form.tail().tail(), inner);
            return;
        }
        if (op == "flet" || op == "labels") {
            if (!form.tail().is_cons())
                return;
            for (const auto& d : form.tail().head().elements()) {
                auto parts = d.elements();
                if (parts.size() < 2)
                    continue;
                std::set<std::string> inner = bound;
                for (const auto& p : parts[1].elements())
                    if (p.is_symbol())
                        inner.insert(p.symbol_name());
                for (std::size_t i = 2; i < parts.size(); ++i)
                    scan(parts[i], inner);
            }
            scan_body(form.tail().tail(), bound);
            return;
        }
        if (op == "lambda") {
            if (!form.tail().is_cons())
                return;
            std::set<std::string> inner = bound;
            for (const auto& p : form.tail().head().elements())
                if (p.is_symbol())
                    inner.insert(p.symbol_name());
            scan_body(form.tail().tail(), inner);
            return;
        }
        if (op == "defun") {
            auto parts = form.tail().elements();
            if (parts.size() < 2)
                return;
            std::set<std::string> inner = bound;
            for (const auto& p : parts[1].elements())
                if (p.is_symbol())
                    inner.insert(p.symbol_name());
            for (std::size_t i = 2; i < parts.size(); ++i)
                scan(parts[i], inner);
            return;
        }
        if (op == "setq" || op == "push") {
            scan_body(form.tail(), bound);
            return;
        }
        // generic operator form: the head is a function reference, not a
        // variable; scan only the arguments
        scan_body(form.tail(), bound);
    }
};

}  // namespace detail

// Static check over expanded code: lexical variable references with no
// visible binding. Mirrors the compiler warning a broken hoist provokes.
inline std::vector<std::string> free_lexical_variables(const SExpr& form,
                                                       const std::set<std::string>& known) {
    detail::FreeVarScan scan{known, {}, {}};
    scan.scan(form, {});
    return std::move(scan.found);
}

}  // namespace macroblow
