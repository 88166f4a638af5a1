#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "macroblow/corpus.hpp"
#include "macroblow/expander.hpp"
#include "macroblow/sexpr.hpp"

using namespace macroblow;

namespace {

MacroEnv corpus_env() {
    MacroEnv env;
    for (const auto& entry : corpus::entries())
        for (const auto& top : parse(entry.source))
            if (top.form.headed_by("defmacro"))
                define_macro(top, env);
    return env;
}

// Straight-line reference for the invocation-count law: a depth-n nesting
// of a macro with m splices expands the nested call once per splice.
std::int64_t brute_force_invocations(std::int64_t m, int n) {
    return n == 0 ? 0 : 1 + m * brute_force_invocations(m, n - 1);
}

}  // namespace

TEST_CASE("define_macro computes splice counts") {
    MacroEnv env = corpus_env();
    CHECK(env.find("with-bad")->splice_count == 2);
    CHECK(env.find("with-good")->splice_count == 1);
    CHECK(env.find("with-worse")->splice_count == 3);
    CHECK(env.find("with-bad-recording")->splice_count == 2);
    CHECK(env.find("with-problematic")->splice_count == 2);

    MacroEnv local;
    define_macro(parse_one("(defmacro ignore-body ((x) &body b) `(princ ,x))"), local);
    CHECK(local.find("ignore-body")->splice_count == 0);
    MacroDef quoted = define_macro(
        parse_one("(defmacro quoted-splice (&body b) `(princ '(f ,@b)))"), local);
    CHECK(quoted.splice_count == 0);  // splices inside quoted data are inert
}

TEST_CASE("define_macro rejects malformed definitions") {
    MacroEnv env;
    try {
        define_macro(parse_one("(defmacro w ((x x) &body b) `(princ ,x))"), env);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DuplicateParam);
    }
    try {
        define_macro(parse_one("(defmacro w ((x)) `(princ ,x))"), env);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingBodyParam);
    }
    try {
        define_macro(parse_one("(defmacro w (&body b) `(f ,@other))"), env);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidSplice);
    }
    try {
        define_macro(parse_one("(defmacro w (&body b) `(f ,b))"), env);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidSplice);
    }
    try {
        define_macro(parse_one("(defmacro w (&body b) `(f `(g ,@b)))"), env);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NestedQuasiquote);
    }
}

TEST_CASE("redefinition replaces in place") {
    MacroEnv env;
    define_macro(parse_one("(defmacro m (&body b) `(progn ,@b))"), env);
    define_macro(parse_one("(defmacro second (&body b) `(progn ,@b))"), env);
    define_macro(parse_one("(defmacro m (&body b) `(list ,@b ,@b))"), env);
    CHECK(env.defs().size() == 2);
    CHECK(env.defs()[0].name == "m");
    CHECK(env.find("m")->splice_count == 2);
}

TEST_CASE("expand_quasiquote substitutes params and splices the body") {
    SExpr tpl = parse_one("`(progn ,@body ,@body)");
    SExpr out = expand_quasiquote(tpl, {}, "body", {parse_one("(princ 1)")});
    CHECK(print(out) == "(progn (princ 1) (princ 1))");

    SExpr tpl2 = parse_one("`(princ ,x)");
    out = expand_quasiquote(tpl2, {{"x", SExpr::integer(3)}}, "body", {});
    CHECK(print(out) == "(princ 3)");

    try {
        expand_quasiquote(parse_one("`(f ,y)"), {}, "body", {});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnboundTemplateVar);
    }
    try {
        // a splice with no enclosing list to splice into
        expand_quasiquote(parse_one("`,@body"), {}, "body", {parse_one("(princ 1)")});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SpliceOutsideList);
    }
}

TEST_CASE("macroexpand_1 expands one level only") {
    MacroEnv env = corpus_env();
    ExpansionStats stats;
    SExpr call = parse_one("(with-bad (6) (princ 3))");
    auto [expansion, expanded] = macroexpand_1(call, env, stats);
    CHECK(expanded);
    CHECK(print(expansion) ==
          "(if *a* (progn (princ 6) (princ 3)) (progn (princ (1+ 6)) (princ 3)))");
    CHECK(stats.invocations_of("with-bad") == 1);

    auto [same, flag] = macroexpand_1(parse_one("(princ 6)"), env, stats);
    CHECK_FALSE(flag);
    CHECK(same == parse_one("(princ 6)"));

    try {
        macroexpand_1(parse_one("(with-bad)"), env, stats);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ArityMismatch);
    }
    try {
        macroexpand_1(parse_one("(with-bad (1 2) (princ 0))"), env, stats);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ArityMismatch);
    }
}

namespace {

std::int64_t count_occurrences(const SExpr& haystack, const SExpr& needle) {
    if (haystack == needle)
        return 1;
    if (!haystack.is_cons())
        return 0;
    std::int64_t n = 0;
    for (const SExpr* cur = &haystack; cur->is_cons(); cur = &cur->tail())
        n += count_occurrences(cur->head(), needle);
    return n;
}

SExpr nest(const std::string& name, int depth, const std::string& innermost) {
    std::string text;
    for (int i = 1; i <= depth; ++i)
        text += "(" + name + " (" + std::to_string(i) + ") ";
    text += innermost;
    text += std::string(depth, ')');
    return parse_one(text);
}

}  // namespace

TEST_CASE("macroexpand_all duplicates the body once per splice, recursively") {
    MacroEnv env = corpus_env();
    ExpansionStats stats;
    SExpr blowup = nest("with-bad", 4, "(princ 0)");
    SExpr expansion = macroexpand_all(blowup, env, stats);
    CHECK(count_occurrences(expansion, parse_one("(princ 0)")) == 16);
    CHECK(stats.invocations_of("with-bad") == 15);
    CHECK(stats.max_self_nesting.at("with-bad") == 4);
    CHECK(stats.nodes_after > stats.nodes_before);

    ExpansionStats good_stats;
    SExpr good = macroexpand_all(nest("with-good", 4, "(princ 0)"), env, good_stats);
    // one flet per level, each splicing its body exactly once
    CHECK(count_occurrences(good, SExpr::symbol("flet")) == 4);
    CHECK(count_occurrences(good, parse_one("(princ 0)")) == 1);
    CHECK(good_stats.invocations_of("with-good") == 4);

    ExpansionStats none;
    SExpr plain = parse_one("(princ (list 1 2))");
    CHECK(macroexpand_all(plain, env, none) == plain);
    CHECK(none.total_invocations() == 0);
}

TEST_CASE("macroexpand_all leaves quoted data alone") {
    MacroEnv env = corpus_env();
    ExpansionStats stats;
    SExpr form = parse_one("(list '(with-bad (1) (princ 0)) (with-bad (1) (princ 0)))");
    SExpr out = macroexpand_all(form, env, stats);
    CHECK(stats.invocations_of("with-bad") == 1);
    CHECK(count_occurrences(out, SExpr::symbol("with-bad")) == 1);  // only the quoted one
}

TEST_CASE("invocation-count law for m splices at depth n") {
    MacroEnv env = corpus_env();
    for (int n = 1; n <= 6; ++n) {
        ExpansionStats stats;
        macroexpand_all(nest("with-bad", n, "(princ 0)"), env, stats);
        CHECK(stats.invocations_of("with-bad") == brute_force_invocations(2, n));
        CHECK(stats.invocations_of("with-bad") == (1LL << n) - 1);  // (2^n - 1)/(2 - 1)
    }
    for (int n = 1; n <= 6; ++n) {
        ExpansionStats stats;
        macroexpand_all(nest("with-worse", n, "(princ 0)"), env, stats);
        std::int64_t expected = brute_force_invocations(3, n);
        CHECK(stats.invocations_of("with-worse") == expected);
        std::int64_t pow3 = 1;
        for (int i = 0; i < n; ++i)
            pow3 *= 3;
        CHECK(expected == (pow3 - 1) / 2);
    }
    for (int n = 1; n <= 6; ++n) {
        ExpansionStats stats;
        macroexpand_all(nest("with-good", n, "(princ 0)"), env, stats);
        CHECK(stats.invocations_of("with-good") == n);
    }
}

TEST_CASE("size law: with-bad doubles, with-good grows by a constant") {
    MacroEnv env = corpus_env();
    std::vector<std::int64_t> bad_sizes, good_sizes;
    for (int n = 1; n <= 6; ++n) {
        ExpansionStats s1, s2;
        bad_sizes.push_back(node_count(macroexpand_all(nest("with-bad", n, "(princ 0)"), env, s1)));
        good_sizes.push_back(
            node_count(macroexpand_all(nest("with-good", n, "(princ 0)"), env, s2)));
    }
    for (std::size_t i = 2; i < bad_sizes.size(); ++i) {
        double r = static_cast<double>(bad_sizes[i]) / static_cast<double>(bad_sizes[i - 1]);
        CHECK(r > 1.9);
        CHECK(r < 2.8);
    }
    double tail = static_cast<double>(bad_sizes.back()) /
                  static_cast<double>(bad_sizes[bad_sizes.size() - 2]);
    CHECK(tail == doctest::Approx(2.0).epsilon(0.05));
    for (std::size_t i = 2; i < good_sizes.size(); ++i)
        CHECK(good_sizes[i] - good_sizes[i - 1] == good_sizes[1] - good_sizes[0]);
}

TEST_CASE("macroexpand_all is idempotent and does not mutate its input") {
    MacroEnv env = corpus_env();
    SExpr input = nest("with-bad-recording", 3, "(do-something-and-record 1)");
    SExpr copy = input;
    ExpansionStats s1, s2;
    SExpr once = macroexpand_all(input, env, s1);
    SExpr twice = macroexpand_all(once, env, s2);
    CHECK(once == twice);
    CHECK(s2.invocations_of("with-bad-recording") == 0);
    CHECK(input == copy);
}

TEST_CASE("self-recursive expansion trips the invocation cap") {
    MacroEnv env;
    define_macro(parse_one("(defmacro runaway (&body b) `(runaway ,@b))"), env);
    ExpansionStats stats;
    try {
        macroexpand_all(parse_one("(runaway (princ 1))"), env, stats, 500);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ExpansionDepthExceeded);
    }
}

TEST_CASE("gensyms are unique and cannot be read back") {
    GensymSource gensyms("g", 1);
    SExpr a = gensyms.fresh();
    SExpr b = gensyms.fresh();
    CHECK(a != b);
    CHECK(a.symbol_name() == "#:g1");
    CHECK_THROWS_AS(parse(print(a)), Error);
}

TEST_CASE("multiple template forms behave as one progn template") {
    MacroEnv env;
    define_macro(parse_one("(defmacro twice ((x) &body b) `(princ ,x) `(progn ,@b))"), env);
    ExpansionStats stats;
    auto [out, flag] = macroexpand_1(parse_one("(twice (7) (princ 8))"), env, stats);
    CHECK(flag);
    CHECK(print(out) == "(progn (princ 7) (progn (princ 8)))");
}
