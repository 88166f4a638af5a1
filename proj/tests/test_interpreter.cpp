#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <memory>
#include <string>

#include "macroblow/corpus.hpp"
#include "macroblow/interpreter.hpp"

using namespace macroblow;

namespace {

ProgramResult run(const std::string& text) {
    return run_program(parse(text), MacroEnv{});
}

Value run_value(const std::string& text) { return run(text).final_value.single(); }

Value int_list(std::initializer_list<std::int64_t> xs) {
    std::vector<Value> out;
    for (auto x : xs)
        out.push_back(Value::integer(x));
    return Value::list(std::move(out));
}

}  // namespace

TEST_CASE("atoms, quote and basic list operations") {
    CHECK(run_value("7") == Value::integer(7));
    CHECK(run_value("\"s\"") == Value::string("s"));
    CHECK(run_value("nil").is_nil());
    CHECK(run_value("t") == Value::symbol("t"));
    CHECK(run_value("'sym") == Value::symbol("sym"));
    CHECK(run_value("'(3 2 1)") == int_list({3, 2, 1}));
    CHECK(run_value("(list 1 2)") == int_list({1, 2}));
    CHECK(run_value("(cons 1 '(2))") == int_list({1, 2}));
    CHECK(run_value("(car '(1 2))") == Value::integer(1));
    CHECK(run_value("(cdr '(1 2))") == int_list({2}));
    CHECK(run_value("(car nil)").is_nil());
    CHECK(run_value("(1+ 4)") == Value::integer(5));
    CHECK(run_value("(1- 4)") == Value::integer(3));
    CHECK(run_value("(null nil)") == Value::symbol("t"));
    CHECK(run_value("(not 3)").is_nil());
    CHECK(run_value("(eq 'a 'a)") == Value::symbol("t"));
    CHECK(run_value("(equal '(1 2) (list 1 2))") == Value::symbol("t"));
    CHECK(run_value("(eq \"a\" \"a\")").is_nil());
}

TEST_CASE("control forms") {
    CHECK(run_value("(if nil 1 2)") == Value::integer(2));
    CHECK(run_value("(if 0 1 2)") == Value::integer(1));  // only nil is false
    CHECK(run_value("(when t 1 2)") == Value::integer(2));
    CHECK(run_value("(when nil 1 2)").is_nil());
    CHECK(run_value("(unless nil 5)") == Value::integer(5));
    CHECK(run_value("(cond (nil 1) (7) (t 3))") == Value::integer(7));
    CHECK(run_value("(cond (nil 1))").is_nil());
    CHECK(run_value("(and 1 2 3)") == Value::integer(3));
    CHECK(run_value("(and 1 nil 3)").is_nil());
    CHECK(run_value("(or nil 2 3)") == Value::integer(2));
    CHECK(run_value("(progn 1 2 3)") == Value::integer(3));
}

TEST_CASE("lexical binding, shadowing and setq") {
    CHECK(run_value("(let ((x 1) (y 2)) (list x y))") == int_list({1, 2}));
    CHECK(run_value("(let ((x 1)) (let ((x 2)) x))") == Value::integer(2));
    CHECK(run_value("(let ((x 1)) (let ((x 2)) nil) x)") == Value::integer(1));
    CHECK(run_value("(let* ((x 1) (y (1+ x))) y)") == Value::integer(2));
    // parallel let evaluates value forms in the outer scope
    CHECK(run_value("(let ((x 1)) (let ((x 2) (y x)) y))") == Value::integer(1));
    CHECK(run_value("(let ((x 1)) (setq x 9) x)") == Value::integer(9));
    CHECK(run_value("(setq g 4) (1+ g)") == Value::integer(5));
    CHECK(run_value("(let ((s nil)) (push 1 s) (push 2 s) s)") == int_list({2, 1}));
}

TEST_CASE("functions are a separate namespace") {
    CHECK(run_value("(defun f (x) (1+ x)) (f 1)") == Value::integer(2));
    // a variable named like a local function does not collide with it
    CHECK(run_value("(flet ((f (x) (1+ x))) (let ((f 10)) (f f)))") == Value::integer(11));
    CHECK(run_value("(funcall 'car '(9 8))") == Value::integer(9));
    CHECK(run_value("(funcall (lambda (a b) (list b a)) 1 2)") == int_list({2, 1}));
    CHECK(run_value("((lambda (x) (1+ x)) 41)") == Value::integer(42));
    try {
        run_value("(no-such-fn 1)");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnboundFunction);
    }
    try {
        run_value("(defun f (x) x) (f 1 2)");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ArityMismatch);
    }
    try {
        run_value("free-variable");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnboundVariable);
    }
    try {
        run_value("(1+ 'sym)");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::TypeError);
    }
}

TEST_CASE("closures capture their definition environment") {
    // flet closure sees bindings at definition point, not call point
    CHECK(run_value("(let ((x 1))"
                    "  (flet ((get-x () x))"
                    "    (let ((x 99)) (get-x))))") == Value::integer(1));
    CHECK(run_value("(let ((n 5)) (funcall (lambda (x) (list n x)) 1))") == int_list({5, 1}));
    CHECK(run_value("(labels ((down (n) (if (eq n 0) 'done (down (1- n))))) (down 3))") ==
          Value::symbol("done"));
}

TEST_CASE("special variables are dynamically scoped") {
    CHECK(run_value("(defvar *v* 0) (defun get-v () *v*)"
                    "(let ((*v* 7)) (get-v))") == Value::integer(7));
    CHECK(run_value("(defvar *v* 0) (defun get-v () *v*)"
                    "(progn (let ((*v* 7)) (get-v)) (get-v))") == Value::integer(0));
    CHECK(run_value("(defvar *v* 1) (defvar *v* 2) *v*") == Value::integer(1));
    CHECK(run_value("(defparameter *v* 1) (defparameter *v* 2) *v*") == Value::integer(2));
}

TEST_CASE("progv binds a computed symbol list") {
    CHECK(run_value("(defvar *v* 0) (progv '(*v*) (list 7) *v*)") == Value::integer(7));
    CHECK(run_value("(defvar *v* 0) (progn (progv '(*v*) (list 7) *v*) *v*)") ==
          Value::integer(0));
    CHECK(run_value("(defvar *v* 0) (progv nil nil *v*)") == Value::integer(0));
    CHECK(run_value("(defvar *v* 0) (progv nil (list 9) *v*)") == Value::integer(0));
    // excess symbols are bound to nil
    CHECK(run_value("(defvar *v* 5) (progv '(*v*) nil *v*)").is_nil());
}

TEST_CASE("progv conditional law: a branch-selected symbol list rebinds iff chosen") {
    for (const char* flag : {"t", "nil"}) {
        std::string text = std::string("(defvar *s* 0) (defvar *b* ") + flag + ")" +
                           "(list (progv (if *b* '(*s*) nil) (list 42) *s*) *s*)";
        Value v = run_value(text);
        bool chosen = std::string(flag) == "t";
        CHECK(v == Value::list({Value::integer(chosen ? 42 : 0), Value::integer(0)}));
    }
}

TEST_CASE("shadowing law: a self-binding hides mutations from the outer cell") {
    Value v = run_value("(defvar *s* nil) (push 0 *s*)"
                        "(let ((*s* *s*)) (push 1 *s*))"
                        "*s*");
    CHECK(v == int_list({0}));
}

TEST_CASE("dynamic-extent discipline survives error unwinding") {
    RuntimeState state;
    auto root = std::make_shared<LexEnv>();
    eval(parse_one("(defvar *v* 1)"), root, state);
    std::size_t depth = state.dyn.depth();
    CHECK_THROWS_AS(eval(parse_one("(let ((*v* 2)) (boom))"), root, state), Error);
    CHECK(state.dyn.depth() == depth);
    CHECK_THROWS_AS(eval(parse_one("(progv '(*v*) (list 3) (boom))"), root, state), Error);
    CHECK(state.dyn.depth() == depth);
    CHECK(eval(parse_one("*v*"), root, state) == Value::integer(1));
}

TEST_CASE("princ records discrete tokens and returns its argument") {
    auto r = run("(princ 6) (princ 'sym) (princ \"str\") (princ nil) (princ (list 3 2 1))");
    CHECK(r.output == std::vector<std::string>{"6", "sym", "str", "nil", "(3 2 1)"});
    CHECK(run_value("(princ 6)") == Value::integer(6));
}

TEST_CASE("multiple values collapse in single-value context") {
    CHECK(run_value("(values 1 2 3)") == Value::integer(1));
    CHECK(run_value("(values)").is_nil());
    CHECK(run_value("(multiple-value-list (values 1 2))") == int_list({1, 2}));
    CHECK(run_value("(multiple-value-list 7)") == int_list({7}));
    CHECK(run_value("(multiple-value-list (values-list '(4 5)))") == int_list({4, 5}));
    // tail positions propagate multiple values
    CHECK(run_value("(multiple-value-list (progn 0 (values 1 2)))") == int_list({1, 2}));
    CHECK(run_value("(multiple-value-list (let ((x 1)) (values x 9)))") == int_list({1, 9}));
    CHECK(run_value("(multiple-value-list (if t (values 1 2) 3))") == int_list({1, 2}));
    // argument positions collapse
    CHECK(run_value("(list (values 1 2))") == int_list({1}));
    CHECK(run_value("(let ((x (values 8 9))) x)") == Value::integer(8));
}

TEST_CASE("the recording corpus leaves (3 2 1) on the stack") {
    auto r = run_program(parse(corpus::kWithBadRecording), MacroEnv{});
    CHECK(r.final_value.single() == int_list({3, 2, 1}));
    CHECK(r.output == std::vector<std::string>{"nil", "t"});
    // the toplevel rebinding unwinds, so the global stack is untouched
    CHECK(r.dyn.globals.at("*recording-stack*")->is_nil());
}

TEST_CASE("the merged-let rewrite loses all but the first recording") {
    auto r = run_program(parse(corpus::kWithBadRecordingV4), MacroEnv{});
    CHECK(r.final_value.single() == int_list({1}));
    CHECK(r.output == std::vector<std::string>{"nil", "t"});
}

TEST_CASE("the progv rewrite behaves like the original") {
    auto bad = observed_behavior(parse(corpus::kWithBadRecording), MacroEnv{});
    auto good = observed_behavior(parse(corpus::kWithGoodRecording), MacroEnv{});
    CHECK(bad.final_values == good.final_values);
    CHECK(bad.output == good.output);
    CHECK(bad.final_specials == good.final_specials);
    CHECK(bad.final_values == std::vector<Value>{int_list({3, 2, 1})});
}

TEST_CASE("with-bad and with-good print the same under both branch settings") {
    for (const char* init : {"t", "nil"}) {
        auto patch = [&](std::string_view source) {
            std::string text(source);
            auto pos = text.find("(defvar *a* t)");
            text.replace(pos, 14, std::string("(defvar *a* ") + init + ")");
            return text;
        };
        auto bad = run(patch(corpus::kWithBad));
        auto good = run(patch(corpus::kWithGood));
        CHECK(bad.output == good.output);
        CHECK(bad.final_value == good.final_value);
        REQUIRE(bad.output.size() == 5);
        CHECK(bad.output.back() == "0");
        CHECK(bad.output.front() == (std::string(init) == "t" ? "3" : "4"));
    }
}

TEST_CASE("observed_behavior watches every declared special") {
    auto rec = observed_behavior(parse("(defvar *a* 1) (defvar *b* 2) (setq *b* 5)"), MacroEnv{});
    REQUIRE(rec.final_specials.size() == 2);
    CHECK(rec.final_specials[0].first == "*a*");
    CHECK(rec.final_specials[0].second == Value::integer(1));
    CHECK(rec.final_specials[1].first == "*b*");
    CHECK(rec.final_specials[1].second == Value::integer(5));
}

TEST_CASE("empty program yields nil, no output, pristine globals") {
    auto r = run("");
    CHECK(r.final_value.is_nil());
    CHECK(r.output.empty());
    CHECK(r.dyn.globals.empty());
    CHECK(r.dyn.specials.empty());
}

TEST_CASE("eval does not mutate input trees") {
    SExpr form = parse_one("(let ((x (list 1 2))) (push 0 x) x)");
    SExpr copy = form;
    RuntimeState state;
    auto root = std::make_shared<LexEnv>();
    eval(form, root, state);
    CHECK(form == copy);
}

TEST_CASE("free_lexical_variables flags what a broken hoist leaves unbound") {
    std::set<std::string> known{"*within-recording*", "*recording-stack*"};
    // the body refers to n-p, but the local function no longer sees it
    SExpr broken = parse_one(
        "(flet ((g () (princ n-p)))"
        "  (if *within-recording*"
        "      (let ((n-p t)) (g))"
        "      (let ((n-p nil)) (g))))");
    auto free_vars = free_lexical_variables(broken, known);
    CHECK(free_vars == std::vector<std::string>{"n-p"});
    SExpr fixed = parse_one(
        "(flet ((g (n-p) (princ n-p)))"
        "  (if *within-recording* (g t) (g nil)))");
    CHECK(free_lexical_variables(fixed, known).empty());
}

TEST_CASE("run_program reports errors with the offending form's span") {
    try {
        run("(princ 1)\n(boom 2)");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnboundFunction);
        REQUIRE(e.span().has_value());
        CHECK(e.span()->begin == 10);
    }
}
