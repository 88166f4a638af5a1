#pragma once

// Canonical exemplar corpus: the exponential context macros the toolchain
// is demonstrated and tested against, their linear rewrites, the known-bad
// merged-let rewrite, and the macro neither strategy can fix. The same
// sources ship as corpus/*.lisp for use with the CLI.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "macroblow/refactor.hpp"

namespace macroblow::corpus {

inline constexpr std::string_view kWithBad = R"(;; Context macro that splices the user body into both branches: nesting it
;; n levels deep expands to about 2^n copies of the innermost body.

(defvar *a* t)

(defmacro with-bad ((x) &body body)
  `(if *a*
       (progn (princ ,x) ,@body)
       (progn (princ (1+ ,x)) ,@body)))

(defun blowup ()
  (with-bad (3)
    (with-bad (6)
      (with-bad (9)
        (with-bad (12)
          (princ 0))))))

(blowup)
)";

inline constexpr std::string_view kWithGood = R"(;; Linear fix for with-bad: the body lives in one local function and each
;; branch calls it, so nesting grows the expansion by a constant.

(defvar *a* t)

(defmacro with-good ((x) &body body)
  `(flet ((call-body () ,@body))
     (if *a*
         (progn (princ ,x) (call-body))
         (progn (princ (1+ ,x)) (call-body)))))

(defun blowup-good ()
  (with-good (3)
    (with-good (6)
      (with-good (9)
        (with-good (12)
          (princ 0))))))

(blowup-good)
)";

inline constexpr std::string_view kWithWorse = R"(;; Three body splices: expansion size grows with base 3.

(defvar *a* t)

(defmacro with-worse ((x) &body body)
  `(if *a*
       (progn (princ ,x) ,@body)
       (progn (princ (1+ ,x)) ,@body ,@body)))

(defun blowup-worse ()
  (with-worse (3)
    (with-worse (6)
      (with-worse (9)
        (princ 0)))))

(blowup-worse)
)";

inline constexpr std::string_view kWithBadRecording = R"(;; Records values onto a stack kept in a dynamically scoped variable. The
;; stack and the are-we-nested flag are internal; callers get a variable of
;; their choosing (nested-p) telling them whether they run inside an
;; enclosing recording context. The body is spliced into both branches, so
;; the macro expands exponentially when nested.

(defvar *within-recording* nil)
(defvar *recording-stack* nil)

(defun do-something-and-record (x)
  (push x *recording-stack*)
  x)

(defun current-recordings ()
  *recording-stack*)

(defmacro with-bad-recording ((nested-p) &body body)
  `(if *within-recording*
       (let ((,nested-p t))
         ,@body)
       (let ((*within-recording* t)
             (*recording-stack* nil)
             (,nested-p nil))
         ,@body)))

(defun test-bad-recording ()
  (with-bad-recording (n-p)
    (princ n-p)
    (do-something-and-record 1)
    (with-bad-recording (n-p-2)
      (princ n-p-2)
      (do-something-and-record 2)
      (do-something-and-record 3))
    (current-recordings)))

(test-bad-recording)
)";

inline constexpr std::string_view kWithBadRecordingV2 = R"(;; Variant where the caller-named variable controls post-processing and may
;; be reassigned from the user body: the toplevel branch processes the
;; recordings after the body, the nested branch defers.

(defvar *within-recording* nil)
(defvar *recording-stack* nil)

(defun do-something-and-record (x)
  (push x *recording-stack*)
  x)

(defun process-recordings-v2 (control-p)
  (if control-p
      (princ *recording-stack*)
      (princ 'skipped))
  *recording-stack*)

(defmacro with-bad-recording-v2 ((control-p) &body body)
  `(if *within-recording*
       (let ((,control-p t))
         ,@body)
       (let ((*within-recording* t)
             (*recording-stack* nil)
             (,control-p nil))
         ,@body
         (process-recordings-v2 ,control-p))))

(defun test-bad-recording-v2 ()
  (with-bad-recording-v2 (c-p)
    (do-something-and-record 1)
    (princ c-p)
    (with-bad-recording-v2 (c-p-2)
      (do-something-and-record 2)
      (princ c-p-2)
      (setq c-p-2 nil)
      (do-something-and-record 3))
    (setq c-p t)))

(test-bad-recording-v2)
)";

inline constexpr std::string_view kWithBadRecordingV4 = R"(;; Merged-let rewrite of with-bad-recording: one binder, the branch
;; condition factored into the value forms. The (*recording-stack*
;; *recording-stack*) self-binding shadows the live stack in nested
;; invocations, so everything recorded inside is lost on exit: the test
;; returns (1) instead of (3 2 1).

(defvar *within-recording* nil)
(defvar *recording-stack* nil)

(defun do-something-and-record (x)
  (push x *recording-stack*)
  x)

(defun current-recordings ()
  *recording-stack*)

(defmacro with-bad-recording-v4 ((nested-p) &body body)
  `(let ((,nested-p (if *within-recording* t nil))
         (*within-recording* (if *within-recording* *within-recording* t))
         (*recording-stack* (if *within-recording* *recording-stack* nil)))
     ,@body))

(defun test-recording-v4 ()
  (with-bad-recording-v4 (n-p)
    (princ n-p)
    (do-something-and-record 1)
    (with-bad-recording-v4 (n-p-2)
      (princ n-p-2)
      (do-something-and-record 2)
      (do-something-and-record 3))
    (current-recordings)))

(test-recording-v4)
)";

inline constexpr std::string_view kWithGoodRecording = R"(;; Linear rewrite of with-bad-recording: one body splice, and the specials
;; are rebound through progv exactly when the toplevel branch would have
;; rebound them. Binding an empty symbol list leaves a special untouched,
;; which is what the self-binding dummy could not express. Return values
;; are preserved.

(defvar *within-recording* nil)
(defvar *recording-stack* nil)

(defun do-something-and-record (x)
  (push x *recording-stack*)
  x)

(defun current-recordings ()
  *recording-stack*)

(defmacro with-good-recording ((nested-p) &body body)
  `(let ((,nested-p (if *within-recording* t nil)))
     (progv (if ,nested-p nil '(*within-recording*)) (list t)
       (progv (if ,nested-p nil '(*recording-stack*)) (list nil)
         (values-list (multiple-value-list (progn ,@body)))))))

(defun test-good-recording ()
  (with-good-recording (n-p)
    (princ n-p)
    (do-something-and-record 1)
    (with-good-recording (n-p-2)
      (princ n-p-2)
      (do-something-and-record 2)
      (do-something-and-record 3))
    (current-recordings)))

(test-good-recording)
)";

inline constexpr std::string_view kNonRefactorable = R"(;; The else branch establishes a lexical binding for the caller-named
;; variable but the then branch does not, and which branch runs is unknown
;; until runtime. Hoisting the body into a local function would sever the
;; nested bodies from the outer binding, and a merged binder would have to
;; bind the variable in branches that never bound it; neither rewrite
;; preserves this macro.

(defvar *within-recording* nil)

(defmacro with-problematic ((control-p) &body body)
  `(if *within-recording*
       (progn ,@body)
       (let ((,control-p t))
         ,@body)))
)";

struct CorpusEntry {
    std::string file_name;
    std::string_view source;
    // the exponential macro the file demonstrates; empty when the file only
    // carries linear definitions
    std::string macro_name;
};

inline const std::vector<CorpusEntry>& entries() {
    static const std::vector<CorpusEntry> list = {
        {"with-bad.lisp", kWithBad, "with-bad"},
        {"with-good.lisp", kWithGood, ""},
        {"with-worse.lisp", kWithWorse, "with-worse"},
        {"with-bad-recording.lisp", kWithBadRecording, "with-bad-recording"},
        {"with-bad-recording-v2.lisp", kWithBadRecordingV2, "with-bad-recording-v2"},
        {"with-bad-recording-v4.lisp", kWithBadRecordingV4, ""},
        {"with-good-recording.lisp", kWithGoodRecording, ""},
        {"non-refactorable.lisp", kNonRefactorable, "with-problematic"},
    };
    return list;
}

inline std::vector<std::pair<std::string, std::string>> corpus_files() {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& e : entries())
        out.emplace_back(e.file_name, std::string(e.source));
    return out;
}

// Fetches a macro definition out of a corpus source.
inline MacroDef load_macro(std::string_view source, const std::string& name) {
    MacroEnv env;
    for (const auto& top : parse(source))
        if (top.form.headed_by("defmacro"))
            define_macro(top, env);
    const MacroDef* def = env.find(name);
    if (!def)
        throw Error(ErrorCode::UnboundFunction, "no macro " + name + " in corpus source");
    return *def;
}

inline const std::string kRecordingSupport =
    "(defun do-something-and-record (x)\n"
    "  (push x *recording-stack*)\n"
    "  x)\n"
    "(defun current-recordings ()\n"
    "  *recording-stack*)\n";

inline const std::string kRecordingV2Support = kRecordingSupport +
    "(defun process-recordings-v2 (control-p)\n"
    "  (if control-p\n"
    "      (princ *recording-stack*)\n"
    "      (princ 'skipped))\n"
    "  *recording-stack*)\n";

// Differential-test configuration for each exponential corpus macro.
inline GeneratorOptions generator_options(const std::string& macro_name) {
    GeneratorOptions opt;
    if (macro_name == "with-bad" || macro_name == "with-worse") {
        opt.randomized_specials = {{"*a*", {"t", "nil"}}};
        opt.body_templates = {"(princ %d)", "(princ (list %d %d))"};
        opt.param_is_variable = false;
        return opt;
    }
    opt.randomized_specials = {{"*within-recording*", {"nil", "t"}},
                               {"*recording-stack*", {"nil", "(list 99 98)"}}};
    opt.param_is_variable = true;
    if (macro_name == "with-bad-recording-v2") {
        opt.support_code = kRecordingV2Support;
        opt.body_templates = {"(do-something-and-record %d)", "(princ %v)", "(princ %d)",
                              "(setq %v t)", "(setq %v nil)", "(current-recordings)"};
    } else {
        opt.support_code = kRecordingSupport;
        opt.body_templates = {"(do-something-and-record %d)", "(princ %v)", "(princ %d)",
                              "(current-recordings)"};
    }
    return opt;
}

// Hand-picked programs every rewrite of the named macro must preserve.
inline std::vector<std::pair<std::string, std::string>> fixed_programs(
    const std::string& macro_name) {
    std::vector<std::pair<std::string, std::string>> out;
    auto flip_a = [](std::string_view source, std::string_view init) {
        std::string text(source);
        auto pos = text.find("(defvar *a* t)");
        text.replace(pos, 14, "(defvar *a* " + std::string(init) + ")");
        return text;
    };
    if (macro_name == "with-bad") {
        out.emplace_back("blowup-a-t", flip_a(kWithBad, "t"));
        out.emplace_back("blowup-a-nil", flip_a(kWithBad, "nil"));
    } else if (macro_name == "with-worse") {
        out.emplace_back("blowup-worse-a-t", flip_a(kWithWorse, "t"));
        out.emplace_back("blowup-worse-a-nil", flip_a(kWithWorse, "nil"));
    } else if (macro_name == "with-bad-recording") {
        out.emplace_back("test-bad-recording", std::string(kWithBadRecording));
    } else if (macro_name == "with-bad-recording-v2") {
        out.emplace_back("test-bad-recording-v2", std::string(kWithBadRecordingV2));
    }
    return out;
}

}  // namespace macroblow::corpus
