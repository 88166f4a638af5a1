// macroblow: finds context macros whose templates splice the user body more
// than once (so nesting them blows the expansion up exponentially), rewrites
// them into linear equivalents, and checks the rewrite behaves identically.
//
//   macroblow analyze corpus/            lint a tree, exit 2 on findings
//   macroblow expand file.lisp 3 --all   show a form's full expansion
//   macroblow refactor corpus/ --verify  rewrite + differential check
//   macroblow compare before/ after/     invocation/size ratios

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "macroblow/analyzer.hpp"
#include "macroblow/corpus.hpp"
#include "macroblow/expander.hpp"
#include "macroblow/interpreter.hpp"
#include "macroblow/refactor.hpp"
#include "macroblow/report.hpp"
#include "macroblow/sexpr.hpp"

namespace fs = std::filesystem;
using namespace macroblow;

namespace {

constexpr int kExitClean = 0;
constexpr int kExitError = 1;
constexpr int kExitFinding = 2;
constexpr int kExitVerifyFailed = 3;

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::IndexOutOfRange, "cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Files are processed in sorted order so reports are stable.
std::vector<std::pair<std::string, std::string>> collect_sources(
    const std::vector<std::string>& paths) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        fs::path path(p);
        if (fs::is_directory(path)) {
            for (const auto& entry : fs::recursive_directory_iterator(path))
                if (entry.is_regular_file() && entry.path().extension() == ".lisp")
                    files.push_back(entry.path());
        } else if (fs::is_regular_file(path)) {
            files.push_back(path);
        } else {
            throw Error(ErrorCode::IndexOutOfRange, "no such path: " + p);
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : files)
        out.emplace_back(f.string(), slurp(f));
    return out;
}

void emit(const Report& report, const std::string& json_path) {
    Json doc = report.to_json();
    if (!json_path.empty()) {
        std::ofstream out(json_path, std::ios::binary);
        out << doc.dump(2) << "\n";
    }
    std::cout << render_report_text(doc);
}

struct LoadedCorpus {
    std::vector<std::pair<std::string, std::string>> sources;
    MacroEnv env;
    CorpusProfile profile;
    std::map<std::string, std::string> macro_file;        // macro -> defining file
    std::map<std::string, std::vector<std::string>> file_macros;
    std::vector<std::string> errors;  // per-file parse/definition failures
};

LoadedCorpus load(const std::vector<std::string>& paths) {
    LoadedCorpus corpus;
    auto sources = collect_sources(paths);
    // register macros first so profiling sees them all; redefinitions keep
    // the later definition, matching file processing order
    int file_id = 0;
    for (const auto& [name, text] : sources) {
        try {
            for (const auto& top : parse(text, file_id)) {
                if (top.form.headed_by("defmacro")) {
                    MacroDef def = define_macro(top, corpus.env);
                    corpus.macro_file[def.name] = name;
                    corpus.file_macros[name].push_back(def.name);
                }
            }
            corpus.sources.emplace_back(name, text);
            ++file_id;
        } catch (const Error& e) {
            std::string where = e.span() ? " at bytes " + std::to_string(e.span()->begin) +
                                               ".." + std::to_string(e.span()->end)
                                         : "";
            corpus.errors.push_back(name + ": " + e.what() + where);
        }
    }
    MacroEnv profiling_env = corpus.env;
    corpus.profile = profile_corpus(corpus.sources, profiling_env);
    return corpus;
}

void report_errors(const LoadedCorpus& corpus) {
    for (const auto& e : corpus.errors)
        std::cerr << "macroblow: " << e << "\n";
}

void fill_files(Report& report, const LoadedCorpus& corpus) {
    for (const auto& entry : corpus.profile.files) {
        auto it = corpus.file_macros.find(entry.name);
        report.files.push_back(file_json(
            entry, it == corpus.file_macros.end() ? std::vector<std::string>{} : it->second));
    }
}

std::vector<Finding> analyze_macros(const LoadedCorpus& corpus, int max_depth,
                                    double threshold) {
    std::vector<Finding> findings;
    for (const auto& def : corpus.env.defs()) {
        Finding f;
        auto it = corpus.macro_file.find(def.name);
        f.file = it == corpus.macro_file.end() ? "" : it->second;
        f.macro_name = def.name;
        f.span = def.span;
        try {
            f.curve = measure_growth(def, corpus.env, max_depth);
            f.diagnosis = classify(f.curve, count_body_splices(def), threshold);
        } catch (const Error& e) {
            f.diagnosis.macro_name = def.name;
            f.diagnosis.static_splices = count_body_splices(def);
            f.note = std::string("measurement unavailable: ") + e.what();
        }
        findings.push_back(std::move(f));
    }
    std::sort(findings.begin(), findings.end(), [](const Finding& a, const Finding& b) {
        return std::tie(a.file, a.span.begin) < std::tie(b.file, b.span.begin);
    });
    return findings;
}

int cmd_analyze(const std::vector<std::string>& paths, int max_depth, double threshold,
                const std::string& json_path) {
    LoadedCorpus corpus = load(paths);
    report_errors(corpus);
    Report report;
    fill_files(report, corpus);
    bool any_exponential = false;
    for (const auto& f : analyze_macros(corpus, max_depth, threshold)) {
        any_exponential =
            any_exponential || f.diagnosis.classification == Growth::Exponential;
        report.findings.push_back(finding_json(f));
    }
    emit(report, json_path);
    if (any_exponential)
        return kExitFinding;
    return corpus.errors.empty() ? kExitClean : kExitError;
}

int cmd_expand(const std::string& path, std::size_t index, bool once, bool stats_flag,
               std::int64_t cap) {
    std::string text = slurp(path);
    auto forms = parse(text);
    MacroEnv env;
    for (const auto& top : forms)
        if (top.form.headed_by("defmacro"))
            define_macro(top, env);
    if (index >= forms.size())
        throw Error(ErrorCode::IndexOutOfRange,
                    "form index " + std::to_string(index) + " out of range, file has " +
                        std::to_string(forms.size()) + " forms");
    ExpansionStats stats;
    SExpr result;
    if (once) {
        stats.nodes_before = node_count(forms[index].form);
        result = macroexpand_1(forms[index].form, env, stats).first;
        stats.nodes_after = node_count(result);
    } else {
        result = macroexpand_all(forms[index].form, env, stats, cap);
    }
    std::cout << print(result) << "\n";
    if (stats_flag) {
        std::cout << "nodes: " << stats.nodes_before << " -> " << stats.nodes_after << "\n";
        for (const auto& [name, count] : stats.invocations)
            std::cout << "invocations of " << name << ": " << count << "\n";
    }
    return kExitClean;
}

// Differential-test setup for a macro living in an arbitrary source file:
// the file's own defvars and defuns become the program prelude, its unary
// and nullary functions become candidate body statements.
GeneratorOptions options_from_file(const std::string& text, const MacroDef& def) {
    GeneratorOptions opt;
    for (const auto& top : parse(text)) {
        if (top.form.headed_by("defvar") || top.form.headed_by("defparameter")) {
            auto parts = top.form.tail().elements();
            if (parts.empty() || !parts[0].is_symbol())
                continue;
            std::string init = parts.size() > 1 ? print(parts[1]) : "nil";
            std::vector<std::string> choices{init};
            if (init != "nil")
                choices.push_back("nil");
            opt.randomized_specials.emplace_back(parts[0].symbol_name(), std::move(choices));
        } else if (top.form.headed_by("defun")) {
            opt.support_code += print(top.form) + "\n";
            auto parts = top.form.tail().elements();
            if (parts.size() < 2 || !parts[0].is_symbol() || !parts[1].is_list())
                continue;
            std::size_t arity = parts[1].list_length();
            if (arity == 0)
                opt.body_templates.push_back("(" + parts[0].symbol_name() + ")");
            else if (arity == 1)
                opt.body_templates.push_back("(" + parts[0].symbol_name() + " %d)");
        }
    }
    opt.body_templates.push_back("(princ %d)");
    detail::ParamRole role;
    for (const auto& p : def.required_params)
        detail::scan_param_role(def.template_payload, p, role);
    opt.param_is_variable = role.bound_as_variable;
    if (opt.param_is_variable) {
        opt.body_templates.push_back("(princ %v)");
        opt.body_templates.push_back("(setq %v t)");
    }
    return opt;
}

int cmd_refactor(const std::vector<std::string>& paths, const std::string& strategy_flag,
                 bool write, bool verify, int gen_count, std::uint64_t seed, int max_depth,
                 double threshold, const std::string& json_path) {
    Strategy strategy = Strategy::Auto;
    if (strategy_flag == "flet")
        strategy = Strategy::Flet;
    else if (strategy_flag == "progv")
        strategy = Strategy::Progv;
    else if (strategy_flag == "merged-let")
        strategy = Strategy::MergedLet;
    else if (strategy_flag != "auto")
        throw Error(ErrorCode::IndexOutOfRange, "unknown strategy: " + strategy_flag);

    LoadedCorpus corpus = load(paths);
    report_errors(corpus);
    Report report;
    fill_files(report, corpus);
    GensymSource gensyms("g", seed);
    bool any_verify_failure = false;
    std::map<std::string, MacroDef> rewritten;

    for (const auto& finding : analyze_macros(corpus, max_depth, threshold)) {
        report.findings.push_back(finding_json(finding));
        if (finding.diagnosis.classification != Growth::Exponential)
            continue;
        const MacroDef& def = *corpus.env.find(finding.macro_name);
        RefactorOutcome outcome = refactor_macro(def, gensyms, strategy);
        report.refactors.push_back(refactor_json(outcome, finding.file));
        if (!outcome.refactored)
            continue;
        rewritten[def.name] = outcome.new_def;
        if (!write)
            std::cout << print(outcome.new_def.definition_form()) << "\n";
        if (verify) {
            std::string file_text = slurp(finding.file);
            std::vector<std::pair<std::string, std::string>> programs{
                {fs::path(finding.file).filename().string(), file_text}};
            auto generated = generate_programs(def, options_from_file(file_text, def), seed,
                                               gen_count);
            programs.insert(programs.end(), generated.begin(), generated.end());
            for (const auto& verdict : verify_equivalence(def, outcome.new_def, programs)) {
                any_verify_failure = any_verify_failure || !verdict.pass;
                report.verdicts.push_back(verdict_json(verdict, def.name, outcome.strategy));
            }
        }
    }

    if (write) {
        for (const auto& [file, text] : corpus.sources) {
            bool changed = false;
            std::string out;
            for (const auto& top : parse(text)) {
                SExpr form = top.form;
                if (form.headed_by("defmacro") && form.tail().is_cons() &&
                    form.tail().head().is_symbol()) {
                    auto it = rewritten.find(form.tail().head().symbol_name());
                    if (it != rewritten.end()) {
                        form = it->second.definition_form();
                        changed = true;
                    }
                }
                out += print(form) + "\n\n";
            }
            if (changed) {
                std::ofstream o(file, std::ios::binary);
                o << out;
            }
        }
    }

    emit(report, json_path);
    if (any_verify_failure)
        return kExitVerifyFailed;
    return corpus.errors.empty() ? kExitClean : kExitError;
}

int cmd_compare(const std::string& before_dir, const std::string& after_dir, double base,
                const std::string& json_path) {
    LoadedCorpus before = load({before_dir});
    LoadedCorpus after = load({after_dir});
    report_errors(before);
    report_errors(after);
    ProfileComparison cmp = compare_profiles(before.profile, after.profile, base);
    Report report;
    fill_files(report, before);
    fill_files(report, after);
    report.comparison = comparison_json(cmp, base);
    emit(report, json_path);
    return before.errors.empty() && after.errors.empty() ? kExitClean : kExitError;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"exponential macro expansion linter and rewriter"};
    app.require_subcommand(1);

    std::vector<std::string> paths;
    std::string json_path;
    std::string strategy = "auto";
    std::string before_dir, after_dir, file;
    std::size_t form_index = 0;
    int max_depth = 6;
    int gen_count = 20;
    std::int64_t cap = kDefaultExpansionCap;
    std::uint64_t seed = 1;
    double base = 2.0;
    double threshold = 1.5;
    bool once = false, all = false, stats = false, write = false, verify = false;

    auto* analyze = app.add_subcommand("analyze", "detect exponential macros");
    analyze->add_option("paths", paths, "files or directories")->required();
    analyze->add_option("--max-depth", max_depth, "growth curve depth");
    analyze->add_option("--threshold", threshold, "exponential ratio threshold");
    analyze->add_option("--json", json_path, "write the JSON report here");

    auto* expand = app.add_subcommand("expand", "show a toplevel form's macro expansion");
    expand->add_option("path", file, "source file")->required();
    expand->add_option("index", form_index, "toplevel form index, 0-based")->required();
    expand->add_flag("--once", once, "single-step expansion");
    expand->add_flag("--all", all, "full recursive expansion (default)");
    expand->add_flag("--stats", stats, "print invocation and node counts");
    expand->add_option("--cap", cap, "invocation cap for full expansion");

    auto* refactor = app.add_subcommand("refactor", "rewrite exponential macros");
    refactor->add_option("paths", paths, "files or directories")->required();
    refactor->add_option("--strategy", strategy, "flet|progv|merged-let|auto");
    refactor->add_flag("--write", write, "rewrite files in place");
    refactor->add_flag("--verify", verify, "differential-test the rewrites");
    refactor->add_option("--gen-count", gen_count, "generated programs per macro");
    refactor->add_option("--seed", seed, "seed for generated names and programs");
    refactor->add_option("--max-depth", max_depth, "growth curve depth");
    refactor->add_option("--threshold", threshold, "exponential ratio threshold");
    refactor->add_option("--json", json_path, "write the JSON report here");

    auto* compare = app.add_subcommand("compare", "compare two trees' expansion profiles");
    compare->add_option("before", before_dir, "baseline tree")->required();
    compare->add_option("after", after_dir, "comparison tree")->required();
    compare->add_option("--base", base, "growth base for depth estimates");
    compare->add_option("--json", json_path, "write the JSON report here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(analyze))
            return cmd_analyze(paths, max_depth, threshold, json_path);
        if (app.got_subcommand(expand))
            return cmd_expand(file, form_index, once, stats, cap);
        if (app.got_subcommand(refactor))
            return cmd_refactor(paths, strategy, write, verify, gen_count, seed, max_depth,
                                threshold, json_path);
        if (app.got_subcommand(compare))
            return cmd_compare(before_dir, after_dir, base, json_path);
    } catch (const Error& e) {
        std::cerr << "macroblow: " << e.what();
        if (e.span().has_value())
            std::cerr << " at bytes " << e.span()->begin << ".." << e.span()->end;
        std::cerr << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "macroblow: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
