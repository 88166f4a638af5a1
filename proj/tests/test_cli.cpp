#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

// Runs the tool and captures stdout+stderr.
RunResult run_cli(const std::string& args) {
    RunResult result;
    std::string cmd = std::string(MACROBLOW_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0)
        result.output.append(buf, n);
    int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path temp_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("macroblow-test-" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const std::string corpus = MACROBLOW_CORPUS_DIR;

}  // namespace

TEST_CASE("analyze flags exponential macros with lint exit code") {
    auto r = run_cli("analyze " + corpus);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("with-bad is exponential") != std::string::npos);
    CHECK(r.output.find("with-good is linear") != std::string::npos);
    CHECK(r.output.find("with-worse is exponential (base 3.0") != std::string::npos);
}

TEST_CASE("analyze of macro-free files exits clean") {
    fs::path dir = temp_dir("clean");
    std::ofstream(dir / "plain.lisp") << "(defun f (x) (1+ x))\n(f 1)\n";
    auto r = run_cli("analyze " + dir.string());
    CHECK(r.exit_code == 0);
}

TEST_CASE("missing paths exit with an operational error") {
    auto r = run_cli("analyze /definitely/not/here");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("no such path") != std::string::npos);
}

TEST_CASE("parse errors are collected per file and reported") {
    fs::path dir = temp_dir("broken");
    std::ofstream(dir / "bad.lisp") << "(princ 6\n";
    std::ofstream(dir / "good.lisp") << "(defun f () 1)\n";
    auto r = run_cli("analyze " + dir.string());
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("bad.lisp") != std::string::npos);
    CHECK(r.output.find("unbalanced-paren") != std::string::npos);

    // a lint finding outranks the per-file error
    fs::copy_file(corpus + "/with-bad.lisp", dir / "with-bad.lisp");
    auto mixed = run_cli("analyze " + dir.string());
    CHECK(mixed.exit_code == 2);
    CHECK(mixed.output.find("unbalanced-paren") != std::string::npos);
}

TEST_CASE("expand prints a single level or the full expansion") {
    std::string file = corpus + "/with-bad.lisp";
    auto once = run_cli("expand " + file + " 2 --once");
    CHECK(once.exit_code == 0);
    CHECK(once.output.find("(with-bad (3)") != std::string::npos);  // unexpanded inside

    auto all = run_cli("expand " + file + " 2 --all --stats");
    CHECK(all.exit_code == 0);
    CHECK(all.output.find("(with-bad") == std::string::npos);  // fully expanded
    CHECK(all.output.find("invocations of with-bad: 15") != std::string::npos);

    auto echo = run_cli("expand " + file + " 3 --all");
    CHECK(echo.exit_code == 0);
    CHECK(echo.output.find("(blowup)") != std::string::npos);  // not a macro call

    auto out_of_range = run_cli("expand " + file + " 99");
    CHECK(out_of_range.exit_code == 1);
}

TEST_CASE("refactor reports the non-refactorable macro and verifies the rest") {
    auto r = run_cli("refactor " + corpus + " --strategy progv --verify --seed 42");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("with-problematic [progv]: not-refactorable "
                        "(lexical-binding-asymmetry)") != std::string::npos);
    CHECK(r.output.find("with-bad [progv]: refactored") != std::string::npos);
    CHECK(r.output.find(", 0 failed") != std::string::npos);
    // rewritten definitions go to stdout without --write
    CHECK(r.output.find("(defmacro with-bad ((x) &body body)") != std::string::npos);
}

TEST_CASE("the merged-let strategy fails verification with exit 3") {
    auto r = run_cli("refactor " + corpus + "/with-bad-recording.lisp "
                     "--strategy merged-let --verify --seed 7");
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("FAIL") != std::string::npos);
}

TEST_CASE("auto strategy falls back to flet where progv does not apply") {
    auto r = run_cli("refactor " + corpus + "/with-worse.lisp --verify --seed 5");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("with-worse [flet]: refactored") != std::string::npos);
}

TEST_CASE("refactor --write rewrites files in place, leaving the rest alone") {
    fs::path dir = temp_dir("write");
    fs::copy_file(corpus + "/with-bad.lisp", dir / "with-bad.lisp");
    std::string before = slurp(dir / "with-bad.lisp");
    auto r = run_cli("refactor " + dir.string() + " --strategy flet --write --seed 3");
    CHECK(r.exit_code == 0);
    std::string after = slurp(dir / "with-bad.lisp");
    CHECK(after != before);
    CHECK(after.find("flet") != std::string::npos);
    CHECK(after.find("(defun blowup") != std::string::npos);  // other forms preserved
    CHECK(after.find(",@body") != std::string::npos);
}

TEST_CASE("same seed produces byte-identical JSON reports") {
    fs::path dir = temp_dir("json");
    auto run_to = [&](const std::string& name, int seed) {
        std::string json = (dir / name).string();
        auto r = run_cli("refactor " + corpus + " --verify --seed " + std::to_string(seed) +
                         " --json " + json);
        CHECK(r.exit_code == 0);
        return slurp(json);
    };
    std::string a = run_to("a.json", 42);
    std::string b = run_to("b.json", 42);
    std::string c = run_to("c.json", 43);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(!a.empty());

    auto doc = nlohmann::json::parse(a);
    CHECK(doc.contains("version"));
    CHECK(doc.contains("files"));
    CHECK(doc.contains("findings"));
    CHECK(doc.contains("refactors"));
    CHECK(doc.contains("verdicts"));
}

TEST_CASE("compare reports ratios and depth estimates") {
    // before: exponential corpus; after: its linear rewrite
    fs::path before = temp_dir("cmp-before");
    fs::path after = temp_dir("cmp-after");
    fs::copy_file(corpus + "/with-bad.lisp", before / "m.lisp");
    fs::copy_file(corpus + "/with-good.lisp", after / "m.lisp");
    fs::path json = temp_dir("cmp-json") / "cmp.json";
    auto r = run_cli("compare " + before.string() + " " + after.string() + " --base 2 --json " +
                     json.string());
    CHECK(r.exit_code == 0);
    auto doc = nlohmann::json::parse(slurp(json));
    REQUIRE(doc.contains("comparison"));
    // 15 invocations against 4: ratio 3.75, log2 = 1.91
    CHECK(doc["comparison"]["invocation_ratio"].get<double>() == doctest::Approx(3.75));
    CHECK(doc["comparison"]["invocation_depth_estimate"].get<double>() ==
          doctest::Approx(1.91));

    auto same = run_cli("compare " + before.string() + " " + before.string());
    CHECK(same.exit_code == 0);
    CHECK(same.output.find("invocation ratio 1.00") != std::string::npos);

    // an after-tree with no macro invocations cannot be a baseline
    fs::path empty = temp_dir("cmp-empty");
    std::ofstream(empty / "n.lisp") << "(princ 1)\n";
    auto div = run_cli("compare " + before.string() + " " + empty.string());
    CHECK(div.exit_code == 1);
    CHECK(div.output.find("division-by-zero") != std::string::npos);
}
