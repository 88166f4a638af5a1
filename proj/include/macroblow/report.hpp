#pragma once

// The machine-readable report: the JSON document is the contract, the
// human rendering is derived from it and never the other way around.
// nlohmann::json keeps object keys sorted, so equal inputs serialize to
// identical bytes.

#include <json.hpp>

#include <string>
#include <vector>

#include "macroblow/analyzer.hpp"
#include "macroblow/refactor.hpp"

namespace macroblow {

inline constexpr std::string_view kToolVersion = "0.1.0";

using Json = nlohmann::json;

struct Finding {
    std::string file;
    std::string macro_name;
    SourceSpan span;
    BlowupDiagnosis diagnosis;
    GrowthCurve curve;
    std::string note;  // set when measurement was not possible
};

struct Report {
    std::vector<Json> files;
    std::vector<Json> findings;
    std::vector<Json> refactors;
    std::vector<Json> verdicts;
    Json comparison;  // null unless a comparison ran

    Json to_json() const {
        Json doc;
        doc["version"] = std::string(kToolVersion);
        doc["files"] = files;
        doc["findings"] = findings;
        doc["refactors"] = refactors;
        doc["verdicts"] = verdicts;
        if (!comparison.is_null())
            doc["comparison"] = comparison;
        return doc;
    }
};

inline Json finding_json(const Finding& f) {
    Json j;
    j["file"] = f.file;
    j["macro"] = f.macro_name;
    j["span"] = {{"begin", f.span.begin}, {"end", f.span.end}};
    j["splices"] = f.diagnosis.static_splices;
    j["classification"] = growth_name(f.diagnosis.classification);
    if (f.diagnosis.classification == Growth::Exponential)
        j["growth_base"] = f.diagnosis.fitted_base;
    j["predicted_size_depth5"] = f.diagnosis.predicted_size(5);
    j["sizes"] = f.curve.sizes;
    j["invocations"] = f.curve.invocations;
    if (f.curve.truncated)
        j["truncated"] = true;
    if (!f.note.empty())
        j["note"] = f.note;
    return j;
}

inline Json refactor_json(const RefactorOutcome& out, const std::string& file) {
    Json j;
    j["file"] = file;
    j["macro"] = out.macro_name;
    j["strategy"] = strategy_name(out.strategy);
    j["status"] = out.refactored ? "refactored" : "not-refactorable";
    if (!out.refactored)
        j["reason"] = out.reason;
    if (out.size_before > 0) {
        j["size_before"] = out.size_before;
        if (out.refactored)
            j["size_after"] = out.size_after;
    }
    if (out.refactored)
        j["rewritten"] = print(out.new_def.definition_form());
    return j;
}

inline Json verdict_json(const EquivalenceVerdict& v, const std::string& macro_name,
                         Strategy strategy) {
    Json j;
    j["macro"] = macro_name;
    j["strategy"] = strategy_name(strategy);
    j["program"] = v.program;
    j["pass"] = v.pass;
    if (!v.detail.empty())
        j["detail"] = v.detail;
    return j;
}

inline Json comparison_json(const ProfileComparison& cmp, double base) {
    Json j;
    j["base"] = base;
    j["invocation_ratio"] = round2(cmp.invocations.ratio);
    j["invocation_depth_estimate"] = round2(cmp.invocations.depth_estimate);
    j["node_ratio"] = round2(cmp.nodes.ratio);
    j["node_depth_estimate"] = round2(cmp.nodes.depth_estimate);
    return j;
}

inline Json file_json(const CorpusProfile::FileEntry& entry,
                      const std::vector<std::string>& macros) {
    Json j;
    j["path"] = entry.name;
    j["toplevel_forms"] = entry.toplevel_forms;
    j["macros"] = macros;
    j["invocations"] = entry.stats.total_invocations();
    j["nodes_before"] = entry.stats.nodes_before;
    j["nodes_after"] = entry.stats.nodes_after;
    return j;
}

// One line per item, built from the serialized report.
inline std::string render_report_text(const Json& doc) {
    std::string out;
    for (const auto& f : doc.value("findings", Json::array())) {
        out += f.value("file", "") + ": " + f.value("macro", "") + " is " +
               f.value("classification", "");
        if (f.contains("growth_base"))
            out += " (base " + std::to_string(f["growth_base"].get<double>()).substr(0, 4) + ")";
        out += ", " + std::to_string(f.value("splices", 0)) + " body splice(s)";
        if (f.contains("predicted_size_depth5"))
            out += ", predicted size at depth 5: " +
                   std::to_string(f["predicted_size_depth5"].get<long long>());
        out += "\n";
    }
    for (const auto& r : doc.value("refactors", Json::array())) {
        out += r.value("macro", "") + " [" + r.value("strategy", "") + "]: " +
               r.value("status", "");
        if (r.contains("reason"))
            out += " (" + r.value("reason", "") + ")";
        if (r.contains("size_before") && r.contains("size_after"))
            out += ", depth-4 expansion " + std::to_string(r["size_before"].get<long long>()) +
                   " -> " + std::to_string(r["size_after"].get<long long>()) + " nodes";
        out += "\n";
    }
    if (doc.contains("comparison")) {
        const auto& c = doc["comparison"];
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "invocation ratio %.2f (depth estimate %.2f), node ratio %.2f (depth "
                      "estimate %.2f)\n",
                      c["invocation_ratio"].get<double>(),
                      c["invocation_depth_estimate"].get<double>(),
                      c["node_ratio"].get<double>(), c["node_depth_estimate"].get<double>());
        out += buf;
    }
    std::size_t passed = 0, failed = 0;
    for (const auto& v : doc.value("verdicts", Json::array()))
        (v.value("pass", false) ? passed : failed) += 1;
    if (passed + failed > 0) {
        out += "equivalence: " + std::to_string(passed) + " passed, " + std::to_string(failed) +
               " failed\n";
        for (const auto& v : doc.value("verdicts", Json::array()))
            if (!v.value("pass", false))
                out += "  FAIL " + v.value("macro", "") + " on " + v.value("program", "") +
                       ": " + v.value("detail", "") + "\n";
    }
    return out;
}

}  // namespace macroblow
