#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace csm {

// One method's accuracy on every task, in report task order.
struct MethodResult {
    std::string method;
    std::string group;  // reference | task_arithmetic_based | adamerging_based | other
    std::vector<double> per_task;
    double average = 0.0;
    // Averages over task subsets, e.g. "seen" / "unseen" in the generalization protocol.
    std::map<std::string, double> group_averages;

    friend bool operator==(const MethodResult &, const MethodResult &) = default;
};

struct EvalReport {
    std::vector<std::string> tasks;
    std::vector<std::string> task_groups;  // parallel to tasks; empty when unused
    std::vector<MethodResult> methods;
    nlohmann::json metadata = nlohmann::json::object();

    // Appends a row; the average (and any group averages) are computed here.
    MethodResult & add(const std::string & method, const std::string & group, std::vector<double> per_task);
    const MethodResult * find(const std::string & method) const;

    friend bool operator==(const EvalReport &, const EvalReport &) = default;
};

// RFC-4180 CSV, header "method,group,task,accuracy"; one row per (method, task), then one
// "average" row per method and one "average_<group>" row per task subset. Four decimals.
std::string report_to_csv(const EvalReport & report);
nlohmann::json report_to_json(const EvalReport & report);
EvalReport report_from_json(const nlohmann::json & j);

enum class ReportFormat { csv, json };

// Writes <dir>/<stem>.csv and/or <dir>/<stem>.json.
std::vector<std::filesystem::path> emit_report(const EvalReport & report, const std::set<ReportFormat> & formats,
                                               const std::filesystem::path & dir, const std::string & stem = "report");

// Fixed-width text table for terminals.
std::string report_to_table(const EvalReport & report);

std::string csv_escape(const std::string & field);

} // namespace csm
