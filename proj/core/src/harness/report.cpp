#include "csm/harness/report.h"

#include "csm/errors.h"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace csm {

namespace {

double mean_of(const std::vector<double> & v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fixed4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

void write_file(const std::filesystem::path & path, const std::string & content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f << content;
    if (!f) throw Error("failed writing " + path.string());
}

} // namespace

MethodResult & EvalReport::add(const std::string & method, const std::string & group, std::vector<double> per_task) {
    if (per_task.size() != tasks.size()) {
        throw ContractError("report row for " + method + " has " + std::to_string(per_task.size()) + " values for " +
                            std::to_string(tasks.size()) + " tasks");
    }
    MethodResult r;
    r.method = method;
    r.group = group;
    r.average = mean_of(per_task);
    if (!task_groups.empty()) {
        std::map<std::string, std::vector<double>> by_group;
        for (std::size_t i = 0; i < per_task.size(); ++i) by_group[task_groups.at(i)].push_back(per_task[i]);
        for (const auto & [g, vals] : by_group) r.group_averages[g] = mean_of(vals);
    }
    r.per_task = std::move(per_task);
    methods.push_back(std::move(r));
    return methods.back();
}

const MethodResult * EvalReport::find(const std::string & method) const {
    for (const auto & m : methods) {
        if (m.method == method) return &m;
    }
    return nullptr;
}

std::string csv_escape(const std::string & field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string report_to_csv(const EvalReport & report) {
    std::ostringstream out;
    out << "method,group,task,accuracy\r\n";
    for (const auto & m : report.methods) {
        for (std::size_t i = 0; i < report.tasks.size(); ++i) {
            out << csv_escape(m.method) << ',' << csv_escape(m.group) << ',' << csv_escape(report.tasks[i]) << ','
                << fixed4(m.per_task[i]) << "\r\n";
        }
        out << csv_escape(m.method) << ',' << csv_escape(m.group) << ",average," << fixed4(m.average) << "\r\n";
        for (const auto & [g, v] : m.group_averages) {
            out << csv_escape(m.method) << ',' << csv_escape(m.group) << ',' << csv_escape("average_" + g) << ','
                << fixed4(v) << "\r\n";
        }
    }
    return out.str();
}

nlohmann::json report_to_json(const EvalReport & report) {
    nlohmann::json j;
    j["tasks"] = report.tasks;
    j["task_groups"] = report.task_groups;
    j["methods"] = nlohmann::json::array();
    for (const auto & m : report.methods) {
        j["methods"].push_back({{"method", m.method},
                                {"group", m.group},
                                {"per_task", m.per_task},
                                {"average", m.average},
                                {"group_averages", m.group_averages}});
    }
    j["metadata"] = report.metadata;
    return j;
}

EvalReport report_from_json(const nlohmann::json & j) {
    try {
        EvalReport r;
        r.tasks = j.at("tasks").get<std::vector<std::string>>();
        r.task_groups = j.value("task_groups", std::vector<std::string>{});
        for (const auto & m : j.at("methods")) {
            MethodResult mr;
            mr.method = m.at("method").get<std::string>();
            mr.group = m.at("group").get<std::string>();
            mr.per_task = m.at("per_task").get<std::vector<double>>();
            mr.average = m.at("average").get<double>();
            mr.group_averages = m.value("group_averages", std::map<std::string, double>{});
            if (mr.per_task.size() != r.tasks.size()) throw ConfigError("report JSON: row length mismatch for " + mr.method);
            r.methods.push_back(std::move(mr));
        }
        r.metadata = j.value("metadata", nlohmann::json::object());
        return r;
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("malformed report JSON: ") + e.what());
    }
}

std::vector<std::filesystem::path> emit_report(const EvalReport & report, const std::set<ReportFormat> & formats,
                                               const std::filesystem::path & dir, const std::string & stem) {
    std::vector<std::filesystem::path> written;
    if (formats.count(ReportFormat::csv)) {
        written.push_back(dir / (stem + ".csv"));
        write_file(written.back(), report_to_csv(report));
    }
    if (formats.count(ReportFormat::json)) {
        written.push_back(dir / (stem + ".json"));
        write_file(written.back(), report_to_json(report).dump(2) + "\n");
    }
    return written;
}

std::string report_to_table(const EvalReport & report) {
    std::size_t w = 8;
    for (const auto & m : report.methods) w = std::max(w, m.method.size() + 2);
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(w), "method");
    out << buf;
    for (const auto & t : report.tasks) {
        std::snprintf(buf, sizeof buf, "%10s", t.c_str());
        out << buf;
    }
    out << "       avg\n";
    for (const auto & m : report.methods) {
        std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(w), m.method.c_str());
        out << buf;
        for (double v : m.per_task) {
            std::snprintf(buf, sizeof buf, "%10.2f", 100.0 * v);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "%10.2f", 100.0 * m.average);
        out << buf;
        for (const auto & [g, v] : m.group_averages) out << "  " << g << "=" << fixed4(v);
        out << '\n';
    }
    return out.str();
}

} // namespace csm
