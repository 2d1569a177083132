#include "forgelab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace forgelab {

using json = nlohmann::json;

namespace {

json precision_to_json(const PrecisionMetrics& m) {
    return json{{"fc_raw", m.fc_raw},
                {"fc_report", m.fc_report},
                {"rc_raw", m.rc_raw},
                {"rc_report", m.rc_report},
                {"fad", m.fad},
                {"rad", m.rad},
                {"tsr", m.tsr},
                {"svr", m.svr},
                {"acc_base_forget", m.acc_base_forget},
                {"acc_unlearned_forget", m.acc_unlearned_forget},
                {"acc_base_retain", m.acc_base_retain},
                {"acc_unlearned_retain", m.acc_unlearned_retain},
                {"recovery", m.recovery}};
}

PrecisionMetrics precision_from_json(const json& j) {
    PrecisionMetrics m;
    m.fc_raw = j.at("fc_raw").get<double>();
    m.fc_report = j.at("fc_report").get<double>();
    m.rc_raw = j.at("rc_raw").get<double>();
    m.rc_report = j.at("rc_report").get<double>();
    m.fad = j.at("fad").get<double>();
    m.rad = j.at("rad").get<double>();
    m.tsr = j.at("tsr").get<double>();
    m.svr = j.at("svr").get<double>();
    m.acc_base_forget = j.at("acc_base_forget").get<double>();
    m.acc_unlearned_forget = j.at("acc_unlearned_forget").get<double>();
    m.acc_base_retain = j.at("acc_base_retain").get<double>();
    m.acc_unlearned_retain = j.at("acc_unlearned_retain").get<double>();
    m.recovery = j.at("recovery").get<double>();
    return m;
}

}  // namespace

json AuditReport::to_json() const {
    json precisions_json = json::object();
    for (const auto& [name, m] : precisions) precisions_json[name] = precision_to_json(m);
    return json{{"schema_version", schema_version},
                {"method", method},
                {"seed", seed},
                {"config_hash", config_hash},
                {"data_hash", data_hash},
                {"policy_hash", policy_hash},
                {"precisions", precisions_json}};
}

AuditReport AuditReport::from_json(const json& j) {
    AuditReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion)
        throw ProvenanceError("report schema_version " + std::to_string(r.schema_version) +
                              " does not match expected " + std::to_string(kReportSchemaVersion));
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.data_hash = j.at("data_hash").get<std::string>();
    r.policy_hash = j.at("policy_hash").get<std::string>();
    for (auto it = j.at("precisions").begin(); it != j.at("precisions").end(); ++it)
        r.precisions[it.key()] = precision_from_json(it.value());
    return r;
}

std::string metrics_csv_header() {
    return "method,precision,fc_raw,fc_report,rc_raw,rc_report,fad,rad,tsr,svr,recovery,seed\n";
}

std::string metrics_csv_rows(const AuditReport& report) {
    std::string out;
    char buf[320];
    for (const auto& [precision, m] : report.precisions) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%llu\n",
                      report.method.c_str(), precision.c_str(), m.fc_raw, m.fc_report, m.rc_raw,
                      m.rc_report, m.fad, m.rad, m.tsr, m.svr, m.recovery,
                      static_cast<unsigned long long>(report.seed));
        out += buf;
    }
    return out;
}

void write_report(const AuditReport& report, const std::string& dir) {
    {
        std::ofstream f(dir + "/report.json");
        if (!f) throw IoError("cannot write '" + dir + "/report.json'");
        f << report.to_json().dump(2) << "\n";
    }
    std::ofstream f(dir + "/metrics.csv");
    if (!f) throw IoError("cannot write '" + dir + "/metrics.csv'");
    f << metrics_csv_header() << metrics_csv_rows(report);
}

AuditReport load_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open report '" + path + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw IoError("malformed report '" + path + "': " + e.what());
    }
    return AuditReport::from_json(j);
}

namespace {

const std::vector<std::pair<std::string, double PrecisionMetrics::*>> kSummaryFields = {
    {"fc_report", &PrecisionMetrics::fc_report}, {"rc_report", &PrecisionMetrics::rc_report},
    {"fad", &PrecisionMetrics::fad},             {"rad", &PrecisionMetrics::rad},
    {"tsr", &PrecisionMetrics::tsr},             {"svr", &PrecisionMetrics::svr},
};

}  // namespace

std::vector<MethodSummary> aggregate_reports(const std::vector<AuditReport>& reports) {
    std::map<std::string, std::vector<const AuditReport*>> by_method;
    for (const auto& r : reports) by_method[r.method].push_back(&r);

    std::vector<MethodSummary> out;
    for (const auto& [method, runs] : by_method) {
        MethodSummary s;
        s.method = method;
        s.runs = static_cast<int>(runs.size());
        auto reduce = [&](const std::string& name, auto getter) {
            double sum = 0.0, sq = 0.0;
            int n = 0;
            for (const AuditReport* r : runs) {
                const auto v = getter(*r);
                if (!v.has_value()) continue;
                sum += *v;
                sq += *v * *v;
                ++n;
            }
            if (n == 0) return;
            const double mean = sum / n;
            s.mean[name] = mean;
            s.stddev[name] = n > 1 ? std::sqrt(std::max(0.0, sq / n - mean * mean)) : 0.0;
        };
        for (const auto& [name, field] : kSummaryFields) {
            reduce(name, [&](const AuditReport& r) -> std::optional<double> {
                const auto it = r.precisions.find("fp32");
                if (it == r.precisions.end()) return std::nullopt;
                return it->second.*field;
            });
        }
        reduce("recovery_int8", [](const AuditReport& r) -> std::optional<double> {
            const auto it = r.precisions.find("int8");
            if (it == r.precisions.end()) return std::nullopt;
            return it->second.recovery;
        });
        reduce("recovery_int4", [](const AuditReport& r) -> std::optional<double> {
            const auto it = r.precisions.find("int4");
            if (it == r.precisions.end()) return std::nullopt;
            return it->second.recovery;
        });
        out.push_back(std::move(s));
    }
    return out;
}

std::string summary_table(const std::vector<MethodSummary>& summaries) {
    std::string out = "method          runs  FC            RC            FAD           RAD           TSR           SVR\n";
    char buf[360];
    for (const auto& s : summaries) {
        auto cell = [&](const char* key) {
            char c[48];
            const auto m = s.mean.find(key);
            if (m == s.mean.end()) {
                std::snprintf(c, sizeof(c), "%-13s", "-");
            } else {
                std::snprintf(c, sizeof(c), "%6.2f±%-5.2f ", m->second, s.stddev.at(key));
            }
            return std::string(c);
        };
        std::snprintf(buf, sizeof(buf), "%-15s %-5d %s %s %s %s %s %s\n", s.method.c_str(), s.runs,
                      cell("fc_report").c_str(), cell("rc_report").c_str(), cell("fad").c_str(),
                      cell("rad").c_str(), cell("tsr").c_str(), cell("svr").c_str());
        out += buf;
    }
    return out;
}

std::string summary_csv(const std::vector<MethodSummary>& summaries) {
    std::string out =
        "method,runs,fc_report_mean,fc_report_std,rc_report_mean,rc_report_std,fad_mean,fad_std,"
        "rad_mean,rad_std,tsr_mean,tsr_std,svr_mean,svr_std,recovery_int8_mean,recovery_int4_mean\n";
    char buf[512];
    for (const auto& s : summaries) {
        auto mv = [&](const char* k) { return s.mean.count(k) ? s.mean.at(k) : std::nan(""); };
        auto sv = [&](const char* k) { return s.stddev.count(k) ? s.stddev.at(k) : std::nan(""); };
        std::snprintf(buf, sizeof(buf),
                      "%s,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                      s.method.c_str(), s.runs, mv("fc_report"), sv("fc_report"), mv("rc_report"),
                      sv("rc_report"), mv("fad"), sv("fad"), mv("rad"), sv("rad"), mv("tsr"), sv("tsr"),
                      mv("svr"), sv("svr"), mv("recovery_int8"), mv("recovery_int4"));
        out += buf;
    }
    return out;
}

}  // namespace forgelab
