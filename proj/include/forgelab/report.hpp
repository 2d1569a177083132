#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgelab/common.hpp"

namespace forgelab {

constexpr int kReportSchemaVersion = 1;

struct PrecisionMetrics {
    double fc_raw = 0.0;
    double fc_report = 0.0;
    double rc_raw = 0.0;
    double rc_report = 0.0;
    double fad = 0.0;
    double rad = 0.0;
    double tsr = 0.0;
    double svr = 0.0;
    // Raw accuracies kept so fad/rad stay recomputable.
    double acc_base_forget = 0.0;
    double acc_unlearned_forget = 0.0;
    double acc_base_retain = 0.0;
    double acc_unlearned_retain = 0.0;
    double recovery = 0.0;
};

struct AuditReport {
    int schema_version = kReportSchemaVersion;
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string data_hash;
    std::string policy_hash;
    // Wall-clock provenance goes to the run log, never into report.json,
    // which must be byte-identical across identical runs.
    std::string timestamp;
    std::map<std::string, PrecisionMetrics> precisions;  // fp32 / int8 / int4

    nlohmann::json to_json() const;
    static AuditReport from_json(const nlohmann::json& j);
};

// report.json + metrics.csv under dir.
void write_report(const AuditReport& report, const std::string& dir);

AuditReport load_report(const std::string& path);

std::string metrics_csv_header();
std::string metrics_csv_rows(const AuditReport& report);

struct MethodSummary {
    std::string method;
    int runs = 0;
    std::map<std::string, double> mean;  // metric name -> mean (fp32)
    std::map<std::string, double> stddev;
};

// Groups per-run reports by method and reduces fp32 metrics (plus int4
// recovery) to mean and standard deviation.
std::vector<MethodSummary> aggregate_reports(const std::vector<AuditReport>& reports);

std::string summary_table(const std::vector<MethodSummary>& summaries);
std::string summary_csv(const std::vector<MethodSummary>& summaries);

}  // namespace forgelab
