#pragma once

// Decision fusion: merges detection findings with per-disease grounded
// answers into a recommendation report, and renders it.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leafrx/detection_intake.hpp"
#include "leafrx/rag_engine.hpp"

namespace leafrx {

class FusionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Severity { low, moderate, high };
enum class OverallStatus { healthy, diseased, inconclusive };

std::string_view to_string(Severity s) noexcept;
std::string_view to_string(OverallStatus s) noexcept;

/// Thresholds of the severity rule:
///   high     if max_confidence >= high_confidence and finding_count >= high_count
///   low      if max_confidence <  low_confidence
///   moderate otherwise
struct SeverityRule {
    double low_confidence = 0.5;
    double high_confidence = 0.8;
    std::size_t high_count = 3;

    Severity classify(std::size_t finding_count, double max_confidence) const noexcept;
};

struct DiseaseSection {
    DiseaseLabel label = DiseaseLabel::Rust;
    double max_confidence = 0.0;
    std::size_t finding_count = 0;
    GroundedAnswer answer;
    Severity severity_hint = Severity::low;

    bool operator==(const DiseaseSection&) const = default;
};

struct RecommendationReport {
    std::string image_id;
    std::string generated_at;  // RFC 3339, UTC
    std::vector<DiseaseSection> sections;
    OverallStatus overall_status = OverallStatus::healthy;

    bool operator==(const RecommendationReport&) const = default;
};

/// One section per distinct label, sorted by descending max_confidence then
/// canonical label order. Throws FusionError naming any label without an answer.
RecommendationReport fuse(const DetectionReport& report,
                          const std::map<DiseaseLabel, GroundedAnswer>& answers,
                          const std::string& generated_at, const SeverityRule& rule = {});

/// Distinct labels present in the report, canonical order.
std::vector<DiseaseLabel> detected_labels(const DetectionReport& report);

nlohmann::json report_to_json(const RecommendationReport& r);
RecommendationReport recommendation_from_json(const nlohmann::json& j);

enum class ReportFormat { json, markdown };

std::string render_report(const RecommendationReport& r, ReportFormat format);

inline constexpr std::string_view kUngroundedBanner = "UNGROUNDED — verify with an agronomist";

/// Current UTC time as RFC 3339 with second precision.
std::string utc_now_rfc3339();

}  // namespace leafrx
