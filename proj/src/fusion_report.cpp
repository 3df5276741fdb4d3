#include "leafrx/fusion_report.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <sstream>

namespace leafrx {

std::string_view to_string(Severity s) noexcept {
    switch (s) {
        case Severity::low: return "low";
        case Severity::moderate: return "moderate";
        case Severity::high: return "high";
    }
    return "?";
}

std::string_view to_string(OverallStatus s) noexcept {
    switch (s) {
        case OverallStatus::healthy: return "healthy";
        case OverallStatus::diseased: return "diseased";
        case OverallStatus::inconclusive: return "inconclusive";
    }
    return "?";
}

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const E (&values)[N], const char* what) {
    for (E v : values) {
        if (to_string(v) == s) return v;
    }
    throw FusionError(std::string("unknown ") + what + " '" + s + "'");
}

DiseaseLabel parse_label(const std::string& s) {
    for (const auto& [label, name] : kDiseaseVocabulary) {
        if (name == s) return label;
    }
    throw FusionError("unknown disease label '" + s + "'");
}

}  // namespace

Severity SeverityRule::classify(std::size_t finding_count, double max_confidence) const noexcept {
    if (max_confidence >= high_confidence && finding_count >= high_count) return Severity::high;
    if (max_confidence < low_confidence) return Severity::low;
    return Severity::moderate;
}

std::vector<DiseaseLabel> detected_labels(const DetectionReport& report) {
    std::vector<DiseaseLabel> labels;
    for (const auto& f : report.findings) labels.push_back(f.label);
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    return labels;
}

RecommendationReport fuse(const DetectionReport& report,
                          const std::map<DiseaseLabel, GroundedAnswer>& answers,
                          const std::string& generated_at, const SeverityRule& rule) {
    RecommendationReport out;
    out.image_id = report.image_id;
    out.generated_at = generated_at;

    std::map<DiseaseLabel, DiseaseSection> by_label;
    for (const auto& f : report.findings) {
        auto& s = by_label[f.label];
        s.label = f.label;
        s.max_confidence = s.finding_count == 0 ? f.confidence : std::max(s.max_confidence, f.confidence);
        ++s.finding_count;
    }
    for (auto& [label, section] : by_label) {
        auto it = answers.find(label);
        if (it == answers.end())
            throw FusionError("missing answer for detected label " + std::string(to_string(label)));
        section.answer = it->second;
        section.severity_hint = rule.classify(section.finding_count, section.max_confidence);
        out.sections.push_back(section);
    }
    // by_label iterates in canonical order, so a stable sort keeps that as the tiebreak
    std::stable_sort(out.sections.begin(), out.sections.end(),
                     [](const DiseaseSection& a, const DiseaseSection& b) {
                         return a.max_confidence > b.max_confidence;
                     });

    if (out.sections.empty())
        out.overall_status = OverallStatus::healthy;
    else if (std::none_of(out.sections.begin(), out.sections.end(),
                          [](const DiseaseSection& s) { return s.answer.grounded; }))
        out.overall_status = OverallStatus::inconclusive;
    else
        out.overall_status = OverallStatus::diseased;
    return out;
}

nlohmann::json report_to_json(const RecommendationReport& r) {
    auto sections = nlohmann::json::array();
    for (const auto& s : r.sections) {
        sections.push_back({{"label", to_string(s.label)},
                            {"max_confidence", s.max_confidence},
                            {"finding_count", s.finding_count},
                            {"severity_hint", to_string(s.severity_hint)},
                            {"answer", answer_to_json(s.answer)}});
    }
    return {{"image_id", r.image_id},
            {"generated_at", r.generated_at},
            {"overall_status", to_string(r.overall_status)},
            {"sections", std::move(sections)}};
}

RecommendationReport recommendation_from_json(const nlohmann::json& j) {
    static constexpr OverallStatus kStatuses[] = {OverallStatus::healthy, OverallStatus::diseased,
                                                  OverallStatus::inconclusive};
    static constexpr Severity kSeverities[] = {Severity::low, Severity::moderate, Severity::high};
    try {
        RecommendationReport r;
        r.image_id = j.at("image_id").get<std::string>();
        r.generated_at = j.at("generated_at").get<std::string>();
        r.overall_status = parse_enum(j.at("overall_status").get<std::string>(), kStatuses, "status");
        for (const auto& js : j.at("sections")) {
            DiseaseSection s;
            s.label = parse_label(js.at("label").get<std::string>());
            s.max_confidence = js.at("max_confidence").get<double>();
            s.finding_count = js.at("finding_count").get<std::size_t>();
            s.severity_hint = parse_enum(js.at("severity_hint").get<std::string>(), kSeverities, "severity");
            s.answer = answer_from_json(js.at("answer"));
            r.sections.push_back(std::move(s));
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FusionError(std::string("malformed recommendation report: ") + e.what());
    }
}

namespace {

std::string percent(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << v * 100.0 << "%";
    return os.str();
}

std::string render_markdown(const RecommendationReport& r) {
    std::ostringstream md;
    md << "# Coffee leaf diagnosis: " << r.image_id << "\n\n";
    md << "- Generated: " << r.generated_at << "\n";
    md << "- Status: " << to_string(r.overall_status) << "\n\n";
    if (r.sections.empty()) {
        md << "No disease detected.\n";
        return md.str();
    }
    for (const auto& s : r.sections) {
        md << "## " << to_string(s.label) << "\n\n";
        if (!s.answer.grounded) md << "> **" << kUngroundedBanner << "**\n\n";
        md << "- Severity: " << to_string(s.severity_hint) << "\n";
        md << "- Findings: " << s.finding_count << " (max confidence " << percent(s.max_confidence)
           << ")\n";
        std::ostringstream score;
        score.precision(3);
        score << s.answer.grounding_score;
        md << "- Grounding score: " << score.str() << "\n\n";
        md << s.answer.text << "\n\n";
        md << "Sources:\n";
        if (s.answer.citations.empty()) md << "- (none)\n";
        for (const auto& c : s.answer.citations) md << "- " << c << "\n";
        md << "\n";
    }
    return md.str();
}

}  // namespace

std::string render_report(const RecommendationReport& r, ReportFormat format) {
    if (format == ReportFormat::json) return report_to_json(r).dump(2);
    return render_markdown(r);
}

std::string utc_now_rfc3339() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace leafrx
