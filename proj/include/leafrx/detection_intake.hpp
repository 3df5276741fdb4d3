#pragma once

// Detector-report intake: label vocabulary, token filtering, report parsing
// and the external detector process runner.

#include <array>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace leafrx {

/// Disease vocabulary. Extending it means adding an enumerator here and a
/// row to kDiseaseVocabulary; enumerator order is the canonical label order.
enum class DiseaseLabel { Rust, Miner, Phoma };

inline constexpr std::array<std::pair<DiseaseLabel, std::string_view>, 3> kDiseaseVocabulary{{
    {DiseaseLabel::Rust, "Rust"},
    {DiseaseLabel::Miner, "Miner"},
    {DiseaseLabel::Phoma, "Phoma"},
}};

std::string_view to_string(DiseaseLabel label) noexcept;

/// Case-insensitive exact match after trimming whitespace and punctuation.
std::optional<DiseaseLabel> canonicalize_label(std::string_view token);

struct LabelFilterResult {
    std::vector<DiseaseLabel> kept;    // input order, first occurrence only
    std::vector<std::string> dropped;  // verbatim
};

/// Splits noisy OCR-style tokens into vocabulary labels and everything else.
LabelFilterResult filter_labels(const std::vector<std::string>& raw_tokens);

struct BoundingBox {
    double x = 0, y = 0, w = 0, h = 0;
    bool operator==(const BoundingBox&) const = default;
};

struct Point {
    double x = 0, y = 0;
    bool operator==(const Point&) const = default;
};

struct DetectionFinding {
    DiseaseLabel label = DiseaseLabel::Rust;
    double confidence = 0.0;
    std::optional<BoundingBox> bbox;
    std::optional<std::vector<Point>> polygon;

    bool operator==(const DetectionFinding&) const = default;
};

/// What intake removed before findings reached downstream modules.
struct IntakeStats {
    std::size_t dropped_out_of_vocabulary = 0;
    std::size_t dropped_below_floor = 0;
    std::vector<std::string> dropped_labels;

    bool operator==(const IntakeStats&) const = default;
};

struct DetectionReport {
    std::string image_id;
    std::string detector_name;
    std::string detector_version;
    std::optional<std::string> captured_at;  // RFC 3339
    std::vector<DetectionFinding> findings;
    IntakeStats intake;

    bool operator==(const DetectionReport&) const = default;
};

/// Malformed or schema-violating report. `byte_offset` is set for JSON syntax errors.
class ReportError : public std::runtime_error {
public:
    explicit ReportError(const std::string& what,
                         std::optional<std::size_t> byte_offset = std::nullopt)
        : std::runtime_error(what), byte_offset_(byte_offset) {}

    std::optional<std::size_t> byte_offset() const noexcept { return byte_offset_; }

private:
    std::optional<std::size_t> byte_offset_;
};

struct IntakeOptions {
    double confidence_floor = 0.25;
};

DetectionReport parse_report(std::string_view bytes, const IntakeOptions& opts = {});
DetectionReport parse_report_json(const nlohmann::json& j, const IntakeOptions& opts = {});

/// Canonical wire form (schema keys only; intake stats are not serialized).
nlohmann::json report_to_json(const DetectionReport& report);

/// Intake statistics as reported alongside a diagnosis.
nlohmann::json intake_to_json(const IntakeStats& stats);

bool is_rfc3339(std::string_view s);

class DetectorError : public std::runtime_error {
public:
    DetectorError(const std::string& what, std::string stderr_text = {}, int exit_code = -1)
        : std::runtime_error(what), stderr_(std::move(stderr_text)), exit_code_(exit_code) {}

    const std::string& stderr_text() const noexcept { return stderr_; }
    int exit_code() const noexcept { return exit_code_; }

private:
    std::string stderr_;
    int exit_code_;
};

struct DetectorOptions {
    std::chrono::milliseconds timeout{120000};
    IntakeOptions intake;
};

/// Runs `command_template` through /bin/sh with every "{image}" replaced by
/// the shell-quoted image path, then parses the report printed on stdout.
DetectionReport run_external_detector(const std::filesystem::path& image_path,
                                      const std::string& command_template,
                                      const DetectorOptions& opts = {});

/// Caps how many detector processes run at once across threads.
void set_detector_process_cap(std::size_t cap);

}  // namespace leafrx
