#include "leafrx/detection_intake.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <regex>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

namespace leafrx {

std::string_view to_string(DiseaseLabel label) noexcept {
    for (const auto& [l, name] : kDiseaseVocabulary) {
        if (l == label) return name;
    }
    return "?";
}

namespace {

bool is_trim_char(unsigned char c) { return std::isspace(c) || std::ispunct(c); }

bool iequals(std::string_view a, std::string_view b) {
    return a.size() == b.size() &&
           std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) ==
                      std::tolower(static_cast<unsigned char>(y));
           });
}

}  // namespace

std::optional<DiseaseLabel> canonicalize_label(std::string_view token) {
    while (!token.empty() && is_trim_char(static_cast<unsigned char>(token.front())))
        token.remove_prefix(1);
    while (!token.empty() && is_trim_char(static_cast<unsigned char>(token.back())))
        token.remove_suffix(1);
    for (const auto& [label, name] : kDiseaseVocabulary) {
        if (iequals(token, name)) return label;
    }
    return std::nullopt;
}

LabelFilterResult filter_labels(const std::vector<std::string>& raw_tokens) {
    LabelFilterResult out;
    for (const auto& tok : raw_tokens) {
        if (auto label = canonicalize_label(tok)) {
            if (std::find(out.kept.begin(), out.kept.end(), *label) == out.kept.end())
                out.kept.push_back(*label);
        } else {
            out.dropped.push_back(tok);
        }
    }
    return out;
}

bool is_rfc3339(std::string_view s) {
    static const std::regex pattern(
        R"(^\d{4}-\d{2}-\d{2}[Tt ]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$)");
    return std::regex_match(s.begin(), s.end(), pattern);
}

namespace {

const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ReportError("missing required field '" + where + key + "'");
    return *it;
}

std::string require_string(const nlohmann::json& obj, const char* key, const std::string& where) {
    const auto& v = require(obj, key, where);
    if (!v.is_string()) throw ReportError("field '" + where + key + "' must be a string");
    return v.get<std::string>();
}

bool unit_range(double v) { return v >= 0.0 && v <= 1.0; }

double unit_number(const nlohmann::json& v, const std::string& what) {
    if (!v.is_number()) throw ReportError(what + " must be a number");
    const double d = v.get<double>();
    if (!unit_range(d)) throw ReportError(what + " out of range [0,1]");
    return d;
}

}  // namespace

DetectionReport parse_report(std::string_view bytes, const IntakeOptions& opts) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ReportError("malformed report JSON at byte " + std::to_string(e.byte) + ": " + e.what(),
                          e.byte);
    }
    return parse_report_json(j, opts);
}

DetectionReport parse_report_json(const nlohmann::json& j, const IntakeOptions& opts) {
    if (!j.is_object()) throw ReportError("report must be a JSON object");

    DetectionReport report;
    report.image_id = require_string(j, "image_id", "");
    if (report.image_id.empty()) throw ReportError("field 'image_id' must be non-empty");

    const auto& detector = require(j, "detector", "");
    if (!detector.is_object()) throw ReportError("field 'detector' must be an object");
    report.detector_name = require_string(detector, "name", "detector.");
    report.detector_version = require_string(detector, "version", "detector.");

    if (auto it = j.find("captured_at"); it != j.end() && !it->is_null()) {
        if (!it->is_string() || !is_rfc3339(it->get<std::string>()))
            throw ReportError("field 'captured_at' must be an RFC 3339 timestamp");
        report.captured_at = it->get<std::string>();
    }

    const auto& findings = require(j, "findings", "");
    if (!findings.is_array()) throw ReportError("field 'findings' must be an array");

    for (std::size_t i = 0; i < findings.size(); ++i) {
        const auto& f = findings[i];
        const std::string where = "finding " + std::to_string(i);
        if (!f.is_object()) throw ReportError(where + " must be an object");

        const auto label_it = f.find("label");
        if (label_it == f.end() || !label_it->is_string())
            throw ReportError(where + ": missing required field 'label'");
        const auto conf_it = f.find("confidence");
        if (conf_it == f.end()) throw ReportError(where + ": missing required field 'confidence'");
        const double confidence = unit_number(*conf_it, where + ": confidence");

        DetectionFinding finding;
        finding.confidence = confidence;

        if (auto b = f.find("bbox"); b != f.end() && !b->is_null()) {
            if (!b->is_array() || b->size() != 4) throw ReportError(where + ": bbox must be [x,y,w,h]");
            BoundingBox box{unit_number((*b)[0], where + ": bbox x"), unit_number((*b)[1], where + ": bbox y"),
                            unit_number((*b)[2], where + ": bbox w"), unit_number((*b)[3], where + ": bbox h")};
            if (box.x + box.w > 1.0 || box.y + box.h > 1.0)
                throw ReportError(where + ": bbox extends past the image");
            finding.bbox = box;
        }
        if (auto p = f.find("polygon"); p != f.end() && !p->is_null()) {
            if (!p->is_array() || p->size() < 3)
                throw ReportError(where + ": polygon needs at least 3 points");
            std::vector<Point> points;
            for (const auto& pt : *p) {
                if (!pt.is_array() || pt.size() != 2)
                    throw ReportError(where + ": polygon points must be [x,y]");
                points.push_back({unit_number(pt[0], where + ": polygon x"),
                                  unit_number(pt[1], where + ": polygon y")});
            }
            finding.polygon = std::move(points);
        }

        const auto raw_label = label_it->get<std::string>();
        const auto label = canonicalize_label(raw_label);
        if (!label) {
            ++report.intake.dropped_out_of_vocabulary;
            report.intake.dropped_labels.push_back(raw_label);
            continue;
        }
        if (confidence < opts.confidence_floor) {
            ++report.intake.dropped_below_floor;
            continue;
        }
        finding.label = *label;
        report.findings.push_back(std::move(finding));
    }
    return report;
}

nlohmann::json report_to_json(const DetectionReport& report) {
    nlohmann::json j;
    j["image_id"] = report.image_id;
    j["detector"] = {{"name", report.detector_name}, {"version", report.detector_version}};
    if (report.captured_at) j["captured_at"] = *report.captured_at;
    j["findings"] = nlohmann::json::array();
    for (const auto& f : report.findings) {
        nlohmann::json jf{{"label", to_string(f.label)}, {"confidence", f.confidence}};
        if (f.bbox) jf["bbox"] = {f.bbox->x, f.bbox->y, f.bbox->w, f.bbox->h};
        if (f.polygon) {
            auto pts = nlohmann::json::array();
            for (const auto& p : *f.polygon) pts.push_back({p.x, p.y});
            jf["polygon"] = std::move(pts);
        }
        j["findings"].push_back(std::move(jf));
    }
    return j;
}

nlohmann::json intake_to_json(const IntakeStats& stats) {
    return {{"dropped_out_of_vocabulary", stats.dropped_out_of_vocabulary},
            {"dropped_below_floor", stats.dropped_below_floor},
            {"dropped_labels", stats.dropped_labels}};
}

namespace {

class ProcessGate {
public:
    void set_cap(std::size_t cap) {
        std::lock_guard lock(mutex_);
        cap_ = std::max<std::size_t>(cap, 1);
        cv_.notify_all();
    }
    void acquire() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return running_ < cap_; });
        ++running_;
    }
    void release() {
        std::lock_guard lock(mutex_);
        --running_;
        cv_.notify_one();
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::size_t cap_ = 4;
    std::size_t running_ = 0;
};

ProcessGate& process_gate() {
    static ProcessGate gate;
    return gate;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'')
            out += "'\\''";
        else
            out.push_back(c);
    }
    out.push_back('\'');
    return out;
}

struct ProcessResult {
    int exit_code = -1;
    bool timed_out = false;
    std::string out;
    std::string err;
};

ProcessResult run_shell(const std::string& command, std::chrono::milliseconds timeout) {
    int out_pipe[2], err_pipe[2];
    if (pipe(out_pipe) != 0) throw DetectorError(std::string("pipe: ") + std::strerror(errno));
    if (pipe(err_pipe) != 0) {
        close(out_pipe[0]);
        close(out_pipe[1]);
        throw DetectorError(std::string("pipe: ") + std::strerror(errno));
    }

    const pid_t pid = fork();
    if (pid < 0) throw DetectorError(std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
        setpgid(0, 0);
        dup2(out_pipe[1], STDOUT_FILENO);
        dup2(err_pipe[1], STDERR_FILENO);
        close(out_pipe[0]);
        close(out_pipe[1]);
        close(err_pipe[0]);
        close(err_pipe[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    setpgid(pid, pid);
    close(out_pipe[1]);
    close(err_pipe[1]);

    ProcessResult result;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
    int open_fds = 2;
    char buf[4096];
    while (open_fds > 0) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            result.timed_out = true;
            break;
        }
        const int rc = poll(fds, 2, static_cast<int>(left.count()));
        if (rc < 0 && errno == EINTR) continue;
        if (rc <= 0) continue;
        for (int i = 0; i < 2; ++i) {
            if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
            const ssize_t n = read(fds[i].fd, buf, sizeof buf);
            if (n > 0) {
                (i == 0 ? result.out : result.err).append(buf, static_cast<std::size_t>(n));
            } else if (n == 0 || errno != EINTR) {
                close(fds[i].fd);
                fds[i].fd = -1;
                --open_fds;
            }
        }
    }
    for (auto& fd : fds) {
        if (fd.fd >= 0) close(fd.fd);
    }

    if (result.timed_out) kill(-pid, SIGKILL);
    int status = 0;
    while (waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (WIFEXITED(status))
        result.exit_code = WEXITSTATUS(status);
    else if (WIFSIGNALED(status))
        result.exit_code = 128 + WTERMSIG(status);
    return result;
}

}  // namespace

void set_detector_process_cap(std::size_t cap) { process_gate().set_cap(cap); }

DetectionReport run_external_detector(const std::filesystem::path& image_path,
                                      const std::string& command_template,
                                      const DetectorOptions& opts) {
    static constexpr std::string_view kPlaceholder = "{image}";
    if (command_template.find(kPlaceholder) == std::string::npos)
        throw DetectorError("detector command template lacks an {image} placeholder");

    std::string command = command_template;
    const std::string quoted = shell_quote(image_path.string());
    for (auto pos = command.find(kPlaceholder); pos != std::string::npos;
         pos = command.find(kPlaceholder, pos + quoted.size())) {
        command.replace(pos, kPlaceholder.size(), quoted);
    }

    process_gate().acquire();
    ProcessResult result;
    try {
        result = run_shell(command, opts.timeout);
    } catch (...) {
        process_gate().release();
        throw;
    }
    process_gate().release();

    if (result.timed_out) throw DetectorError("detector timeout", result.err);
    if (result.exit_code != 0)
        throw DetectorError("detector exited with status " + std::to_string(result.exit_code) +
                                (result.err.empty() ? "" : ": " + result.err),
                            result.err, result.exit_code);
    return parse_report(result.out, opts.intake);
}

}  // namespace leafrx
