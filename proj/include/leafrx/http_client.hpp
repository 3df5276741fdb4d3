#pragma once

// Minimal JSON-over-HTTP client used by the remote embedding and chat
// backends, with the shared retry policy.

#include <chrono>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace leafrx {

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

struct HttpResponse {
    int status = 0;  // 0 when no response was received
    std::string body;
    std::string error;
    bool timed_out = false;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse post(const std::string& url, const std::string& body,
                              const HttpHeaders& headers, std::chrono::milliseconds timeout) = 0;
};

/// cpp-httplib backed transport; supports http:// and https:// URLs.
std::shared_ptr<HttpTransport> make_default_transport();

/// Failure after the retry budget is spent, or a non-retryable status.
class HttpError : public std::runtime_error {
public:
    HttpError(const std::string& what, int status, int attempts)
        : std::runtime_error(what), status_(status), attempts_(attempts) {}

    int status() const noexcept { return status_; }
    int attempts() const noexcept { return attempts_; }

private:
    int status_;
    int attempts_;
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    double multiplier = 2.0;

    /// Timeouts, 429 and 5xx are retried; everything else surfaces at once.
    bool retryable(const HttpResponse& r) const noexcept {
        return r.timed_out || r.status == 429 || (r.status >= 500 && r.status <= 599);
    }
    std::chrono::milliseconds backoff_before(int attempt) const;  // attempt is 1-based
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// POSTs `body` and returns the first 2xx response. Throws HttpError carrying
/// the last status and the number of attempts made.
HttpResponse post_json_with_retry(HttpTransport& transport, const std::string& url,
                                  const nlohmann::json& body, const HttpHeaders& headers,
                                  std::chrono::milliseconds timeout, const RetryPolicy& policy,
                                  const Sleeper& sleep = {});

/// Joins a base endpoint and a path without doubling slashes.
std::string join_url(std::string base, std::string_view path);

/// Reads an environment variable, returning `fallback` when unset or empty.
std::string env_or(const char* name, const std::string& fallback = {});

}  // namespace leafrx
