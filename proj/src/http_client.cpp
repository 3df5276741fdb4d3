#include "leafrx/http_client.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

namespace leafrx {

namespace {

class HttplibTransport final : public HttpTransport {
public:
    HttpResponse post(const std::string& url, const std::string& body,
                      const HttpHeaders& headers, std::chrono::milliseconds timeout) override {
        HttpResponse out;
        const auto scheme_end = url.find("://");
        if (scheme_end == std::string::npos) {
            out.error = "malformed URL: " + url;
            return out;
        }
        const auto path_start = url.find('/', scheme_end + 3);
        const std::string origin = url.substr(0, path_start);
        const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

        httplib::Client client(origin);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());

        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);

        auto res = client.Post(path, h, body, "application/json");
        if (!res) {
            const auto err = res.error();
            out.error = httplib::to_string(err);
            out.timed_out = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
            return out;
        }
        out.status = res->status;
        out.body = std::move(res->body);
        return out;
    }
};

}  // namespace

std::shared_ptr<HttpTransport> make_default_transport() {
    return std::make_shared<HttplibTransport>();
}

std::chrono::milliseconds RetryPolicy::backoff_before(int attempt) const {
    if (attempt <= 1) return std::chrono::milliseconds{0};
    const double scale = std::pow(multiplier, attempt - 2);
    return std::chrono::milliseconds{
        static_cast<std::chrono::milliseconds::rep>(initial_backoff.count() * scale)};
}

HttpResponse post_json_with_retry(HttpTransport& transport, const std::string& url,
                                  const nlohmann::json& body, const HttpHeaders& headers,
                                  std::chrono::milliseconds timeout, const RetryPolicy& policy,
                                  const Sleeper& sleep) {
    const std::string payload = body.dump();
    HttpResponse last;
    int attempt = 0;
    while (attempt < policy.max_attempts) {
        ++attempt;
        if (auto wait = policy.backoff_before(attempt); wait.count() > 0) {
            if (sleep)
                sleep(wait);
            else
                std::this_thread::sleep_for(wait);
        }
        last = transport.post(url, payload, headers, timeout);
        if (last.status >= 200 && last.status < 300) return last;
        if (!policy.retryable(last)) break;
    }
    std::string what = "POST " + url + " failed after " + std::to_string(attempt) + " attempt(s)";
    if (last.status != 0)
        what += ": HTTP " + std::to_string(last.status);
    else if (!last.error.empty())
        what += ": " + last.error;
    throw HttpError(what, last.status, attempt);
}

std::string join_url(std::string base, std::string_view path) {
    while (!base.empty() && base.back() == '/') base.pop_back();
    if (!path.empty() && path.front() != '/') base.push_back('/');
    base.append(path);
    return base;
}

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return (v && *v) ? std::string(v) : fallback;
}

}  // namespace leafrx
