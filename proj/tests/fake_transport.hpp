#pragma once

#include <deque>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "leafrx/http_client.hpp"

// Scripted HttpTransport: replies from a queue, or from a handler once the
// queue is empty, and records every request.
struct FakeTransport : leafrx::HttpTransport {
    struct Request {
        std::string url;
        nlohmann::json body;
        leafrx::HttpHeaders headers;
    };

    std::deque<leafrx::HttpResponse> queued;
    std::function<leafrx::HttpResponse(const Request&)> handler;
    std::vector<Request> requests;
    std::mutex mu;

    leafrx::HttpResponse post(const std::string& url, const std::string& body,
                              const leafrx::HttpHeaders& headers,
                              std::chrono::milliseconds) override {
        std::lock_guard lock(mu);
        requests.push_back({url, nlohmann::json::parse(body), headers});
        if (!queued.empty()) {
            auto r = queued.front();
            queued.pop_front();
            return r;
        }
        if (handler) return handler(requests.back());
        return {500, "", "no scripted response", false};
    }
};

inline std::string header_value(const leafrx::HttpHeaders& h, const std::string& name) {
    for (const auto& [k, v] : h)
        if (k == name) return v;
    return {};
}

// Records requested waits instead of sleeping.
struct SleepLog {
    std::vector<long> waits_ms;
    leafrx::Sleeper sleeper() {
        return [this](std::chrono::milliseconds d) { waits_ms.push_back(long(d.count())); };
    }
};
