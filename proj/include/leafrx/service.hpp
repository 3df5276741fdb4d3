#pragma once

// Service wiring shared by the HTTP API and the CLI: configuration,
// ingestion into the store, diagnosis, and conversational sessions.

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leafrx/detection_intake.hpp"
#include "leafrx/embedding.hpp"
#include "leafrx/fusion_report.hpp"
#include "leafrx/knowledge_ingest.hpp"
#include "leafrx/rag_engine.hpp"
#include "leafrx/vector_store.hpp"

namespace leafrx {

struct ServiceConfig {
    std::string listen_addr = "127.0.0.1:8080";
    std::filesystem::path store_path;
    EmbeddingBackendConfig embed_cfg;
    LlmBackendConfig llm_cfg;
    std::size_t retrieval_k = 5;
    double grounding_tau = 0.55;
    std::size_t prompt_budget_tokens = 3000;
    double confidence_floor = 0.25;
    std::size_t max_turns_in_context = 6;
    std::chrono::seconds session_ttl{3600};
    std::size_t worker_threads = 8;
    std::size_t max_body_bytes = 10 * 1024 * 1024;
    std::string api_key;  // empty disables authentication
    ChunkingOptions chunking;
    SeverityRule severity;

    /// Throws std::invalid_argument on out-of-range settings.
    void validate() const;
};

/// Error with an HTTP status attached.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

using Clock = std::function<std::string()>;

nlohmann::json summary_to_json(const CorpusSummary& s);

/// Normalizes, chunks, embeds and inserts; per-document failures are
/// recorded in the summary.
CorpusSummary ingest_paths_into(VectorStore& store, const Embedder& embedder,
                                const std::vector<std::filesystem::path>& paths,
                                const ChunkingOptions& opts);
CorpusSummary ingest_documents_into(VectorStore& store, const Embedder& embedder,
                                    std::vector<KnowledgeDocument> docs,
                                    const ChunkingOptions& opts);

class Service {
public:
    Service(ServiceConfig cfg, std::shared_ptr<const Embedder> embedder,
            std::shared_ptr<const LlmBackend> llm, std::shared_ptr<const VectorStore> store,
            Clock clock = utc_now_rfc3339);

    /// Builds backends from the config and loads the store (missing file ->
    /// empty store). Throws on load failure.
    static std::unique_ptr<Service> from_config(const ServiceConfig& cfg, Clock clock = utc_now_rfc3339);

    nlohmann::json healthz() const;
    nlohmann::json ingest(const nlohmann::json& body);

    RecommendationReport diagnose(const DetectionReport& report) const;
    /// Parses a DetectionReport body and returns the RecommendationReport JSON.
    nlohmann::json diagnose_json(std::string_view body) const;

    std::string create_session();
    nlohmann::json ask(const std::string& session_id, const std::string& question);
    nlohmann::json transcript(const std::string& session_id) const;
    std::size_t session_count() const;

    const ServiceConfig& config() const noexcept { return cfg_; }
    std::shared_ptr<const VectorStore> store() const { return store_.snapshot(); }

private:
    struct SessionSlot {
        std::mutex turn_mutex;  // one ask at a time per session
        ConversationSession session;
        std::chrono::steady_clock::time_point last_used;
    };

    std::shared_ptr<SessionSlot> find_session(const std::string& id) const;
    void purge_expired_locked() const;

    ServiceConfig cfg_;
    std::shared_ptr<const Embedder> embedder_;
    std::shared_ptr<const LlmBackend> llm_;
    StoreHandle store_;
    RagEngine engine_;
    Clock clock_;

    mutable std::mutex sessions_mutex_;
    mutable std::map<std::string, std::shared_ptr<SessionSlot>> sessions_;
};

/// Constant-time comparison of secrets.
bool secure_equals(std::string_view a, std::string_view b) noexcept;

/// HTTP front end for Service.
class HttpServer {
public:
    HttpServer(Service& service, const ServiceConfig& cfg);
    ~HttpServer();

    /// Binds host:port (port 0 picks a free port). Throws on failure.
    int bind(const std::string& listen_addr);
    /// Serves until stop(); returns after in-flight requests finish.
    void listen();
    void stop();
    bool running() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Splits "host:port"; throws std::invalid_argument.
std::pair<std::string, int> split_listen_addr(const std::string& addr);

/// Blocks serving until SIGINT/SIGTERM.
int serve(const ServiceConfig& cfg);

}  // namespace leafrx
