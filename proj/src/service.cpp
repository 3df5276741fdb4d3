#include "leafrx/service.hpp"

#include <atomic>
#include <csignal>
#include <random>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace leafrx {

namespace fs = std::filesystem;

void ServiceConfig::validate() const {
    if (retrieval_k < 1) throw std::invalid_argument("retrieval_k must be at least 1");
    if (!(grounding_tau > 0.0 && grounding_tau < 1.0))
        throw std::invalid_argument("grounding_tau must lie strictly between 0 and 1");
    if (prompt_budget_tokens < 256)
        throw std::invalid_argument("prompt_budget_tokens must be at least 256");
    if (!(confidence_floor >= 0.0 && confidence_floor <= 1.0))
        throw std::invalid_argument("confidence_floor must lie in [0,1]");
    if (max_turns_in_context < 1) throw std::invalid_argument("max_turns_in_context must be positive");
    if (chunking.chunk_chars == 0 || chunking.overlap_chars >= chunking.chunk_chars)
        throw std::invalid_argument("overlap must be smaller than chunk size");
    split_listen_addr(listen_addr);
}

std::pair<std::string, int> split_listen_addr(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == addr.size())
        throw std::invalid_argument("listen address must be host:port, got '" + addr + "'");
    int port = 0;
    try {
        std::size_t used = 0;
        port = std::stoi(addr.substr(colon + 1), &used);
        if (used != addr.size() - colon - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
        throw std::invalid_argument("invalid port in listen address '" + addr + "'");
    }
    if (port < 0 || port > 65535) throw std::invalid_argument("port out of range in '" + addr + "'");
    return {addr.substr(0, colon), port};
}

nlohmann::json summary_to_json(const CorpusSummary& s) {
    auto failures = nlohmann::json::array();
    auto outcomes = nlohmann::json::array();
    for (const auto& o : s.outcomes) {
        outcomes.push_back({{"path", o.path.string()},
                            {"doc_id", o.doc_id},
                            {"ok", o.ok},
                            {"chunks", o.chunks},
                            {"reason", o.reason}});
        if (!o.ok) failures.push_back({{"path", o.path.string()}, {"reason", o.reason}});
    }
    return {{"added", s.added},
            {"failed", s.failed},
            {"chunks", s.chunks},
            {"failures", std::move(failures)},
            {"outcomes", std::move(outcomes)}};
}

namespace {

ChunkSink store_sink(VectorStore& store, const Embedder& embedder) {
    return [&store, &embedder](const KnowledgeDocument& doc, const std::vector<DocumentChunk>& chunks) {
        if (store.contains_doc(doc.doc_id))
            throw IngestError("doc_id " + doc.doc_id + " already present in store");
        std::vector<std::string> texts;
        texts.reserve(chunks.size());
        for (const auto& c : chunks) texts.push_back(c.text);
        auto vectors = embedder.embed(texts);
        std::vector<NewRecord> records;
        records.reserve(chunks.size());
        for (std::size_t i = 0; i < chunks.size(); ++i)
            records.push_back({chunks[i].chunk_id, chunks[i].doc_id, std::move(vectors[i]), chunks[i].text});
        store.insert(std::move(records));
    };
}

}  // namespace

CorpusSummary ingest_paths_into(VectorStore& store, const Embedder& embedder,
                                const std::vector<fs::path>& paths, const ChunkingOptions& opts) {
    return ingest_corpus(paths, opts, store_sink(store, embedder));
}

CorpusSummary ingest_documents_into(VectorStore& store, const Embedder& embedder,
                                    std::vector<KnowledgeDocument> docs, const ChunkingOptions& opts) {
    return ingest_documents(std::move(docs), opts, store_sink(store, embedder));
}

Service::Service(ServiceConfig cfg, std::shared_ptr<const Embedder> embedder,
                 std::shared_ptr<const LlmBackend> llm, std::shared_ptr<const VectorStore> store,
                 Clock clock)
    : cfg_(std::move(cfg)),
      embedder_(std::move(embedder)),
      llm_(std::move(llm)),
      store_(std::move(store)),
      engine_(embedder_, llm_, [this] { return store_.snapshot(); },
              RagConfig{cfg_.retrieval_k, cfg_.grounding_tau, cfg_.prompt_budget_tokens,
                        cfg_.max_turns_in_context, std::string(kDefaultSystemPreamble)}),
      clock_(std::move(clock)) {
    cfg_.validate();
}

std::unique_ptr<Service> Service::from_config(const ServiceConfig& cfg, Clock clock) {
    cfg.validate();
    std::shared_ptr<const Embedder> embedder = make_embedder(cfg.embed_cfg);
    std::shared_ptr<const LlmBackend> llm = make_llm_backend(cfg.llm_cfg);

    std::shared_ptr<const VectorStore> store;
    if (!cfg.store_path.empty() && fs::exists(cfg.store_path)) {
        auto loaded = std::make_shared<VectorStore>(VectorStore::load(cfg.store_path));
        if (loaded->dim() != embedder->dim() || loaded->model_id() != embedder->model_id())
            throw StoreError("store " + cfg.store_path.string() + " holds " + loaded->model_id() +
                             " dim " + std::to_string(loaded->dim()) + " but the embedder is " +
                             embedder->model_id() + " dim " + std::to_string(embedder->dim()));
        store = std::move(loaded);
    } else {
        store = std::make_shared<VectorStore>(embedder->dim(), embedder->model_id());
    }
    return std::make_unique<Service>(cfg, std::move(embedder), std::move(llm), std::move(store),
                                     std::move(clock));
}

nlohmann::json Service::healthz() const {
    return {{"status", "ok"}, {"store_records", store_.snapshot()->size()}};
}

nlohmann::json Service::ingest(const nlohmann::json& body) {
    const auto docs_it = body.find("documents");
    if (!body.is_object() || docs_it == body.end() || !docs_it->is_array())
        throw ApiError(400, "body must be {\"documents\": [...]}");

    std::vector<KnowledgeDocument> docs;
    for (std::size_t i = 0; i < docs_it->size(); ++i) {
        const auto& d = (*docs_it)[i];
        if (!d.is_object()) throw ApiError(400, "document " + std::to_string(i) + " must be an object");
        auto field = [&](const char* key) {
            auto it = d.find(key);
            if (it == d.end()) return std::string{};
            if (!it->is_string())
                throw ApiError(400, "document " + std::to_string(i) + ": '" + key + "' must be a string");
            return it->get<std::string>();
        };
        docs.push_back({field("doc_id"), field("title"), field("body"), field("source_uri"), 0});
    }

    std::lock_guard writer(store_.writer_mutex());
    auto next = std::make_shared<VectorStore>(*store_.snapshot());
    auto summary = ingest_documents_into(*next, *embedder_, std::move(docs), cfg_.chunking);
    if (summary.added > 0) {
        if (!cfg_.store_path.empty()) next->save(cfg_.store_path);
        store_.swap(std::move(next));
    }
    return summary_to_json(summary);
}

RecommendationReport Service::diagnose(const DetectionReport& report) const {
    ConversationSession no_history;
    no_history.max_turns_in_context = cfg_.max_turns_in_context;
    std::map<DiseaseLabel, GroundedAnswer> answers;
    for (const auto label : detected_labels(report)) {
        const auto query = build_query({label}, std::nullopt);
        answers[label] = engine_.run_turn(query, query, no_history).answer;
    }
    return fuse(report, answers, clock_(), cfg_.severity);
}

nlohmann::json Service::diagnose_json(std::string_view body) const {
    const auto report = parse_report(body, IntakeOptions{cfg_.confidence_floor});
    if (report.intake.dropped_out_of_vocabulary + report.intake.dropped_below_floor > 0) {
        spdlog::info("intake for {} dropped {} out-of-vocabulary and {} low-confidence findings",
                     report.image_id, report.intake.dropped_out_of_vocabulary,
                     report.intake.dropped_below_floor);
    }
    return report_to_json(diagnose(report));
}

namespace {

std::string random_session_id() {
    static std::mutex mutex;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(mutex);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string id;
    for (int word = 0; word < 2; ++word) {
        auto v = rng();
        for (int i = 0; i < 16; ++i, v >>= 4) id.push_back(kHex[v & 0xF]);
    }
    return id;
}

}  // namespace

void Service::purge_expired_locked() const {
    const auto now = std::chrono::steady_clock::now();
    for (auto it = sessions_.begin(); it != sessions_.end();) {
        std::unique_lock busy(it->second->turn_mutex, std::try_to_lock);
        if (busy.owns_lock() && now - it->second->last_used > cfg_.session_ttl)
            it = sessions_.erase(it);
        else
            ++it;
    }
}

std::string Service::create_session() {
    auto slot = std::make_shared<SessionSlot>();
    slot->session.max_turns_in_context = cfg_.max_turns_in_context;
    slot->last_used = std::chrono::steady_clock::now();
    std::lock_guard lock(sessions_mutex_);
    purge_expired_locked();
    std::string id;
    do {
        id = random_session_id();
    } while (sessions_.count(id));
    slot->session.session_id = id;
    sessions_.emplace(id, std::move(slot));
    return id;
}

std::shared_ptr<Service::SessionSlot> Service::find_session(const std::string& id) const {
    std::lock_guard lock(sessions_mutex_);
    purge_expired_locked();
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ApiError(404, "unknown session " + id);
    return it->second;
}

nlohmann::json Service::ask(const std::string& session_id, const std::string& question) {
    auto slot = find_session(session_id);
    std::lock_guard turn(slot->turn_mutex);
    engine_.ask(slot->session, question);
    slot->last_used = std::chrono::steady_clock::now();
    const auto& t = slot->session.turns.back();
    return {{"session_id", session_id},
            {"turn", slot->session.turns.size()},
            {"answer", answer_to_json(t.answer)},
            {"context", context_to_json(t.context)}};
}

nlohmann::json Service::transcript(const std::string& session_id) const {
    auto slot = find_session(session_id);
    std::lock_guard turn(slot->turn_mutex);
    return session_to_json(slot->session);
}

std::size_t Service::session_count() const {
    std::lock_guard lock(sessions_mutex_);
    return sessions_.size();
}

bool secure_equals(std::string_view a, std::string_view b) noexcept {
    unsigned char diff = a.size() == b.size() ? 0 : 1;
    const std::size_t n = std::max(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto x = i < a.size() ? static_cast<unsigned char>(a[i]) : 0;
        const auto y = i < b.size() ? static_cast<unsigned char>(b[i]) : 0;
        diff |= static_cast<unsigned char>(x ^ y);
    }
    return diff == 0;
}

struct HttpServer::Impl {
    Service& service;
    ServiceConfig cfg;
    httplib::Server server;

    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    Handler wrap(Handler inner, bool authenticated = true) {
        return [this, inner = std::move(inner), authenticated](const httplib::Request& req,
                                                               httplib::Response& res) {
            const auto started = std::chrono::steady_clock::now();
            try {
                if (authenticated && !authorized(req)) throw ApiError(401, "missing or invalid API key");
                inner(req, res);
            } catch (const ApiError& e) {
                fail(res, e.status(), e.what());
            } catch (const ReportError& e) {
                fail(res, 400, e.what());
            } catch (const nlohmann::json::exception& e) {
                fail(res, 400, std::string("invalid JSON body: ") + e.what());
            } catch (const StageError& e) {
                fail(res, 502, e.what());
            } catch (const std::exception& e) {
                fail(res, 500, e.what());
            }
            const double ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - started)
                                  .count();
            spdlog::info("{} {} -> {} ({:.2f} ms)", req.method, req.path, res.status, ms);
        };
    }

    bool authorized(const httplib::Request& req) const {
        if (cfg.api_key.empty()) return true;
        std::string presented = req.get_header_value("X-API-Key");
        if (presented.empty()) {
            const auto auth = req.get_header_value("Authorization");
            if (auth.rfind("Bearer ", 0) == 0) presented = auth.substr(7);
        }
        return secure_equals(presented, cfg.api_key);
    }

    static void fail(httplib::Response& res, int status, const std::string& message) {
        res.status = status;
        res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
    }

    static void reply(httplib::Response& res, const nlohmann::json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    Impl(Service& s, const ServiceConfig& c) : service(s), cfg(c) {
        server.set_payload_max_length(cfg.max_body_bytes);
        // httplib also sets SO_REUSEPORT, which lets a second instance share a busy port.
        server.set_socket_options([](socket_t sock) {
            int yes = 1;
            setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
        });
        const std::size_t workers = std::max<std::size_t>(cfg.worker_threads, 1);
        server.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };

        server.Get("/healthz", wrap([this](const auto&, auto& res) { reply(res, service.healthz()); },
                                    false));
        server.Post("/ingest", wrap([this](const auto& req, auto& res) {
                        reply(res, service.ingest(nlohmann::json::parse(req.body)));
                    }));
        server.Post("/diagnose", wrap([this](const auto& req, auto& res) {
                        reply(res, service.diagnose_json(req.body));
                    }));
        server.Post("/sessions", wrap([this](const auto&, auto& res) {
                        reply(res, {{"session_id", service.create_session()}}, 201);
                    }));
        server.Post(R"(/sessions/([^/]+)/ask)", wrap([this](const auto& req, auto& res) {
                        const auto id = req.matches[1].str();
                        const auto body = nlohmann::json::parse(req.body);
                        const auto q = body.find("question");
                        if (!body.is_object() || q == body.end() || !q->is_string())
                            throw ApiError(400, "body must be {\"question\": \"...\"}");
                        reply(res, service.ask(id, q->template get<std::string>()));
                    }));
        server.Get(R"(/sessions/([^/]+))", wrap([this](const auto& req, auto& res) {
                       reply(res, service.transcript(req.matches[1].str()));
                   }));
    }
};

HttpServer::HttpServer(Service& service, const ServiceConfig& cfg)
    : impl_(std::make_unique<Impl>(service, cfg)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& listen_addr) {
    const auto [host, port] = split_listen_addr(listen_addr);
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw std::runtime_error("cannot bind " + listen_addr);
    return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

bool HttpServer::running() const { return impl_->server.is_running(); }

int serve(const ServiceConfig& cfg) {
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    auto service = Service::from_config(cfg);
    HttpServer server(*service, cfg);
    const int port = server.bind(cfg.listen_addr);
    spdlog::info("leafrx listening on {}:{} with {} store records",
                 split_listen_addr(cfg.listen_addr).first, port, service->store()->size());

    std::atomic<bool> signalled{false};
    std::thread waiter([&server, &signals, &signalled] {
        int sig = 0;
        sigwait(&signals, &sig);
        if (signalled.exchange(true)) return;
        spdlog::info("signal {} received, draining in-flight requests", sig);
        server.stop();
    });
    server.listen();
    // listen() can also return on its own; wake the waiter so it can exit
    if (!signalled.exchange(true)) kill(getpid(), SIGTERM);
    waiter.join();
    spdlog::info("leafrx stopped");
    return 0;
}

}  // namespace leafrx
