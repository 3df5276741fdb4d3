#include "leafrx/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "leafrx/service.hpp"

namespace leafrx {

namespace {

struct BackendFlags {
    std::string embed_backend = "local_hash";
    std::size_t embed_dim = 0;  // 0: 256 for local_hash, 1536 for remote
    std::uint64_t embed_seed = 0;
    std::string embed_endpoint;
    std::string embed_model;
    std::size_t embed_batch = 64;

    std::string llm_backend = "stub_echo";
    std::string llm_endpoint;
    std::string llm_model;
    double temperature = 0.0;

    EmbeddingBackendConfig embedding() const {
        EmbeddingBackendConfig cfg;
        if (embed_backend == "remote") {
            cfg = EmbeddingBackendConfig::remote_from_env(embed_dim ? embed_dim : 1536);
            if (!embed_endpoint.empty()) cfg.endpoint_url = embed_endpoint;
            if (!embed_model.empty()) cfg.model_id = embed_model;
        } else {
            cfg.dim = embed_dim ? embed_dim : 256;
            cfg.seed = embed_seed;
        }
        cfg.max_batch = embed_batch;
        return cfg;
    }

    LlmBackendConfig llm() const {
        LlmBackendConfig cfg;
        if (llm_backend == "remote") {
            cfg = LlmBackendConfig::remote_from_env();
            if (!llm_endpoint.empty()) cfg.endpoint_url = llm_endpoint;
            if (!llm_model.empty()) cfg.model_id = llm_model;
        }
        cfg.temperature = temperature;
        return cfg;
    }
};

void add_embedding_flags(CLI::App* cmd, BackendFlags& f) {
    cmd->add_option("--embed-backend", f.embed_backend, "Embedding backend")
        ->check(CLI::IsMember({"local_hash", "remote"}));
    cmd->add_option("--embed-dim", f.embed_dim, "Embedding dimension");
    cmd->add_option("--embed-seed", f.embed_seed, "Seed for the local hash embedder");
    cmd->add_option("--embed-endpoint", f.embed_endpoint,
                    "Embeddings base URL (default $LEAFRX_EMBED_ENDPOINT)");
    cmd->add_option("--embed-model", f.embed_model, "Embedding model (default $LEAFRX_EMBED_MODEL)");
    cmd->add_option("--embed-batch", f.embed_batch, "Texts per embeddings request")
        ->check(CLI::PositiveNumber);
}

void add_llm_flags(CLI::App* cmd, BackendFlags& f) {
    cmd->add_option("--llm-backend", f.llm_backend, "Chat backend")
        ->check(CLI::IsMember({"stub_echo", "remote"}));
    cmd->add_option("--llm-endpoint", f.llm_endpoint, "Chat base URL (default $LEAFRX_LLM_ENDPOINT)");
    cmd->add_option("--llm-model", f.llm_model, "Chat model (default $LEAFRX_LLM_MODEL)");
    cmd->add_option("--temperature", f.temperature, "Sampling temperature");
}

void add_rag_flags(CLI::App* cmd, ServiceConfig& cfg) {
    cmd->add_option("-k,--retrieval-k", cfg.retrieval_k, "Chunks retrieved per query")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--tau", cfg.grounding_tau, "Grounding threshold")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--budget", cfg.prompt_budget_tokens, "Prompt token budget");
    cmd->add_option("--confidence-floor", cfg.confidence_floor, "Minimum finding confidence")
        ->check(CLI::Range(0.0, 1.0));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

int run_ingest(const std::vector<std::string>& inputs, const ServiceConfig& cfg,
               const BackendFlags& flags, bool as_json, std::ostream& out) {
    const auto embedder = make_embedder(flags.embedding());
    VectorStore store(embedder->dim(), embedder->model_id());
    std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
    const auto summary = ingest_paths_into(store, *embedder, paths, cfg.chunking);
    if (summary.added > 0) store.save(cfg.store_path);

    if (as_json) {
        out << summary_to_json(summary).dump(2) << "\n";
    } else {
        out << "ingested " << summary.added << " document(s), " << summary.chunks << " chunk(s), "
            << summary.failed << " failed";
        if (summary.added > 0) out << " -> " << cfg.store_path.string();
        out << "\n";
        for (const auto& o : summary.outcomes) {
            if (!o.ok) out << "  failed: " << o.path.string() << ": " << o.reason << "\n";
        }
    }
    return summary.added > 0 ? 0 : 1;
}

int run_store_stats(const std::string& path, std::ostream& out) {
    const auto store = VectorStore::load(path);
    std::set<std::string> docs;
    for (std::uint64_t i = 0; i < store.size(); ++i) docs.insert(store.record(i)->doc_id);
    const nlohmann::json stats{{"path", path},
                               {"version", kStoreFormatVersion},
                               {"dim", store.dim()},
                               {"model_id", store.model_id()},
                               {"count", store.size()},
                               {"documents", docs.size()}};
    out << stats.dump(2) << "\n";
    return 0;
}

int run_store_search(const std::string& path, const std::string& query, std::size_t k,
                     const BackendFlags& flags, bool as_json, std::ostream& out) {
    const auto store = VectorStore::load(path);
    auto cfg = flags.embedding();
    if (flags.embed_dim == 0) cfg.dim = store.dim();
    const auto embedder = make_embedder(cfg);
    const auto hits = store.search(embedder->embed_one(query), k);
    if (as_json) {
        auto arr = nlohmann::json::array();
        for (const auto& h : hits)
            arr.push_back({{"record_id", h.record_id}, {"chunk_id", h.chunk_id}, {"score", h.score},
                           {"text", h.text}});
        out << arr.dump(2) << "\n";
        return 0;
    }
    for (std::size_t i = 0; i < hits.size(); ++i) {
        std::string preview = hits[i].text.substr(0, 80);
        std::replace(preview.begin(), preview.end(), '\n', ' ');
        out << std::setw(2) << i + 1 << "  " << std::fixed << std::setprecision(4) << hits[i].score
            << "  " << hits[i].chunk_id << "  " << preview << "\n";
    }
    return 0;
}

int run_chat(const std::string& url, const std::string& api_key, std::istream& in, std::ostream& out,
             std::ostream& err) {
    httplib::Client client(url);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("X-API-Key", api_key);

    auto created = client.Post("/sessions", headers, "{}", "application/json");
    if (!created || created->status != 201) {
        err << "error: cannot create session at " << url
            << (created ? " (HTTP " + std::to_string(created->status) + ")" : "") << "\n";
        return 1;
    }
    const auto session_id = nlohmann::json::parse(created->body).at("session_id").get<std::string>();
    out << "session " << session_id << " (empty line or /quit to exit)\n";

    std::string line;
    while (out << "> " << std::flush, std::getline(in, line)) {
        if (line.empty() || line == "/quit") break;
        auto res = client.Post("/sessions/" + session_id + "/ask", headers,
                               nlohmann::json{{"question", line}}.dump(), "application/json");
        if (!res) {
            err << "error: " << httplib::to_string(res.error()) << "\n";
            return 1;
        }
        const auto body = nlohmann::json::parse(res->body, nullptr, false);
        if (res->status != 200) {
            err << "error: HTTP " << res->status << ": "
                << (body.is_object() ? body.value("error", res->body) : res->body) << "\n";
            if (res->status == 404) return 1;
            continue;
        }
        const auto& answer = body.at("answer");
        out << answer.at("text").get<std::string>() << "\n";
        if (!answer.at("grounded").get<bool>()) out << "[" << kUngroundedBanner << "]\n";
        out << "sources:";
        for (const auto& c : answer.at("citations")) out << " " << c.get<std::string>();
        out << "\n";
    }
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
             std::ostream& err) {
    CLI::App app{"leafrx: coffee leaf disease diagnosis and remediation service", "leafrx"};
    app.require_subcommand(1);

    ServiceConfig cfg;
    cfg.store_path = env_or("LEAFRX_STORE", "leafrx.store");
    cfg.api_key = env_or("LEAFRX_API_KEY");
    BackendFlags flags;
    bool as_json = false;
    std::string store_path_arg;

    auto* ingest = app.add_subcommand("ingest", "Chunk, embed and store knowledge documents");
    std::vector<std::string> ingest_inputs;
    ingest->add_option("paths", ingest_inputs, "Files, directories or .jsonl manifests")->required();
    ingest->add_option("--chunk-chars", cfg.chunking.chunk_chars, "Characters per chunk")
        ->check(CLI::PositiveNumber);
    ingest->add_option("--overlap-chars", cfg.chunking.overlap_chars, "Overlap between chunks");
    ingest->add_option("--store", store_path_arg, "Store file to write");
    ingest->add_flag("--json", as_json, "Print the summary as JSON");
    add_embedding_flags(ingest, flags);

    auto* store_cmd = app.add_subcommand("store", "Inspect a vector store");
    store_cmd->require_subcommand(1);
    auto* stats = store_cmd->add_subcommand("stats", "Print store metadata");
    std::string stats_path;
    stats->add_option("path", stats_path, "Store file")->required();
    auto* search = store_cmd->add_subcommand("search", "Exact top-k search");
    std::string search_path, query;
    std::size_t search_k = 5;
    search->add_option("path", search_path, "Store file")->required();
    search->add_option("--query", query, "Query text")->required();
    search->add_option("-k", search_k, "Number of hits")->check(CLI::PositiveNumber);
    search->add_flag("--json", as_json, "Print hits as JSON");
    add_embedding_flags(search, flags);

    auto* detect = app.add_subcommand("detect", "Run the external detector on an image");
    std::string image, detector_cmd = env_or("LEAFRX_DETECTOR_CMD");
    double detector_timeout = 120.0;
    detect->add_option("image", image, "Image path")->required();
    detect->add_option("--detector-cmd", detector_cmd,
                       "Command template containing {image} (default $LEAFRX_DETECTOR_CMD)");
    detect->add_option("--timeout", detector_timeout, "Detector timeout in seconds")
        ->check(CLI::PositiveNumber);
    detect->add_option("--confidence-floor", cfg.confidence_floor, "Minimum finding confidence")
        ->check(CLI::Range(0.0, 1.0));

    auto* diagnose = app.add_subcommand("diagnose", "Produce a recommendation for a detection report");
    std::string report_path, format = "json";
    diagnose->add_option("--report", report_path, "DetectionReport JSON file")->required();
    diagnose->add_option("--format", format, "Output format")->check(CLI::IsMember({"json", "markdown"}));
    diagnose->add_option("--store", store_path_arg, "Store file");
    add_embedding_flags(diagnose, flags);
    add_llm_flags(diagnose, flags);
    add_rag_flags(diagnose, cfg);

    auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
    std::size_t ttl_seconds = 3600;
    serve_cmd->add_option("--listen", cfg.listen_addr, "host:port");
    serve_cmd->add_option("--store", store_path_arg, "Store file");
    serve_cmd->add_option("--workers", cfg.worker_threads, "Worker threads")->check(CLI::PositiveNumber);
    serve_cmd->add_option("--session-ttl", ttl_seconds, "Session idle TTL in seconds");
    serve_cmd->add_option("--api-key", cfg.api_key, "Required API key (default $LEAFRX_API_KEY)");
    serve_cmd->add_option("--chunk-chars", cfg.chunking.chunk_chars, "Characters per chunk for /ingest")
        ->check(CLI::PositiveNumber);
    serve_cmd->add_option("--overlap-chars", cfg.chunking.overlap_chars, "Overlap for /ingest");
    add_embedding_flags(serve_cmd, flags);
    add_llm_flags(serve_cmd, flags);
    add_rag_flags(serve_cmd, cfg);

    auto* chat = app.add_subcommand("chat", "Interactive session against a running service");
    std::string url = "http://127.0.0.1:8080", chat_key = env_or("LEAFRX_API_KEY");
    chat->add_option("--url", url, "Service base URL");
    chat->add_option("--api-key", chat_key, "API key");

    if (args.empty()) {
        err << app.help();
        return 2;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        err << app.help();
        return 2;
    }

    if (!store_path_arg.empty()) cfg.store_path = store_path_arg;
    cfg.session_ttl = std::chrono::seconds(ttl_seconds);

    try {
        if (*ingest) {
            if (cfg.chunking.overlap_chars >= cfg.chunking.chunk_chars) {
                err << "error: degenerate stride (overlap must be smaller than chunk size)\n";
                return 2;
            }
            return run_ingest(ingest_inputs, cfg, flags, as_json, out);
        }
        if (*stats) return run_store_stats(stats_path, out);
        if (*search) return run_store_search(search_path, query, search_k, flags, as_json, out);
        if (*detect) {
            if (detector_cmd.empty()) {
                err << "error: --detector-cmd is required (or set LEAFRX_DETECTOR_CMD)\n";
                return 2;
            }
            DetectorOptions opts;
            opts.timeout = std::chrono::milliseconds(static_cast<long>(detector_timeout * 1000));
            opts.intake.confidence_floor = cfg.confidence_floor;
            const auto report = run_external_detector(image, detector_cmd, opts);
            auto j = report_to_json(report);
            out << j.dump(2) << "\n";
            if (report.intake.dropped_out_of_vocabulary + report.intake.dropped_below_floor > 0)
                err << "intake: " << intake_to_json(report.intake).dump() << "\n";
            return 0;
        }
        if (*diagnose) {
            cfg.embed_cfg = flags.embedding();
            cfg.llm_cfg = flags.llm();
            const auto service = Service::from_config(cfg);
            const auto report = parse_report(read_file(report_path), {cfg.confidence_floor});
            const auto rec = service->diagnose(report);
            out << render_report(rec, format == "markdown" ? ReportFormat::markdown : ReportFormat::json)
                << (format == "markdown" ? "" : "\n");
            return 0;
        }
        if (*serve_cmd) {
            cfg.embed_cfg = flags.embedding();
            cfg.llm_cfg = flags.llm();
            return serve(cfg);
        }
        if (*chat) return run_chat(url, chat_key, in, out, err);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace leafrx
