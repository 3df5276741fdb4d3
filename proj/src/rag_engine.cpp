#include "leafrx/rag_engine.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>

#include "leafrx/knowledge_ingest.hpp"

namespace leafrx {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace

std::string build_query(const std::vector<DiseaseLabel>& labels,
                        const std::optional<std::string>& user_question) {
    const bool has_question = user_question && !trim(*user_question).empty();
    if (labels.empty() && !has_question) throw RagError("empty query");
    if (labels.empty()) return *user_question;

    std::vector<DiseaseLabel> ordered = labels;
    std::sort(ordered.begin(), ordered.end());
    ordered.erase(std::unique(ordered.begin(), ordered.end()), ordered.end());

    std::string q = "Identify treatment and remediation for coffee leaf disease(s): ";
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        if (i) q += ", ";
        q += to_string(ordered[i]);
    }
    q += ".";
    if (has_question) q += " " + *user_question;
    return q;
}

std::size_t estimate_tokens(std::string_view text) noexcept {
    return (utf8_length(text) + 3) / 4;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    auto flush = [&out](std::string_view s) {
        s = trim(s);
        if (!s.empty()) out.emplace_back(s);
    };
    std::size_t start = 0;
    for (std::size_t i = 0; i + 1 < text.size(); ++i) {
        const char c = text[i];
        if ((c == '.' || c == '!' || c == '?') &&
            std::isspace(static_cast<unsigned char>(text[i + 1]))) {
            flush(text.substr(start, i + 1 - start));
            start = i + 1;
        }
    }
    flush(text.substr(start));
    return out;
}

namespace {

std::size_t bundle_estimate(std::string_view preamble, std::string_view context,
                            std::string_view question, std::string_view history) {
    return estimate_tokens(preamble) + estimate_tokens(context) + estimate_tokens(question) +
           estimate_tokens(history);
}

std::string render_turn(const ConversationTurn& t) {
    return "Q: " + t.question + "\nA: " + t.answer.text;
}

}  // namespace

PromptBundle assemble_prompt(const RetrievedContext& ctx, const ConversationSession& session,
                             std::size_t budget_tokens, std::string_view system_preamble) {
    if (budget_tokens < 256) throw RagError("prompt budget must be at least 256 tokens");

    PromptBundle b;
    b.system_preamble = system_preamble;
    b.question = ctx.query_text;
    if (bundle_estimate(b.system_preamble, "", b.question, "") > budget_tokens)
        throw RagError("budget exhausted");

    for (const auto& hit : ctx.hits) {
        std::string candidate = b.context_block;
        if (!candidate.empty()) candidate += "\n\n";
        candidate += "[S" + std::to_string(b.admitted.size() + 1) + "] " + hit.text;
        if (bundle_estimate(b.system_preamble, candidate, b.question, "") > budget_tokens) continue;
        b.context_block = std::move(candidate);
        b.admitted.push_back(hit);
    }

    // Newest turns first; the oldest are dropped when the budget runs out.
    const auto& turns = session.turns;
    const std::size_t window = std::min(turns.size(), session.max_turns_in_context);
    std::vector<std::string> kept;
    std::string history;
    for (std::size_t i = 0; i < window; ++i) {
        kept.insert(kept.begin(), render_turn(turns[turns.size() - 1 - i]));
        std::string candidate;
        for (std::size_t j = 0; j < kept.size(); ++j) {
            if (j) candidate += "\n\n";
            candidate += kept[j];
        }
        if (bundle_estimate(b.system_preamble, b.context_block, b.question, candidate) > budget_tokens)
            break;
        history = std::move(candidate);
    }
    b.history_block = std::move(history);
    b.estimated_tokens =
        bundle_estimate(b.system_preamble, b.context_block, b.question, b.history_block);
    return b;
}

LlmBackendConfig LlmBackendConfig::remote_from_env() {
    LlmBackendConfig cfg;
    cfg.kind = LlmBackendKind::remote;
    cfg.endpoint_url = env_or("LEAFRX_LLM_ENDPOINT", "https://api.openai.com/v1");
    cfg.model_id = env_or("LEAFRX_LLM_MODEL", "gpt-3.5-turbo");
    cfg.api_key = env_or("LEAFRX_LLM_API_KEY");
    return cfg;
}

std::string StubEchoLlm::complete(const PromptBundle& bundle) const {
    if (bundle.admitted.empty()) return "No grounded context available.";
    const auto sentences = split_sentences(bundle.admitted.front().text);
    return "Based on [S1]: " + (sentences.empty() ? std::string{} : sentences.front());
}

RemoteChatLlm::RemoteChatLlm(LlmBackendConfig cfg, std::shared_ptr<HttpTransport> transport,
                             Sleeper sleep)
    : cfg_(std::move(cfg)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
    if (cfg_.endpoint_url.empty()) throw RagError("remote LLM backend needs an endpoint URL");
}

nlohmann::json RemoteChatLlm::request_body(const PromptBundle& bundle) const {
    std::string system = bundle.system_preamble + "\n\nSources:\n" +
                         (bundle.context_block.empty() ? "(none)" : bundle.context_block);
    std::string user;
    if (!bundle.history_block.empty())
        user = "Conversation so far:\n" + bundle.history_block + "\n\n";
    user += "Question: " + bundle.question;
    return {{"model", cfg_.model_id},
            {"temperature", cfg_.temperature},
            {"messages",
             {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}}}};
}

std::string RemoteChatLlm::complete(const PromptBundle& bundle) const {
    HttpHeaders headers{{"Content-Type", "application/json"}};
    if (!cfg_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + cfg_.api_key);
    const auto res = post_json_with_retry(*transport_, join_url(cfg_.endpoint_url, "/chat/completions"),
                                          request_body(bundle), headers, cfg_.timeout, cfg_.retry,
                                          sleep_);
    try {
        const auto j = nlohmann::json::parse(res.body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        return content.is_null() ? std::string{} : content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw RagError(std::string("malformed chat completion: ") + e.what());
    }
}

std::unique_ptr<LlmBackend> make_llm_backend(const LlmBackendConfig& cfg) {
    if (cfg.kind == LlmBackendKind::stub_echo) return std::make_unique<StubEchoLlm>();
    return std::make_unique<RemoteChatLlm>(cfg);
}

std::string generate(const PromptBundle& bundle, const LlmBackend& backend) {
    auto text = backend.complete(bundle);
    if (trim(text).empty()) throw RagError("empty generation");
    return text;
}

namespace {

// Embeds the texts that carry tokens; texts the backend cannot embed are skipped.
std::vector<EmbeddingVector> embed_usable(const Embedder& embedder,
                                          const std::vector<std::string>& texts) {
    std::vector<std::string> usable;
    for (const auto& t : texts) {
        if (!hash_tokens(t).empty()) usable.push_back(t);
    }
    if (usable.empty()) return {};
    try {
        return embedder.embed(usable);
    } catch (const EmbeddingError&) {
        std::vector<EmbeddingVector> out;
        for (const auto& t : usable) {
            try {
                out.push_back(embedder.embed_one(t));
            } catch (const EmbeddingError&) {
            }
        }
        return out;
    }
}

}  // namespace

GroundingResult grounding_check(std::string_view answer, const std::vector<SearchHit>& admitted,
                                const Embedder& embedder, double tau) {
    if (admitted.empty()) return {};

    const auto answer_vectors = embed_usable(embedder, split_sentences(answer));
    if (answer_vectors.empty()) return {};

    std::vector<EmbeddingVector> evidence;
    std::vector<std::string> to_embed;
    for (const auto& hit : admitted) {
        if (hit.vector.dim() == embedder.dim() && hit.vector.model_id() == embedder.model_id())
            evidence.push_back(hit.vector);
        else
            to_embed.push_back(hit.text);
        auto sentences = split_sentences(hit.text);
        if (sentences.size() > 1)
            to_embed.insert(to_embed.end(), sentences.begin(), sentences.end());
    }
    for (auto& v : embed_usable(embedder, to_embed)) evidence.push_back(std::move(v));
    if (evidence.empty()) return {};

    double total = 0.0;
    for (const auto& s : answer_vectors) {
        double best = -1.0;
        for (const auto& e : evidence) best = std::max(best, cosine_similarity(s.values(), e.values()));
        total += best;
    }
    GroundingResult r;
    r.score = std::clamp(total / static_cast<double>(answer_vectors.size()), -1.0, 1.0);
    r.grounded = r.score >= tau;
    return r;
}

RagEngine::RagEngine(std::shared_ptr<const Embedder> embedder, std::shared_ptr<const LlmBackend> llm,
                     StoreSource store, RagConfig cfg)
    : embedder_(std::move(embedder)), llm_(std::move(llm)), store_(std::move(store)), cfg_(std::move(cfg)) {
    if (cfg_.k == 0) throw RagError("retrieval k must be positive");
    if (!(cfg_.tau > 0.0 && cfg_.tau < 1.0)) throw RagError("grounding threshold must lie in (0,1)");
}

RetrievedContext RagEngine::retrieve(const std::string& query, std::size_t k) const {
    RetrievedContext ctx;
    ctx.query_text = query;
    ctx.query_vector = embedder_->embed_one(query);
    if (auto store = store_ ? store_() : nullptr) ctx.hits = store->search(ctx.query_vector, k);
    return ctx;
}

namespace {

std::vector<std::string> cited_chunks(const std::string& answer, const PromptBundle& bundle) {
    static const std::regex tag(R"(\[S(\d+)\])");
    std::vector<std::string> out;
    std::set<std::size_t> seen;
    for (auto it = std::sregex_iterator(answer.begin(), answer.end(), tag);
         it != std::sregex_iterator(); ++it) {
        const auto n = std::stoul((*it)[1].str());
        if (n >= 1 && n <= bundle.admitted.size() && seen.insert(n).second)
            out.push_back(bundle.admitted[n - 1].chunk_id);
    }
    if (out.empty()) {
        for (const auto& h : bundle.admitted) out.push_back(h.chunk_id);
    }
    return out;
}

template <typename F>
auto in_stage(const char* stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

}  // namespace

ConversationTurn RagEngine::run_turn(const std::string& query, const std::string& prompt_question,
                                     const ConversationSession& history) const {
    ConversationTurn turn;
    turn.question = prompt_question;
    turn.context = in_stage("retrieve", [&] { return retrieve(query, cfg_.k); });

    auto bundle = in_stage("assemble_prompt", [&] {
        RetrievedContext for_prompt{prompt_question, turn.context.query_vector, turn.context.hits};
        return assemble_prompt(for_prompt, history, cfg_.budget_tokens, cfg_.system_preamble);
    });
    auto text = in_stage("generate", [&] { return generate(bundle, *llm_); });
    auto grounding = in_stage("grounding_check", [&] {
        return grounding_check(text, bundle.admitted, *embedder_, cfg_.tau);
    });

    turn.answer.citations = cited_chunks(text, bundle);
    turn.answer.text = std::move(text);
    turn.answer.grounding_score = grounding.score;
    turn.answer.grounded = grounding.grounded;
    turn.answer.model_id = llm_->model_id();
    return turn;
}

GroundedAnswer RagEngine::ask(ConversationSession& session, const std::string& question) const {
    if (trim(question).empty()) throw StageError("retrieve", "empty question");
    auto turn = run_turn(question, question, session);
    session.turns.push_back(std::move(turn));
    return session.turns.back().answer;
}

nlohmann::json answer_to_json(const GroundedAnswer& a) {
    return {{"text", a.text},
            {"citations", a.citations},
            {"grounding_score", a.grounding_score},
            {"grounded", a.grounded},
            {"model_id", a.model_id}};
}

GroundedAnswer answer_from_json(const nlohmann::json& j) {
    GroundedAnswer a;
    a.text = j.at("text").get<std::string>();
    a.citations = j.at("citations").get<std::vector<std::string>>();
    a.grounding_score = j.at("grounding_score").get<double>();
    a.grounded = j.at("grounded").get<bool>();
    a.model_id = j.at("model_id").get<std::string>();
    return a;
}

nlohmann::json context_to_json(const RetrievedContext& ctx) {
    auto hits = nlohmann::json::array();
    for (const auto& h : ctx.hits) {
        hits.push_back({{"record_id", h.record_id},
                        {"chunk_id", h.chunk_id},
                        {"doc_id", h.doc_id},
                        {"score", h.score},
                        {"text", h.text}});
    }
    return {{"query", ctx.query_text}, {"hits", std::move(hits)}};
}

nlohmann::json session_to_json(const ConversationSession& s) {
    auto turns = nlohmann::json::array();
    for (const auto& t : s.turns) {
        turns.push_back({{"question", t.question},
                         {"answer", answer_to_json(t.answer)},
                         {"context", context_to_json(t.context)}});
    }
    return {{"session_id", s.session_id},
            {"max_turns_in_context", s.max_turns_in_context},
            {"turns", std::move(turns)}};
}

}  // namespace leafrx
