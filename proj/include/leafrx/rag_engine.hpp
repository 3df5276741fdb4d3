#pragma once

// Remediation assistance: query construction, retrieval, prompt assembly,
// LLM generation, grounding guard and the conversational session.

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "leafrx/detection_intake.hpp"
#include "leafrx/embedding.hpp"
#include "leafrx/http_client.hpp"
#include "leafrx/vector_store.hpp"

namespace leafrx {

class RagError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Error raised inside ask(), tagged with the pipeline stage that failed.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& detail)
        : std::runtime_error(stage + ": " + detail), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct RetrievedContext {
    std::string query_text;
    EmbeddingVector query_vector;
    std::vector<SearchHit> hits;
};

struct PromptBundle {
    std::string system_preamble;
    std::string context_block;
    std::string question;
    std::string history_block;
    std::size_t estimated_tokens = 0;
    std::vector<SearchHit> admitted;  // admitted[i] is tagged [S{i+1}]
};

struct GroundedAnswer {
    std::string text;
    std::vector<std::string> citations;  // chunk ids
    double grounding_score = 0.0;
    bool grounded = false;
    std::string model_id;

    bool operator==(const GroundedAnswer&) const = default;
};

struct ConversationTurn {
    std::string question;
    GroundedAnswer answer;
    RetrievedContext context;
};

struct ConversationSession {
    std::string session_id;
    std::vector<ConversationTurn> turns;
    std::size_t max_turns_in_context = 6;
};

/// "Identify treatment and remediation for coffee leaf disease(s): <labels>."
/// with labels deduplicated in canonical order, plus the question verbatim.
std::string build_query(const std::vector<DiseaseLabel>& labels,
                        const std::optional<std::string>& user_question);

/// ceil(code points / 4).
std::size_t estimate_tokens(std::string_view text) noexcept;

/// Splits after '.', '!' or '?' when followed by whitespace; trims, drops empties.
std::vector<std::string> split_sentences(std::string_view text);

inline constexpr std::string_view kDefaultSystemPreamble =
    "You are a coffee plant-health assistant. Answer using only the numbered sources "
    "below and cite them inline as [S1], [S2], ... If the sources do not cover the "
    "question, say that you do not know.";

/// Admits retrieved chunks greedily in retrieval order while the summed block
/// estimate stays within budget (chunks are skipped, never cut), then fills
/// the most recent history turns that still fit.
PromptBundle assemble_prompt(const RetrievedContext& ctx, const ConversationSession& session,
                             std::size_t budget_tokens,
                             std::string_view system_preamble = kDefaultSystemPreamble);

enum class LlmBackendKind { remote, stub_echo };

struct LlmBackendConfig {
    LlmBackendKind kind = LlmBackendKind::stub_echo;
    std::string endpoint_url;
    std::string model_id = "stub-echo";
    double temperature = 0.0;
    std::chrono::milliseconds timeout{60000};
    std::string api_key;
    RetryPolicy retry;

    /// Remote settings from LEAFRX_LLM_ENDPOINT / _MODEL / _API_KEY.
    static LlmBackendConfig remote_from_env();
};

class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual std::string complete(const PromptBundle& bundle) const = 0;
    virtual const std::string& model_id() const noexcept = 0;
};

/// Offline backend: "Based on [S1]: " + first sentence of the top admitted chunk.
class StubEchoLlm final : public LlmBackend {
public:
    std::string complete(const PromptBundle& bundle) const override;
    const std::string& model_id() const noexcept override { return model_id_; }

private:
    std::string model_id_ = "stub-echo";
};

/// OpenAI-compatible POST {endpoint}/chat/completions client.
class RemoteChatLlm final : public LlmBackend {
public:
    explicit RemoteChatLlm(LlmBackendConfig cfg,
                           std::shared_ptr<HttpTransport> transport = make_default_transport(),
                           Sleeper sleep = {});

    std::string complete(const PromptBundle& bundle) const override;
    const std::string& model_id() const noexcept override { return cfg_.model_id; }

    /// The request body sent for `bundle`.
    nlohmann::json request_body(const PromptBundle& bundle) const;

private:
    LlmBackendConfig cfg_;
    std::shared_ptr<HttpTransport> transport_;
    Sleeper sleep_;
};

std::unique_ptr<LlmBackend> make_llm_backend(const LlmBackendConfig& cfg);

/// Calls the backend; an empty completion is an error.
std::string generate(const PromptBundle& bundle, const LlmBackend& backend);

struct GroundingResult {
    double score = 0.0;
    bool grounded = false;
};

/// Mean over answer sentences of the best cosine against the admitted
/// evidence. Evidence units are each admitted chunk and each sentence of a
/// multi-sentence chunk, so an answer quoting a chunk verbatim scores 1.
GroundingResult grounding_check(std::string_view answer, const std::vector<SearchHit>& admitted,
                                const Embedder& embedder, double tau);

struct RagConfig {
    std::size_t k = 5;
    double tau = 0.55;
    std::size_t budget_tokens = 3000;
    std::size_t max_turns_in_context = 6;
    std::string system_preamble{kDefaultSystemPreamble};
};

using StoreSource = std::function<std::shared_ptr<const VectorStore>()>;

class RagEngine {
public:
    RagEngine(std::shared_ptr<const Embedder> embedder, std::shared_ptr<const LlmBackend> llm,
              StoreSource store, RagConfig cfg = {});

    RetrievedContext retrieve(const std::string& query, std::size_t k) const;

    /// One retrieve -> assemble -> generate -> ground pass. `prompt_question`
    /// is what the model is asked; `query` is what gets retrieved.
    ConversationTurn run_turn(const std::string& query, const std::string& prompt_question,
                              const ConversationSession& history) const;

    /// Runs a turn for `question` and appends it to the session.
    GroundedAnswer ask(ConversationSession& session, const std::string& question) const;

    const RagConfig& config() const noexcept { return cfg_; }
    const Embedder& embedder() const noexcept { return *embedder_; }
    const LlmBackend& llm() const noexcept { return *llm_; }

private:
    std::shared_ptr<const Embedder> embedder_;
    std::shared_ptr<const LlmBackend> llm_;
    StoreSource store_;
    RagConfig cfg_;
};

nlohmann::json answer_to_json(const GroundedAnswer& a);
GroundedAnswer answer_from_json(const nlohmann::json& j);
nlohmann::json context_to_json(const RetrievedContext& ctx);
nlohmann::json session_to_json(const ConversationSession& s);

}  // namespace leafrx
