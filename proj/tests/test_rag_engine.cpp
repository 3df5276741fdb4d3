#include <doctest.h>

#include "fake_transport.hpp"
#include "fixture_store.hpp"
#include "leafrx/rag_engine.hpp"

using namespace leafrx;
using L = DiseaseLabel;

namespace {

SearchHit hit(const std::string& chunk_id, std::string text, const Embedder& e, double score = 0.5) {
    SearchHit h;
    h.chunk_id = chunk_id;
    h.doc_id = chunk_id.substr(0, chunk_id.find('#'));
    h.score = score;
    h.vector = e.embed_one(text);
    h.text = std::move(text);
    return h;
}

RetrievedContext ctx_with(std::vector<SearchHit> hits, std::string question = "How to treat rust?") {
    RetrievedContext c;
    c.query_text = std::move(question);
    c.hits = std::move(hits);
    return c;
}

// Best cosine of each answer sentence over evidence units, averaged; computed
// with the reference projection.
double reference_grounding(const std::vector<std::string>& answer_sentences,
                           const std::vector<std::string>& evidence) {
    double total = 0;
    for (const auto& s : answer_sentences) {
        const auto a = oracle::hash_embed(s, 256, 0);
        double best = -1;
        for (const auto& ev : evidence) best = std::max(best, oracle::cosine(a, oracle::hash_embed(ev, 256, 0)));
        total += best;
    }
    return total / double(answer_sentences.size());
}

const std::string kLorem(400, 'a');

}  // namespace

TEST_CASE("build_query examples") {
    CHECK(build_query({L::Phoma}, std::nullopt) ==
          "Identify treatment and remediation for coffee leaf disease(s): Phoma.");
    CHECK(build_query({L::Phoma, L::Rust, L::Phoma}, std::nullopt) ==
          "Identify treatment and remediation for coffee leaf disease(s): Rust, Phoma.");
    CHECK(build_query({L::Miner}, std::string("Is it safe for bees?")) ==
          "Identify treatment and remediation for coffee leaf disease(s): Miner. Is it safe for bees?");
    CHECK(build_query({}, std::string("When should I prune?")) == "When should I prune?");
    CHECK_THROWS_WITH_AS(build_query({}, std::nullopt), "empty query", RagError);
    CHECK_THROWS_WITH_AS(build_query({}, std::string("   ")), "empty query", RagError);
}

TEST_CASE("token estimate and sentence split") {
    CHECK(estimate_tokens("") == 0);
    CHECK(estimate_tokens("abcd") == 1);
    CHECK(estimate_tokens("abcde") == 2);
    CHECK(estimate_tokens("éééé") == 1);
    CHECK(split_sentences("One. Two!  Three? four") ==
          std::vector<std::string>{"One.", "Two!", "Three?", "four"});
    CHECK(split_sentences("v1.2 is out.") == std::vector<std::string>{"v1.2 is out."});
    CHECK(split_sentences("  ").empty());
}

TEST_CASE("assemble_prompt admits chunks in order under a generous budget") {
    LocalHashEmbedder e;
    const auto b = assemble_prompt(ctx_with({hit("a#0", "rust " + kLorem, e), hit("b#0", "miner " + kLorem, e)}),
                                   {}, 10000);
    REQUIRE(b.admitted.size() == 2);
    CHECK(b.context_block.rfind("[S1] rust ", 0) == 0);
    CHECK(b.context_block.find("\n\n[S2] miner ") != std::string::npos);
    CHECK(b.question == "How to treat rust?");
    CHECK(b.history_block.empty());
    CHECK(b.estimated_tokens == estimate_tokens(b.system_preamble) + estimate_tokens(b.context_block) +
                                    estimate_tokens(b.question));
}

TEST_CASE("assemble_prompt skips a chunk that does not fit rather than cutting it") {
    LocalHashEmbedder e;
    const auto big = hit("big#0", "rust " + std::string(40000, 'x'), e);
    const auto small = hit("small#0", "rust " + kLorem, e);
    const auto b = assemble_prompt(ctx_with({big, small}), {}, 3000);
    REQUIRE(b.admitted.size() == 1);
    CHECK(b.admitted[0].chunk_id == "small#0");
    CHECK(b.context_block == "[S1] " + small.text);
    CHECK(b.estimated_tokens <= 3000);
}

TEST_CASE("assemble_prompt with nothing retrieved") {
    const auto b = assemble_prompt(ctx_with({}), {}, 3000);
    CHECK(b.admitted.empty());
    CHECK(b.context_block.empty());
    CHECK(StubEchoLlm().complete(b) == "No grounded context available.");
}

TEST_CASE("assemble_prompt budget errors") {
    CHECK_THROWS_WITH_AS(assemble_prompt(ctx_with({}, std::string(4000, 'q')), {}, 256),
                         "budget exhausted", RagError);
    CHECK_THROWS_AS(assemble_prompt(ctx_with({}), {}, 255), RagError);
}

TEST_CASE("assemble_prompt never exceeds the budget") {
    LocalHashEmbedder e;
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> len(1, 6000);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<SearchHit> hits;
        for (int i = 0; i < 6; ++i) {
            hits.push_back(hit("d#" + std::to_string(i), "rust " + std::string(len(rng), 'z'), e));
        }
        ConversationSession s;
        for (int t = 0; t < 8; ++t)
            s.turns.push_back({"q" + std::to_string(t), {std::string(len(rng) / 4, 'w'), {}, 0, false, ""}, {}});
        const std::size_t budget = 256 + len(rng);
        const auto b = assemble_prompt(ctx_with(hits), s, budget);
        CHECK(b.estimated_tokens <= budget);
        // admitted chunks keep retrieval order
        std::size_t last = 0;
        for (const auto& a : b.admitted) {
            const auto idx = std::stoul(a.chunk_id.substr(2));
            CHECK(idx >= last);
            last = idx;
        }
    }
}

TEST_CASE("history keeps the newest turns") {
    ConversationSession s;
    s.max_turns_in_context = 2;
    for (int t = 0; t < 4; ++t)
        s.turns.push_back({"question " + std::to_string(t), {"answer " + std::to_string(t), {}, 0, false, ""}, {}});
    const auto b = assemble_prompt(ctx_with({}), s, 3000);
    CHECK(b.history_block == "Q: question 2\nA: answer 2\n\nQ: question 3\nA: answer 3");
}

TEST_CASE("stub backend echoes the first sentence of the top chunk") {
    LocalHashEmbedder e;
    const auto b = assemble_prompt(
        ctx_with({hit("p#0", "Remove infected leaves. Spray copper.", e), hit("q#0", "Other.", e)}), {}, 3000);
    CHECK(generate(b, StubEchoLlm()) == "Based on [S1]: Remove infected leaves.");
}

TEST_CASE("remote chat backend") {
    LocalHashEmbedder e;
    const auto bundle = assemble_prompt(ctx_with({hit("p#0", "Spray copper.", e)}), {}, 3000);
    LlmBackendConfig cfg;
    cfg.kind = LlmBackendKind::remote;
    cfg.endpoint_url = "http://llm.invalid/v1";
    cfg.model_id = "chat-test";
    cfg.api_key = "k";

    SUBCASE("request shape and reply parsing") {
        auto t = std::make_shared<FakeTransport>();
        t->queued = {{200, R"({"choices":[{"message":{"role":"assistant","content":"Use copper [S1]."}}]})", "", false}};
        RemoteChatLlm llm(cfg, t);
        CHECK(generate(bundle, llm) == "Use copper [S1].");
        REQUIRE(t->requests.size() == 1);
        const auto& body = t->requests[0].body;
        CHECK(t->requests[0].url == "http://llm.invalid/v1/chat/completions");
        CHECK(body["model"] == "chat-test");
        CHECK(body["temperature"] == 0.0);
        CHECK(body["messages"][0]["role"] == "system");
        CHECK(body["messages"][0]["content"].get<std::string>().find("[S1] Spray copper.") != std::string::npos);
        CHECK(body["messages"][1]["content"] == "Question: How to treat rust?");
    }
    SUBCASE("429 three times gives up after three attempts") {
        auto t = std::make_shared<FakeTransport>();
        t->handler = [](const auto&) { return HttpResponse{429, "", "", false}; };
        SleepLog log;
        RemoteChatLlm llm(cfg, t, log.sleeper());
        try {
            generate(bundle, llm);
            FAIL("expected HttpError");
        } catch (const HttpError& err) {
            CHECK(err.attempts() == 3);
        }
        CHECK(t->requests.size() == 3);
    }
    SUBCASE("empty completion") {
        auto t = std::make_shared<FakeTransport>();
        t->queued = {{200, R"({"choices":[{"message":{"content":"  "}}]})", "", false}};
        RemoteChatLlm llm(cfg, t);
        CHECK_THROWS_WITH_AS(generate(bundle, llm), "empty generation", RagError);
    }
}

TEST_CASE("grounding extremes") {
    LocalHashEmbedder e;
    const std::string chunk =
        "Remove and destroy infected coffee leaves. Spray copper fungicide every three weeks.";
    const std::vector<SearchHit> admitted{hit("p#0", chunk, e)};

    const auto verbatim = grounding_check(chunk, admitted, e, 0.55);
    CHECK(verbatim.score == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(verbatim.grounded);

    const std::string unrelated = "Bananas ripen quickly beside glowing kitchens.";
    const auto off = grounding_check(unrelated, admitted, e, 0.55);
    const double ref = reference_grounding({unrelated}, {chunk, "Remove and destroy infected coffee leaves.",
                                                         "Spray copper fungicide every three weeks."});
    CHECK(off.score == doctest::Approx(ref).epsilon(1e-6));
    CHECK(off.score < 0.55);
    CHECK_FALSE(off.grounded);

    const auto none = grounding_check(chunk, {}, e, 0.55);
    CHECK(none.score == 0.0);
    CHECK_FALSE(none.grounded);
}

TEST_CASE("retrieval over the fixture corpus") {
    auto embedder = std::make_shared<LocalHashEmbedder>();
    auto store = fixture_store(*embedder);
    RagEngine engine(embedder, std::make_shared<StubEchoLlm>(), [store] { return store; });
    const auto ctx = engine.retrieve("phoma treatment", 3);
    REQUIRE(ctx.hits.size() == 3);
    CHECK(ctx.hits[0].chunk_id == "phoma_remediation#0");
    for (std::size_t i = 0; i + 1 < ctx.hits.size(); ++i) CHECK(ctx.hits[i].score >= ctx.hits[i + 1].score);
    CHECK(ctx.hits[0].score == doctest::Approx(oracle::cosine(oracle::hash_embed("phoma treatment", 256, 0),
                                                              oracle::hash_embed(ctx.hits[0].text, 256, 0)))
                                   .epsilon(1e-6));
}

TEST_CASE("a diagnosis query yields a grounded, cited answer") {
    auto embedder = std::make_shared<LocalHashEmbedder>();
    auto store = fixture_store(*embedder);
    RagEngine engine(embedder, std::make_shared<StubEchoLlm>(), [store] { return store; });
    const auto q = build_query({L::Phoma}, std::nullopt);
    const auto turn = engine.run_turn(q, q, {});
    CHECK(turn.answer.grounded);
    CHECK(turn.answer.grounding_score >= 0.55);
    CHECK(turn.answer.citations == std::vector<std::string>{"phoma_remediation#0"});
    CHECK(turn.answer.text.find("Remove and destroy infected coffee leaves") != std::string::npos);
    CHECK(turn.answer.model_id == "stub-echo");
}

TEST_CASE("conversation turns carry history") {
    auto embedder = std::make_shared<LocalHashEmbedder>();
    auto store = fixture_store(*embedder);
    auto llm = std::make_shared<RecordingLlm>();
    RagEngine engine(embedder, llm, [store] { return store; });

    ConversationSession s;
    const auto first = engine.ask(s, "How do I treat Phoma?");
    engine.ask(s, "And how often should I spray?");
    CHECK(s.turns.size() == 2);
    REQUIRE(llm->prompts.size() == 2);
    CHECK(llm->prompts[0].history_block.empty());
    CHECK(llm->prompts[1].history_block.find("How do I treat Phoma?") != std::string::npos);
    CHECK(llm->prompts[1].history_block.find(first.text) != std::string::npos);
    for (const auto& t : s.turns) {
        for (const auto& c : t.answer.citations) {
            const bool retrieved = std::any_of(t.context.hits.begin(), t.context.hits.end(),
                                               [&](const auto& h) { return h.chunk_id == c; });
            CHECK(retrieved);
        }
    }
    CHECK_THROWS_AS(engine.ask(s, "  "), StageError);
    CHECK(s.turns.size() == 2);
}

TEST_CASE("identical sessions give identical answers") {
    auto embedder = std::make_shared<LocalHashEmbedder>();
    auto store = fixture_store(*embedder);
    RagEngine engine(embedder, std::make_shared<StubEchoLlm>(), [store] { return store; });
    ConversationSession a, b;
    for (const char* q : {"leaf miner control", "what about shade trees?"}) {
        CHECK(engine.ask(a, q) == engine.ask(b, q));
    }
    CHECK(session_to_json(a).dump() == session_to_json(b).dump());
}

TEST_CASE("stage failures are tagged") {
    auto embedder = std::make_shared<LocalHashEmbedder>();
    auto store = fixture_store(*embedder);
    LlmBackendConfig cfg;
    cfg.kind = LlmBackendKind::remote;
    cfg.endpoint_url = "http://llm.invalid";
    auto t = std::make_shared<FakeTransport>();
    t->handler = [](const auto&) { return HttpResponse{503, "", "", false}; };
    SleepLog log;
    RagEngine engine(embedder, std::make_shared<RemoteChatLlm>(cfg, t, log.sleeper()),
                     [store] { return store; });
    ConversationSession s;
    try {
        engine.ask(s, "rust?");
        FAIL("expected StageError");
    } catch (const StageError& err) {
        CHECK(err.stage() == "generate");
    }
    CHECK(s.turns.empty());

    RagEngine no_tokens(embedder, std::make_shared<StubEchoLlm>(), [store] { return store; });
    try {
        no_tokens.ask(s, "???");
        FAIL("expected StageError");
    } catch (const StageError& err) {
        CHECK(err.stage() == "retrieve");
    }
}

TEST_CASE("answer JSON round trip") {
    GroundedAnswer a{"text [S1]", {"x#0", "y#1"}, 0.75, true, "m"};
    CHECK(answer_from_json(answer_to_json(a)) == a);
}
