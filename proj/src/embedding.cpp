#include "leafrx/embedding.hpp"

#include <cmath>
#include <semaphore>

#include <nlohmann/json.hpp>

namespace leafrx {

namespace {

double l2_norm(std::span<const float> v) {
    double sum = 0.0;
    for (float x : v) sum += static_cast<double>(x) * x;
    return std::sqrt(sum);
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

EmbeddingVector EmbeddingVector::normalized(std::vector<float> raw, std::string model_id) {
    if (raw.empty()) throw EmbeddingError("empty embedding");
    for (float x : raw) {
        if (!std::isfinite(x)) throw EmbeddingError("non-finite embedding component");
    }
    const double norm = l2_norm(raw);
    if (norm == 0.0) throw EmbeddingError("zero embedding vector");
    for (float& x : raw) x = static_cast<float>(x / norm);
    return EmbeddingVector(std::move(raw), std::move(model_id));
}

EmbeddingVector EmbeddingVector::from_unit(std::vector<float> values, std::string model_id) {
    if (values.empty()) throw EmbeddingError("empty embedding");
    for (float x : values) {
        if (!std::isfinite(x)) throw EmbeddingError("non-finite embedding component");
    }
    if (std::abs(l2_norm(values) - 1.0) > kNormTolerance)
        throw EmbeddingError("embedding is not unit length");
    return EmbeddingVector(std::move(values), std::move(model_id));
}

double EmbeddingVector::norm() const noexcept { return l2_norm(values_); }

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw EmbeddingError("dimension mismatch in cosine similarity");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

EmbeddingBackendConfig EmbeddingBackendConfig::remote_from_env(std::size_t dim) {
    EmbeddingBackendConfig cfg;
    cfg.kind = EmbeddingBackendKind::remote;
    cfg.endpoint_url = env_or("LEAFRX_EMBED_ENDPOINT", "https://api.openai.com/v1");
    cfg.model_id = env_or("LEAFRX_EMBED_MODEL", "text-embedding-3-small");
    cfg.api_key = env_or("LEAFRX_EMBED_API_KEY");
    cfg.dim = dim;
    return cfg;
}

std::vector<EmbeddingVector> Embedder::embed(const std::vector<std::string>& texts) const {
    if (texts.empty()) throw EmbeddingError("nothing to embed");
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (texts[i].empty()) throw EmbeddingError("empty text at index " + std::to_string(i));
    }
    auto out = do_embed(texts);
    if (out.size() != texts.size())
        throw EmbeddingError("backend returned " + std::to_string(out.size()) + " vectors for " +
                             std::to_string(texts.size()) + " inputs");
    return out;
}

EmbeddingVector Embedder::embed_one(const std::string& text) const {
    return std::move(embed({text}).front());
}

std::vector<std::string> hash_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        const bool word = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') ||
                          (c >= 'A' && c <= 'Z') || c >= 0x80;
        if (word) {
            current.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch);
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::uint64_t seeded_token_hash(std::string_view token, std::uint64_t seed) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL ^ splitmix64(seed);
    for (char ch : token) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001B3ULL;
    }
    return splitmix64(h);
}

EmbeddingVector local_hash_embed(std::string_view text, std::size_t dim, std::uint64_t seed) {
    if (dim < 8) throw EmbeddingError("local hash embedding needs dim >= 8");
    const auto tokens = hash_tokens(text);
    if (tokens.empty()) throw EmbeddingError("no tokens");

    auto project = [&](bool signed_buckets) {
        std::vector<double> acc(dim, 0.0);
        for (const auto& tok : tokens) {
            const std::uint64_t h = seeded_token_hash(tok, seed);
            acc[h % dim] += (signed_buckets && (h >> 63)) ? -1.0 : 1.0;
        }
        return acc;
    };
    auto squared = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return s;
    };
    // Colliding tokens with opposite signs can cancel exactly; fall back to
    // unsigned counts so every tokenizable text still embeds.
    std::vector<double> acc = project(true);
    double sum = squared(acc);
    if (sum == 0.0) {
        acc = project(false);
        sum = squared(acc);
    }
    const double norm = std::sqrt(sum);

    std::vector<float> values(dim);
    for (std::size_t i = 0; i < dim; ++i) values[i] = static_cast<float>(acc[i] / norm);
    return EmbeddingVector::from_unit(std::move(values), std::string(kLocalHashModelId));
}

LocalHashEmbedder::LocalHashEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim_ < 8) throw EmbeddingError("local hash embedding needs dim >= 8");
}

std::vector<EmbeddingVector> LocalHashEmbedder::do_embed(
    const std::vector<std::string>& texts) const {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(local_hash_embed(t, dim_, seed_));
    return out;
}

struct RemoteEmbedder::InFlight {
    explicit InFlight(std::ptrdiff_t n) : slots(n) {}
    std::counting_semaphore<> slots;
};

RemoteEmbedder::RemoteEmbedder(EmbeddingBackendConfig cfg, std::shared_ptr<HttpTransport> transport,
                               Sleeper sleep)
    : cfg_(std::move(cfg)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
    if (cfg_.endpoint_url.empty()) throw EmbeddingError("remote embedder needs an endpoint URL");
    if (cfg_.dim == 0) throw EmbeddingError("remote embedder needs a positive dim");
    if (cfg_.max_batch == 0) cfg_.max_batch = 1;
    if (cfg_.max_in_flight == 0) cfg_.max_in_flight = 1;
    in_flight_ = std::make_unique<InFlight>(static_cast<std::ptrdiff_t>(cfg_.max_in_flight));
}

RemoteEmbedder::~RemoteEmbedder() = default;

std::vector<EmbeddingVector> RemoteEmbedder::do_embed(const std::vector<std::string>& texts) const {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    const std::span<const std::string> all(texts);
    for (std::size_t i = 0; i < all.size(); i += cfg_.max_batch) {
        auto batch = embed_batch(all.subspan(i, std::min(cfg_.max_batch, all.size() - i)));
        for (auto& v : batch) out.push_back(std::move(v));
    }
    return out;
}

std::vector<EmbeddingVector> RemoteEmbedder::embed_batch(std::span<const std::string> batch) const {
    nlohmann::json body = {{"model", cfg_.model_id},
                           {"input", std::vector<std::string>(batch.begin(), batch.end())}};
    HttpHeaders headers{{"Content-Type", "application/json"}};
    if (!cfg_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + cfg_.api_key);

    in_flight_->slots.acquire();
    HttpResponse res;
    try {
        res = post_json_with_retry(*transport_, join_url(cfg_.endpoint_url, "/embeddings"), body,
                                   headers, cfg_.timeout, cfg_.retry, sleep_);
    } catch (...) {
        in_flight_->slots.release();
        throw;
    }
    in_flight_->slots.release();

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(res.body);
    } catch (const nlohmann::json::parse_error& e) {
        throw EmbeddingError(std::string("malformed embeddings response: ") + e.what());
    }
    const auto data = j.find("data");
    if (data == j.end() || !data->is_array())
        throw EmbeddingError("embeddings response lacks a data array");
    if (data->size() != batch.size())
        throw EmbeddingError("embeddings response has " + std::to_string(data->size()) +
                             " items for " + std::to_string(batch.size()) + " inputs");

    std::vector<std::vector<float>> slots(batch.size());
    for (std::size_t pos = 0; pos < data->size(); ++pos) {
        const auto& item = (*data)[pos];
        const std::size_t index = item.value("index", pos);
        if (index >= batch.size() || !slots[index].empty())
            throw EmbeddingError("embeddings response has invalid index " + std::to_string(index));
        auto values = item.at("embedding").get<std::vector<float>>();
        if (values.size() != cfg_.dim)
            throw EmbeddingError("model/dimension drift: expected dim " + std::to_string(cfg_.dim) +
                                 ", got " + std::to_string(values.size()));
        slots[index] = std::move(values);
    }

    std::vector<EmbeddingVector> out;
    out.reserve(slots.size());
    for (auto& v : slots) out.push_back(EmbeddingVector::normalized(std::move(v), cfg_.model_id));
    return out;
}

std::unique_ptr<Embedder> make_embedder(const EmbeddingBackendConfig& cfg) {
    if (cfg.kind == EmbeddingBackendKind::local_hash)
        return std::make_unique<LocalHashEmbedder>(cfg.dim, cfg.seed);
    return std::make_unique<RemoteEmbedder>(cfg);
}

std::vector<EmbeddingVector> embed_texts(const std::vector<std::string>& texts,
                                         const EmbeddingBackendConfig& cfg) {
    return make_embedder(cfg)->embed(texts);
}

}  // namespace leafrx
