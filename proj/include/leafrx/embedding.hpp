#pragma once

// Text embedding: the unit-normalized vector type, a deterministic local
// hashing embedder, and a client for OpenAI-compatible /embeddings endpoints.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "leafrx/http_client.hpp"

namespace leafrx {

class EmbeddingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fixed-dimension vector with unit L2 norm and finite components.
class EmbeddingVector {
public:
    static constexpr double kNormTolerance = 1e-6;

    EmbeddingVector() = default;

    /// Scales `raw` to unit length. Throws on zero or non-finite input.
    static EmbeddingVector normalized(std::vector<float> raw, std::string model_id);

    /// Adopts values that are already unit length (checked against kNormTolerance).
    static EmbeddingVector from_unit(std::vector<float> values, std::string model_id);

    std::span<const float> values() const noexcept { return values_; }
    std::size_t dim() const noexcept { return values_.size(); }
    const std::string& model_id() const noexcept { return model_id_; }
    double norm() const noexcept;
    bool empty() const noexcept { return values_.empty(); }

    bool operator==(const EmbeddingVector&) const = default;

private:
    EmbeddingVector(std::vector<float> v, std::string m)
        : values_(std::move(v)), model_id_(std::move(m)) {}

    std::vector<float> values_;
    std::string model_id_;
};

/// Cosine similarity, computed from the definition in double precision.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

enum class EmbeddingBackendKind { remote, local_hash };

struct EmbeddingBackendConfig {
    EmbeddingBackendKind kind = EmbeddingBackendKind::local_hash;
    std::string endpoint_url;
    std::string model_id = "local-hash-v1";
    std::size_t dim = 256;
    std::chrono::milliseconds timeout{30000};
    std::size_t max_batch = 64;
    std::uint64_t seed = 0;  // local_hash only
    std::string api_key;
    std::size_t max_in_flight = 4;
    RetryPolicy retry;

    /// Remote settings from LEAFRX_EMBED_ENDPOINT / _MODEL / _API_KEY.
    static EmbeddingBackendConfig remote_from_env(std::size_t dim);
};

inline constexpr std::string_view kLocalHashModelId = "local-hash-v1";

class Embedder {
public:
    virtual ~Embedder() = default;

    /// One vector per input, in input order. Rejects empty lists and empty strings.
    std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) const;
    EmbeddingVector embed_one(const std::string& text) const;

    virtual const std::string& model_id() const noexcept = 0;
    virtual std::size_t dim() const noexcept = 0;

protected:
    virtual std::vector<EmbeddingVector> do_embed(const std::vector<std::string>& texts) const = 0;
};

/// Lowercased ASCII-alphanumeric runs; bytes >= 0x80 count as word characters
/// so non-ASCII words stay whole.
std::vector<std::string> hash_tokens(std::string_view text);

/// Seeded 64-bit token hash: FNV-1a over the bytes, starting from a basis
/// mixed with the seed, finished with the splitmix64 mixer.
std::uint64_t seeded_token_hash(std::string_view token, std::uint64_t seed) noexcept;

/// Signed feature hashing of the tokens into `dim` buckets, L2-normalized.
/// Bucket = hash mod dim; sign is the top hash bit (set => -1). If the signed
/// sum cancels to zero, unsigned counts are used instead.
EmbeddingVector local_hash_embed(std::string_view text, std::size_t dim, std::uint64_t seed);

class LocalHashEmbedder final : public Embedder {
public:
    explicit LocalHashEmbedder(std::size_t dim = 256, std::uint64_t seed = 0);

    const std::string& model_id() const noexcept override { return model_id_; }
    std::size_t dim() const noexcept override { return dim_; }

protected:
    std::vector<EmbeddingVector> do_embed(const std::vector<std::string>& texts) const override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
    std::string model_id_{kLocalHashModelId};
};

class RemoteEmbedder final : public Embedder {
public:
    explicit RemoteEmbedder(EmbeddingBackendConfig cfg,
                            std::shared_ptr<HttpTransport> transport = make_default_transport(),
                            Sleeper sleep = {});
    ~RemoteEmbedder() override;

    const std::string& model_id() const noexcept override { return cfg_.model_id; }
    std::size_t dim() const noexcept override { return cfg_.dim; }

protected:
    std::vector<EmbeddingVector> do_embed(const std::vector<std::string>& texts) const override;

private:
    std::vector<EmbeddingVector> embed_batch(std::span<const std::string> batch) const;

    EmbeddingBackendConfig cfg_;
    std::shared_ptr<HttpTransport> transport_;
    Sleeper sleep_;
    struct InFlight;
    std::unique_ptr<InFlight> in_flight_;
};

std::unique_ptr<Embedder> make_embedder(const EmbeddingBackendConfig& cfg);

/// Convenience: build the configured backend and embed.
std::vector<EmbeddingVector> embed_texts(const std::vector<std::string>& texts,
                                         const EmbeddingBackendConfig& cfg);

}  // namespace leafrx
