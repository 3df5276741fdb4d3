#pragma once

// Flat exact-cosine vector store with a checksummed little-endian file format.
//
// File layout (version 1, all integers little-endian):
//   "LFRX" | u16 version | u32 dim | u32 model_id length | model_id bytes |
//   u64 count | count x record | u64 string heap size | heap bytes | u64 CRC-64/XZ
// Each record is fixed stride: u64 record_id, then (u64 offset, u32 length)
// for chunk_id, doc_id and text into the heap, then dim x f32 vector values.
// The checksum covers every byte before it.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "leafrx/embedding.hpp"

namespace leafrx {

class StoreError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NewRecord {
    std::string chunk_id;
    std::string doc_id;
    EmbeddingVector vector;
    std::string text;
};

struct VectorRecord {
    std::uint64_t record_id = 0;
    std::string chunk_id;
    std::string doc_id;
    EmbeddingVector vector;
    std::string text;
};

struct SearchHit {
    std::uint64_t record_id = 0;
    std::string chunk_id;
    std::string doc_id;
    double score = 0.0;  // cosine similarity, clamped to [-1, 1]
    std::string text;
    EmbeddingVector vector;

    bool operator==(const SearchHit&) const = default;
};

/// Orders by descending score, then ascending record_id.
bool hit_precedes(const SearchHit& a, const SearchHit& b) noexcept;

inline constexpr std::uint16_t kStoreFormatVersion = 1;

class VectorStore {
public:
    VectorStore(std::size_t dim, std::string model_id);

    VectorStore(const VectorStore& other);
    VectorStore& operator=(const VectorStore&) = delete;

    /// Appends records and returns their dense, increasing ids. When a
    /// persistence path is attached the file is rewritten before returning.
    std::vector<std::uint64_t> insert(std::vector<NewRecord> records);

    /// Exact top-k by cosine. Empty store yields no hits; k == 0 throws.
    std::vector<SearchHit> search(const EmbeddingVector& query, std::size_t k,
                                  const std::optional<std::string>& doc_filter = std::nullopt) const;

    void save(const std::filesystem::path& path) const;
    static VectorStore load(const std::filesystem::path& path);

    /// Makes every later insert durable at `path`.
    void persist_to(std::filesystem::path path);

    std::size_t size() const;
    std::size_t dim() const noexcept { return dim_; }
    const std::string& model_id() const noexcept { return model_id_; }
    std::optional<VectorRecord> record(std::uint64_t record_id) const;
    bool contains_doc(const std::string& doc_id) const;

private:
    struct Row {
        std::string chunk_id;
        std::string doc_id;
        std::string text;
        double norm;
    };

    void save_locked(const std::filesystem::path& path) const;

    std::size_t dim_;
    std::string model_id_;
    std::vector<float> values_;  // row-major, size() * dim_
    std::vector<Row> rows_;      // record_id == row index
    std::optional<std::filesystem::path> persist_path_;
    mutable std::shared_mutex mutex_;
};

/// Holds the current immutable store snapshot; writers build a new store and
/// swap it in atomically.
class StoreHandle {
public:
    explicit StoreHandle(std::shared_ptr<const VectorStore> initial)
        : current_(std::move(initial)) {}

    std::shared_ptr<const VectorStore> snapshot() const {
        std::lock_guard lock(mutex_);
        return current_;
    }
    void swap(std::shared_ptr<const VectorStore> next) {
        std::lock_guard lock(mutex_);
        current_ = std::move(next);
    }
    /// Serializes writers (ingestion) against each other.
    std::mutex& writer_mutex() { return writer_; }

private:
    mutable std::mutex mutex_;
    std::mutex writer_;
    std::shared_ptr<const VectorStore> current_;
};

}  // namespace leafrx
