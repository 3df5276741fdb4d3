#pragma once

// Knowledge-base ingestion: text normalization, overlapping character
// chunking, and batch corpus loading.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace leafrx {

/// Thrown when input bytes are not valid UTF-8.
class EncodingError : public std::runtime_error {
public:
    EncodingError(const std::string& what, std::size_t byte_offset)
        : std::runtime_error(what), byte_offset_(byte_offset) {}

    std::size_t byte_offset() const noexcept { return byte_offset_; }

private:
    std::size_t byte_offset_;
};

/// Chunking or document-validation failure ("empty document", "degenerate stride").
class IngestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct KnowledgeDocument {
    std::string doc_id;
    std::string title;
    std::string body;
    std::string source_uri;
    std::int64_t ingested_at = 0;  // UTC seconds
};

/// A contiguous span of a document body. Offsets count Unicode code points,
/// so a chunk never splits a multi-byte sequence.
struct DocumentChunk {
    std::string chunk_id;  // doc_id + "#" + ordinal
    std::string doc_id;
    std::size_t ordinal = 0;
    std::string text;
    std::size_t char_start = 0;
    std::size_t char_end = 0;  // exclusive

    bool operator==(const DocumentChunk&) const = default;
};

struct ChunkingOptions {
    std::size_t chunk_chars = 1000;
    std::size_t overlap_chars = 200;
};

/// Returns the byte offset of the first invalid UTF-8 sequence, or npos.
std::size_t find_invalid_utf8(std::string_view bytes) noexcept;

/// Number of code points in valid UTF-8 text.
std::size_t utf8_length(std::string_view text) noexcept;

/// Unifies line endings to LF, strips trailing spaces/tabs from each line and
/// collapses runs of blank lines to a single blank line. Idempotent.
/// Throws EncodingError on invalid UTF-8.
std::string normalize_text(std::string_view raw);

/// Splits a normalized body into chunks with stride chunk_chars - overlap_chars.
std::vector<DocumentChunk> chunk_document(const KnowledgeDocument& doc,
                                          const ChunkingOptions& opts = {});

struct FileOutcome {
    std::filesystem::path path;
    std::string doc_id;
    bool ok = false;
    std::size_t chunks = 0;
    std::string reason;  // set when !ok
};

struct CorpusSummary {
    std::size_t added = 0;
    std::size_t failed = 0;
    std::size_t chunks = 0;
    std::vector<FileOutcome> outcomes;

    std::vector<std::filesystem::path> failures() const;
};

/// Receives each successfully chunked document. Throwing from the sink marks
/// that document as failed with the exception message.
using ChunkSink =
    std::function<void(const KnowledgeDocument&, const std::vector<DocumentChunk>&)>;

/// Expands the inputs into document files. Directories contribute their
/// .txt/.md files (recursively, sorted); .jsonl files are read as manifests
/// with one {"doc_id","title","path","source_uri"} object per line.
struct CorpusEntry {
    std::filesystem::path path;
    std::string doc_id;
    std::string title;
    std::string source_uri;
    std::string error;  // manifest line problems surface here
};
std::vector<CorpusEntry> expand_corpus_inputs(const std::vector<std::filesystem::path>& inputs);

/// Loads, normalizes and chunks every input; one bad file never aborts the batch.
CorpusSummary ingest_corpus(const std::vector<std::filesystem::path>& paths,
                            const ChunkingOptions& opts, const ChunkSink& sink);

/// Same, for documents already held in memory (HTTP ingestion).
CorpusSummary ingest_documents(std::vector<KnowledgeDocument> docs,
                               const ChunkingOptions& opts, const ChunkSink& sink);

}  // namespace leafrx
