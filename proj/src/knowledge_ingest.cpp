#include "leafrx/knowledge_ingest.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace leafrx {

namespace fs = std::filesystem;

std::size_t find_invalid_utf8(std::string_view bytes) noexcept {
    const auto* s = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    std::size_t i = 0;
    while (i < n) {
        const unsigned char c = s[i];
        if (c < 0x80) {
            ++i;
            continue;
        }
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if (c >= 0xC2 && c <= 0xDF) {
            len = 2;
            cp = c & 0x1F;
        } else if (c >= 0xE0 && c <= 0xEF) {
            len = 3;
            cp = c & 0x0F;
        } else if (c >= 0xF0 && c <= 0xF4) {
            len = 4;
            cp = c & 0x07;
        } else {
            return i;
        }
        if (i + len > n) return i;
        for (std::size_t k = 1; k < len; ++k) {
            if ((s[i + k] & 0xC0) != 0x80) return i;
            cp = (cp << 6) | (s[i + k] & 0x3F);
        }
        // overlong forms, surrogates, and values past U+10FFFF
        if ((len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) || cp > 0x10FFFF ||
            (cp >= 0xD800 && cp <= 0xDFFF))
            return i;
        i += len;
    }
    return std::string_view::npos;
}

std::size_t utf8_length(std::string_view text) noexcept {
    return static_cast<std::size_t>(std::count_if(text.begin(), text.end(), [](char c) {
        return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
    }));
}

std::string normalize_text(std::string_view raw) {
    if (auto bad = find_invalid_utf8(raw); bad != std::string_view::npos) {
        throw EncodingError("invalid UTF-8 at byte offset " + std::to_string(bad), bad);
    }

    std::string out;
    out.reserve(raw.size());
    std::size_t newline_run = 0;

    auto strip_trailing = [&out] {
        while (!out.empty() && (out.back() == ' ' || out.back() == '\t')) out.pop_back();
    };

    for (std::size_t i = 0; i < raw.size(); ++i) {
        char c = raw[i];
        if (c == '\r') {
            if (i + 1 < raw.size() && raw[i + 1] == '\n') ++i;
            c = '\n';
        }
        if (c == '\n') {
            strip_trailing();
            if (++newline_run <= 2) out.push_back('\n');
            continue;
        }
        // whitespace-only lines count as blank, so defer resetting the run
        if (c != ' ' && c != '\t') newline_run = 0;
        out.push_back(c);
    }
    strip_trailing();
    return out;
}

namespace {

bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    });
}

// Byte offset of every code point start, plus a final entry for the end.
std::vector<std::size_t> code_point_offsets(std::string_view text) {
    std::vector<std::size_t> offsets;
    offsets.reserve(text.size() + 1);
    for (std::size_t i = 0; i < text.size(); ++i) {
        if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) offsets.push_back(i);
    }
    offsets.push_back(text.size());
    return offsets;
}

std::int64_t now_utc_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

}  // namespace

std::vector<DocumentChunk> chunk_document(const KnowledgeDocument& doc,
                                          const ChunkingOptions& opts) {
    if (opts.chunk_chars == 0 || opts.overlap_chars >= opts.chunk_chars) {
        throw IngestError("degenerate stride");
    }
    if (is_blank(doc.body)) throw IngestError("empty document");

    const auto offsets = code_point_offsets(doc.body);
    const std::size_t length = offsets.size() - 1;
    const std::size_t stride = opts.chunk_chars - opts.overlap_chars;

    std::vector<DocumentChunk> chunks;
    chunks.reserve(length / stride + 1);
    for (std::size_t start = 0;; start += stride) {
        const std::size_t end = std::min(start + opts.chunk_chars, length);
        DocumentChunk chunk;
        chunk.ordinal = chunks.size();
        chunk.doc_id = doc.doc_id;
        chunk.chunk_id = doc.doc_id + "#" + std::to_string(chunk.ordinal);
        chunk.char_start = start;
        chunk.char_end = end;
        chunk.text = doc.body.substr(offsets[start], offsets[end] - offsets[start]);
        chunks.push_back(std::move(chunk));
        if (end == length) break;
    }
    return chunks;
}

std::vector<fs::path> CorpusSummary::failures() const {
    std::vector<fs::path> out;
    for (const auto& o : outcomes) {
        if (!o.ok) out.push_back(o.path);
    }
    return out;
}

namespace {

bool is_document_file(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".txt" || ext == ".md";
}

void read_manifest(const fs::path& manifest, std::vector<CorpusEntry>& out) {
    std::ifstream in(manifest);
    if (!in) {
        out.push_back({manifest, {}, {}, {}, "unreadable manifest"});
        return;
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (is_blank(line)) continue;
        CorpusEntry entry;
        try {
            const auto j = nlohmann::json::parse(line);
            entry.path = j.at("path").get<std::string>();
            if (entry.path.is_relative()) entry.path = manifest.parent_path() / entry.path;
            entry.doc_id = j.value("doc_id", std::string{});
            entry.title = j.value("title", std::string{});
            entry.source_uri = j.value("source_uri", std::string{});
        } catch (const nlohmann::json::exception& e) {
            entry.path = manifest;
            entry.error = "manifest line " + std::to_string(lineno) + ": " + e.what();
        }
        out.push_back(std::move(entry));
    }
}

}  // namespace

std::vector<CorpusEntry> expand_corpus_inputs(const std::vector<fs::path>& inputs) {
    std::vector<CorpusEntry> out;
    for (const auto& input : inputs) {
        std::error_code ec;
        if (fs::is_directory(input, ec)) {
            std::vector<fs::path> files;
            for (const auto& entry : fs::recursive_directory_iterator(input, ec)) {
                if (entry.is_regular_file() && is_document_file(entry.path()))
                    files.push_back(entry.path());
            }
            std::sort(files.begin(), files.end());
            for (auto& f : files) out.push_back({std::move(f), {}, {}, {}, {}});
        } else if (input.extension() == ".jsonl") {
            read_manifest(input, out);
        } else {
            out.push_back({input, {}, {}, {}, {}});
        }
    }
    for (auto& e : out) {
        if (e.doc_id.empty()) e.doc_id = e.path.stem().string();
        if (e.title.empty()) e.title = e.path.stem().string();
        if (e.source_uri.empty()) e.source_uri = "file://" + fs::absolute(e.path).string();
    }
    return out;
}

namespace {

// Shared tail of both ingestion paths: validate, normalize, chunk, forward.
void ingest_one(KnowledgeDocument doc, FileOutcome& outcome, std::set<std::string>& seen_ids,
                const ChunkingOptions& opts, const ChunkSink& sink) {
    if (doc.doc_id.empty()) throw IngestError("empty doc_id");
    if (!seen_ids.insert(doc.doc_id).second) throw IngestError("duplicate doc_id " + doc.doc_id);
    doc.body = normalize_text(doc.body);
    auto chunks = chunk_document(doc, opts);
    if (sink) sink(doc, chunks);
    outcome.chunks = chunks.size();
    outcome.ok = true;
}

void tally(CorpusSummary& summary, FileOutcome outcome) {
    if (outcome.ok) {
        ++summary.added;
        summary.chunks += outcome.chunks;
    } else {
        ++summary.failed;
    }
    summary.outcomes.push_back(std::move(outcome));
}

}  // namespace

CorpusSummary ingest_corpus(const std::vector<fs::path>& paths, const ChunkingOptions& opts,
                            const ChunkSink& sink) {
    CorpusSummary summary;
    std::set<std::string> seen_ids;
    for (auto& entry : expand_corpus_inputs(paths)) {
        FileOutcome outcome{entry.path, entry.doc_id, false, 0, {}};
        try {
            if (!entry.error.empty()) throw IngestError(entry.error);
            std::ifstream in(entry.path, std::ios::binary);
            if (!in) throw IngestError("unreadable file");
            std::ostringstream buf;
            buf << in.rdbuf();
            if (in.bad()) throw IngestError("read error");
            KnowledgeDocument doc{entry.doc_id, entry.title, buf.str(), entry.source_uri,
                                  now_utc_seconds()};
            ingest_one(std::move(doc), outcome, seen_ids, opts, sink);
        } catch (const std::exception& e) {
            outcome.reason = e.what();
        }
        tally(summary, std::move(outcome));
    }
    return summary;
}

CorpusSummary ingest_documents(std::vector<KnowledgeDocument> docs, const ChunkingOptions& opts,
                               const ChunkSink& sink) {
    CorpusSummary summary;
    std::set<std::string> seen_ids;
    for (auto& doc : docs) {
        FileOutcome outcome{doc.source_uri, doc.doc_id, false, 0, {}};
        if (doc.ingested_at == 0) doc.ingested_at = now_utc_seconds();
        try {
            ingest_one(std::move(doc), outcome, seen_ids, opts, sink);
        } catch (const std::exception& e) {
            outcome.reason = e.what();
        }
        tally(summary, std::move(outcome));
    }
    return summary;
}

}  // namespace leafrx
