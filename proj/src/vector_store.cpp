#include "leafrx/vector_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string_view>

#include <boost/crc.hpp>

namespace leafrx {

namespace fs = std::filesystem;

namespace {

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

std::uint64_t crc64(std::string_view bytes) {
    Crc64 crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

class Writer {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_unsigned_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i)
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
    void put_bytes(std::string_view s) { buf_.append(s); }
    std::string& buffer() { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(std::string_view data, const fs::path& path) : data_(data), path_(path) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }
    float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    std::string_view get_bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw StoreError("corrupt store: " + path_.string());
    }
    std::string_view data_;
    std::size_t pos_ = 0;
    const fs::path& path_;
};

constexpr std::string_view kMagic = "LFRX";

}  // namespace

bool hit_precedes(const SearchHit& a, const SearchHit& b) noexcept {
    if (a.score != b.score) return a.score > b.score;
    return a.record_id < b.record_id;
}

VectorStore::VectorStore(std::size_t dim, std::string model_id)
    : dim_(dim), model_id_(std::move(model_id)) {
    if (dim_ == 0) throw StoreError("store dim must be positive");
}

VectorStore::VectorStore(const VectorStore& other) {
    std::shared_lock lock(other.mutex_);
    dim_ = other.dim_;
    model_id_ = other.model_id_;
    values_ = other.values_;
    rows_ = other.rows_;
    // a copy is a new snapshot; it does not inherit the persistence target
}

std::vector<std::uint64_t> VectorStore::insert(std::vector<NewRecord> records) {
    for (const auto& r : records) {
        if (r.vector.dim() != dim_)
            throw StoreError("dimension mismatch: store expects dim " + std::to_string(dim_) +
                             ", got " + std::to_string(r.vector.dim()));
        if (r.vector.model_id() != model_id_)
            throw StoreError("model drift: store holds '" + model_id_ + "', got '" +
                             r.vector.model_id() + "'");
    }

    std::unique_lock lock(mutex_);
    std::vector<std::uint64_t> ids;
    ids.reserve(records.size());
    values_.reserve(values_.size() + records.size() * dim_);
    for (auto& r : records) {
        const auto v = r.vector.values();
        values_.insert(values_.end(), v.begin(), v.end());
        rows_.push_back({std::move(r.chunk_id), std::move(r.doc_id), std::move(r.text), r.vector.norm()});
        ids.push_back(rows_.size() - 1);
    }
    if (persist_path_) save_locked(*persist_path_);
    return ids;
}

std::vector<SearchHit> VectorStore::search(const EmbeddingVector& query, std::size_t k,
                                           const std::optional<std::string>& doc_filter) const {
    if (k == 0) throw StoreError("k must be positive");
    if (query.dim() != dim_)
        throw StoreError("dimension mismatch: store expects dim " + std::to_string(dim_) +
                         ", got " + std::to_string(query.dim()));

    std::shared_lock lock(mutex_);
    const auto q = query.values();
    const double qnorm = query.norm();

    struct Scored {
        double score;
        std::uint64_t id;
    };
    std::vector<Scored> scored;
    scored.reserve(rows_.size());
    for (std::size_t i = 0; i < rows_.size(); ++i) {
        if (doc_filter && rows_[i].doc_id != *doc_filter) continue;
        const float* row = values_.data() + i * dim_;
        double dot = 0.0;
        for (std::size_t d = 0; d < dim_; ++d) dot += static_cast<double>(q[d]) * row[d];
        const double cos = dot / (qnorm * rows_[i].norm);
        scored.push_back({std::clamp(cos, -1.0, 1.0), i});
    }

    const std::size_t n = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [](const Scored& a, const Scored& b) {
                          return a.score != b.score ? a.score > b.score : a.id < b.id;
                      });

    std::vector<SearchHit> hits;
    hits.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = rows_[scored[i].id];
        const float* v = values_.data() + scored[i].id * dim_;
        hits.push_back({scored[i].id, row.chunk_id, row.doc_id, scored[i].score, row.text,
                        EmbeddingVector::from_unit({v, v + dim_}, model_id_)});
    }
    return hits;
}

std::size_t VectorStore::size() const {
    std::shared_lock lock(mutex_);
    return rows_.size();
}

std::optional<VectorRecord> VectorStore::record(std::uint64_t record_id) const {
    std::shared_lock lock(mutex_);
    if (record_id >= rows_.size()) return std::nullopt;
    const auto& row = rows_[record_id];
    const float* v = values_.data() + record_id * dim_;
    return VectorRecord{record_id, row.chunk_id, row.doc_id,
                        EmbeddingVector::from_unit({v, v + dim_}, model_id_), row.text};
}

bool VectorStore::contains_doc(const std::string& doc_id) const {
    std::shared_lock lock(mutex_);
    return std::any_of(rows_.begin(), rows_.end(),
                       [&](const Row& r) { return r.doc_id == doc_id; });
}

void VectorStore::persist_to(fs::path path) {
    std::unique_lock lock(mutex_);
    persist_path_ = std::move(path);
    save_locked(*persist_path_);
}

void VectorStore::save(const fs::path& path) const {
    std::shared_lock lock(mutex_);
    save_locked(path);
}

void VectorStore::save_locked(const fs::path& path) const {
    Writer w;
    w.put_bytes(kMagic);
    w.put(kStoreFormatVersion);
    w.put(static_cast<std::uint32_t>(dim_));
    w.put(static_cast<std::uint32_t>(model_id_.size()));
    w.put_bytes(model_id_);
    w.put(static_cast<std::uint64_t>(rows_.size()));

    std::string heap;
    auto add_string = [&](const std::string& s) {
        w.put(static_cast<std::uint64_t>(heap.size()));
        w.put(static_cast<std::uint32_t>(s.size()));
        heap += s;
    };
    for (std::size_t i = 0; i < rows_.size(); ++i) {
        w.put(static_cast<std::uint64_t>(i));
        add_string(rows_[i].chunk_id);
        add_string(rows_[i].doc_id);
        add_string(rows_[i].text);
        for (std::size_t d = 0; d < dim_; ++d) w.put_f32(values_[i * dim_ + d]);
    }
    w.put(static_cast<std::uint64_t>(heap.size()));
    w.put_bytes(heap);
    w.put(crc64(w.buffer()));

    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StoreError("cannot write store file " + tmp.string());
        out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
        out.flush();
        if (!out) throw StoreError("short write to store file " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw StoreError("cannot replace store file " + path.string() + ": " + ec.message());
}

VectorStore VectorStore::load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError("cannot open store file " + path.string());
    const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

    if (data.size() < kMagic.size() + 2 || std::string_view(data).substr(0, 4) != kMagic)
        throw StoreError("corrupt store: " + path.string() + " is not a leafrx store");

    Reader header(data, path);
    header.get_bytes(4);
    const auto version = header.get<std::uint16_t>();
    if (version != kStoreFormatVersion)
        throw StoreError("unsupported store version " + std::to_string(version) + " in " +
                         path.string() + " (supported: " + std::to_string(kStoreFormatVersion) + ")");

    if (data.size() < 8) throw StoreError("corrupt store: " + path.string());
    const std::string_view body = std::string_view(data).substr(0, data.size() - 8);
    Reader trailer(std::string_view(data).substr(data.size() - 8), path);
    if (trailer.get<std::uint64_t>() != crc64(body))
        throw StoreError("corrupt store: checksum mismatch in " + path.string());

    Reader r(body, path);
    r.get_bytes(4);
    r.get<std::uint16_t>();
    const auto dim = r.get<std::uint32_t>();
    const auto model_len = r.get<std::uint32_t>();
    std::string model_id(r.get_bytes(model_len));
    const auto count = r.get<std::uint64_t>();

    const std::size_t stride = 8 + 3 * 12 + 4 * static_cast<std::size_t>(dim);
    if (dim == 0 || count > (body.size() - r.position()) / stride)
        throw StoreError("corrupt store: record table overruns " + path.string());

    struct Span {
        std::uint64_t offset;
        std::uint32_t length;
    };
    struct RawRow {
        Span chunk_id, doc_id, text;
    };
    VectorStore store(dim, std::move(model_id));
    std::vector<RawRow> raw(count);
    store.values_.resize(count * dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        if (r.get<std::uint64_t>() != i)
            throw StoreError("corrupt store: non-dense record ids in " + path.string());
        for (Span* s : {&raw[i].chunk_id, &raw[i].doc_id, &raw[i].text}) {
            s->offset = r.get<std::uint64_t>();
            s->length = r.get<std::uint32_t>();
        }
        for (std::uint32_t d = 0; d < dim; ++d) store.values_[i * dim + d] = r.get_f32();
    }
    const auto heap_size = r.get<std::uint64_t>();
    const std::string_view heap = r.get_bytes(heap_size);
    if (r.position() != body.size())
        throw StoreError("corrupt store: trailing bytes in " + path.string());

    auto slice = [&](Span s) {
        if (s.offset > heap.size() || s.length > heap.size() - s.offset)
            throw StoreError("corrupt store: string out of range in " + path.string());
        return std::string(heap.substr(s.offset, s.length));
    };
    store.rows_.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::span<const float> v(store.values_.data() + i * dim, dim);
        double sum = 0.0;
        for (float x : v) {
            if (!std::isfinite(x)) throw StoreError("corrupt store: non-finite value in " + path.string());
            sum += static_cast<double>(x) * x;
        }
        store.rows_.push_back(
            {slice(raw[i].chunk_id), slice(raw[i].doc_id), slice(raw[i].text), std::sqrt(sum)});
    }
    return store;
}

}  // namespace leafrx
