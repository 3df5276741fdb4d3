#include <doctest.h>

#include <cstring>
#include <fstream>
#include <set>
#include <thread>

#include "leafrx/vector_store.hpp"
#include "oracles.hpp"

using namespace leafrx;
namespace fs = std::filesystem;

namespace {

NewRecord rec(std::vector<float> v, std::string id, std::string model = "m") {
    const std::string doc = id.substr(0, id.find('#'));
    return {id, doc, EmbeddingVector::normalized(std::move(v), std::move(model)), "text of " + id};
}

fs::path temp_file(const std::string& stem) {
    return fs::temp_directory_path() /
           (stem + "-" + std::to_string(std::random_device{}()) + ".store");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Bitwise reflected CRC-64 with the ECMA-182 polynomial, init and xorout all ones.
std::uint64_t crc64_xz_reference(std::string_view bytes) {
    std::uint64_t crc = ~0ULL;
    for (unsigned char b : bytes) {
        crc ^= b;
        for (int i = 0; i < 8; ++i) crc = (crc & 1) ? (crc >> 1) ^ 0xC96C5795D7870F42ULL : crc >> 1;
    }
    return ~crc;
}

template <typename T>
T read_le(const std::string& s, std::size_t at) {
    T v{};
    std::memcpy(&v, s.data() + at, sizeof(T));
    return v;
}

}  // namespace

TEST_CASE("reference CRC matches the published check value") {
    CHECK(crc64_xz_reference("123456789") == 0x995DC9BBDF1939FAULL);
}

TEST_CASE("insert assigns dense ids") {
    VectorStore s(3, "m");
    const auto ids = s.insert({rec({1, 0, 0}, "a#0"), rec({0, 1, 0}, "a#1"), rec({0, 0, 1}, "b#0")});
    CHECK(ids == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(s.insert({rec({1, 1, 0}, "c#0")}) == std::vector<std::uint64_t>{3});
    CHECK(s.size() == 4);
    CHECK(s.contains_doc("b"));
    CHECK_FALSE(s.contains_doc("z"));
    CHECK(s.record(2)->chunk_id == "b#0");
    CHECK_FALSE(s.record(9).has_value());
}

TEST_CASE("insert rejects dimension and model mismatches") {
    VectorStore s(3, "m");
    CHECK_THROWS_WITH_AS(s.insert({rec({1, 0}, "a#0")}),
                         doctest::Contains("expects dim 3"), StoreError);
    CHECK_THROWS_WITH_AS(s.insert({rec({1, 0, 0}, "a#0", "other")}),
                         doctest::Contains("model drift"), StoreError);
    CHECK(s.size() == 0);
}

TEST_CASE("concurrent inserts keep ids unique and dense") {
    VectorStore s(4, "m");
    std::vector<std::vector<std::uint64_t>> got(4);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
        threads.emplace_back([&, t] {
            for (int i = 0; i < 25; ++i) {
                auto ids = s.insert({rec({1, float(t), float(i), 1}, "t" + std::to_string(t) + "#" +
                                                                      std::to_string(i))});
                got[t].insert(got[t].end(), ids.begin(), ids.end());
            }
        });
    }
    for (auto& th : threads) th.join();
    std::set<std::uint64_t> all;
    for (auto& g : got) {
        CHECK(std::is_sorted(g.begin(), g.end()));
        all.insert(g.begin(), g.end());
    }
    CHECK(all.size() == 100);
    CHECK(*all.rbegin() == 99);
}

TEST_CASE("search basics") {
    VectorStore s(2, "m");
    s.insert({rec({1, 0}, "x#0"), rec({0, 1}, "y#0")});
    const auto hits = s.search(EmbeddingVector::normalized({1, 0}, "m"), 2);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].record_id == 0);
    CHECK(hits[0].score == doctest::Approx(1.0));
    CHECK(hits[1].score == doctest::Approx(0.0));
    CHECK(hits[0].text == "text of x#0");

    CHECK(s.search(EmbeddingVector::normalized({1, 0}, "m"), 10).size() == 2);
    CHECK_THROWS_WITH_AS(s.search(EmbeddingVector::normalized({1, 0}, "m"), 0),
                         "k must be positive", StoreError);
    CHECK(VectorStore(2, "m").search(EmbeddingVector::normalized({1, 0}, "m"), 3).empty());
    const auto only_y = s.search(EmbeddingVector::normalized({1, 0}, "m"), 5, std::string("y"));
    REQUIRE(only_y.size() == 1);
    CHECK(only_y[0].chunk_id == "y#0");
}

TEST_CASE("every stored vector is its own nearest neighbour") {
    std::mt19937_64 rng(5);
    VectorStore s(32, "m");
    std::vector<NewRecord> recs;
    for (int i = 0; i < 200; ++i)
        recs.push_back(rec(oracle::random_unit(rng, 32), "d#" + std::to_string(i)));
    s.insert(recs);
    for (std::uint64_t id = 0; id < 200; ++id) {
        const auto hits = s.search(s.record(id)->vector, 1);
        CHECK(hits[0].record_id == id);
        CHECK(hits[0].score == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("ties break by ascending record id") {
    VectorStore s(2, "m");
    s.insert({rec({0, 1}, "a#0"), rec({1, 0}, "b#0"), rec({1, 0}, "c#0"), rec({1, 0}, "d#0")});
    const auto hits = s.search(EmbeddingVector::normalized({1, 0}, "m"), 3);
    CHECK(hits[0].record_id == 1);
    CHECK(hits[1].record_id == 2);
    CHECK(hits[2].record_id == 3);
}

TEST_CASE("search agrees with the brute-force oracle") {
    std::mt19937_64 rng(2024);
    const std::size_t dim = 64;
    std::vector<std::vector<float>> base;
    std::vector<NewRecord> recs;
    for (int i = 0; i < 1000; ++i) {
        base.push_back(oracle::random_unit(rng, dim));
        recs.push_back(rec(base.back(), "d#" + std::to_string(i)));
    }
    VectorStore s(dim, "m");
    s.insert(recs);
    for (int q = 0; q < 50; ++q) {
        const auto query = oracle::random_unit(rng, dim);
        for (std::size_t k : {1u, 5u, 10u}) {
            const auto expected = oracle::brute_force_topk(base, query, k);
            const auto hits = s.search(EmbeddingVector::from_unit(query, "m"), k);
            REQUIRE(hits.size() == k);
            for (std::size_t i = 0; i < k; ++i) {
                CHECK(hits[i].record_id == expected[i].first);
                CHECK(hits[i].score == doctest::Approx(expected[i].second).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("save and load round trip") {
    std::mt19937_64 rng(9);
    VectorStore s(16, "local-hash-v1");
    std::vector<NewRecord> recs;
    for (int i = 0; i < 40; ++i) {
        auto r = rec(oracle::random_unit(rng, 16), "doc" + std::to_string(i % 4) + "#" +
                                                       std::to_string(i),
                     "local-hash-v1");
        r.text = "chunk " + std::to_string(i) + " — café";
        recs.push_back(std::move(r));
    }
    s.insert(recs);
    const auto path = temp_file("roundtrip");
    s.save(path);
    const auto loaded = VectorStore::load(path);
    CHECK(loaded.size() == 40);
    CHECK(loaded.dim() == 16);
    CHECK(loaded.model_id() == "local-hash-v1");
    for (std::uint64_t id = 0; id < 40; ++id) {
        const auto a = s.record(id);
        const auto b = loaded.record(id);
        CHECK(a->chunk_id == b->chunk_id);
        CHECK(a->doc_id == b->doc_id);
        CHECK(a->text == b->text);
        CHECK(a->vector == b->vector);
    }
    for (int q = 0; q < 10; ++q) {
        const auto query = EmbeddingVector::from_unit(oracle::random_unit(rng, 16), "local-hash-v1");
        CHECK(s.search(query, 5) == loaded.search(query, 5));
    }

    // header fields and trailing checksum, read back independently
    const auto bytes = slurp(path);
    CHECK(bytes.substr(0, 4) == "LFRX");
    CHECK(read_le<std::uint16_t>(bytes, 4) == kStoreFormatVersion);
    CHECK(read_le<std::uint32_t>(bytes, 6) == 16);
    CHECK(read_le<std::uint32_t>(bytes, 10) == 13);
    CHECK(bytes.substr(14, 13) == "local-hash-v1");
    CHECK(read_le<std::uint64_t>(bytes, 27) == 40);
    CHECK(read_le<std::uint64_t>(bytes, bytes.size() - 8) ==
          crc64_xz_reference(std::string_view(bytes).substr(0, bytes.size() - 8)));
    fs::remove(path);
}

TEST_CASE("an empty store round trips") {
    const auto path = temp_file("empty");
    VectorStore(8, "m").save(path);
    const auto loaded = VectorStore::load(path);
    CHECK(loaded.size() == 0);
    CHECK(loaded.dim() == 8);
    fs::remove(path);
}

TEST_CASE("damaged files are rejected") {
    VectorStore s(4, "m");
    s.insert({rec({1, 2, 3, 4}, "a#0"), rec({4, 3, 2, 1}, "b#0")});
    const auto path = temp_file("damaged");
    s.save(path);
    const auto bytes = slurp(path);

    SUBCASE("truncated") {
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 11);
        CHECK_THROWS_WITH_AS(VectorStore::load(path), doctest::Contains("corrupt store"), StoreError);
    }
    SUBCASE("bit flip") {
        auto flipped = bytes;
        flipped[40] ^= 0x01;
        std::ofstream(path, std::ios::binary | std::ios::trunc) << flipped;
        CHECK_THROWS_WITH_AS(VectorStore::load(path), doctest::Contains("corrupt store"), StoreError);
    }
    SUBCASE("future version") {
        auto newer = bytes;
        newer[4] = 2;
        std::ofstream(path, std::ios::binary | std::ios::trunc) << newer;
        try {
            VectorStore::load(path);
            FAIL("expected StoreError");
        } catch (const StoreError& e) {
            const std::string msg = e.what();
            CHECK(msg.find(path.string()) != std::string::npos);
            CHECK(msg.find("version 2") != std::string::npos);
            CHECK(msg.find("supported: 1") != std::string::npos);
        }
    }
    SUBCASE("not a store") {
        std::ofstream(path, std::ios::binary | std::ios::trunc) << "hello";
        CHECK_THROWS_WITH_AS(VectorStore::load(path), doctest::Contains("corrupt store"), StoreError);
    }
    fs::remove(path);
}

TEST_CASE("a persisted store writes every insert through") {
    const auto path = temp_file("persist");
    VectorStore s(2, "m");
    s.persist_to(path);
    s.insert({rec({1, 0}, "a#0")});
    CHECK(VectorStore::load(path).size() == 1);
    s.insert({rec({0, 1}, "b#0")});
    CHECK(VectorStore::load(path).size() == 2);
    // copies are detached from the original file
    VectorStore copy(s);
    copy.insert({rec({1, 1}, "c#0")});
    CHECK(VectorStore::load(path).size() == 2);
    fs::remove(path);
}

TEST_CASE("store handle swaps snapshots") {
    auto first = std::make_shared<const VectorStore>(2, "m");
    StoreHandle h(first);
    auto next = std::make_shared<VectorStore>(*h.snapshot());
    next->insert({rec({1, 0}, "a#0")});
    h.swap(next);
    CHECK(first->size() == 0);
    CHECK(h.snapshot()->size() == 1);
}
