#include <doctest.h>

#include <chrono>
#include <fstream>
#include <random>

#include "leafrx/detection_intake.hpp"
#include "oracles.hpp"

using namespace leafrx;
using L = DiseaseLabel;

namespace {

std::string read_fixture(const std::string& name) {
    std::ifstream in(oracle::fixtures() / name, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string stub_cmd(const std::string& mode) {
    return "STUB_MODE=" + mode + " " + (oracle::fixtures() / "stub_detector.sh").string() +
           " {image}";
}

const char* kMinimal = R"({"image_id":"i","detector":{"name":"n","version":"v"},"findings":[)";

}  // namespace

TEST_CASE("filter_labels examples") {
    auto r = filter_labels({"Phoma", "0.87", "leaf"});
    CHECK(r.kept == std::vector<L>{L::Phoma});
    CHECK(r.dropped == std::vector<std::string>{"0.87", "leaf"});

    r = filter_labels({"RUST", "rust", "Rust"});
    CHECK(r.kept == std::vector<L>{L::Rust});
    CHECK(r.dropped.empty());

    r = filter_labels({"miner,", "phoma!"});
    CHECK(r.kept == std::vector<L>{L::Miner, L::Phoma});

    r = filter_labels({"  (Miner)  ", "rusty", "ph oma", ""});
    CHECK(r.kept == std::vector<L>{L::Miner});
    CHECK(r.dropped == std::vector<std::string>{"rusty", "ph oma", ""});

    CHECK(filter_labels({}).kept.empty());
}

TEST_CASE("filter_labels partitions its input") {
    std::mt19937_64 rng(3);
    const std::vector<std::string> pool = {"rust", "RUST", "Miner.", "phoma", "leaf", "0.9",
                                           "  Phoma ", "blight", "?", "rüst", "minerr", ""};
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::string> in(std::uniform_int_distribution<int>(0, 12)(rng));
        for (auto& t : in) t = pool[pick(rng)];
        const auto r = filter_labels(in);
        std::size_t recognized = 0;
        for (const auto& t : in) recognized += canonicalize_label(t).has_value();
        CHECK(recognized + r.dropped.size() == in.size());
        std::vector<L> sorted = r.kept;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
        for (const auto& d : r.dropped) CHECK_FALSE(canonicalize_label(d).has_value());
    }
}

TEST_CASE("parse the fixture report") {
    const auto r = parse_report(read_fixture("phoma_report.json"));
    CHECK(r.image_id == "leaf-0001");
    CHECK(r.detector_name == "yolov8-seg");
    CHECK(r.detector_version == "8.0.0");
    CHECK(r.captured_at == "2024-03-01T09:30:00Z");
    REQUIRE(r.findings.size() == 1);
    CHECK(r.findings[0].label == L::Phoma);
    CHECK(r.findings[0].confidence == doctest::Approx(0.91));
    CHECK(r.findings[0].bbox == BoundingBox{0.12, 0.20, 0.30, 0.25});
}

TEST_CASE("zero findings is a valid report") {
    const auto r = parse_report(std::string(kMinimal) + "]}");
    CHECK(r.findings.empty());
    CHECK_FALSE(r.captured_at.has_value());
}

TEST_CASE("schema violations name the offending field") {
    CHECK_THROWS_WITH_AS(parse_report(std::string(kMinimal) + R"({"label":"rust","confidence":1.3}]})"),
                         "finding 0: confidence out of range [0,1]", ReportError);
    CHECK_THROWS_WITH_AS(parse_report(R"({"detector":{"name":"n","version":"v"},"findings":[]})"),
                         doctest::Contains("'image_id'"), ReportError);
    CHECK_THROWS_WITH_AS(parse_report(R"({"image_id":"i","detector":{"name":"n"},"findings":[]})"),
                         doctest::Contains("'detector.version'"), ReportError);
    CHECK_THROWS_WITH_AS(parse_report(R"({"image_id":"i","detector":{"name":"n","version":"v"}})"),
                         doctest::Contains("'findings'"), ReportError);
    CHECK_THROWS_WITH_AS(
        parse_report(std::string(kMinimal) + R"({"label":"rust","confidence":0.9},{"label":"rust"}]})"),
        doctest::Contains("finding 1"), ReportError);
    CHECK_THROWS_WITH_AS(
        parse_report(std::string(kMinimal) +
                     R"({"label":"rust","confidence":0.9,"bbox":[0.8,0.1,0.5,0.1]}]})"),
        doctest::Contains("bbox"), ReportError);
    CHECK_THROWS_WITH_AS(
        parse_report(std::string(kMinimal) +
                     R"({"label":"rust","confidence":0.9,"polygon":[[0,0],[1,1]]}]})"),
        doctest::Contains("polygon"), ReportError);
    CHECK_THROWS_WITH_AS(
        parse_report(R"({"image_id":"i","captured_at":"yesterday","detector":{"name":"n","version":"v"},"findings":[]})"),
        doctest::Contains("captured_at"), ReportError);
}

TEST_CASE("malformed JSON reports the byte offset") {
    try {
        parse_report(R"({"image_id": "x",, })");
        FAIL("expected ReportError");
    } catch (const ReportError& e) {
        REQUIRE(e.byte_offset().has_value());
        CHECK(*e.byte_offset() == 18);
    }
}

TEST_CASE("intake drops unknown labels and low confidence") {
    const auto r = parse_report(std::string(kMinimal) +
                                R"({"label":"blight","confidence":0.8},)"
                                R"({"label":"RUST","confidence":0.2},)"
                                R"({"label":"Miner","confidence":0.25}]})");
    REQUIRE(r.findings.size() == 1);
    CHECK(r.findings[0].label == L::Miner);
    CHECK(r.intake.dropped_out_of_vocabulary == 1);
    CHECK(r.intake.dropped_below_floor == 1);
    CHECK(r.intake.dropped_labels == std::vector<std::string>{"blight"});

    const auto strict = parse_report(std::string(kMinimal) + R"({"label":"Miner","confidence":0.25}]})",
                                     IntakeOptions{0.5});
    CHECK(strict.findings.empty());
}

TEST_CASE("RFC 3339 recognizer") {
    CHECK(is_rfc3339("2024-03-01T09:30:00Z"));
    CHECK(is_rfc3339("2024-03-01T09:30:00.123+02:00"));
    CHECK_FALSE(is_rfc3339("2024-03-01"));
    CHECK_FALSE(is_rfc3339("2024-03-01T09:30Z"));
}

TEST_CASE("canonical serialization is a fixed point") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        DetectionReport r;
        r.image_id = "img-" + std::to_string(trial);
        r.detector_name = "det";
        r.detector_version = "1.2";
        if (trial % 2) r.captured_at = "2024-05-06T07:08:09Z";
        const int n = trial % 5;
        for (int i = 0; i < n; ++i) {
            DetectionFinding f;
            f.label = static_cast<L>(i % 3);
            f.confidence = 0.25 + 0.75 * u(rng);
            if (i % 2) f.bbox = BoundingBox{0.1, 0.1, 0.5 * u(rng), 0.5 * u(rng)};
            if (i == 2) f.polygon = std::vector<Point>{{0, 0}, {u(rng), 0}, {0, u(rng)}};
            r.findings.push_back(f);
        }
        const auto once = report_to_json(r);
        const auto back = parse_report_json(once);
        CHECK(back == r);
        CHECK(report_to_json(back).dump() == once.dump());
    }
}

TEST_CASE("external detector process") {
    const std::filesystem::path image = "/tmp/some dir/leaf 7.jpg";

    SUBCASE("ok") {
        const auto r = run_external_detector(image, stub_cmd("ok"));
        CHECK(r.image_id == "leaf 7.jpg");
        REQUIRE(r.findings.size() == 1);
        CHECK(r.findings[0].label == L::Phoma);
    }
    SUBCASE("nonzero exit surfaces stderr") {
        try {
            run_external_detector(image, stub_cmd("fail"));
            FAIL("expected DetectorError");
        } catch (const DetectorError& e) {
            CHECK(e.exit_code() == 1);
            CHECK(e.stderr_text().find("model weights not found") != std::string::npos);
            CHECK(std::string(e.what()).find("model weights not found") != std::string::npos);
        }
    }
    SUBCASE("out-of-vocabulary labels are dropped and counted") {
        const auto r = run_external_detector(image, stub_cmd("blight"));
        REQUIRE(r.findings.size() == 1);
        CHECK(r.findings[0].label == L::Rust);
        CHECK(r.intake.dropped_out_of_vocabulary == 1);
    }
    SUBCASE("a hung detector is killed") {
        const auto t0 = std::chrono::steady_clock::now();
        CHECK_THROWS_WITH_AS(run_external_detector(image, stub_cmd("hang"), {std::chrono::milliseconds(300), {}}),
                             "detector timeout", DetectorError);
        CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5));
    }
    SUBCASE("template without placeholder") {
        CHECK_THROWS_AS(run_external_detector(image, "true"), DetectorError);
    }
}
