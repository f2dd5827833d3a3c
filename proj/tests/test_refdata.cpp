// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "postadapt/evaluator.hpp"
#include "postadapt/io.hpp"
#include "postadapt/refdata.hpp"
#include "test_util.hpp"

using namespace postadapt;
using test_util::TempDir;

TEST_CASE("load_golden verifies digests and shapes") {
    const GoldenTables g = load_golden(default_reference_dir());
    CHECK(g.margins.size() == 31);
    CHECK(g.split_counts.size() == 30);
    CHECK(g.level_rows.size() == 4);
    CHECK(g.scale_rows.size() == 3);
}

TEST_CASE("golden lookups match the shipped tables") {
    const GoldenTables g = load_golden(default_reference_dir());
    CHECK(g.margin_lookup("Tiananmen", 4) == doctest::Approx(-17.56));
    CHECK(g.margin_lookup("Tiananmen", 1) == doctest::Approx(17.96));
    CHECK(g.split_lookup("14B", "swiglu", 4) == 9);
    CHECK(g.split_lookup("8B", "linear", 5) == 0);
    CHECK_THROWS_AS(g.margin_lookup("Tibet", 4), ValidationError);
    CHECK_THROWS_AS(g.split_lookup("8B", "swiglu", 6), ValidationError);
}

TEST_CASE("pooled sums from golden split counts") {
    const GoldenTables g = load_golden(default_reference_dir());
    auto pooled = [&](const std::string& scale, const std::string& kind) {
        int total = 0;
        for (const auto& s : g.split_counts)
            if (s.scale == scale && s.kind == kind) total += s.passed;
        return total;
    };
    CHECK(pooled("4B", "swiglu") == 23);
    CHECK(pooled("4B", "linear") == 18);
    CHECK(pooled("8B", "swiglu") == 9);
    CHECK(pooled("8B", "linear") == 18);
    CHECK(pooled("14B", "swiglu") == 31);
    CHECK(pooled("14B", "linear") == 20);
}

TEST_CASE("golden margin positives per level equal the level-table pass counts") {
    const GoldenTables g = load_golden(default_reference_dir());
    std::map<int, int> positives;
    for (const auto& m : g.margins)
        if (m.margin > 0.0) positives[m.intensity]++;
    for (const auto& row : g.level_rows) CHECK(positives[row.intensity] == row.passed);
}

TEST_CASE("golden reference margins convert to the factset type") {
    const GoldenTables g = load_golden(default_reference_dir());
    const ReferenceMargins rm = g.to_reference_margins();
    CHECK(rm.entries.size() == 31);
    const auto report = intensity_report(rm);
    CHECK(report.at(1).passed == 8);
    CHECK(report.at(4).passed == 1);
}

TEST_CASE("tampered golden data fails loudly naming the file") {
    TempDir tmp("golden_tamper");
    const std::string src = default_reference_dir();
    for (const auto& entry : std::filesystem::directory_iterator(src))
        std::filesystem::copy_file(entry.path(), tmp.path / entry.path().filename());

    // flip one margin value
    std::string content = read_file(tmp.file("fact_margins.jsonl"));
    const auto pos = content.find("17.96");
    REQUIRE(pos != std::string::npos);
    content.replace(pos, 5, "18.96");
    test_util::write_text(tmp.file("fact_margins.jsonl"), content);

    CHECK_THROWS_WITH_AS(load_golden(tmp.path.string()),
                         doctest::Contains("fact_margins.jsonl"), ValidationError);
}

TEST_CASE("missing manifest entry is an error") {
    TempDir tmp("golden_missing");
    test_util::write_text(tmp.file("digests.json"), "{}");
    test_util::write_text(tmp.file("fact_margins.jsonl"), "");
    CHECK_THROWS_AS(load_golden(tmp.path.string()), ValidationError);
}
