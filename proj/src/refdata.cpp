// SPDX-License-Identifier: Apache-2.0
#include "postadapt/refdata.hpp"

#include <sstream>

#include <json.hpp>

#include "postadapt/io.hpp"

namespace postadapt {

using nlohmann::json;

std::string default_data_root() {
#ifdef POSTADAPT_DATA_DIR
    return POSTADAPT_DATA_DIR;
#else
    return "data";
#endif
}

std::string default_reference_dir() { return default_data_root() + "/reference"; }

double GoldenTables::margin_lookup(const std::string& topic, int intensity) const {
    for (const auto& m : margins)
        if (m.topic == topic && m.intensity == intensity) return m.margin;
    throw ValidationError("no golden margin for (" + topic + ", L" + std::to_string(intensity) + ")");
}

int GoldenTables::split_lookup(const std::string& scale, const std::string& kind,
                               int split) const {
    for (const auto& s : split_counts)
        if (s.scale == scale && s.kind == kind && s.split == split) return s.passed;
    throw ValidationError("no golden split count for (" + scale + ", " + kind + ", split " +
                          std::to_string(split) + ")");
}

ReferenceMargins GoldenTables::to_reference_margins() const {
    ReferenceMargins rm;
    for (const auto& m : margins) rm.entries[{m.topic, m.intensity}] = m.margin;
    return rm;
}

namespace {

void verify_digest(const std::string& dir, const std::string& file, const json& manifest) {
    if (!manifest.contains(file))
        throw ValidationError("digest manifest has no entry for " + file);
    const std::string expected = manifest[file].get<std::string>();
    const std::string actual = digest_hex(file_digest(dir + "/" + file));
    if (actual != expected)
        throw ValidationError("digest mismatch for " + file + ": manifest " + expected +
                              ", file " + actual);
}

template <typename Fn>
void parse_jsonl(const std::string& path, Fn fn) {
    std::istringstream in(read_file(path));
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            fn(json::parse(line));
        } catch (const json::exception& e) {
            throw ParseError(path, line_no, e.what());
        }
    }
}

} // namespace

GoldenTables load_golden(const std::string& dir) {
    json manifest;
    try {
        manifest = json::parse(read_file(dir + "/digests.json"));
    } catch (const json::exception& e) {
        throw ParseError(dir + "/digests.json: " + e.what());
    }
    const char* files[] = {"fact_margins.jsonl", "split_counts.jsonl", "level_aggregates.jsonl",
                           "scale_aggregates.jsonl"};
    for (const char* f : files) verify_digest(dir, f, manifest);

    GoldenTables g;
    parse_jsonl(dir + "/fact_margins.jsonl", [&](const json& j) {
        g.margins.push_back({j.at("topic").get<std::string>(), j.at("intensity").get<int>(),
                             j.at("margin").get<double>()});
    });
    parse_jsonl(dir + "/split_counts.jsonl", [&](const json& j) {
        g.split_counts.push_back({j.at("scale").get<std::string>(), j.at("kind").get<std::string>(),
                                  j.at("split").get<int>(), j.at("passed").get<int>(),
                                  j.at("total").get<int>()});
    });
    parse_jsonl(dir + "/level_aggregates.jsonl", [&](const json& j) {
        g.level_rows.push_back({j.at("intensity").get<int>(), j.at("facts").get<int>(),
                                j.at("passed").get<int>(), j.at("mean_margin").get<double>()});
    });
    parse_jsonl(dir + "/scale_aggregates.jsonl", [&](const json& j) {
        g.scale_rows.push_back({j.at("scale").get<std::string>(), j.at("d_model").get<int>(),
                                j.at("swiglu_mean").get<double>(), j.at("swiglu_std").get<double>(),
                                j.at("linear_mean").get<double>(), j.at("linear_std").get<double>(),
                                j.at("fisher_p").get<double>(), j.at("baseline_pct").get<double>()});
    });

    if (g.margins.size() != 31)
        throw ValidationError("golden margins: expected 31 entries, got " +
                              std::to_string(g.margins.size()));
    if (g.split_counts.size() != 30)
        throw ValidationError("golden split counts: expected 30 entries");
    for (const auto& s : g.split_counts)
        if (s.passed < 0 || s.passed > s.total || s.total != 16)
            throw ValidationError("golden split count out of range for scale " + s.scale);
    if (g.level_rows.size() != 4 || g.scale_rows.size() != 3)
        throw ValidationError("golden aggregate tables have the wrong shape");
    return g;
}

} // namespace postadapt
