// SPDX-License-Identifier: Apache-2.0
#include "postadapt/factset.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <json.hpp>

#include "postadapt/evaluator.hpp"
#include "postadapt/io.hpp"
#include "postadapt/model.hpp"
#include "postadapt/rng.hpp"

namespace postadapt {

using nlohmann::json;

namespace {

// Applies fn to each non-empty line; parse failures carry the line number.
template <typename Fn>
void for_each_jsonl(const std::string& path, Fn fn) {
    const std::string content = read_file(path);
    std::istringstream in(content);
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(path, line_no, e.what());
        }
        try {
            fn(j);
        } catch (const json::exception& e) {
            throw ParseError(path, line_no, e.what());
        }
    }
}

std::array<std::string, 3> read_distractors(const json& j, const std::string& id) {
    if (!j.contains("distractors") || !j["distractors"].is_array() || j["distractors"].size() != 3)
        throw ValidationError("fact '" + id + "': expected exactly 3 distractors");
    std::array<std::string, 3> out;
    for (size_t i = 0; i < 3; ++i) out[i] = j["distractors"][i].get<std::string>();
    return out;
}

void check_completions(const std::string& id, const std::string& context, const std::string& truth,
                       const std::array<std::string, 3>& distractors) {
    if (context.empty()) throw ValidationError("fact '" + id + "': empty context");
    if (truth.empty()) throw ValidationError("fact '" + id + "': empty truth completion");
    for (const auto& d : distractors) {
        if (d.empty()) throw ValidationError("fact '" + id + "': empty distractor");
        if (d == truth) throw ValidationError("fact '" + id + "': distractor equals truth");
    }
}

json fact_to_json(const Fact& f) {
    json j{{"id", f.id},           {"topic", f.topic}, {"intensity", f.intensity},
           {"context", f.context}, {"truth", f.truth}, {"distractors", f.distractors}};
    if (!f.source_note.empty()) j["source_note"] = f.source_note;
    return j;
}

json anchor_to_json(const AnchorFact& a) {
    json j{{"id", a.id}, {"context", a.context}, {"truth", a.truth}, {"distractors", a.distractors}};
    if (!a.source_note.empty()) j["source_note"] = a.source_note;
    return j;
}

} // namespace

double ReferenceMargins::lookup(const std::string& topic, int intensity) const {
    auto it = entries.find({topic, intensity});
    if (it == entries.end())
        throw ValidationError("no reference margin for (" + topic + ", L" +
                              std::to_string(intensity) + ")");
    return it->second;
}

void validate_fact(const Fact& f) {
    if (f.id.empty()) throw ValidationError("fact with empty id");
    if (f.intensity < 1 || f.intensity > 4)
        throw ValidationError("fact '" + f.id + "': intensity " + std::to_string(f.intensity) +
                              " outside {1,2,3,4}");
    check_completions(f.id, f.context, f.truth, f.distractors);
}

void validate_anchor(const AnchorFact& a) {
    if (a.id.empty()) throw ValidationError("anchor with empty id");
    check_completions(a.id, a.context, a.truth, a.distractors);
}

std::vector<Fact> load_facts(const std::string& path) {
    std::vector<Fact> facts;
    for_each_jsonl(path, [&](const json& j) {
        Fact f;
        f.id = j.at("id").get<std::string>();
        f.topic = j.at("topic").get<std::string>();
        f.intensity = j.at("intensity").get<int>();
        f.context = j.at("context").get<std::string>();
        f.truth = j.at("truth").get<std::string>();
        f.distractors = read_distractors(j, f.id);
        if (j.contains("source_note")) f.source_note = j["source_note"].get<std::string>();
        validate_fact(f);
        facts.push_back(std::move(f));
    });
    std::set<std::string> ids;
    for (const Fact& f : facts)
        if (!ids.insert(f.id).second)
            throw ValidationError("duplicate fact id '" + f.id + "' in " + path);
    return facts;
}

std::vector<AnchorFact> load_anchors(const std::string& path) {
    std::vector<AnchorFact> anchors;
    for_each_jsonl(path, [&](const json& j) {
        AnchorFact a;
        a.id = j.at("id").get<std::string>();
        a.context = j.at("context").get<std::string>();
        a.truth = j.at("truth").get<std::string>();
        a.distractors = read_distractors(j, a.id);
        if (j.contains("source_note")) a.source_note = j["source_note"].get<std::string>();
        validate_anchor(a);
        anchors.push_back(std::move(a));
    });
    std::set<std::string> ids;
    for (const AnchorFact& a : anchors)
        if (!ids.insert(a.id).second)
            throw ValidationError("duplicate anchor id '" + a.id + "' in " + path);
    return anchors;
}

ReferenceMargins load_reference_margins(const std::string& path) {
    ReferenceMargins rm;
    for_each_jsonl(path, [&](const json& j) {
        const auto topic = j.at("topic").get<std::string>();
        const int intensity = j.at("intensity").get<int>();
        const double margin = j.at("margin").get<double>();
        if (!rm.entries.emplace(std::make_pair(topic, intensity), margin).second)
            throw ValidationError("duplicate reference margin for (" + topic + ", L" +
                                  std::to_string(intensity) + ")");
    });
    if (rm.entries.size() != 31)
        throw ValidationError("reference margins: expected 31 entries, got " +
                              std::to_string(rm.entries.size()));
    std::map<int, int> per_level;
    for (const auto& [key, _] : rm.entries) per_level[key.second]++;
    const std::map<int, int> expected{{1, 9}, {2, 9}, {3, 8}, {4, 5}};
    if (per_level != expected)
        throw ValidationError("reference margins: level counts do not match {9,9,8,5}");
    return rm;
}

void save_facts(const std::string& path, const std::vector<Fact>& facts) {
    std::string out;
    for (const Fact& f : facts) out += fact_to_json(f).dump() + "\n";
    write_file(path, out);
}

void save_anchors(const std::string& path, const std::vector<AnchorFact>& anchors) {
    std::string out;
    for (const AnchorFact& a : anchors) out += anchor_to_json(a).dump() + "\n";
    write_file(path, out);
}

LevelCounts validate_reference_shape(const std::vector<Fact>& facts) {
    LevelCounts counts;
    for (const Fact& f : facts) {
        counts.per_level[f.intensity]++;
        counts.total++;
    }
    const std::map<int, int> expected{{1, 9}, {2, 9}, {3, 8}, {4, 5}};
    if (counts.total != 31 || counts.per_level != expected) {
        std::ostringstream msg;
        msg << "corpus shape mismatch: expected {L1:9, L2:9, L3:8, L4:5} total 31, got {";
        for (int level = 1; level <= 4; ++level) {
            auto it = counts.per_level.find(level);
            msg << "L" << level << ":" << (it == counts.per_level.end() ? 0 : it->second)
                << (level < 4 ? ", " : "");
        }
        msg << "} total " << counts.total;
        throw ValidationError(msg.str());
    }
    return counts;
}

std::vector<SplitSpec> make_splits(const std::vector<Fact>& facts, int n_splits, int train_size,
                                   uint64_t seed) {
    const int n = static_cast<int>(facts.size());
    if (n_splits < 1) throw ValidationError("make_splits: n_splits must be >= 1");
    if (train_size < 1 || train_size >= n)
        throw ValidationError("make_splits: train_size " + std::to_string(train_size) +
                              " must be in [1, corpus size " + std::to_string(n) + ")");
    std::vector<SplitSpec> splits;
    splits.reserve(static_cast<size_t>(n_splits));
    for (int s = 0; s < n_splits; ++s) {
        const uint64_t split_seed = Rng::derive(seed, static_cast<uint64_t>(s)).next_u64();
        Rng rng(split_seed);
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            const auto j = static_cast<int>(rng.bounded(static_cast<uint64_t>(i) + 1));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        SplitSpec spec;
        spec.split_index = s;
        spec.seed = split_seed;
        for (int i = 0; i < n; ++i) {
            const std::string& id = facts[static_cast<size_t>(order[static_cast<size_t>(i)])].id;
            (i < train_size ? spec.train_ids : spec.heldout_ids).push_back(id);
        }
        splits.push_back(std::move(spec));
    }
    return splits;
}

namespace {

std::string random_words(Rng& rng, int n_words, int word_len_lo, int word_len_hi) {
    std::string s;
    for (int w = 0; w < n_words; ++w) {
        if (w > 0) s += ' ';
        const auto len =
            word_len_lo + static_cast<int>(rng.bounded(static_cast<uint64_t>(word_len_hi - word_len_lo + 1)));
        for (int i = 0; i < len; ++i) s += static_cast<char>('a' + rng.bounded(26));
    }
    return s;
}

struct Candidate {
    std::string context;
    std::string truth;
    std::array<std::string, 3> distractors;
    double margin;
};

Candidate draw_candidate(Rng& rng, const FrozenModel& model, int serial) {
    Candidate c;
    c.context = "q" + std::to_string(serial) + " " + random_words(rng, 3, 3, 6) + " ";
    std::set<std::string> used;
    auto draw_completion = [&] {
        std::string s;
        do {
            s = random_words(rng, 2, 3, 5);
        } while (!used.insert(s).second);
        return s;
    };
    c.truth = draw_completion();
    for (auto& d : c.distractors) d = draw_completion();
    const FactScore score =
        score_fact_direct(model, "candidate", c.context, c.truth, c.distractors);
    c.margin = score.margin;
    return c;
}

} // namespace

SynthFactset synth_factset(uint64_t seed, const SynthOptions& opts, const FrozenModel& model) {
    SynthFactset out;
    Rng rng = Rng::derive(seed, 0x5f4c7);
    const int need_negative =
        static_cast<int>(std::ceil(opts.negative_fraction * opts.n_facts));

    // The intensity shape follows the reference corpus when n_facts == 31;
    // otherwise levels are assigned proportionally to the same pattern.
    const std::array<int, 4> pattern{9, 9, 8, 5};
    std::vector<int> levels;
    for (int level = 0; level < 4; ++level) {
        const int quota = (opts.n_facts == 31)
                              ? pattern[static_cast<size_t>(level)]
                              : (opts.n_facts * pattern[static_cast<size_t>(level)] + 15) / 31;
        for (int i = 0; i < quota && static_cast<int>(levels.size()) < opts.n_facts; ++i)
            levels.push_back(level + 1);
    }
    while (static_cast<int>(levels.size()) < opts.n_facts) levels.push_back(1);

    int negatives = 0;
    int draws = 0;
    const int max_draws = opts.max_draw_factor * std::max(1, opts.n_facts + opts.n_anchors);
    int serial = 0;
    while (static_cast<int>(out.facts.size()) < opts.n_facts) {
        if (++draws > max_draws)
            throw ValidationError(
                "synth_factset: could not find enough negative-margin facts within " +
                std::to_string(max_draws) + " draws; try a different seed");
        Candidate c = draw_candidate(rng, model, serial++);
        const int remaining = opts.n_facts - static_cast<int>(out.facts.size());
        const int still_needed = need_negative - negatives;
        if (c.margin >= 0.0 && still_needed >= remaining) continue; // only negatives still fit
        if (c.margin < 0.0) ++negatives;
        Fact f;
        const auto idx = out.facts.size();
        f.id = "synth-" + std::to_string(idx);
        f.topic = "synth_topic_" + std::to_string(idx % 8);
        f.intensity = levels[idx];
        f.context = c.context;
        f.truth = c.truth;
        f.distractors = c.distractors;
        validate_fact(f);
        out.facts.push_back(std::move(f));
    }

    while (static_cast<int>(out.anchors.size()) < opts.n_anchors) {
        if (++draws > max_draws)
            throw ValidationError("synth_factset: could not find enough anchors with margin below " +
                                  std::to_string(opts.anchor_margin_ceiling) +
                                  " within the draw budget; try a different seed");
        Candidate c = draw_candidate(rng, model, serial++);
        if (c.margin >= opts.anchor_margin_ceiling) continue;
        AnchorFact a;
        a.id = "anchor-" + std::to_string(out.anchors.size());
        a.context = c.context;
        a.truth = c.truth;
        a.distractors = c.distractors;
        validate_anchor(a);
        out.anchors.push_back(std::move(a));
    }
    return out;
}

} // namespace postadapt
