// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "postadapt/errors.hpp"

namespace postadapt {

struct FrozenModel;

// One discriminating fact: a context, the factual completion, and exactly
// three distractor completions, graded by framing intensity 1..4.
struct Fact {
    std::string id;
    std::string topic;
    int intensity = 0;
    std::string context;
    std::string truth;
    std::array<std::string, 3> distractors;
    std::string source_note;
};

// Same shape as Fact minus topic/intensity; the type itself is the role
// flag that separates anchors from discriminating facts.
struct AnchorFact {
    std::string id;
    std::string context;
    std::string truth;
    std::array<std::string, 3> distractors;
    std::string source_note;
};

struct SplitSpec {
    int split_index = 0;
    uint64_t seed = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> heldout_ids;
};

// Baseline margins keyed by (topic, intensity). 31 entries in the shipped
// reference data, level counts {9, 9, 8, 5}.
struct ReferenceMargins {
    std::map<std::pair<std::string, int>, double> entries;

    double lookup(const std::string& topic, int intensity) const;
};

struct LevelCounts {
    std::map<int, int> per_level; // intensity -> fact count
    int total = 0;
};

void validate_fact(const Fact& f);
void validate_anchor(const AnchorFact& a);

std::vector<Fact> load_facts(const std::string& path);
std::vector<AnchorFact> load_anchors(const std::string& path);
ReferenceMargins load_reference_margins(const std::string& path);

void save_facts(const std::string& path, const std::vector<Fact>& facts);
void save_anchors(const std::string& path, const std::vector<AnchorFact>& anchors);

// Succeeds only for the reference-shaped corpus: 31 facts, per-level counts
// {L1:9, L2:9, L3:8, L4:5}. Returns the counts; throws ValidationError with
// an expected-vs-actual listing otherwise.
LevelCounts validate_reference_shape(const std::vector<Fact>& facts);

// Seeded Fisher-Yates shuffle, then prefix split. Pure function of
// (corpus, n_splits, train_size, seed).
std::vector<SplitSpec> make_splits(const std::vector<Fact>& facts, int n_splits,
                                   int train_size, uint64_t seed);

struct SynthOptions {
    int n_facts = 31;
    int n_anchors = 10;
    // At least this fraction of facts must have a negative baseline margin
    // under the frozen model (emulating suppression).
    double negative_fraction = 0.5;
    // Anchors are drawn with baseline margins below this ceiling so the
    // anchor floor term in the training loss is the active constraint.
    double anchor_margin_ceiling = 0.05;
    int max_draw_factor = 400; // bounded draws: factor * n candidates
};

struct SynthFactset {
    std::vector<Fact> facts;
    std::vector<AnchorFact> anchors;
};

// Desk-scale substitute for the real corpus: random ASCII token sequences
// scored against the frozen toy model; deterministic given seed.
SynthFactset synth_factset(uint64_t seed, const SynthOptions& opts, const FrozenModel& model);

} // namespace postadapt
