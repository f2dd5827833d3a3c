// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "postadapt/adapters.hpp"
#include "postadapt/model.hpp"

namespace postadapt {

struct FactScore {
    std::string fact_id;
    double truth_logprob = 0.0;
    std::vector<double> distractor_logprobs; // exactly 3 for standard facts
    double margin = 0.0;                     // truth - max(distractors)
    bool pass = false;                       // margin > 0; exact ties fail
};

struct SplitResult {
    int split_index = 0;
    std::string adapter_kind;
    std::vector<FactScore> train;
    std::vector<FactScore> heldout;
    int train_passed = 0;
    int heldout_passed = 0;
};

struct PooledStats {
    int pooled_passed = 0;
    int pooled_total = 0;
    double pooled_rate_pct = 0.0;
    double mean_pct = 0.0;
    double std_pct = 0.0; // population std (divide by N)
};

struct LevelStats {
    int n = 0;
    int passed = 0;
    double rate = 0.0;
    double mean_margin = 0.0;
};

// Summed completion log-probability for one cached candidate. adapter may be
// null (baseline). Hidden-kind adapters act before the tied projection,
// the logit adapter after it.
double sequence_logprob(const HiddenStateCache::Record& record, const Mat& embed,
                        const Adapter* adapter);

double fact_margin(double truth_logprob, std::span<const double> distractor_logprobs);

FactScore score_fact(const HiddenStateCache& cache, const Mat& embed,
                     const Adapter* adapter, const std::string& fact_id);

// Summed completion log-probability over full-forward hidden states, reading
// the row preceding each completion token.
double completion_logprob(const Mat& hiddens, int context_len, std::span<const int> completion_ids,
                          const Mat& embed);

// Scores candidates through a fresh forward pass (no cache). Used by the
// synthesizer and by the cache/direct equivalence checks.
FactScore score_fact_direct(const FrozenModel& model, const std::string& fact_id,
                            const std::string& context, const std::string& truth,
                            std::span<const std::string> distractors);

SplitResult evaluate_split(const HiddenStateCache& cache, const Mat& embed,
                           const Adapter* adapter, const SplitSpec& split,
                           const std::string& kind_label);

std::map<int, LevelStats> intensity_report(std::span<const std::pair<int, double>> level_margins);
std::map<int, LevelStats> intensity_report(const ReferenceMargins& margins);

PooledStats pooled_stats(std::span<const std::pair<int, int>> per_split_counts);

// Exact two-sided Fisher test on the 2x2 table [[a, b], [c, d]] by the
// probability-mass rule: sum of hypergeometric probabilities of all
// fixed-margin tables no more likely than the observed one (relative slack
// 1e-7 on the comparison). Degenerate margins give p = 1.
double fisher_exact_two_sided(long a, long b, long c, long d);

// Exact two-sided Wilcoxon signed-rank: zero differences dropped, midranks
// for tied magnitudes, full enumeration of all 2^n sign assignments,
// p = min(1, 2 * min(P(W+ <= w), P(W+ >= w))). All-zero differences give 1.
double wilcoxon_signed_rank(std::span<const std::pair<double, double>> pairs);

std::string split_results_to_jsonl(std::span<const SplitResult> results);
std::vector<SplitResult> split_results_from_jsonl(const std::string& content);

} // namespace postadapt
