// SPDX-License-Identifier: Apache-2.0
#include "postadapt/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "postadapt/numerics.hpp"

namespace postadapt {

using nlohmann::json;

double sequence_logprob(const HiddenStateCache::Record& record, const Mat& embed,
                        const Adapter* adapter) {
    if (record.hiddens.cols != embed.cols)
        throw DimMismatch("sequence_logprob: cache d_model != embedding d_model");
    double total = 0.0;
    for (int k = 0; k < record.hiddens.rows; ++k) {
        const auto h = record.hiddens.row(k);
        dvec logits;
        if (adapter && adapter->is_hidden_kind()) {
            const dvec adapted = apply(*adapter, h);
            logits = project_logits(std::span<const double>(adapted), embed);
        } else {
            logits = project_logits(h, embed);
            if (adapter) logits = apply(*adapter, std::span<const double>(logits));
        }
        const uint32_t target = record.target_ids[static_cast<size_t>(k)];
        if (target >= logits.size())
            throw ValidationError("target token id " + std::to_string(target) +
                                  " out of range for vocab " + std::to_string(logits.size()));
        const dvec lp = log_softmax(std::span<const double>(logits));
        total += lp[target];
    }
    return total;
}

double fact_margin(double truth_logprob, std::span<const double> distractor_logprobs) {
    if (distractor_logprobs.empty())
        throw ValidationError("fact_margin: at least one distractor required");
    const double best = *std::max_element(distractor_logprobs.begin(), distractor_logprobs.end());
    return truth_logprob - best;
}

namespace {

FactScore make_score(std::string fact_id, double truth_lp, std::vector<double> distractor_lps) {
    FactScore s;
    s.fact_id = std::move(fact_id);
    s.truth_logprob = truth_lp;
    s.distractor_logprobs = std::move(distractor_lps);
    s.margin = fact_margin(s.truth_logprob, s.distractor_logprobs);
    s.pass = s.margin > 0.0; // exact ties fail
    return s;
}

} // namespace

FactScore score_fact(const HiddenStateCache& cache, const Mat& embed, const Adapter* adapter,
                     const std::string& fact_id) {
    const double truth_lp = sequence_logprob(cache.find(fact_id, 0), embed, adapter);
    std::vector<double> distractor_lps;
    for (int cand = 1; cand <= 3; ++cand)
        distractor_lps.push_back(sequence_logprob(cache.find(fact_id, cand), embed, adapter));
    return make_score(fact_id, truth_lp, std::move(distractor_lps));
}

double completion_logprob(const Mat& hiddens, int context_len, std::span<const int> completion_ids,
                          const Mat& embed) {
    double total = 0.0;
    for (size_t k = 0; k < completion_ids.size(); ++k) {
        const int pos = context_len + static_cast<int>(k) - 1;
        const dvec logits = project_logits(hiddens.row(pos), embed);
        const dvec lp = log_softmax(std::span<const double>(logits));
        total += lp[static_cast<size_t>(completion_ids[k])];
    }
    return total;
}

FactScore score_fact_direct(const FrozenModel& model, const std::string& fact_id,
                            const std::string& context, const std::string& truth,
                            std::span<const std::string> distractors) {
    const std::vector<int> ctx = tokenize(context);
    if (ctx.empty()) throw ValidationError("fact '" + fact_id + "': empty context");
    auto candidate_lp = [&](const std::string& completion) {
        const std::vector<int> comp = tokenize(completion);
        std::vector<int> tokens = ctx;
        tokens.insert(tokens.end(), comp.begin(), comp.end());
        const Mat h = forward_hidden(model, tokens);
        return completion_logprob(h, static_cast<int>(ctx.size()), comp, model.embed);
    };
    const double truth_lp = candidate_lp(truth);
    std::vector<double> distractor_lps;
    for (const auto& d : distractors) distractor_lps.push_back(candidate_lp(d));
    return make_score(fact_id, truth_lp, std::move(distractor_lps));
}

SplitResult evaluate_split(const HiddenStateCache& cache, const Mat& embed,
                           const Adapter* adapter, const SplitSpec& split,
                           const std::string& kind_label) {
    SplitResult result;
    result.split_index = split.split_index;
    result.adapter_kind = kind_label;
    for (const std::string& id : split.train_ids) {
        result.train.push_back(score_fact(cache, embed, adapter, id));
        result.train_passed += result.train.back().pass ? 1 : 0;
    }
    for (const std::string& id : split.heldout_ids) {
        result.heldout.push_back(score_fact(cache, embed, adapter, id));
        result.heldout_passed += result.heldout.back().pass ? 1 : 0;
    }
    return result;
}

std::map<int, LevelStats> intensity_report(std::span<const std::pair<int, double>> level_margins) {
    std::map<int, LevelStats> report;
    std::map<int, double> sums;
    for (const auto& [level, margin] : level_margins) {
        LevelStats& s = report[level];
        s.n += 1;
        if (margin > 0.0) s.passed += 1;
        sums[level] += margin;
    }
    for (auto& [level, s] : report) {
        s.rate = static_cast<double>(s.passed) / s.n;
        s.mean_margin = sums[level] / s.n;
    }
    return report;
}

std::map<int, LevelStats> intensity_report(const ReferenceMargins& margins) {
    std::vector<std::pair<int, double>> entries;
    for (const auto& [key, margin] : margins.entries) entries.emplace_back(key.second, margin);
    return intensity_report(entries);
}

PooledStats pooled_stats(std::span<const std::pair<int, int>> per_split_counts) {
    if (per_split_counts.empty()) throw ValidationError("pooled_stats: no splits");
    PooledStats out;
    std::vector<double> pcts;
    for (const auto& [passed, total] : per_split_counts) {
        if (total <= 0) throw ValidationError("pooled_stats: split total must be positive");
        out.pooled_passed += passed;
        out.pooled_total += total;
        pcts.push_back(100.0 * passed / total);
    }
    out.pooled_rate_pct = 100.0 * out.pooled_passed / out.pooled_total;
    out.mean_pct = std::accumulate(pcts.begin(), pcts.end(), 0.0) / static_cast<double>(pcts.size());
    double var = 0.0;
    for (double p : pcts) var += (p - out.mean_pct) * (p - out.mean_pct);
    out.std_pct = std::sqrt(var / static_cast<double>(pcts.size())); // population std
    return out;
}

namespace {

double lchoose(long n, long k) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
           std::lgamma(static_cast<double>(n - k) + 1.0);
}

} // namespace

double fisher_exact_two_sided(long a, long b, long c, long d) {
    if (a < 0 || b < 0 || c < 0 || d < 0)
        throw ValidationError("fisher_exact_two_sided: counts must be non-negative");
    const long r1 = a + b, r2 = c + d, c1 = a + c, c2 = b + d;
    if (r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0) return 1.0; // degenerate margin
    const long n = r1 + r2;
    const long lo = std::max(0L, c1 - r2);
    const long hi = std::min(c1, r1);
    auto log_pmf = [&](long k) { return lchoose(r1, k) + lchoose(r2, c1 - k) - lchoose(n, c1); };
    const double observed = log_pmf(a);
    // probability-mass rule with relative slack so equal-probability tables
    // land on the inclusive side despite lgamma rounding
    const double cutoff = observed + std::log1p(1e-7);
    double p = 0.0;
    for (long k = lo; k <= hi; ++k) {
        const double lp = log_pmf(k);
        if (lp <= cutoff) p += std::exp(lp);
    }
    return std::min(1.0, p);
}

double wilcoxon_signed_rank(std::span<const std::pair<double, double>> pairs) {
    if (pairs.empty()) throw ValidationError("wilcoxon_signed_rank: at least one pair required");
    std::vector<double> diffs;
    for (const auto& [x, y] : pairs) {
        const double d = x - y;
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty()) return 1.0; // all differences zero
    const size_t n = diffs.size();
    if (n > 24)
        throw ValidationError("wilcoxon_signed_rank: exact enumeration supports at most 24 "
                              "nonzero differences");

    // midranks over |d|
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t i, size_t j) { return std::fabs(diffs[i]) < std::fabs(diffs[j]); });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && std::fabs(diffs[order[j + 1]]) == std::fabs(diffs[order[i]])) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t t = i; t <= j; ++t) ranks[order[t]] = midrank;
        i = j + 1;
    }

    double w_plus = 0.0;
    for (size_t t = 0; t < n; ++t)
        if (diffs[t] > 0.0) w_plus += ranks[t];

    // Ranks are multiples of 0.5, so all W+ sums are exact in double and the
    // comparisons below are exact.
    const uint64_t total = 1ULL << n;
    uint64_t count_le = 0, count_ge = 0;
    for (uint64_t mask = 0; mask < total; ++mask) {
        double w = 0.0;
        for (size_t t = 0; t < n; ++t)
            if (mask & (1ULL << t)) w += ranks[t];
        if (w <= w_plus) ++count_le;
        if (w >= w_plus) ++count_ge;
    }
    const double p_le = static_cast<double>(count_le) / static_cast<double>(total);
    const double p_ge = static_cast<double>(count_ge) / static_cast<double>(total);
    return std::min(1.0, 2.0 * std::min(p_le, p_ge));
}

namespace {

json score_to_json(const FactScore& s) {
    return json{{"id", s.fact_id},
                {"truth_logprob", s.truth_logprob},
                {"distractor_logprobs", s.distractor_logprobs},
                {"margin", s.margin},
                {"pass", s.pass}};
}

FactScore score_from_json(const json& j) {
    FactScore s;
    s.fact_id = j.at("id").get<std::string>();
    s.truth_logprob = j.at("truth_logprob").get<double>();
    s.distractor_logprobs = j.at("distractor_logprobs").get<std::vector<double>>();
    s.margin = j.at("margin").get<double>();
    s.pass = j.at("pass").get<bool>();
    return s;
}

} // namespace

std::string split_results_to_jsonl(std::span<const SplitResult> results) {
    std::string out;
    for (const SplitResult& r : results) {
        json j{{"split_index", r.split_index},
               {"adapter_kind", r.adapter_kind},
               {"train_passed", r.train_passed},
               {"heldout_passed", r.heldout_passed}};
        json train = json::array();
        for (const auto& s : r.train) train.push_back(score_to_json(s));
        json heldout = json::array();
        for (const auto& s : r.heldout) heldout.push_back(score_to_json(s));
        j["train"] = train;
        j["heldout"] = heldout;
        out += j.dump() + "\n";
    }
    return out;
}

std::vector<SplitResult> split_results_from_jsonl(const std::string& content) {
    std::vector<SplitResult> results;
    std::istringstream in(content);
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            SplitResult r;
            r.split_index = j.at("split_index").get<int>();
            r.adapter_kind = j.at("adapter_kind").get<std::string>();
            r.train_passed = j.at("train_passed").get<int>();
            r.heldout_passed = j.at("heldout_passed").get<int>();
            for (const auto& s : j.at("train")) r.train.push_back(score_from_json(s));
            for (const auto& s : j.at("heldout")) r.heldout.push_back(score_from_json(s));
            results.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError("results", line_no, e.what());
        }
    }
    return results;
}

} // namespace postadapt
