// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "postadapt/evaluator.hpp"
#include "postadapt/refdata.hpp"
#include "test_util.hpp"

using namespace postadapt;

namespace {

HiddenStateCache::Record fake_record(const std::string& id, int candidate,
                                     const std::vector<float>& hidden_rows,
                                     const std::vector<uint32_t>& targets, int d_model) {
    HiddenStateCache::Record rec;
    rec.fact_id = id;
    rec.candidate = static_cast<uint8_t>(candidate);
    rec.target_ids = targets;
    rec.hiddens = Mat(static_cast<int>(targets.size()), d_model);
    rec.hiddens.data = hidden_rows;
    return rec;
}

} // namespace

TEST_CASE("sequence_logprob uniform logits case") {
    // vocab 2, d_model 1, zero embedding rows: every position scores -log 2
    Mat embed(2, 1);
    const auto rec = fake_record("r", 0, {0.7f, -0.2f, 1.5f}, {0, 1, 1}, 1);
    const double lp = sequence_logprob(rec, embed, nullptr);
    CHECK(lp == doctest::Approx(3.0 * -std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("sequence_logprob two-token hand computation") {
    // embed rows e0 = 1.0, e1 = -0.5; column dim 1
    Mat embed(2, 1);
    embed.data = {1.0f, -0.5f};
    const auto rec = fake_record("r", 0, {0.8f, -0.4f}, {0, 1}, 1);
    auto hand_lp = [&](float h_f32, int target) {
        const double h = static_cast<double>(h_f32); // cache stores f32
        const double l0 = h * 1.0, l1 = h * -0.5;
        const double mx = std::max(l0, l1);
        const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
        return (target == 0 ? l0 : l1) - lse;
    };
    const double expect = hand_lp(0.8f, 0) + hand_lp(-0.4f, 1);
    CHECK(sequence_logprob(rec, embed, nullptr) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("zero-init adapters reproduce the baseline score bit exactly") {
    Rng rng(8);
    const int d_model = 8, vocab = 32;
    Mat embed = Mat::gaussian(vocab, d_model, 0.3, rng);
    std::vector<float> rows;
    for (int i = 0; i < 2 * d_model; ++i) rows.push_back(static_cast<float>(rng.gaussian()));
    const auto rec = fake_record("r", 0, rows, {3, 17}, d_model);

    const double base = sequence_logprob(rec, embed, nullptr);
    const Adapter hidden = init_adapter(AdapterKind::swiglu, d_model, 4, 5);
    const Adapter lin = init_adapter(AdapterKind::linear, d_model, 4, 5);
    const Adapter logit = init_adapter(AdapterKind::logit, vocab, 4, 5);
    CHECK(sequence_logprob(rec, embed, &hidden) == base);
    CHECK(sequence_logprob(rec, embed, &lin) == base);
    CHECK(sequence_logprob(rec, embed, &logit) == base);
}

TEST_CASE("fact_margin definition and tie convention") {
    const dvec distractors{-5.0, -4.2, -7.1};
    CHECK(fact_margin(-3.0, distractors) == doctest::Approx(1.2).epsilon(1e-12));

    // exact tie fails
    const dvec tied{-3.0, -9.0, -4.0};
    const double m = fact_margin(-3.0, tied);
    CHECK(m == 0.0);
    CHECK_FALSE(m > 0.0);

    CHECK_THROWS_AS(fact_margin(0.0, dvec{}), ValidationError);
}

TEST_CASE("shipped reference margins give the documented pass/fail pattern") {
    const auto rm = load_reference_margins(test_util::data_root() + "/reference/fact_margins.jsonl");
    CHECK(rm.lookup("Tiananmen", 1) == doctest::Approx(17.96));
    CHECK(rm.lookup("Tiananmen", 1) > 0.0); // PASS
    CHECK(rm.lookup("Tiananmen", 4) == doctest::Approx(-17.56));
    CHECK_FALSE(rm.lookup("Tiananmen", 4) > 0.0); // FAIL
}

TEST_CASE("intensity_report reproduces the reference aggregates") {
    const auto rm = load_reference_margins(test_util::data_root() + "/reference/fact_margins.jsonl");
    const auto report = intensity_report(rm);
    REQUIRE(report.size() == 4);
    CHECK(report.at(1).n == 9);
    CHECK(report.at(1).passed == 8);
    CHECK(report.at(2).n == 9);
    CHECK(report.at(2).passed == 2);
    CHECK(report.at(3).n == 8);
    CHECK(report.at(3).passed == 3);
    CHECK(report.at(4).n == 5);
    CHECK(report.at(4).passed == 1);
    CHECK(report.at(1).rate == doctest::Approx(8.0 / 9.0));
    // arithmetic means of the shipped rows
    CHECK(report.at(1).mean_margin == doctest::Approx(3.505555555555555).epsilon(1e-9));
    CHECK(report.at(2).mean_margin == doctest::Approx(-3.398888888888889).epsilon(1e-9));
    CHECK(report.at(3).mean_margin == doctest::Approx(-2.28125).epsilon(1e-9));
    CHECK(report.at(4).mean_margin == doctest::Approx(-6.508).epsilon(1e-9));
}

TEST_CASE("intensity_report all-positive margins") {
    std::vector<std::pair<int, double>> entries;
    for (int level = 1; level <= 4; ++level)
        for (int i = 0; i < 3; ++i) entries.emplace_back(level, 1.0 + i);
    const auto report = intensity_report(entries);
    for (const auto& [level, stats] : report) {
        (void)level;
        CHECK(stats.rate == 1.0);
    }
}

TEST_CASE("pooled_stats frozen reference cases") {
    using P = std::pair<int, int>;
    SUBCASE("4B swiglu splits") {
        const std::vector<P> counts{{9, 16}, {6, 16}, {3, 16}, {3, 16}, {2, 16}};
        const PooledStats s = pooled_stats(counts);
        CHECK(s.pooled_passed == 23);
        CHECK(s.pooled_total == 80);
        CHECK(s.mean_pct == doctest::Approx(28.75).epsilon(1e-12));
        CHECK(s.std_pct == doctest::Approx(16.105123408406406).epsilon(1e-9));
    }
    SUBCASE("8B swiglu splits") {
        const std::vector<P> counts{{3, 16}, {1, 16}, {1, 16}, {2, 16}, {2, 16}};
        const PooledStats s = pooled_stats(counts);
        CHECK(s.mean_pct == doctest::Approx(11.25).epsilon(1e-12));
        CHECK(s.std_pct == doctest::Approx(4.677071733467427).epsilon(1e-9));
    }
    SUBCASE("identical splits have zero spread") {
        const std::vector<P> counts{{4, 16}, {4, 16}, {4, 16}, {4, 16}, {4, 16}};
        const PooledStats s = pooled_stats(counts);
        CHECK(s.mean_pct == doctest::Approx(25.0));
        CHECK(s.std_pct == 0.0);
    }
    SUBCASE("std is invariant under split permutation") {
        const std::vector<P> a{{9, 16}, {6, 16}, {3, 16}, {3, 16}, {2, 16}};
        const std::vector<P> b{{2, 16}, {3, 16}, {9, 16}, {3, 16}, {6, 16}};
        CHECK(pooled_stats(a).std_pct == doctest::Approx(pooled_stats(b).std_pct).epsilon(1e-12));
        CHECK(pooled_stats(a).mean_pct == doctest::Approx(pooled_stats(b).mean_pct).epsilon(1e-12));
    }
}

namespace {

// Brute-force Fisher oracle: exact binomial coefficients built from Pascal's
// triangle, independent of the lgamma route in the implementation.
double fisher_bruteforce(long a, long b, long c, long d) {
    const long r1 = a + b, r2 = c + d, c1 = a + c, n = r1 + r2;
    if (r1 == 0 || r2 == 0 || c1 == 0 || b + d == 0) return 1.0;
    std::vector<std::vector<double>> pascal;
    for (long i = 0; i <= n; ++i) {
        std::vector<double> row(static_cast<size_t>(i) + 1, 1.0);
        for (long k = 1; k < i; ++k)
            row[static_cast<size_t>(k)] =
                pascal.back()[static_cast<size_t>(k - 1)] + pascal.back()[static_cast<size_t>(k)];
        pascal.push_back(std::move(row));
    }
    auto choose = [&](long nn, long kk) {
        return pascal[static_cast<size_t>(nn)][static_cast<size_t>(kk)];
    };
    const double denom = choose(n, c1);
    auto pmf = [&](long k) { return choose(r1, k) * choose(r2, c1 - k) / denom; };
    const double obs = pmf(a);
    double p = 0.0;
    for (long k = std::max(0L, c1 - r2); k <= std::min(c1, r1); ++k)
        if (pmf(k) <= obs * (1.0 + 1e-7)) p += pmf(k);
    return std::min(1.0, p);
}

} // namespace

TEST_CASE("fisher_exact_two_sided fixed and pooled reference cases") {
    // pooled counts from the shipped per-split tables
    CHECK(fisher_exact_two_sided(23, 57, 18, 62) ==
          doctest::Approx(0.4691200596507638).epsilon(1e-9));
    CHECK(fisher_exact_two_sided(9, 71, 18, 62) ==
          doctest::Approx(0.09000460079711473).epsilon(1e-9));
    CHECK(fisher_exact_two_sided(31, 49, 20, 60) ==
          doctest::Approx(0.08928836672276748).epsilon(1e-9));
    // printed-value agreement at the documented tolerance
    CHECK(std::fabs(fisher_exact_two_sided(23, 57, 18, 62) - 0.47) < 0.01);
    CHECK(std::fabs(fisher_exact_two_sided(9, 71, 18, 62) - 0.09) < 0.01);

    CHECK(fisher_exact_two_sided(3, 1, 1, 3) ==
          doctest::Approx(fisher_bruteforce(3, 1, 1, 3)).epsilon(1e-12));
    CHECK(fisher_exact_two_sided(3, 1, 1, 3) == doctest::Approx(0.4857142857142857).epsilon(1e-12));

    SUBCASE("identical columns give p = 1") {
        CHECK(fisher_exact_two_sided(5, 3, 5, 3) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("degenerate margins give p = 1") {
        CHECK(fisher_exact_two_sided(0, 0, 3, 4) == 1.0);
        CHECK(fisher_exact_two_sided(0, 5, 0, 7) == 1.0);
    }
    SUBCASE("negative counts rejected") {
        CHECK_THROWS_AS(fisher_exact_two_sided(-1, 2, 3, 4), ValidationError);
    }
}

TEST_CASE("fisher symmetry properties") {
    Rng rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        const long a = static_cast<long>(rng.bounded(10));
        const long b = static_cast<long>(rng.bounded(10));
        const long c = static_cast<long>(rng.bounded(10));
        const long d = static_cast<long>(rng.bounded(10));
        const double p = fisher_exact_two_sided(a, b, c, d);
        CHECK(p == doctest::Approx(fisher_exact_two_sided(c, d, a, b)).epsilon(1e-10)); // swap groups
        CHECK(p == doctest::Approx(fisher_exact_two_sided(b, a, d, c)).epsilon(1e-10)); // swap outcomes
        CHECK(p > 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("fisher equals brute-force enumeration on a margin sweep") {
    for (long r1 = 1; r1 <= 8; ++r1)
        for (long r2 = 1; r2 <= 8; ++r2)
            for (long a = 0; a <= r1; ++a)
                for (long c = 0; c <= r2; ++c) {
                    const long b = r1 - a, d = r2 - c;
                    const double impl = fisher_exact_two_sided(a, b, c, d);
                    const double oracle = fisher_bruteforce(a, b, c, d);
                    CHECK(std::fabs(impl - oracle) <= 1e-12);
                }
}

namespace {

// Closed-form Wilcoxon null via the standard counting recurrence over integer
// ranks 1..n (no ties): number of sign assignments with W+ = w.
std::vector<double> wilcoxon_null_counts(int n) {
    const int max_w = n * (n + 1) / 2;
    std::vector<double> counts(static_cast<size_t>(max_w) + 1, 0.0);
    counts[0] = 1.0;
    for (int r = 1; r <= n; ++r)
        for (int w = max_w; w >= r; --w)
            counts[static_cast<size_t>(w)] += counts[static_cast<size_t>(w - r)];
    return counts;
}

double wilcoxon_pvalue_from_null(int n, double w_plus) {
    const auto counts = wilcoxon_null_counts(n);
    const double total = std::pow(2.0, n);
    double le = 0.0, ge = 0.0;
    for (size_t w = 0; w < counts.size(); ++w) {
        if (static_cast<double>(w) <= w_plus) le += counts[w];
        if (static_cast<double>(w) >= w_plus) ge += counts[w];
    }
    return std::min(1.0, 2.0 * std::min(le, ge) / total);
}

} // namespace

TEST_CASE("wilcoxon fixed cases") {
    using P = std::pair<double, double>;
    // differences {+1,+2,+3}: W+ = 6, p = 2/8
    const std::vector<P> pos{{1, 0}, {2, 0}, {3, 0}};
    CHECK(wilcoxon_signed_rank(pos) == doctest::Approx(0.25).epsilon(1e-12));

    // symmetric {+1,-1} with midranks 1.5/1.5
    const std::vector<P> sym{{1, 0}, {0, 1}};
    CHECK(wilcoxon_signed_rank(sym) == doctest::Approx(1.0).epsilon(1e-12));

    // per-split pairs from the shipped 8B table
    const std::vector<P> reference_pairs{{3, 7}, {1, 2}, {1, 5}, {2, 4}, {2, 0}};
    CHECK(wilcoxon_signed_rank(reference_pairs) == doctest::Approx(0.25).epsilon(1e-12));

    const std::vector<P> zeros{{1, 1}, {2, 2}};
    CHECK(wilcoxon_signed_rank(zeros) == 1.0);

    CHECK_THROWS_AS(wilcoxon_signed_rank(std::vector<P>{}), ValidationError);
}

TEST_CASE("wilcoxon enumeration matches the closed-form null for n <= 6") {
    for (int n = 1; n <= 6; ++n) {
        for (uint64_t signs = 0; signs < (1ULL << n); ++signs) {
            std::vector<std::pair<double, double>> pairs;
            double w_plus = 0.0;
            for (int i = 0; i < n; ++i) {
                const double mag = static_cast<double>(i + 1);
                const bool positive = signs & (1ULL << i);
                pairs.emplace_back(positive ? mag : 0.0, positive ? 0.0 : mag);
                if (positive) w_plus += mag;
            }
            const double impl = wilcoxon_signed_rank(pairs);
            const double oracle = wilcoxon_pvalue_from_null(n, w_plus);
            CHECK(impl == doctest::Approx(oracle).epsilon(1e-12));
        }
    }
}

TEST_CASE("split results JSONL round trip") {
    SplitResult r;
    r.split_index = 2;
    r.adapter_kind = "swiglu";
    FactScore s;
    s.fact_id = "f1";
    s.truth_logprob = -3.25;
    s.distractor_logprobs = {-4.0, -5.5, -3.5};
    s.margin = 0.25;
    s.pass = true;
    r.train.push_back(s);
    r.train_passed = 1;
    const std::string jsonl = split_results_to_jsonl(std::vector<SplitResult>{r});
    const auto loaded = split_results_from_jsonl(jsonl);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].split_index == 2);
    CHECK(loaded[0].adapter_kind == "swiglu");
    REQUIRE(loaded[0].train.size() == 1);
    CHECK(loaded[0].train[0].margin == 0.25);
    CHECK(loaded[0].train[0].pass);
    CHECK(loaded[0].heldout.empty());
}
