// SPDX-License-Identifier: Apache-2.0
//
// Single entry point wiring the library into reproducible experiment
// pipelines. Subcommands: synth, cache, train, eval, report, pipeline,
// steer, generate, gradcheck, stats.
//
// Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "postadapt/evaluator.hpp"
#include "postadapt/generation.hpp"
#include "postadapt/io.hpp"
#include "postadapt/numerics.hpp"
#include "postadapt/refdata.hpp"
#include "postadapt/steering.hpp"
#include "postadapt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace postadapt;

namespace {

// ----------------------------- manifest -----------------------------

struct Manifest {
    std::string command;
    json config = json::object();
    json inputs = json::object();
    std::vector<std::string> outputs;
    uint64_t seed = 0;

    void add_input(const std::string& path) { inputs[path] = digest_hex(file_digest(path)); }

    void write(const std::string& out_dir) const {
        json j;
        j["command"] = command;
        j["config"] = config;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["seed"] = seed;
        const auto now = std::chrono::system_clock::now();
        const std::time_t t = std::chrono::system_clock::to_time_t(now);
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        j["timestamp"] = buf;
        write_file(out_dir + "/manifest.json", j.dump(2) + "\n");
    }
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
}

std::string fmt(const char* format, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

// ----------------------------- corpus dir -----------------------------

struct RunInputs {
    std::vector<Fact> facts;
    std::vector<AnchorFact> anchors;
    FrozenModel model;
    std::string facts_path, anchors_path, model_path;
};

RunInputs load_corpus(const std::string& dir) {
    RunInputs in;
    in.facts_path = dir + "/facts.jsonl";
    in.anchors_path = dir + "/anchors.jsonl";
    in.model_path = dir + "/model.toy1";
    in.facts = load_facts(in.facts_path);
    in.anchors = load_anchors(in.anchors_path);
    in.model = load_model(in.model_path);
    return in;
}

int worker_count(size_t cells) {
    unsigned n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* cap = std::getenv("POSTADAPT_WORKERS")) {
        const long v = std::strtol(cap, nullptr, 10);
        if (v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
    }
    return static_cast<int>(std::min<size_t>(n, std::max<size_t>(cells, 1)));
}

// Runs fn(i) for i in [0, count) on a small pool; rethrows the first error.
template <typename Fn>
void parallel_for(size_t count, Fn fn) {
    const int workers = worker_count(count);
    if (workers <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ----------------------------- synth -----------------------------

struct SynthArgs {
    uint64_t seed = 1;
    std::string out_dir;
    int n_facts = 31;
    int n_anchors = 10;
    double neg_frac = 0.5;
    ToyModelConfig model_cfg;
};

int cmd_synth(const SynthArgs& a) {
    ensure_dir(a.out_dir);
    ToyModelConfig mcfg = a.model_cfg;
    mcfg.init_seed = Rng::derive(a.seed, 0xdead).next_u64();
    const FrozenModel model = init_toy_model(mcfg);

    SynthOptions opts;
    opts.n_facts = a.n_facts;
    opts.n_anchors = a.n_anchors;
    opts.negative_fraction = a.neg_frac;
    const SynthFactset fsset = synth_factset(a.seed, opts, model);

    save_facts(a.out_dir + "/facts.jsonl", fsset.facts);
    save_anchors(a.out_dir + "/anchors.jsonl", fsset.anchors);
    save_model(a.out_dir + "/model.toy1", model);

    // baseline margin summary by intensity level
    std::vector<std::pair<int, double>> level_margins;
    int negative = 0;
    for (const Fact& f : fsset.facts) {
        const FactScore s = score_fact_direct(model, f.id, f.context, f.truth, f.distractors);
        level_margins.emplace_back(f.intensity, s.margin);
        if (s.margin < 0.0) ++negative;
    }
    std::cout << "synth corpus: " << fsset.facts.size() << " facts (" << negative
              << " with negative baseline margin), " << fsset.anchors.size() << " anchors\n";
    if (!level_margins.empty()) {
        std::cout << "baseline margins by level:\n";
        for (const auto& [level, stats] : intensity_report(level_margins))
            std::cout << fmt("  L%d  n=%-3d passed=%-3d rate=%5.1f%%  mean margin %+.3f\n", level,
                             stats.n, stats.passed, 100.0 * stats.rate, stats.mean_margin);
    }

    Manifest m;
    m.command = "synth";
    m.seed = a.seed;
    m.config = {{"n_facts", a.n_facts},
                {"n_anchors", a.n_anchors},
                {"neg_frac", a.neg_frac},
                {"d_model", mcfg.d_model},
                {"n_layers", mcfg.n_layers},
                {"n_heads", mcfg.n_heads},
                {"d_ff", mcfg.d_ff},
                {"vocab_size", mcfg.vocab_size},
                {"max_seq_len", mcfg.max_seq_len},
                {"init_seed", mcfg.init_seed}};
    m.outputs = {a.out_dir + "/facts.jsonl", a.out_dir + "/anchors.jsonl",
                 a.out_dir + "/model.toy1"};
    m.write(a.out_dir);
    return 0;
}

// ----------------------------- cache -----------------------------

int cmd_cache(const std::string& corpus_dir, const std::string& out_dir) {
    ensure_dir(out_dir);
    const RunInputs in = load_corpus(corpus_dir);
    const HiddenStateCache cache = build_cache(in.model, in.facts, in.anchors);
    save_cache(out_dir + "/cache.hsc1", cache);
    save_embedding(out_dir + "/embed.emb1", in.model.embed);
    std::cout << "cached " << cache.records.size() << " candidate records at d_model "
              << cache.d_model << "\n";

    Manifest m;
    m.command = "cache";
    for (const auto& p : {in.facts_path, in.anchors_path, in.model_path}) m.add_input(p);
    m.outputs = {out_dir + "/cache.hsc1", out_dir + "/embed.emb1"};
    m.write(out_dir);
    return 0;
}

// ----------------------------- train -----------------------------

struct SplitArgs {
    uint64_t split_seed = 7;
    int n_splits = 5;
    int train_size = 15;
    int split_index = 0;
};

SplitSpec resolve_split(const std::vector<Fact>& facts, const SplitArgs& s) {
    const auto splits = make_splits(facts, s.n_splits, s.train_size, s.split_seed);
    if (s.split_index < 0 || s.split_index >= static_cast<int>(splits.size()))
        throw ValidationError("split index out of range");
    return splits[static_cast<size_t>(s.split_index)];
}

int cmd_train(const std::string& corpus_dir, const std::string& out_dir, const SplitArgs& sa,
              const TrainConfig& cfg) {
    ensure_dir(out_dir);
    const RunInputs in = load_corpus(corpus_dir);
    const HiddenStateCache cache = load_cache(corpus_dir + "/cache.hsc1");
    const SplitSpec split = resolve_split(in.facts, sa);

    const TrainResult result = train(cache, in.model.embed, split, in.anchors, cfg);
    save_adapter(out_dir + "/adapter.adp1", result.adapter);
    write_file(out_dir + "/history.csv", history_to_csv(result.history));

    const StepStats& last = result.history.steps.back();
    std::cout << fmt("trained %s adapter on split %d: final loss %.4f, mean train margin %+.3f\n",
                     kind_name(cfg.kind), split.split_index, last.loss, last.mean_train_margin);

    Manifest m;
    m.command = "train";
    m.seed = cfg.seed;
    for (const auto& p :
         {in.facts_path, in.anchors_path, in.model_path, corpus_dir + "/cache.hsc1"})
        m.add_input(p);
    m.config = {{"kind", kind_name(cfg.kind)},   {"tau", cfg.tau},
                {"anchor_floor", cfg.anchor_floor}, {"anchor_weight", cfg.anchor_weight},
                {"lr", cfg.lr},                  {"weight_decay", cfg.weight_decay},
                {"clip_norm", cfg.clip_norm},    {"max_steps", cfg.max_steps},
                {"d_inner", cfg.d_inner},        {"split_seed", sa.split_seed},
                {"split_index", sa.split_index}, {"n_splits", sa.n_splits},
                {"train_size", sa.train_size}};
    m.outputs = {out_dir + "/adapter.adp1", out_dir + "/history.csv"};
    m.write(out_dir);
    return 0;
}

// ----------------------------- eval -----------------------------

int cmd_eval(const std::string& corpus_dir, const std::string& adapter_path,
             const std::string& out_dir, const SplitArgs& sa) {
    ensure_dir(out_dir);
    const RunInputs in = load_corpus(corpus_dir);
    const HiddenStateCache cache = load_cache(corpus_dir + "/cache.hsc1");
    const SplitSpec split = resolve_split(in.facts, sa);
    const Adapter adapter = load_adapter(adapter_path);

    const SplitResult result =
        evaluate_split(cache, in.model.embed, &adapter, split, kind_name(adapter.kind));
    write_file(out_dir + "/results.jsonl", split_results_to_jsonl(std::vector<SplitResult>{result}));
    std::cout << fmt("split %d (%s): train %d/%zu, heldout %d/%zu\n", result.split_index,
                     result.adapter_kind.c_str(), result.train_passed, result.train.size(),
                     result.heldout_passed, result.heldout.size());

    Manifest m;
    m.command = "eval";
    for (const auto& p : {in.facts_path, in.model_path, corpus_dir + "/cache.hsc1", adapter_path})
        m.add_input(p);
    m.config = {{"split_seed", sa.split_seed},
                {"split_index", sa.split_index},
                {"n_splits", sa.n_splits},
                {"train_size", sa.train_size}};
    m.outputs = {out_dir + "/results.jsonl"};
    m.write(out_dir);
    return 0;
}

// ----------------------------- report -----------------------------

struct ReportBundle {
    std::string text;
    std::string csv;
};

ReportBundle render_report(const std::vector<SplitResult>& results,
                           const std::vector<std::pair<int, double>>& baseline_level_margins,
                           const std::map<int, std::pair<int, int>>& baseline_heldout_by_split) {
    std::ostringstream text, csv;
    csv << "section,kind,split,passed,total,value\n";

    if (!baseline_level_margins.empty()) {
        text << "baseline intensity profile\n";
        text << "  level  n   passed  rate     mean margin\n";
        for (const auto& [level, s] : intensity_report(baseline_level_margins)) {
            text << fmt("  L%-5d %-3d %-7d %5.1f%%   %+.3f\n", level, s.n, s.passed,
                        100.0 * s.rate, s.mean_margin);
            csv << fmt("intensity,baseline,%d,%d,%d,%.6f\n", level, s.passed, s.n, s.mean_margin);
        }
        text << "\n";
    }

    // group split results by adapter kind
    std::map<std::string, std::vector<const SplitResult*>> by_kind;
    for (const SplitResult& r : results) by_kind[r.adapter_kind].push_back(&r);

    text << "held-out generalization\n";
    text << "  kind     heldout mean    pooled      train\n";
    std::map<std::string, std::vector<std::pair<int, int>>> counts_by_kind;
    for (auto& [kind, rs] : by_kind) {
        std::sort(rs.begin(), rs.end(), [](const SplitResult* a, const SplitResult* b) {
            return a->split_index < b->split_index;
        });
        std::vector<std::pair<int, int>> counts;
        int train_passed = 0, train_total = 0;
        for (const SplitResult* r : rs) {
            counts.emplace_back(r->heldout_passed, static_cast<int>(r->heldout.size()));
            train_passed += r->train_passed;
            train_total += static_cast<int>(r->train.size());
        }
        counts_by_kind[kind] = counts;
        const PooledStats ps = pooled_stats(counts);
        text << fmt("  %-8s %5.1f%% +- %4.1f%%  %3d/%-6d  %d/%d\n", kind.c_str(), ps.mean_pct,
                    ps.std_pct, ps.pooled_passed, ps.pooled_total, train_passed, train_total);
        csv << fmt("pooled,%s,,%d,%d,\n", kind.c_str(), ps.pooled_passed, ps.pooled_total);
        csv << fmt("heldout_mean_pct,%s,,,,%.6f\n", kind.c_str(), ps.mean_pct);
        csv << fmt("heldout_std_pct,%s,,,,%.6f\n", kind.c_str(), ps.std_pct);
        for (const SplitResult* r : rs)
            csv << fmt("split,%s,%d,%d,%zu,\n", kind.c_str(), r->split_index, r->heldout_passed,
                       r->heldout.size());
    }

    if (!baseline_heldout_by_split.empty()) {
        std::vector<std::pair<int, int>> counts;
        for (const auto& [split, pc] : baseline_heldout_by_split) counts.push_back(pc);
        const PooledStats ps = pooled_stats(counts);
        text << fmt("  baseline heldout rate: %.1f%% (%d/%d pooled)\n", ps.mean_pct,
                    ps.pooled_passed, ps.pooled_total);
        csv << fmt("pooled,baseline,,%d,%d,\n", ps.pooled_passed, ps.pooled_total);
    }

    if (counts_by_kind.count("swiglu") && counts_by_kind.count("linear")) {
        const auto& sw = counts_by_kind["swiglu"];
        const auto& li = counts_by_kind["linear"];
        long a = 0, b = 0, c = 0, d = 0;
        for (const auto& [p, t] : sw) a += p, b += t - p;
        for (const auto& [p, t] : li) c += p, d += t - p;
        const double fisher = fisher_exact_two_sided(a, b, c, d);
        text << fmt("\nfisher two-sided on pooled counts (swiglu %ld/%ld vs linear %ld/%ld): p = %.4f\n",
                    a, a + b, c, c + d, fisher);
        csv << fmt("fisher_p,swiglu_vs_linear,,,,%.6f\n", fisher);
        if (sw.size() == li.size() && !sw.empty()) {
            std::vector<std::pair<double, double>> pairs;
            for (size_t i = 0; i < sw.size(); ++i)
                pairs.emplace_back(static_cast<double>(sw[i].first),
                                   static_cast<double>(li[i].first));
            const double wilcoxon = wilcoxon_signed_rank(pairs);
            text << fmt("wilcoxon signed-rank on per-split heldout pairs:  p = %.4f\n", wilcoxon);
            csv << fmt("wilcoxon_p,swiglu_vs_linear,,,,%.6f\n", wilcoxon);
        }
    } else {
        text << "\nfisher omitted: needs both swiglu and linear results\n";
    }

    text << "\nper-split held-out results\n  split";
    for (const auto& [kind, _] : counts_by_kind) text << fmt("  %-8s", kind.c_str());
    text << "\n";
    size_t max_splits = 0;
    for (const auto& [_, counts] : counts_by_kind) max_splits = std::max(max_splits, counts.size());
    for (size_t i = 0; i < max_splits; ++i) {
        text << fmt("  %-5zu", i);
        for (const auto& [_, counts] : counts_by_kind) {
            if (i < counts.size())
                text << fmt("  %d/%-6d", counts[i].first, counts[i].second);
            else
                text << "  -       ";
        }
        text << "\n";
    }
    return {text.str(), csv.str()};
}

int cmd_report(const std::string& results_path, const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto results = split_results_from_jsonl(read_file(results_path));
    if (results.empty()) throw ValidationError("no split results in " + results_path);
    const ReportBundle report = render_report(results, {}, {});
    write_file(out_dir + "/report.txt", report.text);
    write_file(out_dir + "/report.csv", report.csv);
    std::cout << report.text;

    Manifest m;
    m.command = "report";
    m.add_input(results_path);
    m.outputs = {out_dir + "/report.txt", out_dir + "/report.csv"};
    m.write(out_dir);
    return 0;
}

// ----------------------------- pipeline -----------------------------

int cmd_pipeline(const std::string& corpus_dir, const std::string& out_dir, const SplitArgs& sa,
                 const TrainConfig& base_cfg, const std::vector<std::string>& kinds) {
    ensure_dir(out_dir);
    const RunInputs in = load_corpus(corpus_dir);
    const uint64_t model_checksum = weights_checksum(in.model);

    const HiddenStateCache cache = build_cache(in.model, in.facts, in.anchors);
    save_cache(out_dir + "/cache.hsc1", cache);
    save_embedding(out_dir + "/embed.emb1", in.model.embed);

    const auto splits = make_splits(in.facts, sa.n_splits, sa.train_size, sa.split_seed);

    struct Cell {
        std::string kind;
        int split_index;
    };
    std::vector<Cell> cells;
    for (const std::string& kind : kinds)
        for (int s = 0; s < sa.n_splits; ++s) cells.push_back({kind, s});

    std::vector<SplitResult> results(cells.size());
    std::vector<Adapter> adapters(cells.size());
    parallel_for(cells.size(), [&](size_t i) {
        TrainConfig cfg = base_cfg;
        cfg.kind = kind_from_name(cells[i].kind);
        const SplitSpec& split = splits[static_cast<size_t>(cells[i].split_index)];
        TrainResult tr = train(cache, in.model.embed, split, in.anchors, cfg);
        results[i] = evaluate_split(cache, in.model.embed, &tr.adapter, split, cells[i].kind);
        adapters[i] = std::move(tr.adapter);
    });

    for (size_t i = 0; i < cells.size(); ++i)
        save_adapter(out_dir + fmt("/adapter_%s_split%d.adp1", cells[i].kind.c_str(),
                                   cells[i].split_index),
                     adapters[i]);

    // baseline profile for the report
    std::vector<std::pair<int, double>> level_margins;
    for (const Fact& f : in.facts) {
        const FactScore s = score_fact(cache, in.model.embed, nullptr, f.id);
        level_margins.emplace_back(f.intensity, s.margin);
    }
    std::map<int, std::pair<int, int>> baseline_heldout;
    for (const SplitSpec& split : splits) {
        const SplitResult r = evaluate_split(cache, in.model.embed, nullptr, split, "baseline");
        baseline_heldout[split.split_index] = {r.heldout_passed,
                                               static_cast<int>(r.heldout.size())};
    }

    write_file(out_dir + "/results.jsonl", split_results_to_jsonl(results));
    const ReportBundle report = render_report(results, level_margins, baseline_heldout);
    write_file(out_dir + "/report.txt", report.text);
    write_file(out_dir + "/report.csv", report.csv);
    std::cout << report.text;

    if (weights_checksum(in.model) != model_checksum)
        throw ValidationError("frozen model weights changed during the pipeline");

    Manifest m;
    m.command = "pipeline";
    m.seed = base_cfg.seed;
    for (const auto& p : {in.facts_path, in.anchors_path, in.model_path}) m.add_input(p);
    m.config = {{"kinds", kinds},
                {"split_seed", sa.split_seed},
                {"n_splits", sa.n_splits},
                {"train_size", sa.train_size},
                {"tau", base_cfg.tau},
                {"anchor_floor", base_cfg.anchor_floor},
                {"anchor_weight", base_cfg.anchor_weight},
                {"lr", base_cfg.lr},
                {"weight_decay", base_cfg.weight_decay},
                {"clip_norm", base_cfg.clip_norm},
                {"max_steps", base_cfg.max_steps},
                {"d_inner", base_cfg.d_inner}};
    m.outputs = {out_dir + "/results.jsonl", out_dir + "/report.txt", out_dir + "/report.csv",
                 out_dir + "/cache.hsc1", out_dir + "/embed.emb1"};
    m.write(out_dir);
    return 0;
}

// ----------------------------- steer -----------------------------

int cmd_steer(const std::string& corpus_dir, const std::string& out_dir,
              std::vector<int> layers, std::vector<double> strengths) {
    ensure_dir(out_dir);
    const RunInputs in = load_corpus(corpus_dir);
    if (layers.empty()) layers = default_sweep_layers(in.model.cfg.n_layers);
    if (strengths.empty()) strengths = kDefaultSweepStrengths;

    const SweepGrid grid = sweep(in.model, in.facts, layers, strengths);
    write_file(out_dir + "/sweep.csv", sweep_to_csv(grid));
    write_file(out_dir + "/sweep.txt", sweep_to_text(grid));
    std::cout << sweep_to_text(grid);

    Manifest m;
    m.command = "steer";
    for (const auto& p : {in.facts_path, in.model_path}) m.add_input(p);
    m.config = {{"layers", layers}, {"strengths", strengths}};
    m.outputs = {out_dir + "/sweep.csv", out_dir + "/sweep.txt"};
    m.write(out_dir);
    return 0;
}

// ----------------------------- generate -----------------------------

int cmd_generate(const std::string& corpus_dir, const std::string& adapter_path,
                 const std::string& mode_str, const std::string& prompt, int max_tokens,
                 bool side_by_side) {
    const FrozenModel model = load_model(corpus_dir + "/model.toy1");
    const GenMode mode = mode_from_name(mode_str);
    Adapter adapter;
    const Adapter* adapter_ptr = nullptr;
    if (mode != GenMode::baseline) {
        if (adapter_path.empty())
            throw ValidationError("mode " + mode_str + " requires --adapter");
        adapter = load_adapter(adapter_path);
        adapter_ptr = &adapter;
    }
    const std::vector<int> prompt_ids = tokenize(prompt);

    auto print_one = [&](const char* label, GenMode m, const Adapter* a) {
        const DecodeResult r = decode(model, prompt_ids, m, a, max_tokens);
        std::cout << label << " (" << mode_name(m) << "): "
                  << detokenize(r.generated) << "\n";
        if (r.generated.size() >= 2)
            std::cout << fmt("  repetition score: %.4f\n", repetition_score(r.generated));
    };

    std::cout << "prompt: " << prompt << "\n";
    if (side_by_side || mode == GenMode::baseline) {
        print_one("baseline", GenMode::baseline, nullptr);
    } else {
        // the baseline repetition score always accompanies an adapted decode
        const DecodeResult base = decode(model, prompt_ids, GenMode::baseline, nullptr, max_tokens);
        if (base.generated.size() >= 2)
            std::cout << fmt("baseline repetition score: %.4f\n",
                             repetition_score(base.generated));
    }
    if (mode != GenMode::baseline) print_one("adapted", mode, adapter_ptr);
    return 0;
}

// ----------------------------- gradcheck -----------------------------

int cmd_gradcheck(double eps) {
    bool all_pass = true;
    auto check = [&](bool ok) {
        all_pass = all_pass && ok;
        return ok ? "[PASS]" : "[FAIL]";
    };

    const GradientBugReport bug = reproduce_gradient_bug();
    std::cout << "gradient flow reproduction (3->1 linear map, loss = sum of outputs):\n";
    std::cout << fmt("  loss, live path        %.6f\n", bug.loss_live);
    std::cout << fmt("  loss, detached path    %.6f  %s\n", bug.loss_detached,
                     check(bug.loss_live == bug.loss_detached));
    std::cout << fmt("  live grad norm         %.6f  %s (expect 1.7321)\n", bug.live_grad_norm,
                     check(std::fabs(bug.live_grad_norm - std::sqrt(3.0)) <= 1e-4));
    std::cout << fmt("  detached grad norm     %.6f  %s (expect exactly 0)\n",
                     bug.detached_grad_norm, check(bug.detached_grad_norm == 0.0));

    const double tolerance = eps <= 1e-3 ? 1e-4 : 1e-3;
    std::cout << fmt("finite-difference suite (eps=%g, tolerance %g):\n", eps, tolerance);
    struct Case {
        AdapterKind kind;
        GateActivation gate;
        int in_dim, d_inner;
        const char* label;
    };
    const Case cases[] = {
        {AdapterKind::swiglu, GateActivation::silu, 16, 4, "swiglu/silu    d=16 i=4"},
        {AdapterKind::swiglu, GateActivation::sigmoid, 16, 4, "swiglu/sigmoid d=16 i=4"},
        {AdapterKind::linear, GateActivation::silu, 16, 4, "linear         d=16 i=4"},
        {AdapterKind::logit, GateActivation::silu, 64, 8, "logit          v=64 i=8"},
    };
    for (const Case& c : cases) {
        double worst = 0.0;
        for (uint64_t seed = 1; seed <= 5; ++seed) {
            Adapter a = init_adapter(c.kind, c.in_dim, c.d_inner, seed, c.gate);
            Rng rng(seed * 131 + static_cast<uint64_t>(c.kind));
            for (Mat& mat : a.mats)
                for (float& v : mat.data) v = static_cast<float>(0.3 * rng.gaussian());
            dvec h(static_cast<size_t>(c.in_dim)), probe(static_cast<size_t>(c.in_dim));
            for (auto& v : h) v = rng.gaussian();
            for (auto& v : probe) v = rng.gaussian();

            const auto grads = backward(a, h, probe);
            std::vector<double> analytic;
            for (const Mat& g : grads)
                analytic.insert(analytic.end(), g.data.begin(), g.data.end());
            const auto numeric = finite_diff(
                [&](std::span<const float> p) {
                    Adapter probe_adapter = a;
                    unflatten_params(probe_adapter, p);
                    const dvec out = postadapt::apply(probe_adapter, std::span<const double>(h));
                    double loss = 0.0;
                    for (size_t i = 0; i < out.size(); ++i) loss += out[i] * probe[i];
                    return loss;
                },
                flatten_params(a), eps);
            worst = std::max(worst, max_rel_error(analytic, numeric));
        }
        std::cout << fmt("  %s  max rel err %.3e  %s\n", c.label, worst,
                         check(worst <= tolerance));
    }
    return all_pass ? 0 : 1;
}

// ----------------------------- stats -----------------------------

int cmd_stats(const std::string& data_dir) {
    const GoldenTables g = load_golden(data_dir);
    bool all_pass = true;
    auto check = [&](bool ok) {
        all_pass = all_pass && ok;
        return ok ? "[PASS]" : "[FAIL]";
    };

    std::cout << "reproduction of the reference statistics from shipped per-fact and per-split data\n\n";

    std::cout << "pass rates by intensity level:\n";
    const auto level_report = intensity_report(g.to_reference_margins());
    for (const GoldenLevelRow& row : g.level_rows) {
        const LevelStats& s = level_report.at(row.intensity);
        std::cout << fmt("  L%d  recomputed %d/%d, printed %d/%d  %s", row.intensity, s.passed,
                         s.n, row.passed, row.facts,
                         check(s.passed == row.passed && s.n == row.facts));
        std::cout << fmt("   (mean margin: recomputed %+.2f, printed %+.2f, informational)\n",
                         s.mean_margin, row.mean_margin);
    }

    std::cout << "\npooled held-out statistics per scale (tolerance 0.1 points, fisher 0.01):\n";
    for (const GoldenScaleRow& row : g.scale_rows) {
        std::map<std::string, std::vector<std::pair<int, int>>> counts;
        for (const GoldenSplitCount& s : g.split_counts)
            if (s.scale == row.scale) counts[s.kind].emplace_back(s.passed, s.total);
        const PooledStats sw = pooled_stats(counts.at("swiglu"));
        const PooledStats li = pooled_stats(counts.at("linear"));
        std::cout << fmt("  %-4s swiglu %5.2f%% +- %5.2f%% vs printed %4.1f +- %4.1f  %s\n",
                         row.scale.c_str(), sw.mean_pct, sw.std_pct, row.swiglu_mean,
                         row.swiglu_std,
                         check(std::fabs(sw.mean_pct - row.swiglu_mean) <= 0.1 &&
                               std::fabs(sw.std_pct - row.swiglu_std) <= 0.1));
        std::cout << fmt("  %-4s linear %5.2f%% +- %5.2f%% vs printed %4.1f +- %4.1f  %s\n",
                         row.scale.c_str(), li.mean_pct, li.std_pct, row.linear_mean,
                         row.linear_std,
                         check(std::fabs(li.mean_pct - row.linear_mean) <= 0.1 &&
                               std::fabs(li.std_pct - row.linear_std) <= 0.1));
        const double fisher = fisher_exact_two_sided(
            sw.pooled_passed, sw.pooled_total - sw.pooled_passed, li.pooled_passed,
            li.pooled_total - li.pooled_passed);
        std::cout << fmt("  %-4s fisher p = %.4f vs printed %.2f  %s\n", row.scale.c_str(), fisher,
                         row.fisher_p, check(std::fabs(fisher - row.fisher_p) <= 0.01));
        std::cout << fmt("  %-4s baseline heldout %.1f%% (informational constant)\n",
                         row.scale.c_str(), row.baseline_pct);
    }

    std::vector<std::pair<double, double>> pairs;
    for (int split = 1; split <= 5; ++split)
        pairs.emplace_back(static_cast<double>(g.split_lookup("8B", "swiglu", split)),
                           static_cast<double>(g.split_lookup("8B", "linear", split)));
    const double wilcoxon = wilcoxon_signed_rank(pairs);
    std::cout << fmt("\nwilcoxon signed-rank on the per-split pairs: p = %.4f  %s\n", wilcoxon,
                     check(std::fabs(wilcoxon - 0.25) <= 1e-9));
    std::cout << "  (printed value 0.50 is informational; its derivation is unstated, and the\n"
                 "   exact zeros-dropped midrank enumeration documented here gives 0.25)\n";

    std::cout << (all_pass ? "\nall checks passed\n" : "\nsome checks FAILED\n");
    return all_pass ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"post-transformer adapter lab: train bottleneck adapters on cached hidden "
                 "states of a frozen toy decoder and reproduce the margin-evaluation protocol"};
    app.require_subcommand(1);

    // synth
    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus and frozen toy model");
    synth->add_option("--seed", synth_args.seed, "master seed");
    synth->add_option("--out", synth_args.out_dir, "output directory")->required();
    synth->add_option("--facts", synth_args.n_facts, "number of facts");
    synth->add_option("--anchors", synth_args.n_anchors, "number of anchors");
    synth->add_option("--neg-frac", synth_args.neg_frac, "minimum fraction with negative margin");
    synth->add_option("--d-model", synth_args.model_cfg.d_model);
    synth->add_option("--n-layers", synth_args.model_cfg.n_layers);
    synth->add_option("--n-heads", synth_args.model_cfg.n_heads);
    synth->add_option("--d-ff", synth_args.model_cfg.d_ff);
    synth->add_option("--max-seq-len", synth_args.model_cfg.max_seq_len);

    // cache
    std::string corpus_dir, out_dir;
    auto* cache_cmd = app.add_subcommand("cache", "precompute hidden states for all candidates");
    cache_cmd->add_option("--corpus", corpus_dir, "corpus directory (facts/anchors/model)")->required();
    cache_cmd->add_option("--out", out_dir, "output directory")->required();

    // shared split options
    SplitArgs split_args;
    auto add_split_options = [&](CLI::App* cmd) {
        cmd->add_option("--split-seed", split_args.split_seed, "seed for split generation");
        cmd->add_option("--splits", split_args.n_splits, "number of splits");
        cmd->add_option("--train-size", split_args.train_size, "facts per train set");
        cmd->add_option("--split-index", split_args.split_index, "which split to use");
    };

    // train config options shared by train/pipeline
    TrainConfig train_cfg;
    std::string config_file;
    auto add_train_options = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key = value config file");
        cmd->add_option("--kind", [&](const std::vector<std::string>& v) {
            train_cfg.kind = kind_from_name(v.back());
            return true;
        }, "adapter kind: swiglu | linear | logit");
        cmd->add_option("--tau", train_cfg.tau);
        cmd->add_option("--anchor-floor", train_cfg.anchor_floor);
        cmd->add_option("--anchor-weight", train_cfg.anchor_weight);
        cmd->add_option("--lr", train_cfg.lr);
        cmd->add_option("--weight-decay", train_cfg.weight_decay);
        cmd->add_option("--clip-norm", train_cfg.clip_norm);
        cmd->add_option("--max-steps", train_cfg.max_steps);
        cmd->add_option("--seed", train_cfg.seed);
        cmd->add_option("--d-inner", train_cfg.d_inner);
        cmd->add_option("--gate", [&](const std::vector<std::string>& v) {
            apply_config_entry(train_cfg, "gate", v.back());
            return true;
        }, "gate activation: silu | sigmoid");
    };

    auto* train_cmd = app.add_subcommand("train", "train one adapter on one split");
    train_cmd->add_option("--corpus", corpus_dir, "corpus directory with cache.hsc1")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    add_split_options(train_cmd);
    add_train_options(train_cmd);

    std::string adapter_path;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate an adapter on one split");
    eval_cmd->add_option("--corpus", corpus_dir)->required();
    eval_cmd->add_option("--adapter", adapter_path, "adapter file (.adp1)")->required();
    eval_cmd->add_option("--out", out_dir)->required();
    add_split_options(eval_cmd);

    std::string results_path;
    auto* report_cmd = app.add_subcommand("report", "render report tables from results.jsonl");
    report_cmd->add_option("--results", results_path)->required();
    report_cmd->add_option("--out", out_dir)->required();

    std::vector<std::string> kinds{"swiglu", "linear"};
    auto* pipeline_cmd =
        app.add_subcommand("pipeline", "cache -> splits x kinds train -> eval -> report");
    pipeline_cmd->add_option("--corpus", corpus_dir)->required();
    pipeline_cmd->add_option("--out", out_dir)->required();
    pipeline_cmd->add_option("--kinds", kinds, "adapter kinds to compare")->delimiter(',');
    add_split_options(pipeline_cmd);
    add_train_options(pipeline_cmd);

    std::vector<int> steer_layers;
    std::vector<double> steer_strengths;
    auto* steer_cmd = app.add_subcommand("steer", "steering-vector sweep over layers x strengths");
    steer_cmd->add_option("--corpus", corpus_dir)->required();
    steer_cmd->add_option("--out", out_dir)->required();
    steer_cmd->add_option("--layers", steer_layers)->delimiter(',');
    steer_cmd->add_option("--strengths", steer_strengths)->delimiter(',');

    std::string gen_mode = "baseline", gen_prompt;
    int gen_max_tokens = 64;
    bool side_by_side = false;
    auto* gen_cmd = app.add_subcommand("generate", "greedy decode with an adapter application mode");
    gen_cmd->add_option("--corpus", corpus_dir)->required();
    gen_cmd->add_option("--adapter", adapter_path);
    gen_cmd->add_option("--mode", gen_mode, "baseline | all_positions | last_position | logit_space");
    gen_cmd->add_option("--prompt", gen_prompt)->required();
    gen_cmd->add_option("--max-tokens", gen_max_tokens);
    gen_cmd->add_flag("--side-by-side", side_by_side, "also print the baseline decode");

    double gc_eps = 1e-3;
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "gradient-flow reproduction and finite-difference suite");
    gradcheck_cmd->add_option("--eps", gc_eps, "finite-difference step");

    std::string data_dir = default_reference_dir();
    auto* stats_cmd =
        app.add_subcommand("stats", "recompute the reference tables from shipped golden data");
    stats_cmd->add_option("--data", data_dir, "golden data directory");

    try {
        app.parse(argc, argv);

        // layering: config file is the base, command-line flags win
        if (!config_file.empty()) {
            const TrainConfig flags = train_cfg; // values as parsed from the command line
            train_cfg = load_train_config(config_file);
            CLI::App* active = train_cmd->parsed() ? train_cmd : pipeline_cmd;
            auto keep_flag = [&](const char* flag, auto member) {
                if (active->count(flag)) train_cfg.*member = flags.*member;
            };
            keep_flag("--tau", &TrainConfig::tau);
            keep_flag("--anchor-floor", &TrainConfig::anchor_floor);
            keep_flag("--anchor-weight", &TrainConfig::anchor_weight);
            keep_flag("--lr", &TrainConfig::lr);
            keep_flag("--weight-decay", &TrainConfig::weight_decay);
            keep_flag("--clip-norm", &TrainConfig::clip_norm);
            keep_flag("--max-steps", &TrainConfig::max_steps);
            keep_flag("--seed", &TrainConfig::seed);
            keep_flag("--d-inner", &TrainConfig::d_inner);
            keep_flag("--kind", &TrainConfig::kind);
            keep_flag("--gate", &TrainConfig::gate);
        }

        if (synth->parsed()) return cmd_synth(synth_args);
        if (cache_cmd->parsed()) return cmd_cache(corpus_dir, out_dir);
        if (train_cmd->parsed()) return cmd_train(corpus_dir, out_dir, split_args, train_cfg);
        if (eval_cmd->parsed()) return cmd_eval(corpus_dir, adapter_path, out_dir, split_args);
        if (report_cmd->parsed()) return cmd_report(results_path, out_dir);
        if (pipeline_cmd->parsed())
            return cmd_pipeline(corpus_dir, out_dir, split_args, train_cfg, kinds);
        if (steer_cmd->parsed()) return cmd_steer(corpus_dir, out_dir, steer_layers, steer_strengths);
        if (gen_cmd->parsed())
            return cmd_generate(corpus_dir, adapter_path, gen_mode, gen_prompt, gen_max_tokens,
                                side_by_side);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gc_eps);
        if (stats_cmd->parsed()) return cmd_stats(data_dir);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const ZeroGradient& e) {
        std::cerr << "zero-gradient sentinel: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
