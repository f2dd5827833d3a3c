// SPDX-License-Identifier: Apache-2.0
#include "postadapt/steering.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "postadapt/evaluator.hpp"

namespace postadapt {

std::vector<float> build_direction(std::span<const std::vector<float>> truth_hiddens,
                                   std::span<const std::vector<float>> distractor_hiddens) {
    if (truth_hiddens.empty() || distractor_hiddens.empty())
        throw ValidationError("build_direction: both hidden-state groups must be non-empty");
    const size_t d = truth_hiddens[0].size();
    dvec diff(d, 0.0);
    for (const auto& h : truth_hiddens) {
        if (h.size() != d) throw DimMismatch("build_direction: inconsistent dims");
        for (size_t i = 0; i < d; ++i) diff[i] += h[i];
    }
    for (size_t i = 0; i < d; ++i) diff[i] /= static_cast<double>(truth_hiddens.size());
    dvec dist_mean(d, 0.0);
    for (const auto& h : distractor_hiddens) {
        if (h.size() != d) throw DimMismatch("build_direction: inconsistent dims");
        for (size_t i = 0; i < d; ++i) dist_mean[i] += h[i];
    }
    for (size_t i = 0; i < d; ++i) diff[i] -= dist_mean[i] / static_cast<double>(distractor_hiddens.size());

    double norm = 0.0;
    for (double v : diff) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12)
        throw ValidationError("build_direction: truth and distractor means coincide");
    std::vector<float> out(d);
    for (size_t i = 0; i < d; ++i) out[i] = static_cast<float>(diff[i] / norm);
    return out;
}

Mat apply_steering(const FrozenModel& model, std::span<const int> tokens,
                   const SteeringConfig& config) {
    if (config.layer_index < 0 || config.layer_index >= model.cfg.n_layers)
        throw ValidationError("apply_steering: layer index " + std::to_string(config.layer_index) +
                              " out of range for " + std::to_string(model.cfg.n_layers) + " layers");
    double norm = 0.0;
    for (float v : config.direction) norm += static_cast<double>(v) * v;
    if (std::fabs(std::sqrt(norm) - 1.0) > 1e-6)
        throw ValidationError("apply_steering: direction must be unit length");
    ForwardHooks hooks;
    hooks.steering = &config;
    return forward_hidden(model, tokens, hooks);
}

std::vector<int> default_sweep_layers(int n_layers) {
    if (n_layers >= 34) return {5, 10, 18, 25, 33};
    const int count = std::min(5, n_layers);
    std::vector<int> layers;
    for (int i = 0; i < count; ++i) {
        const int idx = count == 1 ? 0 : static_cast<int>((static_cast<long>(i) * (n_layers - 1)) / (count - 1));
        if (layers.empty() || layers.back() != idx) layers.push_back(idx);
    }
    return layers;
}

namespace {

struct TokenizedFact {
    std::vector<int> context;
    std::vector<std::vector<int>> completions; // truth first, then distractors
};

TokenizedFact tokenize_fact(const Fact& f) {
    TokenizedFact t;
    t.context = tokenize(f.context);
    t.completions.push_back(tokenize(f.truth));
    for (const auto& d : f.distractors) t.completions.push_back(tokenize(d));
    return t;
}

} // namespace

SweepGrid sweep(const FrozenModel& model, const std::vector<Fact>& facts,
                std::span<const int> layers, std::span<const double> strengths) {
    if (layers.empty() || strengths.empty())
        throw ValidationError("sweep: layer and strength grids must be non-empty");
    SweepGrid grid;
    grid.layers.assign(layers.begin(), layers.end());
    grid.strengths.assign(strengths.begin(), strengths.end());
    grid.n_facts = static_cast<int>(facts.size());

    std::vector<TokenizedFact> toks;
    toks.reserve(facts.size());
    for (const Fact& f : facts) toks.push_back(tokenize_fact(f));

    for (int layer : layers) {
        // Contrastive direction from this layer's output states at the
        // completion token positions, truth vs distractors pooled over facts.
        std::vector<std::vector<float>> truth_states, distractor_states;
        for (const TokenizedFact& t : toks) {
            for (size_t cand = 0; cand < t.completions.size(); ++cand) {
                std::vector<int> seq = t.context;
                seq.insert(seq.end(), t.completions[cand].begin(), t.completions[cand].end());
                const Mat h = hidden_at_layer(model, seq, layer);
                auto& bucket = cand == 0 ? truth_states : distractor_states;
                for (size_t k = 0; k < t.completions[cand].size(); ++k) {
                    const auto row = h.row(static_cast<int>(t.context.size() + k));
                    bucket.emplace_back(row.begin(), row.end());
                }
            }
        }
        const std::vector<float> direction = build_direction(truth_states, distractor_states);

        std::vector<int> row;
        for (double alpha : strengths) {
            SteeringConfig cfg;
            cfg.layer_index = layer;
            cfg.strength = alpha;
            cfg.direction = direction;
            int passed = 0;
            for (const TokenizedFact& t : toks) {
                double truth_lp = 0.0;
                double best_distractor = -std::numeric_limits<double>::infinity();
                for (size_t cand = 0; cand < t.completions.size(); ++cand) {
                    std::vector<int> seq = t.context;
                    seq.insert(seq.end(), t.completions[cand].begin(), t.completions[cand].end());
                    const Mat h = apply_steering(model, seq, cfg);
                    const double lp = completion_logprob(h, static_cast<int>(t.context.size()),
                                                         t.completions[cand], model.embed);
                    if (cand == 0)
                        truth_lp = lp;
                    else
                        best_distractor = std::max(best_distractor, lp);
                }
                if (truth_lp - best_distractor > 0.0) ++passed;
            }
            row.push_back(passed);
        }
        grid.pass_counts.push_back(std::move(row));
    }
    return grid;
}

std::string sweep_to_csv(const SweepGrid& grid) {
    std::ostringstream out;
    out << "layer";
    for (double a : grid.strengths) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", a);
        out << ",alpha=" << buf;
    }
    out << "\n";
    for (size_t r = 0; r < grid.layers.size(); ++r) {
        out << grid.layers[r];
        for (int count : grid.pass_counts[r]) out << ',' << count;
        out << "\n";
    }
    return out.str();
}

std::string sweep_to_text(const SweepGrid& grid) {
    std::ostringstream out;
    out << "steering sweep: facts passing per (layer, strength), of " << grid.n_facts << "\n";
    out << "  layer";
    for (double a : grid.strengths) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "a=%-6g", a);
        out << "  " << buf;
    }
    out << "\n";
    for (size_t r = 0; r < grid.layers.size(); ++r) {
        char lbuf[32];
        std::snprintf(lbuf, sizeof(lbuf), "  L%-4d", grid.layers[r]);
        out << lbuf;
        for (int count : grid.pass_counts[r]) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%d/%-6d", count, grid.n_facts);
            out << "  " << buf;
        }
        out << "\n";
    }
    return out.str();
}

} // namespace postadapt
