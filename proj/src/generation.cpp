// SPDX-License-Identifier: Apache-2.0
#include "postadapt/generation.hpp"

#include <set>
#include <utility>

#include "postadapt/numerics.hpp"

namespace postadapt {

const char* mode_name(GenMode mode) {
    switch (mode) {
        case GenMode::baseline: return "baseline";
        case GenMode::all_positions: return "all_positions";
        case GenMode::last_position: return "last_position";
        case GenMode::logit_space: return "logit_space";
    }
    return "?";
}

GenMode mode_from_name(const std::string& name) {
    if (name == "baseline") return GenMode::baseline;
    if (name == "all_positions") return GenMode::all_positions;
    if (name == "last_position") return GenMode::last_position;
    if (name == "logit_space") return GenMode::logit_space;
    throw ValidationError("unknown generation mode '" + name + "'");
}

namespace {

void check_mode_adapter(const FrozenModel& model, GenMode mode, const Adapter* adapter) {
    if (mode == GenMode::baseline) {
        if (adapter) throw ValidationError("baseline mode takes no adapter");
        return;
    }
    if (!adapter) throw ValidationError(std::string(mode_name(mode)) + " mode requires an adapter");
    if (mode == GenMode::logit_space) {
        if (adapter->kind != AdapterKind::logit)
            throw ValidationError("logit_space mode requires a logit adapter");
        if (adapter->in_dim != model.cfg.vocab_size)
            throw DimMismatch("logit adapter width != vocab size");
    } else {
        if (!adapter->is_hidden_kind())
            throw ValidationError(std::string(mode_name(mode)) +
                                  " mode requires a hidden-state adapter (swiglu or linear)");
        if (adapter->in_dim != model.cfg.d_model)
            throw DimMismatch("adapter width != d_model");
    }
}

int argmax_lowest_id(const dvec& logits) {
    int best = 0;
    for (int v = 1; v < static_cast<int>(logits.size()); ++v)
        if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
    return best;
}

} // namespace

DecodeResult decode(const FrozenModel& model, std::span<const int> prompt, GenMode mode,
                    const Adapter* adapter, int max_tokens) {
    if (prompt.empty()) throw ValidationError("decode: empty prompt");
    if (max_tokens < 1) throw ValidationError("decode: max_tokens must be >= 1");
    check_mode_adapter(model, mode, adapter);

    ForwardHooks hooks;
    if (mode == GenMode::all_positions) hooks.pre_final_adapter = adapter;

    DecodeResult result;
    std::vector<float> frontier;
    for (int tok : prompt) frontier = model_step(model, result.kv, tok, hooks);

    for (int step = 0; step < max_tokens; ++step) {
        dvec logits;
        if (mode == GenMode::last_position) {
            // Adapted hidden state used for the prediction only; the cache
            // keeps the unadapted stream.
            const dvec adapted = apply(*adapter, std::span<const float>(frontier));
            logits = project_logits(std::span<const double>(adapted), model.embed);
        } else {
            logits = project_logits(std::span<const float>(frontier), model.embed);
            if (mode == GenMode::logit_space)
                logits = apply(*adapter, std::span<const double>(logits));
        }
        const int next = argmax_lowest_id(logits);
        result.generated.push_back(next);
        if (result.kv.positions >= model.cfg.max_seq_len) break; // no room to process further
        frontier = model_step(model, result.kv, next, hooks);
    }
    return result;
}

double repetition_score(std::span<const int> tokens) {
    if (tokens.size() < 2)
        throw ValidationError("repetition_score: need at least 2 tokens");
    std::set<std::pair<int, int>> distinct;
    for (size_t i = 0; i + 1 < tokens.size(); ++i) distinct.insert({tokens[i], tokens[i + 1]});
    const double total = static_cast<double>(tokens.size() - 1);
    return 1.0 - static_cast<double>(distinct.size()) / total;
}

} // namespace postadapt
