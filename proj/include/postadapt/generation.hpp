// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "postadapt/adapters.hpp"
#include "postadapt/model.hpp"

namespace postadapt {

// Adapter application point during autoregressive decoding:
//   baseline       no adapter
//   all_positions  residual correction injected into the stream entering the
//                  final transformer layer at every position, so the final
//                  layer's cached keys/values reflect adapted states
//   last_position  correction applied to the frontier position's final
//                  hidden state only; no KV cache entry is ever adapted
//   logit_space    logits <- logits + bottleneck(logits) at the frontier
enum class GenMode { baseline, all_positions, last_position, logit_space };

const char* mode_name(GenMode mode);
GenMode mode_from_name(const std::string& name);

struct DecodeResult {
    std::vector<int> generated; // does not include the prompt
    KVCache kv;                 // final cache state, for contract checks
};

// Greedy argmax decoding (ties resolve to the lowest token id).
// baseline requires adapter == nullptr; hidden-state modes require a
// swiglu/linear adapter of width d_model; logit_space requires the logit
// kind of width vocab_size.
DecodeResult decode(const FrozenModel& model, std::span<const int> prompt, GenMode mode,
                    const Adapter* adapter, int max_tokens);

// 1 - distinct bigrams / total bigrams; requires at least 2 tokens.
double repetition_score(std::span<const int> tokens);

} // namespace postadapt
