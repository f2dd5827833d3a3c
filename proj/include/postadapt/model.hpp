// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "postadapt/factset.hpp"
#include "postadapt/mat.hpp"

namespace postadapt {

struct Adapter;

struct ToyModelConfig {
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 64;
    int vocab_size = 256;
    int max_seq_len = 128;
    uint64_t init_seed = 0;
};

struct LayerWeights {
    Mat wq, wk, wv, wo; // each d_model x d_model
    Mat w1;             // d_ff x d_model
    Mat w2;             // d_model x d_ff
};

// Frozen decoder-only transformer: pre-norm blocks with RMS normalization,
// SiLU feed-forward, tied embeddings, no biases, additive sinusoidal
// positions. Weights are immutable after init; every consumer takes it by
// const reference.
struct FrozenModel {
    ToyModelConfig cfg;
    Mat embed; // vocab_size x d_model, tied input/output projection
    std::vector<LayerWeights> layers;
};

FrozenModel init_toy_model(const ToyModelConfig& cfg);
uint64_t weights_checksum(const FrozenModel& model);

// Byte-level tokenizer: one token per UTF-8 byte, vocab 256, exact round trip.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> ids);

struct KVCache {
    struct LayerKV {
        std::vector<float> k; // positions x d_model, row-major
        std::vector<float> v;
    };
    int d_model = 0;
    std::vector<LayerKV> layers;
    int positions = 0;
};

bool operator==(const KVCache& a, const KVCache& b);

// Steering injection: h <- h + strength * direction added to the residual
// stream output of layer layer_index, at positions >= from_position.
struct SteeringConfig {
    int layer_index = 0;
    double strength = 0.0;
    std::vector<float> direction; // unit vector, length d_model
    int from_position = 0;
};

struct ForwardHooks {
    const SteeringConfig* steering = nullptr;
    // Residual correction applied to the stream entering the final
    // transformer layer (the all-positions generation mode).
    const Adapter* pre_final_adapter = nullptr;
    // When >= 0, the residual stream right after this block is written to
    // *layer_capture for each processed position.
    int capture_layer = -1;
    Mat* layer_capture = nullptr;
};

// Processes one token at the next position, appending this position's keys
// and values to kv. Returns the post-final-norm hidden state, i.e. exactly
// what gets multiplied by the tied embedding for logits.
std::vector<float> model_step(const FrozenModel& model, KVCache& kv, int token,
                              const ForwardHooks& hooks = {});

// Full forward pass: one row of final hidden states per position. Causal by
// construction; row p is bit-identical whether or not later tokens follow.
Mat forward_hidden(const FrozenModel& model, std::span<const int> tokens,
                   const ForwardHooks& hooks = {});

// Residual stream immediately after block layer_index (positions x d_model).
Mat hidden_at_layer(const FrozenModel& model, std::span<const int> tokens, int layer_index);

// logits[v] = dot(h, embed row v).
dvec project_logits(std::span<const double> h, const Mat& embed);
dvec project_logits(std::span<const float> h, const Mat& embed);

// Final-layer hidden states preceding each completion token, for every
// (fact, candidate) pair. Plain data: nothing here can carry gradients.
struct HiddenStateCache {
    struct Record {
        std::string fact_id;
        uint8_t candidate = 0; // 0 = truth, 1..3 = distractors
        std::vector<uint32_t> target_ids;
        Mat hiddens; // token_count x d_model
    };
    int d_model = 0;
    std::vector<Record> records;

    const Record& find(const std::string& fact_id, int candidate) const;
    bool contains(const std::string& fact_id, int candidate) const;
};

HiddenStateCache build_cache(const FrozenModel& model, const std::vector<Fact>& facts,
                             const std::vector<AnchorFact>& anchors);

// File formats (little-endian).
void save_cache(const std::string& path, const HiddenStateCache& cache);     // HSC1
HiddenStateCache load_cache(const std::string& path);
void save_embedding(const std::string& path, const Mat& embed);              // EMB1
Mat load_embedding(const std::string& path);
void save_model(const std::string& path, const FrozenModel& model);          // TOY1
FrozenModel load_model(const std::string& path);

} // namespace postadapt
