// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "postadapt/factset.hpp"
#include "postadapt/model.hpp"

namespace postadapt {

// Contrastive direction: mean(truth states) - mean(distractor states),
// normalized to unit length. Errors on a (near-)zero difference.
std::vector<float> build_direction(std::span<const std::vector<float>> truth_hiddens,
                                   std::span<const std::vector<float>> distractor_hiddens);

// Forward pass with the steering injection active; model weights untouched.
Mat apply_steering(const FrozenModel& model, std::span<const int> tokens,
                   const SteeringConfig& config);

struct SweepGrid {
    std::vector<int> layers;
    std::vector<double> strengths;
    // pass_counts[row][col]: facts passing with (layers[row], strengths[col]).
    std::vector<std::vector<int>> pass_counts;
    int n_facts = 0;
};

inline const std::vector<double> kDefaultSweepStrengths = {0.5, 1.0, 1.5, 2.0, 3.0, 5.0};

// Evenly spaced distinct layer indices, at most five. Models with >= 34
// layers keep the documented grid {5, 10, 18, 25, 33}.
std::vector<int> default_sweep_layers(int n_layers);

// For each grid layer: build the contrastive direction from the facts'
// truth-vs-distractor states at that layer's output (completion positions),
// then rescore every fact at each strength and count passes.
SweepGrid sweep(const FrozenModel& model, const std::vector<Fact>& facts,
                std::span<const int> layers, std::span<const double> strengths);

std::string sweep_to_csv(const SweepGrid& grid);
std::string sweep_to_text(const SweepGrid& grid);

} // namespace postadapt
