// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "postadapt/adapters.hpp"
#include "postadapt/evaluator.hpp"
#include "postadapt/model.hpp"

namespace postadapt {

struct TrainConfig {
    double tau = 1.5;           // hinge target on train margins
    double anchor_floor = 0.1;  // anchor hinge floor
    double anchor_weight = 2.0;
    double lr = 5e-4;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int max_steps = 400;
    uint64_t seed = 0;
    AdapterKind kind = AdapterKind::swiglu;
    int d_inner = 0; // 0 -> default for the kind
    GateActivation gate = GateActivation::silu;

    void validate() const;
};

struct StepStats {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0; // global L2 norm before clipping
    double mean_train_margin = 0.0;
    double min_anchor_margin = 0.0; // NaN when no anchors
};

struct TrainHistory {
    std::vector<StepStats> steps;
};

struct TrainResult {
    Adapter adapter;
    TrainHistory history;
};

// Mean hinge over train margins toward tau plus anchor_weight times the mean
// anchor hinge toward anchor_floor. An empty anchor list contributes zero.
double hinge_anchor_loss(std::span<const double> train_margins,
                         std::span<const double> anchor_margins, const TrainConfig& cfg);

// One full-batch evaluation of the training objective and its exact analytic
// gradients w.r.t. the adapter parameters. This is the quantity train() steps
// on, exposed so the finite-difference oracle can check the whole chain
// (apply -> tied projection -> log-softmax -> margin -> hinge).
struct LossGrads {
    double loss = 0.0;
    std::vector<Mat> grads;
    std::vector<double> train_margins;
    std::vector<double> anchor_margins;
};

LossGrads loss_and_grads(const HiddenStateCache& cache, const Mat& embed,
                         std::span<const std::string> train_ids,
                         const std::vector<AnchorFact>& anchors, const Adapter& adapter,
                         const TrainConfig& cfg);

// Full-batch gradient descent on cached hidden states: margins through
// apply -> tied projection -> log-softmax, AdamW + global-norm clipping each
// step. Deterministic given cfg.seed. Invokes the gradient sentinel at step 1.
TrainResult train(const HiddenStateCache& cache, const Mat& embed, const SplitSpec& split,
                  const std::vector<AnchorFact>& anchors, const TrainConfig& cfg);

// Throws ZeroGradient when step == 1, loss > 0 and grad_norm < 1e-12: a
// positive loss whose gradient is structurally zero means the parameters
// being differentiated are a detached snapshot, not the live module.
void gradient_sentinel(double grad_norm, int step, double loss);

struct GradientBugReport {
    double loss_live = 0.0;
    double loss_detached = 0.0;
    double live_grad_norm = 0.0;     // expected sqrt(3) = 1.7321 for the 3->1 map
    double detached_grad_norm = 0.0; // expected exactly 0.0
};

// Minimal reproduction of the silent zero-gradient failure: a 3->1 linear
// map with loss = sum of outputs on input [1,1,1], differentiated once
// through the live parameters and once against a detached value snapshot.
// Both paths compute the identical loss; only the gradient differs.
GradientBugReport reproduce_gradient_bug();

TrainConfig load_train_config(const std::string& path);
// One key = value assignment; used both by the config parser and by CLI
// flag overrides.
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string history_to_csv(const TrainHistory& history);

} // namespace postadapt
