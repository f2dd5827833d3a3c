// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "postadapt/mat.hpp"

namespace postadapt {

enum class AdapterKind : uint8_t { swiglu = 0, linear = 1, logit = 2 };

// Gate nonlinearity for the gated adapter. SiLU is the conventional choice
// for this block shape; plain sigmoid is kept as a switch and is covered by
// the same gradient checks.
enum class GateActivation : uint8_t { silu = 0, sigmoid = 1 };

const char* kind_name(AdapterKind kind);
AdapterKind kind_from_name(const std::string& name);

// Residual bottleneck adapters. apply() always returns h + delta(h), so a
// zero output-side matrix makes the adapter an exact no-op.
//
// swiglu: delta = (act(Wg h) ⊙ (Wu h)) applied through Wd
// linear: delta = Wup (Wdown h)
// logit:  the linear form over vocabulary-dimension logits
struct Adapter {
    AdapterKind kind = AdapterKind::swiglu;
    GateActivation gate = GateActivation::silu;
    int in_dim = 0;   // d_model for hidden kinds, vocab_size for logit
    int d_inner = 0;
    // swiglu: {w_gate, w_up, w_down}; linear/logit: {w_down, w_up}
    std::vector<Mat> mats;

    bool is_hidden_kind() const { return kind != AdapterKind::logit; }
};

int64_t param_count(AdapterKind kind, int in_dim, int d_inner);
int default_d_inner(AdapterKind kind);

// Output-side matrix zero-initialized, input-side matrices Gaussian with
// std 0.02, seeded per tensor: a fresh adapter is the identity.
Adapter init_adapter(AdapterKind kind, int in_dim, int d_inner, uint64_t seed,
                     GateActivation gate = GateActivation::silu);

dvec apply(const Adapter& adapter, std::span<const double> h);
dvec apply(const Adapter& adapter, std::span<const float> h);

// Per-matrix gradient accumulators kept in 64-bit while positions are
// summed; materialized to f32 Mats just before the optimizer step.
struct GradBuf {
    std::vector<std::vector<double>> g;

    static GradBuf zeros_like(const Adapter& adapter);
    void reset();
    std::vector<Mat> to_mats(const Adapter& adapter) const;
};

// Accumulates exact analytic gradients of apply() w.r.t. every adapter
// matrix, given dL/d(output). No gradient w.r.t. h exists anywhere: hidden
// states are detached by construction.
void backward_accumulate(const Adapter& adapter, std::span<const double> h,
                         std::span<const double> upstream, GradBuf& grads);

// Convenience single-call backward (fresh buffer), mainly for tests.
std::vector<Mat> backward(const Adapter& adapter, std::span<const double> h,
                          std::span<const double> upstream);

std::vector<Mat*> adapter_params(Adapter& adapter);

// Flat f32 view over all adapter parameters, for the finite-difference
// oracle. Order matches adapter.mats.
std::vector<float> flatten_params(const Adapter& adapter);
void unflatten_params(Adapter& adapter, std::span<const float> flat);

void save_adapter(const std::string& path, const Adapter& adapter); // ADP1
Adapter load_adapter(const std::string& path);

} // namespace postadapt
