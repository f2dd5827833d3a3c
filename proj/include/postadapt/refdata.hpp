// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "postadapt/factset.hpp"

namespace postadapt {

// Reference result tables shipped as machine-readable golden data for the
// stats reproduction suite, guarded by a digest manifest.

struct GoldenMargin {
    std::string topic;
    int intensity = 0;
    double margin = 0.0;
};

struct GoldenSplitCount {
    std::string scale; // "4B", "8B", "14B"
    std::string kind;  // "swiglu", "linear"
    int split = 0;     // 1..5
    int passed = 0;
    int total = 16;
};

struct GoldenLevelRow {
    int intensity = 0;
    int facts = 0;
    int passed = 0;
    double mean_margin = 0.0; // printed value, informational only
};

struct GoldenScaleRow {
    std::string scale;
    int d_model = 0;
    double swiglu_mean = 0.0, swiglu_std = 0.0;
    double linear_mean = 0.0, linear_std = 0.0;
    double fisher_p = 0.0;
    double baseline_pct = 0.0; // informational constant; not recomputable
};

struct GoldenTables {
    std::vector<GoldenMargin> margins;          // 31 per-fact entries
    std::vector<GoldenSplitCount> split_counts; // 3 scales x 2 kinds x 5 splits
    std::vector<GoldenLevelRow> level_rows;     // 4 intensity aggregates
    std::vector<GoldenScaleRow> scale_rows;     // 3 scale aggregates

    double margin_lookup(const std::string& topic, int intensity) const;
    int split_lookup(const std::string& scale, const std::string& kind, int split) const;
    ReferenceMargins to_reference_margins() const;
};

std::string default_data_root();
std::string default_reference_dir();

// Loads all golden files from dir, verifying each against the digest
// manifest first; a mismatch fails loudly, naming the file.
GoldenTables load_golden(const std::string& dir);

} // namespace postadapt
