// SPDX-License-Identifier: Apache-2.0
#include "postadapt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "postadapt/io.hpp"
#include "postadapt/numerics.hpp"

namespace postadapt {

void TrainConfig::validate() const {
    if (!(tau > anchor_floor && anchor_floor > 0.0))
        throw ValidationError("train config: need tau > anchor_floor > 0");
    if (lr < 0.0) throw ValidationError("train config: lr must be >= 0");
    if (max_steps < 1) throw ValidationError("train config: max_steps must be >= 1");
    if (clip_norm <= 0.0) throw ValidationError("train config: clip_norm must be positive");
}

double hinge_anchor_loss(std::span<const double> train_margins,
                         std::span<const double> anchor_margins, const TrainConfig& cfg) {
    if (train_margins.empty()) throw ValidationError("loss: at least one train margin required");
    double train_term = 0.0;
    for (double m : train_margins) train_term += std::max(0.0, cfg.tau - m);
    train_term /= static_cast<double>(train_margins.size());
    double anchor_term = 0.0;
    if (!anchor_margins.empty()) {
        for (double m : anchor_margins) anchor_term += std::max(0.0, cfg.anchor_floor - m);
        anchor_term = cfg.anchor_weight * anchor_term / static_cast<double>(anchor_margins.size());
    }
    return train_term + anchor_term;
}

void gradient_sentinel(double grad_norm, int step, double loss) {
    if (step < 1) throw ValidationError("gradient_sentinel: step must be >= 1");
    if (step == 1 && loss > 0.0 && grad_norm < 1e-12)
        throw ZeroGradient(
            "step-1 gradient norm is zero while the loss is positive. This is the signature of "
            "differentiating a detached parameter snapshot: the loss evaluates correctly, but the "
            "gradient graph never reaches the live parameters, so training silently does nothing. "
            "Differentiate through the module that owns the parameters, not through a copy of "
            "their values.");
}

namespace {

struct FactRecords {
    const HiddenStateCache::Record* candidates[4];
};

FactRecords resolve_records(const HiddenStateCache& cache, const std::string& id) {
    FactRecords fr{};
    for (int cand = 0; cand < 4; ++cand) fr.candidates[cand] = &cache.find(id, cand);
    return fr;
}

struct MarginWork {
    double margin = 0.0;
    int best_distractor = 1; // candidate index of the strongest distractor
};

MarginWork compute_margin(const FactRecords& fr, const Mat& embed, const Adapter& adapter) {
    const double truth_lp = sequence_logprob(*fr.candidates[0], embed, &adapter);
    MarginWork w;
    double best = -std::numeric_limits<double>::infinity();
    for (int cand = 1; cand <= 3; ++cand) {
        const double lp = sequence_logprob(*fr.candidates[cand], embed, &adapter);
        if (lp > best) {
            best = lp;
            w.best_distractor = cand;
        }
    }
    w.margin = truth_lp - best;
    return w;
}

// Accumulates d(dl_dlp * candidate_logprob)/d(adapter params) into grads.
void backprop_candidate(const HiddenStateCache::Record& rec, const Mat& embed,
                        const Adapter& adapter, double dl_dlp, GradBuf& grads) {
    for (int k = 0; k < rec.hiddens.rows; ++k) {
        const auto h = rec.hiddens.row(k);
        const uint32_t target = rec.target_ids[static_cast<size_t>(k)];
        if (adapter.is_hidden_kind()) {
            const dvec h_in = to_dvec(h);
            const dvec adapted = apply(adapter, std::span<const double>(h_in));
            const dvec logits = project_logits(std::span<const double>(adapted), embed);
            const dvec probs = softmax(std::span<const double>(logits));
            dvec d_logits(probs.size());
            for (size_t v = 0; v < probs.size(); ++v) d_logits[v] = -dl_dlp * probs[v];
            d_logits[target] += dl_dlp;
            const dvec d_h = vecmat<double>(std::span<const double>(d_logits), embed);
            backward_accumulate(adapter, h_in, d_h, grads);
        } else {
            const dvec logits = project_logits(h, embed);
            const dvec adapted = apply(adapter, std::span<const double>(logits));
            const dvec probs = softmax(std::span<const double>(adapted));
            dvec d_adapted(probs.size());
            for (size_t v = 0; v < probs.size(); ++v) d_adapted[v] = -dl_dlp * probs[v];
            d_adapted[target] += dl_dlp;
            backward_accumulate(adapter, logits, d_adapted, grads);
        }
    }
}

} // namespace

LossGrads loss_and_grads(const HiddenStateCache& cache, const Mat& embed,
                         std::span<const std::string> train_ids,
                         const std::vector<AnchorFact>& anchors, const Adapter& adapter,
                         const TrainConfig& cfg) {
    if (train_ids.empty()) throw ValidationError("loss_and_grads: no train facts");
    GradBuf grads = GradBuf::zeros_like(adapter);
    LossGrads out;

    const double n_train = static_cast<double>(train_ids.size());
    for (const std::string& id : train_ids) {
        const FactRecords fr = resolve_records(cache, id);
        const MarginWork w = compute_margin(fr, embed, adapter);
        out.train_margins.push_back(w.margin);
        if (w.margin < cfg.tau) {
            // d loss / d margin = -1/T; margin = lp_truth - lp_best
            const double dl_dm = -1.0 / n_train;
            backprop_candidate(*fr.candidates[0], embed, adapter, dl_dm, grads);
            backprop_candidate(*fr.candidates[w.best_distractor], embed, adapter, -dl_dm, grads);
        }
    }
    const double n_anchor = static_cast<double>(anchors.size());
    for (const AnchorFact& a : anchors) {
        const FactRecords fr = resolve_records(cache, a.id);
        const MarginWork w = compute_margin(fr, embed, adapter);
        out.anchor_margins.push_back(w.margin);
        if (w.margin < cfg.anchor_floor) {
            const double dl_dm = -cfg.anchor_weight / n_anchor;
            backprop_candidate(*fr.candidates[0], embed, adapter, dl_dm, grads);
            backprop_candidate(*fr.candidates[w.best_distractor], embed, adapter, -dl_dm, grads);
        }
    }

    out.loss = hinge_anchor_loss(out.train_margins, out.anchor_margins, cfg);
    out.grads = grads.to_mats(adapter);
    return out;
}

TrainResult train(const HiddenStateCache& cache, const Mat& embed, const SplitSpec& split,
                  const std::vector<AnchorFact>& anchors, const TrainConfig& cfg) {
    cfg.validate();
    if (split.train_ids.empty()) throw ValidationError("train: split has no train facts");

    const int in_dim = cache.d_model == 0 ? embed.cols : cache.d_model;
    const int adapter_dim = cfg.kind == AdapterKind::logit ? embed.rows : in_dim;
    const int d_inner = cfg.d_inner > 0 ? cfg.d_inner : default_d_inner(cfg.kind);

    TrainResult result;
    result.adapter = init_adapter(cfg.kind, adapter_dim, d_inner, cfg.seed, cfg.gate);
    Adapter& adapter = result.adapter;

    const std::vector<Mat*> params = adapter_params(adapter);
    OptimizerState opt = OptimizerState::like(params);
    AdamWConfig adamw{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};

    for (int step = 1; step <= cfg.max_steps; ++step) {
        LossGrads lg = loss_and_grads(cache, embed, split.train_ids, anchors, adapter, cfg);
        const double pre_clip_norm = global_norm(lg.grads);

        StepStats stats;
        stats.step = step;
        stats.loss = lg.loss;
        stats.grad_norm = pre_clip_norm;
        stats.mean_train_margin =
            std::accumulate(lg.train_margins.begin(), lg.train_margins.end(), 0.0) /
            static_cast<double>(lg.train_margins.size());
        stats.min_anchor_margin =
            lg.anchor_margins.empty()
                ? std::numeric_limits<double>::quiet_NaN()
                : *std::min_element(lg.anchor_margins.begin(), lg.anchor_margins.end());
        result.history.steps.push_back(stats);

        gradient_sentinel(pre_clip_norm, step, lg.loss);

        clip_global_norm(lg.grads, cfg.clip_norm);
        adamw_step(params, lg.grads, opt, adamw);
    }
    return result;
}

GradientBugReport reproduce_gradient_bug() {
    // A 3->1 linear map on input [1,1,1], loss = sum of outputs. Gradients
    // are taken with a minimal tape: leaves participate in the graph only if
    // the loss expression was actually built from them.
    struct Tape {
        struct Node {
            double value;
            std::vector<std::pair<int, double>> parents; // (node, local partial)
        };
        std::vector<Node> nodes;

        int leaf(double v) {
            nodes.push_back({v, {}});
            return static_cast<int>(nodes.size()) - 1;
        }
        int mul_const(int a, double c) {
            nodes.push_back({nodes[static_cast<size_t>(a)].value * c, {{a, c}}});
            return static_cast<int>(nodes.size()) - 1;
        }
        int add(int a, int b) {
            nodes.push_back(
                {nodes[static_cast<size_t>(a)].value + nodes[static_cast<size_t>(b)].value,
                 {{a, 1.0}, {b, 1.0}}});
            return static_cast<int>(nodes.size()) - 1;
        }
        std::vector<double> backward(int root) {
            std::vector<double> grad(nodes.size(), 0.0);
            grad[static_cast<size_t>(root)] = 1.0;
            for (int i = root; i >= 0; --i)
                for (const auto& [parent, partial] : nodes[static_cast<size_t>(i)].parents)
                    grad[static_cast<size_t>(parent)] += grad[static_cast<size_t>(i)] * partial;
            return grad;
        }
    };

    const double weights[3] = {0.25, -0.50, 0.75};
    const double x[3] = {1.0, 1.0, 1.0};

    GradientBugReport report;
    {
        // Live path: the loss expression is built from the parameter leaves.
        Tape tape;
        int w0 = tape.leaf(weights[0]);
        int w1 = tape.leaf(weights[1]);
        int w2 = tape.leaf(weights[2]);
        int out = tape.add(tape.add(tape.mul_const(w0, x[0]), tape.mul_const(w1, x[1])),
                           tape.mul_const(w2, x[2]));
        report.loss_live = tape.nodes[static_cast<size_t>(out)].value;
        const auto grad = tape.backward(out);
        report.live_grad_norm = std::sqrt(grad[static_cast<size_t>(w0)] * grad[static_cast<size_t>(w0)] +
                                          grad[static_cast<size_t>(w1)] * grad[static_cast<size_t>(w1)] +
                                          grad[static_cast<size_t>(w2)] * grad[static_cast<size_t>(w2)]);
    }
    {
        // Detached path: parameter leaves exist, but the loss is computed
        // from a plain value snapshot, so the graph never touches them. The
        // loss value is identical; the gradient is structurally zero.
        Tape tape;
        int w0 = tape.leaf(weights[0]);
        int w1 = tape.leaf(weights[1]);
        int w2 = tape.leaf(weights[2]);
        const double snapshot[3] = {tape.nodes[static_cast<size_t>(w0)].value,
                                    tape.nodes[static_cast<size_t>(w1)].value,
                                    tape.nodes[static_cast<size_t>(w2)].value};
        int out = tape.leaf(snapshot[0] * x[0] + snapshot[1] * x[1] + snapshot[2] * x[2]);
        report.loss_detached = tape.nodes[static_cast<size_t>(out)].value;
        const auto grad = tape.backward(out);
        report.detached_grad_norm =
            std::sqrt(grad[static_cast<size_t>(w0)] * grad[static_cast<size_t>(w0)] +
                      grad[static_cast<size_t>(w1)] * grad[static_cast<size_t>(w1)] +
                      grad[static_cast<size_t>(w2)] * grad[static_cast<size_t>(w2)]);
    }
    return report;
}

void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "tau") cfg.tau = std::stod(value);
        else if (key == "anchor_floor") cfg.anchor_floor = std::stod(value);
        else if (key == "anchor_weight") cfg.anchor_weight = std::stod(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
        else if (key == "clip_norm") cfg.clip_norm = std::stod(value);
        else if (key == "max_steps") cfg.max_steps = std::stoi(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "kind") cfg.kind = kind_from_name(value);
        else if (key == "d_inner") cfg.d_inner = std::stoi(value);
        else if (key == "gate") {
            if (value == "silu") cfg.gate = GateActivation::silu;
            else if (value == "sigmoid") cfg.gate = GateActivation::sigmoid;
            else throw ValidationError("unknown gate activation '" + value + "'");
        } else {
            throw ValidationError("unknown config key '" + key + "'");
        }
    } catch (const std::invalid_argument&) {
        throw ValidationError("config key '" + key + "': cannot parse value '" + value + "'");
    } catch (const std::out_of_range&) {
        throw ValidationError("config key '" + key + "': value '" + value + "' out of range");
    }
}

TrainConfig load_train_config(const std::string& path) {
    TrainConfig cfg;
    std::istringstream in(read_file(path));
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const size_t a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const size_t b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        if (trim(line).empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(path, line_no, "expected key = value");
        apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

std::string history_to_csv(const TrainHistory& history) {
    std::ostringstream out;
    out << "step,loss,grad_norm,mean_train_margin,min_anchor_margin\n";
    out.setf(std::ios::fmtflags(0), std::ios::floatfield);
    out.precision(9);
    for (const StepStats& s : history.steps) {
        out << s.step << ',' << s.loss << ',' << s.grad_norm << ',' << s.mean_train_margin << ',';
        if (std::isnan(s.min_anchor_margin))
            out << "";
        else
            out << s.min_anchor_margin;
        out << '\n';
    }
    return out.str();
}

} // namespace postadapt
