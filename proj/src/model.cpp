// SPDX-License-Identifier: Apache-2.0
#include "postadapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "postadapt/adapters.hpp"
#include "postadapt/io.hpp"
#include "postadapt/numerics.hpp"

namespace postadapt {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr float kPosScale = 0.3f;
constexpr double kEmbedStd = 0.25;
constexpr double kBlockStd = 0.15;

void validate_config(const ToyModelConfig& c) {
    if (c.d_model <= 0 || c.n_layers <= 0 || c.n_heads <= 0 || c.d_ff <= 0 ||
        c.vocab_size <= 0 || c.max_seq_len <= 0)
        throw ValidationError("toy model config: all dims must be positive");
    if (c.d_model % c.n_heads != 0)
        throw ValidationError("toy model config: d_model " + std::to_string(c.d_model) +
                              " not divisible by n_heads " + std::to_string(c.n_heads));
}

std::vector<float> rms_norm(std::span<const float> x) {
    double acc = 0.0;
    for (float v : x) acc += static_cast<double>(v) * static_cast<double>(v);
    const double inv = 1.0 / std::sqrt(acc / static_cast<double>(x.size()) + kRmsEps);
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * inv);
    return out;
}

std::vector<float> positional(int pos, int d_model) {
    std::vector<float> pe(static_cast<size_t>(d_model));
    for (int i = 0; i < d_model; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
        pe[static_cast<size_t>(i)] = kPosScale * static_cast<float>(std::sin(pos * freq));
        if (i + 1 < d_model)
            pe[static_cast<size_t>(i) + 1] = kPosScale * static_cast<float>(std::cos(pos * freq));
    }
    return pe;
}

std::vector<float> to_f32(const dvec& x) {
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i]);
    return out;
}

} // namespace

FrozenModel init_toy_model(const ToyModelConfig& cfg) {
    validate_config(cfg);
    FrozenModel m;
    m.cfg = cfg;
    uint64_t tensor_idx = 0;
    auto gaussian = [&](int r, int c, double std_dev) {
        Rng rng = Rng::derive(cfg.init_seed, tensor_idx++);
        return Mat::gaussian(r, c, std_dev, rng);
    };
    m.embed = gaussian(cfg.vocab_size, cfg.d_model, kEmbedStd);
    m.layers.reserve(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights w;
        w.wq = gaussian(cfg.d_model, cfg.d_model, kBlockStd);
        w.wk = gaussian(cfg.d_model, cfg.d_model, kBlockStd);
        w.wv = gaussian(cfg.d_model, cfg.d_model, kBlockStd);
        w.wo = gaussian(cfg.d_model, cfg.d_model, kBlockStd);
        w.w1 = gaussian(cfg.d_ff, cfg.d_model, kBlockStd);
        w.w2 = gaussian(cfg.d_model, cfg.d_ff, kBlockStd);
        m.layers.push_back(std::move(w));
    }
    return m;
}

uint64_t weights_checksum(const FrozenModel& model) {
    BinWriter w;
    w.mat(model.embed);
    for (const LayerWeights& l : model.layers) {
        w.mat(l.wq);
        w.mat(l.wk);
        w.mat(l.wv);
        w.mat(l.wo);
        w.mat(l.w1);
        w.mat(l.w2);
    }
    return fnv1a64(w.buffer());
}

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string detokenize(std::span<const int> ids) {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) s += static_cast<char>(static_cast<unsigned char>(id));
    return s;
}

bool operator==(const KVCache& a, const KVCache& b) {
    if (a.d_model != b.d_model || a.positions != b.positions ||
        a.layers.size() != b.layers.size())
        return false;
    for (size_t l = 0; l < a.layers.size(); ++l)
        if (a.layers[l].k != b.layers[l].k || a.layers[l].v != b.layers[l].v) return false;
    return true;
}

std::vector<float> model_step(const FrozenModel& model, KVCache& kv, int token,
                              const ForwardHooks& hooks) {
    const ToyModelConfig& cfg = model.cfg;
    if (token < 0 || token >= cfg.vocab_size)
        throw ValidationError("token id " + std::to_string(token) + " out of range for vocab " +
                              std::to_string(cfg.vocab_size));
    if (kv.layers.empty()) {
        kv.d_model = cfg.d_model;
        kv.layers.resize(static_cast<size_t>(cfg.n_layers));
        kv.positions = 0;
    }
    const int pos = kv.positions;
    if (pos >= cfg.max_seq_len)
        throw ValidationError("sequence exceeds max_seq_len " + std::to_string(cfg.max_seq_len));

    const int d = cfg.d_model;
    const int head_dim = d / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::vector<float> x(static_cast<size_t>(d));
    {
        const auto row = model.embed.row(token);
        const auto pe = positional(pos, d);
        for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] = row[static_cast<size_t>(i)] + pe[static_cast<size_t>(i)];
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        if (hooks.pre_final_adapter && l == cfg.n_layers - 1)
            x = to_f32(apply(*hooks.pre_final_adapter, std::span<const float>(x)));

        const LayerWeights& w = model.layers[static_cast<size_t>(l)];
        KVCache::LayerKV& lkv = kv.layers[static_cast<size_t>(l)];

        const std::vector<float> xn = rms_norm(x);
        const std::vector<float> q = to_f32(matvec<float>(w.wq, xn));
        const std::vector<float> k = to_f32(matvec<float>(w.wk, xn));
        const std::vector<float> v = to_f32(matvec<float>(w.wv, xn));
        lkv.k.insert(lkv.k.end(), k.begin(), k.end());
        lkv.v.insert(lkv.v.end(), v.begin(), v.end());

        std::vector<float> heads(static_cast<size_t>(d));
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int off = h * head_dim;
            dvec scores(static_cast<size_t>(pos) + 1);
            for (int j = 0; j <= pos; ++j) {
                const float* kj = lkv.k.data() + static_cast<size_t>(j) * d + off;
                double acc = 0.0;
                for (int t = 0; t < head_dim; ++t)
                    acc += static_cast<double>(q[static_cast<size_t>(off + t)]) * static_cast<double>(kj[t]);
                scores[static_cast<size_t>(j)] = acc * scale;
            }
            const dvec probs = softmax(scores);
            for (int t = 0; t < head_dim; ++t) {
                double acc = 0.0;
                for (int j = 0; j <= pos; ++j)
                    acc += probs[static_cast<size_t>(j)] *
                           static_cast<double>(lkv.v[static_cast<size_t>(j) * d + off + t]);
                heads[static_cast<size_t>(off + t)] = static_cast<float>(acc);
            }
        }
        const std::vector<float> attn = to_f32(matvec<float>(w.wo, heads));
        for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += attn[static_cast<size_t>(i)];

        const std::vector<float> xn2 = rms_norm(x);
        const dvec hidden_ff = matvec<float>(w.w1, xn2);
        std::vector<float> act(hidden_ff.size());
        for (size_t i = 0; i < hidden_ff.size(); ++i) act[i] = static_cast<float>(silu(hidden_ff[i]));
        const std::vector<float> ff = to_f32(matvec<float>(w.w2, act));
        for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += ff[static_cast<size_t>(i)];

        if (hooks.steering && l == hooks.steering->layer_index && pos >= hooks.steering->from_position) {
            const SteeringConfig& st = *hooks.steering;
            if (static_cast<int>(st.direction.size()) != d)
                throw DimMismatch("steering direction dim mismatch");
            for (int i = 0; i < d; ++i)
                x[static_cast<size_t>(i)] += static_cast<float>(st.strength * st.direction[static_cast<size_t>(i)]);
        }
        if (hooks.capture_layer == l && hooks.layer_capture) {
            Mat& cap = *hooks.layer_capture;
            std::copy(x.begin(), x.end(), cap.row(pos).begin());
        }
    }

    kv.positions = pos + 1;
    return rms_norm(x);
}

Mat forward_hidden(const FrozenModel& model, std::span<const int> tokens,
                   const ForwardHooks& hooks) {
    if (tokens.empty()) throw ValidationError("forward_hidden: empty token sequence");
    if (static_cast<int>(tokens.size()) > model.cfg.max_seq_len)
        throw ValidationError("forward_hidden: sequence exceeds max_seq_len");
    if (hooks.steering && (hooks.steering->layer_index < 0 ||
                           hooks.steering->layer_index >= model.cfg.n_layers))
        throw ValidationError("steering layer index out of range");
    Mat out(static_cast<int>(tokens.size()), model.cfg.d_model);
    KVCache kv;
    for (size_t p = 0; p < tokens.size(); ++p) {
        const std::vector<float> h = model_step(model, kv, tokens[p], hooks);
        std::copy(h.begin(), h.end(), out.row(static_cast<int>(p)).begin());
    }
    return out;
}

Mat hidden_at_layer(const FrozenModel& model, std::span<const int> tokens, int layer_index) {
    if (layer_index < 0 || layer_index >= model.cfg.n_layers)
        throw ValidationError("hidden_at_layer: layer index out of range");
    Mat cap(static_cast<int>(tokens.size()), model.cfg.d_model);
    ForwardHooks hooks;
    hooks.capture_layer = layer_index;
    hooks.layer_capture = &cap;
    forward_hidden(model, tokens, hooks);
    return cap;
}

dvec project_logits(std::span<const double> h, const Mat& embed) {
    if (static_cast<int>(h.size()) != embed.cols) throw DimMismatch("project_logits: dim mismatch");
    return matvec<double>(embed, h);
}

dvec project_logits(std::span<const float> h, const Mat& embed) {
    if (static_cast<int>(h.size()) != embed.cols) throw DimMismatch("project_logits: dim mismatch");
    return matvec<float>(embed, h);
}

const HiddenStateCache::Record& HiddenStateCache::find(const std::string& fact_id,
                                                       int candidate) const {
    for (const Record& r : records)
        if (r.candidate == candidate && r.fact_id == fact_id) return r;
    throw ValidationError("cache record missing for fact '" + fact_id + "' candidate " +
                          std::to_string(candidate));
}

bool HiddenStateCache::contains(const std::string& fact_id, int candidate) const {
    for (const Record& r : records)
        if (r.candidate == candidate && r.fact_id == fact_id) return true;
    return false;
}

namespace {

void append_candidate_records(const FrozenModel& model, HiddenStateCache& cache,
                              const std::string& id, const std::string& context,
                              const std::string& truth,
                              std::span<const std::string> distractors) {
    const std::vector<int> ctx = tokenize(context);
    std::vector<std::string_view> completions;
    completions.push_back(truth);
    for (const auto& d : distractors) completions.push_back(d);

    for (size_t cand = 0; cand < completions.size(); ++cand) {
        const std::vector<int> comp = tokenize(completions[cand]);
        std::vector<int> tokens = ctx;
        tokens.insert(tokens.end(), comp.begin(), comp.end());
        if (static_cast<int>(tokens.size()) > model.cfg.max_seq_len)
            throw ValidationError("fact '" + id + "': sequence of " +
                                  std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                                  std::to_string(model.cfg.max_seq_len));
        const Mat h = forward_hidden(model, tokens);
        HiddenStateCache::Record rec;
        rec.fact_id = id;
        rec.candidate = static_cast<uint8_t>(cand);
        rec.hiddens = Mat(static_cast<int>(comp.size()), model.cfg.d_model);
        for (size_t k = 0; k < comp.size(); ++k) {
            rec.target_ids.push_back(static_cast<uint32_t>(comp[k]));
            // hidden state at the position immediately preceding target k
            const int pos = static_cast<int>(ctx.size() + k) - 1;
            const auto src = h.row(pos);
            std::copy(src.begin(), src.end(), rec.hiddens.row(static_cast<int>(k)).begin());
        }
        cache.records.push_back(std::move(rec));
    }
}

} // namespace

HiddenStateCache build_cache(const FrozenModel& model, const std::vector<Fact>& facts,
                             const std::vector<AnchorFact>& anchors) {
    HiddenStateCache cache;
    cache.d_model = model.cfg.d_model;
    std::set<std::string> ids;
    for (const Fact& f : facts)
        if (!ids.insert(f.id).second) throw ValidationError("duplicate id '" + f.id + "'");
    for (const AnchorFact& a : anchors)
        if (!ids.insert(a.id).second)
            throw ValidationError("anchor id '" + a.id + "' collides with another id");
    for (const Fact& f : facts)
        append_candidate_records(model, cache, f.id, f.context, f.truth, f.distractors);
    for (const AnchorFact& a : anchors)
        append_candidate_records(model, cache, a.id, a.context, a.truth, a.distractors);
    return cache;
}

void save_cache(const std::string& path, const HiddenStateCache& cache) {
    BinWriter w;
    w.bytes("HSC1");
    w.u32(static_cast<uint32_t>(cache.d_model));
    w.u32(static_cast<uint32_t>(cache.records.size()));
    for (const auto& r : cache.records) {
        w.u16(static_cast<uint16_t>(r.fact_id.size()));
        w.bytes(r.fact_id);
        w.u8(r.candidate);
        w.u32(static_cast<uint32_t>(r.target_ids.size()));
        for (uint32_t id : r.target_ids) w.u32(id);
        for (float v : r.hiddens.data) w.f32(v);
    }
    w.save(path);
}

HiddenStateCache load_cache(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic("HSC1");
    HiddenStateCache cache;
    cache.d_model = static_cast<int>(r.u32());
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        HiddenStateCache::Record rec;
        rec.fact_id = r.str(r.u16());
        rec.candidate = r.u8();
        const uint32_t n_tokens = r.u32();
        rec.target_ids.reserve(n_tokens);
        for (uint32_t t = 0; t < n_tokens; ++t) rec.target_ids.push_back(r.u32());
        rec.hiddens = Mat(static_cast<int>(n_tokens), cache.d_model);
        for (auto& v : rec.hiddens.data) v = r.f32();
        cache.records.push_back(std::move(rec));
    }
    if (!r.at_end()) throw ParseError(path + ": trailing bytes after last record");
    return cache;
}

void save_embedding(const std::string& path, const Mat& embed) {
    BinWriter w;
    w.bytes("EMB1");
    w.u32(static_cast<uint32_t>(embed.rows));
    w.u32(static_cast<uint32_t>(embed.cols));
    for (float v : embed.data) w.f32(v);
    w.save(path);
}

Mat load_embedding(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic("EMB1");
    const uint32_t vocab = r.u32();
    const uint32_t d_model = r.u32();
    Mat m(static_cast<int>(vocab), static_cast<int>(d_model));
    for (auto& v : m.data) v = r.f32();
    if (!r.at_end()) throw ParseError(path + ": trailing bytes");
    check_finite(m, path);
    return m;
}

void save_model(const std::string& path, const FrozenModel& model) {
    BinWriter w;
    w.bytes("TOY1");
    const ToyModelConfig& c = model.cfg;
    w.u32(static_cast<uint32_t>(c.d_model));
    w.u32(static_cast<uint32_t>(c.n_layers));
    w.u32(static_cast<uint32_t>(c.n_heads));
    w.u32(static_cast<uint32_t>(c.d_ff));
    w.u32(static_cast<uint32_t>(c.vocab_size));
    w.u32(static_cast<uint32_t>(c.max_seq_len));
    w.u64(c.init_seed);
    w.u32(static_cast<uint32_t>(1 + 6 * model.layers.size()));
    w.named_mat("embed", model.embed);
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        const LayerWeights& lw = model.layers[l];
        w.named_mat(prefix + "wq", lw.wq);
        w.named_mat(prefix + "wk", lw.wk);
        w.named_mat(prefix + "wv", lw.wv);
        w.named_mat(prefix + "wo", lw.wo);
        w.named_mat(prefix + "w1", lw.w1);
        w.named_mat(prefix + "w2", lw.w2);
    }
    w.save(path);
}

FrozenModel load_model(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic("TOY1");
    FrozenModel m;
    m.cfg.d_model = static_cast<int>(r.u32());
    m.cfg.n_layers = static_cast<int>(r.u32());
    m.cfg.n_heads = static_cast<int>(r.u32());
    m.cfg.d_ff = static_cast<int>(r.u32());
    m.cfg.vocab_size = static_cast<int>(r.u32());
    m.cfg.max_seq_len = static_cast<int>(r.u32());
    m.cfg.init_seed = r.u64();
    validate_config(m.cfg);
    const uint32_t tensor_count = r.u32();
    std::map<std::string, Mat> tensors;
    for (uint32_t t = 0; t < tensor_count; ++t) {
        const std::string name = r.str(r.u16());
        tensors.emplace(name, r.mat());
    }
    if (!r.at_end()) throw ParseError(path + ": trailing bytes");
    auto take = [&](const std::string& name, int rows, int cols) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ParseError(path + ": missing tensor " + name);
        if (it->second.rows != rows || it->second.cols != cols)
            throw ParseError(path + ": tensor " + name + " has wrong shape");
        check_finite(it->second, name);
        return std::move(it->second);
    };
    m.embed = take("embed", m.cfg.vocab_size, m.cfg.d_model);
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        LayerWeights lw;
        lw.wq = take(prefix + "wq", m.cfg.d_model, m.cfg.d_model);
        lw.wk = take(prefix + "wk", m.cfg.d_model, m.cfg.d_model);
        lw.wv = take(prefix + "wv", m.cfg.d_model, m.cfg.d_model);
        lw.wo = take(prefix + "wo", m.cfg.d_model, m.cfg.d_model);
        lw.w1 = take(prefix + "w1", m.cfg.d_ff, m.cfg.d_model);
        lw.w2 = take(prefix + "w2", m.cfg.d_model, m.cfg.d_ff);
        m.layers.push_back(std::move(lw));
    }
    return m;
}

} // namespace postadapt
