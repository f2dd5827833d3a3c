// SPDX-License-Identifier: Apache-2.0
#include "postadapt/adapters.hpp"

#include <cstring>

#include "postadapt/io.hpp"
#include "postadapt/numerics.hpp"
#include "postadapt/rng.hpp"

namespace postadapt {

const char* kind_name(AdapterKind kind) {
    switch (kind) {
        case AdapterKind::swiglu: return "swiglu";
        case AdapterKind::linear: return "linear";
        case AdapterKind::logit: return "logit";
    }
    return "?";
}

AdapterKind kind_from_name(const std::string& name) {
    if (name == "swiglu") return AdapterKind::swiglu;
    if (name == "linear") return AdapterKind::linear;
    if (name == "logit") return AdapterKind::logit;
    throw ValidationError("unknown adapter kind '" + name + "'");
}

int64_t param_count(AdapterKind kind, int in_dim, int d_inner) {
    if (in_dim <= 0 || d_inner <= 0) throw ValidationError("param_count: dims must be positive");
    const int64_t per = static_cast<int64_t>(in_dim) * d_inner;
    return kind == AdapterKind::swiglu ? 3 * per : 2 * per;
}

int default_d_inner(AdapterKind kind) {
    switch (kind) {
        case AdapterKind::swiglu: return 64;
        case AdapterKind::linear: return 96;
        case AdapterKind::logit: return 8;
    }
    return 0;
}

Adapter init_adapter(AdapterKind kind, int in_dim, int d_inner, uint64_t seed,
                     GateActivation gate) {
    if (in_dim <= 0 || d_inner <= 0) throw ValidationError("init_adapter: dims must be positive");
    Adapter a;
    a.kind = kind;
    a.gate = gate;
    a.in_dim = in_dim;
    a.d_inner = d_inner;
    constexpr double kInitStd = 0.02;
    auto gaussian = [&](int r, int c, uint64_t stream) {
        Rng rng = Rng::derive(seed, stream);
        return Mat::gaussian(r, c, kInitStd, rng);
    };
    if (kind == AdapterKind::swiglu) {
        a.mats.push_back(gaussian(d_inner, in_dim, 0)); // w_gate
        a.mats.push_back(gaussian(d_inner, in_dim, 1)); // w_up
        a.mats.emplace_back(in_dim, d_inner);           // w_down, zero: identity at init
    } else {
        a.mats.push_back(gaussian(d_inner, in_dim, 0)); // w_down
        a.mats.emplace_back(in_dim, d_inner);           // w_up, zero
    }
    return a;
}

namespace {

double gate_act(GateActivation g, double x) {
    return g == GateActivation::silu ? silu(x) : sigmoid(x);
}

double gate_act_grad(GateActivation g, double x) {
    return g == GateActivation::silu ? silu_grad(x) : sigmoid_grad(x);
}

void check_input(const Adapter& a, size_t h_size) {
    if (static_cast<int>(h_size) != a.in_dim)
        throw DimMismatch("adapter input dim " + std::to_string(h_size) + " != " +
                          std::to_string(a.in_dim));
}

} // namespace

dvec apply(const Adapter& adapter, std::span<const double> h) {
    check_input(adapter, h.size());
    dvec delta;
    if (adapter.kind == AdapterKind::swiglu) {
        const dvec g = matvec<double>(adapter.mats[0], h);
        const dvec u = matvec<double>(adapter.mats[1], h);
        dvec inner(g.size());
        for (size_t i = 0; i < g.size(); ++i) inner[i] = gate_act(adapter.gate, g[i]) * u[i];
        delta = matvec<double>(adapter.mats[2], std::span<const double>(inner));
    } else {
        const dvec bottleneck = matvec<double>(adapter.mats[0], h);
        delta = matvec<double>(adapter.mats[1], std::span<const double>(bottleneck));
    }
    dvec out(h.size());
    for (size_t i = 0; i < h.size(); ++i) out[i] = h[i] + delta[i];
    return out;
}

dvec apply(const Adapter& adapter, std::span<const float> h) {
    return apply(adapter, std::span<const double>(to_dvec(h)));
}

GradBuf GradBuf::zeros_like(const Adapter& adapter) {
    GradBuf buf;
    for (const Mat& m : adapter.mats) buf.g.emplace_back(m.size(), 0.0);
    return buf;
}

void GradBuf::reset() {
    for (auto& v : g) std::fill(v.begin(), v.end(), 0.0);
}

std::vector<Mat> GradBuf::to_mats(const Adapter& adapter) const {
    std::vector<Mat> out;
    for (size_t t = 0; t < g.size(); ++t) {
        Mat m(adapter.mats[t].rows, adapter.mats[t].cols);
        for (size_t i = 0; i < g[t].size(); ++i) m.data[i] = static_cast<float>(g[t][i]);
        out.push_back(std::move(m));
    }
    return out;
}

void backward_accumulate(const Adapter& adapter, std::span<const double> h,
                         std::span<const double> upstream, GradBuf& grads) {
    check_input(adapter, h.size());
    if (upstream.size() != h.size()) throw DimMismatch("backward: upstream dim mismatch");
    if (grads.g.size() != adapter.mats.size()) throw DimMismatch("backward: grad buffer mismatch");

    const int d_inner = adapter.d_inner;
    const int in_dim = adapter.in_dim;
    if (adapter.kind == AdapterKind::swiglu) {
        const Mat& w_gate = adapter.mats[0];
        const Mat& w_up = adapter.mats[1];
        const Mat& w_down = adapter.mats[2];
        const dvec g = matvec<double>(w_gate, h);
        const dvec u = matvec<double>(w_up, h);
        dvec inner(g.size());
        for (size_t i = 0; i < g.size(); ++i) inner[i] = gate_act(adapter.gate, g[i]) * u[i];
        // d_down[j][i] += upstream[j] * inner[i]
        for (int j = 0; j < in_dim; ++j) {
            const double uj = upstream[static_cast<size_t>(j)];
            if (uj == 0.0) continue;
            double* row = grads.g[2].data() + static_cast<size_t>(j) * d_inner;
            for (int i = 0; i < d_inner; ++i) row[i] += uj * inner[static_cast<size_t>(i)];
        }
        const dvec d_inner_vec = vecmat<double>(upstream, w_down); // dL/d inner
        for (int i = 0; i < d_inner; ++i) {
            const double di = d_inner_vec[static_cast<size_t>(i)];
            const double d_g = di * u[static_cast<size_t>(i)] *
                               gate_act_grad(adapter.gate, g[static_cast<size_t>(i)]);
            const double d_u = di * gate_act(adapter.gate, g[static_cast<size_t>(i)]);
            double* grow = grads.g[0].data() + static_cast<size_t>(i) * in_dim;
            double* urow = grads.g[1].data() + static_cast<size_t>(i) * in_dim;
            for (int j = 0; j < in_dim; ++j) {
                grow[j] += d_g * h[static_cast<size_t>(j)];
                urow[j] += d_u * h[static_cast<size_t>(j)];
            }
        }
    } else {
        const Mat& w_down = adapter.mats[0];
        const Mat& w_up = adapter.mats[1];
        const dvec bottleneck = matvec<double>(w_down, h);
        for (int j = 0; j < in_dim; ++j) {
            const double uj = upstream[static_cast<size_t>(j)];
            if (uj == 0.0) continue;
            double* row = grads.g[1].data() + static_cast<size_t>(j) * d_inner;
            for (int i = 0; i < d_inner; ++i) row[i] += uj * bottleneck[static_cast<size_t>(i)];
        }
        const dvec d_bottleneck = vecmat<double>(upstream, w_up);
        for (int i = 0; i < d_inner; ++i) {
            const double di = d_bottleneck[static_cast<size_t>(i)];
            if (di == 0.0) continue;
            double* row = grads.g[0].data() + static_cast<size_t>(i) * in_dim;
            for (int j = 0; j < in_dim; ++j) row[j] += di * h[static_cast<size_t>(j)];
        }
    }
}

std::vector<Mat> backward(const Adapter& adapter, std::span<const double> h,
                          std::span<const double> upstream) {
    GradBuf buf = GradBuf::zeros_like(adapter);
    backward_accumulate(adapter, h, upstream, buf);
    return buf.to_mats(adapter);
}

std::vector<Mat*> adapter_params(Adapter& adapter) {
    std::vector<Mat*> out;
    for (Mat& m : adapter.mats) out.push_back(&m);
    return out;
}

std::vector<float> flatten_params(const Adapter& adapter) {
    std::vector<float> flat;
    for (const Mat& m : adapter.mats) flat.insert(flat.end(), m.data.begin(), m.data.end());
    return flat;
}

void unflatten_params(Adapter& adapter, std::span<const float> flat) {
    size_t off = 0;
    for (Mat& m : adapter.mats) {
        if (off + m.size() > flat.size()) throw DimMismatch("unflatten_params: length mismatch");
        std::copy(flat.begin() + static_cast<long>(off),
                  flat.begin() + static_cast<long>(off + m.size()), m.data.begin());
        off += m.size();
    }
    if (off != flat.size()) throw DimMismatch("unflatten_params: length mismatch");
}

void save_adapter(const std::string& path, const Adapter& adapter) {
    BinWriter w;
    w.bytes("ADP1");
    w.u8(static_cast<uint8_t>(adapter.kind));
    w.u8(static_cast<uint8_t>(adapter.gate));
    w.u32(static_cast<uint32_t>(adapter.in_dim));
    w.u32(static_cast<uint32_t>(adapter.d_inner));
    w.u32(static_cast<uint32_t>(adapter.mats.size()));
    static const char* kSwigluNames[] = {"w_gate", "w_up", "w_down"};
    static const char* kLinearNames[] = {"w_down", "w_up"};
    const char** names = adapter.kind == AdapterKind::swiglu ? kSwigluNames : kLinearNames;
    for (size_t t = 0; t < adapter.mats.size(); ++t) w.named_mat(names[t], adapter.mats[t]);
    w.save(path);
}

Adapter load_adapter(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic("ADP1");
    Adapter a;
    const uint8_t kind = r.u8();
    if (kind > 2) throw ParseError(path + ": bad adapter kind");
    a.kind = static_cast<AdapterKind>(kind);
    const uint8_t gate = r.u8();
    if (gate > 1) throw ParseError(path + ": bad gate activation");
    a.gate = static_cast<GateActivation>(gate);
    a.in_dim = static_cast<int>(r.u32());
    a.d_inner = static_cast<int>(r.u32());
    const uint32_t n_mats = r.u32();
    const uint32_t expect = a.kind == AdapterKind::swiglu ? 3u : 2u;
    if (n_mats != expect) throw ParseError(path + ": wrong tensor count");
    for (uint32_t t = 0; t < n_mats; ++t) {
        r.str(r.u16()); // tensor name; order is fixed by kind
        a.mats.push_back(r.mat());
        check_finite(a.mats.back(), path);
    }
    if (!r.at_end()) throw ParseError(path + ": trailing bytes");
    // shape check against (in_dim, d_inner)
    const bool gated = a.kind == AdapterKind::swiglu;
    for (size_t t = 0; t < a.mats.size(); ++t) {
        const bool output_side = (gated && t == 2) || (!gated && t == 1);
        const int rows = output_side ? a.in_dim : a.d_inner;
        const int cols = output_side ? a.d_inner : a.in_dim;
        if (a.mats[t].rows != rows || a.mats[t].cols != cols)
            throw ParseError(path + ": tensor " + std::to_string(t) + " has wrong shape");
    }
    return a;
}

} // namespace postadapt
