#include "demist/nn.hpp"

#include <cmath>

namespace demist {

bool glob_match(const std::string& pattern, const std::string& name) {
    size_t p = 0, n = 0, star = std::string::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

void partition_params(ParamStore& params, const std::vector<std::string>& patterns) {
    std::set<std::string> matched;
    for (const auto& [name, t] : params.entries())
        for (const auto& pat : patterns)
            if (glob_match(pat, name)) {
                matched.insert(name);
                break;
            }
    if (matched.empty()) {
        std::string joined;
        for (const auto& p : patterns) joined += (joined.empty() ? "" : ", ") + p;
        throw ValueError("partition_params: no parameter matches patterns [" + joined + "]");
    }
    params.freeze_all();
    for (const auto& name : matched) params.set_trainable(name, true);
}

Conv3dLayer Conv3dLayer::create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t ci,
                                int64_t co, int64_t k, int stride, int pad, bool zero_init) {
    Conv3dLayer l;
    l.w = prefix + ".w";
    l.b = prefix + ".b";
    l.stride = stride;
    l.pad = pad;
    double std = zero_init ? 0.0 : std::sqrt(2.0 / static_cast<double>(ci * k * k * k));
    ps.insert(l.w, zero_init ? Tensor::zeros(Shape{co, ci, k, k, k})
                             : Tensor::randn(rng, Shape{co, ci, k, k, k}, std),
              true);
    ps.insert(l.b, Tensor::zeros(Shape{co}), true);
    return l;
}

LinearLayer LinearLayer::create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t in,
                                int64_t out, bool zero_init) {
    LinearLayer l;
    l.w = prefix + ".w";
    l.b = prefix + ".b";
    double std = zero_init ? 0.0 : std::sqrt(1.0 / static_cast<double>(in));
    ps.insert(l.w, zero_init ? Tensor::zeros(Shape{in, out}) : Tensor::randn(rng, Shape{in, out}, std),
              true);
    ps.insert(l.b, Tensor::zeros(Shape{out}), true);
    return l;
}

GroupNormLayer GroupNormLayer::create(ParamStore& ps, const std::string& prefix, int64_t channels,
                                      int groups) {
    require(channels % groups == 0, "GroupNorm: channels " + std::to_string(channels) +
                                        " not divisible by groups " + std::to_string(groups));
    GroupNormLayer l;
    l.g = prefix + ".g";
    l.b = prefix + ".b";
    l.groups = groups;
    ps.insert(l.g, Tensor::full(Shape{channels}, 1.0), true);
    ps.insert(l.b, Tensor::zeros(Shape{channels}), true);
    return l;
}

ResBlock ResBlock::create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t cin,
                          int64_t cout, int64_t time_dim, int groups) {
    ResBlock b;
    b.cout = cout;
    b.n1 = GroupNormLayer::create(ps, prefix + ".n1", cin, groups);
    b.c1 = Conv3dLayer::create(ps, rng, prefix + ".c1", cin, cout, 3, 1, 1);
    b.time_proj = LinearLayer::create(ps, rng, prefix + ".temb", time_dim, cout);
    b.n2 = GroupNormLayer::create(ps, prefix + ".n2", cout, groups);
    b.c2 = Conv3dLayer::create(ps, rng, prefix + ".c2", cout, cout, 3, 1, 1);
    b.has_skip = cin != cout;
    if (b.has_skip) b.skip = Conv3dLayer::create(ps, rng, prefix + ".skip", cin, cout, 1, 1, 0);
    return b;
}

Var ResBlock::forward(GraphCtx& ctx, Var x, Var time_emb) const {
    Tape& t = ctx.tape;
    Var h = c1.forward(ctx, t.silu(n1.forward(ctx, x)));
    Var tb = time_proj.forward(ctx, time_emb);           // (1, cout)
    h = t.add_channel_bias(h, t.reshape(tb, Shape{cout}));
    h = c2.forward(ctx, t.silu(n2.forward(ctx, h)));
    Var s = has_skip ? skip.forward(ctx, x) : x;
    return t.add(h, s);
}

SelfAttention3d SelfAttention3d::create(ParamStore& ps, Rng& rng, const std::string& prefix,
                                        int64_t ch, int groups) {
    SelfAttention3d a;
    a.ch = ch;
    a.norm = GroupNormLayer::create(ps, prefix + ".norm", ch, groups);
    double std = std::sqrt(1.0 / static_cast<double>(ch));
    a.wq = prefix + ".wq";
    a.wk = prefix + ".wk";
    a.wv = prefix + ".wv";
    a.wo = prefix + ".wo";
    ps.insert(a.wq, Tensor::randn(rng, Shape{ch, ch}, std), true);
    ps.insert(a.wk, Tensor::randn(rng, Shape{ch, ch}, std), true);
    ps.insert(a.wv, Tensor::randn(rng, Shape{ch, ch}, std), true);
    ps.insert(a.wo, Tensor::randn(rng, Shape{ch, ch}, std), true);
    return a;
}

Var SelfAttention3d::forward(GraphCtx& ctx, Var x, const WeightHook* hook) const {
    Tape& t = ctx.tape;
    const Shape s = t.val(x).shape();  // copy: node storage may reallocate
    int64_t C = s[0], M = s[1] * s[2] * s[3];
    Var xn = norm.forward(ctx, x);
    Var flat = t.transpose(t.reshape(xn, Shape{C, M}));  // (M, C)
    Var q = t.matmul(flat, fetch_weight(ctx, wq, hook));
    Var k = t.matmul(flat, fetch_weight(ctx, wk, hook));
    Var v = t.matmul(flat, fetch_weight(ctx, wv, hook));
    Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(C)));
    Var att = t.softmax_rows(scores);
    Var o = t.matmul(att, v);
    o = t.matmul(o, fetch_weight(ctx, wo, hook));
    Var back = t.reshape(t.transpose(o), s);
    return t.add(x, back);
}

void AdamOptimizer::step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        if (!params.is_trainable(name)) continue;
        Tensor& w = params.at(name);
        require(same_shape(w.shape(), g.shape()), "Adam: grad shape mismatch for " + name);
        auto it = mv_.find(name);
        if (it == mv_.end())
            it = mv_.emplace(name, std::make_pair(Tensor::zeros(w.shape()), Tensor::zeros(w.shape())))
                     .first;
        Tensor& m = it->second.first;
        Tensor& v = it->second.second;
        for (int64_t i = 0; i < w.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

std::map<std::string, Tensor> AdamOptimizer::export_state() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, mv] : mv_) {
        out["adam.m." + name] = mv.first;
        out["adam.v." + name] = mv.second;
    }
    return out;
}

void AdamOptimizer::import_state(const std::map<std::string, Tensor>& state, int64_t step_count) {
    t_ = step_count;
    mv_.clear();
    for (const auto& [key, t] : state) {
        if (key.rfind("adam.m.", 0) == 0) {
            mv_[key.substr(7)].first = t;
        } else if (key.rfind("adam.v.", 0) == 0) {
            mv_[key.substr(7)].second = t;
        }
    }
}

}  // namespace demist
