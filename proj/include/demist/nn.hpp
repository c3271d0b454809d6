#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "demist/tape.hpp"

namespace demist {

// Named tensors partitioned into frozen and trainable subsets. The optimizer
// only ever writes through the trainable set; freeze audits hash the rest.
class ParamStore {
public:
    void insert(const std::string& name, Tensor t, bool trainable) {
        require(!entries_.count(name), "ParamStore: duplicate parameter " + name);
        entries_.emplace(name, std::move(t));
        if (trainable) trainable_.insert(name);
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    Tensor& at(const std::string& name) {
        auto it = entries_.find(name);
        require(it != entries_.end(), "ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "ParamStore: unknown parameter " + name);
        return it->second;
    }

    const std::map<std::string, Tensor>& entries() const { return entries_; }
    const std::set<std::string>& trainable() const { return trainable_; }
    bool is_trainable(const std::string& name) const { return trainable_.count(name) > 0; }

    void freeze_all() { trainable_.clear(); }
    void set_trainable(const std::string& name, bool t) {
        require(entries_.count(name) > 0, "ParamStore: unknown parameter " + name);
        if (t)
            trainable_.insert(name);
        else
            trainable_.erase(name);
    }

    size_t tensor_count() const { return entries_.size(); }
    int64_t scalar_count(bool trainable_only = false) const {
        int64_t n = 0;
        for (const auto& [name, t] : entries_)
            if (!trainable_only || trainable_.count(name)) n += t.numel();
        return n;
    }
    int64_t trainable_scalar_count() const { return scalar_count(true); }

    // Content hashes of every tensor NOT in the trainable set.
    std::map<std::string, uint64_t> frozen_hashes() const {
        std::map<std::string, uint64_t> out;
        for (const auto& [name, t] : entries_)
            if (!trainable_.count(name)) out[name] = t.content_hash();
        return out;
    }

private:
    std::map<std::string, Tensor> entries_;
    std::set<std::string> trainable_;
};

// Glob-style match: '*' matches any substring, '?' any single char.
bool glob_match(const std::string& pattern, const std::string& name);

// Re-partitions: trainable set becomes exactly the names matching any pattern.
// A pattern set matching zero names is an error (it would silently train nothing).
void partition_params(ParamStore& params, const std::vector<std::string>& patterns);

// Per-step graph context: parameter leaves are created once per tape and cached
// so every use of a parameter shares one node (gradients accumulate there).
struct GraphCtx {
    Tape& tape;
    ParamStore& params;
    bool train = true;

    GraphCtx(Tape& t, ParamStore& p, bool train_ = true) : tape(t), params(p), train(train_) {}

    Var p(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        bool rg = train && params.is_trainable(name);
        Var v = tape.leaf(params.at(name), rg);
        cache_.emplace(name, v);
        return v;
    }
    Var constant(Tensor t) { return tape.leaf(std::move(t), false); }

    // After backward: gradients of every trainable parameter that was touched.
    std::map<std::string, Tensor> trainable_grads() {
        std::map<std::string, Tensor> out;
        for (auto& [name, var] : cache_)
            if (tape.requires_grad(var)) out[name] = tape.grad(var);
        return out;
    }

    const std::map<std::string, Var>& touched() const { return cache_; }

private:
    std::map<std::string, Var> cache_;
};

// Substitutes a parameter fetch; used by LoRA to swap in W + (alpha/r) B A.
struct WeightHook {
    virtual ~WeightHook() = default;
    virtual Var fetch(GraphCtx& ctx, const std::string& name) const = 0;
};

inline Var fetch_weight(GraphCtx& ctx, const std::string& name, const WeightHook* hook) {
    return hook ? hook->fetch(ctx, name) : ctx.p(name);
}

// ---------------------------------------------------------------- layers

struct Conv3dLayer {
    std::string w, b;
    int stride = 1, pad = 1;

    static Conv3dLayer create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t ci,
                              int64_t co, int64_t k, int stride, int pad, bool zero_init = false);
    Var forward(GraphCtx& ctx, Var x) const {
        return ctx.tape.conv3d(x, ctx.p(w), ctx.p(b), stride, pad);
    }
};

struct LinearLayer {
    std::string w, b;  // w (in, out)

    static LinearLayer create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t in,
                              int64_t out, bool zero_init = false);
    Var forward(GraphCtx& ctx, Var x) const {
        return ctx.tape.add_row_bias(ctx.tape.matmul(x, ctx.p(w)), ctx.p(b));
    }
};

struct GroupNormLayer {
    std::string g, b;
    int groups = 8;

    static GroupNormLayer create(ParamStore& ps, const std::string& prefix, int64_t channels, int groups);
    Var forward(GraphCtx& ctx, Var x) const {
        return ctx.tape.group_norm(x, ctx.p(g), ctx.p(b), groups);
    }
};

// DDPM-style residual block: norm-silu-conv twice, timestep bias between.
struct ResBlock {
    GroupNormLayer n1, n2;
    Conv3dLayer c1, c2;
    LinearLayer time_proj;  // time embedding -> per-channel bias
    Conv3dLayer skip;       // 1x1x1 when cin != cout
    bool has_skip = false;
    int64_t cout = 0;

    static ResBlock create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t cin,
                           int64_t cout, int64_t time_dim, int groups);
    Var forward(GraphCtx& ctx, Var x, Var time_emb) const;
};

// Single-head self-attention over flattened voxels. Weight names are exposed
// so adapters can target them by pattern.
struct SelfAttention3d {
    GroupNormLayer norm;
    std::string wq, wk, wv, wo;
    int64_t ch = 0;

    static SelfAttention3d create(ParamStore& ps, Rng& rng, const std::string& prefix, int64_t ch,
                                  int groups);
    Var forward(GraphCtx& ctx, Var x, const WeightHook* hook = nullptr) const;
    std::vector<std::string> projection_names() const { return {wq, wk, wv, wo}; }
};

// ---------------------------------------------------------------- optimizer

// Adaptive-moment optimizer. Only names present in both the gradient map and
// the trainable set are updated; frozen tensors are structurally unreachable.
class AdamOptimizer {
public:
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamOptimizer(double lr_ = 1e-4) : lr(lr_) {}

    void step(ParamStore& params, const std::map<std::string, Tensor>& grads);

    int64_t step_count() const { return t_; }

    // state round-trip for checkpoint resume
    std::map<std::string, Tensor> export_state() const;
    void import_state(const std::map<std::string, Tensor>& state, int64_t step_count);

private:
    int64_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> mv_;
};

}  // namespace demist
