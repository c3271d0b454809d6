#include "doctest.h"

#include <cmath>

#include "demist/nn.hpp"
#include "demist/tape.hpp"
#include "test_util.hpp"

using namespace demist;

namespace {

// gradcheck scaffold: builds the graph via `build`, runs backward, compares
// every touched trainable parameter against central differences.
double gradcheck(ParamStore& params, const std::function<Var(GraphCtx&)>& build, int samples = 4) {
    Tape tape;
    GraphCtx ctx{tape, params};
    Var loss = build(ctx);
    tape.backward(loss);
    auto grads = ctx.trainable_grads();
    REQUIRE(!grads.empty());
    auto loss_fn = [&]() {
        Tape t2;
        GraphCtx c2{t2, params};
        c2.train = false;
        return t2.val(build(c2))[0];
    };
    return testutil::max_fd_rel_err(params, loss_fn, grads, samples, 99);
}

}  // namespace

TEST_SUITE("tape") {
    TEST_CASE("add/mul/scale values") {
        Tape t;
        Var a = t.leaf(Tensor::full(Shape{4}, 2.0));
        Var b = t.leaf(Tensor::full(Shape{4}, 3.0));
        CHECK(t.val(t.add(a, b))[0] == doctest::Approx(5.0));
        CHECK(t.val(t.mul(a, b))[2] == doctest::Approx(6.0));
        CHECK(t.val(t.scale(a, -1.5))[3] == doctest::Approx(-3.0));
    }

    TEST_CASE("backward through product rule") {
        Tape t;
        Var a = t.leaf(Tensor::full(Shape{1}, 3.0), true);
        Var b = t.leaf(Tensor::full(Shape{1}, 4.0), true);
        Var y = t.mul(a, b);
        t.backward(y);
        CHECK(t.grad(a)[0] == doctest::Approx(4.0));
        CHECK(t.grad(b)[0] == doctest::Approx(3.0));
    }

    TEST_CASE("conv3d stride1 matches direct stencil on identity kernel") {
        Rng rng(7);
        Tensor x = Tensor::randn(rng, Shape{2, 5, 5, 5});
        Tensor w = Tensor::zeros(Shape{2, 2, 3, 3, 3});
        // kernel = delta at center, channel-diagonal
        for (int64_t c = 0; c < 2; ++c) w[(c * 2 + c) * 27 + 13] = 1.0;
        Tape t;
        Var xv = t.leaf(x);
        Var wv = t.leaf(w);
        Var out = t.conv3d(xv, wv, Var{}, 1, 1);
        const Tensor& o = t.val(out);
        REQUIRE(o.shape() == x.shape());
        for (int64_t i = 0; i < o.numel(); ++i) CHECK(o[i] == doctest::Approx(x[i]));
    }

    TEST_CASE("conv3d stride2 output dims") {
        Rng rng(3);
        Tensor x = Tensor::randn(rng, Shape{3, 8, 8, 8});
        Tensor w = Tensor::randn(rng, Shape{5, 3, 3, 3, 3}, 0.1);
        Tape t;
        Var out = t.conv3d(t.leaf(x), t.leaf(w), Var{}, 2, 1);
        CHECK(t.val(out).shape() == Shape{5, 4, 4, 4});
    }

    TEST_CASE("gradcheck conv3d stride1 with bias") {
        Rng rng(11);
        ParamStore ps;
        auto conv = Conv3dLayer::create(ps, rng, "c", 2, 3, 3, 1, 1);
        Tensor x = Tensor::randn(rng, Shape{2, 4, 4, 4});
        Tensor tgt = Tensor::randn(rng, Shape{3, 4, 4, 4});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.mse(conv.forward(ctx, ctx.constant(x)), ctx.constant(tgt));
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("gradcheck conv3d stride2") {
        Rng rng(12);
        ParamStore ps;
        auto conv = Conv3dLayer::create(ps, rng, "c", 3, 4, 3, 2, 1);
        Tensor x = Tensor::randn(rng, Shape{3, 6, 6, 6});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.mean_sq(conv.forward(ctx, ctx.constant(x)));
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("gradcheck conv3d 1x1x1") {
        Rng rng(13);
        ParamStore ps;
        auto conv = Conv3dLayer::create(ps, rng, "c", 4, 2, 1, 1, 0);
        Tensor x = Tensor::randn(rng, Shape{4, 3, 3, 3});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.mean_sq(conv.forward(ctx, ctx.constant(x)));
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("gradcheck input gradient through conv") {
        Rng rng(14);
        ParamStore ps;
        ps.insert("x", Tensor::randn(rng, Shape{2, 4, 4, 4}), true);
        Tensor w = Tensor::randn(rng, Shape{3, 2, 3, 3, 3}, 0.2);
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.mean_sq(ctx.tape.conv3d(ctx.p("x"), ctx.constant(w), Var{}, 1, 1));
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("gradcheck group_norm") {
        Rng rng(15);
        ParamStore ps;
        auto gn = GroupNormLayer::create(ps, "gn", 4, 2);
        ps.insert("x", Tensor::randn(rng, Shape{4, 3, 3, 3}), true);
        Tensor tgt = Tensor::randn(rng, Shape{4, 3, 3, 3});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.mse(gn.forward(ctx, ctx.p("x")), ctx.constant(tgt));
        });
        CHECK(err < 1e-4);
    }

    TEST_CASE("gradcheck silu + linear + softmax chain") {
        Rng rng(16);
        ParamStore ps;
        auto lin = LinearLayer::create(ps, rng, "l", 5, 4);
        Tensor x = Tensor::randn(rng, Shape{3, 5});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            Var h = lin.forward(ctx, ctx.constant(x));
            h = ctx.tape.silu(h);
            h = ctx.tape.softmax_rows(h);
            return ctx.tape.mean_sq(h);
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("gradcheck self-attention block") {
        Rng rng(17);
        ParamStore ps;
        auto attn = SelfAttention3d::create(ps, rng, "a", 4, 2);
        Tensor x = Tensor::randn(rng, Shape{4, 2, 2, 2});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.mean_sq(attn.forward(ctx, ctx.constant(x)));
        });
        CHECK(err < 1e-4);
    }

    TEST_CASE("gradcheck upsample/avg_pool/concat/slice") {
        Rng rng(18);
        ParamStore ps;
        ps.insert("x", Tensor::randn(rng, Shape{2, 4, 4, 4}), true);
        ps.insert("y", Tensor::randn(rng, Shape{2, 4, 4, 4}), true);
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            Tape& t = ctx.tape;
            Var up = t.upsample_nearest2(t.avg_pool3d(ctx.p("x"), 2));  // (2,4,4,4)
            Var cat = t.concat_ch(up, ctx.p("y"));                      // (4,4,4,4)
            Var sl = t.slice_ch(cat, 1, 3);
            return t.l1(sl, ctx.constant(Tensor::zeros(Shape{2, 4, 4, 4})));
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("gradcheck sobel magnitude") {
        Rng rng(19);
        ParamStore ps;
        ps.insert("x", Tensor::randn(rng, Shape{1, 4, 4, 4}), true);
        Tensor tgt = Tensor::randn(rng, Shape{1, 4, 4, 4});
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            return ctx.tape.l1(ctx.tape.sobel_mag(ctx.p("x")), ctx.tape.sobel_mag(ctx.constant(tgt)));
        });
        CHECK(err < 1e-4);
    }

    TEST_CASE("gradcheck exp/add_scalar composition (KL-style)") {
        Rng rng(20);
        ParamStore ps;
        ps.insert("mu", Tensor::randn(rng, Shape{8}), true);
        ps.insert("h", Tensor::randn(rng, Shape{8}, 0.3), true);
        double err = gradcheck(ps, [&](GraphCtx& ctx) {
            Tape& t = ctx.tape;
            Var mu = ctx.p("mu"), h = ctx.p("h");
            Var term = t.sub(t.add(t.mul(mu, mu), t.exp_(t.scale(h, 2.0))),
                             t.add_scalar(t.scale(h, 2.0), 1.0));
            return t.scale(t.mean_all(term), 0.5);
        });
        CHECK(err < 1e-5);
    }

    TEST_CASE("softmax rows sum to one") {
        Rng rng(21);
        Tape t;
        Var s = t.softmax_rows(t.leaf(Tensor::randn(rng, Shape{6, 9})));
        const Tensor& y = t.val(s);
        for (int64_t r = 0; r < 6; ++r) {
            double sum = 0.0;
            for (int64_t c = 0; c < 9; ++c) sum += y.at2(r, c);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }

    TEST_CASE("glob_match") {
        CHECK(glob_match("lora.*", "lora.unet.enc1.attn.wq.A"));
        CHECK(!glob_match("lora.*", "unet.enc1.attn.wq"));
        CHECK(glob_match("*.attn.*", "unet.enc1.attn.wq"));
        CHECK(glob_match("unet.enc?.c1.w", "unet.enc0.c1.w"));
    }

    TEST_CASE("partition_params rejects empty match") {
        Rng rng(22);
        ParamStore ps;
        ps.insert("unet.a", Tensor::randn(rng, Shape{2}), true);
        CHECK_THROWS_AS(partition_params(ps, {"lora.*"}), ValueError);
        partition_params(ps, {"unet.*"});
        CHECK(ps.is_trainable("unet.a"));
    }

    TEST_CASE("adam does not touch frozen params") {
        Rng rng(23);
        ParamStore ps;
        ps.insert("w.train", Tensor::randn(rng, Shape{4}), true);
        ps.insert("w.frozen", Tensor::randn(rng, Shape{4}), false);
        uint64_t h0 = ps.at("w.frozen").content_hash();
        AdamOptimizer opt(1e-2);
        std::map<std::string, Tensor> grads;
        grads["w.train"] = Tensor::full(Shape{4}, 1.0);
        grads["w.frozen"] = Tensor::full(Shape{4}, 1.0);  // must be ignored
        opt.step(ps, grads);
        CHECK(ps.at("w.frozen").content_hash() == h0);
        CHECK(ps.at("w.train")[0] != doctest::Approx(0.0));
    }
}
