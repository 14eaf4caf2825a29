#include <doctest.h>

#include "testutil.hpp"

#include "dtmi/fusion.hpp"

using namespace dtmi;
using namespace dtmi::testutil;

TEST_CASE("channel attention: zero input, contraction, gradients") {
    Rng rng(40);
    Registry<double> reg;
    ChannelAttention<double> ca(reg, rng, "ca", 8);

    auto zero = make_tensor<double>({2, 8, 3, 3});
    auto zout = ca(zero);
    for (double v : zout->v) CHECK(v == 0.0);

    auto x = rand_tensor({2, 8, 3, 3}, rng, 1.0, false);
    auto out = ca(x);
    // per-channel scale strictly inside (0,1): |out| < |x| wherever x != 0
    for (std::size_t i = 0; i < x->v.size(); ++i) {
        if (x->v[i] != 0.0) {
            CHECK(std::abs(out->v[i]) < std::abs(x->v[i]));
            CHECK(out->v[i] * x->v[i] > 0.0);  // same sign
        }
    }

    CHECK_THROWS(ChannelAttention<double>(reg, rng, "bad", 2));  // C < reduction

    x->requires_grad = true;
    auto res = check_gradients([&] { return weighted_sum(ca(x), 60); },
                               {x, ca.fc1.w, ca.fc2.w, ca.fc2.b}, 1e-5, 1);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("channel attention is equivariant to channel permutation with permuted parameters") {
    Rng rng(41);
    Registry<double> reg;
    ChannelAttention<double> ca(reg, rng, "ca", 4);  // bottleneck width 1
    const std::vector<int> perm = {2, 0, 3, 1};

    Registry<double> reg2;
    ChannelAttention<double> cap(reg2, rng, "ca", 4);
    // fc1: [C, 1]; permute rows. fc2: [1, C]; permute columns and bias.
    for (int i = 0; i < 4; ++i) {
        cap.fc1.w->v[static_cast<std::size_t>(i)] =
            ca.fc1.w->v[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        cap.fc2.w->v[static_cast<std::size_t>(i)] =
            ca.fc2.w->v[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        cap.fc2.b->v[static_cast<std::size_t>(i)] =
            ca.fc2.b->v[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    cap.fc1.b->v = ca.fc1.b->v;  // bottleneck bias is shared (width 1)

    auto x = rand_tensor({2, 4, 3, 3}, rng, 1.0, false);
    auto xp = make_tensor<double>(x->shape);
    const std::size_t hw = 9;
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 4; ++c)
            for (std::size_t p = 0; p < hw; ++p)
                xp->v[(static_cast<std::size_t>(b) * 4 + static_cast<std::size_t>(c)) * hw + p] =
                    x->v[(static_cast<std::size_t>(b) * 4 +
                          static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])) * hw + p];

    auto base = ca(x);
    auto permuted = cap(xp);
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 4; ++c)
            for (std::size_t p = 0; p < hw; ++p)
                CHECK(permuted->v[(static_cast<std::size_t>(b) * 4 + static_cast<std::size_t>(c)) * hw + p] ==
                      doctest::Approx(base->v[(static_cast<std::size_t>(b) * 4 +
                                               static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])) * hw + p])
                          .epsilon(1e-12));
}

TEST_CASE("channel max degenerates to identity on single-channel input") {
    Rng rng(42);
    auto x = rand_tensor({2, 1, 4, 4}, rng, 1.0, false);
    auto m = channel_max(x);
    CHECK(m->shape == x->shape);
    for (std::size_t i = 0; i < x->v.size(); ++i) CHECK(m->v[i] == x->v[i]);
}

TEST_CASE("afe: zero input, magnitude bound, gradients") {
    Rng rng(43);
    Registry<double> reg;
    Afe<double> afe(reg, rng, "afe", 8);

    auto zero = make_tensor<double>({1, 8, 4, 4});
    auto zero_out = afe(zero);
    for (double v : zero_out->v) CHECK(v == 0.0);

    auto x = rand_tensor({2, 8, 4, 4}, rng, 2.0, false);
    auto out = afe(x);
    CHECK(out->shape == x->shape);
    for (std::size_t i = 0; i < x->v.size(); ++i)
        CHECK(std::abs(out->v[i]) <= std::abs(x->v[i]) + 1e-12);

    x->requires_grad = true;
    auto res = check_gradients([&] { return weighted_sum(afe(x), 61); },
                               {x, afe.spatial_conv.w, afe.ca.fc1.w}, 1e-5, 2);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("early fuse algebra") {
    Rng rng(44);
    auto fr = rand_tensor({1, 4, 3, 3}, rng, 1.0, false);
    auto zero = make_tensor<double>({1, 4, 3, 3});

    // zero branch -> identity
    auto with_zero = early_fuse(fr, zero);
    for (std::size_t i = 0; i < fr->v.size(); ++i) CHECK(with_zero->v[i] == fr->v[i]);

    // equal branches -> 2X + X^2
    auto doubled = early_fuse(fr, fr);
    for (std::size_t i = 0; i < fr->v.size(); ++i)
        CHECK(doubled->v[i] == doctest::Approx(2 * fr->v[i] + fr->v[i] * fr->v[i]).epsilon(1e-15));

    // commutative, exactly
    auto fd = rand_tensor({1, 4, 3, 3}, rng, 1.0, false);
    auto ab = early_fuse(fr, fd);
    auto ba = early_fuse(fd, fr);
    for (std::size_t i = 0; i < ab->v.size(); ++i) CHECK(ab->v[i] == ba->v[i]);

    auto other = make_tensor<double>({1, 4, 2, 2});
    CHECK_THROWS(early_fuse(fr, other));
}

TEST_CASE("gma gate: range, zeroed final layer, pooling invariance") {
    Rng rng(45);
    Registry<double> reg;
    Gma<double> gma(reg, rng, "gma", 8, 0.0);
    Ctx<double> ctx;

    auto f_rd = rand_tensor({3, 8, 4, 4}, rng, 3.0, false);
    auto f_dr = rand_tensor({3, 8, 4, 4}, rng, 3.0, false);
    auto g = gma.gate(f_rd, f_dr, ctx);
    CHECK(g->shape == Shape{3, 1});
    for (double v : g->v) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    // spatial permutation of both inputs leaves the gate unchanged
    auto permute_pixels = [&](const Tensor<double>& t) {
        auto out = make_tensor<double>(t->shape);
        const std::size_t hw = 16;
        for (std::size_t bc = 0; bc < t->numel() / hw; ++bc)
            for (std::size_t p = 0; p < hw; ++p)
                out->v[bc * hw + p] = t->v[bc * hw + (hw - 1 - p)];
        return out;
    };
    auto g2 = gma.gate(permute_pixels(f_rd), permute_pixels(f_dr), ctx);
    for (std::size_t i = 0; i < g->v.size(); ++i)
        CHECK(g2->v[i] == doctest::Approx(g->v[i]).epsilon(1e-12));

    // zeroed final layer -> sigmoid(gelu(0)) = 0.5 exactly
    std::fill(gma.fc2.w->v.begin(), gma.fc2.w->v.end(), 0.0);
    std::fill(gma.fc2.b->v.begin(), gma.fc2.b->v.end(), 0.0);
    auto g0 = gma.gate(f_rd, f_dr, ctx);
    for (double v : g0->v) CHECK(v == 0.5);
}

TEST_CASE("gma fuse: convex combination identities") {
    Rng rng(46);
    auto x = rand_tensor({2, 4, 3, 3}, rng, 1.0, false);
    auto g = make_tensor<double>({2, 1});
    g->v = {0.3, 0.8};

    // equal inputs pass through for any gate
    auto same = Gma<double>::fuse(x, x, g);
    for (std::size_t i = 0; i < x->v.size(); ++i)
        CHECK(same->v[i] == doctest::Approx(x->v[i]).epsilon(1e-12));

    // gate saturated at 1 selects the first branch
    auto y = rand_tensor({2, 4, 3, 3}, rng, 1.0, false);
    auto g1 = make_tensor<double>({2, 1});
    g1->v = {1.0 - 1e-12, 1.0 - 1e-12};
    auto sel = Gma<double>::fuse(x, y, g1);
    for (std::size_t i = 0; i < x->v.size(); ++i)
        CHECK(sel->v[i] == doctest::Approx(x->v[i]).epsilon(1e-9));

    // hand case: f_rd = 2, f_dr = 0, g = 0.25 -> 0.5 everywhere
    auto two = make_tensor<double>({1, 2, 2, 2}, 2.0);
    auto zero = make_tensor<double>({1, 2, 2, 2});
    auto quarter = make_tensor<double>({1, 1});
    quarter->v[0] = 0.25;
    auto fused = Gma<double>::fuse(two, zero, quarter);
    for (double v : fused->v) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS(Gma<double>::fuse(x, make_tensor<double>({2, 4, 2, 2}), g));
}

TEST_CASE("gma gradients flow through gate and fuse") {
    Rng rng(47);
    Registry<double> reg;
    Gma<double> gma(reg, rng, "gma", 4, 0.0);
    Ctx<double> ctx;
    auto f_rd = rand_tensor({1, 4, 2, 2}, rng);
    auto f_dr = rand_tensor({1, 4, 2, 2}, rng);
    auto res = check_gradients(
        [&] { return weighted_sum(gma(f_rd, f_dr, ctx), 62); },
        {f_rd, f_dr, gma.fc1.w, gma.fc2.w, gma.fc2.b}, 1e-5, 1);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("skip conv shapes: toy and paper geometry") {
    Rng rng(48);
    Registry<float> reg;
    SkipConv<float> skip(reg, rng, "skip", {32, 32, 64}, 32, 16);
    auto f1 = make_tensor<float>({2, 32, 16, 16});
    auto f2 = make_tensor<float>({2, 32, 16, 16});
    auto f3 = make_tensor<float>({2, 64, 8, 8});
    Rng fill(2);
    for (auto* t : {&f1, &f2, &f3})
        for (auto& v : (*t)->v) v = static_cast<float>(fill.uniform(-1, 1));
    NoGradGuard ng;
    auto out = skip(f1, f2, f3);
    CHECK(out->shape == Shape{2, 32, 16, 16});

    // all-zero inputs: bias-driven, finite
    auto z1 = make_tensor<float>({1, 32, 16, 16});
    auto z2 = make_tensor<float>({1, 32, 16, 16});
    auto z3 = make_tensor<float>({1, 64, 8, 8});
    auto zskip = skip(z1, z2, z3);
    for (float v : zskip->v) CHECK(std::isfinite(v));

    // paper geometry: stages (128,96),(128,96),(256,48) -> [B,128,96,96]
    Registry<float> reg2;
    SkipConv<float> paper(reg2, rng, "skip", {128, 128, 256}, 128, 96);
    auto p1 = make_tensor<float>({1, 128, 96, 96});
    auto p2 = make_tensor<float>({1, 128, 96, 96});
    auto p3 = make_tensor<float>({1, 256, 48, 48});
    CHECK(paper(p1, p2, p3)->shape == Shape{1, 128, 96, 96});
}
