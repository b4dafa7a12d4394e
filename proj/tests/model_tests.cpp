#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmvit/flops.hpp"
#include "mmvit/harness.hpp"
#include "mmvit/model.hpp"
#include "test_util.hpp"

using namespace mmvit;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

// Definitional key predicate, written from the scope descriptions rather
// than from scope_keys, so the two can disagree.
bool allowed(const FieldDims& dims, const AttentionScope& sc, int s, int t, int p, int ks, int kt, int kp) {
    const int py = p / dims.gw, px = p % dims.gw;
    const int ky = kp / dims.gw, kx = kp % dims.gw;
    switch (sc.axis) {
        case ScopeAxis::JointAll: return true;
        case ScopeAxis::TimeAcrossModalities: return kp == p;
        case ScopeAxis::SpaceAcrossModalities: return kt == t;
        case ScopeAxis::TimeWithin: return ks == s && kp == p;
        case ScopeAxis::SpaceWithin: return ks == s && kt == t;
        case ScopeAxis::ModalityMerged: return kt == t && kp == p;
        case ScopeAxis::ModalityCo: return kt == t && kp == p && ks != s;
        case ScopeAxis::LocalTime: return ks == s && kp == p && kt / sc.win.F == t / sc.win.F;
        case ScopeAxis::LocalSpace:
            return ks == s && kt == t && ky / sc.win.mh == py / sc.win.mh && kx / sc.win.mw == px / sc.win.mw;
    }
    return false;
}

struct MsaFixture {
    std::vector<Tensor> wq, wk, wv;
    Tensor wo;
    MsaFixture(int d, int h, int dh, Rng& rng) {
        for (int i = 0; i < h; ++i) {
            wq.push_back(random_tensor({dh, d}, rng, 0.4));
            wk.push_back(random_tensor({dh, d}, rng, 0.4));
            wv.push_back(random_tensor({dh, d}, rng, 0.4));
        }
        wo = random_tensor({d, h * dh}, rng, 0.4);
    }
    MsaParams enter(Tape& tape) const {
        MsaParams p;
        for (const Tensor& t : wq) p.wq.push_back(tape.leaf(t));
        for (const Tensor& t : wk) p.wk.push_back(tape.leaf(t));
        for (const Tensor& t : wv) p.wv.push_back(tape.leaf(t));
        p.wo = tape.leaf(wo);
        return p;
    }
};

// Everything-by-hand attention: scores, masked softmax, weighted sums, head
// concat, output projection, CLS sidelining. Deliberately written as plain
// loops over (s, t, p) triples.
Tensor msa_oracle(const Tensor& x, const FieldDims& dims, const AttentionScope& sc, bool cls_in,
                  const MsaFixture& fix, double shift, Tensor* attn_avg) {
    const int R = dims.rows(), d = dims.d;
    const int h = int(fix.wq.size()), dh = fix.wq[0].rows();
    const int cls = dims.cls();

    auto key_ok = [&](int qr, int kr) {
        if (qr == cls) return cls_in || kr == cls;
        if (kr == cls) return cls_in;
        int qs = qr / (dims.T * dims.N), qrem = qr % (dims.T * dims.N);
        int ks = kr / (dims.T * dims.N), krem = kr % (dims.T * dims.N);
        return allowed(dims, sc, qs, qrem / dims.N, qrem % dims.N, ks, krem / dims.N, krem % dims.N);
    };

    Tensor concat({R, h * dh});
    if (attn_avg) *attn_avg = Tensor({R, R});
    for (int i = 0; i < h; ++i) {
        Tensor q({R, dh}), k({R, dh}), v({R, dh});
        for (int r = 0; r < R; ++r)
            for (int a = 0; a < dh; ++a) {
                double sq = 0, sk = 0, sv = 0;
                for (int c = 0; c < d; ++c) {
                    sq += x.at(r, c) * fix.wq[size_t(i)].at(a, c);
                    sk += x.at(r, c) * fix.wk[size_t(i)].at(a, c);
                    sv += x.at(r, c) * fix.wv[size_t(i)].at(a, c);
                }
                q.at(r, a) = sq;
                k.at(r, a) = sk;
                v.at(r, a) = sv;
            }
        for (int r = 0; r < R; ++r) {
            std::vector<double> w(size_t(R), 0.0);
            double mx = -1e300;
            for (int c = 0; c < R; ++c) {
                if (!key_ok(r, c)) continue;
                double s = 0;
                for (int a = 0; a < dh; ++a) s += q.at(r, a) * k.at(c, a);
                s = s / std::sqrt(double(dh)) + shift;
                w[size_t(c)] = s;
                mx = std::max(mx, s);
            }
            double z = 0;
            for (int c = 0; c < R; ++c)
                if (key_ok(r, c)) z += std::exp(w[size_t(c)] - mx);
            for (int c = 0; c < R; ++c) {
                const double p = key_ok(r, c) ? std::exp(w[size_t(c)] - mx) / z : 0.0;
                if (attn_avg) attn_avg->at(r, c) += p / h;
                for (int a = 0; a < dh; ++a) concat.at(r, i * dh + a) += p * v.at(c, a);
            }
        }
    }

    Tensor out({R, d});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < d; ++c) {
            double s = 0;
            for (int a = 0; a < h * dh; ++a) s += concat.at(r, a) * fix.wo.at(c, a);
            out.at(r, c) = s;
        }
    if (!cls_in)
        for (int c = 0; c < d; ++c) out.at(cls, c) = 0.0;
    return out;
}

TokenField make_field(Tape& tape, const Tensor& rows, const FieldDims& dims) {
    return TokenField{tape.leaf(rows), dims};
}

CompressedClip make_clip(uint64_t seed, int T, int H, int W) {
    Rng rng(seed);
    CompressedClip clip;
    clip.label = int(seed % 8);
    clip.iframes = Tensor({T, 3, H, W});
    clip.motion = Tensor({T, 2, H, W});
    clip.residuals = Tensor({T, 3, H, W});
    clip.audio = Tensor({T, kAudioFeatureDim});
    clip.iframes.fill_uniform(rng, 0.0, 1.0);
    clip.motion.fill_uniform(rng, -3.0, 3.0);
    clip.residuals.fill_uniform(rng, -0.5, 0.5);
    clip.audio.fill_normal(rng, 0.0, 1.0);
    clip.validate();
    return clip;
}

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.variant = Variant::FactorThreeWay;
    cfg.mca = McaKind::Merged;
    cfg.T = 2;
    cfg.H = cfg.W = 32;
    cfg.P = 16;
    cfg.d = 8;
    cfg.h = 2;
    cfg.L = 2;
    return cfg;
}

Tensor forward_logits(const MmvitModel& model, const PreparedClip& clip, double shift = 0.0,
                      ForwardTrace* trace = nullptr) {
    Tape tape;
    return model.forward(tape, clip, kKeepAll, trace, shift).logits.val();
}

std::vector<AttentionScope> all_scopes(const WindowGeometry& win) {
    return {{ScopeAxis::JointAll, {}},       {ScopeAxis::TimeAcrossModalities, {}},
            {ScopeAxis::SpaceAcrossModalities, {}}, {ScopeAxis::TimeWithin, {}},
            {ScopeAxis::SpaceWithin, {}},    {ScopeAxis::ModalityMerged, {}},
            {ScopeAxis::ModalityCo, {}},     {ScopeAxis::LocalTime, win},
            {ScopeAxis::LocalSpace, win}};
}

}  // namespace

// ---- scopes and masks ----

TEST_CASE("scope keys match the definitional predicate everywhere") {
    const FieldDims dims{4, 4, 4, 8, 2, 2};
    const WindowGeometry win{2, 1, 2};
    for (const AttentionScope& sc : all_scopes(win)) {
        for (int s = 0; s < dims.S; ++s)
            for (int t = 0; t < dims.T; ++t)
                for (int p = 0; p < dims.N; ++p) {
                    std::vector<int> want;
                    for (int ks = 0; ks < dims.S; ++ks)
                        for (int kt = 0; kt < dims.T; ++kt)
                            for (int kp = 0; kp < dims.N; ++kp)
                                if (allowed(dims, sc, s, t, p, ks, kt, kp)) want.push_back(dims.row(ks, kt, kp));
                    CHECK(scope_keys(dims, sc, s, t, p) == want);
                    CHECK(scope_cardinality(dims, sc) == int(want.size()));
                }
    }
}

TEST_CASE("scope masks: joint structure, CLS policy, co needs company") {
    const FieldDims dims{2, 2, 2, 4, 1, 2};
    const int R = dims.rows();

    ScopeMask all = build_scope_mask(dims, {ScopeAxis::JointAll, {}}, true);
    CHECK(all.rows == R);
    CHECK(all.cls_in_stage);
    for (uint8_t b : *all.keys) CHECK(b == 1);

    ScopeMask out = build_scope_mask(dims, {ScopeAxis::JointAll, {}}, false);
    for (int r = 0; r < R - 1; ++r) {
        for (int c = 0; c < R - 1; ++c) CHECK((*out.keys)[size_t(r) * R + c] == 1);
        CHECK((*out.keys)[size_t(r) * R + R - 1] == 0);  // field queries lose the CLS key
    }
    for (int c = 0; c < R; ++c) CHECK((*out.keys)[size_t(R - 1) * R + c] == (c == R - 1 ? 1 : 0));

    const FieldDims lone{1, 2, 2, 4, 1, 2};
    CHECK_THROWS_AS(build_scope_mask(lone, {ScopeAxis::ModalityCo, {}}, true), ConfigError);
}

// ---- attention kernel ----

TEST_CASE("attention equals the hand-rolled loop oracle on every scope") {
    struct Case {
        FieldDims dims;
        WindowGeometry win;
        int h, dh;
        uint64_t seed;
    };
    const std::vector<Case> cases = {
        {{4, 4, 4, 8, 2, 2}, {2, 1, 2}, 2, 3, 11},
        {{2, 2, 1, 6, 1, 1}, {1, 1, 1}, 3, 2, 12},
        {{1, 3, 9, 4, 3, 3}, {3, 3, 3}, 1, 4, 13},
    };
    for (const Case& cs : cases) {
        Rng rng(cs.seed);
        Tensor rows = random_tensor({cs.dims.rows(), cs.dims.d}, rng, 0.7);
        MsaFixture fix(cs.dims.d, cs.h, cs.dh, rng);
        for (const AttentionScope& sc : all_scopes(cs.win)) {
            if (sc.axis == ScopeAxis::ModalityCo && cs.dims.S < 2) continue;
            for (bool cls_in : {true, false}) {
                Tape tape;
                TokenField field = make_field(tape, rows, cs.dims);
                ScopeMask mask = build_scope_mask(cs.dims, sc, cls_in);
                Tensor attn;
                Value got = msa(field, mask, fix.enter(tape), 0.3, &attn);
                Tensor want_attn;
                Tensor want = msa_oracle(rows, cs.dims, sc, cls_in, fix, 0.3, &want_attn);
                CHECK(max_abs_diff(got.val(), want) < 1e-10);
                CHECK(max_abs_diff(attn, want_attn) < 1e-10);
                if (!cls_in) {  // sidelined CLS reads as a pass-through in the trace
                    for (int c = 0; c < cs.dims.rows(); ++c)
                        CHECK(attn.at(cs.dims.cls(), c) == (c == cs.dims.cls() ? 1.0 : 0.0));
                }
            }
        }
    }
}

TEST_CASE("zero query/key projections average the scope uniformly") {
    const FieldDims dims{2, 2, 2, 4, 1, 2};
    Rng rng(21);
    Tensor rows = random_tensor({dims.rows(), dims.d}, rng);

    Tape tape;
    TokenField field = make_field(tape, rows, dims);
    MsaParams p;
    Tensor eye({dims.d, dims.d});
    for (int i = 0; i < dims.d; ++i) eye.at(i, i) = 1.0;
    p.wq.push_back(tape.leaf(Tensor({dims.d, dims.d})));
    p.wk.push_back(tape.leaf(Tensor({dims.d, dims.d})));
    p.wv.push_back(tape.leaf(eye));
    p.wo = tape.leaf(eye);

    ScopeMask mask = build_scope_mask(dims, {ScopeAxis::TimeWithin, {}}, false);
    Tensor got = msa(field, mask, p).val();
    for (int s = 0; s < dims.S; ++s)
        for (int t = 0; t < dims.T; ++t)
            for (int p2 = 0; p2 < dims.N; ++p2)
                for (int c = 0; c < dims.d; ++c) {
                    double want = 0;
                    for (int kt = 0; kt < dims.T; ++kt) want += rows.at(dims.row(s, kt, p2), c) / dims.T;
                    CHECK(std::abs(got.at(dims.row(s, t, p2), c) - want) < 1e-12);
                }
    for (int c = 0; c < dims.d; ++c) CHECK(got.at(dims.cls(), c) == 0.0);
}

TEST_CASE("degenerate scopes: self-only merged, single-key co") {
    Rng rng(31);
    {  // one modality: merged keys collapse to the query itself
        const FieldDims dims{1, 2, 2, 4, 1, 2};
        Tensor rows = random_tensor({dims.rows(), dims.d}, rng);
        MsaFixture fix(dims.d, 2, 2, rng);
        Tape tape;
        TokenField field = make_field(tape, rows, dims);
        ScopeMask mask = build_scope_mask(dims, {ScopeAxis::ModalityMerged, {}}, false);
        Tensor attn;
        Tensor got = msa(field, mask, fix.enter(tape), 0.0, &attn).val();
        for (int r = 0; r < dims.tokens(); ++r) {
            CHECK(std::abs(attn.at(r, r) - 1.0) < 1e-12);
            for (int c = 0; c < dims.d; ++c) {
                double want = 0;  // v_r through wo, attention pinned on self
                for (int i = 0; i < 2; ++i)
                    for (int a = 0; a < 2; ++a) {
                        double v = 0;
                        for (int k = 0; k < dims.d; ++k) v += rows.at(r, k) * fix.wv[size_t(i)].at(a, k);
                        want += v * fix.wo.at(c, i * 2 + a);
                    }
                CHECK(std::abs(got.at(r, c) - want) < 1e-12);
            }
        }
    }
    {  // two modalities: co attention has exactly one key, the other stream
        const FieldDims dims{2, 2, 2, 4, 1, 2};
        Tensor rows = random_tensor({dims.rows(), dims.d}, rng);
        MsaFixture fix(dims.d, 1, 3, rng);
        Tape tape;
        TokenField field = make_field(tape, rows, dims);
        ScopeMask mask = build_scope_mask(dims, {ScopeAxis::ModalityCo, {}}, false);
        Tensor attn;
        Tensor got = msa(field, mask, fix.enter(tape), 0.0, &attn).val();
        for (int s = 0; s < 2; ++s)
            for (int t = 0; t < 2; ++t)
                for (int p = 0; p < 2; ++p) {
                    const int r = dims.row(s, t, p), other = dims.row(1 - s, t, p);
                    CHECK(attn.at(r, other) == 1.0);
                    for (int c = 0; c < dims.d; ++c) {
                        double want = 0;
                        for (int a = 0; a < 3; ++a) {
                            double v = 0;
                            for (int k = 0; k < dims.d; ++k) v += rows.at(other, k) * fix.wv[0].at(a, k);
                            want += v * fix.wo.at(c, a);
                        }
                        CHECK(std::abs(got.at(r, c) - want) < 1e-12);
                    }
                }
    }
}

TEST_CASE("constant score shifts never change attention output") {
    const FieldDims dims{4, 2, 4, 8, 2, 2};
    Rng rng(41);
    Tensor rows = random_tensor({dims.rows(), dims.d}, rng);
    MsaFixture fix(dims.d, 2, 4, rng);
    ScopeMask mask = build_scope_mask(dims, {ScopeAxis::JointAll, {}}, true);

    Tape t1, t2;
    Tensor a1, a2;
    Tensor o1 = msa(make_field(t1, rows, dims), mask, fix.enter(t1), 0.0, &a1).val();
    Tensor o2 = msa(make_field(t2, rows, dims), mask, fix.enter(t2), 4.5, &a2).val();
    CHECK(max_abs_diff(o1, o2) < 1e-12);
    CHECK(max_abs_diff(a1, a2) < 1e-12);
}

TEST_CASE("single-token fields make every scope identical") {
    const FieldDims dims{1, 1, 1, 4, 1, 1};
    Rng rng(51);
    Tensor rows = random_tensor({2, 4}, rng);
    MsaFixture fix(4, 2, 2, rng);
    const WindowGeometry win{1, 1, 1};
    Tensor base;
    for (const AttentionScope& sc : all_scopes(win)) {
        if (sc.axis == ScopeAxis::ModalityCo) continue;
        Tape tape;
        ScopeMask mask = build_scope_mask(dims, sc, true);
        Tensor got = msa(make_field(tape, rows, dims), mask, fix.enter(tape)).val();
        if (base.numel() == 0)
            base = got;
        else
            CHECK(max_abs_diff(base, got) == 0.0);
    }
}

TEST_CASE("attention gradients against finite differences") {
    const FieldDims dims{2, 2, 2, 4, 1, 2};
    Rng rng(61);
    Tensor rows = random_tensor({dims.rows(), dims.d}, rng, 0.5);
    MsaFixture fix(dims.d, 2, 2, rng);
    ScopeMask mask = build_scope_mask(dims, {ScopeAxis::SpaceAcrossModalities, {}}, true);

    std::vector<Tensor> inputs = {rows};
    for (int i = 0; i < 2; ++i) {
        inputs.push_back(fix.wq[size_t(i)]);
        inputs.push_back(fix.wk[size_t(i)]);
        inputs.push_back(fix.wv[size_t(i)]);
    }
    inputs.push_back(fix.wo);
    auto rep = check_gradients(inputs, [&](Tape& tape, const std::vector<Value>& v) {
        TokenField field{v[0], dims};
        MsaParams p;
        p.wq = {v[1], v[4]};
        p.wk = {v[2], v[5]};
        p.wv = {v[3], v[6]};
        p.wo = v[7];
        return sum(mul(msa(field, mask, p), v[0]));
    }, 10, 62);
    CHECK(rep.max_rel < 1e-5);
}

// ---- shift-merge ----

TEST_CASE("shift-merge: hand case, constants, zeros, preconditions") {
    const FieldDims dims{4, 1, 1, 4, 1, 1};
    Tensor rows({5, 4});
    for (int s = 0; s < 4; ++s)
        for (int c = 0; c < 4; ++c) rows.at(s, c) = 4 * s + c + 1;
    for (int c = 0; c < 4; ++c) rows.at(4, c) = 100 + c;  // CLS sentinel

    Tape tape;
    Tensor got = mca_shift_merge(make_field(tape, rows, dims)).val();
    const double want[4][4] = {{2, 7, 12, 17}, {7, 12, 17, 22}, {12, 17, 22, 27}, {17, 22, 27, 32}};
    for (int s = 0; s < 4; ++s)
        for (int c = 0; c < 4; ++c) CHECK(got.at(s, c) == want[s][c]);
    for (int c = 0; c < 4; ++c) CHECK(got.at(4, c) == 100 + c);  // CLS passes through

    {  // constant field: every mixed token equals the constant, so out = 2c
        Tensor cfield = Tensor::full({5, 4}, 1.5);
        Tape t2;
        Tensor out = mca_shift_merge(make_field(t2, cfield, dims)).val();
        for (int s = 0; s < 4; ++s)
            for (int c = 0; c < 4; ++c) CHECK(out.at(s, c) == 3.0);
    }
    {  // zero stays zero, and the mix alone has a zero CLS row
        Tape t2;
        Tensor mix = shift_merge_mix(make_field(t2, rows, dims)).val();
        for (int c = 0; c < 4; ++c) CHECK(mix.at(4, c) == 0.0);
        Tape t3;
        Tensor out = mca_shift_merge(make_field(t3, Tensor({5, 4}), dims)).val();
        CHECK(max_abs_diff(out, Tensor({5, 4})) == 0.0);
    }

    Tape t4;
    const FieldDims two{2, 1, 1, 4, 1, 1};
    CHECK_THROWS_AS(shift_merge_mix(make_field(t4, Tensor({3, 4}), two)), ConfigError);
    const FieldDims odd{4, 1, 1, 6, 1, 1};
    CHECK_THROWS_AS(shift_merge_mix(make_field(t4, Tensor({5, 6}), odd)), ConfigError);
}

TEST_CASE("shift-merge moves each basis direction to one modality per chunk") {
    // A basis vector placed in quarter j of modality i must surface in
    // exactly one output slot: chunk i of output modality j.
    const FieldDims dims{4, 1, 1, 8, 1, 1};
    Tensor rows({5, 8});
    rows.at(1, 4) = 1.0;  // modality 1, first channel of quarter 2
    Tape tape;
    Tensor mix = shift_merge_mix(make_field(tape, rows, dims)).val();
    for (int s = 0; s < 4; ++s)
        for (int c = 0; c < 8; ++c) {
            const bool hit = s == 2 && c == 2;  // output modality 2, chunk 1, first channel
            CHECK(mix.at(s, c) == (hit ? 1.0 : 0.0));
        }
}

// ---- windows and tiles ----

TEST_CASE("window resolution: nearest-square tiles, misfits throw") {
    const FieldDims dims{4, 4, 4, 8, 2, 2};
    WindowGeometry w = resolve_windows(dims, 4, 2);
    CHECK(w.mh == 2);
    CHECK(w.mw == 2);
    CHECK(w.F == 2);

    w = resolve_windows(dims, 2, 4);  // mh=1 sits closer to sqrt(2) than mh=2
    CHECK(w.mh == 1);
    CHECK(w.mw == 2);
    CHECK(w.F == 4);

    const FieldDims paper{4, 8, 196, 768, 14, 14};
    w = resolve_windows(paper, 49, 4);
    CHECK(w.mh == 7);
    CHECK(w.mw == 7);

    CHECK_THROWS_AS(resolve_windows(dims, 3, 2), ConfigError);   // no 3-patch tile on a 2x2 grid
    CHECK_THROWS_AS(resolve_windows(dims, 4, 3), ConfigError);   // 3 does not divide T=4
    CHECK_THROWS_AS(resolve_windows(dims, 16, 2), ConfigError);  // bigger than the grid
}

TEST_CASE("tile and block index partitions") {
    const FieldDims dims{1, 6, 16, 4, 4, 4};
    std::vector<std::vector<int>> tiles = spatial_tiles(dims, {2, 2, 3});
    REQUIRE(tiles.size() == 4);
    CHECK(tiles[0] == std::vector<int>{0, 1, 4, 5});
    CHECK(tiles[1] == std::vector<int>{2, 3, 6, 7});
    CHECK(tiles[2] == std::vector<int>{8, 9, 12, 13});
    CHECK(tiles[3] == std::vector<int>{10, 11, 14, 15});

    std::vector<std::vector<int>> blocks = temporal_blocks(dims, {2, 2, 3});
    REQUIRE(blocks.size() == 2);
    CHECK(blocks[0] == std::vector<int>{0, 1, 2});
    CHECK(blocks[1] == std::vector<int>{3, 4, 5});
}

// ---- inter-window convolution ----

TEST_CASE("inter-window convs: delta doubles, zero passes through, loop oracle, CLS immune") {
    const FieldDims dims{2, 2, 4, 4, 2, 2};
    const WindowGeometry win{2, 2, 2};
    Rng rng(71);
    Tensor rows = random_tensor({dims.rows(), dims.d}, rng);

    {  // zero kernels leave the field alone (the start-of-training state)
        Tape tape;
        Tensor out = inter_window_conv_time(make_field(tape, rows, dims), tape.leaf(Tensor({2, 1, 4})), win, false).val();
        CHECK(max_abs_diff(out, rows) == 0.0);
        Tensor out2 = inter_window_conv_space(make_field(tape, rows, dims), tape.leaf(Tensor({2, 2, 4})), win, false).val();
        CHECK(max_abs_diff(out2, rows) == 0.0);
    }
    {  // delta kernel adds the field to itself, except at CLS
        Tensor delta({2, 1, 4});
        for (int c = 0; c < 4; ++c) delta.data[size_t(c)] = 1.0;  // tap (0,0)
        Tape tape;
        Tensor out = inter_window_conv_time(make_field(tape, rows, dims), tape.leaf(delta), win, false).val();
        for (int r = 0; r < dims.tokens(); ++r)
            for (int c = 0; c < 4; ++c) CHECK(std::abs(out.at(r, c) - 2.0 * rows.at(r, c)) < 1e-14);
        for (int c = 0; c < 4; ++c) CHECK(out.at(dims.cls(), c) == rows.at(dims.cls(), c));
    }
    {  // temporal loop oracle: kernel [F x 1 x d] slides over frames per (s, p)
        Tensor kern = random_tensor({2, 1, 4}, rng);
        Tape tape;
        Tensor out = inter_window_conv_time(make_field(tape, rows, dims), tape.leaf(kern), win, false).val();
        for (int s = 0; s < dims.S; ++s)
            for (int t = 0; t < dims.T; ++t)
                for (int p = 0; p < dims.N; ++p)
                    for (int c = 0; c < dims.d; ++c) {
                        double acc = rows.at(dims.row(s, t, p), c);
                        for (int f = 0; f < 2; ++f)
                            if (t + f < dims.T) acc += kern.data[size_t(f * 4 + c)] * rows.at(dims.row(s, t + f, p), c);
                        CHECK(std::abs(out.at(dims.row(s, t, p), c) - acc) < 1e-12);
                    }
    }
    {  // spatial loop oracle on the gh x gw grid per (s, t)
        Tensor kern = random_tensor({2, 2, 4}, rng);
        Tape tape;
        Tensor out = inter_window_conv_space(make_field(tape, rows, dims), tape.leaf(kern), win, false).val();
        for (int s = 0; s < dims.S; ++s)
            for (int t = 0; t < dims.T; ++t)
                for (int py = 0; py < dims.gh; ++py)
                    for (int px = 0; px < dims.gw; ++px)
                        for (int c = 0; c < dims.d; ++c) {
                            double acc = rows.at(dims.row(s, t, py * dims.gw + px), c);
                            for (int ky = 0; ky < 2; ++ky)
                                for (int kx = 0; kx < 2; ++kx) {
                                    const int iy = py + ky, ix = px + kx;
                                    if (iy >= dims.gh || ix >= dims.gw) continue;
                                    acc += kern.data[size_t((ky * 2 + kx) * 4 + c)] *
                                           rows.at(dims.row(s, t, iy * dims.gw + ix), c);
                                }
                            CHECK(std::abs(out.at(dims.row(s, t, py * dims.gw + px), c) - acc) < 1e-12);
                        }
    }
    {  // channel-mixing variant against its own loop
        Tensor kern = random_tensor({2, 1, 4, 4}, rng, 0.3);
        Tape tape;
        Tensor out = inter_window_conv_time(make_field(tape, rows, dims), tape.leaf(kern), win, true).val();
        for (int s = 0; s < dims.S; ++s)
            for (int t = 0; t < dims.T; ++t)
                for (int p = 0; p < dims.N; ++p)
                    for (int co = 0; co < dims.d; ++co) {
                        double acc = rows.at(dims.row(s, t, p), co);
                        for (int f = 0; f < 2; ++f)
                            for (int ci = 0; ci < dims.d; ++ci)
                                if (t + f < dims.T)
                                    acc += kern.data[size_t((f * 4 + ci) * 4 + co)] * rows.at(dims.row(s, t + f, p), ci);
                        CHECK(std::abs(out.at(dims.row(s, t, p), co) - acc) < 1e-12);
                    }
    }

    Tape tape;
    TokenField f = make_field(tape, rows, dims);
    CHECK_THROWS_AS(inter_window_conv_time(f, tape.leaf(Tensor({3, 1, 4})), win, false), DimensionError);
    CHECK_THROWS_AS(inter_window_conv_space(f, tape.leaf(Tensor({2, 2, 8})), win, false), DimensionError);
    CHECK_THROWS_AS(inter_window_conv_time(f, tape.leaf(Tensor({2, 1, 4})), win, true), DimensionError);

    Tensor kern = random_tensor({2, 1, 4}, rng);
    auto rep = check_gradients({rows, kern}, [&](Tape& t2, const std::vector<Value>& v) {
        TokenField field{v[0], dims};
        return sum(mul(inter_window_conv_time(field, v[1], win, false), v[0]));
    }, 10, 72);
    CHECK(rep.max_rel < 1e-6);
}

// ---- whole model ----

TEST_CASE("fresh models score every class identically (zero head)") {
    for (Variant v : {Variant::Joint, Variant::FactorTimeSpace, Variant::FactorThreeWay, Variant::LocalWindow}) {
        ModelConfig cfg = toy_config();
        cfg.variant = v;
        MmvitModel model(cfg);
        PreparedClip clip = prepare_clip(make_clip(3, cfg.T, cfg.H, cfg.W), cfg.P);
        Tensor logits = forward_logits(model, clip);
        CHECK(max_abs_diff(logits, Tensor({1, cfg.num_classes})) == 0.0);
    }
}

TEST_CASE("same seed, same config: bit-identical parameters and logits") {
    ModelConfig cfg = toy_config();
    MmvitModel a(cfg), b(cfg);
    REQUIRE(a.params().entries.size() == b.params().entries.size());
    for (size_t i = 0; i < a.params().entries.size(); ++i) {
        CHECK(a.params().entries[i].name == b.params().entries[i].name);
        CHECK(a.params().entries[i].value.data == b.params().entries[i].value.data);
    }
    // ... and a trained-looking perturbation keeps forward deterministic
    PreparedClip clip = prepare_clip(make_clip(4, cfg.T, cfg.H, cfg.W), cfg.P);
    Rng rng(9);
    for (auto& e : a.params().entries)
        for (double& x : e.value.data) x += rng.normal(0.0, 0.02);
    Rng rng2(9);
    for (auto& e : b.params().entries)
        for (double& x : e.value.data) x += rng2.normal(0.0, 0.02);
    CHECK(forward_logits(a, clip).data == forward_logits(b, clip).data);
}

TEST_CASE("one-modality three-way tower collapses onto the two-stage one") {
    ModelConfig cfg3 = toy_config();
    cfg3.modalities = {true, false, false, false};
    ModelConfig cfg2 = cfg3;
    cfg2.variant = Variant::FactorTimeSpace;

    MmvitModel m3(cfg3), m2(cfg2);
    // With one modality the merged cross-modal stage only sees each token
    // itself; silencing its output projection removes its contribution, and
    // shared parameter names make every other stage draw identical weights.
    for (int l = 0; l < cfg3.L; ++l) {
        auto& wo = m3.params().at("layer" + std::to_string(l) + ".modality.wo");
        std::fill(wo.value.data.begin(), wo.value.data.end(), 0.0);
    }
    Rng rng(14);
    for (auto& e : m3.params().entries) {
        if (e.name.find(".modality.") != std::string::npos) continue;
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    }
    Rng rng2(14);
    for (auto& e : m2.params().entries)
        for (double& x : e.value.data) x += rng2.normal(0.0, 0.05);

    PreparedClip clip = prepare_clip(make_clip(5, cfg3.T, cfg3.H, cfg3.W), cfg3.P);
    CHECK(max_abs_diff(forward_logits(m3, clip), forward_logits(m2, clip)) < 1e-8);
}

TEST_CASE("degenerate windows turn the local variant into the three-way one") {
    ModelConfig cfg3 = toy_config();
    ModelConfig cfg4 = cfg3;
    cfg4.variant = Variant::LocalWindow;
    cfg4.window_m = cfg4.patches();  // one tile covering the grid
    cfg4.window_f = cfg4.T;          // one block covering all frames

    MmvitModel m3(cfg3), m4(cfg4);
    Rng rng(15);
    for (auto& e : m4.params().entries) {
        if (e.name.find("conv_") != std::string::npos) continue;  // zero-initialized pass-throughs
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    }
    Rng rng2(15);
    for (auto& e : m3.params().entries)
        for (double& x : e.value.data) x += rng2.normal(0.0, 0.05);

    PreparedClip clip = prepare_clip(make_clip(6, cfg3.T, cfg3.H, cfg3.W), cfg3.P);
    CHECK(max_abs_diff(forward_logits(m4, clip), forward_logits(m3, clip)) < 1e-8);
}

TEST_CASE("score shifts cancel in whole-model logits") {
    ModelConfig cfg = toy_config();
    MmvitModel model(cfg);
    Rng rng(16);
    for (auto& e : model.params().entries)
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    PreparedClip clip = prepare_clip(make_clip(7, cfg.T, cfg.H, cfg.W), cfg.P);
    CHECK(max_abs_diff(forward_logits(model, clip, 0.0), forward_logits(model, clip, 6.0)) < 1e-8);
}

TEST_CASE("model gradients against finite differences on a small tower") {
    ModelConfig cfg = toy_config();
    cfg.L = 1;
    MmvitModel model(cfg);
    Rng rng(17);
    for (auto& e : model.params().entries)
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    PreparedClip clip = prepare_clip(make_clip(8, cfg.T, cfg.H, cfg.W), cfg.P);

    // analytic gradients for every parameter
    Tape tape;
    MmvitModel::ForwardResult fwd = model.forward(tape, clip);
    Value loss = cross_entropy_logits(fwd.logits, 2);
    tape.backward(loss);
    const double base = loss.val().data[0];

    Rng probe(18);
    double worst = 0.0;
    const auto& entries = model.params().entries;
    for (size_t p = 0; p < entries.size(); ++p) {
        const Tensor& g = tape.grad(fwd.param_ids[p]);
        auto& value = model.params().entries[p].value;
        for (int rep = 0; rep < 2; ++rep) {
            const size_t i = value.data.size() == 1 ? 0 : size_t(probe.below(uint64_t(value.data.size())));
            const double keep = value.data[i];
            const double step = 1e-5 * std::max(1.0, std::abs(keep));
            value.data[i] = keep + step;
            Tape tp;
            const double up = cross_entropy_logits(model.forward(tp, clip).logits, 2).val().data[0];
            value.data[i] = keep - step;
            Tape tm;
            const double dn = cross_entropy_logits(model.forward(tm, clip).logits, 2).val().data[0];
            value.data[i] = keep;
            const double numeric = (up - dn) / (2.0 * step);
            worst = std::max(worst, std::abs(g.data[i] - numeric) / std::max(1.0, std::abs(g.data[i])));
        }
    }
    (void)base;
    CHECK(worst < 1e-4);
}

TEST_CASE("bad configurations are rejected up front") {
    ModelConfig cfg = toy_config();
    cfg.mca = McaKind::Co;
    cfg.modalities = {true, false, false, false};
    CHECK_THROWS_AS(MmvitModel{cfg}, ConfigError);

    ModelConfig sm = toy_config();
    sm.mca = McaKind::ShiftMerge;
    sm.modalities = {true, true, false, false};
    CHECK_THROWS_AS(MmvitModel{sm}, ConfigError);

    ModelConfig odd = toy_config();
    odd.mca = McaKind::ShiftMerge;
    odd.d = 6;
    odd.h = 2;
    CHECK_THROWS_AS(MmvitModel{odd}, ConfigError);

    ModelConfig ord = toy_config();
    ord.order = "TTS";
    CHECK_THROWS_AS(MmvitModel{ord}, ConfigError);
}

TEST_CASE("checkpoints: exact round trip, corrupted files refused") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mmvit_model_tests";
    fs::create_directories(dir);
    const std::string path = (dir / "model.ckpt").string();

    ModelConfig cfg = toy_config();
    cfg.variant = Variant::LocalWindow;
    cfg.mca = McaKind::ShiftMerge;
    cfg.order = "MST";
    cfg.cls_every_stage = false;
    MmvitModel model(cfg);
    Rng rng(19);
    for (auto& e : model.params().entries)
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    model.save(path);

    MmvitModel back = MmvitModel::load(path);
    CHECK(back.config().variant == cfg.variant);
    CHECK(back.config().mca == cfg.mca);
    CHECK(back.config().order == cfg.order);
    CHECK(back.config().cls_every_stage == cfg.cls_every_stage);
    REQUIRE(back.params().entries.size() == model.params().entries.size());
    for (size_t i = 0; i < model.params().entries.size(); ++i)
        CHECK(back.params().entries[i].value.data == model.params().entries[i].value.data);

    PreparedClip clip = prepare_clip(make_clip(9, cfg.T, cfg.H, cfg.W), cfg.P);
    CHECK(forward_logits(model, clip).data == forward_logits(back, clip).data);

    // truncation and magic damage
    std::vector<char> bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    const std::string cut = (dir / "cut.ckpt").string();
    {
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() / 2));
    }
    CHECK_THROWS_AS(MmvitModel::load(cut), FormatError);

    const std::string bad = (dir / "bad.ckpt").string();
    bytes[0] = 'X';
    {
        std::ofstream out(bad, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
    }
    CHECK_THROWS_AS(MmvitModel::load(bad), FormatError);
    CHECK_THROWS_AS(MmvitModel::load((dir / "absent.ckpt").string()), DataError);
}

TEST_CASE("stage plans per variant") {
    ModelConfig cfg = toy_config();
    cfg.variant = Variant::Joint;
    auto tags = [](const std::vector<StageSpec>& v) {
        std::string s;
        for (const StageSpec& st : v) s += st.tag;
        return s;
    };
    CHECK(tags(model_stages(cfg)) == "J");

    cfg.variant = Variant::FactorTimeSpace;
    CHECK(tags(model_stages(cfg)) == "TS");

    cfg.variant = Variant::FactorThreeWay;
    cfg.order = "MST";
    std::vector<StageSpec> st = model_stages(cfg);
    CHECK(tags(st) == "MST");
    for (const StageSpec& s : st) CHECK(!s.conv_after);
    CHECK(st[0].name == "modality");
    CHECK(st[1].name == "space");
    CHECK(st[2].name == "time");

    cfg.variant = Variant::LocalWindow;
    cfg.order = "TMS";
    st = model_stages(cfg);
    CHECK(tags(st) == "TMS");
    CHECK(st[0].conv_after);
    CHECK(!st[1].conv_after);
    CHECK(st[2].conv_after);

    cfg.mca = McaKind::ShiftMerge;
    st = model_stages(cfg);
    CHECK(st[1].attention == false);

    cfg.mca = McaKind::Co;
    st = model_stages(cfg);
    CHECK(st[1].attention == true);
    CHECK(st[1].scope.axis == ScopeAxis::ModalityCo);
}

// ---- analytic accounting ----

TEST_CASE("closed-form parameter counts match the live stores") {
    std::vector<ModelConfig> grid;
    for (Variant v : {Variant::Joint, Variant::FactorTimeSpace, Variant::FactorThreeWay, Variant::LocalWindow}) {
        ModelConfig cfg = toy_config();
        cfg.variant = v;
        grid.push_back(cfg);
    }
    {
        ModelConfig cfg = toy_config();
        cfg.mca = McaKind::Co;
        grid.push_back(cfg);
        cfg.mca = McaKind::ShiftMerge;
        grid.push_back(cfg);
        cfg.variant = Variant::LocalWindow;
        grid.push_back(cfg);
        cfg.conv_full = true;
        grid.push_back(cfg);
    }
    {
        ModelConfig cfg = toy_config();
        cfg.modalities = {true, false, true, false};
        grid.push_back(cfg);
        cfg.modalities = {false, false, false, true};
        grid.push_back(cfg);
        cfg = toy_config();
        cfg.L = 3;
        cfg.d = 12;
        cfg.h = 3;
        cfg.num_classes = 5;
        grid.push_back(cfg);
    }
    for (const ModelConfig& cfg : grid) {
        MmvitModel model(cfg);
        CHECK(count_params(cfg) == model.params().scalar_count());
    }
}

TEST_CASE("per-stage key counts at publication scale") {
    ModelConfig cfg;
    cfg.T = 8;
    cfg.H = cfg.W = 224;
    cfg.P = 16;
    cfg.d = 768;
    cfg.h = 12;
    cfg.L = 12;

    cfg.variant = Variant::Joint;
    CHECK(count_flops(cfg).stage_cards == std::vector<long long>{6272});

    cfg.variant = Variant::FactorTimeSpace;
    CHECK(count_flops(cfg).stage_cards == std::vector<long long>{32, 784});

    cfg.variant = Variant::FactorThreeWay;
    CHECK(count_flops(cfg).stage_cards == std::vector<long long>{8, 4, 196});

    cfg.mca = McaKind::Co;
    CHECK(count_flops(cfg).stage_cards == std::vector<long long>{8, 3, 196});

    cfg.mca = McaKind::Merged;
    cfg.variant = Variant::LocalWindow;
    CHECK(count_flops(cfg).stage_cards == std::vector<long long>{4, 4, 49});
}

TEST_CASE("frame-count doubling scales stages by their arity") {
    ModelConfig cfg;
    cfg.T = 64;
    cfg.H = cfg.W = 224;
    cfg.P = 16;
    cfg.d = 768;
    cfg.h = 12;
    cfg.L = 12;

    auto stage_mas = [](const FlopsReport& r, const std::string& name) {
        for (const StageCost& s : r.stages)
            if (s.name == name) return s.mas;
        REQUIRE(false);
        return 0LL;
    };
    ModelConfig twice = cfg;
    twice.T = 128;

    cfg.variant = twice.variant = Variant::Joint;
    double ratio = double(stage_mas(count_flops(twice), "joint")) / double(stage_mas(count_flops(cfg), "joint"));
    CHECK(ratio > 3.9);
    CHECK(ratio < 4.01);

    cfg.variant = twice.variant = Variant::FactorThreeWay;
    ratio = double(stage_mas(count_flops(twice), "time")) / double(stage_mas(count_flops(cfg), "time"));
    CHECK(ratio > 3.9);
    CHECK(ratio < 4.01);
    ratio = double(stage_mas(count_flops(twice), "space")) / double(stage_mas(count_flops(cfg), "space"));
    CHECK(ratio > 1.9);
    CHECK(ratio < 2.01);
}

TEST_CASE("attention cost ordering across variants at publication scale") {
    ModelConfig cfg;
    cfg.T = 8;
    cfg.H = cfg.W = 224;
    cfg.P = 16;
    cfg.d = 768;
    cfg.h = 12;
    cfg.L = 12;

    auto at = [&](Variant v, McaKind m) {
        ModelConfig c = cfg;
        c.variant = v;
        c.mca = m;
        return count_flops(c);
    };
    const FlopsReport r1 = at(Variant::Joint, McaKind::Merged);
    const FlopsReport r2 = at(Variant::FactorTimeSpace, McaKind::Merged);
    const FlopsReport r3m = at(Variant::FactorThreeWay, McaKind::Merged);
    const FlopsReport r3s = at(Variant::FactorThreeWay, McaKind::ShiftMerge);
    const FlopsReport r4 = at(Variant::LocalWindow, McaKind::ShiftMerge);

    CHECK(r1.total_mas > r2.total_mas);
    CHECK(r2.total_mas > r3m.total_mas);
    CHECK(r3m.total_mas > r3s.total_mas);
    CHECK(r3s.total_mas > r4.total_mas);
    for (const FlopsReport* r : {&r1, &r2, &r3m, &r3s, &r4}) CHECK(r->total_flops == 2 * r->total_mas);

    CHECK(r2.params > r1.params);
    CHECK(r3m.params > r2.params);
    CHECK(r3s.params < r3m.params);
    CHECK(r4.params > r3s.params);

    const std::string csv = flops_csv({r1, r2, r3m, r3s, r4});
    CHECK(csv.rfind("variant,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

// ---- rollout ----

namespace {
Tensor matprod(const Tensor& a, const Tensor& b) {
    const int n = a.rows(), m = b.cols(), k = a.cols();
    Tensor out({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double s = 0;
            for (int q = 0; q < k; ++q) s += a.at(i, q) * b.at(q, j);
            out.at(i, j) = s;
        }
    return out;
}
}  // namespace

TEST_CASE("rollout composes half-identity stages in execution order") {
    const FieldDims dims{1, 1, 2, 4, 1, 2};  // rows: two tokens + CLS
    Tensor a1 = Tensor::matrix({{0.5, 0.5, 0.0}, {0.2, 0.3, 0.5}, {0.6, 0.3, 0.1}});
    Tensor a2 = Tensor::matrix({{1.0, 0.0, 0.0}, {0.0, 0.5, 0.5}, {0.25, 0.25, 0.5}});

    ForwardTrace trace;
    trace.layers.push_back({StageTrace{"time", a1}});
    trace.layers.push_back({StageTrace{"space", a2}});
    RolloutMap map = rollout_from_trace(trace, dims, {2});

    auto hat = [](const Tensor& a) {
        Tensor h({3, 3});
        for (int i = 0; i < 3; ++i) {
            double rowsum = 0;
            for (int j = 0; j < 3; ++j) rowsum += 0.5 * a.at(i, j) + (i == j ? 0.5 : 0.0);
            for (int j = 0; j < 3; ++j) h.at(i, j) = (0.5 * a.at(i, j) + (i == j ? 0.5 : 0.0)) / rowsum;
        }
        return h;
    };
    Tensor total = matprod(hat(a2), hat(a1));

    REQUIRE(map.modality_ids == std::vector<int>{2});
    REQUIRE(map.maps.size() == 1);
    REQUIRE(map.maps[0].shape == std::vector<int>{1, 2});
    CHECK(std::abs(map.maps[0].data[0] - total.at(2, 0)) < 1e-12);
    CHECK(std::abs(map.maps[0].data[1] - total.at(2, 1)) < 1e-12);
    CHECK(std::abs(map.cls_mass - total.at(2, 2)) < 1e-12);
    CHECK(std::abs(map.maps[0].data[0] + map.maps[0].data[1] + map.cls_mass - 1.0) < 1e-12);
}

TEST_CASE("identity attention keeps all attribution on CLS") {
    const FieldDims dims{2, 1, 2, 4, 1, 2};
    Tensor eye({dims.rows(), dims.rows()});
    for (int i = 0; i < dims.rows(); ++i) eye.at(i, i) = 1.0;
    ForwardTrace trace;
    trace.layers.push_back({StageTrace{"joint", eye}});
    RolloutMap map = rollout_from_trace(trace, dims, {0, 3});
    CHECK(map.cls_mass == 1.0);
    for (const Tensor& m : map.maps)
        for (double v : m.data) CHECK(v == 0.0);
}

TEST_CASE("live rollouts are a probability split over tokens and CLS") {
    ModelConfig cfg = toy_config();
    cfg.variant = Variant::LocalWindow;  // exercises conv stages skipping the flow
    MmvitModel model(cfg);
    Rng rng(23);
    for (auto& e : model.params().entries)
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    PreparedClip clip = prepare_clip(make_clip(10, cfg.T, cfg.H, cfg.W), cfg.P);

    RolloutMap map = attention_rollout(model, clip);
    REQUIRE(map.modality_ids == std::vector<int>{0, 1, 2, 3});
    double total = map.cls_mass;
    for (const Tensor& m : map.maps) {
        REQUIRE(m.shape == std::vector<int>{cfg.T, cfg.patches()});
        for (double v : m.data) {
            CHECK(v >= 0.0);
            total += v;
        }
    }
    CHECK(std::abs(total - 1.0) < 1e-9);

    const std::string csv = rollout_csv(map, model.dims());
    CHECK(csv.rfind("modality,t,p,value\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * cfg.T * cfg.patches());
}

TEST_CASE("uniform attention spreads attribution evenly over the field") {
    ModelConfig cfg = toy_config();
    cfg.variant = Variant::Joint;
    MmvitModel model(cfg);
    Rng rng(24);
    for (auto& e : model.params().entries) {
        if (e.name.find(".wq") != std::string::npos) {  // zero queries = flat scores
            std::fill(e.value.data.begin(), e.value.data.end(), 0.0);
            continue;
        }
        for (double& x : e.value.data) x += rng.normal(0.0, 0.05);
    }
    PreparedClip clip = prepare_clip(make_clip(11, cfg.T, cfg.H, cfg.W), cfg.P);
    RolloutMap map = attention_rollout(model, clip);
    double first = map.maps[0].data[0];
    for (const Tensor& m : map.maps)
        for (double v : m.data) CHECK(std::abs(v - first) < 1e-12);
}
