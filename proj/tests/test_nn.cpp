#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <unistd.h>

#include "voxgen/autoencoder.hpp"
#include "voxgen/nn.hpp"
#include "voxgen/unet.hpp"

using namespace voxgen;

namespace {

void randomize(const std::vector<nn::Param*>& params, Rng& rng, float scale = 0.3f) {
    for (auto* p : params) p->w.fill_normal(rng, scale);
}

// Central-difference check of d(loss)/d(theta) against the analytic gradient
// for a sample of parameter entries. loss() must re-run the forward pass;
// run_backward() must zero grads and populate them once.
void check_grads(const std::vector<nn::Param*>& params, const std::function<double()>& loss,
                 const std::function<void()>& run_backward, Rng& rng, double h = 1e-2,
                 double tol = 0.05) {
    run_backward();
    // snapshot analytic grads before the FD evaluations disturb caches
    std::vector<FloatVec> analytic;
    for (auto* p : params) analytic.push_back(p->g.data);

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        nn::Param& p = *params[pi];
        const i64 n = p.w.numel();
        const int probes = int(std::min<i64>(4, n));
        for (int k = 0; k < probes; ++k) {
            const i64 idx = rng.uniform_int(n);
            const float saved = p.w[idx];
            p.w[idx] = saved + float(h);
            const double lp = loss();
            p.w[idx] = saved - float(h);
            const double lm = loss();
            p.w[idx] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[pi][std::size_t(idx)];
            const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-3);
            // float32 forward noise puts a hard floor on what central
            // differences can resolve; near-zero slopes are compared loosely
            const bool ok = rel < tol || std::abs(a - numeric) < 4e-4;
            INFO("param ", p.name, " idx ", idx, " analytic ", a, " numeric ", numeric);
            CHECK(ok);
        }
    }
}

// Directional derivative check: d(loss)/dh along a random parameter
// direction, aggregated over every parameter. Far better conditioned than
// per-entry probes for deep composites.
void check_grads_directional(const std::vector<nn::Param*>& params,
                             const std::function<double()>& loss,
                             const std::function<void()>& run_backward, Rng& rng,
                             int directions = 3, double h = 1e-3, double tol = 0.03) {
    run_backward();
    std::vector<FloatVec> analytic;
    for (auto* p : params) analytic.push_back(p->g.data);

    for (int trial = 0; trial < directions; ++trial) {
        std::vector<FloatVec> dir(params.size());
        double proj = 0.0;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            dir[pi].resize(params[pi]->w.data.size());
            for (std::size_t i = 0; i < dir[pi].size(); ++i) {
                dir[pi][i] = rng.uniform() < 0.5 ? -1.0f : 1.0f;
                proj += double(analytic[pi][i]) * double(dir[pi][i]);
            }
        }
        std::vector<FloatVec> saved;
        for (auto* p : params) saved.push_back(p->w.data);
        auto shift = [&](double step) {
            for (std::size_t pi = 0; pi < params.size(); ++pi)
                for (std::size_t i = 0; i < dir[pi].size(); ++i)
                    params[pi]->w.data[i] = saved[pi][i] + float(step) * dir[pi][i];
        };
        shift(h);
        const double lp = loss();
        shift(-h);
        const double lm = loss();
        for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->w.data = saved[pi];
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel = std::abs(proj - numeric) / (std::abs(proj) + std::abs(numeric) + 1e-8);
        INFO("direction ", trial, " analytic ", proj, " numeric ", numeric);
        CHECK(rel < tol);
    }
}

Tensor random_tensor(std::vector<i64> shape, Rng& rng, float scale = 1.0f) {
    Tensor t(std::move(shape));
    t.fill_normal(rng, scale);
    return t;
}

double project(const Tensor& out, const Tensor& r) {
    double acc = 0.0;
    for (i64 i = 0; i < out.numel(); ++i) acc += double(out[i]) * double(r[i]);
    return acc;
}

}  // namespace

TEST_CASE("conv3d forward matches a naive direct convolution") {
    Rng rng(1);
    for (int stride : {1, 2}) {
        nn::Conv3d conv("c", 2, 3, 3, stride);
        conv.init(rng);
        const Tensor x = random_tensor({2, 6, 6, 6}, rng);
        const Tensor y = conv.forward(x);

        const i64 od = (6 + 2 - 3) / stride + 1;
        REQUIRE(y.shape == std::vector<i64>{3, od, od, od});
        for (i64 co = 0; co < 3; ++co)
            for (i64 oz = 0; oz < od; ++oz)
                for (i64 oy = 0; oy < od; ++oy)
                    for (i64 ox = 0; ox < od; ++ox) {
                        double acc = conv.bias.w[co];
                        for (i64 ci = 0; ci < 2; ++ci)
                            for (int kz = 0; kz < 3; ++kz)
                                for (int ky = 0; ky < 3; ++ky)
                                    for (int kx = 0; kx < 3; ++kx) {
                                        const i64 iz = oz * stride - 1 + kz;
                                        const i64 iy = oy * stride - 1 + ky;
                                        const i64 ix = ox * stride - 1 + kx;
                                        if (iz < 0 || iz >= 6 || iy < 0 || iy >= 6 || ix < 0 ||
                                            ix >= 6)
                                            continue;
                                        const float w =
                                            conv.weight.w[(((co * 2 + ci) * 3 + kz) * 3 + ky) * 3 +
                                                          kx];
                                        acc += double(w) * double(x[((ci * 6 + iz) * 6 + iy) * 6 +
                                                                    ix]);
                                    }
                        const float got = y[((co * od + oz) * od + oy) * od + ox];
                        CHECK(got == doctest::Approx(acc).epsilon(1e-4));
                    }
    }
}

TEST_CASE("conv3d gradients (k3 s1, k3 s2, k1)") {
    Rng rng(2);
    struct Case {
        int k, stride;
    };
    for (const Case c : {Case{3, 1}, Case{3, 2}, Case{1, 1}}) {
        nn::Conv3d conv("c", 3, 4, c.k, c.stride);
        std::vector<nn::Param*> params;
        conv.collect(params);
        randomize(params, rng);
        const Tensor x = random_tensor({3, 4, 4, 4}, rng);
        Tensor r;
        auto loss = [&] {
            const Tensor out = conv.forward(x);
            return project(out, r);
        };
        {
            const Tensor probe = conv.forward(x);
            r = random_tensor(probe.shape, rng);
        }
        auto backward = [&] {
            nn::zero_grads(params);
            conv.forward(x);
            conv.backward(r);
        };
        check_grads(params, loss, backward, rng);
    }
}

TEST_CASE("conv3d input gradient via finite differences") {
    Rng rng(3);
    nn::Conv3d conv("c", 2, 2, 3, 1);
    std::vector<nn::Param*> params;
    conv.collect(params);
    randomize(params, rng);
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    const Tensor r = random_tensor({2, 4, 4, 4}, rng);

    conv.forward(x);
    const Tensor dx = conv.backward(r);
    for (int probe = 0; probe < 8; ++probe) {
        const i64 idx = rng.uniform_int(x.numel());
        const float saved = x[idx];
        const double h = 1e-2;
        x[idx] = saved + float(h);
        const double lp = project(conv.forward(x), r);
        x[idx] = saved - float(h);
        const double lm = project(conv.forward(x), r);
        x[idx] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel =
            std::abs(dx[idx] - numeric) / (std::abs(dx[idx]) + std::abs(numeric) + 1e-3);
        CHECK(rel < 0.05);
    }
}

TEST_CASE("groupnorm gradients") {
    Rng rng(4);
    nn::GroupNorm gn("g", 8);
    std::vector<nn::Param*> params;
    gn.collect(params);
    // keep gamma near 1 but not exactly 1
    for (auto& v : gn.gamma.w.data) v = 1.0f + 0.2f * rng.normalf();
    for (auto& v : gn.beta.w.data) v = 0.1f * rng.normalf();
    const Tensor x = random_tensor({8, 3, 3, 3}, rng);
    const Tensor r = random_tensor({8, 3, 3, 3}, rng);
    auto loss = [&] { return project(gn.forward(x), r); };
    auto backward = [&] {
        nn::zero_grads(params);
        gn.forward(x);
        gn.backward(r);
    };
    check_grads(params, loss, backward, rng);

    // input gradient
    gn.forward(x);
    const Tensor dx = gn.backward(r);
    Tensor xm = x;
    for (int probe = 0; probe < 8; ++probe) {
        const i64 idx = rng.uniform_int(x.numel());
        const float saved = xm[idx];
        const double h = 1e-2;
        xm[idx] = saved + float(h);
        const double lp = project(gn.forward(xm), r);
        xm[idx] = saved - float(h);
        const double lm = project(gn.forward(xm), r);
        xm[idx] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel =
            std::abs(dx[idx] - numeric) / (std::abs(dx[idx]) + std::abs(numeric) + 1e-3);
        CHECK(rel < 0.05);
    }
}

TEST_CASE("activation and scaled-sigmoid gradients") {
    Rng rng(5);
    for (nn::ActKind kind : {nn::ActKind::silu, nn::ActKind::leaky_relu}) {
        nn::Activation act(kind);
        Tensor x = random_tensor({40}, rng);
        const Tensor r = random_tensor({40}, rng);
        act.forward(x);
        const Tensor dx = act.backward(r);
        for (i64 idx = 0; idx < 40; idx += 7) {
            const float saved = x[idx];
            const double h = 1e-3;
            x[idx] = saved + float(h);
            const double lp = project(act.forward(x), r);
            x[idx] = saved - float(h);
            const double lm = project(act.forward(x), r);
            x[idx] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            CHECK(dx[idx] == doctest::Approx(numeric).epsilon(0.02));
        }
    }
    nn::ScaledSigmoid sq;
    Tensor x = random_tensor({16}, rng);
    const Tensor y = sq.forward(x);
    for (i64 i = 0; i < 16; ++i)
        CHECK(y[i] == doctest::Approx(2.0 / (1.0 + std::exp(-x[i])) - 1.0).epsilon(1e-5));
}

TEST_CASE("linear gradients") {
    Rng rng(6);
    nn::Linear lin("l", 6, 5);
    std::vector<nn::Param*> params;
    lin.collect(params);
    randomize(params, rng);
    const Tensor x = random_tensor({6}, rng);
    const Tensor r = random_tensor({5}, rng);
    auto loss = [&] { return project(lin.forward(x), r); };
    auto backward = [&] {
        nn::zero_grads(params);
        lin.forward(x);
        lin.backward(r);
    };
    check_grads(params, loss, backward, rng, 1e-3, 0.02);
}

TEST_CASE("upsample2x forward/backward exactness") {
    Rng rng(7);
    nn::Upsample2x up;
    const Tensor x = random_tensor({2, 2, 2, 2}, rng);
    const Tensor y = up.forward(x);
    REQUIRE(y.shape == std::vector<i64>{2, 4, 4, 4});
    CHECK(y[(0 * 4 + 1) * 4 * 4 + 1 * 4 + 1] == x[0]);  // all corners of block 0
    // backward of all-ones collects 8 votes per input voxel
    const Tensor ones = Tensor::full(y.shape, 1.0f);
    const Tensor dx = up.backward(ones);
    for (i64 i = 0; i < dx.numel(); ++i) CHECK(dx[i] == doctest::Approx(8.0f));
}

TEST_CASE("attention block gradients") {
    Rng rng(8);
    nn::AttentionBlock attn("a", 8);
    std::vector<nn::Param*> params;
    attn.collect(params);
    randomize(params, rng);
    for (auto& v : attn.norm.gamma.w.data) v = 1.0f + 0.1f * rng.normalf();
    const Tensor x = random_tensor({8, 2, 2, 2}, rng);
    const Tensor r = random_tensor({8, 2, 2, 2}, rng);
    auto loss = [&] { return project(attn.forward(x), r); };
    auto backward = [&] {
        nn::zero_grads(params);
        attn.forward(x);
        attn.backward(r);
    };
    check_grads(params, loss, backward, rng);
}

TEST_CASE("resblock gradients including the time-embedding path") {
    Rng rng(9);
    nn::ResBlock blk("rb", 3, 5, 8, nn::ActKind::silu);
    std::vector<nn::Param*> params;
    blk.collect(params);
    randomize(params, rng);
    const Tensor x = random_tensor({3, 4, 4, 4}, rng);
    const Tensor emb = random_tensor({8}, rng);
    const Tensor r = random_tensor({5, 4, 4, 4}, rng);
    auto loss = [&] { return project(blk.forward(x, &emb), r); };
    auto backward = [&] {
        nn::zero_grads(params);
        blk.forward(x, &emb);
        Tensor demb({8});
        blk.backward(r, &demb);
    };
    check_grads(params, loss, backward, rng);

    // gradient w.r.t. the embedding itself
    blk.forward(x, &emb);
    Tensor demb({8});
    blk.backward(r, &demb);
    Tensor em = emb;
    for (i64 idx = 0; idx < 8; ++idx) {
        const float saved = em[idx];
        const double h = 1e-2;
        em[idx] = saved + float(h);
        const double lp = project(blk.forward(x, &em), r);
        em[idx] = saved - float(h);
        const double lm = project(blk.forward(x, &em), r);
        em[idx] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel =
            std::abs(demb[idx] - numeric) / (std::abs(demb[idx]) + std::abs(numeric) + 1e-3);
        CHECK(rel < 0.05);
    }
}

TEST_CASE("unet3d end-to-end parameter gradients") {
    Rng rng(10);
    DenoiserSpec spec;
    spec.in_channels = 2;
    spec.out_channels = 1;
    spec.channels = {4, 6};
    spec.num_res = 1;
    spec.attn_levels = {1};
    spec.attn_mid = true;
    spec.emb_dim = 8;
    UNet3d net(spec);
    auto params = net.params();
    randomize(params, rng, 0.25f);

    const Tensor x = random_tensor({2, 4, 4, 4}, rng);
    const Tensor r = random_tensor({1, 4, 4, 4}, rng);
    const double t = 3.0;
    auto loss = [&] { return project(net.forward(x, t), r); };
    auto backward = [&] {
        nn::zero_grads(params);
        net.forward(x, t);
        net.backward(r);
    };
    check_grads(params, loss, backward, rng);
    check_grads_directional(params, loss, backward, rng);
}

TEST_CASE("unet3d rejects indivisible input") {
    DenoiserSpec spec;
    spec.channels = {4, 6};
    UNet3d net(spec);
    Rng rng(1);
    auto params = net.params();
    randomize(params, rng);
    Tensor bad({1, 5, 4, 4});
    CHECK_THROWS_AS(net.forward(bad, 1.0), ArgumentError);
}

TEST_CASE("autoencoder chain gradients (reconstruction loss)") {
    Rng rng(11);
    AutoencoderSpec spec;
    spec.channels = {4, 6, 8};
    Autoencoder ae(spec);
    auto params = ae.params();
    randomize(params, rng, 0.25f);
    const Tensor x = random_tensor({1, 8, 8, 8}, rng, 0.5f);

    auto loss = [&] {
        const Tensor xhat = ae.decode_tensor(ae.encode_tensor(x));
        return mse(xhat, x);
    };
    auto backward = [&] {
        nn::zero_grads(params);
        const Tensor z = ae.encode_tensor(x);
        const Tensor xhat = ae.decode_tensor(z);
        Tensor dxhat(xhat.shape);
        for (i64 i = 0; i < xhat.numel(); ++i)
            dxhat[i] = 2.0f * (xhat[i] - x[i]) / float(xhat.numel());
        ae.encode_backward(ae.decode_backward(dxhat));
    };
    check_grads_directional(params, loss, backward, rng);
}

TEST_CASE("adamw matches a reference step") {
    nn::Param p("p", {3});
    p.w.data = {1.0f, -2.0f, 0.5f};
    p.g.data = {0.3f, -0.1f, 0.2f};
    nn::AdamW opt;
    opt.lr = 0.1;
    opt.weight_decay = 0.01;
    std::vector<nn::Param*> params{&p};
    opt.step(params);

    // hand-computed first step: mhat = g, vhat = g^2 (bias-corrected)
    for (int i = 0; i < 3; ++i) {
        const double g = std::vector<double>{0.3, -0.1, 0.2}[std::size_t(i)];
        const double w0 = std::vector<double>{1.0, -2.0, 0.5}[std::size_t(i)];
        const double mhat = g;
        const double vhat = g * g;
        const double expect = w0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * w0);
        CHECK(p.w[i] == doctest::Approx(expect).epsilon(1e-5));
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(12);
    DenoiserSpec spec;
    spec.channels = {4, 6};
    spec.emb_dim = 8;
    UNet3d net(spec);
    auto params = net.params();
    randomize(params, rng);

    const std::string path =
        (std::filesystem::temp_directory_path() / ("ckpt_" + std::to_string(::getpid()) + ".bin"))
            .string();
    nn::save_checkpoint(path, "test", spec.to_json(), params);
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    CHECK(ck.kind == "test");

    UNet3d net2(DenoiserSpec::from_json(ck.config));
    auto params2 = net2.params();
    nn::restore_params(ck, params2);
    REQUIRE(params.size() == params2.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(params[i]->name == params2[i]->name);
        CHECK(std::memcmp(params[i]->w.data.data(), params2[i]->w.data.data(),
                          params[i]->w.data.size() * 4) == 0);
    }

    // same input, identical output
    Rng rng2(13);
    const Tensor x = random_tensor({1, 4, 4, 4}, rng2);
    const Tensor y1 = net.forward(x, 2.0);
    const Tensor y2 = net2.forward(x, 2.0);
    CHECK(std::memcmp(y1.data.data(), y2.data.data(), y1.data.size() * 4) == 0);
}

TEST_CASE("restore_params reports missing and mismatched arrays") {
    Rng rng(14);
    nn::Conv3d a("a", 1, 2, 3), b("b", 1, 2, 3);
    a.init(rng);
    const std::string path =
        (std::filesystem::temp_directory_path() / ("ckpt2_" + std::to_string(::getpid()) + ".bin"))
            .string();
    std::vector<nn::Param*> pa;
    a.collect(pa);
    nn::save_checkpoint(path, "test", {}, pa);
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    std::vector<nn::Param*> pb;
    b.collect(pb);
    CHECK_THROWS_AS(nn::restore_params(ck, pb), ConfigError);
}

TEST_CASE("sinusoidal embedding is deterministic with sane values") {
    const Tensor e = nn::sinusoidal_embedding(0.0, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e[i] == doctest::Approx(0.0));      // sin(0)
        CHECK(e[4 + i] == doctest::Approx(1.0));  // cos(0)
    }
    const Tensor a = nn::sinusoidal_embedding(17.0, 16);
    const Tensor b = nn::sinusoidal_embedding(17.0, 16);
    CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * 4) == 0);
    CHECK_THROWS_AS(nn::sinusoidal_embedding(1.0, 7), ArgumentError);
}

TEST_CASE("concat/split channels round trip") {
    Rng rng(15);
    const Tensor a = random_tensor({2, 3, 3, 3}, rng);
    const Tensor b = random_tensor({4, 3, 3, 3}, rng);
    const Tensor c = nn::concat_channels(a, b);
    REQUIRE(c.shape == std::vector<i64>{6, 3, 3, 3});
    Tensor da, db;
    nn::split_channels(c, 2, da, db);
    CHECK(std::memcmp(da.data.data(), a.data.data(), a.data.size() * 4) == 0);
    CHECK(std::memcmp(db.data.data(), b.data.data(), b.data.size() * 4) == 0);
}
