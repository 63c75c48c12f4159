#include "voxgen/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace voxgen::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;
template <typename M>
using Map = Eigen::Map<M>;
template <typename M>
using StridedMap = Eigen::Map<M, 0, Eigen::OuterStride<>>;

ActKind act_kind_from_string(const std::string& s) {
    if (s == "silu") return ActKind::silu;
    if (s == "leaky_relu") return ActKind::leaky_relu;
    throw ArgumentError("unknown activation '" + s + "' (silu | leaky_relu)");
}

// ---------------------------------------------------------------- Conv3d

Conv3d::Conv3d(const std::string& name, int cin_, int cout_, int k_, int stride_)
    : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(k_ / 2),
      weight(name + ".w", {cout_, cin_, k_, k_, k_}), bias(name + ".b", {cout_}) {}

void Conv3d::init(Rng& rng, float gain) {
    const float std_dev = gain * std::sqrt(2.0f / float(cin * k * k * k));
    weight.w.fill_normal(rng, std_dev);
    std::fill(bias.w.data.begin(), bias.w.data.end(), 0.0f);
}

void Conv3d::init_zero() {
    std::fill(weight.w.data.begin(), weight.w.data.end(), 0.0f);
    std::fill(bias.w.data.begin(), bias.w.data.end(), 0.0f);
}

namespace {

struct ConvDims {
    i64 D, H, W, OD, OH, OW, N, K;
};

ConvDims conv_dims(const Conv3d& c, const std::vector<i64>& xs) {
    ConvDims d;
    d.D = xs[1];
    d.H = xs[2];
    d.W = xs[3];
    d.OD = (d.D + 2 * c.pad - c.k) / c.stride + 1;
    d.OH = (d.H + 2 * c.pad - c.k) / c.stride + 1;
    d.OW = (d.W + 2 * c.pad - c.k) / c.stride + 1;
    d.N = d.OD * d.OH * d.OW;
    d.K = i64(c.cin) * c.k * c.k * c.k;
    return d;
}

// Gather columns [c0,c1) of the im2col matrix (K x nc, column-major).
// Specialised row-run layout: for each kernel tap the source voxels form
// contiguous (stride 1) or regularly strided runs along x, so the inner
// loops stay branch-free.
void im2col_chunk(const Conv3d& c, const float* x, const ConvDims& dm, i64 c0, i64 c1,
                  float* col) {
    const i64 nc = c1 - c0;
    const i64 K = dm.K;
    for (i64 ci = 0; ci < c.cin; ++ci) {
        const float* plane = x + ci * dm.D * dm.H * dm.W;
        for (int kz = 0; kz < c.k; ++kz)
            for (int ky = 0; ky < c.k; ++ky)
                for (int kx = 0; kx < c.k; ++kx) {
                    const i64 r = ((ci * c.k + kz) * c.k + ky) * c.k + kx;
                    float* dst = col + r * nc;  // row-major: contiguous along columns
                    for (i64 cc = 0; cc < nc;) {
                        const i64 n = c0 + cc;
                        const i64 od = n / (dm.OH * dm.OW);
                        const i64 oh = (n / dm.OW) % dm.OH;
                        i64 ow = n % dm.OW;
                        const i64 run = std::min(nc - cc, dm.OW - ow);  // same output row
                        const i64 iz = od * c.stride - c.pad + kz;
                        const i64 iy = oh * c.stride - c.pad + ky;
                        float* out = dst + cc;
                        if (iz < 0 || iz >= dm.D || iy < 0 || iy >= dm.H) {
                            for (i64 t = 0; t < run; ++t) out[t] = 0.0f;
                        } else {
                            const float* row = plane + (iz * dm.H + iy) * dm.W;
                            for (i64 t = 0; t < run; ++t) {
                                const i64 ix = (ow + t) * c.stride - c.pad + kx;
                                out[t] = (ix >= 0 && ix < dm.W) ? row[ix] : 0.0f;
                            }
                        }
                        cc += run;
                    }
                }
    }
}

// Scatter-add columns [c0,c1) of dcol back into dx; mirror of im2col_chunk.
void col2im_chunk(const Conv3d& c, float* dx, const ConvDims& dm, i64 c0, i64 c1,
                  const float* dcol) {
    const i64 nc = c1 - c0;
    const i64 K = dm.K;
    for (i64 ci = 0; ci < c.cin; ++ci) {
        float* plane = dx + ci * dm.D * dm.H * dm.W;
        for (int kz = 0; kz < c.k; ++kz)
            for (int ky = 0; ky < c.k; ++ky)
                for (int kx = 0; kx < c.k; ++kx) {
                    const i64 r = ((ci * c.k + kz) * c.k + ky) * c.k + kx;
                    const float* srcbase = dcol + r * nc;
                    for (i64 cc = 0; cc < nc;) {
                        const i64 n = c0 + cc;
                        const i64 od = n / (dm.OH * dm.OW);
                        const i64 oh = (n / dm.OW) % dm.OH;
                        i64 ow = n % dm.OW;
                        const i64 run = std::min(nc - cc, dm.OW - ow);
                        const i64 iz = od * c.stride - c.pad + kz;
                        const i64 iy = oh * c.stride - c.pad + ky;
                        const float* src = srcbase + cc;
                        if (iz >= 0 && iz < dm.D && iy >= 0 && iy < dm.H) {
                            float* row = plane + (iz * dm.H + iy) * dm.W;
                            for (i64 t = 0; t < run; ++t) {
                                const i64 ix = (ow + t) * c.stride - c.pad + kx;
                                if (ix >= 0 && ix < dm.W) row[ix] += src[t];
                            }
                        }
                        cc += run;
                    }
                }
    }
}

// Cap the transient column buffer at ~32MB.
i64 chunk_columns(i64 K, i64 N) {
    const i64 max_floats = i64(1) << 17;
    return std::max<i64>(1, std::min(N, max_floats / std::max<i64>(K, 1)));
}

}  // namespace

Tensor Conv3d::forward(const Tensor& x) {
    if (x.rank() != 4 || x.dim(0) != cin)
        throw ArgumentError("Conv3d " + weight.name + ": input shape " + x.shape_str() +
                            " incompatible with cin=" + std::to_string(cin));
    cached_input = x;
    const ConvDims dm = conv_dims(*this, x.shape);
    Tensor y({cout, dm.OD, dm.OH, dm.OW});
    Map<RowMat> Wm(weight.w.ptr(), cout, dm.K);

    if (k == 1 && stride == 1) {
        Map<const RowMat> Xm(x.ptr(), cin, dm.N);
        Map<RowMat> Ym(y.ptr(), cout, dm.N);
        Ym.noalias() = Wm * Xm;
    } else {
        const i64 chunk = chunk_columns(dm.K, dm.N);
        FloatVec col(std::size_t(dm.K * chunk));
        for (i64 c0 = 0; c0 < dm.N; c0 += chunk) {
            const i64 c1 = std::min(dm.N, c0 + chunk);
            im2col_chunk(*this, x.ptr(), dm, c0, c1, col.data());
            Map<RowMat> colm(col.data(), dm.K, c1 - c0);
            StridedMap<RowMat> Ym(y.ptr() + c0, cout, c1 - c0, Eigen::OuterStride<>(dm.N));
            Ym.noalias() = Wm * colm;
        }
    }
    for (i64 c = 0; c < cout; ++c) {
        float* row = y.ptr() + c * dm.N;
        const float b = bias.w[c];
        for (i64 i = 0; i < dm.N; ++i) row[i] += b;
    }
    return y;
}

Tensor Conv3d::backward(const Tensor& dy) {
    const Tensor& x = cached_input;
    const ConvDims dm = conv_dims(*this, x.shape);
    Tensor dx(x.shape);
    Map<RowMat> Wm(weight.w.ptr(), cout, dm.K);
    Map<RowMat> dWm(weight.g.ptr(), cout, dm.K);

    for (i64 c = 0; c < cout; ++c) {
        const float* row = dy.ptr() + c * dm.N;
        double acc = 0.0;
        for (i64 i = 0; i < dm.N; ++i) acc += row[i];
        bias.g[c] += float(acc);
    }

    if (k == 1 && stride == 1) {
        Map<const RowMat> Xm(x.ptr(), cin, dm.N);
        Map<const RowMat> dYm(dy.ptr(), cout, dm.N);
        dWm.noalias() += dYm * Xm.transpose();
        Map<RowMat> dXm(dx.ptr(), cin, dm.N);
        dXm.noalias() = Wm.transpose() * dYm;
        return dx;
    }

    const i64 chunk = chunk_columns(dm.K, dm.N);
    FloatVec col(std::size_t(dm.K * chunk));
    FloatVec dcol(std::size_t(dm.K * chunk));
    for (i64 c0 = 0; c0 < dm.N; c0 += chunk) {
        const i64 c1 = std::min(dm.N, c0 + chunk);
        im2col_chunk(*this, x.ptr(), dm, c0, c1, col.data());
        Map<RowMat> colm(col.data(), dm.K, c1 - c0);
        StridedMap<const RowMat> dYm(dy.ptr() + c0, cout, c1 - c0, Eigen::OuterStride<>(dm.N));
        dWm.noalias() += dYm * colm.transpose();
        Map<RowMat> dcolm(dcol.data(), dm.K, c1 - c0);
        dcolm.noalias() = Wm.transpose() * dYm;
        col2im_chunk(*this, dx.ptr(), dm, c0, c1, dcol.data());
    }
    return dx;
}

// ------------------------------------------------------------- GroupNorm

namespace {
int pick_groups(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}
}  // namespace

GroupNorm::GroupNorm(const std::string& name, int channels_)
    : channels(channels_), groups(pick_groups(channels_)),
      gamma(name + ".g", {channels_}), beta(name + ".b", {channels_}) {
    std::fill(gamma.w.data.begin(), gamma.w.data.end(), 1.0f);
}

Tensor GroupNorm::forward(const Tensor& x) {
    const i64 C = x.dim(0);
    const i64 S = x.numel() / C;
    const i64 cpg = C / groups;
    const i64 m = cpg * S;
    Tensor y(x.shape);
    cached_xhat = Tensor(x.shape);
    cached_inv_std.assign(std::size_t(groups), 0.0);
    for (int g = 0; g < groups; ++g) {
        const float* xg = x.ptr() + i64(g) * cpg * S;
        double sum = 0.0, sq = 0.0;
        for (i64 i = 0; i < m; ++i) {
            sum += xg[i];
            sq += double(xg[i]) * double(xg[i]);
        }
        const double mean = sum / double(m);
        const double var = std::max(0.0, sq / double(m) - mean * mean);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        cached_inv_std[std::size_t(g)] = inv_std;
        float* xh = cached_xhat.ptr() + i64(g) * cpg * S;
        float* yg = y.ptr() + i64(g) * cpg * S;
        for (i64 c = 0; c < cpg; ++c) {
            const float gam = gamma.w[i64(g) * cpg + c];
            const float bet = beta.w[i64(g) * cpg + c];
            for (i64 i = 0; i < S; ++i) {
                const float v = float((double(xg[c * S + i]) - mean) * inv_std);
                xh[c * S + i] = v;
                yg[c * S + i] = gam * v + bet;
            }
        }
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& dy) {
    const i64 C = dy.dim(0);
    const i64 S = dy.numel() / C;
    const i64 cpg = C / groups;
    const i64 m = cpg * S;
    Tensor dx(dy.shape);
    for (i64 c = 0; c < C; ++c) {
        const float* d = dy.ptr() + c * S;
        const float* xh = cached_xhat.ptr() + c * S;
        double dg = 0.0, db = 0.0;
        for (i64 i = 0; i < S; ++i) {
            dg += double(d[i]) * double(xh[i]);
            db += d[i];
        }
        gamma.g[c] += float(dg);
        beta.g[c] += float(db);
    }
    for (int g = 0; g < groups; ++g) {
        const float* d = dy.ptr() + i64(g) * cpg * S;
        const float* xh = cached_xhat.ptr() + i64(g) * cpg * S;
        float* dxg = dx.ptr() + i64(g) * cpg * S;
        double s1 = 0.0, s2 = 0.0;
        for (i64 c = 0; c < cpg; ++c) {
            const double gam = gamma.w[i64(g) * cpg + c];
            for (i64 i = 0; i < S; ++i) {
                const double dxh = double(d[c * S + i]) * gam;
                s1 += dxh;
                s2 += dxh * double(xh[c * S + i]);
            }
        }
        const double inv_m = 1.0 / double(m);
        const double inv_std = cached_inv_std[std::size_t(g)];
        for (i64 c = 0; c < cpg; ++c) {
            const double gam = gamma.w[i64(g) * cpg + c];
            for (i64 i = 0; i < S; ++i) {
                const double dxh = double(d[c * S + i]) * gam;
                dxg[c * S + i] =
                    float(inv_std * (dxh - inv_m * (s1 + double(xh[c * S + i]) * s2)));
            }
        }
    }
    return dx;
}

// ------------------------------------------------------------ Activation

Tensor Activation::forward(const Tensor& x) {
    cached_input = x;
    Tensor y(x.shape);
    if (kind == ActKind::silu) {
        for (i64 i = 0; i < x.numel(); ++i) {
            const float s = 1.0f / (1.0f + std::exp(-x[i]));
            y[i] = x[i] * s;
        }
    } else {
        for (i64 i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : leaky_slope * x[i];
    }
    return y;
}

Tensor Activation::backward(const Tensor& dy) {
    const Tensor& x = cached_input;
    Tensor dx(dy.shape);
    if (kind == ActKind::silu) {
        for (i64 i = 0; i < dy.numel(); ++i) {
            const float s = 1.0f / (1.0f + std::exp(-x[i]));
            dx[i] = dy[i] * s * (1.0f + x[i] * (1.0f - s));
        }
    } else {
        for (i64 i = 0; i < dy.numel(); ++i) dx[i] = x[i] > 0.0f ? dy[i] : leaky_slope * dy[i];
    }
    return dx;
}

Tensor ScaledSigmoid::forward(const Tensor& x) {
    cached_sig = Tensor(x.shape);
    Tensor y(x.shape);
    for (i64 i = 0; i < x.numel(); ++i) {
        const float s = 1.0f / (1.0f + std::exp(-x[i]));
        cached_sig[i] = s;
        y[i] = 2.0f * s - 1.0f;
    }
    return y;
}

Tensor ScaledSigmoid::backward(const Tensor& dy) {
    Tensor dx(dy.shape);
    for (i64 i = 0; i < dy.numel(); ++i) {
        const float s = cached_sig[i];
        dx[i] = dy[i] * 2.0f * s * (1.0f - s);
    }
    return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, int nin_, int nout_)
    : nin(nin_), nout(nout_), weight(name + ".w", {nout_, nin_}), bias(name + ".b", {nout_}) {}

void Linear::init(Rng& rng, float gain) {
    weight.w.fill_normal(rng, gain * std::sqrt(2.0f / float(nin)));
    std::fill(bias.w.data.begin(), bias.w.data.end(), 0.0f);
}

Tensor Linear::forward(const Tensor& x) {
    cached_input = x;
    Tensor y({nout});
    for (i64 o = 0; o < nout; ++o) {
        const float* wr = weight.w.ptr() + o * nin;
        double acc = bias.w[o];
        for (i64 i = 0; i < nin; ++i) acc += double(wr[i]) * double(x[i]);
        y[o] = float(acc);
    }
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    const Tensor& x = cached_input;
    Tensor dx({nin});
    for (i64 o = 0; o < nout; ++o) {
        const float d = dy[o];
        bias.g[o] += d;
        float* gw = weight.g.ptr() + o * nin;
        const float* wr = weight.w.ptr() + o * nin;
        for (i64 i = 0; i < nin; ++i) {
            gw[i] += d * x[i];
            dx[i] += d * wr[i];
        }
    }
    return dx;
}

// ------------------------------------------------------------- Upsample2x

Tensor Upsample2x::forward(const Tensor& x) {
    cached_in_shape = x.shape;
    const i64 C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({C, 2 * D, 2 * H, 2 * W});
    for (i64 c = 0; c < C; ++c)
        for (i64 z = 0; z < 2 * D; ++z)
            for (i64 yy = 0; yy < 2 * H; ++yy) {
                const float* src = x.ptr() + ((c * D + z / 2) * H + yy / 2) * W;
                float* dst = y.ptr() + ((c * 2 * D + z) * 2 * H + yy) * 2 * W;
                for (i64 xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
            }
    return y;
}

Tensor Upsample2x::backward(const Tensor& dy) {
    const i64 C = cached_in_shape[0], D = cached_in_shape[1], H = cached_in_shape[2],
              W = cached_in_shape[3];
    Tensor dx(cached_in_shape);
    for (i64 c = 0; c < C; ++c)
        for (i64 z = 0; z < 2 * D; ++z)
            for (i64 yy = 0; yy < 2 * H; ++yy) {
                float* dst = dx.ptr() + ((c * D + z / 2) * H + yy / 2) * W;
                const float* src = dy.ptr() + ((c * 2 * D + z) * 2 * H + yy) * 2 * W;
                for (i64 xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
            }
    return dx;
}

// --------------------------------------------------------- AttentionBlock

AttentionBlock::AttentionBlock(const std::string& name, int channels_)
    : channels(channels_), norm(name + ".norm", channels_),
      q(name + ".q", channels_, channels_, 1), k(name + ".k", channels_, channels_, 1),
      v(name + ".v", channels_, channels_, 1), proj(name + ".proj", channels_, channels_, 1) {}

void AttentionBlock::init(Rng& rng) {
    q.init(rng);
    k.init(rng);
    v.init(rng);
    proj.init_zero();  // block starts as identity
}

Tensor AttentionBlock::forward(const Tensor& x) {
    const i64 C = x.dim(0);
    const i64 N = x.numel() / C;
    cached_normed = norm.forward(x);
    cached_q = q.forward(cached_normed);
    cached_k = k.forward(cached_normed);
    cached_v = v.forward(cached_normed);
    const float scale = 1.0f / std::sqrt(float(C));

    Map<const RowMat> qm(cached_q.ptr(), C, N);
    Map<const RowMat> km(cached_k.ptr(), C, N);
    Map<const RowMat> vm(cached_v.ptr(), C, N);

    cached_attn = Tensor({N, N});
    Map<RowMat> A(cached_attn.ptr(), N, N);
    A.noalias() = (qm.transpose() * km) * scale;
    for (i64 j = 0; j < N; ++j) {
        float* row = cached_attn.ptr() + j * N;
        float mx = row[0];
        for (i64 i = 1; i < N; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (i64 i = 0; i < N; ++i) {
            row[i] = std::exp(row[i] - mx);
            sum += row[i];
        }
        const float inv = float(1.0 / sum);
        for (i64 i = 0; i < N; ++i) row[i] *= inv;
    }

    cached_h = Tensor(x.shape);
    Map<RowMat> hm(cached_h.ptr(), C, N);
    hm.noalias() = vm * A.transpose();
    Tensor out = proj.forward(cached_h);
    for (i64 i = 0; i < out.numel(); ++i) out[i] += x[i];
    return out;
}

Tensor AttentionBlock::backward(const Tensor& dy) {
    const i64 C = dy.dim(0);
    const i64 N = dy.numel() / C;
    const float scale = 1.0f / std::sqrt(float(C));

    Tensor dh = proj.backward(dy);
    Map<const RowMat> dhm(dh.ptr(), C, N);
    Map<const RowMat> A(cached_attn.ptr(), N, N);
    Map<const RowMat> qm(cached_q.ptr(), C, N);
    Map<const RowMat> km(cached_k.ptr(), C, N);
    Map<const RowMat> vm(cached_v.ptr(), C, N);

    Tensor dv(cached_v.shape);
    Map<RowMat> dvm(dv.ptr(), C, N);
    dvm.noalias() = dhm * A;

    RowMat dA(N, N);
    dA.noalias() = dhm.transpose() * vm;

    // softmax backward, row-wise
    RowMat dS(N, N);
    for (i64 j = 0; j < N; ++j) {
        double dot = 0.0;
        for (i64 i = 0; i < N; ++i) dot += double(dA(j, i)) * double(A(j, i));
        for (i64 i = 0; i < N; ++i) dS(j, i) = A(j, i) * (dA(j, i) - float(dot));
    }

    Tensor dq(cached_q.shape), dk(cached_k.shape);
    Map<RowMat> dqm(dq.ptr(), C, N);
    Map<RowMat> dkm(dk.ptr(), C, N);
    dqm.noalias() = (km * dS.transpose()) * scale;
    dkm.noalias() = (qm * dS) * scale;

    Tensor dnormed = q.backward(dq);
    Tensor dn2 = k.backward(dk);
    Tensor dn3 = v.backward(dv);
    for (i64 i = 0; i < dnormed.numel(); ++i) dnormed[i] += dn2[i] + dn3[i];
    Tensor dx = norm.backward(dnormed);
    for (i64 i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    return dx;
}

void AttentionBlock::collect(std::vector<Param*>& out) {
    norm.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    proj.collect(out);
}

// --------------------------------------------------------------- ResBlock

ResBlock::ResBlock(const std::string& name, int cin_, int cout_, int emb_dim_, ActKind act)
    : cin(cin_), cout(cout_), emb_dim(emb_dim_), gn1(name + ".gn1", cin_),
      gn2(name + ".gn2", cout_), act1(act), act2(act), act_emb(ActKind::silu),
      conv1(name + ".conv1", cin_, cout_, 3), conv2(name + ".conv2", cout_, cout_, 3),
      has_skip(cin_ != cout_) {
    if (has_skip) skip = Conv3d(name + ".skip", cin_, cout_, 1);
    if (emb_dim_ > 0) emb_lin = Linear(name + ".emb", emb_dim_, cout_);
}

void ResBlock::init(Rng& rng) {
    conv1.init(rng);
    conv2.init_zero();
    if (has_skip) skip.init(rng);
    if (emb_dim > 0) emb_lin.init(rng);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor* emb) {
    Tensor h = conv1.forward(act1.forward(gn1.forward(x)));
    if (emb_dim > 0) {
        cached_emb_act = act_emb.forward(*emb);
        Tensor eb = emb_lin.forward(cached_emb_act);
        const i64 S = h.numel() / h.dim(0);
        for (i64 c = 0; c < h.dim(0); ++c) {
            float* row = h.ptr() + c * S;
            for (i64 i = 0; i < S; ++i) row[i] += eb[c];
        }
    }
    Tensor out = conv2.forward(act2.forward(gn2.forward(h)));
    if (has_skip) {
        Tensor sk = skip.forward(x);
        for (i64 i = 0; i < out.numel(); ++i) out[i] += sk[i];
    } else {
        for (i64 i = 0; i < out.numel(); ++i) out[i] += x[i];
    }
    return out;
}

Tensor ResBlock::backward(const Tensor& dy, Tensor* demb_out) {
    Tensor dh = gn2.backward(act2.backward(conv2.backward(dy)));
    if (emb_dim > 0) {
        const i64 S = dh.numel() / dh.dim(0);
        Tensor deb({cout});
        for (i64 c = 0; c < dh.dim(0); ++c) {
            const float* row = dh.ptr() + c * S;
            double acc = 0.0;
            for (i64 i = 0; i < S; ++i) acc += row[i];
            deb[c] = float(acc);
        }
        Tensor demb = act_emb.backward(emb_lin.backward(deb));
        if (demb_out) demb_out->add_scaled(demb, 1.0f);
    }
    Tensor dx = gn1.backward(act1.backward(conv1.backward(dh)));
    if (has_skip) {
        Tensor dsk = skip.backward(dy);
        for (i64 i = 0; i < dx.numel(); ++i) dx[i] += dsk[i];
    } else {
        for (i64 i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    }
    return dx;
}

void ResBlock::collect(std::vector<Param*>& out) {
    gn1.collect(out);
    conv1.collect(out);
    if (emb_dim > 0) emb_lin.collect(out);
    gn2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

// ---------------------------------------------------------------- helpers

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        throw ArgumentError("concat_channels: spatial shapes differ: " + a.shape_str() + " vs " +
                            b.shape_str());
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
    std::memcpy(out.ptr(), a.ptr(), std::size_t(a.numel()) * sizeof(float));
    std::memcpy(out.ptr() + a.numel(), b.ptr(), std::size_t(b.numel()) * sizeof(float));
    return out;
}

void split_channels(const Tensor& d, i64 ca, Tensor& da, Tensor& db) {
    da = Tensor({ca, d.dim(1), d.dim(2), d.dim(3)});
    db = Tensor({d.dim(0) - ca, d.dim(1), d.dim(2), d.dim(3)});
    std::memcpy(da.ptr(), d.ptr(), std::size_t(da.numel()) * sizeof(float));
    std::memcpy(db.ptr(), d.ptr() + da.numel(), std::size_t(db.numel()) * sizeof(float));
}

Tensor sinusoidal_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw ArgumentError("sinusoidal_embedding: dim must be even and >= 2");
    const int half = dim / 2;
    Tensor e({dim});
    for (int i = 0; i < half; ++i) {
        const double f =
            half > 1 ? std::exp(-std::log(10000.0) * double(i) / double(half - 1)) : 1.0;
        e[i] = float(std::sin(t * f));
        e[half + i] = float(std::cos(t * f));
    }
    return e;
}

// ----------------------------------------------------------------- AdamW

void AdamW::step(const std::vector<Param*>& params) {
    if (m.empty()) {
        m.resize(params.size());
        v.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            m[p].assign(params[p]->w.data.size(), 0.0f);
            v[p].assign(params[p]->w.data.size(), 0.0f);
        }
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, double(step_count));
    const double bc2 = 1.0 - std::pow(beta2, double(step_count));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Param& par = *params[p];
        float* mp = m[p].data();
        float* vp = v[p].data();
        for (std::size_t i = 0; i < par.w.data.size(); ++i) {
            const double g = par.g.data[i];
            mp[i] = float(beta1 * mp[i] + (1.0 - beta1) * g);
            vp[i] = float(beta2 * vp[i] + (1.0 - beta2) * g * g);
            const double mhat = mp[i] / bc1;
            const double vhat = vp[i] / bc2;
            par.w.data[i] = float(double(par.w.data[i]) -
                                  lr * (mhat / (std::sqrt(vhat) + eps) +
                                        weight_decay * double(par.w.data[i])));
        }
    }
}

void zero_grads(const std::vector<Param*>& params) {
    for (Param* p : params) p->zero_grad();
}

// ------------------------------------------------------------ checkpoints

static constexpr char kMagic[8] = {'V', 'X', 'G', 'C', 'K', 'P', 'T', '1'};

const FloatVec* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, a] : arrays)
        if (n == name) return &a;
    return nullptr;
}

void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::ordered_json& config, const std::vector<Param*>& params) {
    nlohmann::ordered_json header;
    header["kind"] = kind;
    header["config"] = config;
    auto arrays = nlohmann::ordered_json::array();
    for (const Param* p : params)
        arrays.push_back({{"name", p->name}, {"count", p->w.data.size()}});
    header["arrays"] = arrays;
    const std::string hs = header.dump();

    const std::string tmp = path + ".partial";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("save_checkpoint: cannot open " + tmp + " for writing");
        f.write(kMagic, 8);
        const std::uint64_t hlen = hs.size();
        f.write(reinterpret_cast<const char*>(&hlen), 8);
        f.write(hs.data(), std::streamsize(hs.size()));
        for (const Param* p : params)
            f.write(reinterpret_cast<const char*>(p->w.data.data()),
                    std::streamsize(p->w.data.size() * sizeof(float)));
        if (!f) throw IoError("save_checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("load_checkpoint: " + path + " is not a checkpoint file (bad magic)");
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw IoError("load_checkpoint: truncated header in " + path);
    Checkpoint ck;
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(hs);
    } catch (const std::exception& e) {
        throw IoError("load_checkpoint: bad header JSON in " + path + ": " + e.what());
    }
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    for (const auto& a : header.at("arrays")) {
        const std::string name = a.at("name").get<std::string>();
        const std::size_t count = a.at("count").get<std::size_t>();
        FloatVec data(count);
        f.read(reinterpret_cast<char*>(data.data()), std::streamsize(count * sizeof(float)));
        if (!f) throw IoError("load_checkpoint: truncated array '" + name + "' in " + path);
        ck.arrays.emplace_back(name, std::move(data));
    }
    return ck;
}

void restore_params(const Checkpoint& ck, const std::vector<Param*>& params) {
    for (Param* p : params) {
        const FloatVec* a = ck.find(p->name);
        if (!a)
            throw ConfigError("checkpoint missing parameter '" + p->name + "' (kind " + ck.kind +
                              ")");
        if (a->size() != p->w.data.size())
            throw ConfigError("checkpoint parameter '" + p->name + "' has " +
                              std::to_string(a->size()) + " values, model expects " +
                              std::to_string(p->w.data.size()));
        std::copy(a->begin(), a->end(), p->w.data.begin());
    }
}

}  // namespace voxgen::nn

namespace voxgen {

double decayed_lr(double base, const std::string& policy, int epoch, int total_epochs) {
    if (policy == "none" || total_epochs <= 1) return base;
    if (policy != "cosine")
        throw ArgumentError("lr_decay must be 'none' or 'cosine', got '" + policy + "'");
    const double u = double(epoch) / double(total_epochs - 1);
    const double floor = 0.05;
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * u)));
}

}  // namespace voxgen
