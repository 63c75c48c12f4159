#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxgen/rng.hpp"
#include "voxgen/tensor.hpp"

// Minimal training stack for the 3D models: explicit forward/backward per
// layer, single-sample tensors (C,D,H,W), float storage, Eigen GEMM inside
// the convolutions. Backward must be called right after the matching forward
// (each layer keeps one cache slot); parameter gradients accumulate until
// zero_grad.

namespace voxgen::nn {

struct Param {
    std::string name;
    Tensor w;
    Tensor g;

    Param() = default;
    Param(std::string n, std::vector<i64> shape)
        : name(std::move(n)), w(shape), g(std::move(shape)) {}
    void zero_grad() { std::fill(g.data.begin(), g.data.end(), 0.0f); }
};

enum class ActKind { silu, leaky_relu };
ActKind act_kind_from_string(const std::string& s);

struct Conv3d {
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    Param weight, bias;
    Tensor cached_input;

    Conv3d() = default;
    Conv3d(const std::string& name, int cin_, int cout_, int k_, int stride_ = 1);
    void init(Rng& rng, float gain = 1.0f);
    void init_zero();
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

struct GroupNorm {
    int channels = 0, groups = 1;
    double eps = 1e-5;
    Param gamma, beta;
    Tensor cached_xhat;
    std::vector<double> cached_inv_std;

    GroupNorm() = default;
    GroupNorm(const std::string& name, int channels_);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

struct Activation {
    ActKind kind = ActKind::silu;
    float leaky_slope = 0.2f;
    Tensor cached_input;

    explicit Activation(ActKind k = ActKind::silu) : kind(k) {}
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// 2*sigmoid(x) - 1, the output squashing of the autoencoder decoder.
struct ScaledSigmoid {
    Tensor cached_sig;
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

struct Linear {
    int nin = 0, nout = 0;
    Param weight, bias;
    Tensor cached_input;

    Linear() = default;
    Linear(const std::string& name, int nin_, int nout_);
    void init(Rng& rng, float gain = 1.0f);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

// Nearest-neighbor 2x upsampling on (C,D,H,W).
struct Upsample2x {
    std::vector<i64> cached_in_shape;
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// Single-head self-attention over flattened voxels with a GroupNorm in
// front and a residual connection. Used at coarse resolutions only.
struct AttentionBlock {
    int channels = 0;
    GroupNorm norm;
    Conv3d q, k, v, proj;  // all 1x1
    Tensor cached_normed, cached_q, cached_k, cached_v, cached_attn, cached_h;

    AttentionBlock() = default;
    AttentionBlock(const std::string& name, int channels_);
    void init(Rng& rng);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out);
};

// norm -> act -> conv -> (+ time embedding bias) -> norm -> act -> conv,
// with identity or 1x1 skip. Second conv starts at zero.
struct ResBlock {
    int cin = 0, cout = 0, emb_dim = 0;
    GroupNorm gn1, gn2;
    Activation act1, act2, act_emb;
    Conv3d conv1, conv2, skip;  // skip used when cin != cout
    Linear emb_lin;
    bool has_skip = false;
    Tensor cached_emb_act;

    ResBlock() = default;
    ResBlock(const std::string& name, int cin_, int cout_, int emb_dim_, ActKind act);
    void init(Rng& rng);
    Tensor forward(const Tensor& x, const Tensor* emb);
    // demb_out accumulates the gradient w.r.t. the embedding vector
    Tensor backward(const Tensor& dy, Tensor* demb_out);
    void collect(std::vector<Param*>& out);
};

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, i64 ca, Tensor& da, Tensor& db);

// Classic sinusoidal timestep features of even dimension `dim`.
Tensor sinusoidal_embedding(double t, int dim);

struct AdamW {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
    i64 step_count = 0;
    std::vector<FloatVec> m, v;

    void step(const std::vector<Param*>& params);
};

void zero_grads(const std::vector<Param*>& params);

// Versioned checkpoint container: JSON header (kind, config, array
// directory) followed by raw little-endian float32 payloads.
struct Checkpoint {
    std::string kind;
    nlohmann::ordered_json config;
    std::vector<std::pair<std::string, FloatVec>> arrays;

    const FloatVec* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::ordered_json& config, const std::vector<Param*>& params);
Checkpoint load_checkpoint(const std::string& path);
// copies arrays into params; throws ConfigError on any name/size mismatch
void restore_params(const Checkpoint& ck, const std::vector<Param*>& params);

}  // namespace voxgen::nn

namespace voxgen {

// Per-epoch mean loss curve shared by every training loop.
struct TrainLog {
    std::vector<double> epoch_loss;
};

// Per-epoch learning rate under the configured decay policy.
double decayed_lr(double base, const std::string& policy, int epoch, int total_epochs);

}  // namespace voxgen
