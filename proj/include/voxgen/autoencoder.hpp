#pragma once

#include <vector>

#include "voxgen/nn.hpp"
#include "voxgen/volume.hpp"

namespace voxgen {

// 4-channel latent at 1/4 resolution per axis: (4, D/4, H/4, W/4).
using LatentCode = Tensor;

// Convolutional autoencoder with exactly two 2x downsampling stages
// (overall factor 4 per axis) and a 4-channel latent bottleneck. The
// decoder output is squashed to [-1,1].
struct AutoencoderSpec {
    std::vector<int> channels{32, 64, 96};  // widths at full, 1/2, 1/4 resolution
    int latent_channels = 4;
    int num_res = 1;
    std::string act = "leaky_relu";

    nlohmann::ordered_json to_json() const;
    static AutoencoderSpec from_json(const nlohmann::ordered_json& j);
    void validate() const;
};

struct Autoencoder {
    AutoencoderSpec spec;

    // encoder
    nn::Conv3d e_in;
    std::vector<std::vector<nn::ResBlock>> e_res;  // 3 levels
    std::vector<nn::Conv3d> e_down;                // 2 stride-2 convs
    nn::GroupNorm e_gn;
    nn::Activation e_act;
    nn::Conv3d e_out;
    // decoder
    nn::Conv3d d_in;
    std::vector<std::vector<nn::ResBlock>> d_res;
    std::vector<nn::Upsample2x> d_up;
    std::vector<nn::Conv3d> d_up_conv;
    nn::GroupNorm d_gn;
    nn::Activation d_act;
    nn::Conv3d d_out;
    nn::ScaledSigmoid d_squash;

    explicit Autoencoder(const AutoencoderSpec& s);
    void init(Rng& rng);
    std::vector<nn::Param*> params();

    Tensor encode_tensor(const Tensor& x);   // (1,D,H,W) -> (4,D/4,H/4,W/4)
    Tensor decode_tensor(const Tensor& z);
    Tensor encode_backward(const Tensor& dz);
    Tensor decode_backward(const Tensor& dx);

    LatentCode encode(const Volume& v);
    Volume decode(const LatentCode& z, const std::array<double, 3>& spacing = {1, 1, 1});
};

Tensor tensor_from_volume(const Volume& v);
Volume volume_from_tensor(const Tensor& t, const std::array<double, 3>& spacing = {1, 1, 1});

struct TrainHp {
    int epochs = 10;
    int batch = 4;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    std::string lr_decay = "none";  // "none" | "cosine" (to 5% over the run)
    std::uint64_t seed = 0;
};

// MSE reconstruction + latent_reg * mean(z^2). Deterministic in (data, hp).
TrainLog train_autoencoder(Autoencoder& ae, const std::vector<Volume>& train,
                           const TrainHp& hp, double latent_reg);

// Mean reconstruction MSE over a set.
double autoencoder_eval_mse(Autoencoder& ae, const std::vector<Volume>& vols);

void save_autoencoder(const Autoencoder& ae, const std::string& path);
Autoencoder load_autoencoder(const std::string& path);

}  // namespace voxgen
