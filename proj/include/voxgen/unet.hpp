#pragma once

#include <memory>
#include <vector>

#include "voxgen/nn.hpp"

namespace voxgen {

// Config-driven 3D U-Net used by both the latent denoiser and the patch
// refiner. channels[i] is the width at level i (level 0 = input
// resolution, each further level is downsampled 2x).
struct DenoiserSpec {
    int in_channels = 1;
    int out_channels = 1;
    std::vector<int> channels{32, 64, 96};
    int num_res = 1;
    std::vector<int> attn_levels;  // level indices with self-attention
    bool attn_mid = true;
    int emb_dim = 64;
    std::string act = "silu";

    nlohmann::ordered_json to_json() const;
    static DenoiserSpec from_json(const nlohmann::ordered_json& j);
    void validate() const;
};

struct UNet3d {
    DenoiserSpec spec;

    nn::Linear mlp1, mlp2;
    nn::Activation mlp_act{nn::ActKind::silu};
    nn::Conv3d conv_in;
    std::vector<nn::Conv3d> downs;                     // level l-1 -> l, stride 2
    std::vector<std::vector<nn::ResBlock>> enc_res;    // per level
    std::vector<std::unique_ptr<nn::AttentionBlock>> enc_attn;
    nn::ResBlock mid1, mid2;
    std::unique_ptr<nn::AttentionBlock> mid_attn;
    std::vector<nn::ResBlock> dec_first;               // 2*ch[l] -> ch[l]
    std::vector<std::vector<nn::ResBlock>> dec_extra;  // ch[l] -> ch[l]
    std::vector<std::unique_ptr<nn::AttentionBlock>> dec_attn;
    std::vector<nn::Upsample2x> ups;                   // index j: level j+1 -> j
    std::vector<nn::Conv3d> up_convs;
    nn::GroupNorm gn_out;
    nn::Activation act_out;
    nn::Conv3d conv_out;

    std::vector<Tensor> cached_skips;
    Tensor cached_emb;

    explicit UNet3d(const DenoiserSpec& s);
    void init(Rng& rng);
    std::vector<nn::Param*> params();

    // x: (in_channels, D, H, W) with each spatial dim divisible by
    // 2^(levels-1); t is the integer timestep fed to the embedding.
    Tensor forward(const Tensor& x, double t);
    Tensor backward(const Tensor& dy);
};

}  // namespace voxgen
