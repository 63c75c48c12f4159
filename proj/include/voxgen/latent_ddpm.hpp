#pragma once

#include "voxgen/autoencoder.hpp"
#include "voxgen/schedule.hpp"
#include "voxgen/unet.hpp"

namespace voxgen {

// Unconditional DDPM over the autoencoder latent space, trained with
// velocity prediction. Latents are divided by latent_scale (global std of
// the training latents) so the diffusion prior is approximately unit
// variance.
struct LatentDdpm {
    UNet3d net;
    DiffusionSchedule sched;
    double latent_scale = 1.0;
    std::vector<i64> latent_shape;  // (4, d, h, w)

    explicit LatentDdpm(const DenoiserSpec& spec, DiffusionSchedule s)
        : net(spec), sched(std::move(s)) {}
};

struct DdpmTrainHp {
    int epochs = 10;
    int batch = 4;
    double lr = 2.5e-5;
    double weight_decay = 0.0;
    std::string lr_decay = "none";
    std::uint64_t seed = 0;
};

// Velocity-prediction MSE over random (latent, t, eps) draws.
TrainLog train_latent_ddpm(LatentDdpm& model, const std::vector<LatentCode>& latents,
                           const DdpmTrainHp& hp);

// Held-out velocity-prediction loss with a fixed evaluation stream.
double latent_ddpm_eval_loss(LatentDdpm& model, const std::vector<LatentCode>& latents,
                             std::uint64_t seed, int draws_per_latent = 4);

// Full ancestral reverse chain from pure noise. Deterministic given rng.
// Returns a latent in model (unscaled) space, i.e. already * latent_scale.
LatentCode sample_latent(LatentDdpm& model, Rng& rng);

// decode(sample_latent(...)) with the autoencoder.
Volume generate(Autoencoder& ae, LatentDdpm& model, Rng& rng,
                const std::array<double, 3>& spacing = {1, 1, 1});

void save_latent_ddpm(const LatentDdpm& model, const std::string& path);
LatentDdpm load_latent_ddpm(const std::string& path);

}  // namespace voxgen
