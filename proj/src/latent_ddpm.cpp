#include "voxgen/latent_ddpm.hpp"

#include <cmath>
#include <numeric>

namespace voxgen {

static void scale_grads(const std::vector<nn::Param*>& params, float f) {
    for (auto* p : params)
        for (auto& g : p->g.data) g *= f;
}

static double compute_latent_scale(const std::vector<LatentCode>& latents) {
    double sq = 0.0;
    i64 n = 0;
    for (const auto& z : latents) {
        for (i64 i = 0; i < z.numel(); ++i) sq += double(z[i]) * double(z[i]);
        n += z.numel();
    }
    const double std_dev = std::sqrt(sq / double(n));
    return std_dev > 1e-8 ? std_dev : 1.0;
}

TrainLog train_latent_ddpm(LatentDdpm& model, const std::vector<LatentCode>& latents,
                           const DdpmTrainHp& hp) {
    if (latents.empty()) throw ArgumentError("train_latent_ddpm: empty dataset");
    for (const auto& z : latents)
        if (z.shape != latents[0].shape)
            throw ArgumentError("train_latent_ddpm: inconsistent latent shapes " + z.shape_str() +
                                " vs " + latents[0].shape_str());
    model.latent_shape = latents[0].shape;
    model.latent_scale = compute_latent_scale(latents);
    const float inv_scale = float(1.0 / model.latent_scale);

    auto params = model.net.params();
    nn::AdamW opt;
    opt.lr = hp.lr;
    opt.weight_decay = hp.weight_decay;
    Rng rng(hp.seed);

    TrainLog log;
    std::vector<std::size_t> order(latents.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        opt.lr = decayed_lr(hp.lr, hp.lr_decay, epoch, hp.epochs);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[std::size_t(rng.uniform_int(i64(i)))]);
        double epoch_loss = 0.0;
        i64 n_seen = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(hp.batch)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(hp.batch));
            nn::zero_grads(params);
            for (std::size_t bi = start; bi < end; ++bi) {
                Tensor x0 = latents[order[bi]];
                x0.scale(inv_scale);
                const int t = int(rng.uniform_int(model.sched.T)) + 1;
                Tensor eps(x0.shape);
                eps.fill_normal(rng);
                const Tensor xt = forward_diffuse(x0, t, eps, model.sched);
                const Tensor target = velocity_target(x0, eps, t, model.sched);
                const Tensor pred = model.net.forward(xt, double(t));

                const i64 n = pred.numel();
                Tensor dpred(pred.shape);
                double loss = 0.0;
                for (i64 i = 0; i < n; ++i) {
                    const double diff = double(pred[i]) - double(target[i]);
                    loss += diff * diff;
                    dpred[i] = float(2.0 * diff / double(n));
                }
                model.net.backward(dpred);
                epoch_loss += loss / double(n);
                ++n_seen;
            }
            scale_grads(params, 1.0f / float(end - start));
            opt.step(params);
        }
        log.epoch_loss.push_back(epoch_loss / double(n_seen));
    }
    return log;
}

double latent_ddpm_eval_loss(LatentDdpm& model, const std::vector<LatentCode>& latents,
                             std::uint64_t seed, int draws_per_latent) {
    if (latents.empty()) throw ArgumentError("latent_ddpm_eval_loss: empty set");
    Rng rng(seed);
    const float inv_scale = float(1.0 / model.latent_scale);
    double acc = 0.0;
    i64 count = 0;
    for (const auto& latent : latents)
        for (int d = 0; d < draws_per_latent; ++d) {
            Tensor x0 = latent;
            x0.scale(inv_scale);
            const int t = int(rng.uniform_int(model.sched.T)) + 1;
            Tensor eps(x0.shape);
            eps.fill_normal(rng);
            const Tensor xt = forward_diffuse(x0, t, eps, model.sched);
            const Tensor target = velocity_target(x0, eps, t, model.sched);
            acc += mse(model.net.forward(xt, double(t)), target);
            ++count;
        }
    return acc / double(count);
}

LatentCode sample_latent(LatentDdpm& model, Rng& rng) {
    if (model.latent_shape.empty())
        throw ConfigError("sample_latent: model has no latent_shape (untrained checkpoint?)");
    const DiffusionSchedule& s = model.sched;
    Tensor x(model.latent_shape);
    x.fill_normal(rng);
    for (int t = s.T; t >= 1; --t) {
        const Tensor v = model.net.forward(x, double(t));
        const Tensor eps_hat = eps_from_velocity(x, v, t, s);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
        const double eps_coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
        const double sigma = t > 1 ? std::sqrt(s.posterior_var(t)) : 0.0;
        for (i64 i = 0; i < x.numel(); ++i) {
            double mu = inv_sqrt_alpha * (double(x[i]) - eps_coef * double(eps_hat[i]));
            if (t > 1) mu += sigma * rng.normal();
            x[i] = float(mu);
        }
    }
    x.scale(float(model.latent_scale));
    return x;
}

Volume generate(Autoencoder& ae, LatentDdpm& model, Rng& rng,
                const std::array<double, 3>& spacing) {
    return ae.decode(sample_latent(model, rng), spacing);
}

static nlohmann::ordered_json sched_to_json(const DiffusionSchedule& s) {
    // regenerate from parameters on load; betas are pinned by (T, range, kind)
    nlohmann::ordered_json j;
    j["T"] = s.T;
    j["kind"] = s.kind;
    j["beta_start"] = s.betas.front();
    j["beta_end"] = s.betas.back();
    return j;
}

static DiffusionSchedule sched_from_json(const nlohmann::ordered_json& j) {
    return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                         j.at("beta_end").get<double>(), j.at("kind").get<std::string>());
}

void save_latent_ddpm(const LatentDdpm& model, const std::string& path) {
    nlohmann::ordered_json cfg;
    cfg["denoiser"] = model.net.spec.to_json();
    cfg["schedule"] = sched_to_json(model.sched);
    cfg["latent_scale"] = model.latent_scale;
    cfg["latent_shape"] = model.latent_shape;
    auto params = const_cast<LatentDdpm&>(model).net.params();
    nn::save_checkpoint(path, "latent_ddpm", cfg, params);
}

LatentDdpm load_latent_ddpm(const std::string& path) {
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    if (ck.kind != "latent_ddpm")
        throw ConfigError("load_latent_ddpm: " + path + " holds kind '" + ck.kind + "'");
    LatentDdpm model(DenoiserSpec::from_json(ck.config.at("denoiser")),
                     sched_from_json(ck.config.at("schedule")));
    model.latent_scale = ck.config.at("latent_scale").get<double>();
    model.latent_shape = ck.config.at("latent_shape").get<std::vector<i64>>();
    auto params = model.net.params();
    nn::restore_params(ck, params);
    return model;
}

}  // namespace voxgen
