#include "voxgen/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace voxgen {

const char* mask_kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::full: return "full";
        case MaskKind::inferior: return "inferior";
        case MaskKind::superior: return "superior";
        case MaskKind::anterior: return "anterior";
        case MaskKind::posterior: return "posterior";
        case MaskKind::left: return "left";
        case MaskKind::right: return "right";
        case MaskKind::arbitrary: return "arbitrary";
    }
    return "?";
}

Mask make_mask(MaskKind kind, int patch) {
    if (patch <= 0) throw ArgumentError("make_mask: patch must be positive");
    if (kind == MaskKind::arbitrary)
        throw ArgumentError("make_mask: arbitrary masks are built from coverage, not by kind");
    Mask m;
    m.kind = kind;
    m.patch = patch;
    m.data.assign(std::size_t(patch) * std::size_t(patch) * std::size_t(patch), 0);
    const int half = patch / 2;
    i64 i = 0;
    for (int z = 0; z < patch; ++z)
        for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x, ++i) {
                bool on = false;
                switch (kind) {
                    case MaskKind::full: on = true; break;
                    case MaskKind::inferior: on = z < half; break;
                    case MaskKind::superior: on = z >= half; break;
                    case MaskKind::anterior: on = y < half; break;
                    case MaskKind::posterior: on = y >= half; break;
                    case MaskKind::left: on = x < half; break;
                    case MaskKind::right: on = x >= half; break;
                    case MaskKind::arbitrary: break;
                }
                m.data[std::size_t(i)] = on ? 1 : 0;
            }
    return m;
}

Mask sample_training_mask(Rng& rng, int patch, double full_prob) {
    if (full_prob < 0.0 || full_prob > 1.0)
        throw ArgumentError("sample_training_mask: full_prob must be in [0,1]");
    const double u = rng.uniform();
    if (u < full_prob) return make_mask(MaskKind::full, patch);
    const int k = int(rng.uniform_int(6));
    return make_mask(MaskKind(int(MaskKind::inferior) + k), patch);
}

Tensor make_y_prev(const Tensor& x_patch, const Mask& mask, const Tensor& noise) {
    if (!x_patch.same_shape(noise))
        throw ArgumentError("make_y_prev: x_patch " + x_patch.shape_str() + " vs noise " +
                            noise.shape_str());
    if (x_patch.numel() != i64(mask.data.size()))
        throw ArgumentError("make_y_prev: mask size " + std::to_string(mask.data.size()) +
                            " != patch voxels " + std::to_string(x_patch.numel()));
    Tensor y(x_patch.shape);
    for (i64 i = 0; i < y.numel(); ++i) {
        const float m = mask.data[std::size_t(i)] ? 1.0f : 0.0f;
        y[i] = x_patch[i] * (1.0f - m) + noise[i] * m;
    }
    return y;
}

double masked_diffusion_loss(const Tensor& pred_noise, const Tensor& true_noise,
                             const Mask& mask) {
    if (!pred_noise.same_shape(true_noise))
        throw ArgumentError("masked_diffusion_loss: shape mismatch " + pred_noise.shape_str() +
                            " vs " + true_noise.shape_str());
    if (pred_noise.numel() != i64(mask.data.size()))
        throw ArgumentError("masked_diffusion_loss: mask size mismatch");
    const i64 count = mask.count();
    if (count == 0) throw ArgumentError("masked_diffusion_loss: empty mask (mean undefined)");
    double acc = 0.0;
    for (i64 i = 0; i < pred_noise.numel(); ++i) {
        if (!mask.data[std::size_t(i)]) continue;
        const double d = double(pred_noise[i]) - double(true_noise[i]);
        acc += d * d;
    }
    return acc / double(count);
}

Tensor masked_diffusion_loss_grad(const Tensor& pred_noise, const Tensor& true_noise,
                                  const Mask& mask) {
    const i64 count = mask.count();
    if (count == 0) throw ArgumentError("masked_diffusion_loss_grad: empty mask");
    Tensor g(pred_noise.shape);
    const float inv = float(2.0 / double(count));
    for (i64 i = 0; i < g.numel(); ++i)
        if (mask.data[std::size_t(i)]) g[i] = inv * (pred_noise[i] - true_noise[i]);
    return g;
}

TraversalPlan plan_traversal(const PatchGrid& grid) {
    if (grid.origins.empty()) throw ArgumentError("plan_traversal: empty grid");
    const int nx = int(grid.axis_origins[0].size());
    const int ny = int(grid.axis_origins[1].size());
    const int nz = int(grid.axis_origins[2].size());
    const std::array<int, 3> center{(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2};

    struct Item {
        int shell;
        std::array<i64, 3> origin;
        std::array<int, 3> idx;
    };
    std::vector<Item> items;
    for (int a = 0; a < nx; ++a)
        for (int b = 0; b < ny; ++b)
            for (int c = 0; c < nz; ++c) {
                const std::array<int, 3> idx{a, b, c};
                const int shell = std::max({std::abs(a - center[0]), std::abs(b - center[1]),
                                            std::abs(c - center[2])});
                items.push_back({shell,
                                 {grid.axis_origins[0][std::size_t(a)],
                                  grid.axis_origins[1][std::size_t(b)],
                                  grid.axis_origins[2][std::size_t(c)]},
                                 idx});
            }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
        if (a.shell != b.shell) return a.shell < b.shell;
        return a.origin < b.origin;
    });

    const int p = grid.patch_size;
    const Shape3 vs = grid.volume_shape;
    std::vector<std::uint8_t> covered(std::size_t(vs.numel()), 0);

    TraversalPlan plan;
    plan.grid = grid;
    for (const auto& it : items) {
        Mask m;
        m.kind = plan.entries.empty() ? MaskKind::full : MaskKind::arbitrary;
        m.patch = p;
        m.data.assign(std::size_t(p) * std::size_t(p) * std::size_t(p), 0);
        i64 fresh = 0, mi = 0;
        for (int z = 0; z < p; ++z)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x, ++mi) {
                    const i64 gi = linear_index(vs, it.origin[0] + z, it.origin[1] + y,
                                                it.origin[2] + x);
                    if (!covered[std::size_t(gi)]) {
                        m.data[std::size_t(mi)] = 1;
                        ++fresh;
                    }
                }
        if (fresh == 0) continue;  // fully covered by earlier patches: nothing to write
        mi = 0;
        for (int z = 0; z < p; ++z)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x, ++mi)
                    if (m.data[std::size_t(mi)])
                        covered[std::size_t(linear_index(vs, it.origin[0] + z, it.origin[1] + y,
                                                         it.origin[2] + x))] = 1;
        plan.entries.push_back({it.origin, it.idx, std::move(m)});
    }
    return plan;
}

std::uint64_t plan_hash(const TraversalPlan& plan) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (i * 8)) & 0xFF;
            h *= 1099511628211ULL;
        }
    };
    mix(std::uint64_t(plan.grid.patch_size));
    mix(std::uint64_t(plan.grid.stride));
    for (const auto& e : plan.entries) {
        for (i64 o : e.origin) mix(std::uint64_t(o));
        std::uint64_t acc = 0;
        int bits = 0;
        for (auto b : e.write_mask.data) {
            acc = (acc << 1) | (b ? 1u : 0u);
            if (++bits == 64) {
                mix(acc);
                acc = 0;
                bits = 0;
            }
        }
        if (bits) mix(acc);
    }
    return h;
}

namespace {

Tensor as_channel(Tensor patch) {
    const i64 p = patch.dim(0);
    patch.shape = {1, p, p, p};
    return patch;
}

void check_pairs(const std::vector<Volume>& clean, const std::vector<Volume>& coarse,
                 const char* who) {
    if (clean.empty() || clean.size() != coarse.size())
        throw ArgumentError(std::string(who) + ": need equally sized nonempty clean/coarse sets, got " +
                            std::to_string(clean.size()) + "/" + std::to_string(coarse.size()));
    for (std::size_t i = 0; i < clean.size(); ++i)
        if (clean[i].shape != coarse[i].shape || clean[i].shape != clean[0].shape)
            throw ArgumentError(std::string(who) + ": inconsistent volume shapes at pair " +
                                std::to_string(i));
}

std::array<i64, 3> random_origin(Rng& rng, const Shape3& s, int p) {
    return {rng.uniform_int(s.d - p + 1), rng.uniform_int(s.h - p + 1),
            rng.uniform_int(s.w - p + 1)};
}

}  // namespace

Tensor RefinerSample::input(const DiffusionSchedule& sched) const {
    const Tensor x_t = forward_diffuse(x_patch, t, noise, sched);
    return nn::concat_channels(nn::concat_channels(x_t, x_hat_patch), y_prev);
}

RefinerSample draw_refiner_sample(const Volume& clean, const Volume& coarse, int patch,
                                  const DiffusionSchedule& sched, double full_mask_prob,
                                  Rng& rng) {
    RefinerSample s;
    const auto origin = random_origin(rng, clean.shape, patch);
    s.x_patch = as_channel(extract_patch(clean, origin, patch));
    s.x_hat_patch = as_channel(extract_patch(coarse, origin, patch));
    s.t = int(rng.uniform_int(sched.T)) + 1;
    s.noise = Tensor(s.x_patch.shape);
    s.noise.fill_normal(rng);
    s.mask = sample_training_mask(rng, patch, full_mask_prob);
    Tensor g_noise(s.x_patch.shape);
    g_noise.fill_normal(rng);
    s.y_prev = make_y_prev(s.x_patch, s.mask, g_noise);
    return s;
}

TrainLog train_refiner(RefinerModel& model, const std::vector<Volume>& clean,
                       const std::vector<Volume>& coarse, const RefinerTrainHp& hp) {
    check_pairs(clean, coarse, "train_refiner");
    const int p = model.patch;
    if (p > clean[0].shape.d || p > clean[0].shape.h || p > clean[0].shape.w)
        throw ArgumentError("train_refiner: patch " + std::to_string(p) + " exceeds volume " +
                            clean[0].shape.str());
    auto params = model.net.params();
    nn::AdamW opt;
    opt.lr = hp.lr;
    opt.weight_decay = hp.weight_decay;
    Rng rng(hp.seed);

    std::vector<std::size_t> order;
    for (std::size_t v = 0; v < clean.size(); ++v)
        for (int k = 0; k < hp.patches_per_volume; ++k) order.push_back(v);

    TrainLog log;
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
                const std::size_t vi = order[bi];
                const RefinerSample s = draw_refiner_sample(clean[vi], coarse[vi], p,
                                                            model.sched, hp.full_mask_prob, rng);
                const Tensor pred = model.net.forward(s.input(model.sched), double(s.t));
                epoch_loss += masked_diffusion_loss(pred, s.noise, s.mask);
                model.net.backward(masked_diffusion_loss_grad(pred, s.noise, s.mask));
                ++n_seen;
            }
            for (auto* par : params)
                for (auto& g : par->g.data) g *= 1.0f / float(end - start);
            opt.step(params);
        }
        log.epoch_loss.push_back(epoch_loss / double(n_seen));
    }
    return log;
}

double refiner_eval_loss(RefinerModel& model, const std::vector<Volume>& clean,
                         const std::vector<Volume>& coarse, std::uint64_t seed,
                         int draws_per_volume) {
    check_pairs(clean, coarse, "refiner_eval_loss");
    Rng rng(seed);
    const int p = model.patch;
    double acc = 0.0;
    i64 count = 0;
    for (std::size_t vi = 0; vi < clean.size(); ++vi)
        for (int k = 0; k < draws_per_volume; ++k) {
            const RefinerSample s =
                draw_refiner_sample(clean[vi], coarse[vi], p, model.sched, 0.1, rng);
            acc += masked_diffusion_loss(model.net.forward(s.input(model.sched), double(s.t)),
                                         s.noise, s.mask);
            ++count;
        }
    return acc / double(count);
}

Tensor refine_patch(RefinerModel& model, const Tensor& x_hat_patch, const Tensor& y_prev,
                    Rng& rng, double eta) {
    const int p = model.patch;
    const std::vector<i64> want{1, p, p, p};
    if (x_hat_patch.shape != want || y_prev.shape != want)
        throw ArgumentError("refine_patch: conditioning shape " + x_hat_patch.shape_str() +
                            " does not match training patch size " + std::to_string(p));
    if (eta < 0.0 || eta > 1.0) throw ArgumentError("refine_patch: eta must be in [0,1]");
    const DiffusionSchedule& s = model.sched;
    Tensor x(want);
    x.fill_normal(rng);
    const Tensor cond = nn::concat_channels(x_hat_patch, y_prev);
    for (int t = s.T; t >= 1; --t) {
        const Tensor input = nn::concat_channels(x, cond);
        const Tensor eps_hat = model.net.forward(input, double(t));
        const double a = std::sqrt(s.alpha_bar(t));
        const double b = std::sqrt(1.0 - s.alpha_bar(t));
        const double abar_prev = s.alpha_bar_prev(t);
        const double sigma = t > 1 ? eta * std::sqrt(s.posterior_var(t)) : 0.0;
        const double dir_coef = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
        const double sa_prev = std::sqrt(abar_prev);
        for (i64 i = 0; i < x.numel(); ++i) {
            const double x0 = (double(x[i]) - b * double(eps_hat[i])) / a;
            double next = sa_prev * x0 + dir_coef * double(eps_hat[i]);
            if (t > 1 && sigma > 0.0) next += sigma * rng.normal();
            x[i] = float(next);
        }
    }
    return x;
}

Volume refine_volume(RefinerModel& model, const Volume& x_hat, const PatchGrid& grid, Rng& rng,
                     double eta, std::vector<std::uint32_t>* write_count) {
    if (grid.volume_shape != x_hat.shape)
        throw ArgumentError("refine_volume: grid shape " + grid.volume_shape.str() +
                            " != volume shape " + x_hat.shape.str());
    if (grid.patch_size != model.patch)
        throw ArgumentError("refine_volume: grid patch " + std::to_string(grid.patch_size) +
                            " != model patch " + std::to_string(model.patch));
    const TraversalPlan plan = plan_traversal(grid);
    const int p = model.patch;

    Volume canvas(x_hat.shape);
    canvas.spacing = x_hat.spacing;
    canvas.intensity_range = x_hat.intensity_range;
    std::vector<std::uint8_t> written(std::size_t(x_hat.numel()), 0);
    if (write_count) write_count->assign(std::size_t(x_hat.numel()), 0);

    for (const auto& entry : plan.entries) {
        const Tensor x_hat_patch = [&] {
            Tensor t = extract_patch(x_hat, entry.origin, p);
            t.shape = {1, p, p, p};
            return t;
        }();
        // inference analog of the training construction: refined canvas
        // voxels where available, fresh noise elsewhere
        Tensor y_prev({1, p, p, p});
        i64 mi = 0;
        for (int z = 0; z < p; ++z)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x, ++mi) {
                    const i64 gi = linear_index(x_hat.shape, entry.origin[0] + z,
                                                entry.origin[1] + y, entry.origin[2] + x);
                    y_prev[mi] = written[std::size_t(gi)] ? canvas.data[std::size_t(gi)]
                                                          : rng.normalf();
                }
        Tensor refined = refine_patch(model, x_hat_patch, y_prev, rng, eta);
        refined.shape = {p, p, p};
        insert_patch(canvas, entry.origin, refined, entry.write_mask.data);
        mi = 0;
        for (int z = 0; z < p; ++z)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x, ++mi) {
                    if (!entry.write_mask.data[std::size_t(mi)]) continue;
                    const i64 gi = linear_index(x_hat.shape, entry.origin[0] + z,
                                                entry.origin[1] + y, entry.origin[2] + x);
                    written[std::size_t(gi)] = 1;
                    if (write_count) ++(*write_count)[std::size_t(gi)];
                }
    }
    return canvas;
}

void save_refiner(const RefinerModel& model, const std::string& path) {
    nlohmann::ordered_json cfg;
    cfg["denoiser"] = model.net.spec.to_json();
    cfg["schedule"] = {{"T", model.sched.T},
                       {"kind", model.sched.kind},
                       {"beta_start", model.sched.betas.front()},
                       {"beta_end", model.sched.betas.back()}};
    cfg["patch"] = model.patch;
    auto params = const_cast<RefinerModel&>(model).net.params();
    nn::save_checkpoint(path, "refiner", cfg, params);
}

RefinerModel load_refiner(const std::string& path) {
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    if (ck.kind != "refiner")
        throw ConfigError("load_refiner: " + path + " holds kind '" + ck.kind + "'");
    const auto& sj = ck.config.at("schedule");
    RefinerModel model(DenoiserSpec::from_json(ck.config.at("denoiser")),
                       make_schedule(sj.at("T").get<int>(), sj.at("beta_start").get<double>(),
                                     sj.at("beta_end").get<double>(),
                                     sj.at("kind").get<std::string>()),
                       ck.config.at("patch").get<int>());
    auto params = model.net.params();
    nn::restore_params(ck, params);
    return model;
}

}  // namespace voxgen
