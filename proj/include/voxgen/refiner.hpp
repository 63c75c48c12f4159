#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxgen/schedule.hpp"
#include "voxgen/unet.hpp"
#include "voxgen/volume.hpp"

namespace voxgen {

// Binary mask over a cubic patch selecting the region the refiner must
// synthesize (true = synthesize). Training uses the full mask or one of six
// axis-aligned half-space masks; inference masks are arbitrary.
enum class MaskKind {
    full = 0,
    inferior,   // low half along axis 0
    superior,   // high half along axis 0
    anterior,   // low half along axis 1
    posterior,  // high half along axis 1
    left,       // low half along axis 2
    right,      // high half along axis 2
    arbitrary,
};

const char* mask_kind_name(MaskKind k);

struct Mask {
    MaskKind kind = MaskKind::full;
    int patch = 0;
    std::vector<std::uint8_t> data;  // p^3, true = synthesize

    i64 count() const {
        i64 c = 0;
        for (auto v : data) c += v ? 1 : 0;
        return c;
    }
};

Mask make_mask(MaskKind kind, int patch);

// full with probability full_prob, otherwise uniform over the six halves.
Mask sample_training_mask(Rng& rng, int patch, double full_prob = 0.1);

// y_prev = x_patch * (1 - M) + noise * M, element-wise.
Tensor make_y_prev(const Tensor& x_patch, const Mask& mask, const Tensor& noise);

// Mean squared error over masked voxels only; zero-gradient outside.
double masked_diffusion_loss(const Tensor& pred_noise, const Tensor& true_noise,
                             const Mask& mask);
// Companion gradient d(loss)/d(pred): 2*(pred-true)*M / count(M).
Tensor masked_diffusion_loss_grad(const Tensor& pred_noise, const Tensor& true_noise,
                                  const Mask& mask);

// One training/evaluation draw for the conditional refiner.
struct RefinerSample {
    Tensor x_patch;      // clean target patch (1,p,p,p)
    Tensor x_hat_patch;  // coarse patch at the same origin
    Tensor y_prev;       // guidance: clean outside the mask, noise inside
    Tensor noise;        // the epsilon the network must predict
    Mask mask;
    int t = 1;

    // network input: channel concat of (diffused x_patch, x_hat_patch, y_prev)
    Tensor input(const DiffusionSchedule& sched) const;
};

// Draws origin, timestep, noise, and mask from rng over a (clean, coarse)
// volume pair.
RefinerSample draw_refiner_sample(const Volume& clean, const Volume& coarse, int patch,
                                  const DiffusionSchedule& sched, double full_mask_prob,
                                  Rng& rng);

struct TraversalEntry {
    std::array<i64, 3> origin;
    std::array<int, 3> grid_index;
    Mask write_mask;  // voxels this entry writes (arbitrary kind except the first)
};

struct TraversalPlan {
    PatchGrid grid;
    std::vector<TraversalEntry> entries;
};

// Center patch first (full mask), then breadth-first Chebyshev shells over
// grid indices, ties lexicographic by origin. Each entry writes exactly the
// voxels of its patch not covered by earlier entries; fully covered patches
// are dropped. Every voxel is written exactly once across the plan.
TraversalPlan plan_traversal(const PatchGrid& grid);

std::uint64_t plan_hash(const TraversalPlan& plan);

// Conditional patch denoiser: predicts the noise residual from the noisy
// patch concatenated with (x_hat_patch, y_prev) plus timestep embedding.
struct RefinerModel {
    UNet3d net;
    DiffusionSchedule sched;
    int patch = 0;

    RefinerModel(const DenoiserSpec& spec, DiffusionSchedule s, int patch_)
        : net(spec), sched(std::move(s)), patch(patch_) {}
};

struct RefinerTrainHp {
    int epochs = 10;
    int batch = 4;
    int patches_per_volume = 8;  // random patch draws per volume per epoch
    double lr = 1e-5;
    double weight_decay = 0.0;
    std::string lr_decay = "none";
    double full_mask_prob = 0.1;
    std::uint64_t seed = 0;
};

// Trains on (clean, coarse) volume pairs: random uniformly-placed patch
// origins, random t / noise / mask per sample, masked epsilon-prediction
// loss.
TrainLog train_refiner(RefinerModel& model, const std::vector<Volume>& clean,
                       const std::vector<Volume>& coarse, const RefinerTrainHp& hp);

double refiner_eval_loss(RefinerModel& model, const std::vector<Volume>& clean,
                         const std::vector<Volume>& coarse, std::uint64_t seed,
                         int draws_per_volume = 4);

// Full reverse chain from pure noise conditioned on (x_hat_patch, y_prev).
// eta scales the per-step stochasticity: 1 is ancestral DDPM, 0 the
// deterministic DDIM limit (useful at coarse step counts). No per-step
// clipping; callers clip only on final export.
Tensor refine_patch(RefinerModel& model, const Tensor& x_hat_patch, const Tensor& y_prev,
                    Rng& rng, double eta = 1.0);

// Executes the traversal plan over a coarse volume. y_prev for each entry is
// assembled from already-refined canvas voxels (unwritten locations get fresh
// noise). write_count, when given, receives per-voxel write tallies.
Volume refine_volume(RefinerModel& model, const Volume& x_hat, const PatchGrid& grid, Rng& rng,
                     double eta = 1.0, std::vector<std::uint32_t>* write_count = nullptr);

void save_refiner(const RefinerModel& model, const std::string& path);
RefinerModel load_refiner(const std::string& path);

}  // namespace voxgen
