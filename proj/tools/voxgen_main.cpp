// voxgen: phantom data creation, two-stage generative training (autoencoder +
// latent diffusion), patch-based diffusion refinement, and the realism metric
// suite, driven by a single JSON config.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "voxgen/config.hpp"
#include "voxgen/latent_ddpm.hpp"
#include "voxgen/metrics.hpp"
#include "voxgen/phantom.hpp"
#include "voxgen/refiner.hpp"
#include "voxgen/volume_io.hpp"

namespace fs = std::filesystem;
using namespace voxgen;
using ojson = nlohmann::ordered_json;

namespace {

struct Cli {
    std::string config_path;
    std::string out_dir;
    std::int64_t seed_override = -1;

    ExperimentConfig cfg;
    std::uint64_t seed = 0;
    std::string out;

    void load() {
        if (config_path.empty()) throw ConfigError("--config is required");
        cfg = ExperimentConfig::from_file(config_path);
        seed = seed_override >= 0 ? std::uint64_t(seed_override)
                                  : cfg.get_or<std::uint64_t>("seed", 0);
        out = !out_dir.empty() ? out_dir : cfg.get_or<std::string>("out", "runs/out");
        std::error_code ec;
        fs::create_directories(out, ec);
        if (!fs::is_directory(out)) throw IoError("cannot create output directory " + out);
    }

    std::string data_dir() const { return out + "/data"; }
    std::string ckpt(const std::string& stage) const {
        return out + "/checkpoints/" + stage + ".ckpt";
    }
};

Shape3 shape_from_cfg(const ExperimentConfig& cfg) {
    const auto s = cfg.get<std::vector<i64>>("data.shape");
    if (s.size() == 1) return {s[0], s[0], s[0]};
    if (s.size() != 3) throw ConfigError("data.shape must have 1 or 3 entries");
    return {s[0], s[1], s[2]};
}

void write_json(const std::string& path, const ojson& j) {
    fs::create_directories(fs::path(path).parent_path());
    const std::string tmp = path + ".partial";
    {
        std::ofstream f(tmp);
        if (!f) throw IoError("cannot write " + tmp);
        f << j.dump(2) << "\n";
    }
    fs::rename(tmp, path);
}

void write_provenance(const std::string& stem, ojson prov) {
    write_json(stem + ".prov.json", std::move(prov));
}

// train/test volumes normalized to [-1,1]; real data requires normalize.lo/hi
Volume load_normalized(const std::string& path, const ExperimentConfig& cfg) {
    Volume v = load_volume(path);
    if (cfg.has("normalize.lo") || cfg.has("normalize.hi")) {
        const double lo = cfg.get<double>("normalize.lo");
        const double hi = cfg.get<double>("normalize.hi");
        return normalize_intensity(v, lo, hi);
    }
    if (std::abs(v.intensity_range[0] + 1.0) > 1e-9 || std::abs(v.intensity_range[1] - 1.0) > 1e-9)
        throw ConfigError("volume " + path + " has intensity range [" +
                          std::to_string(v.intensity_range[0]) + ", " +
                          std::to_string(v.intensity_range[1]) +
                          "]; set normalize.lo / normalize.hi in the config");
    return v;
}

std::vector<Volume> load_dir_normalized(const std::string& dir, const ExperimentConfig& cfg,
                                        std::vector<std::string>* stems_out = nullptr) {
    std::vector<Volume> vols;
    for (const std::string& stem : list_volume_stems(dir)) {
        vols.push_back(load_normalized(stem + ".f32raw", cfg));
        if (stems_out) stems_out->push_back(stem);
    }
    if (vols.empty()) throw ArgumentError("no volumes found in " + dir);
    return vols;
}

void require_checkpoint(const Cli& cli, const std::string& stage) {
    if (!fs::exists(cli.ckpt(stage)))
        throw ConfigError("missing prerequisite checkpoint for stage '" + stage + "': " +
                          cli.ckpt(stage) + " (run `voxgen train " + stage + "` first)");
}

void append_loss_log(const std::string& path, const std::vector<double>& losses) {
    i64 start_epoch = 0;
    if (fs::exists(path)) {
        std::ifstream f(path);
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) ++start_epoch;
    }
    std::ofstream f(path, std::ios::app);
    if (!f) throw IoError("cannot write loss log " + path);
    for (std::size_t i = 0; i < losses.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%lld\t%.8f\n", (long long)(start_epoch + i64(i) + 1),
                      losses[i]);
        f << buf;
    }
}

DenoiserSpec denoiser_spec_from_cfg(const ExperimentConfig& cfg, const std::string& section,
                                    int in_channels) {
    DenoiserSpec s;
    s.in_channels = in_channels;
    s.out_channels = section == "ldm" ? 4 : 1;
    s.channels = cfg.get_or<std::vector<int>>(section + ".channels", s.channels);
    s.num_res = cfg.get_or<int>(section + ".num_res", 1);
    s.attn_levels = cfg.get_or<std::vector<int>>(section + ".attn_levels", {});
    s.attn_mid = cfg.get_or<bool>(section + ".attn_mid", true);
    s.emb_dim = cfg.get_or<int>(section + ".emb_dim", 64);
    s.act = cfg.get_or<std::string>(section + ".act", "silu");
    s.validate();
    return s;
}

DiffusionSchedule schedule_from_cfg(const ExperimentConfig& cfg, const std::string& section) {
    return make_schedule(cfg.get_or<int>(section + ".T", 1000),
                         cfg.get_or<double>(section + ".beta_start", 0.0015),
                         cfg.get_or<double>(section + ".beta_end", 0.0205),
                         cfg.get_or<std::string>(section + ".schedule", "linear"));
}

MetricProtocol protocol_from_cfg(const ExperimentConfig& cfg, std::uint64_t seed) {
    MetricProtocol p;
    p.axes = cfg.get_or<std::vector<int>>("metrics.axes", p.axes);
    p.lpips_patch = cfg.get_or<int>("metrics.lpips_patch", p.lpips_patch);
    p.lpips_n = cfg.get_or<int>("metrics.lpips_n", p.lpips_n);
    p.sharp_patch = cfg.get_or<int>("metrics.sharp_patch", p.sharp_patch);
    p.sharp_n = cfg.get_or<int>("metrics.sharp_n", p.sharp_n);
    p.sharp_sigma = cfg.get_or<double>("metrics.sharp_sigma", p.sharp_sigma);
    p.noise_smooth_sigma = cfg.get_or<double>("metrics.noise_smooth_sigma", p.noise_smooth_sigma);
    p.kl_bins = cfg.get_or<int>("metrics.kl_bins", p.kl_bins);
    p.hog_cell = cfg.get_or<int>("metrics.hog_cell", p.hog_cell);
    p.hog_bins = cfg.get_or<int>("metrics.hog_bins", p.hog_bins);
    p.feat_patch = cfg.get_or<int>("metrics.feat_patch", p.feat_patch);
    p.feat_n = cfg.get_or<int>("metrics.feat_n", p.feat_n);
    p.k_values = cfg.get_or<std::vector<int>>("metrics.k_values", p.k_values);
    p.backbone.seed = cfg.get_or<std::uint64_t>("metrics.backbone_seed", p.backbone.seed);
    p.backbone.channels =
        cfg.get_or<std::vector<int>>("metrics.backbone_channels", p.backbone.channels);
    p.seed = seed;
    return p;
}

// ------------------------------------------------------------ subcommands

int cmd_make_data(Cli& cli, int n_override) {
    DatasetParams params;
    params.shape = shape_from_cfg(cli.cfg);
    params.noise_sigma = cli.cfg.get_or<double>("data.noise_sigma", 0.05);
    params.texture_amp = cli.cfg.get_or<double>("data.texture_amp", 0.1);
    params.train_frac = cli.cfg.get_or<double>("data.train_frac", 0.8);
    params.test_frac = cli.cfg.get_or<double>("data.test_frac", 0.2);
    const int n = n_override > 0 ? n_override : cli.cfg.get_or<int>("data.n", 10);
    const DatasetSplit split = make_dataset(cli.data_dir(), n, params, cli.seed);
    std::printf("wrote %zu train + %zu test phantoms to %s\n", split.train_ids.size(),
                split.test_ids.size(), cli.data_dir().c_str());
    return 0;
}

int cmd_train(Cli& cli, const std::string& stage, bool resume) {
    fs::create_directories(cli.out + "/checkpoints");
    const std::string train_dir = cli.data_dir() + "/train";
    Rng seed_root(cli.seed);

    if (stage == "ae") {
        auto vols = load_dir_normalized(train_dir, cli.cfg);
        AutoencoderSpec spec;
        spec.channels = cli.cfg.get_or<std::vector<int>>("ae.channels", spec.channels);
        spec.num_res = cli.cfg.get_or<int>("ae.num_res", 1);
        spec.act = cli.cfg.get_or<std::string>("ae.act", "leaky_relu");
        Autoencoder ae = [&] {
            if (resume && fs::exists(cli.ckpt("ae"))) return load_autoencoder(cli.ckpt("ae"));
            Autoencoder fresh(spec);
            Rng init_rng = seed_root.fork(11);
            fresh.init(init_rng);
            return fresh;
        }();
        TrainHp hp;
        hp.epochs = cli.cfg.get_or<int>("ae.epochs", 20);
        hp.batch = cli.cfg.get_or<int>("ae.batch", 4);
        hp.lr = cli.cfg.get_or<double>("ae.lr", 1e-3);
        hp.weight_decay = cli.cfg.get_or<double>("ae.weight_decay", 1e-5);
        hp.lr_decay = cli.cfg.get_or<std::string>("ae.lr_decay", "none");
        hp.seed = seed_root.fork(12).next_u64();
        const TrainLog log =
            train_autoencoder(ae, vols, hp, cli.cfg.get_or<double>("ae.latent_reg", 1e-4));
        save_autoencoder(ae, cli.ckpt("ae"));
        append_loss_log(cli.out + "/checkpoints/ae_loss.txt", log.epoch_loss);
        std::printf("ae: %d epochs, final loss %.6f -> %s\n", hp.epochs, log.epoch_loss.back(),
                    cli.ckpt("ae").c_str());
        return 0;
    }

    if (stage == "ldm") {
        require_checkpoint(cli, "ae");
        auto vols = load_dir_normalized(train_dir, cli.cfg);
        Autoencoder ae = load_autoencoder(cli.ckpt("ae"));
        std::vector<LatentCode> latents;
        for (const auto& v : vols) latents.push_back(ae.encode(v));
        const DenoiserSpec spec = denoiser_spec_from_cfg(cli.cfg, "ldm", 4);
        LatentDdpm model = [&] {
            if (resume && fs::exists(cli.ckpt("ldm"))) return load_latent_ddpm(cli.ckpt("ldm"));
            LatentDdpm fresh(spec, schedule_from_cfg(cli.cfg, "ldm"));
            Rng init_rng = seed_root.fork(21);
            fresh.net.init(init_rng);
            return fresh;
        }();
        DdpmTrainHp hp;
        hp.epochs = cli.cfg.get_or<int>("ldm.epochs", 50);
        hp.batch = cli.cfg.get_or<int>("ldm.batch", 4);
        hp.lr = cli.cfg.get_or<double>("ldm.lr", 2.5e-5);
        hp.weight_decay = cli.cfg.get_or<double>("ldm.weight_decay", 0.0);
        hp.lr_decay = cli.cfg.get_or<std::string>("ldm.lr_decay", "none");
        hp.seed = seed_root.fork(22).next_u64();
        const TrainLog log = train_latent_ddpm(model, latents, hp);
        save_latent_ddpm(model, cli.ckpt("ldm"));
        append_loss_log(cli.out + "/checkpoints/ldm_loss.txt", log.epoch_loss);
        std::printf("ldm: %d epochs, final loss %.6f -> %s\n", hp.epochs, log.epoch_loss.back(),
                    cli.ckpt("ldm").c_str());
        return 0;
    }

    if (stage == "refiner") {
        require_checkpoint(cli, "ae");
        auto clean = load_dir_normalized(train_dir, cli.cfg);
        Autoencoder ae = load_autoencoder(cli.ckpt("ae"));
        std::vector<Volume> coarse;
        for (const auto& v : clean) {
            Volume c = ae.decode(ae.encode(v), v.spacing);
            coarse.push_back(std::move(c));
        }
        const int patch = cli.cfg.get_or<int>("refiner.patch", 64);
        const DenoiserSpec spec = denoiser_spec_from_cfg(cli.cfg, "refiner", 3);
        RefinerModel model = [&] {
            if (resume && fs::exists(cli.ckpt("refiner"))) return load_refiner(cli.ckpt("refiner"));
            RefinerModel fresh(spec, schedule_from_cfg(cli.cfg, "refiner"), patch);
            Rng init_rng = seed_root.fork(31);
            fresh.net.init(init_rng);
            return fresh;
        }();
        RefinerTrainHp hp;
        hp.epochs = cli.cfg.get_or<int>("refiner.epochs", 20);
        hp.batch = cli.cfg.get_or<int>("refiner.batch", 4);
        hp.patches_per_volume = cli.cfg.get_or<int>("refiner.patches_per_volume", 8);
        hp.lr = cli.cfg.get_or<double>("refiner.lr", 1e-5);
        hp.weight_decay = cli.cfg.get_or<double>("refiner.weight_decay", 0.0);
        hp.lr_decay = cli.cfg.get_or<std::string>("refiner.lr_decay", "none");
        hp.full_mask_prob = cli.cfg.get_or<double>("refiner.full_mask_prob", 0.1);
        hp.seed = seed_root.fork(32).next_u64();
        const TrainLog log = train_refiner(model, clean, coarse, hp);
        save_refiner(model, cli.ckpt("refiner"));
        append_loss_log(cli.out + "/checkpoints/refiner_loss.txt", log.epoch_loss);
        std::printf("refiner: %d epochs, final loss %.6f -> %s\n", hp.epochs,
                    log.epoch_loss.back(), cli.ckpt("refiner").c_str());
        return 0;
    }

    throw ArgumentError("unknown training stage '" + stage + "' (ae | ldm | refiner)");
}

int cmd_reconstruct(Cli& cli, std::string in_dir, std::string out_name) {
    require_checkpoint(cli, "ae");
    if (in_dir.empty()) in_dir = cli.data_dir() + "/test";
    if (out_name.empty()) out_name = "recon";
    const std::string dst = cli.out + "/" + out_name;
    fs::create_directories(dst);
    Autoencoder ae = load_autoencoder(cli.ckpt("ae"));
    std::vector<std::string> stems;
    auto vols = load_dir_normalized(in_dir, cli.cfg, &stems);
    for (std::size_t i = 0; i < vols.size(); ++i) {
        const std::string id = fs::path(stems[i]).filename().string();
        Volume recon = ae.decode(ae.encode(vols[i]), vols[i].spacing);
        save_volume(recon, dst + "/" + id);
        write_provenance(dst + "/" + id,
                         {{"command", "reconstruct"},
                          {"input", stems[i] + ".f32raw"},
                          {"checkpoints", {{"ae", cli.ckpt("ae")}}},
                          {"config_hash", cli.cfg.hash()}});
    }
    std::printf("reconstructed %zu volumes -> %s\n", vols.size(), dst.c_str());
    return 0;
}

int cmd_generate(Cli& cli, int n) {
    if (n < 0) n = cli.cfg.get_or<int>("generate.n", 20);
    if (n == 0) {
        std::printf("generated 0 volumes\n");
        return 0;
    }
    require_checkpoint(cli, "ae");
    require_checkpoint(cli, "ldm");
    const std::string dst = cli.out + "/synth";
    fs::create_directories(dst);
    Autoencoder ae = load_autoencoder(cli.ckpt("ae"));
    LatentDdpm ldm = load_latent_ddpm(cli.ckpt("ldm"));
    Rng root(cli.seed);
    for (int i = 0; i < n; ++i) {
        Rng stream = root.fork(100).fork(std::uint64_t(i));
        Volume v = generate(ae, ldm, stream);
        char id[32];
        std::snprintf(id, sizeof(id), "synth_%04d", i);
        save_volume(v, dst + "/" + id);
        write_provenance(dst + "/" + std::string(id),
                         {{"command", "generate"},
                          {"seed", cli.seed},
                          {"sample_index", i},
                          {"checkpoints", {{"ae", cli.ckpt("ae")}, {"ldm", cli.ckpt("ldm")}}},
                          {"config_hash", cli.cfg.hash()}});
    }
    std::printf("generated %d volumes -> %s\n", n, dst.c_str());
    return 0;
}

int cmd_refine(Cli& cli, std::string in_dir, std::string out_name) {
    require_checkpoint(cli, "refiner");
    if (in_dir.empty()) in_dir = cli.out + "/recon";
    if (out_name.empty()) out_name = "refined";
    const std::string dst = cli.out + "/" + out_name;
    fs::create_directories(dst);
    RefinerModel model = load_refiner(cli.ckpt("refiner"));
    const int stride = cli.cfg.get_or<int>("refiner.stride", model.patch / 2);
    const double eta = cli.cfg.get_or<double>("refiner.sampler_eta", 1.0);

    std::vector<std::string> stems;
    auto vols = load_dir_normalized(in_dir, cli.cfg, &stems);
    const PatchGrid grid = build_patch_grid(vols[0].shape, model.patch, stride);
    const std::uint64_t phash = plan_hash(plan_traversal(grid));
    Rng root(cli.seed);
    for (std::size_t i = 0; i < vols.size(); ++i) {
        if (vols[i].shape != grid.volume_shape)
            throw ArgumentError("refine: volume " + stems[i] + " shape " + vols[i].shape.str() +
                                " differs from grid shape " + grid.volume_shape.str());
        const std::string id = fs::path(stems[i]).filename().string();
        // stream keyed by position in the sorted input list
        Rng stream = root.fork(200).fork(i);
        Volume refined = refine_volume(model, vols[i], grid, stream, eta);
        for (auto& x : refined.data) x = std::clamp(x, -1.0f, 1.0f);  // export clip
        save_volume(refined, dst + "/" + id);
        write_provenance(dst + "/" + id,
                         {{"command", "refine"},
                          {"input", stems[i] + ".f32raw"},
                          {"seed", cli.seed},
                          {"plan_hash", phash},
                          {"sampler_eta", eta},
                          {"grid", {{"patch", model.patch}, {"stride", stride}}},
                          {"checkpoints", {{"refiner", cli.ckpt("refiner")}}},
                          {"config_hash", cli.cfg.hash()}});
    }
    std::printf("refined %zu volumes -> %s\n", vols.size(), dst.c_str());
    return 0;
}

int cmd_evaluate(Cli& cli, std::string orig, std::string recon, std::string refined,
                 std::string synth, std::string report_path) {
    if (orig.empty()) orig = cli.data_dir() + "/test";
    if (recon.empty()) recon = cli.out + "/recon";
    if (refined.empty()) refined = cli.out + "/refined";
    if (synth.empty()) synth = cli.out + "/synth";
    if (report_path.empty()) report_path = cli.out + "/reports/metrics.json";
    const MetricProtocol protocol = protocol_from_cfg(cli.cfg, cli.seed);
    const MetricReport report = evaluate_sets(orig, recon, refined, synth, protocol);
    fs::create_directories(fs::path(report_path).parent_path());
    const std::string tmp = report_path + ".partial";
    {
        std::ofstream f(tmp);
        if (!f) throw IoError("cannot write " + tmp);
        f << report.to_json_string();
    }
    fs::rename(tmp, report_path);
    std::printf("%s", report.table().c_str());
    std::printf("report -> %s\n", report_path.c_str());
    return 0;
}

int cmd_export_slices(Cli& cli, const std::string& volume_path, int axis, i64 index,
                      std::string out_file) {
    const Volume v = load_volume(volume_path);
    if (index < 0) index = v.shape[axis] / 2;
    const Plane p = slice_plane(v, axis, index);
    if (out_file.empty())
        out_file = cli.out + "/" + fs::path(volume_stem(volume_path)).filename().string() +
                   "_ax" + std::to_string(axis) + "_" + std::to_string(index) + ".pgm";
    fs::create_directories(fs::path(out_file).parent_path());
    const std::string tmp = out_file + ".partial";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot write " + tmp);
        f << "P5\n" << p.cols << " " << p.rows << "\n255\n";
        // window [-1,1] -> [0,255]
        for (i64 r = 0; r < p.rows; ++r)
            for (i64 c = 0; c < p.cols; ++c) {
                const double x = std::clamp(p.at(r, c), -1.0, 1.0);
                f.put(char(int(std::lround((x + 1.0) * 0.5 * 255.0))));
            }
    }
    fs::rename(tmp, out_file);
    std::printf("slice -> %s\n", out_file.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage volumetric generation with patch-based diffusion refinement"};
    app.require_subcommand(1);

    Cli cli;
    app.add_option("--config", cli.config_path, "experiment config JSON")->envname("VOXGEN_CONFIG");
    app.add_option("--seed", cli.seed_override, "override config seed");
    app.add_option("--out", cli.out_dir, "override output directory");

    int n_data = -1;
    auto* mk = app.add_subcommand("make-data", "generate the phantom dataset");
    mk->add_option("--n", n_data, "number of phantoms");

    std::string stage;
    bool resume = false;
    auto* tr = app.add_subcommand("train", "train a pipeline stage");
    tr->add_option("stage", stage, "ae | ldm | refiner")->required();
    tr->add_flag("--resume", resume, "continue from the existing checkpoint");

    std::string rc_in, rc_out;
    auto* rc = app.add_subcommand("reconstruct", "autoencode volumes (x -> decode(encode(x)))");
    rc->add_option("--in", rc_in, "input volume directory (default: data/test)");
    rc->add_option("--out-dir", rc_out, "output subdirectory name (default: recon)");

    int n_gen = -1;
    auto* gn = app.add_subcommand("generate", "sample coarse volumes from the latent model");
    gn->add_option("--n", n_gen, "number of samples");

    std::string rf_in, rf_out;
    auto* rf = app.add_subcommand("refine", "patch-refine coarse volumes");
    rf->add_option("--in", rf_in, "input volume directory (default: <out>/recon)");
    rf->add_option("--out-dir", rf_out, "output subdirectory name (default: refined)");

    std::string ev_orig, ev_recon, ev_refined, ev_synth, ev_report;
    auto* ev = app.add_subcommand("evaluate", "run the metric suite and write a report");
    ev->add_option("--orig", ev_orig);
    ev->add_option("--recon", ev_recon);
    ev->add_option("--refined", ev_refined);
    ev->add_option("--synth", ev_synth);
    ev->add_option("--report", ev_report);

    std::string xs_volume, xs_out;
    int xs_axis = 0;
    i64 xs_index = -1;
    auto* xs = app.add_subcommand("export-slices", "write an 8-bit grayscale slice image");
    xs->add_option("--volume", xs_volume)->required();
    xs->add_option("--axis", xs_axis)->check(CLI::Range(0, 2));
    xs->add_option("--index", xs_index);
    xs->add_option("--out-file", xs_out);

    try {
        app.parse(argc, argv);
        cli.load();
        if (mk->parsed()) return cmd_make_data(cli, n_data);
        if (tr->parsed()) return cmd_train(cli, stage, resume);
        if (rc->parsed()) return cmd_reconstruct(cli, rc_in, rc_out);
        if (gn->parsed()) return cmd_generate(cli, n_gen);
        if (rf->parsed()) return cmd_refine(cli, rf_in, rf_out);
        if (ev->parsed()) return cmd_evaluate(cli, ev_orig, ev_recon, ev_refined, ev_synth, ev_report);
        if (xs->parsed()) return cmd_export_slices(cli, xs_volume, xs_axis, xs_index, xs_out);
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const ArgumentError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
}
