#include "voxgen/autoencoder.hpp"

#include <algorithm>
#include <numeric>

namespace voxgen {

using nn::ActKind;

nlohmann::ordered_json AutoencoderSpec::to_json() const {
    nlohmann::ordered_json j;
    j["channels"] = channels;
    j["latent_channels"] = latent_channels;
    j["num_res"] = num_res;
    j["act"] = act;
    return j;
}

AutoencoderSpec AutoencoderSpec::from_json(const nlohmann::ordered_json& j) {
    AutoencoderSpec s;
    if (j.contains("channels")) s.channels = j["channels"].get<std::vector<int>>();
    s.latent_channels = j.value("latent_channels", s.latent_channels);
    s.num_res = j.value("num_res", s.num_res);
    s.act = j.value("act", s.act);
    s.validate();
    return s;
}

void AutoencoderSpec::validate() const {
    // two downsampling stages -> three width entries; keeps the overall
    // compression factor pinned at 4 per axis
    if (channels.size() != 3)
        throw ConfigError("AutoencoderSpec: exactly 3 channel widths required (got " +
                          std::to_string(channels.size()) + ")");
    for (int c : channels)
        if (c <= 0) throw ConfigError("AutoencoderSpec: channel widths must be positive");
    if (latent_channels != 4)
        throw ConfigError("AutoencoderSpec: latent_channels is fixed at 4");
    if (num_res < 1) throw ConfigError("AutoencoderSpec: num_res must be >= 1");
    nn::act_kind_from_string(act);
}

// Residual blocks live at the two downsampled levels; the full-resolution
// level is a plain conv stem/head so the expensive 1x-resolution work stays
// minimal. Channel reduction happens before each upsample for the same
// reason.
Autoencoder::Autoencoder(const AutoencoderSpec& s)
    : spec(s), e_in("enc.in", 1, s.channels[0], 3), e_gn("enc.gn", s.channels[2]),
      e_act(nn::act_kind_from_string(s.act)),
      e_out("enc.out", s.channels[2], s.latent_channels, 3),
      d_in("dec.in", s.latent_channels, s.channels[2], 3), d_gn("dec.gn", s.channels[0]),
      d_act(nn::act_kind_from_string(s.act)), d_out("dec.out", s.channels[0], 1, 3) {
    spec.validate();
    const ActKind act = nn::act_kind_from_string(s.act);
    for (int l = 1; l < 3; ++l) {
        std::vector<nn::ResBlock> enc, dec;
        for (int r = 0; r < s.num_res; ++r) {
            enc.emplace_back("enc.l" + std::to_string(l) + ".res" + std::to_string(r),
                             s.channels[std::size_t(l)], s.channels[std::size_t(l)], 0, act);
            dec.emplace_back("dec.l" + std::to_string(l) + ".res" + std::to_string(r),
                             s.channels[std::size_t(l)], s.channels[std::size_t(l)], 0, act);
        }
        e_res.push_back(std::move(enc));
        d_res.push_back(std::move(dec));
    }
    for (int j = 0; j < 2; ++j) {
        e_down.emplace_back("enc.down" + std::to_string(j), s.channels[std::size_t(j)],
                            s.channels[std::size_t(j + 1)], 3, 2);
        d_up.emplace_back();
        // channel reduction before the upsample: c_{2-j} -> c_{1-j}
        d_up_conv.emplace_back("dec.up" + std::to_string(j), s.channels[std::size_t(2 - j)],
                               s.channels[std::size_t(1 - j)], 3);
    }
}

void Autoencoder::init(Rng& rng) {
    e_in.init(rng);
    for (auto& lvl : e_res)
        for (auto& b : lvl) b.init(rng);
    for (auto& d : e_down) d.init(rng);
    e_out.init(rng);
    d_in.init(rng);
    for (auto& lvl : d_res)
        for (auto& b : lvl) b.init(rng);
    for (auto& u : d_up_conv) u.init(rng);
    d_out.init(rng);
}

std::vector<nn::Param*> Autoencoder::params() {
    std::vector<nn::Param*> out;
    e_in.collect(out);
    for (auto& lvl : e_res)
        for (auto& b : lvl) b.collect(out);
    for (auto& d : e_down) d.collect(out);
    e_gn.collect(out);
    e_out.collect(out);
    d_in.collect(out);
    for (auto& lvl : d_res)
        for (auto& b : lvl) b.collect(out);
    for (auto& u : d_up_conv) u.collect(out);
    d_gn.collect(out);
    d_out.collect(out);
    return out;
}

Tensor Autoencoder::encode_tensor(const Tensor& x) {
    if (x.rank() != 4 || x.dim(0) != 1)
        throw ArgumentError("Autoencoder::encode: expected (1,D,H,W), got " + x.shape_str());
    for (int a = 1; a <= 3; ++a)
        if (x.dim(a) % 4 != 0)
            throw ArgumentError("Autoencoder::encode: input " + x.shape_str() +
                                " not divisible by 4 per axis");
    Tensor h = e_in.forward(x);
    h = e_down[0].forward(h);
    for (auto& b : e_res[0]) h = b.forward(h, nullptr);  // level 1 (1/2 res)
    h = e_down[1].forward(h);
    for (auto& b : e_res[1]) h = b.forward(h, nullptr);  // level 2 (1/4 res)
    return e_out.forward(e_act.forward(e_gn.forward(h)));
}

Tensor Autoencoder::encode_backward(const Tensor& dz) {
    Tensor dh = e_gn.backward(e_act.backward(e_out.backward(dz)));
    for (auto it = e_res[1].rbegin(); it != e_res[1].rend(); ++it) dh = it->backward(dh, nullptr);
    dh = e_down[1].backward(dh);
    for (auto it = e_res[0].rbegin(); it != e_res[0].rend(); ++it) dh = it->backward(dh, nullptr);
    dh = e_down[0].backward(dh);
    return e_in.backward(dh);
}

Tensor Autoencoder::decode_tensor(const Tensor& z) {
    if (z.rank() != 4 || z.dim(0) != spec.latent_channels)
        throw ArgumentError("Autoencoder::decode: expected (4,d,h,w), got " + z.shape_str());
    Tensor h = d_in.forward(z);
    for (auto& b : d_res[1]) h = b.forward(h, nullptr);  // level 2
    h = d_up[0].forward(d_up_conv[0].forward(h));        // reduce then upsample
    for (auto& b : d_res[0]) h = b.forward(h, nullptr);  // level 1
    h = d_up[1].forward(d_up_conv[1].forward(h));
    return d_squash.forward(d_out.forward(d_act.forward(d_gn.forward(h))));
}

Tensor Autoencoder::decode_backward(const Tensor& dx) {
    Tensor dh = d_gn.backward(d_act.backward(d_out.backward(d_squash.backward(dx))));
    dh = d_up_conv[1].backward(d_up[1].backward(dh));
    for (auto it = d_res[0].rbegin(); it != d_res[0].rend(); ++it) dh = it->backward(dh, nullptr);
    dh = d_up_conv[0].backward(d_up[0].backward(dh));
    for (auto it = d_res[1].rbegin(); it != d_res[1].rend(); ++it) dh = it->backward(dh, nullptr);
    return d_in.backward(dh);
}

LatentCode Autoencoder::encode(const Volume& v) { return encode_tensor(tensor_from_volume(v)); }

Volume Autoencoder::decode(const LatentCode& z, const std::array<double, 3>& spacing) {
    return volume_from_tensor(decode_tensor(z), spacing);
}

Tensor tensor_from_volume(const Volume& v) {
    Tensor t({1, v.shape.d, v.shape.h, v.shape.w});
    std::copy(v.data.begin(), v.data.end(), t.data.begin());
    return t;
}

Volume volume_from_tensor(const Tensor& t, const std::array<double, 3>& spacing) {
    if (t.rank() != 4 || t.dim(0) != 1)
        throw ArgumentError("volume_from_tensor: expected (1,D,H,W), got " + t.shape_str());
    Volume v({t.dim(1), t.dim(2), t.dim(3)});
    v.spacing = spacing;
    std::copy(t.data.begin(), t.data.end(), v.data.begin());
    return v;
}

static void scale_grads(const std::vector<nn::Param*>& params, float f) {
    for (auto* p : params)
        for (auto& g : p->g.data) g *= f;
}

TrainLog train_autoencoder(Autoencoder& ae, const std::vector<Volume>& train, const TrainHp& hp,
                           double latent_reg) {
    if (train.empty()) throw ArgumentError("train_autoencoder: empty dataset");
    for (const auto& v : train)
        if (v.shape != train[0].shape)
            throw ArgumentError("train_autoencoder: inconsistent volume shapes " +
                                v.shape.str() + " vs " + train[0].shape.str());
    auto params = ae.params();
    nn::AdamW opt;
    opt.lr = hp.lr;
    opt.weight_decay = hp.weight_decay;
    Rng rng(hp.seed);

    TrainLog log;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        opt.lr = decayed_lr(hp.lr, hp.lr_decay, epoch, hp.epochs);
        // Fisher-Yates with the run's own stream; deterministic
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[std::size_t(rng.uniform_int(i64(i)))]);
        double epoch_loss = 0.0;
        i64 n_seen = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(hp.batch)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(hp.batch));
            nn::zero_grads(params);
            for (std::size_t bi = start; bi < end; ++bi) {
                const Tensor x = tensor_from_volume(train[order[bi]]);
                Tensor z = ae.encode_tensor(x);
                Tensor xhat = ae.decode_tensor(z);

                const i64 n = xhat.numel();
                Tensor dxhat(xhat.shape);
                double loss = 0.0;
                for (i64 i = 0; i < n; ++i) {
                    const double diff = double(xhat[i]) - double(x[i]);
                    loss += diff * diff;
                    dxhat[i] = float(2.0 * diff / double(n));
                }
                loss /= double(n);
                const i64 nz = z.numel();
                double reg = 0.0;
                for (i64 i = 0; i < nz; ++i) reg += double(z[i]) * double(z[i]);
                loss += latent_reg * reg / double(nz);

                Tensor dz = ae.decode_backward(dxhat);
                for (i64 i = 0; i < nz; ++i)
                    dz[i] += float(2.0 * latent_reg * double(z[i]) / double(nz));
                ae.encode_backward(dz);

                epoch_loss += loss;
                ++n_seen;
            }
            scale_grads(params, 1.0f / float(end - start));
            opt.step(params);
        }
        log.epoch_loss.push_back(epoch_loss / double(n_seen));
    }
    return log;
}

double autoencoder_eval_mse(Autoencoder& ae, const std::vector<Volume>& vols) {
    if (vols.empty()) throw ArgumentError("autoencoder_eval_mse: empty set");
    double acc = 0.0;
    for (const auto& v : vols) {
        const Tensor x = tensor_from_volume(v);
        acc += mse(ae.decode_tensor(ae.encode_tensor(x)), x);
    }
    return acc / double(vols.size());
}

void save_autoencoder(const Autoencoder& ae, const std::string& path) {
    auto params = const_cast<Autoencoder&>(ae).params();
    nn::save_checkpoint(path, "autoencoder", ae.spec.to_json(), params);
}

Autoencoder load_autoencoder(const std::string& path) {
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    if (ck.kind != "autoencoder")
        throw ConfigError("load_autoencoder: " + path + " holds kind '" + ck.kind + "'");
    Autoencoder ae(AutoencoderSpec::from_json(ck.config));
    auto params = ae.params();
    nn::restore_params(ck, params);
    return ae;
}

}  // namespace voxgen
