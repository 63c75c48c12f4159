#include "voxgen/unet.hpp"

#include <algorithm>

namespace voxgen {

using nn::ActKind;

nlohmann::ordered_json DenoiserSpec::to_json() const {
    nlohmann::ordered_json j;
    j["in_channels"] = in_channels;
    j["out_channels"] = out_channels;
    j["channels"] = channels;
    j["num_res"] = num_res;
    j["attn_levels"] = attn_levels;
    j["attn_mid"] = attn_mid;
    j["emb_dim"] = emb_dim;
    j["act"] = act;
    return j;
}

DenoiserSpec DenoiserSpec::from_json(const nlohmann::ordered_json& j) {
    DenoiserSpec s;
    s.in_channels = j.value("in_channels", s.in_channels);
    s.out_channels = j.value("out_channels", s.out_channels);
    if (j.contains("channels")) s.channels = j["channels"].get<std::vector<int>>();
    s.num_res = j.value("num_res", s.num_res);
    if (j.contains("attn_levels")) s.attn_levels = j["attn_levels"].get<std::vector<int>>();
    s.attn_mid = j.value("attn_mid", s.attn_mid);
    s.emb_dim = j.value("emb_dim", s.emb_dim);
    s.act = j.value("act", s.act);
    s.validate();
    return s;
}

void DenoiserSpec::validate() const {
    if (channels.empty()) throw ConfigError("DenoiserSpec: channels must be nonempty");
    for (int c : channels)
        if (c <= 0) throw ConfigError("DenoiserSpec: channel widths must be positive");
    if (num_res < 1) throw ConfigError("DenoiserSpec: num_res must be >= 1");
    if (emb_dim < 2 || emb_dim % 2 != 0)
        throw ConfigError("DenoiserSpec: emb_dim must be even and >= 2");
    for (int l : attn_levels)
        if (l < 0 || l >= int(channels.size()))
            throw ConfigError("DenoiserSpec: attn level " + std::to_string(l) + " out of range");
    nn::act_kind_from_string(act);
}

static bool has_attn(const DenoiserSpec& s, int level) {
    return std::find(s.attn_levels.begin(), s.attn_levels.end(), level) != s.attn_levels.end();
}

UNet3d::UNet3d(const DenoiserSpec& s)
    : spec(s), mlp1("mlp1", s.emb_dim, s.emb_dim), mlp2("mlp2", s.emb_dim, s.emb_dim),
      conv_in("conv_in", s.in_channels, s.channels[0], 3),
      mid1("mid1", s.channels.back(), s.channels.back(), s.emb_dim,
           nn::act_kind_from_string(s.act)),
      mid2("mid2", s.channels.back(), s.channels.back(), s.emb_dim,
           nn::act_kind_from_string(s.act)),
      gn_out("gn_out", s.channels[0]), act_out(nn::act_kind_from_string(s.act)),
      conv_out("conv_out", s.channels[0], s.out_channels, 3) {
    spec.validate();
    const ActKind act = nn::act_kind_from_string(s.act);
    const int L = int(s.channels.size());
    for (int l = 0; l < L; ++l) {
        const std::string lv = "enc" + std::to_string(l);
        if (l > 0)
            downs.emplace_back("down" + std::to_string(l - 1), s.channels[std::size_t(l - 1)],
                               s.channels[std::size_t(l)], 3, 2);
        std::vector<nn::ResBlock> blocks;
        for (int r = 0; r < s.num_res; ++r)
            blocks.emplace_back(lv + ".res" + std::to_string(r), s.channels[std::size_t(l)],
                                s.channels[std::size_t(l)], s.emb_dim, act);
        enc_res.push_back(std::move(blocks));
        enc_attn.push_back(has_attn(s, l) ? std::make_unique<nn::AttentionBlock>(
                                                lv + ".attn", s.channels[std::size_t(l)])
                                          : nullptr);
    }
    if (s.attn_mid)
        mid_attn = std::make_unique<nn::AttentionBlock>("mid.attn", s.channels.back());
    for (int l = 0; l < L; ++l) {
        const std::string lv = "dec" + std::to_string(l);
        dec_first.emplace_back(lv + ".res0", 2 * s.channels[std::size_t(l)],
                               s.channels[std::size_t(l)], s.emb_dim, act);
        std::vector<nn::ResBlock> extras;
        for (int r = 1; r < s.num_res; ++r)
            extras.emplace_back(lv + ".res" + std::to_string(r), s.channels[std::size_t(l)],
                                s.channels[std::size_t(l)], s.emb_dim, act);
        dec_extra.push_back(std::move(extras));
        dec_attn.push_back(has_attn(s, l) ? std::make_unique<nn::AttentionBlock>(
                                                lv + ".attn", s.channels[std::size_t(l)])
                                          : nullptr);
    }
    for (int j = 0; j + 1 < L; ++j) {
        ups.emplace_back();
        up_convs.emplace_back("up" + std::to_string(j), s.channels[std::size_t(j + 1)],
                              s.channels[std::size_t(j)], 3);
    }
}

void UNet3d::init(Rng& rng) {
    mlp1.init(rng);
    mlp2.init(rng);
    conv_in.init(rng);
    for (auto& d : downs) d.init(rng);
    for (auto& lvl : enc_res)
        for (auto& b : lvl) b.init(rng);
    for (auto& a : enc_attn)
        if (a) a->init(rng);
    mid1.init(rng);
    mid2.init(rng);
    if (mid_attn) mid_attn->init(rng);
    for (auto& b : dec_first) b.init(rng);
    for (auto& lvl : dec_extra)
        for (auto& b : lvl) b.init(rng);
    for (auto& a : dec_attn)
        if (a) a->init(rng);
    for (auto& u : up_convs) u.init(rng);
    conv_out.init_zero();  // denoiser starts by predicting zero
}

std::vector<nn::Param*> UNet3d::params() {
    std::vector<nn::Param*> out;
    mlp1.collect(out);
    mlp2.collect(out);
    conv_in.collect(out);
    for (auto& d : downs) d.collect(out);
    for (auto& lvl : enc_res)
        for (auto& b : lvl) b.collect(out);
    for (auto& a : enc_attn)
        if (a) a->collect(out);
    mid1.collect(out);
    mid2.collect(out);
    if (mid_attn) mid_attn->collect(out);
    for (auto& b : dec_first) b.collect(out);
    for (auto& lvl : dec_extra)
        for (auto& b : lvl) b.collect(out);
    for (auto& a : dec_attn)
        if (a) a->collect(out);
    for (auto& u : up_convs) u.collect(out);
    gn_out.collect(out);
    conv_out.collect(out);
    return out;
}

Tensor UNet3d::forward(const Tensor& x, double t) {
    const int L = int(spec.channels.size());
    const i64 div = i64(1) << (L - 1);
    for (int a = 1; a <= 3; ++a)
        if (x.dim(a) % div != 0)
            throw ArgumentError("UNet3d: input " + x.shape_str() + " not divisible by " +
                                std::to_string(div));
    cached_emb = mlp2.forward(mlp_act.forward(mlp1.forward(nn::sinusoidal_embedding(t, spec.emb_dim))));

    Tensor h = conv_in.forward(x);
    cached_skips.clear();
    for (int l = 0; l < L; ++l) {
        if (l > 0) h = downs[std::size_t(l - 1)].forward(h);
        for (auto& b : enc_res[std::size_t(l)]) h = b.forward(h, &cached_emb);
        if (enc_attn[std::size_t(l)]) h = enc_attn[std::size_t(l)]->forward(h);
        cached_skips.push_back(h);
    }
    h = mid1.forward(h, &cached_emb);
    if (mid_attn) h = mid_attn->forward(h);
    h = mid2.forward(h, &cached_emb);
    for (int l = L - 1; l >= 0; --l) {
        h = nn::concat_channels(h, cached_skips[std::size_t(l)]);
        h = dec_first[std::size_t(l)].forward(h, &cached_emb);
        for (auto& b : dec_extra[std::size_t(l)]) h = b.forward(h, &cached_emb);
        if (dec_attn[std::size_t(l)]) h = dec_attn[std::size_t(l)]->forward(h);
        if (l > 0) {
            h = ups[std::size_t(l - 1)].forward(h);
            h = up_convs[std::size_t(l - 1)].forward(h);
        }
    }
    return conv_out.forward(act_out.forward(gn_out.forward(h)));
}

Tensor UNet3d::backward(const Tensor& dy) {
    const int L = int(spec.channels.size());
    Tensor demb({spec.emb_dim});
    Tensor dh = gn_out.backward(act_out.backward(conv_out.backward(dy)));

    std::vector<Tensor> dskips(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        if (l > 0) {
            dh = up_convs[std::size_t(l - 1)].backward(dh);
            dh = ups[std::size_t(l - 1)].backward(dh);
        }
        if (dec_attn[std::size_t(l)]) dh = dec_attn[std::size_t(l)]->backward(dh);
        auto& extras = dec_extra[std::size_t(l)];
        for (auto it = extras.rbegin(); it != extras.rend(); ++it) dh = it->backward(dh, &demb);
        Tensor dcat = dec_first[std::size_t(l)].backward(dh, &demb);
        Tensor dmain, dskip;
        nn::split_channels(dcat, spec.channels[std::size_t(l)], dmain, dskip);
        dskips[std::size_t(l)] = std::move(dskip);
        dh = std::move(dmain);
    }

    dh = mid2.backward(dh, &demb);
    if (mid_attn) dh = mid_attn->backward(dh);
    dh = mid1.backward(dh, &demb);

    for (int l = L - 1; l >= 0; --l) {
        for (i64 i = 0; i < dh.numel(); ++i) dh[i] += dskips[std::size_t(l)][i];
        if (enc_attn[std::size_t(l)]) dh = enc_attn[std::size_t(l)]->backward(dh);
        auto& blocks = enc_res[std::size_t(l)];
        for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) dh = it->backward(dh, &demb);
        if (l > 0) dh = downs[std::size_t(l - 1)].backward(dh);
    }
    Tensor dx = conv_in.backward(dh);
    mlp1.backward(mlp_act.backward(mlp2.backward(demb)));
    return dx;
}

}  // namespace voxgen
