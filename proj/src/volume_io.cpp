#include "voxgen/volume_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>
#include <zlib.h>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace voxgen {

namespace {

bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

i64 count_nonfinite(const FloatVec& data) {
    i64 n = 0;
    for (float v : data)
        if (!std::isfinite(v)) ++n;
    return n;
}

void check_finite(const Volume& v, const std::string& path) {
    const i64 bad = count_nonfinite(v.data);
    if (bad > 0)
        throw IoError("load_volume: " + path + " contains " + std::to_string(bad) +
                      " non-finite voxel values");
}

Volume load_raw_pair(const std::string& stem) {
    const std::string raw_path = stem + ".f32raw";
    const std::string json_path = stem + ".json";
    std::ifstream js(json_path);
    if (!js) throw IoError("load_volume: cannot open sidecar " + json_path);
    json sidecar;
    try {
        js >> sidecar;
    } catch (const std::exception& e) {
        throw IoError("load_volume: bad sidecar JSON in " + json_path + ": " + e.what());
    }
    if (!sidecar.contains("shape") || !sidecar["shape"].is_array() || sidecar["shape"].size() != 3)
        throw IoError("load_volume: sidecar " + json_path + " missing 3-element field 'shape'");
    Volume v;
    v.shape = {sidecar["shape"][0].get<i64>(), sidecar["shape"][1].get<i64>(),
               sidecar["shape"][2].get<i64>()};
    if (v.shape.d <= 0 || v.shape.h <= 0 || v.shape.w <= 0)
        throw IoError("load_volume: sidecar " + json_path + " field 'shape' must be positive, got " +
                      v.shape.str());
    if (sidecar.contains("spacing")) {
        for (int i = 0; i < 3; ++i) v.spacing[std::size_t(i)] = sidecar["spacing"][std::size_t(i)];
        for (double s : v.spacing)
            if (!(s > 0))
                throw IoError("load_volume: sidecar " + json_path + " field 'spacing' must be > 0");
    }
    if (sidecar.contains("intensity_range")) {
        v.intensity_range = {sidecar["intensity_range"][0].get<double>(),
                             sidecar["intensity_range"][1].get<double>()};
    }

    std::ifstream rf(raw_path, std::ios::binary);
    if (!rf) throw IoError("load_volume: cannot open " + raw_path);
    rf.seekg(0, std::ios::end);
    const i64 bytes = i64(rf.tellg());
    rf.seekg(0);
    const i64 expected = v.shape.numel() * i64(sizeof(float));
    if (bytes != expected)
        throw IoError("load_volume: " + raw_path + " holds " + std::to_string(bytes / 4) +
                      " float32 values but sidecar field 'shape' " + v.shape.str() + " implies " +
                      std::to_string(v.shape.numel()));
    v.data.resize(std::size_t(v.shape.numel()));
    rf.read(reinterpret_cast<char*>(v.data.data()), expected);
    if (!rf) throw IoError("load_volume: short read from " + raw_path);
    check_finite(v, raw_path);
    return v;
}

// Fields of the 348-byte NIfTI-1 header we honor.
struct NiftiHeader {
    std::int32_t sizeof_hdr;
    std::int16_t dim[8];
    std::int16_t datatype;
    std::int16_t bitpix;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    char magic[4];
};

NiftiHeader parse_nifti_header(const std::vector<unsigned char>& raw, const std::string& path,
                               bool& swap) {
    if (raw.size() < 348) throw IoError("load_volume: " + path + " too short for a NIfTI-1 header");
    auto rd16 = [&](std::size_t off) {
        std::int16_t v;
        std::memcpy(&v, raw.data() + off, 2);
        return v;
    };
    auto rd32i = [&](std::size_t off) {
        std::int32_t v;
        std::memcpy(&v, raw.data() + off, 4);
        return v;
    };
    auto bswap16 = [](std::int16_t v) {
        return std::int16_t(((v & 0xff) << 8) | ((v >> 8) & 0xff));
    };
    NiftiHeader h{};
    h.sizeof_hdr = rd32i(0);
    std::int16_t dim0 = rd16(40);
    swap = !(dim0 >= 1 && dim0 <= 7);
    auto fix16 = [&](std::int16_t v) { return swap ? bswap16(v) : v; };
    auto fix32f = [&](std::size_t off) {
        unsigned char b[4];
        std::memcpy(b, raw.data() + off, 4);
        if (swap) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
        float f;
        std::memcpy(&f, b, 4);
        return f;
    };
    for (int i = 0; i < 8; ++i) h.dim[i] = fix16(rd16(40 + std::size_t(i) * 2));
    h.datatype = fix16(rd16(70));
    h.bitpix = fix16(rd16(72));
    for (int i = 0; i < 8; ++i) h.pixdim[i] = fix32f(76 + std::size_t(i) * 4);
    h.vox_offset = fix32f(108);
    h.scl_slope = fix32f(112);
    h.scl_inter = fix32f(116);
    std::memcpy(h.magic, raw.data() + 344, 4);
    if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
        throw IoError("load_volume: " + path + " field 'magic' is not a NIfTI-1 signature");
    if (h.dim[0] < 3) throw IoError("load_volume: " + path + " field 'dim[0]' must be >= 3");
    return h;
}

std::vector<unsigned char> read_maybe_gz(const std::string& path) {
    std::vector<unsigned char> out;
    if (ends_with(path, ".gz")) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (!f) throw IoError("load_volume: cannot open " + path);
        unsigned char buf[1 << 16];
        int n;
        while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
        if (n < 0) {
            gzclose(f);
            throw IoError("load_volume: gzip decompression failed for " + path);
        }
        gzclose(f);
    } else {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("load_volume: cannot open " + path);
        out.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    return out;
}

Volume load_nifti(const std::string& path) {
    const auto raw = read_maybe_gz(path);
    bool swap = false;
    const NiftiHeader h = parse_nifti_header(raw, path, swap);

    Volume v;
    // NIfTI dim order is (x,y,z); store as (D,H,W) = (z,y,x)
    v.shape = {i64(h.dim[3]), i64(h.dim[2]), i64(h.dim[1])};
    if (v.shape.numel() <= 0)
        throw IoError("load_volume: " + path + " field 'dim' is degenerate " + v.shape.str());
    v.spacing = {double(h.pixdim[3]), double(h.pixdim[2]), double(h.pixdim[1])};
    for (auto& s : v.spacing)
        if (!(s > 0)) s = 1.0;

    const std::size_t offset = std::size_t(std::max(348.0f, h.vox_offset));
    const i64 n = v.shape.numel();
    const double slope = (h.scl_slope == 0.0f) ? 1.0 : double(h.scl_slope);
    const double inter = (h.scl_slope == 0.0f) ? 0.0 : double(h.scl_inter);
    v.data.resize(std::size_t(n));

    auto need = [&](std::size_t bytes) {
        if (raw.size() < offset + bytes)
            throw IoError("load_volume: " + path + " data section shorter than field 'dim' implies");
    };
    auto swab4 = [&](unsigned char* b) {
        if (swap) {
            std::swap(b[0], b[3]);
            std::swap(b[1], b[2]);
        }
    };
    if (h.datatype == 16) {  // float32
        need(std::size_t(n) * 4);
        for (i64 i = 0; i < n; ++i) {
            unsigned char b[4];
            std::memcpy(b, raw.data() + offset + std::size_t(i) * 4, 4);
            swab4(b);
            float f;
            std::memcpy(&f, b, 4);
            v.data[std::size_t(i)] = float(double(f) * slope + inter);
        }
    } else if (h.datatype == 4) {  // int16
        need(std::size_t(n) * 2);
        for (i64 i = 0; i < n; ++i) {
            unsigned char b[2];
            std::memcpy(b, raw.data() + offset + std::size_t(i) * 2, 2);
            if (swap) std::swap(b[0], b[1]);
            std::int16_t s;
            std::memcpy(&s, b, 2);
            v.data[std::size_t(i)] = float(double(s) * slope + inter);
        }
    } else {
        throw IoError("load_volume: " + path + " field 'datatype'=" + std::to_string(h.datatype) +
                      " unsupported (float32=16 and int16=4 are handled)");
    }
    check_finite(v, path);
    // real data carries its raw range; normalization thresholds come from config
    float lo = v.data[0], hi = v.data[0];
    for (float f : v.data) {
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    v.intensity_range = {double(lo), double(hi)};
    return v;
}

}  // namespace

std::string volume_stem(const std::string& path) {
    for (const char* suf : {".f32raw", ".json", ".nii.gz", ".nii", ".labels.u8raw"})
        if (ends_with(path, suf)) return path.substr(0, path.size() - std::strlen(suf));
    return path;
}

Volume load_volume(const std::string& path) {
    if (ends_with(path, ".nii") || ends_with(path, ".nii.gz")) return load_nifti(path);
    return load_raw_pair(volume_stem(path));
}

void save_volume(const Volume& v, const std::string& stem, std::optional<std::uint64_t> seed) {
    const i64 bad = count_nonfinite(v.data);
    if (bad > 0)
        throw IoError("save_volume: refusing to write " + std::to_string(bad) +
                      " non-finite voxels to " + stem);
    json sidecar;
    sidecar["shape"] = {v.shape.d, v.shape.h, v.shape.w};
    sidecar["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    sidecar["intensity_range"] = {v.intensity_range[0], v.intensity_range[1]};
    if (seed) sidecar["seed"] = *seed;

    const std::string raw_tmp = stem + ".f32raw.partial";
    {
        std::ofstream rf(raw_tmp, std::ios::binary);
        if (!rf) throw IoError("save_volume: cannot open " + raw_tmp + " for writing");
        rf.write(reinterpret_cast<const char*>(v.data.data()),
                 std::streamsize(v.data.size() * sizeof(float)));
        if (!rf) throw IoError("save_volume: short write to " + raw_tmp);
    }
    const std::string json_tmp = stem + ".json.partial";
    {
        std::ofstream js(json_tmp);
        if (!js) throw IoError("save_volume: cannot open " + json_tmp + " for writing");
        js << sidecar.dump(2) << "\n";
    }
    fs::rename(raw_tmp, stem + ".f32raw");
    fs::rename(json_tmp, stem + ".json");
}

void save_labels(const std::vector<std::uint8_t>& labels, Shape3 shape, const std::string& stem) {
    if (i64(labels.size()) != shape.numel())
        throw ArgumentError("save_labels: label count " + std::to_string(labels.size()) +
                            " != volume voxels " + std::to_string(shape.numel()));
    const std::string tmp = stem + ".labels.u8raw.partial";
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("save_labels: cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(labels.data()), std::streamsize(labels.size()));
    f.close();
    fs::rename(tmp, stem + ".labels.u8raw");
}

std::vector<std::uint8_t> load_labels(const std::string& stem, Shape3 shape) {
    const std::string path = stem + ".labels.u8raw";
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_labels: cannot open " + path);
    std::vector<std::uint8_t> labels(std::size_t(shape.numel()));
    f.read(reinterpret_cast<char*>(labels.data()), std::streamsize(labels.size()));
    if (f.gcount() != std::streamsize(labels.size()))
        throw IoError("load_labels: " + path + " shorter than volume voxel count " +
                      std::to_string(shape.numel()));
    return labels;
}

std::vector<std::string> list_volume_stems(const std::string& dir) {
    std::vector<std::string> stems;
    if (!fs::is_directory(dir)) throw IoError("list_volume_stems: not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string p = e.path().string();
        if (ends_with(p, ".f32raw")) stems.push_back(volume_stem(p));
    }
    std::sort(stems.begin(), stems.end());
    return stems;
}

}  // namespace voxgen
