#include "msclr/dataio.hpp"

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <queue>
#include <set>

#include <json.hpp>

#include "msclr/errors.hpp"

namespace msclr {

static_assert(std::endian::native == std::endian::little,
              "sequence files are little-endian; big-endian hosts are unsupported");

using json = nlohmann::ordered_json;

void AugmentationConfig::validate() const {
    if (!(shear_amplitude >= 0.0) || !std::isfinite(shear_amplitude))
        throw config_error("shear_amplitude must be finite and >= 0");
    if (!(crop_min_ratio > 0.0 && crop_min_ratio <= 1.0) ||
        !(crop_max_ratio > 0.0 && crop_max_ratio <= 1.0) || crop_min_ratio > crop_max_ratio)
        throw config_error("crop ratio range must satisfy 0 < min <= max <= 1");
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
        throw config_error("flip_probability must be in [0, 1]");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
        throw config_error("noise_sigma must be finite and >= 0");
    if (!(blur_sigma >= 0.0) || !std::isfinite(blur_sigma))
        throw config_error("blur_sigma must be finite and >= 0");
}

Tensor interpolate_frames(const Tensor& raw, int frames_out) {
    if (raw.ndim() != 4) throw shape_error("interpolate_frames expects a [C, V, T, P] array");
    if (frames_out < 1) throw std::invalid_argument("frames_out must be >= 1");
    const auto c = raw.dim(0), v = raw.dim(1), t_in = raw.dim(2), p = raw.dim(3);
    if (t_in < 1) throw shape_error("interpolate_frames: empty sequence");

    Tensor out({c, v, frames_out, p});
    for (std::int64_t k = 0; k < frames_out; ++k) {
        double pos = 0.0;
        if (t_in > 1 && frames_out > 1)
            pos = static_cast<double>(k) * static_cast<double>(t_in - 1) /
                  static_cast<double>(frames_out - 1);
        const auto i0 = static_cast<std::int64_t>(pos);
        const auto i1 = std::min(i0 + 1, t_in - 1);
        const double w = pos - static_cast<double>(i0);
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t vi = 0; vi < v; ++vi)
                for (std::int64_t pi = 0; pi < p; ++pi)
                    out(ci, vi, k, pi) =
                        (1.0 - w) * raw(ci, vi, i0, pi) + w * raw(ci, vi, i1, pi);
    }
    return out;
}

namespace {

// parent[j] over the convention tree rooted at the center joint; -1 at root
std::vector<int> tree_parents(const SkeletonConvention& conv) {
    std::vector<std::vector<int>> adj(conv.joint_count);
    for (auto [a, b] : conv.edges) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    std::vector<int> parent(conv.joint_count, -1);
    std::vector<char> visited(conv.joint_count, 0);
    std::queue<int> q;
    q.push(conv.center_joint);
    visited[conv.center_joint] = 1;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int w : adj[u])
            if (!visited[w]) {
                visited[w] = 1;
                parent[w] = u;
                q.push(w);
            }
    }
    return parent;
}

std::vector<char> active_persons(const Tensor& data) {
    const auto c = data.dim(0), v = data.dim(1), t = data.dim(2), p = data.dim(3);
    std::vector<char> active(static_cast<std::size_t>(p), 0);
    for (std::int64_t pi = 0; pi < p; ++pi) {
        for (std::int64_t ci = 0; ci < c && !active[pi]; ++ci)
            for (std::int64_t vi = 0; vi < v && !active[pi]; ++vi)
                for (std::int64_t ti = 0; ti < t; ++ti)
                    if (data(ci, vi, ti, pi) != 0.0) {
                        active[pi] = 1;
                        break;
                    }
    }
    return active;
}

}  // namespace

PoseSequence derive_bone_stream(const PoseSequence& seq, const SkeletonConvention& conv) {
    if (seq.convention != conv.name)
        throw shape_error("derive_bone_stream: sequence is " + seq.convention + ", not " +
                          conv.name);
    const auto parent = tree_parents(conv);
    PoseSequence out = seq;
    out.data.set_zero();
    const auto c = seq.data.dim(0), t = seq.data.dim(2), p = seq.data.dim(3);
    for (int j = 0; j < conv.joint_count; ++j) {
        if (parent[j] < 0) continue;  // root bone stays zero
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t ti = 0; ti < t; ++ti)
                for (std::int64_t pi = 0; pi < p; ++pi)
                    out.data(ci, j, ti, pi) =
                        seq.data(ci, j, ti, pi) - seq.data(ci, parent[j], ti, pi);
    }
    return out;
}

PoseSequence derive_motion_stream(const PoseSequence& seq) {
    PoseSequence out = seq;
    out.data.set_zero();
    const auto c = seq.data.dim(0), v = seq.data.dim(1), t = seq.data.dim(2), p = seq.data.dim(3);
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t vi = 0; vi < v; ++vi)
            for (std::int64_t ti = 0; ti + 1 < t; ++ti)
                for (std::int64_t pi = 0; pi < p; ++pi)
                    out.data(ci, vi, ti, pi) =
                        seq.data(ci, vi, ti + 1, pi) - seq.data(ci, vi, ti, pi);
    return out;
}

Stream stream_from_string(const std::string& name) {
    if (name == "joint") return Stream::kJoint;
    if (name == "bone") return Stream::kBone;
    if (name == "motion") return Stream::kMotion;
    throw config_error("unknown stream: " + name);
}

std::string stream_to_string(Stream s) {
    switch (s) {
        case Stream::kJoint: return "joint";
        case Stream::kBone: return "bone";
        case Stream::kMotion: return "motion";
    }
    return "joint";
}

PoseSequence apply_stream(const PoseSequence& seq, Stream stream, const SkeletonConvention& conv) {
    switch (stream) {
        case Stream::kJoint: return seq;
        case Stream::kBone: return derive_bone_stream(seq, conv);
        case Stream::kMotion: return derive_motion_stream(seq);
    }
    return seq;
}

PoseSequence augment(const PoseSequence& seq, const SkeletonConvention& conv,
                     const AugmentationConfig& config, Rng& rng) {
    config.validate();
    if (seq.convention != conv.name)
        throw shape_error("augment: sequence is " + seq.convention + ", not " + conv.name);

    PoseSequence out = seq;
    const auto c = out.data.dim(0), t = out.data.dim(2), p = out.data.dim(3);
    const int v_valid = conv.joint_count;
    const auto active = active_persons(out.data);

    if (config.enable_shear) {
        if (c != 3) throw shape_error("shear augmentation requires 3 coordinate channels");
        Eigen::Matrix3d shear = Eigen::Matrix3d::Identity();
        for (int r = 0; r < 3; ++r)
            for (int s = 0; s < 3; ++s)
                if (r != s) shear(r, s) = rng.uniform(-config.shear_amplitude, config.shear_amplitude);
        for (int vi = 0; vi < v_valid; ++vi)
            for (std::int64_t ti = 0; ti < t; ++ti)
                for (std::int64_t pi = 0; pi < p; ++pi) {
                    if (!active[pi]) continue;
                    const Eigen::Vector3d x(out.data(0, vi, ti, pi), out.data(1, vi, ti, pi),
                                            out.data(2, vi, ti, pi));
                    const Eigen::Vector3d y = shear * x;
                    out.data(0, vi, ti, pi) = y(0);
                    out.data(1, vi, ti, pi) = y(1);
                    out.data(2, vi, ti, pi) = y(2);
                }
    }

    if (config.enable_crop) {
        const double ratio = rng.uniform(config.crop_min_ratio, config.crop_max_ratio);
        const auto len = std::clamp<std::int64_t>(
            static_cast<std::int64_t>(std::lround(ratio * static_cast<double>(t))), 1, t);
        const auto start = rng.uniform_int(0, t - len);
        Tensor window({c, out.data.dim(1), len, p});
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t vi = 0; vi < out.data.dim(1); ++vi)
                for (std::int64_t ti = 0; ti < len; ++ti)
                    for (std::int64_t pi = 0; pi < p; ++pi)
                        window(ci, vi, ti, pi) = out.data(ci, vi, start + ti, pi);
        out.data = interpolate_frames(window, static_cast<int>(t));
    }

    if (config.enable_flip && rng.bernoulli(config.flip_probability)) {
        Tensor flipped = out.data;
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double sign = (ci == 0) ? -1.0 : 1.0;  // channel 0 is the lateral axis
            for (int vi = 0; vi < v_valid; ++vi)
                for (std::int64_t ti = 0; ti < t; ++ti)
                    for (std::int64_t pi = 0; pi < p; ++pi)
                        flipped(ci, vi, ti, pi) =
                            active[pi] ? sign * out.data(ci, conv.swap_map[vi], ti, pi) : 0.0;
        }
        out.data = std::move(flipped);
    }

    if (config.enable_noise && config.noise_sigma > 0.0) {
        // draws depend only on active persons, so trailing absent slots can
        // be dropped without shifting the stream
        for (std::int64_t pi = 0; pi < p; ++pi) {
            if (!active[pi]) continue;
            for (int vi = 0; vi < v_valid; ++vi)
                for (std::int64_t ti = 0; ti < t; ++ti)
                    for (std::int64_t ci = 0; ci < c; ++ci)
                        out.data(ci, vi, ti, pi) += rng.normal(0.0, config.noise_sigma);
        }
    }

    if (config.enable_blur && config.blur_sigma > 0.0) {
        const int radius = std::max<int>(1, static_cast<int>(std::ceil(3.0 * config.blur_sigma)));
        std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
        for (int g = -radius; g <= radius; ++g)
            kernel[static_cast<std::size_t>(g + radius)] =
                std::exp(-0.5 * (g / config.blur_sigma) * (g / config.blur_sigma));
        Tensor blurred = out.data;
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (int vi = 0; vi < v_valid; ++vi)
                for (std::int64_t pi = 0; pi < p; ++pi) {
                    if (!active[pi]) continue;
                    for (std::int64_t ti = 0; ti < t; ++ti) {
                        double acc = 0.0, norm = 0.0;
                        for (int g = -radius; g <= radius; ++g) {
                            const auto q = ti + g;
                            if (q < 0 || q >= t) continue;  // truncate at boundaries
                            const double w = kernel[static_cast<std::size_t>(g + radius)];
                            acc += w * out.data(ci, vi, q, pi);
                            norm += w;
                        }
                        blurred(ci, vi, ti, pi) = acc / norm;
                    }
                }
        out.data = std::move(blurred);
    }

    return out;
}

// ---------------------------------------------------------------------------
// Synthetic motion families
// ---------------------------------------------------------------------------

namespace {

using Vec3 = Eigen::Vector3d;

// Axes: x lateral (left negative), y up, z forward. Units meters.
struct BodyFrame {
    Vec3 hip_c, spine_mid, chest, neck, head_c, head_top;
    Vec3 shoulder[2], elbow[2], wrist[2];  // 0 = left, 1 = right
    Vec3 hip[2], knee[2], ankle[2];
    double scale = 1.0;
};

struct MotionParams {
    double scale, arm_freq, arm_base, arm_amp, leg_freq, leg_amp, bob_amp, speed, phase;
};

MotionParams draw_motion_params(int label, Rng& rng) {
    MotionParams m;
    // class-determined family; per-record jitter keeps records distinct
    m.arm_freq = (0.6 + 0.25 * label) * rng.uniform(0.95, 1.05);
    m.arm_base = 0.25 + 0.30 * label;
    m.arm_amp = 0.35 + 0.05 * label;
    m.leg_freq = (0.8 + 0.20 * label) * rng.uniform(0.95, 1.05);
    m.leg_amp = 0.20 + 0.06 * label;
    m.bob_amp = 0.010 + 0.005 * label;
    m.speed = 0.20 + 0.15 * label;
    m.scale = rng.uniform(0.92, 1.08);
    m.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    return m;
}

BodyFrame body_at(const MotionParams& m, double seconds, const Vec3& offset) {
    constexpr double kTau = 2.0 * 3.14159265358979323846;
    const double s = m.scale;
    const double psi = kTau * m.arm_freq * seconds + m.phase;
    const double leg_psi = kTau * m.leg_freq * seconds + m.phase;

    BodyFrame b;
    b.scale = s;
    b.hip_c = offset + Vec3(0.0, 0.95 * s + m.bob_amp * std::sin(2.0 * psi), m.speed * seconds);
    b.spine_mid = b.hip_c + Vec3(0.0, 0.20 * s, 0.0);
    b.chest = b.hip_c + Vec3(0.0, 0.40 * s, 0.0);
    b.neck = b.hip_c + Vec3(0.0, 0.55 * s, 0.0);
    b.head_c = b.hip_c + Vec3(0.0, 0.67 * s, 0.0);
    b.head_top = b.hip_c + Vec3(0.0, 0.80 * s, 0.0);

    for (int side = 0; side < 2; ++side) {
        const double sx = side == 0 ? -1.0 : 1.0;
        const double side_phase = side == 0 ? 0.0 : 3.14159265358979323846;

        b.shoulder[side] = b.chest + Vec3(sx * 0.20 * s, 0.05 * s, 0.0);
        const double alpha = m.arm_base + m.arm_amp * std::sin(psi + side_phase);
        b.elbow[side] = b.shoulder[side] + 0.28 * s * Vec3(0.0, -std::cos(alpha), std::sin(alpha));
        const double beta = 0.30 + 0.25 * std::sin(psi + side_phase + 0.5);
        b.wrist[side] =
            b.elbow[side] + 0.26 * s * Vec3(0.0, -std::cos(alpha + beta), std::sin(alpha + beta));

        b.hip[side] = b.hip_c + Vec3(sx * 0.10 * s, -0.02 * s, 0.0);
        const double gamma = m.leg_amp * std::sin(leg_psi + side_phase);
        b.knee[side] = b.hip[side] + 0.42 * s * Vec3(0.0, -std::cos(gamma), std::sin(gamma));
        const double gamma2 = 0.5 * gamma;
        b.ankle[side] = b.knee[side] + 0.40 * s * Vec3(0.0, -std::cos(gamma2), std::sin(gamma2));
    }
    return b;
}

Vec3 joint_position(const BodyFrame& b, const std::string& name) {
    const double s = b.scale;

    int side = -1;  // 0 left, 1 right
    std::string base = name;
    if (name.rfind("l_", 0) == 0) {
        side = 0;
        base = name.substr(2);
    } else if (name.rfind("r_", 0) == 0) {
        side = 1;
        base = name.substr(2);
    }
    const double sx = side == 1 ? 1.0 : -1.0;

    auto lerp = [](const Vec3& a, const Vec3& c, double w) { return a + w * (c - a); };

    // midline
    if (base == "pelvis" || base == "spine_base") return b.hip_c;
    if (base == "spine_lower") return lerp(b.hip_c, b.spine_mid, 0.5);
    if (base == "spine1") return lerp(b.hip_c, b.chest, 0.30);
    if (base == "spine_mid") return b.spine_mid;
    if (base == "spine2") return lerp(b.hip_c, b.chest, 0.60);
    if (base == "spine3") return lerp(b.hip_c, b.chest, 0.85);
    if (base == "spine_upper") return b.chest;
    if (base == "spine_shoulder") return lerp(b.chest, b.neck, 0.5);
    if (base == "chest") return b.chest + Vec3(0.0, 0.0, 0.10 * s);
    if (base == "back") return b.chest + Vec3(0.0, 0.0, -0.10 * s);
    if (base == "neck") return b.neck;
    if (base == "head" || base == "head_base") return b.head_c;
    if (base == "head_top") return b.head_top;

    if (side >= 0) {
        const Vec3& sh = b.shoulder[side];
        const Vec3& el = b.elbow[side];
        const Vec3& wr = b.wrist[side];
        const Vec3 fore = (wr - el).normalized();
        const Vec3 thumb_in(-sx, 0.0, 0.0);  // thumbs point toward the body midline

        if (base == "head") return b.head_c + Vec3(sx * 0.09 * s, 0.0, 0.0);
        if (base == "eye") return b.head_c + Vec3(sx * 0.035 * s, 0.04 * s, 0.08 * s);
        if (base == "collar") return lerp(b.neck, sh, 0.4);
        if (base == "clavicle") return lerp(b.neck, sh, 0.5);
        if (base == "shoulder") return sh;
        if (base == "upperarm") return lerp(sh, el, 0.5);
        if (base == "elbow") return el;
        if (base == "forearm") return lerp(el, wr, 0.5);
        if (base == "wrist") return wr;
        if (base == "hand") return wr + 0.08 * s * fore;
        if (base == "handtip") return wr + 0.16 * s * fore;
        if (base == "thumb") return wr + 0.06 * s * fore + 0.03 * s * thumb_in;
        for (int k = 1; k <= 3; ++k) {
            const std::string suffix = std::to_string(k);
            if (base == "thumb" + suffix)
                return wr + (0.03 + 0.03 * k) * s * fore + 0.035 * s * thumb_in;
            if (base == "index" + suffix)
                return wr + (0.05 + 0.03 * k) * s * fore + 0.012 * s * thumb_in;
            if (base == "middle" + suffix)
                return wr + (0.05 + 0.03 * k) * s * fore - 0.012 * s * thumb_in;
        }

        const Vec3& hp = b.hip[side];
        const Vec3& kn = b.knee[side];
        const Vec3& ak = b.ankle[side];
        if (base == "hip") return hp;
        if (base == "thigh") return lerp(hp, kn, 0.5);
        if (base == "knee") return kn;
        if (base == "shin") return lerp(kn, ak, 0.5);
        if (base == "ankle") return ak;
        if (base == "heel") return ak + Vec3(0.0, -0.05 * s, -0.05 * s);
        if (base == "toe") return ak + Vec3(0.0, -0.07 * s, 0.12 * s);
        if (base == "foot") return ak + Vec3(0.0, -0.07 * s, 0.10 * s);
        if (base == "waist") return b.hip_c + Vec3(sx * 0.13 * s, 0.0, 0.0);
    }

    throw error("synthetic generator has no sampler for joint '" + name + "'");
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

std::vector<SequenceRecord> generate_synthetic_dataset(int n_classes, int n_per_class,
                                                       const ConventionRegistry& registry,
                                                       std::uint64_t seed,
                                                       const SyntheticConfig& config) {
    if (n_classes < 2) throw config_error("synthetic dataset needs at least 2 classes");
    if (n_per_class < 1) throw config_error("n_per_class must be >= 1");
    if (registry.all().empty()) throw config_error("registry has no conventions");
    if (config.person_slots < 1 || config.active_persons < 1 ||
        config.active_persons > config.person_slots)
        throw config_error("need 1 <= active_persons <= person_slots");

    const int n_train = static_cast<int>(
        std::ceil(config.train_fraction * static_cast<double>(n_per_class)));

    std::vector<SequenceRecord> records;
    records.reserve(static_cast<std::size_t>(n_classes) * n_per_class);
    for (int label = 0; label < n_classes; ++label) {
        for (int idx = 0; idx < n_per_class; ++idx) {
            Rng rng(hash_u64(hash_u64(seed, static_cast<std::uint64_t>(label)),
                             static_cast<std::uint64_t>(idx)));
            const auto params = draw_motion_params(label, rng);
            const auto frames =
                static_cast<int>(config.frames_base + rng.uniform_int(-5, 10));

            SequenceRecord rec;
            char id[32];
            std::snprintf(id, sizeof(id), "c%d_r%03d", label, idx);
            rec.sample_id = id;
            rec.label = label;
            rec.split = idx < n_train ? "train" : "test";

            std::vector<Vec3> person_offsets;
            std::vector<double> person_phases;
            for (int pi = 0; pi < config.active_persons; ++pi) {
                person_offsets.emplace_back(0.8 * pi, 0.0, -0.3 * pi);
                person_phases.push_back(pi * 1.0471975511965976);  // pi/3 apart
            }

            // shared motion sampled at every convention's joints; trailing
            // person slots stay zero-filled
            for (const auto& conv : registry.all()) {
                Tensor raw({3, conv.joint_count, frames, config.person_slots});
                for (int pi = 0; pi < config.active_persons; ++pi) {
                    MotionParams pp = params;
                    pp.phase += person_phases[static_cast<std::size_t>(pi)];
                    for (int t = 0; t < frames; ++t) {
                        const auto body = body_at(pp, t / config.fps,
                                                  person_offsets[static_cast<std::size_t>(pi)]);
                        for (int j = 0; j < conv.joint_count; ++j) {
                            const Vec3 pos = joint_position(body, conv.joint_names[j]);
                            for (int ci = 0; ci < 3; ++ci)
                                raw(ci, j, t, pi) = to_f32(pos(ci));
                        }
                    }
                }
                rec.formats.emplace(conv.name, std::move(raw));
            }
            records.push_back(std::move(rec));
        }
    }
    return records;
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'K', 'L'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw io_error("truncated file: " + path);
    return v;
}

}  // namespace

void write_sequence_file(const std::filesystem::path& path, const std::string& convention,
                         const Tensor& raw) {
    if (raw.ndim() != 4) throw shape_error("sequence file expects a [C, V, T, P] array");
    if (convention.size() > 0xffff) throw io_error("convention name too long");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path.string());

    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kVersion);
    for (int d = 0; d < 4; ++d) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(raw.dim(d)));
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(convention.size()));
    os.write(convention.data(), static_cast<std::streamsize>(convention.size()));
    for (std::int64_t i = 0; i < raw.numel(); ++i)
        write_pod<float>(os, static_cast<float>(raw.flat(i)));
    if (!os) throw io_error("write failed: " + path.string());
}

Tensor read_sequence_file(const std::filesystem::path& path, std::string& convention_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path.string());

    char magic[4];
    if (!is.read(magic, 4)) throw io_error("truncated file: " + path.string());
    if (std::memcmp(magic, kMagic, 4) != 0) throw io_error("bad magic bytes: " + path.string());
    const auto version = read_pod<std::uint32_t>(is, path.string());
    if (version != kVersion)
        throw io_error("unsupported version " + std::to_string(version) + ": " + path.string());

    std::uint32_t dims[4];
    for (auto& d : dims) d = read_pod<std::uint32_t>(is, path.string());
    std::uint64_t numel = 1;
    for (auto d : dims) {
        if (d == 0) throw io_error("malformed header (zero dimension): " + path.string());
        numel *= d;
    }
    if (numel > (1ull << 30)) throw io_error("malformed header (oversized array): " + path.string());

    const auto name_len = read_pod<std::uint16_t>(is, path.string());
    std::string name(name_len, '\0');
    if (name_len > 0 && !is.read(name.data(), name_len))
        throw io_error("truncated file: " + path.string());
    convention_out = name;

    Tensor raw({static_cast<std::int64_t>(dims[0]), static_cast<std::int64_t>(dims[1]),
                static_cast<std::int64_t>(dims[2]), static_cast<std::int64_t>(dims[3])});
    std::vector<float> buf(static_cast<std::size_t>(numel));
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(numel * sizeof(float))))
        throw io_error("truncated file: " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        if (!std::isfinite(buf[i]))
            throw io_error("non-finite value in sequence file: " + path.string());
        raw.flat(static_cast<std::int64_t>(i)) = static_cast<double>(buf[i]);
    }
    return raw;
}

std::filesystem::path write_dataset(const std::vector<SequenceRecord>& records,
                                    const std::filesystem::path& directory) {
    std::error_code ec;
    std::filesystem::create_directories(directory / "data", ec);
    if (ec) throw io_error("cannot create dataset directory: " + directory.string());

    json manifest;
    manifest["format"] = "msclr-dataset";
    manifest["version"] = 1;
    manifest["records"] = json::array();
    for (const auto& rec : records) {
        if (rec.formats.empty()) throw io_error("record " + rec.sample_id + " has no formats");
        json entry;
        entry["sample_id"] = rec.sample_id;
        entry["label"] = rec.label;
        entry["split"] = rec.split;
        json files;
        for (const auto& [conv, raw] : rec.formats) {
            const std::string rel = "data/" + rec.sample_id + "." + conv + ".mskl";
            write_sequence_file(directory / rel, conv, raw);
            files[conv] = rel;
        }
        entry["formats"] = std::move(files);
        manifest["records"].push_back(std::move(entry));
    }

    const auto manifest_path = directory / "manifest.json";
    std::ofstream os(manifest_path);
    if (!os) throw io_error("cannot write manifest: " + manifest_path.string());
    os << manifest.dump(2) << "\n";
    return manifest_path;
}

std::vector<SequenceRecord> read_dataset(const std::filesystem::path& manifest_path,
                                         const ConventionRegistry& registry) {
    std::ifstream is(manifest_path);
    if (!is) throw io_error("cannot open manifest: " + manifest_path.string());
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw io_error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "msclr-dataset")
        throw io_error("not a dataset manifest: " + manifest_path.string());

    const auto root = manifest_path.parent_path();
    std::vector<SequenceRecord> records;
    for (const auto& entry : manifest.at("records")) {
        SequenceRecord rec;
        rec.sample_id = entry.at("sample_id").get<std::string>();
        rec.label = entry.at("label").get<int>();
        rec.split = entry.at("split").get<std::string>();
        std::int64_t frames = -1, persons = -1;
        for (const auto& [conv_name, rel] : entry.at("formats").items()) {
            if (!registry.contains(conv_name))
                throw io_error("record " + rec.sample_id + ": unknown convention " + conv_name);
            const auto path = root / rel.get<std::string>();
            if (!std::filesystem::exists(path))
                throw io_error("record " + rec.sample_id + ": missing file " + path.string());
            std::string file_conv;
            Tensor raw = read_sequence_file(path, file_conv);
            if (file_conv != conv_name)
                throw io_error("record " + rec.sample_id + ": file " + path.string() +
                               " holds " + file_conv + ", manifest says " + conv_name);
            if (raw.dim(1) != registry.get(conv_name).joint_count)
                throw io_error("record " + rec.sample_id + ": " + conv_name +
                               " joint dimension mismatch in " + path.string());
            if (frames < 0) {
                frames = raw.dim(2);
                persons = raw.dim(3);
            } else if (raw.dim(2) != frames || raw.dim(3) != persons) {
                throw io_error("record " + rec.sample_id +
                               ": formats disagree on frames/persons");
            }
            rec.formats.emplace(conv_name, std::move(raw));
        }
        if (rec.formats.empty())
            throw io_error("record " + rec.sample_id + " has no formats");
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace msclr
