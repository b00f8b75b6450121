#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msclr/conventions.hpp"
#include "msclr/rng.hpp"
#include "msclr/tensor.hpp"

namespace msclr {

// One clip rendered into one or more skeleton conventions. All formats of a
// record describe the same underlying motion (same frame count, same persons).
struct SequenceRecord {
    std::string sample_id;
    std::map<std::string, Tensor> formats;  // convention name -> raw [C, V_s, T, P]
    int label = -1;
    std::string split;  // "train" / "test"
};

struct AugmentationConfig {
    double shear_amplitude = 0.5;
    double crop_min_ratio = 0.5;
    double crop_max_ratio = 1.0;
    double flip_probability = 0.5;
    double noise_sigma = 0.05;   // meters
    double blur_sigma = 1.0;     // frames
    bool enable_shear = true;
    bool enable_crop = true;
    bool enable_flip = true;
    bool enable_noise = true;
    bool enable_blur = true;

    static AugmentationConfig disabled() {
        AugmentationConfig c;
        c.enable_shear = c.enable_crop = c.enable_flip = c.enable_noise = c.enable_blur = false;
        return c;
    }

    void validate() const;  // throws config_error on bad ranges
};

// Linear resample of a raw [C, V, T, P] array onto frames_out uniformly spaced
// points spanning [0, T-1]. A single input frame broadcasts.
Tensor interpolate_frames(const Tensor& raw, int frames_out = 50);

// bone[child] = joint[child] - joint[parent] over the convention's tree rooted
// at center_joint; bone[root] = 0; padded joints stay zero.
PoseSequence derive_bone_stream(const PoseSequence& seq, const SkeletonConvention& conv);

// motion[t] = joint[t+1] - joint[t]; last frame zero.
PoseSequence derive_motion_stream(const PoseSequence& seq);

enum class Stream { kJoint, kBone, kMotion };
Stream stream_from_string(const std::string& name);
std::string stream_to_string(Stream s);
PoseSequence apply_stream(const PoseSequence& seq, Stream stream, const SkeletonConvention& conv);

// Shear -> temporal crop -> flip -> noise -> blur, in that order. Padded
// joints and absent (all-zero) persons stay exactly zero. Deterministic given
// the rng state.
PoseSequence augment(const PoseSequence& seq, const SkeletonConvention& conv,
                     const AugmentationConfig& config, Rng& rng);

struct SyntheticConfig {
    int frames_base = 60;      // raw frame count varies per record around this
    int person_slots = 2;      // container slots; absent persons are zero-filled
    int active_persons = 1;    // rendered bodies, occupying the leading slots
    double train_fraction = 2.0 / 3.0;
    double fps = 30.0;
};

// Desk-scale stand-in for extracted multi-format data: each class is a
// parametric motion family on a shared virtual body, rendered into every
// registered convention. Deterministic per seed.
std::vector<SequenceRecord> generate_synthetic_dataset(int n_classes, int n_per_class,
                                                       const ConventionRegistry& registry,
                                                       std::uint64_t seed,
                                                       const SyntheticConfig& config = {});

// Dataset directory: manifest.json plus one binary .mskl file per
// (record, format). Values are stored as little-endian float32; see README
// for the exact byte layout. Returns the manifest path.
std::filesystem::path write_dataset(const std::vector<SequenceRecord>& records,
                                    const std::filesystem::path& directory);

std::vector<SequenceRecord> read_dataset(const std::filesystem::path& manifest_path,
                                         const ConventionRegistry& registry);

// Single-file helpers used by the dataset reader/writer and the validator.
void write_sequence_file(const std::filesystem::path& path, const std::string& convention,
                         const Tensor& raw);
Tensor read_sequence_file(const std::filesystem::path& path, std::string& convention_out);

}  // namespace msclr
