#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msclr/tensor.hpp"

namespace msclr {

// A named skeleton layout: joint count, intra-skeleton edges, the joint used
// as the body's center reference, and the left/right swap map.
struct SkeletonConvention {
    std::string name;
    int joint_count = 0;
    std::vector<std::pair<int, int>> edges;
    int center_joint = 0;
    std::vector<int> swap_map;              // involution; identity on midline joints
    std::vector<std::string> joint_names;   // joint_count entries

    int joint_index(std::string_view joint_name) const;

    // Throws topology_error on bad indices, self loops, duplicate edges,
    // a disconnected body, or a non-involutive swap map.
    void validate() const;
};

// Parse / emit the on-disk topology document (key = value lines).
SkeletonConvention parse_convention(const std::string& text);
SkeletonConvention load_convention(const std::filesystem::path& path);
std::string format_convention(const SkeletonConvention& conv);

// Ordered set of conventions sharing one padded joint axis of size v_max().
class ConventionRegistry {
   public:
    ConventionRegistry() = default;

    // Validates and inserts; throws on duplicate names or invalid topology.
    void add(SkeletonConvention conv);

    bool contains(std::string_view name) const;
    const SkeletonConvention& get(std::string_view name) const;
    const std::vector<SkeletonConvention>& all() const { return conventions_; }
    int v_max() const { return v_max_; }

   private:
    std::vector<SkeletonConvention> conventions_;
    int v_max_ = 0;
};

// The four conventions used throughout: smpl (24), smplx (42), mhad (43),
// kinectv2 (25). v_max() == 43.
ConventionRegistry builtin_registry();

// Topology document text for a builtin convention, as shipped under conventions/.
const std::vector<std::pair<std::string, std::string>>& builtin_topology_documents();

// Pose data padded onto the shared joint axis.
// data layout: [C, V_max, T, P]; joints >= joint_count are exactly zero.
struct PoseSequence {
    Tensor data;
    std::string convention;
    std::vector<std::uint8_t> valid_mask;  // length V_max, leading joint_count entries true
    std::optional<int> label;

    int channels() const { return static_cast<int>(data.dim(0)); }
    int padded_joints() const { return static_cast<int>(data.dim(1)); }
    int frames() const { return static_cast<int>(data.dim(2)); }
    int persons() const { return static_cast<int>(data.dim(3)); }
    int valid_joints() const;
};

// Zero-pad a raw [C, V_s, T, P] array into the registry's unified layout.
PoseSequence pad_to_unified(const Tensor& raw, const std::string& convention,
                            const ConventionRegistry& registry);

}  // namespace msclr
