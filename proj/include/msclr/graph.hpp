#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include "msclr/conventions.hpp"

namespace msclr {

inline constexpr int kNumPartitions = 3;
enum PartitionKind { kRoot = 0, kCentripetal = 1, kCentrifugal = 2 };

// Per-convention stack of degree-normalized, zero-padded partition matrices
// plus the hop-distance table of the unpadded graph. partitions[p] is
// v_max x v_max with row i holding the normalized weights of joint i's
// neighbors in partition p; everything outside the top-left
// valid_joints x valid_joints block is zero.
struct AdjacencySet {
    std::string convention;
    std::array<Eigen::MatrixXd, kNumPartitions> partitions;
    Eigen::MatrixXi hop_matrix;  // valid_joints x valid_joints, -1 = unreachable
    int valid_joints = 0;
    int padded_joints = 0;
};

// Symmetric 0/1 matrix with zero diagonal from the convention's edge list.
Eigen::MatrixXd build_adjacency(const SkeletonConvention& conv);

// All-pairs shortest hop counts by BFS; -1 where unreachable.
Eigen::MatrixXi hop_distance(const Eigen::MatrixXd& adjacency);

// Spatio-temporal neighborhood of (t, joint): all (frame, joint) pairs with
// hop distance <= spatial_kernel and |frame - t| <= temporal_kernel / 2,
// clipped to [0, frames). Sorted by (frame, joint).
std::vector<std::pair<int, int>> neighbor_set(const Eigen::MatrixXi& hop_matrix, int joint,
                                              int spatial_kernel, int temporal_kernel, int t,
                                              int frames);

// Split A + I into root / centripetal / centrifugal 0/1 matrices using hop
// distance to the center joint. Throws topology_error when the graph is
// disconnected from the center.
std::array<Eigen::MatrixXd, kNumPartitions> partition_spatial(const Eigen::MatrixXd& adjacency,
                                                              const Eigen::MatrixXi& hop_matrix,
                                                              int center_joint);

// Row-normalize each partition (rows summing to zero stay zero) and embed into
// the top-left of a padded_joints x padded_joints zero matrix.
AdjacencySet normalize_and_pad(const std::string& convention,
                               const std::array<Eigen::MatrixXd, kNumPartitions>& partitions,
                               const Eigen::MatrixXi& hop_matrix, int padded_joints);

// Full pipeline: adjacency -> hops -> spatial partitions -> normalize + pad.
AdjacencySet build_adjacency_set(const SkeletonConvention& conv, int padded_joints);

}  // namespace msclr
