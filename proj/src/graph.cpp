#include "msclr/graph.hpp"

#include <queue>

#include "msclr/errors.hpp"

namespace msclr {

Eigen::MatrixXd build_adjacency(const SkeletonConvention& conv) {
    conv.validate();
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(conv.joint_count, conv.joint_count);
    for (auto [i, j] : conv.edges) {
        a(i, j) = 1.0;
        a(j, i) = 1.0;
    }
    return a;
}

Eigen::MatrixXi hop_distance(const Eigen::MatrixXd& adjacency) {
    const auto v = adjacency.rows();
    if (adjacency.cols() != v) throw shape_error("hop_distance expects a square matrix");
    Eigen::MatrixXi hops = Eigen::MatrixXi::Constant(v, v, -1);
    for (Eigen::Index src = 0; src < v; ++src) {
        hops(src, src) = 0;
        std::queue<Eigen::Index> q;
        q.push(src);
        while (!q.empty()) {
            const auto u = q.front();
            q.pop();
            for (Eigen::Index w = 0; w < v; ++w) {
                if (adjacency(u, w) != 0.0 && hops(src, w) < 0) {
                    hops(src, w) = hops(src, u) + 1;
                    q.push(w);
                }
            }
        }
    }
    return hops;
}

std::vector<std::pair<int, int>> neighbor_set(const Eigen::MatrixXi& hop_matrix, int joint,
                                              int spatial_kernel, int temporal_kernel, int t,
                                              int frames) {
    const int v = static_cast<int>(hop_matrix.rows());
    if (joint < 0 || joint >= v) throw std::out_of_range("neighbor_set: joint index out of range");
    if (spatial_kernel < 0) throw std::invalid_argument("neighbor_set: spatial kernel must be >= 0");
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0)
        throw std::invalid_argument("neighbor_set: temporal kernel must be odd and >= 1");

    const int half = temporal_kernel / 2;
    std::vector<std::pair<int, int>> out;
    for (int q = std::max(0, t - half); q <= std::min(frames - 1, t + half); ++q)
        for (int j = 0; j < v; ++j) {
            const int d = hop_matrix(j, joint);
            if (d >= 0 && d <= spatial_kernel) out.emplace_back(q, j);
        }
    return out;
}

std::array<Eigen::MatrixXd, kNumPartitions> partition_spatial(const Eigen::MatrixXd& adjacency,
                                                              const Eigen::MatrixXi& hop_matrix,
                                                              int center_joint) {
    const auto v = adjacency.rows();
    if (center_joint < 0 || center_joint >= v)
        throw std::out_of_range("partition_spatial: center joint out of range");
    for (Eigen::Index i = 0; i < v; ++i)
        if (hop_matrix(i, center_joint) < 0)
            throw topology_error("partition_spatial: graph disconnected from center joint");

    std::array<Eigen::MatrixXd, kNumPartitions> parts;
    for (auto& p : parts) p = Eigen::MatrixXd::Zero(v, v);
    // row i: neighborhood of joint i; column j: the neighbor being labeled
    for (Eigen::Index i = 0; i < v; ++i) {
        for (Eigen::Index j = 0; j < v; ++j) {
            const bool in_hood = (i == j) || adjacency(i, j) != 0.0;
            if (!in_hood) continue;
            if (i == j)
                parts[kRoot](i, j) = 1.0;
            else if (hop_matrix(j, center_joint) < hop_matrix(i, center_joint))
                parts[kCentripetal](i, j) = 1.0;
            else
                parts[kCentrifugal](i, j) = 1.0;
        }
    }
    return parts;
}

AdjacencySet normalize_and_pad(const std::string& convention,
                               const std::array<Eigen::MatrixXd, kNumPartitions>& partitions,
                               const Eigen::MatrixXi& hop_matrix, int padded_joints) {
    const auto v = partitions[0].rows();
    if (padded_joints < v) throw shape_error("normalize_and_pad: padded size smaller than graph");

    AdjacencySet set;
    set.convention = convention;
    set.hop_matrix = hop_matrix;
    set.valid_joints = static_cast<int>(v);
    set.padded_joints = padded_joints;
    for (int p = 0; p < kNumPartitions; ++p) {
        Eigen::MatrixXd padded = Eigen::MatrixXd::Zero(padded_joints, padded_joints);
        for (Eigen::Index i = 0; i < v; ++i) {
            const double row_sum = partitions[p].row(i).sum();
            if (row_sum > 0.0) padded.block(i, 0, 1, v) = partitions[p].row(i) / row_sum;
        }
        set.partitions[p] = std::move(padded);
    }
    return set;
}

AdjacencySet build_adjacency_set(const SkeletonConvention& conv, int padded_joints) {
    const Eigen::MatrixXd adjacency = build_adjacency(conv);
    const Eigen::MatrixXi hops = hop_distance(adjacency);
    const auto parts = partition_spatial(adjacency, hops, conv.center_joint);
    return normalize_and_pad(conv.name, parts, hops, padded_joints);
}

}  // namespace msclr
