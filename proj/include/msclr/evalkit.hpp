#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msclr/dataio.hpp"
#include "msclr/network.hpp"
#include "msclr/pretrain.hpp"

namespace msclr {

struct EvalSchedule {
    int epochs = 20;
    int batch_size = 32;
    double lr = 0.1;
    int lr_drop_epoch = 16;  // 1-based
    double lr_drop_factor = 0.1;
    double momentum = 0.9;
    std::uint64_t seed = 11;
};

// One accuracy entry: a (format, stream) cell, a fused-stream row
// (stream == "fused"), or a format-ensembled row (format == "ensemble").
struct EvalEntry {
    std::string format;
    std::string stream;
    Eigen::MatrixXi confusion;      // rows true class, cols predicted
    double top1 = 0.0;              // trace / total
    std::vector<double> per_class;  // diagonal / row support

    void recompute_from_confusion();
    std::int64_t total() const { return confusion.sum(); }
};

struct EvalReport {
    int n_classes = 0;
    std::string split;
    std::string checkpoint_id;
    std::string ensemble_order;
    std::vector<double> fusion_weights;
    std::vector<EvalEntry> entries;

    const EvalEntry& find(const std::string& format, const std::string& stream) const;
    bool has(const std::string& format, const std::string& stream) const;

    std::string to_json_string() const;
    static EvalReport from_json_string(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static EvalReport load(const std::filesystem::path& path);
};

// mean softmax cross-entropy; grad_scores receives d(mean loss)/d(scores)
double softmax_cross_entropy(const Tensor& scores, const std::vector<int>& labels,
                             Tensor* grad_scores = nullptr);

// row-wise softmax
Tensor softmax_rows(const Tensor& scores);

// weighted sum of per-stream score arrays; shapes must agree.
Tensor fuse_streams(const std::vector<Tensor>& stream_scores, const std::vector<double>& weights);

// arithmetic mean of row-stochastic score arrays; rejects rows that do not
// sum to 1 within 1e-9 or contain negative entries.
Tensor ensemble_formats(const std::vector<Tensor>& softmax_scores);

// Frozen-encoder embedding extraction for one (format, stream) cell, eval
// mode, no augmentation. Returns [n_records, embedding_dim]; labels_out gets
// the record labels in order.
Tensor extract_embeddings(Encoder& encoder, const AdjacencySet& adj,
                          const std::vector<const SequenceRecord*>& records,
                          const std::string& format, Stream stream, int frames,
                          const ConventionRegistry& registry, std::vector<int>* labels_out = nullptr,
                          int batch_size = 16);

// Linear evaluation: train a single affine head on frozen embeddings.
LinearHead train_linear(Encoder& encoder, const AdjacencySet& adj,
                        const std::vector<const SequenceRecord*>& train_records,
                        const std::string& format, Stream stream, int frames, int n_classes,
                        const EvalSchedule& schedule, const ConventionRegistry& registry);

enum class EnsembleOrder { kFormatsThenStreams, kStreamsThenFormats };
EnsembleOrder ensemble_order_from_string(const std::string& s);
std::string ensemble_order_to_string(EnsembleOrder o);

struct EvalProtocol {
    std::vector<std::string> formats;
    std::vector<Stream> streams{Stream::kJoint, Stream::kMotion, Stream::kBone};
    std::vector<double> fusion_weights{0.6, 0.6, 0.4};
    bool ensemble = true;
    EnsembleOrder order = EnsembleOrder::kFormatsThenStreams;
    std::string split = "test";
    int frames = 50;
    int n_classes = 0;
    std::string checkpoint_id;
};

// Heads are keyed "format/stream" (e.g. "kinectv2/joint").
using HeadGrid = std::map<std::string, LinearHead>;
std::string head_key(const std::string& format, Stream stream);

// Per-cell top-1, fused-stream, and format-ensembled accuracies with
// confusion counts. Ties in argmax break toward the lowest class index.
EvalReport evaluate(Encoder& encoder, const std::map<std::string, AdjacencySet>& adjacency,
                    const HeadGrid& heads, const std::vector<const SequenceRecord*>& records,
                    const ConventionRegistry& registry, const EvalProtocol& protocol);

// Per-class top-1 difference a - b, sorted descending (ties by class index).
std::vector<std::pair<int, double>> per_class_diff(const EvalEntry& a, const EvalEntry& b);

// Bar chart of per-class accuracy differences.
std::string svg_bar_chart(const std::vector<std::pair<int, double>>& diffs,
                          const std::string& title);

}  // namespace msclr
