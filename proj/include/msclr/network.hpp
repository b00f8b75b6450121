#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "msclr/conventions.hpp"
#include "msclr/graph.hpp"
#include "msclr/rng.hpp"
#include "msclr/tensor.hpp"

namespace msclr {

struct STGCNConfig {
    std::vector<int> block_channels{32, 32, 64};
    int input_channels = 3;
    int temporal_kernel = 9;  // odd
    int embedding_dim = 256;
    int projection_dim = 128;
    bool edge_importance = true;
    double dropout = 0.0;

    // standard full-scale trunk
    static STGCNConfig full_scale() {
        STGCNConfig c;
        c.block_channels = {64, 64, 64, 64, 128, 128, 128, 256, 256, 256};
        c.dropout = 0.5;
        return c;
    }

    void validate() const;
};

enum class Mode { kTrain, kTrainFrozenStats, kEval };

// Mini-batch in encoder layout: x is [S, C, T, V] with S = records * persons.
// Slots of absent (all-zero) persons are flagged inactive and excluded from
// normalization statistics and pooling.
struct EncoderBatch {
    Tensor x;
    std::vector<std::uint8_t> slot_active;
    int records = 0;
    int persons = 1;
    int valid_joints = 0;
    std::string convention;
};

EncoderBatch make_batch(const std::vector<const PoseSequence*>& seqs);
EncoderBatch make_batch(const std::vector<PoseSequence>& seqs);

struct EncoderOutput {
    Tensor embedding;   // [records, embedding_dim]
    Tensor projection;  // [records, projection_dim], rows unit-norm
};

struct ParamRef {
    std::string name;
    Tensor* value = nullptr;
    Tensor* grad = nullptr;  // null for buffers
    bool is_buffer = false;
};

struct MaskInfo {
    const std::vector<std::uint8_t>* slot_active = nullptr;
    int valid_joints = 0;
};

// Per-channel batch normalization over (active slot, frame, valid joint).
class BatchNorm {
   public:
    explicit BatchNorm(int channels);
    Tensor forward(const Tensor& x, const MaskInfo& mask, Mode mode);
    // x_in must be the tensor passed to the preceding training forward
    Tensor backward(const Tensor& grad_out, const Tensor& x_in, const MaskInfo& mask);
    void collect(std::vector<ParamRef>& out, const std::string& prefix);

   private:
    int channels_;
    Tensor gamma_, beta_, g_gamma_, g_beta_;
    Tensor running_mean_, running_var_;
    Eigen::VectorXd mean_, inv_std_;  // training-forward cache
    std::int64_t count_ = 0;
    double momentum_ = 0.1;
    double eps_ = 1e-5;
};

struct BlockOptions {
    int in_channels = 0;
    int out_channels = 0;
    int padded_joints = 0;
    int temporal_kernel = 9;
    int stride = 1;
    bool residual = true;
    bool with_norm = true;
    bool with_activation = true;
    bool edge_importance = true;
    double dropout = 0.0;
};

// One spatial graph convolution over the three partition matrices followed by
// a temporal convolution, with mask-aware normalization and a residual path.
// Output at padded joints and inactive slots is exactly zero.
class STGCNBlock {
   public:
    STGCNBlock(const BlockOptions& opt, Rng& init_rng);

    Tensor forward(const Tensor& x, const AdjacencySet& adj, const MaskInfo& mask, Mode mode,
                   Rng* dropout_rng = nullptr);
    // valid after a kTrain forward; consumes the cache
    Tensor backward(const Tensor& grad_out, const AdjacencySet& adj);

    void collect(std::vector<ParamRef>& out, const std::string& prefix);
    int out_frames(int in_frames) const;
    const BlockOptions& options() const { return opt_; }

   private:
    BlockOptions opt_;
    bool conv_residual_ = false;

    std::vector<Tensor> w_spatial_, g_w_spatial_;  // per partition [C_out, C_in]
    Tensor b_spatial_, g_b_spatial_;               // [C_out]
    std::vector<Tensor> edge_mask_, g_edge_mask_;  // per partition [V, V]
    Tensor w_temporal_, g_w_temporal_;             // [C_out, C_out, K]
    Tensor b_temporal_, g_b_temporal_;             // [C_out]
    Tensor w_res_, g_w_res_, b_res_, g_b_res_;     // [C_out, C_in], [C_out]
    BatchNorm bn1_, bn2_;

    struct Cache {
        bool valid = false;
        Tensor x_in;       // block input
        Tensor spat;       // spatial output, pre-bn1
        Tensor y1;         // post bn1 + relu (temporal conv input)
        Tensor z;          // temporal conv output, pre-bn2
        Tensor drop_mask;  // empty when dropout off
        Tensor y_out;      // final output (relu mask and zero-forcing live here)
        std::vector<std::uint8_t> slot_active;
        int valid_joints = 0;
    } cache_;
};

// Trunk of STGCNBlocks, mask-aware global pooling over (valid joints, frames,
// active persons), an affine embedding layer, and a two-layer projection head
// with L2 normalization.
class Encoder {
   public:
    Encoder(const STGCNConfig& cfg, int padded_joints, std::uint64_t init_seed);

    // block_outputs, when given, receives each block's output tensor.
    EncoderOutput forward(const EncoderBatch& batch, const AdjacencySet& adj, Mode mode,
                          Rng* dropout_rng = nullptr, std::vector<Tensor>* block_outputs = nullptr);

    // Backpropagate from d(loss)/d(projection); valid after a kTrain forward.
    void backward_from_projection(const Tensor& grad_projection, const AdjacencySet& adj);

    void zero_grad();
    std::vector<ParamRef> parameters();    // learnable only
    std::vector<ParamRef> named_arrays();  // learnable + buffers, stable order

    const STGCNConfig& config() const { return cfg_; }
    int padded_joints() const { return padded_joints_; }

   private:
    STGCNConfig cfg_;
    int padded_joints_;
    std::vector<STGCNBlock> blocks_;
    Tensor w_embed_, g_w_embed_, b_embed_, g_b_embed_;
    Tensor w_fc1_, g_w_fc1_, b_fc1_, g_b_fc1_;
    Tensor w_fc2_, g_w_fc2_, b_fc2_, g_b_fc2_;

    struct Cache {
        bool valid = false;
        Tensor last_block_out;  // [S, C_last, T', V]
        Tensor slot_pooled;     // [S, C_last]
        Tensor record_pooled;   // [R, C_last]
        Tensor embedding;       // [R, E]
        Tensor h_pre;           // [R, E] pre-relu fc1
        Tensor h;               // [R, E]
        Tensor proj_unit;       // [R, D] normalized projections
        std::vector<double> proj_norm;
        std::vector<int> active_count;  // per record
        std::vector<std::uint8_t> slot_active;
        int records = 0, persons = 0, valid_joints = 0, frames = 0;
    } cache_;
};

// Single affine classification head over embeddings.
struct LinearHead {
    Tensor weight;  // [classes, embedding_dim]
    Tensor bias;    // [classes]
};

// embeddings [N, E] -> scores [N, classes]
Tensor linear_classify(const Tensor& embeddings, const LinearHead& head);

class SgdOptimizer {
   public:
    SgdOptimizer(std::vector<ParamRef> params, double lr, double momentum, double weight_decay);
    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

   private:
    std::vector<ParamRef> params_;
    std::vector<Tensor> velocity_;
    double lr_, momentum_, weight_decay_;
};

}  // namespace msclr
