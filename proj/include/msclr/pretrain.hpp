#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "msclr/dataio.hpp"
#include "msclr/network.hpp"

namespace msclr {

// FIFO queue of unit-norm key projections shared across all skeleton formats.
class MemoryBank {
   public:
    MemoryBank(int capacity, int dim);

    // rows of `keys` are enqueued in order, overwriting the oldest entries.
    // Non-unit rows are re-normalized, or rejected when strict.
    void enqueue(const Eigen::MatrixXd& keys, bool strict = false);

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int occupancy() const;
    int write_pointer() const { return write_pointer_; }
    const Eigen::MatrixXd& queue() const { return queue_; }
    Eigen::MatrixXd negatives() const;  // occupancy rows

    void restore(const Eigen::MatrixXd& queue, int write_pointer, std::int64_t total_enqueued);
    std::int64_t total_enqueued() const { return total_enqueued_; }

   private:
    Eigen::MatrixXd queue_;  // capacity x dim
    int capacity_ = 0;
    int dim_ = 0;
    int write_pointer_ = 0;
    std::int64_t total_enqueued_ = 0;
};

// Temperature-scaled contrastive loss of one query against its positive key
// and the bank's stored negatives. Stabilized by max-subtraction.
double info_nce(const Eigen::VectorXd& q, const Eigen::VectorXd& k, const MemoryBank& bank,
                double temperature);

struct InfoNceStats {
    double loss = 0.0;          // mean over the batch
    double mean_pos_sim = 0.0;  // mean q.k
    double mean_top_neg_sim = 0.0;
};

// Batched mean loss; grad_q (same shape as q) receives d(mean loss)/dq when
// non-null. Rows of q and k are unit projections.
InfoNceStats info_nce_batch(const Tensor& q, const Tensor& k, const MemoryBank& bank,
                            double temperature, Tensor* grad_q = nullptr);

// key <- m * key + (1 - m) * query, elementwise over every named array
// (learnable parameters and normalization buffers alike).
void momentum_update(Encoder& key_encoder, Encoder& query_encoder, double ema_momentum);

// Interpolate to `frames`, pad onto the unified joint axis, augment, then
// apply the stream transform.
PoseSequence make_view(const SequenceRecord& record, const std::string& format, Stream stream,
                       int frames, const AugmentationConfig& aug, const ConventionRegistry& registry,
                       Rng& rng);

// query view from formats.first, independently augmented key view from
// formats.second; the stream transform is applied identically to both.
std::pair<PoseSequence, PoseSequence> make_positive_pair(
    const SequenceRecord& record, const std::pair<std::string, std::string>& formats,
    Stream stream, int frames, const AugmentationConfig& aug, const ConventionRegistry& registry,
    Rng& rng);

struct PretrainOptions {
    std::vector<std::string> formats{"kinectv2", "smplx"};
    Stream stream = Stream::kJoint;
    int frames = 50;
    AugmentationConfig augment;
    STGCNConfig model;
    int epochs = 50;
    int batch_size = 32;
    double lr = 0.1;
    int lr_drop_epoch = 40;     // 1-based epoch at which lr is multiplied by the factor
    double lr_drop_factor = 0.1;
    double sgd_momentum = 0.9;
    double weight_decay = 1e-4;
    double temperature = 0.07;
    double ema_momentum = 0.999;
    int bank_size = 8192;
    std::uint64_t seed = 7;
    int workers = 0;  // view-building threads; per-sample rng keeps results identical

    void validate() const;
    std::vector<std::pair<std::string, std::string>> format_pairs() const;  // ordered
    int iterations_per_epoch(int n_records) const;
    double lr_at_epoch(int epoch_1based) const;
};

struct TrainLogEntry {
    int epoch = 0;
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double pos_sim = 0.0;
    double top_neg_sim = 0.0;
};

struct Checkpoint {
    STGCNConfig model;
    std::vector<std::string> formats;
    Stream stream = Stream::kJoint;
    int frames = 50;
    int padded_joints = 0;
    std::map<std::string, std::string> convention_documents;  // name -> topology text
    double temperature = 0.07;
    double ema_momentum = 0.999;
    int step = 0;
    int epoch = 0;
    double final_loss = 0.0;
    std::string rng_state;
    std::unique_ptr<Encoder> query;
    std::unique_ptr<Encoder> key;
    std::unique_ptr<MemoryBank> bank;

    // registry rebuilt from the embedded topology documents
    ConventionRegistry registry() const;
};

// Single-archive checkpoint: JSON header plus named little-endian float32
// arrays; see README for the byte layout.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct PretrainResult {
    std::vector<TrainLogEntry> history;
    std::filesystem::path checkpoint_path;
};

// Full momentum-contrast loop over cross-format positive pairs. Writes the
// checkpoint and an append-only JSONL training log. Throws numeric_error on a
// non-finite loss.
PretrainResult pretrain_run(const std::vector<SequenceRecord>& records,
                            const ConventionRegistry& registry, const PretrainOptions& options,
                            const std::filesystem::path& checkpoint_path,
                            const std::filesystem::path& log_path);

}  // namespace msclr
