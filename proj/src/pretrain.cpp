#include "msclr/pretrain.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "msclr/errors.hpp"

namespace msclr {

using json = nlohmann::ordered_json;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapRow = Eigen::Map<const RowMat>;

json model_to_json(const STGCNConfig& m) {
    json j;
    j["block_channels"] = m.block_channels;
    j["input_channels"] = m.input_channels;
    j["temporal_kernel"] = m.temporal_kernel;
    j["embedding_dim"] = m.embedding_dim;
    j["projection_dim"] = m.projection_dim;
    j["edge_importance"] = m.edge_importance;
    j["dropout"] = m.dropout;
    return j;
}

STGCNConfig model_from_json(const json& j) {
    STGCNConfig m;
    m.block_channels = j.at("block_channels").get<std::vector<int>>();
    m.input_channels = j.at("input_channels").get<int>();
    m.temporal_kernel = j.at("temporal_kernel").get<int>();
    m.embedding_dim = j.at("embedding_dim").get<int>();
    m.projection_dim = j.at("projection_dim").get<int>();
    m.edge_importance = j.at("edge_importance").get<bool>();
    m.dropout = j.at("dropout").get<double>();
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// MemoryBank / InfoNCE
// ---------------------------------------------------------------------------

MemoryBank::MemoryBank(int capacity, int dim) : capacity_(capacity), dim_(dim) {
    if (capacity < 0 || dim <= 0) throw config_error("bank capacity/dim out of range");
    queue_ = Eigen::MatrixXd::Zero(capacity, dim);
}

int MemoryBank::occupancy() const {
    return static_cast<int>(std::min<std::int64_t>(total_enqueued_, capacity_));
}

void MemoryBank::enqueue(const Eigen::MatrixXd& keys, bool strict) {
    if (keys.cols() != dim_) throw shape_error("enqueue: key dimension mismatch");
    if (capacity_ == 0) return;
    if (keys.rows() > capacity_) throw shape_error("enqueue: batch larger than bank capacity");
    for (Eigen::Index r = 0; r < keys.rows(); ++r) {
        const double norm = keys.row(r).norm();
        if (!std::isfinite(norm) || norm == 0.0)
            throw numeric_error("enqueue: key has zero or non-finite norm");
        Eigen::RowVectorXd row = keys.row(r);
        if (std::abs(norm - 1.0) > 1e-5) {
            if (strict) throw numeric_error("enqueue: non-unit key rejected (strict mode)");
            std::cerr << "msclr: warning: re-normalizing non-unit key (norm " << norm << ")\n";
            row /= norm;
        }
        queue_.row(write_pointer_) = row;
        write_pointer_ = (write_pointer_ + 1) % capacity_;
        ++total_enqueued_;
    }
}

Eigen::MatrixXd MemoryBank::negatives() const { return queue_.topRows(occupancy()); }

void MemoryBank::restore(const Eigen::MatrixXd& queue, int write_pointer,
                         std::int64_t total_enqueued) {
    if (queue.rows() != capacity_ || queue.cols() != dim_)
        throw shape_error("bank restore: shape mismatch");
    if (capacity_ > 0 && (write_pointer < 0 || write_pointer >= capacity_))
        throw shape_error("bank restore: write pointer out of range");
    queue_ = queue;
    write_pointer_ = write_pointer;
    total_enqueued_ = total_enqueued;
}

double info_nce(const Eigen::VectorXd& q, const Eigen::VectorXd& k, const MemoryBank& bank,
                double temperature) {
    if (temperature <= 0.0) throw config_error("info_nce: temperature must be > 0");
    if (q.size() != k.size() || q.size() != bank.dim())
        throw shape_error("info_nce: dimension mismatch");
    const int occ = bank.occupancy();
    const double l_pos = q.dot(k) / temperature;
    double max_logit = l_pos;
    Eigen::VectorXd l_neg(occ);
    for (int i = 0; i < occ; ++i) {
        l_neg(i) = q.dot(bank.queue().row(i)) / temperature;
        max_logit = std::max(max_logit, l_neg(i));
    }
    double z = std::exp(l_pos - max_logit);
    for (int i = 0; i < occ; ++i) z += std::exp(l_neg(i) - max_logit);
    return std::log(z) + max_logit - l_pos;
}

InfoNceStats info_nce_batch(const Tensor& q, const Tensor& k, const MemoryBank& bank,
                            double temperature, Tensor* grad_q) {
    if (temperature <= 0.0) throw config_error("info_nce: temperature must be > 0");
    if (!q.same_shape(k) || q.ndim() != 2) throw shape_error("info_nce_batch: shape mismatch");
    const auto b_n = q.dim(0), d_n = q.dim(1);
    if (d_n != bank.dim()) throw shape_error("info_nce_batch: projection dim mismatch");

    const int occ = bank.occupancy();
    const Eigen::MatrixXd negs = bank.negatives();
    CMapRow qm(q.data(), b_n, d_n);
    CMapRow km(k.data(), b_n, d_n);
    Eigen::MatrixXd neg_logits;  // b_n x occ
    if (occ > 0) neg_logits = (qm * negs.transpose()) / temperature;

    if (grad_q) {
        if (!grad_q->same_shape(q)) *grad_q = Tensor(q.shape());
        grad_q->set_zero();
    }

    InfoNceStats stats;
    for (std::int64_t b = 0; b < b_n; ++b) {
        const double pos_sim = qm.row(b).dot(km.row(b));
        const double l_pos = pos_sim / temperature;
        double max_logit = l_pos;
        for (int i = 0; i < occ; ++i) max_logit = std::max(max_logit, neg_logits(b, i));
        double z = std::exp(l_pos - max_logit);
        for (int i = 0; i < occ; ++i) z += std::exp(neg_logits(b, i) - max_logit);
        const double loss_b = std::log(z) + max_logit - l_pos;
        stats.loss += loss_b / static_cast<double>(b_n);
        stats.mean_pos_sim += pos_sim / static_cast<double>(b_n);
        if (occ > 0)
            stats.mean_top_neg_sim +=
                temperature * neg_logits.row(b).maxCoeff() / static_cast<double>(b_n);

        if (grad_q) {
            const double p_pos = std::exp(l_pos - max_logit) / z;
            const double scale = 1.0 / (temperature * static_cast<double>(b_n));
            Eigen::RowVectorXd g = (p_pos - 1.0) * km.row(b);
            for (int i = 0; i < occ; ++i)
                g += (std::exp(neg_logits(b, i) - max_logit) / z) * negs.row(i);
            for (std::int64_t j = 0; j < d_n; ++j) (*grad_q)(b, j) = scale * g(j);
        }
    }
    return stats;
}

void momentum_update(Encoder& key_encoder, Encoder& query_encoder, double ema_momentum) {
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0))
        throw config_error("ema momentum must be in [0, 1)");
    auto key_arrays = key_encoder.named_arrays();
    auto query_arrays = query_encoder.named_arrays();
    if (key_arrays.size() != query_arrays.size())
        throw shape_error("momentum_update: encoder architectures differ");
    for (std::size_t i = 0; i < key_arrays.size(); ++i) {
        if (key_arrays[i].name != query_arrays[i].name ||
            !key_arrays[i].value->same_shape(*query_arrays[i].value))
            throw shape_error("momentum_update: parameter mismatch at " + key_arrays[i].name);
        Tensor& kt = *key_arrays[i].value;
        const Tensor& qt = *query_arrays[i].value;
        for (std::int64_t j = 0; j < kt.numel(); ++j)
            kt.flat(j) = ema_momentum * kt.flat(j) + (1.0 - ema_momentum) * qt.flat(j);
    }
}

// ---------------------------------------------------------------------------
// Views
// ---------------------------------------------------------------------------

namespace {

// Drop trailing all-zero person slots; the encoder is invariant to them and
// skipping the dead lanes keeps batch tensors small.
Tensor squeeze_trailing_persons(const Tensor& raw) {
    const auto c = raw.dim(0), v = raw.dim(1), t = raw.dim(2), p = raw.dim(3);
    std::int64_t keep = 1;
    for (std::int64_t pi = p; pi-- > 1;) {
        bool any = false;
        for (std::int64_t i = 0; i < c * v * t && !any; ++i)
            any = raw.flat(i * p + pi) != 0.0;
        if (any) {
            keep = pi + 1;
            break;
        }
    }
    if (keep == p) return raw;
    Tensor out({c, v, t, keep});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t vi = 0; vi < v; ++vi)
            for (std::int64_t ti = 0; ti < t; ++ti)
                for (std::int64_t pi = 0; pi < keep; ++pi)
                    out(ci, vi, ti, pi) = raw(ci, vi, ti, pi);
    return out;
}

}  // namespace

PoseSequence make_view(const SequenceRecord& record, const std::string& format, Stream stream,
                       int frames, const AugmentationConfig& aug,
                       const ConventionRegistry& registry, Rng& rng) {
    const auto it = record.formats.find(format);
    if (it == record.formats.end())
        throw config_error("record " + record.sample_id + " is missing format " + format);
    const auto& conv = registry.get(format);
    const Tensor squeezed = squeeze_trailing_persons(it->second);
    PoseSequence padded = pad_to_unified(interpolate_frames(squeezed, frames), format, registry);
    padded.label = record.label;
    PoseSequence augmented = augment(padded, conv, aug, rng);
    return apply_stream(augmented, stream, conv);
}

std::pair<PoseSequence, PoseSequence> make_positive_pair(
    const SequenceRecord& record, const std::pair<std::string, std::string>& formats,
    Stream stream, int frames, const AugmentationConfig& aug, const ConventionRegistry& registry,
    Rng& rng) {
    PoseSequence query_view = make_view(record, formats.first, stream, frames, aug, registry, rng);
    PoseSequence key_view = make_view(record, formats.second, stream, frames, aug, registry, rng);
    return {std::move(query_view), std::move(key_view)};
}

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

void PretrainOptions::validate() const {
    if (formats.empty()) throw config_error("pretrain: no formats configured");
    if (frames < 1) throw config_error("pretrain: frames must be >= 1");
    if (epochs < 1 || batch_size < 1) throw config_error("pretrain: epochs/batch out of range");
    if (!(lr > 0.0) || !(lr_drop_factor > 0.0)) throw config_error("pretrain: bad learning rate");
    if (!(temperature > 0.0)) throw config_error("pretrain: temperature must be > 0");
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0))
        throw config_error("pretrain: ema momentum must be in [0, 1)");
    if (bank_size < 0) throw config_error("pretrain: bank size must be >= 0");
    model.validate();
    augment.validate();
}

std::vector<std::pair<std::string, std::string>> PretrainOptions::format_pairs() const {
    std::vector<std::pair<std::string, std::string>> pairs;
    if (formats.size() == 1) {
        pairs.emplace_back(formats[0], formats[0]);  // augmentation-only baseline
        return pairs;
    }
    for (const auto& a : formats)
        for (const auto& b : formats)
            if (a != b) pairs.emplace_back(a, b);
    return pairs;
}

int PretrainOptions::iterations_per_epoch(int n_records) const {
    const auto pairs = static_cast<std::int64_t>(format_pairs().size());
    const std::int64_t total = static_cast<std::int64_t>(n_records) * pairs;
    return static_cast<int>((total + batch_size - 1) / batch_size);
}

double PretrainOptions::lr_at_epoch(int epoch_1based) const {
    return epoch_1based >= lr_drop_epoch ? lr * lr_drop_factor : lr;
}

// ---------------------------------------------------------------------------
// Checkpoint archive
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'M', 'S', 'C', 'K'};

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw io_error("truncated checkpoint: " + path);
    return v;
}

void write_array(std::ostream& os, const std::string& name, const Tensor& t) {
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d = 0; d < t.ndim(); ++d)
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim(d)));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        write_pod<float>(os, static_cast<float>(t.flat(i)));
}

std::pair<std::string, Tensor> read_array(std::istream& is, const std::string& path) {
    const auto name_len = read_pod<std::uint16_t>(is, path);
    std::string name(name_len, '\0');
    if (name_len > 0 && !is.read(name.data(), name_len))
        throw io_error("truncated checkpoint: " + path);
    const auto ndim = read_pod<std::uint32_t>(is, path);
    if (ndim > 8) throw io_error("malformed checkpoint array: " + path);
    std::vector<std::int64_t> shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
        const auto dim = read_pod<std::uint32_t>(is, path);
        shape.push_back(static_cast<std::int64_t>(dim));
        numel *= dim;
    }
    if (numel > (1ull << 31)) throw io_error("malformed checkpoint array: " + path);
    Tensor t(shape);
    for (std::uint64_t i = 0; i < numel; ++i)
        t.flat(static_cast<std::int64_t>(i)) =
            static_cast<double>(read_pod<float>(is, path));
    return {std::move(name), std::move(t)};
}

Tensor bank_to_tensor(const MemoryBank& bank) {
    Tensor t({bank.capacity(), bank.dim()});
    for (int r = 0; r < bank.capacity(); ++r)
        for (int c = 0; c < bank.dim(); ++c) t(r, c) = bank.queue()(r, c);
    return t;
}

}  // namespace

ConventionRegistry Checkpoint::registry() const {
    ConventionRegistry reg;
    for (const auto& [name, text] : convention_documents) {
        auto conv = parse_convention(text);
        if (conv.name != name)
            throw io_error("checkpoint topology name mismatch for " + name);
        reg.add(std::move(conv));
    }
    return reg;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (!ckpt.query || !ckpt.key || !ckpt.bank) throw error("save_checkpoint: incomplete state");

    json header;
    header["format"] = "msclr-checkpoint";
    header["version"] = 1;
    header["model"] = model_to_json(ckpt.model);
    header["formats"] = ckpt.formats;
    header["stream"] = stream_to_string(ckpt.stream);
    header["frames"] = ckpt.frames;
    header["padded_joints"] = ckpt.padded_joints;
    header["conventions"] = ckpt.convention_documents;
    header["temperature"] = ckpt.temperature;
    header["ema_momentum"] = ckpt.ema_momentum;
    header["step"] = ckpt.step;
    header["epoch"] = ckpt.epoch;
    header["final_loss"] = ckpt.final_loss;
    header["rng"] = ckpt.rng_state;
    header["bank"] = {{"capacity", ckpt.bank->capacity()},
                      {"dim", ckpt.bank->dim()},
                      {"write_pointer", ckpt.bank->write_pointer()},
                      {"total_enqueued", ckpt.bank->total_enqueued()}};
    const std::string header_str = header.dump();

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw io_error("cannot open checkpoint for writing: " + path.string());
        os.write(kCkptMagic, 4);
        write_pod<std::uint32_t>(os, 1);
        write_pod<std::uint64_t>(os, header_str.size());
        os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

        auto query_arrays = const_cast<Encoder&>(*ckpt.query).named_arrays();
        auto key_arrays = const_cast<Encoder&>(*ckpt.key).named_arrays();
        write_pod<std::uint32_t>(os,
                                 static_cast<std::uint32_t>(query_arrays.size() + key_arrays.size() + 1));
        for (const auto& a : query_arrays) write_array(os, "query/" + a.name, *a.value);
        for (const auto& a : key_arrays) write_array(os, "key/" + a.name, *a.value);
        write_array(os, "bank/queue", bank_to_tensor(*ckpt.bank));
        if (!os) throw io_error("checkpoint write failed: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path.string());
    char magic[4];
    if (!is.read(magic, 4)) throw io_error("truncated checkpoint: " + path.string());
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw io_error("bad checkpoint magic: " + path.string());
    const auto version = read_pod<std::uint32_t>(is, path.string());
    if (version != 1) throw io_error("unsupported checkpoint version: " + path.string());
    const auto header_len = read_pod<std::uint64_t>(is, path.string());
    if (header_len > (1ull << 26)) throw io_error("malformed checkpoint header: " + path.string());
    std::string header_str(header_len, '\0');
    if (!is.read(header_str.data(), static_cast<std::streamsize>(header_len)))
        throw io_error("truncated checkpoint: " + path.string());
    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw io_error("malformed checkpoint header " + path.string() + ": " + e.what());
    }

    Checkpoint ckpt;
    ckpt.model = model_from_json(header.at("model"));
    ckpt.formats = header.at("formats").get<std::vector<std::string>>();
    ckpt.stream = stream_from_string(header.at("stream").get<std::string>());
    ckpt.frames = header.at("frames").get<int>();
    ckpt.padded_joints = header.at("padded_joints").get<int>();
    ckpt.convention_documents =
        header.at("conventions").get<std::map<std::string, std::string>>();
    ckpt.temperature = header.at("temperature").get<double>();
    ckpt.ema_momentum = header.at("ema_momentum").get<double>();
    ckpt.step = header.at("step").get<int>();
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.final_loss = header.at("final_loss").get<double>();
    ckpt.rng_state = header.at("rng").get<std::string>();

    ckpt.query = std::make_unique<Encoder>(ckpt.model, ckpt.padded_joints, 0);
    ckpt.key = std::make_unique<Encoder>(ckpt.model, ckpt.padded_joints, 0);
    const auto& bank_hdr = header.at("bank");
    ckpt.bank = std::make_unique<MemoryBank>(bank_hdr.at("capacity").get<int>(),
                                             bank_hdr.at("dim").get<int>());

    std::map<std::string, Tensor> arrays;
    const auto n_arrays = read_pod<std::uint32_t>(is, path.string());
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        auto [name, tensor] = read_array(is, path.string());
        arrays.emplace(std::move(name), std::move(tensor));
    }

    auto restore = [&](Encoder& enc, const std::string& prefix) {
        for (auto& ref : enc.named_arrays()) {
            const auto it = arrays.find(prefix + ref.name);
            if (it == arrays.end())
                throw io_error("checkpoint missing array " + prefix + ref.name);
            if (!it->second.same_shape(*ref.value))
                throw io_error("checkpoint array shape mismatch at " + prefix + ref.name);
            *ref.value = it->second;
        }
    };
    restore(*ckpt.query, "query/");
    restore(*ckpt.key, "key/");

    const auto bq = arrays.find("bank/queue");
    if (bq == arrays.end()) throw io_error("checkpoint missing bank/queue");
    Eigen::MatrixXd queue(ckpt.bank->capacity(), ckpt.bank->dim());
    for (int r = 0; r < ckpt.bank->capacity(); ++r)
        for (int c = 0; c < ckpt.bank->dim(); ++c) queue(r, c) = bq->second(r, c);
    ckpt.bank->restore(queue, bank_hdr.at("write_pointer").get<int>(),
                       bank_hdr.at("total_enqueued").get<std::int64_t>());
    return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

PretrainResult pretrain_run(const std::vector<SequenceRecord>& records,
                            const ConventionRegistry& registry, const PretrainOptions& options,
                            const std::filesystem::path& checkpoint_path,
                            const std::filesystem::path& log_path) {
    options.validate();
    if (records.empty()) throw config_error("pretrain: empty dataset");
    for (const auto& f : options.formats) {
        registry.get(f);  // throws on unknown convention
        for (const auto& rec : records)
            if (rec.formats.find(f) == rec.formats.end())
                throw config_error("record " + rec.sample_id + " is missing format " + f);
    }

    const int v_max = registry.v_max();
    std::map<std::string, AdjacencySet> adjacency;
    for (const auto& f : options.formats)
        adjacency.emplace(f, build_adjacency_set(registry.get(f), v_max));

    Encoder query(options.model, v_max, hash_u64(options.seed, 0x696e6974));
    Encoder key = query;
    MemoryBank bank(options.bank_size, options.model.projection_dim);
    SgdOptimizer optim(query.parameters(), options.lr_at_epoch(1), options.sgd_momentum,
                       options.weight_decay);

    const auto pairs = options.format_pairs();
    Rng loop_rng(hash_u64(options.seed, 0x6c6f6f70));
    Rng dropout_rng(hash_u64(options.seed, 0x64726f70));

    struct Cursor {
        std::vector<int> order;
        std::size_t pos = 0;
    };
    std::vector<Cursor> cursors(pairs.size());
    for (auto& cur : cursors) {
        cur.order.resize(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) cur.order[i] = static_cast<int>(i);
        loop_rng.shuffle(cur.order);
    }
    auto next_indices = [&](Cursor& cur, int n) {
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            if (cur.pos == cur.order.size()) {
                loop_rng.shuffle(cur.order);
                cur.pos = 0;
            }
            out.push_back(cur.order[cur.pos++]);
        }
        return out;
    };

    std::ofstream log(log_path);
    if (!log) throw io_error("cannot open training log: " + log_path.string());

    PretrainResult result;
    const int iters = options.iterations_per_epoch(static_cast<int>(records.size()));
    int global_step = 0;
    for (int epoch = 1; epoch <= options.epochs; ++epoch) {
        const double lr = options.lr_at_epoch(epoch);
        optim.set_lr(lr);
        for (int it = 0; it < iters; ++it, ++global_step) {
            const auto& pair = pairs[static_cast<std::size_t>(it) % pairs.size()];
            const auto indices =
                next_indices(cursors[static_cast<std::size_t>(it) % pairs.size()],
                             options.batch_size);

            std::vector<PoseSequence> views_q(indices.size()), views_k(indices.size());
            auto build_views = [&](std::size_t begin, std::size_t end) {
                for (std::size_t i = begin; i < end; ++i) {
                    const auto& rec = records[static_cast<std::size_t>(indices[i])];
                    Rng view_rng(hash_str(hash_u64(hash_u64(options.seed, epoch),
                                                   static_cast<std::uint64_t>(global_step)),
                                          rec.sample_id));
                    auto [vq, vk] = make_positive_pair(rec, pair, options.stream, options.frames,
                                                       options.augment, registry, view_rng);
                    views_q[i] = std::move(vq);
                    views_k[i] = std::move(vk);
                }
            };
            // view rng depends only on (seed, epoch, step, sample), so the
            // worker count cannot change results
            if (options.workers > 1 && indices.size() > 1) {
                const std::size_t n_threads =
                    std::min<std::size_t>(static_cast<std::size_t>(options.workers),
                                          indices.size());
                std::vector<std::thread> pool;
                const std::size_t chunk = (indices.size() + n_threads - 1) / n_threads;
                for (std::size_t t = 0; t < n_threads; ++t) {
                    const std::size_t begin = t * chunk;
                    const std::size_t end = std::min(begin + chunk, indices.size());
                    if (begin < end) pool.emplace_back(build_views, begin, end);
                }
                for (auto& th : pool) th.join();
            } else {
                build_views(0, indices.size());
            }

            EncoderBatch batch_q = make_batch(views_q);
            EncoderBatch batch_k = make_batch(views_k);
            EncoderOutput out_q =
                query.forward(batch_q, adjacency.at(pair.first), Mode::kTrain, &dropout_rng);
            EncoderOutput out_k =
                key.forward(batch_k, adjacency.at(pair.second), Mode::kTrainFrozenStats);

            Tensor grad_q;
            const auto stats =
                info_nce_batch(out_q.projection, out_k.projection, bank, options.temperature,
                               &grad_q);
            if (!std::isfinite(stats.loss))
                throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) +
                                    " step " + std::to_string(global_step));

            optim.zero_grad();
            query.backward_from_projection(grad_q, adjacency.at(pair.first));
            optim.step();
            momentum_update(key, query, options.ema_momentum);

            const auto b_n = out_k.projection.dim(0);
            Eigen::MatrixXd keys(b_n, options.model.projection_dim);
            for (std::int64_t r = 0; r < b_n; ++r)
                for (int c = 0; c < options.model.projection_dim; ++c)
                    keys(r, c) = out_k.projection(r, c);
            bank.enqueue(keys);

            TrainLogEntry entry{epoch, global_step, stats.loss, lr, stats.mean_pos_sim,
                                stats.mean_top_neg_sim};
            result.history.push_back(entry);
            json line;
            line["epoch"] = entry.epoch;
            line["step"] = entry.step;
            line["loss"] = entry.loss;
            line["lr"] = entry.lr;
            line["pos_sim"] = entry.pos_sim;
            line["top_neg_sim"] = entry.top_neg_sim;
            log << line.dump() << "\n";
        }
        log.flush();
    }

    Checkpoint ckpt;
    ckpt.model = options.model;
    ckpt.formats = options.formats;
    ckpt.stream = options.stream;
    ckpt.frames = options.frames;
    ckpt.padded_joints = v_max;
    for (const auto& conv : registry.all())
        ckpt.convention_documents.emplace(conv.name, format_convention(conv));
    ckpt.temperature = options.temperature;
    ckpt.ema_momentum = options.ema_momentum;
    ckpt.step = global_step;
    ckpt.epoch = options.epochs;
    ckpt.final_loss = result.history.empty() ? 0.0 : result.history.back().loss;
    ckpt.rng_state = loop_rng.serialize();
    ckpt.query = std::make_unique<Encoder>(std::move(query));
    ckpt.key = std::make_unique<Encoder>(std::move(key));
    ckpt.bank = std::make_unique<MemoryBank>(std::move(bank));
    save_checkpoint(ckpt, checkpoint_path);
    result.checkpoint_path = checkpoint_path;
    return result;
}

}  // namespace msclr
