#include "msclr/network.hpp"

#include <cmath>
#include <cstring>

#include "msclr/errors.hpp"

namespace msclr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

void kaiming_uniform(Tensor& t, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.flat(i) = rng.uniform(-bound, bound);
}

bool slot_is_active(const MaskInfo& mask, std::int64_t s) {
    return (*mask.slot_active)[static_cast<std::size_t>(s)] != 0;
}

}  // namespace

void STGCNConfig::validate() const {
    if (block_channels.empty()) throw config_error("block_channels must be non-empty");
    for (int w : block_channels)
        if (w <= 0) throw config_error("block widths must be positive");
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0)
        throw config_error("temporal_kernel must be odd and >= 1");
    if (input_channels <= 0 || embedding_dim <= 0 || projection_dim <= 0)
        throw config_error("channel/embedding/projection dims must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw config_error("dropout must be in [0, 1)");
}

EncoderBatch make_batch(const std::vector<const PoseSequence*>& seqs) {
    if (seqs.empty()) throw shape_error("make_batch: empty batch");
    const auto& first = *seqs.front();
    const auto c = first.data.dim(0), v = first.data.dim(1), t = first.data.dim(2);
    // person counts may differ across records; missing slots stay inactive
    std::int64_t p = 0;
    for (const auto* s : seqs) {
        if (s->convention != first.convention)
            throw shape_error("make_batch: mixed conventions in one mini-batch");
        if (s->data.dim(0) != c || s->data.dim(1) != v || s->data.dim(2) != t)
            throw shape_error("make_batch: sequences disagree on tensor shape");
        p = std::max(p, s->data.dim(3));
    }
    const auto r = static_cast<std::int64_t>(seqs.size());

    EncoderBatch batch;
    batch.records = static_cast<int>(r);
    batch.persons = static_cast<int>(p);
    batch.valid_joints = first.valid_joints();
    batch.convention = first.convention;
    batch.x = Tensor({r * p, c, t, v});
    batch.slot_active.assign(static_cast<std::size_t>(r * p), 0);
    for (std::int64_t ri = 0; ri < r; ++ri) {
        const auto& seq = *seqs[static_cast<std::size_t>(ri)];
        for (std::int64_t pi = 0; pi < seq.data.dim(3); ++pi) {
            const auto slot = ri * p + pi;
            bool any = false;
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t vi = 0; vi < v; ++vi)
                    for (std::int64_t ti = 0; ti < t; ++ti) {
                        const double val = seq.data(ci, vi, ti, pi);
                        batch.x(slot, ci, ti, vi) = val;
                        any = any || val != 0.0;
                    }
            batch.slot_active[static_cast<std::size_t>(slot)] = any ? 1 : 0;
        }
    }
    return batch;
}

EncoderBatch make_batch(const std::vector<PoseSequence>& seqs) {
    std::vector<const PoseSequence*> ptrs;
    ptrs.reserve(seqs.size());
    for (const auto& s : seqs) ptrs.push_back(&s);
    return make_batch(ptrs);
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(int channels)
    : channels_(channels),
      gamma_({channels}),
      beta_({channels}),
      g_gamma_({channels}),
      g_beta_({channels}),
      running_mean_({channels}),
      running_var_({channels}) {
    gamma_.fill(1.0);
    running_var_.fill(1.0);
}

Tensor BatchNorm::forward(const Tensor& x, const MaskInfo& mask, Mode mode) {
    const auto s_n = x.dim(0), c_n = x.dim(1), t_n = x.dim(2), v_n = x.dim(3);
    if (c_n != channels_) throw shape_error("BatchNorm: channel mismatch");
    const std::int64_t v_valid = mask.valid_joints;

    Eigen::VectorXd mean(c_n), var(c_n);
    bool use_batch_stats = mode != Mode::kEval;
    if (use_batch_stats) {
        std::int64_t active = 0;
        for (std::int64_t s = 0; s < s_n; ++s) active += slot_is_active(mask, s) ? 1 : 0;
        const std::int64_t m = active * t_n * v_valid;
        if (m == 0) {
            use_batch_stats = false;  // nothing to normalize over
        } else {
            mean.setZero();
            var.setZero();
            for (std::int64_t s = 0; s < s_n; ++s) {
                if (!slot_is_active(mask, s)) continue;
                for (std::int64_t c = 0; c < c_n; ++c) {
                    double acc = 0.0, acc2 = 0.0;
                    const double* row = x.data() + ((s * c_n + c) * t_n) * v_n;
                    for (std::int64_t t = 0; t < t_n; ++t)
                        for (std::int64_t v = 0; v < v_valid; ++v) {
                            const double val = row[t * v_n + v];
                            acc += val;
                            acc2 += val * val;
                        }
                    mean(c) += acc;
                    var(c) += acc2;
                }
            }
            mean /= static_cast<double>(m);
            for (std::int64_t c = 0; c < c_n; ++c)
                var(c) = var(c) / static_cast<double>(m) - mean(c) * mean(c);
            var = var.cwiseMax(0.0);
            if (mode == Mode::kTrain) {
                for (std::int64_t c = 0; c < c_n; ++c) {
                    running_mean_.flat(c) = (1.0 - momentum_) * running_mean_.flat(c) +
                                            momentum_ * mean(c);
                    running_var_.flat(c) = (1.0 - momentum_) * running_var_.flat(c) +
                                           momentum_ * var(c);
                }
            }
            count_ = m;
        }
    }
    if (!use_batch_stats) {
        for (std::int64_t c = 0; c < c_n; ++c) {
            mean(c) = running_mean_.flat(c);
            var(c) = running_var_.flat(c);
        }
        count_ = 0;
    }
    mean_ = mean;
    inv_std_ = (var.array() + eps_).sqrt().inverse().matrix();

    Tensor y({s_n, c_n, t_n, v_n});
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;  // inactive slots stay zero
        for (std::int64_t c = 0; c < c_n; ++c) {
            const double a = gamma_.flat(c) * inv_std_(c);
            const double b = beta_.flat(c) - a * mean(c);
            const double* src = x.data() + ((s * c_n + c) * t_n) * v_n;
            double* dst = y.data() + ((s * c_n + c) * t_n) * v_n;
            for (std::int64_t i = 0; i < t_n * v_n; ++i) dst[i] = a * src[i] + b;
        }
    }
    return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out, const Tensor& x_in, const MaskInfo& mask) {
    const auto s_n = grad_out.dim(0), c_n = grad_out.dim(1), t_n = grad_out.dim(2),
               v_n = grad_out.dim(3);
    const std::int64_t v_valid = mask.valid_joints;
    const double m = static_cast<double>(count_);

    Eigen::VectorXd sum_g = Eigen::VectorXd::Zero(c_n);
    Eigen::VectorXd sum_gx = Eigen::VectorXd::Zero(c_n);
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;
        for (std::int64_t c = 0; c < c_n; ++c) {
            const double* g = grad_out.data() + ((s * c_n + c) * t_n) * v_n;
            const double* xv = x_in.data() + ((s * c_n + c) * t_n) * v_n;
            double acc = 0.0, accx = 0.0;
            for (std::int64_t t = 0; t < t_n; ++t)
                for (std::int64_t v = 0; v < v_valid; ++v) {
                    const double gv = g[t * v_n + v];
                    acc += gv;
                    accx += gv * (xv[t * v_n + v] - mean_(c)) * inv_std_(c);
                }
            sum_g(c) += acc;
            sum_gx(c) += accx;
        }
    }
    for (std::int64_t c = 0; c < c_n; ++c) {
        g_gamma_.flat(c) += sum_gx(c);
        g_beta_.flat(c) += sum_g(c);
    }

    Tensor gx({s_n, c_n, t_n, v_n});
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;
        for (std::int64_t c = 0; c < c_n; ++c) {
            const double a = gamma_.flat(c) * inv_std_(c);
            const double mg = count_ > 0 ? sum_g(c) / m : 0.0;
            const double mgx = count_ > 0 ? sum_gx(c) / m : 0.0;
            const double* g = grad_out.data() + ((s * c_n + c) * t_n) * v_n;
            const double* xv = x_in.data() + ((s * c_n + c) * t_n) * v_n;
            double* dst = gx.data() + ((s * c_n + c) * t_n) * v_n;
            for (std::int64_t t = 0; t < t_n; ++t) {
                for (std::int64_t v = 0; v < v_n; ++v) {
                    const auto i = t * v_n + v;
                    if (v < v_valid) {
                        const double xhat = (xv[i] - mean_(c)) * inv_std_(c);
                        dst[i] = a * (g[i] - mg - xhat * mgx);
                    } else {
                        dst[i] = a * g[i];  // outside the statistics mask
                    }
                }
            }
        }
    }
    return gx;
}

void BatchNorm::collect(std::vector<ParamRef>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma_, &g_gamma_, false});
    out.push_back({prefix + ".beta", &beta_, &g_beta_, false});
    out.push_back({prefix + ".running_mean", &running_mean_, nullptr, true});
    out.push_back({prefix + ".running_var", &running_var_, nullptr, true});
}

// ---------------------------------------------------------------------------
// STGCNBlock
// ---------------------------------------------------------------------------

STGCNBlock::STGCNBlock(const BlockOptions& opt, Rng& init_rng)
    : opt_(opt), bn1_(opt.out_channels), bn2_(opt.out_channels) {
    if (opt_.temporal_kernel < 1 || opt_.temporal_kernel % 2 == 0)
        throw config_error("temporal kernel must be odd");
    const int ci = opt_.in_channels, co = opt_.out_channels, v = opt_.padded_joints;
    for (int p = 0; p < kNumPartitions; ++p) {
        w_spatial_.emplace_back(Tensor({co, ci}));
        g_w_spatial_.emplace_back(Tensor({co, ci}));
        kaiming_uniform(w_spatial_.back(), ci, init_rng);
        if (opt_.edge_importance) {
            edge_mask_.emplace_back(Tensor({v, v}));
            edge_mask_.back().fill(1.0);
            g_edge_mask_.emplace_back(Tensor({v, v}));
        }
    }
    b_spatial_ = Tensor({co});
    g_b_spatial_ = Tensor({co});
    w_temporal_ = Tensor({co, co, opt_.temporal_kernel});
    g_w_temporal_ = Tensor({co, co, opt_.temporal_kernel});
    kaiming_uniform(w_temporal_, static_cast<std::int64_t>(co) * opt_.temporal_kernel, init_rng);
    b_temporal_ = Tensor({co});
    g_b_temporal_ = Tensor({co});

    conv_residual_ = opt_.residual && (ci != co || opt_.stride != 1);
    if (conv_residual_) {
        w_res_ = Tensor({co, ci});
        g_w_res_ = Tensor({co, ci});
        kaiming_uniform(w_res_, ci, init_rng);
        b_res_ = Tensor({co});
        g_b_res_ = Tensor({co});
    }
}

int STGCNBlock::out_frames(int in_frames) const { return (in_frames - 1) / opt_.stride + 1; }

Tensor STGCNBlock::forward(const Tensor& x, const AdjacencySet& adj, const MaskInfo& mask,
                           Mode mode, Rng* dropout_rng) {
    const auto s_n = x.dim(0), c_in = x.dim(1), t_in = x.dim(2), v_n = x.dim(3);
    const int c_out = opt_.out_channels;
    const int k = opt_.temporal_kernel;
    const int pad = (k - 1) / 2;
    const auto t_out = static_cast<std::int64_t>(out_frames(static_cast<int>(t_in)));
    if (c_in != opt_.in_channels) throw shape_error("block: input channel mismatch");
    if (v_n != opt_.padded_joints) throw shape_error("block: joint dimension mismatch");
    if (adj.padded_joints != v_n) throw shape_error("block: adjacency padding mismatch");
    if (adj.valid_joints != mask.valid_joints)
        throw shape_error("block: adjacency does not match the batch convention");

    // effective aggregation matrices (partition x learnable edge mask)
    std::array<Eigen::MatrixXd, kNumPartitions> aeff;
    for (int p = 0; p < kNumPartitions; ++p) {
        aeff[p] = adj.partitions[p];
        if (opt_.edge_importance) {
            CMapRow m(edge_mask_[static_cast<std::size_t>(p)].data(), v_n, v_n);
            aeff[p] = aeff[p].cwiseProduct(Eigen::MatrixXd(m));
        }
    }

    // spatial graph convolution
    Tensor spat({s_n, c_out, t_in, v_n});
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;
        CMapRow xs(x.data() + s * c_in * t_in * v_n, c_in, t_in * v_n);
        MapRow ys(spat.data() + s * c_out * t_in * v_n, c_out * t_in, v_n);
        for (int p = 0; p < kNumPartitions; ++p) {
            CMapRow wp(w_spatial_[static_cast<std::size_t>(p)].data(), c_out, c_in);
            RowMat h = wp * xs;
            MapRow hv(h.data(), c_out * t_in, v_n);
            ys.noalias() += hv * aeff[static_cast<std::size_t>(p)].transpose();
        }
        for (std::int64_t c = 0; c < c_out; ++c) {
            double* row = spat.data() + ((s * c_out + c) * t_in) * v_n;
            const double b = b_spatial_.flat(c);
            for (std::int64_t i = 0; i < t_in * v_n; ++i) row[i] += b;
        }
    }

    Tensor z1 = opt_.with_norm ? bn1_.forward(spat, mask, mode) : spat;
    Tensor y1 = z1;
    if (opt_.with_activation)
        for (std::int64_t i = 0; i < y1.numel(); ++i)
            if (y1.flat(i) < 0.0) y1.flat(i) = 0.0;

    // temporal convolution (im2col + GEMM per slot)
    Tensor z({s_n, c_out, t_out, v_n});
    RowMat col(static_cast<std::int64_t>(c_out) * k, t_out * v_n);
    CMapRow wt(w_temporal_.data(), c_out, static_cast<std::int64_t>(c_out) * k);
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;
        const double* src = y1.data() + s * c_out * t_in * v_n;
        for (std::int64_t c = 0; c < c_out; ++c)
            for (int g = 0; g < k; ++g) {
                double* row = col.data() + (c * k + g) * t_out * v_n;
                for (std::int64_t to = 0; to < t_out; ++to) {
                    const std::int64_t ti = to * opt_.stride + g - pad;
                    if (ti < 0 || ti >= t_in)
                        std::memset(row + to * v_n, 0, sizeof(double) * static_cast<std::size_t>(v_n));
                    else
                        std::memcpy(row + to * v_n, src + (c * t_in + ti) * v_n,
                                    sizeof(double) * static_cast<std::size_t>(v_n));
                }
            }
        MapRow zs(z.data() + s * c_out * t_out * v_n, c_out, t_out * v_n);
        zs.noalias() = wt * col;
        for (std::int64_t c = 0; c < c_out; ++c) {
            double* row = z.data() + ((s * c_out + c) * t_out) * v_n;
            const double b = b_temporal_.flat(c);
            for (std::int64_t i = 0; i < t_out * v_n; ++i) row[i] += b;
        }
    }

    Tensor z2 = opt_.with_norm ? bn2_.forward(z, mask, mode) : z;

    Tensor drop_mask;
    if (mode != Mode::kEval && opt_.dropout > 0.0) {
        if (dropout_rng == nullptr) throw config_error("dropout requires an rng in training mode");
        drop_mask = Tensor(z2.shape());
        const double keep = 1.0 - opt_.dropout;
        for (std::int64_t i = 0; i < drop_mask.numel(); ++i)
            drop_mask.flat(i) = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
        for (std::int64_t i = 0; i < z2.numel(); ++i) z2.flat(i) *= drop_mask.flat(i);
    }

    // residual branch
    Tensor y = z2;
    if (opt_.residual) {
        if (!conv_residual_) {
            for (std::int64_t i = 0; i < y.numel(); ++i) y.flat(i) += x.flat(i);
        } else {
            CMapRow wr(w_res_.data(), c_out, c_in);
            for (std::int64_t s = 0; s < s_n; ++s) {
                if (!slot_is_active(mask, s)) continue;
                for (std::int64_t to = 0; to < t_out; ++to) {
                    const std::int64_t ti = to * opt_.stride;
                    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> xt(
                        x.data() + (s * c_in) * t_in * v_n + ti * v_n, c_in, v_n,
                        Eigen::OuterStride<>(t_in * v_n));
                    Eigen::Map<RowMat, 0, Eigen::OuterStride<>> yt(
                        y.data() + (s * c_out) * t_out * v_n + to * v_n, c_out, v_n,
                        Eigen::OuterStride<>(t_out * v_n));
                    yt.noalias() += wr * xt;
                }
                for (std::int64_t c = 0; c < c_out; ++c) {
                    double* row = y.data() + ((s * c_out + c) * t_out) * v_n;
                    const double b = b_res_.flat(c);
                    for (std::int64_t i = 0; i < t_out * v_n; ++i) row[i] += b;
                }
            }
        }
    }

    if (opt_.with_activation)
        for (std::int64_t i = 0; i < y.numel(); ++i)
            if (y.flat(i) < 0.0) y.flat(i) = 0.0;

    // padded joints and inactive slots are exactly zero after every block
    for (std::int64_t s = 0; s < s_n; ++s) {
        const bool act = slot_is_active(mask, s);
        for (std::int64_t c = 0; c < c_out; ++c)
            for (std::int64_t t = 0; t < t_out; ++t) {
                double* row = y.data() + (((s * c_out + c) * t_out) + t) * v_n;
                if (!act)
                    std::memset(row, 0, sizeof(double) * static_cast<std::size_t>(v_n));
                else
                    for (std::int64_t v = mask.valid_joints; v < v_n; ++v) row[v] = 0.0;
            }
    }

    if (mode == Mode::kTrain) {
        cache_.valid = true;
        cache_.x_in = x;
        cache_.spat = std::move(spat);
        cache_.y1 = std::move(y1);
        cache_.z = std::move(z);
        cache_.drop_mask = std::move(drop_mask);
        cache_.y_out = y;
        cache_.slot_active = *mask.slot_active;
        cache_.valid_joints = mask.valid_joints;
    } else {
        cache_.valid = false;
    }
    return y;
}

Tensor STGCNBlock::backward(const Tensor& grad_out, const AdjacencySet& adj) {
    if (!cache_.valid) throw error("block backward without a cached training forward");
    const MaskInfo mask{&cache_.slot_active, cache_.valid_joints};
    const auto s_n = cache_.x_in.dim(0), c_in = cache_.x_in.dim(1), t_in = cache_.x_in.dim(2),
               v_n = cache_.x_in.dim(3);
    const int c_out = opt_.out_channels;
    const int k = opt_.temporal_kernel;
    const int pad = (k - 1) / 2;
    const auto t_out = grad_out.dim(2);

    std::array<Eigen::MatrixXd, kNumPartitions> aeff;
    for (int p = 0; p < kNumPartitions; ++p) {
        aeff[p] = adj.partitions[p];
        if (opt_.edge_importance) {
            CMapRow m(edge_mask_[static_cast<std::size_t>(p)].data(), v_n, v_n);
            aeff[p] = aeff[p].cwiseProduct(Eigen::MatrixXd(m));
        }
    }

    // final activation / zero-forcing: y_out is zero exactly where grads must vanish
    Tensor g = grad_out;
    if (opt_.with_activation) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (cache_.y_out.flat(i) <= 0.0) g.flat(i) = 0.0;
    } else {
        for (std::int64_t s = 0; s < s_n; ++s) {
            const bool act = slot_is_active(mask, s);
            for (std::int64_t c = 0; c < c_out; ++c)
                for (std::int64_t t = 0; t < t_out; ++t) {
                    double* row = g.data() + (((s * c_out + c) * t_out) + t) * v_n;
                    if (!act)
                        std::memset(row, 0, sizeof(double) * static_cast<std::size_t>(v_n));
                    else
                        for (std::int64_t v = mask.valid_joints; v < v_n; ++v) row[v] = 0.0;
                }
        }
    }

    Tensor gx({s_n, c_in, t_in, v_n});

    if (opt_.residual) {
        if (!conv_residual_) {
            for (std::int64_t i = 0; i < gx.numel(); ++i) gx.flat(i) = g.flat(i);
        } else {
            CMapRow wr(w_res_.data(), c_out, c_in);
            MapRow gwr(g_w_res_.data(), c_out, c_in);
            for (std::int64_t s = 0; s < s_n; ++s) {
                if (!slot_is_active(mask, s)) continue;
                for (std::int64_t to = 0; to < t_out; ++to) {
                    const std::int64_t ti = to * opt_.stride;
                    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> gt(
                        g.data() + (s * c_out) * t_out * v_n + to * v_n, c_out, v_n,
                        Eigen::OuterStride<>(t_out * v_n));
                    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> xt(
                        cache_.x_in.data() + (s * c_in) * t_in * v_n + ti * v_n, c_in, v_n,
                        Eigen::OuterStride<>(t_in * v_n));
                    Eigen::Map<RowMat, 0, Eigen::OuterStride<>> gxt(
                        gx.data() + (s * c_in) * t_in * v_n + ti * v_n, c_in, v_n,
                        Eigen::OuterStride<>(t_in * v_n));
                    gwr.noalias() += gt * xt.transpose();
                    gxt.noalias() += wr.transpose() * gt;
                }
                for (std::int64_t c = 0; c < c_out; ++c) {
                    const double* row = g.data() + ((s * c_out + c) * t_out) * v_n;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < t_out * v_n; ++i) acc += row[i];
                    g_b_res_.flat(c) += acc;
                }
            }
        }
    }

    if (cache_.drop_mask.numel() > 0)
        for (std::int64_t i = 0; i < g.numel(); ++i) g.flat(i) *= cache_.drop_mask.flat(i);

    Tensor gz = opt_.with_norm ? bn2_.backward(g, cache_.z, mask) : g;

    // temporal conv backward
    Tensor gy1({s_n, c_out, t_in, v_n});
    {
        CMapRow wt(w_temporal_.data(), c_out, static_cast<std::int64_t>(c_out) * k);
        MapRow gwt(g_w_temporal_.data(), c_out, static_cast<std::int64_t>(c_out) * k);
        RowMat col(static_cast<std::int64_t>(c_out) * k, t_out * v_n);
        for (std::int64_t s = 0; s < s_n; ++s) {
            if (!slot_is_active(mask, s)) continue;
            const double* src = cache_.y1.data() + s * c_out * t_in * v_n;
            for (std::int64_t c = 0; c < c_out; ++c)
                for (int gk = 0; gk < k; ++gk) {
                    double* row = col.data() + (c * k + gk) * t_out * v_n;
                    for (std::int64_t to = 0; to < t_out; ++to) {
                        const std::int64_t ti = to * opt_.stride + gk - pad;
                        if (ti < 0 || ti >= t_in)
                            std::memset(row + to * v_n, 0,
                                        sizeof(double) * static_cast<std::size_t>(v_n));
                        else
                            std::memcpy(row + to * v_n, src + (c * t_in + ti) * v_n,
                                        sizeof(double) * static_cast<std::size_t>(v_n));
                    }
                }
            CMapRow gzs(gz.data() + s * c_out * t_out * v_n, c_out, t_out * v_n);
            gwt.noalias() += gzs * col.transpose();
            RowMat dcol = wt.transpose() * gzs;
            double* dst = gy1.data() + s * c_out * t_in * v_n;
            for (std::int64_t c = 0; c < c_out; ++c)
                for (int gk = 0; gk < k; ++gk) {
                    const double* row = dcol.data() + (c * k + gk) * t_out * v_n;
                    for (std::int64_t to = 0; to < t_out; ++to) {
                        const std::int64_t ti = to * opt_.stride + gk - pad;
                        if (ti < 0 || ti >= t_in) continue;
                        double* drow = dst + (c * t_in + ti) * v_n;
                        const double* srow = row + to * v_n;
                        for (std::int64_t v = 0; v < v_n; ++v) drow[v] += srow[v];
                    }
                }
            for (std::int64_t c = 0; c < c_out; ++c) {
                const double* row = gz.data() + ((s * c_out + c) * t_out) * v_n;
                double acc = 0.0;
                for (std::int64_t i = 0; i < t_out * v_n; ++i) acc += row[i];
                g_b_temporal_.flat(c) += acc;
            }
        }
    }

    if (opt_.with_activation)
        for (std::int64_t i = 0; i < gy1.numel(); ++i)
            if (cache_.y1.flat(i) <= 0.0) gy1.flat(i) = 0.0;

    Tensor gs = opt_.with_norm ? bn1_.backward(gy1, cache_.spat, mask) : gy1;

    // spatial conv backward
    std::array<Eigen::MatrixXd, kNumPartitions> d_aeff;
    for (auto& d : d_aeff) d = Eigen::MatrixXd::Zero(v_n, v_n);
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;
        CMapRow xs(cache_.x_in.data() + s * c_in * t_in * v_n, c_in, t_in * v_n);
        CMapRow gsv(gs.data() + s * c_out * t_in * v_n, c_out * t_in, v_n);
        MapRow gxs(gx.data() + s * c_in * t_in * v_n, c_in, t_in * v_n);
        for (int p = 0; p < kNumPartitions; ++p) {
            CMapRow wp(w_spatial_[static_cast<std::size_t>(p)].data(), c_out, c_in);
            MapRow gwp(g_w_spatial_[static_cast<std::size_t>(p)].data(), c_out, c_in);
            RowMat h = wp * xs;
            MapRow hv(h.data(), c_out * t_in, v_n);
            if (opt_.edge_importance) d_aeff[p].noalias() += gsv.transpose() * hv;
            RowMat dh = gsv * aeff[static_cast<std::size_t>(p)];
            MapRow dhm(dh.data(), c_out, t_in * v_n);
            gwp.noalias() += dhm * xs.transpose();
            gxs.noalias() += wp.transpose() * dhm;
        }
        for (std::int64_t c = 0; c < c_out; ++c) {
            const double* row = gs.data() + ((s * c_out + c) * t_in) * v_n;
            double acc = 0.0;
            for (std::int64_t i = 0; i < t_in * v_n; ++i) acc += row[i];
            g_b_spatial_.flat(c) += acc;
        }
    }
    if (opt_.edge_importance) {
        for (int p = 0; p < kNumPartitions; ++p) {
            MapRow gm(g_edge_mask_[static_cast<std::size_t>(p)].data(), v_n, v_n);
            gm += RowMat(d_aeff[p].cwiseProduct(adj.partitions[p]));
        }
    }

    cache_.valid = false;
    return gx;
}

void STGCNBlock::collect(std::vector<ParamRef>& out, const std::string& prefix) {
    for (int p = 0; p < kNumPartitions; ++p)
        out.push_back({prefix + ".spatial_w" + std::to_string(p),
                       &w_spatial_[static_cast<std::size_t>(p)],
                       &g_w_spatial_[static_cast<std::size_t>(p)], false});
    out.push_back({prefix + ".spatial_b", &b_spatial_, &g_b_spatial_, false});
    if (opt_.edge_importance)
        for (int p = 0; p < kNumPartitions; ++p)
            out.push_back({prefix + ".edge_mask" + std::to_string(p),
                           &edge_mask_[static_cast<std::size_t>(p)],
                           &g_edge_mask_[static_cast<std::size_t>(p)], false});
    out.push_back({prefix + ".temporal_w", &w_temporal_, &g_w_temporal_, false});
    out.push_back({prefix + ".temporal_b", &b_temporal_, &g_b_temporal_, false});
    if (conv_residual_) {
        out.push_back({prefix + ".res_w", &w_res_, &g_w_res_, false});
        out.push_back({prefix + ".res_b", &b_res_, &g_b_res_, false});
    }
    bn1_.collect(out, prefix + ".bn1");
    bn2_.collect(out, prefix + ".bn2");
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(const STGCNConfig& cfg, int padded_joints, std::uint64_t init_seed)
    : cfg_(cfg), padded_joints_(padded_joints) {
    cfg_.validate();
    if (padded_joints <= 0) throw config_error("padded_joints must be positive");
    Rng rng(init_seed);
    int prev = cfg_.input_channels;
    for (std::size_t i = 0; i < cfg_.block_channels.size(); ++i) {
        BlockOptions opt;
        opt.in_channels = prev;
        opt.out_channels = cfg_.block_channels[i];
        opt.padded_joints = padded_joints;
        opt.temporal_kernel = cfg_.temporal_kernel;
        opt.stride = (i > 0 && cfg_.block_channels[i] != cfg_.block_channels[i - 1]) ? 2 : 1;
        opt.residual = i > 0;
        opt.edge_importance = cfg_.edge_importance;
        opt.dropout = cfg_.dropout;
        blocks_.emplace_back(opt, rng);
        prev = cfg_.block_channels[i];
    }
    const int c_last = prev, e = cfg_.embedding_dim, d = cfg_.projection_dim;
    w_embed_ = Tensor({e, c_last});
    g_w_embed_ = Tensor({e, c_last});
    kaiming_uniform(w_embed_, c_last, rng);
    b_embed_ = Tensor({e});
    g_b_embed_ = Tensor({e});
    w_fc1_ = Tensor({e, e});
    g_w_fc1_ = Tensor({e, e});
    kaiming_uniform(w_fc1_, e, rng);
    b_fc1_ = Tensor({e});
    g_b_fc1_ = Tensor({e});
    w_fc2_ = Tensor({d, e});
    g_w_fc2_ = Tensor({d, e});
    kaiming_uniform(w_fc2_, e, rng);
    b_fc2_ = Tensor({d});
    g_b_fc2_ = Tensor({d});
}

EncoderOutput Encoder::forward(const EncoderBatch& batch, const AdjacencySet& adj, Mode mode,
                               Rng* dropout_rng, std::vector<Tensor>* block_outputs) {
    if (batch.x.dim(1) != cfg_.input_channels)
        throw shape_error("encoder: input channel mismatch");
    if (batch.x.dim(3) != padded_joints_) throw shape_error("encoder: joint padding mismatch");
    if (!batch.convention.empty() && batch.convention != adj.convention)
        throw shape_error("encoder: batch convention " + batch.convention +
                          " does not match adjacency " + adj.convention);
    if (batch.valid_joints != adj.valid_joints)
        throw shape_error("encoder: valid joint count mismatch");

    MaskInfo mask{&batch.slot_active, batch.valid_joints};
    Tensor cur = batch.x;
    for (auto& block : blocks_) {
        cur = block.forward(cur, adj, mask, mode, dropout_rng);
        if (block_outputs) block_outputs->push_back(cur);
    }

    const auto s_n = cur.dim(0), c_last = cur.dim(1), t_f = cur.dim(2), v_n = cur.dim(3);
    const auto r_n = static_cast<std::int64_t>(batch.records);
    const auto p_n = static_cast<std::int64_t>(batch.persons);
    const std::int64_t v_valid = batch.valid_joints;

    // mean over frames and valid joints per slot, then over active persons
    Tensor slot_pooled({s_n, c_last});
    const double denom = static_cast<double>(t_f) * static_cast<double>(v_valid);
    for (std::int64_t s = 0; s < s_n; ++s) {
        if (!slot_is_active(mask, s)) continue;
        for (std::int64_t c = 0; c < c_last; ++c) {
            const double* row = cur.data() + ((s * c_last + c) * t_f) * v_n;
            double acc = 0.0;
            for (std::int64_t t = 0; t < t_f; ++t)
                for (std::int64_t v = 0; v < v_valid; ++v) acc += row[t * v_n + v];
            slot_pooled(s, c) = acc / denom;
        }
    }
    Tensor record_pooled({r_n, c_last});
    std::vector<int> active_count(static_cast<std::size_t>(r_n), 0);
    for (std::int64_t r = 0; r < r_n; ++r) {
        int n_active = 0;
        for (std::int64_t p = 0; p < p_n; ++p)
            if (slot_is_active(mask, r * p_n + p)) ++n_active;
        active_count[static_cast<std::size_t>(r)] = n_active;
        if (n_active == 0) continue;
        for (std::int64_t p = 0; p < p_n; ++p) {
            if (!slot_is_active(mask, r * p_n + p)) continue;
            for (std::int64_t c = 0; c < c_last; ++c)
                record_pooled(r, c) += slot_pooled(r * p_n + p, c) / n_active;
        }
    }

    const int e = cfg_.embedding_dim, d = cfg_.projection_dim;
    Tensor embedding({r_n, e}), h_pre({r_n, e}), proj_raw({r_n, d});
    {
        CMapRow rp(record_pooled.data(), r_n, c_last);
        CMapRow we(w_embed_.data(), e, c_last);
        MapRow emb(embedding.data(), r_n, e);
        emb.noalias() = rp * we.transpose();
        for (std::int64_t r = 0; r < r_n; ++r)
            for (std::int64_t i = 0; i < e; ++i) emb(r, i) += b_embed_.flat(i);

        CMapRow w1(w_fc1_.data(), e, e);
        MapRow hp(h_pre.data(), r_n, e);
        hp.noalias() = emb * w1.transpose();
        for (std::int64_t r = 0; r < r_n; ++r)
            for (std::int64_t i = 0; i < e; ++i) hp(r, i) += b_fc1_.flat(i);
    }
    Tensor h = h_pre;
    for (std::int64_t i = 0; i < h.numel(); ++i)
        if (h.flat(i) < 0.0) h.flat(i) = 0.0;
    {
        CMapRow hm(h.data(), r_n, e);
        CMapRow w2(w_fc2_.data(), d, e);
        MapRow pr(proj_raw.data(), r_n, d);
        pr.noalias() = hm * w2.transpose();
        for (std::int64_t r = 0; r < r_n; ++r)
            for (std::int64_t i = 0; i < d; ++i) pr(r, i) += b_fc2_.flat(i);
    }

    Tensor projection = proj_raw;
    std::vector<double> norms(static_cast<std::size_t>(r_n));
    for (std::int64_t r = 0; r < r_n; ++r) {
        double n2 = 0.0;
        for (std::int64_t i = 0; i < d; ++i) n2 += proj_raw(r, i) * proj_raw(r, i);
        const double norm = std::max(std::sqrt(n2), 1e-12);
        norms[static_cast<std::size_t>(r)] = norm;
        for (std::int64_t i = 0; i < d; ++i) projection(r, i) /= norm;
    }

    if (mode == Mode::kTrain) {
        cache_.valid = true;
        cache_.last_block_out = cur;
        cache_.slot_pooled = std::move(slot_pooled);
        cache_.record_pooled = std::move(record_pooled);
        cache_.embedding = embedding;
        cache_.h_pre = std::move(h_pre);
        cache_.h = std::move(h);
        cache_.proj_unit = projection;
        cache_.proj_norm = std::move(norms);
        cache_.active_count = std::move(active_count);
        cache_.slot_active = batch.slot_active;
        cache_.records = batch.records;
        cache_.persons = batch.persons;
        cache_.valid_joints = batch.valid_joints;
        cache_.frames = static_cast<int>(t_f);
    } else {
        cache_.valid = false;
    }

    EncoderOutput out;
    out.embedding = std::move(embedding);
    out.projection = std::move(projection);
    return out;
}

void Encoder::backward_from_projection(const Tensor& grad_projection, const AdjacencySet& adj) {
    if (!cache_.valid) throw error("encoder backward without a cached training forward");
    const auto r_n = static_cast<std::int64_t>(cache_.records);
    const auto p_n = static_cast<std::int64_t>(cache_.persons);
    const int e = cfg_.embedding_dim, d = cfg_.projection_dim;
    if (grad_projection.dim(0) != r_n || grad_projection.dim(1) != d)
        throw shape_error("grad_projection shape mismatch");

    // L2 normalization backward
    Tensor d_raw({r_n, d});
    for (std::int64_t r = 0; r < r_n; ++r) {
        double dot = 0.0;
        for (std::int64_t i = 0; i < d; ++i)
            dot += cache_.proj_unit(r, i) * grad_projection(r, i);
        const double inv = 1.0 / cache_.proj_norm[static_cast<std::size_t>(r)];
        for (std::int64_t i = 0; i < d; ++i)
            d_raw(r, i) = (grad_projection(r, i) - cache_.proj_unit(r, i) * dot) * inv;
    }

    Tensor dh({r_n, e});
    {
        CMapRow draw(d_raw.data(), r_n, d);
        CMapRow hm(cache_.h.data(), r_n, e);
        MapRow gw2(g_w_fc2_.data(), d, e);
        gw2.noalias() += draw.transpose() * hm;
        for (std::int64_t r = 0; r < r_n; ++r)
            for (std::int64_t i = 0; i < d; ++i) g_b_fc2_.flat(i) += d_raw(r, i);
        CMapRow w2(w_fc2_.data(), d, e);
        MapRow dhm(dh.data(), r_n, e);
        dhm.noalias() = draw * w2;
    }
    for (std::int64_t i = 0; i < dh.numel(); ++i)
        if (cache_.h_pre.flat(i) <= 0.0) dh.flat(i) = 0.0;

    Tensor demb({r_n, e});
    {
        CMapRow dhm(dh.data(), r_n, e);
        CMapRow embm(cache_.embedding.data(), r_n, e);
        MapRow gw1(g_w_fc1_.data(), e, e);
        gw1.noalias() += dhm.transpose() * embm;
        for (std::int64_t r = 0; r < r_n; ++r)
            for (std::int64_t i = 0; i < e; ++i) g_b_fc1_.flat(i) += dh(r, i);
        CMapRow w1(w_fc1_.data(), e, e);
        MapRow dem(demb.data(), r_n, e);
        dem.noalias() = dhm * w1;
    }

    const auto c_last = cache_.record_pooled.dim(1);
    Tensor d_rp({r_n, c_last});
    {
        CMapRow dem(demb.data(), r_n, e);
        CMapRow rp(cache_.record_pooled.data(), r_n, c_last);
        MapRow gwe(g_w_embed_.data(), e, c_last);
        gwe.noalias() += dem.transpose() * rp;
        for (std::int64_t r = 0; r < r_n; ++r)
            for (std::int64_t i = 0; i < e; ++i) g_b_embed_.flat(i) += demb(r, i);
        CMapRow we(w_embed_.data(), e, c_last);
        MapRow drp(d_rp.data(), r_n, c_last);
        drp.noalias() = dem * we;
    }

    // pooling backward
    const auto& last = cache_.last_block_out;
    const auto s_n = last.dim(0), t_f = last.dim(2), v_n = last.dim(3);
    const std::int64_t v_valid = cache_.valid_joints;
    const double denom = static_cast<double>(t_f) * static_cast<double>(v_valid);
    Tensor dx({s_n, c_last, t_f, v_n});
    for (std::int64_t r = 0; r < r_n; ++r) {
        const int n_active = cache_.active_count[static_cast<std::size_t>(r)];
        if (n_active == 0) continue;
        for (std::int64_t p = 0; p < p_n; ++p) {
            const auto s = r * p_n + p;
            if (cache_.slot_active[static_cast<std::size_t>(s)] == 0) continue;
            for (std::int64_t c = 0; c < c_last; ++c) {
                const double val = d_rp(r, c) / (n_active * denom);
                double* row = dx.data() + ((s * c_last + c) * t_f) * v_n;
                for (std::int64_t t = 0; t < t_f; ++t)
                    for (std::int64_t v = 0; v < v_valid; ++v) row[t * v_n + v] = val;
            }
        }
    }

    Tensor g = std::move(dx);
    for (std::size_t i = blocks_.size(); i-- > 0;) g = blocks_[i].backward(g, adj);
    cache_.valid = false;
}

void Encoder::zero_grad() {
    for (auto& p : parameters()) p.grad->set_zero();
}

std::vector<ParamRef> Encoder::parameters() {
    std::vector<ParamRef> out;
    for (const auto& p : named_arrays())
        if (!p.is_buffer) out.push_back(p);
    return out;
}

std::vector<ParamRef> Encoder::named_arrays() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].collect(out, "blocks." + std::to_string(i));
    out.push_back({"embed.weight", &w_embed_, &g_w_embed_, false});
    out.push_back({"embed.bias", &b_embed_, &g_b_embed_, false});
    out.push_back({"proj.fc1.weight", &w_fc1_, &g_w_fc1_, false});
    out.push_back({"proj.fc1.bias", &b_fc1_, &g_b_fc1_, false});
    out.push_back({"proj.fc2.weight", &w_fc2_, &g_w_fc2_, false});
    out.push_back({"proj.fc2.bias", &b_fc2_, &g_b_fc2_, false});
    return out;
}

Tensor linear_classify(const Tensor& embeddings, const LinearHead& head) {
    if (embeddings.ndim() != 2 || head.weight.ndim() != 2 ||
        embeddings.dim(1) != head.weight.dim(1) || head.bias.dim(0) != head.weight.dim(0))
        throw shape_error("linear_classify: dimension mismatch");
    const auto n = embeddings.dim(0), e = embeddings.dim(1), k = head.weight.dim(0);
    Tensor scores({n, k});
    CMapRow em(embeddings.data(), n, e);
    CMapRow wm(head.weight.data(), k, e);
    MapRow sm(scores.data(), n, k);
    sm.noalias() = em * wm.transpose();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) scores(i, j) += head.bias.flat(j);
    return scores;
}

SgdOptimizer::SgdOptimizer(std::vector<ParamRef> params, double lr, double momentum,
                           double weight_decay)
    : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto& p : params)
        if (!p.is_buffer) params_.push_back(p);
    for (const auto& p : params_) velocity_.emplace_back(Tensor(p.value->shape()));
}

void SgdOptimizer::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& w = *params_[i].value;
        const Tensor& g = *params_[i].grad;
        Tensor& v = velocity_[i];
        for (std::int64_t j = 0; j < w.numel(); ++j) {
            const double grad = g.flat(j) + weight_decay_ * w.flat(j);
            v.flat(j) = momentum_ * v.flat(j) + grad;
            w.flat(j) -= lr_ * v.flat(j);
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.grad->set_zero();
}

}  // namespace msclr
