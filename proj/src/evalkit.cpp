#include "msclr/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "msclr/errors.hpp"

namespace msclr {

using json = nlohmann::ordered_json;

namespace {

int argmax_row(const Tensor& scores, std::int64_t row) {
    const auto k = scores.dim(1);
    int best = 0;
    double best_v = scores(row, 0);
    for (std::int64_t j = 1; j < k; ++j)
        if (scores(row, j) > best_v) {  // ties keep the lowest class index
            best_v = scores(row, j);
            best = static_cast<int>(j);
        }
    return best;
}

Eigen::MatrixXi confusion_from_scores(const Tensor& scores, const std::vector<int>& labels,
                                      int n_classes) {
    Eigen::MatrixXi confusion = Eigen::MatrixXi::Zero(n_classes, n_classes);
    for (std::int64_t i = 0; i < scores.dim(0); ++i)
        confusion(labels[static_cast<std::size_t>(i)], argmax_row(scores, i)) += 1;
    return confusion;
}

}  // namespace

void EvalEntry::recompute_from_confusion() {
    const auto k = confusion.rows();
    std::int64_t correct = 0, n = 0;
    per_class.assign(static_cast<std::size_t>(k), 0.0);
    for (Eigen::Index i = 0; i < k; ++i) {
        const std::int64_t support = confusion.row(i).sum();
        correct += confusion(i, i);
        n += support;
        per_class[static_cast<std::size_t>(i)] =
            support > 0 ? static_cast<double>(confusion(i, i)) / static_cast<double>(support)
                        : 0.0;
    }
    top1 = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

const EvalEntry& EvalReport::find(const std::string& format, const std::string& stream) const {
    for (const auto& e : entries)
        if (e.format == format && e.stream == stream) return e;
    throw config_error("report has no entry for " + format + "/" + stream);
}

bool EvalReport::has(const std::string& format, const std::string& stream) const {
    for (const auto& e : entries)
        if (e.format == format && e.stream == stream) return true;
    return false;
}

std::string EvalReport::to_json_string() const {
    json j;
    j["format"] = "msclr-eval-report";
    j["version"] = 1;
    j["n_classes"] = n_classes;
    j["split"] = split;
    j["checkpoint_id"] = checkpoint_id;
    j["ensemble_order"] = ensemble_order;
    j["fusion_weights"] = fusion_weights;
    j["entries"] = json::array();
    for (const auto& e : entries) {
        json je;
        je["format"] = e.format;
        je["stream"] = e.stream;
        je["top1"] = e.top1;
        je["per_class"] = e.per_class;
        json conf = json::array();
        for (Eigen::Index r = 0; r < e.confusion.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < e.confusion.cols(); ++c) row.push_back(e.confusion(r, c));
            conf.push_back(std::move(row));
        }
        je["confusion"] = std::move(conf);
        j["entries"].push_back(std::move(je));
    }
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw io_error(std::string("malformed report: ") + e.what());
    }
    if (j.value("format", "") != "msclr-eval-report") throw io_error("not an eval report");
    EvalReport rep;
    rep.n_classes = j.at("n_classes").get<int>();
    rep.split = j.at("split").get<std::string>();
    rep.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    rep.ensemble_order = j.at("ensemble_order").get<std::string>();
    rep.fusion_weights = j.at("fusion_weights").get<std::vector<double>>();
    for (const auto& je : j.at("entries")) {
        EvalEntry e;
        e.format = je.at("format").get<std::string>();
        e.stream = je.at("stream").get<std::string>();
        e.top1 = je.at("top1").get<double>();
        e.per_class = je.at("per_class").get<std::vector<double>>();
        const auto& conf = je.at("confusion");
        const auto k = static_cast<Eigen::Index>(conf.size());
        e.confusion = Eigen::MatrixXi::Zero(k, k);
        for (Eigen::Index r = 0; r < k; ++r)
            for (Eigen::Index c = 0; c < k; ++c)
                e.confusion(r, c) = conf[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]
                                        .get<int>();
        rep.entries.push_back(std::move(e));
    }
    return rep;
}

void EvalReport::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write report: " + path.string());
    os << to_json_string();
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open report: " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_json_string(buf.str());
}

double softmax_cross_entropy(const Tensor& scores, const std::vector<int>& labels,
                             Tensor* grad_scores) {
    const auto n = scores.dim(0), k = scores.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw shape_error("softmax_cross_entropy: label count mismatch");
    if (grad_scores) {
        if (!grad_scores->same_shape(scores)) *grad_scores = Tensor(scores.shape());
        grad_scores->set_zero();
    }
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= k) throw shape_error("softmax_cross_entropy: label out of range");
        double m = scores(i, 0);
        for (std::int64_t j = 1; j < k; ++j) m = std::max(m, scores(i, j));
        double z = 0.0;
        for (std::int64_t j = 0; j < k; ++j) z += std::exp(scores(i, j) - m);
        loss += (std::log(z) + m - scores(i, y)) / static_cast<double>(n);
        if (grad_scores)
            for (std::int64_t j = 0; j < k; ++j) {
                const double p = std::exp(scores(i, j) - m) / z;
                (*grad_scores)(i, j) = (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
            }
    }
    return loss;
}

Tensor softmax_rows(const Tensor& scores) {
    const auto n = scores.dim(0), k = scores.dim(1);
    Tensor out({n, k});
    for (std::int64_t i = 0; i < n; ++i) {
        double m = scores(i, 0);
        for (std::int64_t j = 1; j < k; ++j) m = std::max(m, scores(i, j));
        double z = 0.0;
        for (std::int64_t j = 0; j < k; ++j) z += std::exp(scores(i, j) - m);
        for (std::int64_t j = 0; j < k; ++j) out(i, j) = std::exp(scores(i, j) - m) / z;
    }
    return out;
}

Tensor fuse_streams(const std::vector<Tensor>& stream_scores, const std::vector<double>& weights) {
    if (stream_scores.empty()) throw shape_error("fuse_streams: no inputs");
    if (stream_scores.size() != weights.size())
        throw shape_error("fuse_streams: weight count does not match stream count");
    for (const auto& s : stream_scores)
        if (!s.same_shape(stream_scores.front()))
            throw shape_error("fuse_streams: score shapes disagree");
    Tensor fused(stream_scores.front().shape());
    for (std::size_t s = 0; s < stream_scores.size(); ++s)
        for (std::int64_t i = 0; i < fused.numel(); ++i)
            fused.flat(i) += weights[s] * stream_scores[s].flat(i);
    return fused;
}

Tensor ensemble_formats(const std::vector<Tensor>& softmax_scores) {
    if (softmax_scores.empty()) throw shape_error("ensemble_formats: no inputs");
    for (const auto& s : softmax_scores) {
        if (!s.same_shape(softmax_scores.front()))
            throw shape_error("ensemble_formats: score shapes disagree");
        for (std::int64_t i = 0; i < s.dim(0); ++i) {
            double row_sum = 0.0;
            for (std::int64_t j = 0; j < s.dim(1); ++j) {
                if (s(i, j) < 0.0)
                    throw shape_error("ensemble_formats: negative score entry");
                row_sum += s(i, j);
            }
            if (std::abs(row_sum - 1.0) > 1e-9)
                throw shape_error("ensemble_formats: rows must be softmaxed (sum to 1)");
        }
    }
    Tensor mean(softmax_scores.front().shape());
    const double inv = 1.0 / static_cast<double>(softmax_scores.size());
    for (const auto& s : softmax_scores)
        for (std::int64_t i = 0; i < mean.numel(); ++i) mean.flat(i) += inv * s.flat(i);
    return mean;
}

Tensor extract_embeddings(Encoder& encoder, const AdjacencySet& adj,
                          const std::vector<const SequenceRecord*>& records,
                          const std::string& format, Stream stream, int frames,
                          const ConventionRegistry& registry, std::vector<int>* labels_out,
                          int batch_size) {
    if (records.empty()) throw config_error("extract_embeddings: empty record set");
    const auto e = encoder.config().embedding_dim;
    Tensor out({static_cast<std::int64_t>(records.size()), e});
    if (labels_out) labels_out->clear();

    const AugmentationConfig no_aug = AugmentationConfig::disabled();
    Rng dummy(0);
    std::size_t done = 0;
    while (done < records.size()) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                    records.size() - done);
        std::vector<PoseSequence> views;
        views.reserve(n);
        for (std::size_t i = 0; i < n; ++i)
            views.push_back(
                make_view(*records[done + i], format, stream, frames, no_aug, registry, dummy));
        EncoderBatch batch = make_batch(views);
        EncoderOutput enc = encoder.forward(batch, adj, Mode::kEval);
        for (std::size_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < e; ++j)
                out(static_cast<std::int64_t>(done + i), j) =
                    enc.embedding(static_cast<std::int64_t>(i), j);
        done += n;
    }
    if (labels_out)
        for (const auto* r : records) labels_out->push_back(r->label);
    return out;
}

LinearHead train_linear(Encoder& encoder, const AdjacencySet& adj,
                        const std::vector<const SequenceRecord*>& train_records,
                        const std::string& format, Stream stream, int frames, int n_classes,
                        const EvalSchedule& schedule, const ConventionRegistry& registry) {
    if (train_records.empty()) throw config_error("train_linear: empty training split");
    if (n_classes < 2) throw config_error("train_linear: need at least 2 classes");

    std::vector<int> labels;
    const Tensor embeddings =
        extract_embeddings(encoder, adj, train_records, format, stream, frames, registry, &labels);
    const auto n = embeddings.dim(0), e = embeddings.dim(1);

    LinearHead head;
    head.weight = Tensor({n_classes, e});
    head.bias = Tensor({n_classes});
    Tensor g_w({n_classes, e}), g_b({n_classes});

    Rng rng(schedule.seed);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);

    Tensor vel_w({n_classes, e}), vel_b({n_classes});
    for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
        const double lr =
            epoch >= schedule.lr_drop_epoch ? schedule.lr * schedule.lr_drop_factor : schedule.lr;
        rng.shuffle(order);
        std::size_t pos = 0;
        while (pos < order.size()) {
            const auto b_n = static_cast<std::int64_t>(
                std::min<std::size_t>(static_cast<std::size_t>(schedule.batch_size),
                                      order.size() - pos));
            Tensor batch({b_n, e});
            std::vector<int> batch_labels(static_cast<std::size_t>(b_n));
            for (std::int64_t i = 0; i < b_n; ++i) {
                const int src = order[pos + static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < e; ++j) batch(i, j) = embeddings(src, j);
                batch_labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(src)];
            }
            pos += static_cast<std::size_t>(b_n);

            const Tensor scores = linear_classify(batch, head);
            Tensor g_scores;
            softmax_cross_entropy(scores, batch_labels, &g_scores);

            g_w.set_zero();
            g_b.set_zero();
            for (std::int64_t i = 0; i < b_n; ++i)
                for (std::int64_t c = 0; c < n_classes; ++c) {
                    const double g = g_scores(i, c);
                    g_b.flat(c) += g;
                    for (std::int64_t j = 0; j < e; ++j) g_w(c, j) += g * batch(i, j);
                }
            for (std::int64_t i = 0; i < g_w.numel(); ++i) {
                vel_w.flat(i) = schedule.momentum * vel_w.flat(i) + g_w.flat(i);
                head.weight.flat(i) -= lr * vel_w.flat(i);
            }
            for (std::int64_t i = 0; i < g_b.numel(); ++i) {
                vel_b.flat(i) = schedule.momentum * vel_b.flat(i) + g_b.flat(i);
                head.bias.flat(i) -= lr * vel_b.flat(i);
            }
        }
    }
    return head;
}

EnsembleOrder ensemble_order_from_string(const std::string& s) {
    if (s == "formats_then_streams") return EnsembleOrder::kFormatsThenStreams;
    if (s == "streams_then_formats") return EnsembleOrder::kStreamsThenFormats;
    throw config_error("unknown ensemble order: " + s);
}

std::string ensemble_order_to_string(EnsembleOrder o) {
    return o == EnsembleOrder::kFormatsThenStreams ? "formats_then_streams"
                                                   : "streams_then_formats";
}

std::string head_key(const std::string& format, Stream stream) {
    return format + "/" + stream_to_string(stream);
}

EvalReport evaluate(Encoder& encoder, const std::map<std::string, AdjacencySet>& adjacency,
                    const HeadGrid& heads, const std::vector<const SequenceRecord*>& records,
                    const ConventionRegistry& registry, const EvalProtocol& protocol) {
    if (records.empty()) throw config_error("evaluate: empty record set");
    if (protocol.formats.empty() || protocol.streams.empty())
        throw config_error("evaluate: empty format/stream grid");
    if (protocol.streams.size() != protocol.fusion_weights.size())
        throw config_error("evaluate: fusion weights do not match stream count");

    const int k = protocol.n_classes;
    std::vector<int> labels;
    labels.reserve(records.size());
    for (const auto* r : records) {
        if (r->label < 0 || r->label >= k)
            throw config_error("evaluate: record " + r->sample_id + " label out of range");
        labels.push_back(r->label);
    }

    EvalReport report;
    report.n_classes = k;
    report.split = protocol.split;
    report.checkpoint_id = protocol.checkpoint_id;
    report.ensemble_order = ensemble_order_to_string(protocol.order);
    report.fusion_weights = protocol.fusion_weights;

    // raw scores and row-softmaxed scores per (format, stream)
    std::map<std::string, Tensor> raw, prob;
    for (const auto& f : protocol.formats) {
        const auto adj_it = adjacency.find(f);
        if (adj_it == adjacency.end()) throw config_error("evaluate: no adjacency for " + f);
        for (Stream s : protocol.streams) {
            const auto key = head_key(f, s);
            const auto head_it = heads.find(key);
            if (head_it == heads.end())
                throw config_error("evaluate: missing head for grid cell " + key);
            const Tensor emb = extract_embeddings(encoder, adj_it->second, records, f, s,
                                                  protocol.frames, registry);
            Tensor scores = linear_classify(emb, head_it->second);
            prob.emplace(key, softmax_rows(scores));
            raw.emplace(key, std::move(scores));

            EvalEntry cell;
            cell.format = f;
            cell.stream = stream_to_string(s);
            cell.confusion = confusion_from_scores(raw.at(key), labels, k);
            cell.recompute_from_confusion();
            report.entries.push_back(std::move(cell));
        }
    }

    // fused streams per format (softmaxed cells, fixed weights)
    for (const auto& f : protocol.formats) {
        std::vector<Tensor> per_stream;
        for (Stream s : protocol.streams) per_stream.push_back(prob.at(head_key(f, s)));
        Tensor fused = fuse_streams(per_stream, protocol.fusion_weights);
        EvalEntry entry;
        entry.format = f;
        entry.stream = "fused";
        entry.confusion = confusion_from_scores(fused, labels, k);
        entry.recompute_from_confusion();
        report.entries.push_back(std::move(entry));
    }

    if (protocol.ensemble) {
        if (protocol.order == EnsembleOrder::kFormatsThenStreams) {
            // softmax per cell -> mean over formats -> weighted stream sum
            std::vector<Tensor> ensembled_per_stream;
            for (std::size_t si = 0; si < protocol.streams.size(); ++si) {
                std::vector<Tensor> per_format;
                for (const auto& f : protocol.formats)
                    per_format.push_back(prob.at(head_key(f, protocol.streams[si])));
                Tensor ens = ensemble_formats(per_format);
                EvalEntry entry;
                entry.format = "ensemble";
                entry.stream = stream_to_string(protocol.streams[si]);
                entry.confusion = confusion_from_scores(ens, labels, k);
                entry.recompute_from_confusion();
                report.entries.push_back(std::move(entry));
                ensembled_per_stream.push_back(std::move(ens));
            }
            Tensor overall = fuse_streams(ensembled_per_stream, protocol.fusion_weights);
            EvalEntry entry;
            entry.format = "ensemble";
            entry.stream = "fused";
            entry.confusion = confusion_from_scores(overall, labels, k);
            entry.recompute_from_confusion();
            report.entries.push_back(std::move(entry));
        } else {
            // weighted stream sum of raw scores per format -> softmax -> mean
            std::vector<Tensor> fused_prob_per_format;
            for (const auto& f : protocol.formats) {
                std::vector<Tensor> per_stream;
                for (Stream s : protocol.streams) per_stream.push_back(raw.at(head_key(f, s)));
                fused_prob_per_format.push_back(
                    softmax_rows(fuse_streams(per_stream, protocol.fusion_weights)));
            }
            Tensor overall = ensemble_formats(fused_prob_per_format);
            EvalEntry entry;
            entry.format = "ensemble";
            entry.stream = "fused";
            entry.confusion = confusion_from_scores(overall, labels, k);
            entry.recompute_from_confusion();
            report.entries.push_back(std::move(entry));
        }
    }
    return report;
}

std::vector<std::pair<int, double>> per_class_diff(const EvalEntry& a, const EvalEntry& b) {
    if (a.per_class.size() != b.per_class.size())
        throw shape_error("per_class_diff: class sets differ");
    std::vector<std::pair<int, double>> diffs;
    diffs.reserve(a.per_class.size());
    for (std::size_t i = 0; i < a.per_class.size(); ++i)
        diffs.emplace_back(static_cast<int>(i), a.per_class[i] - b.per_class[i]);
    std::stable_sort(diffs.begin(), diffs.end(), [](const auto& x, const auto& y) {
        if (x.second != y.second) return x.second > y.second;
        return x.first < y.first;
    });
    return diffs;
}

std::string svg_bar_chart(const std::vector<std::pair<int, double>>& diffs,
                          const std::string& title) {
    const int bar_w = 18, gap = 4, height = 240, margin = 30;
    const int width = margin * 2 + static_cast<int>(diffs.size()) * (bar_w + gap);
    const double mid_y = height / 2.0;
    double max_abs = 1e-9;
    for (const auto& [cls, d] : diffs) max_abs = std::max(max_abs, std::abs(d));
    const double scale = (height / 2.0 - margin) / max_abs;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
       << height << "\">\n";
    os << "  <text x=\"" << margin << "\" y=\"16\" font-size=\"12\">" << title << "</text>\n";
    os << "  <line x1=\"0\" y1=\"" << mid_y << "\" x2=\"" << width << "\" y2=\"" << mid_y
       << "\" stroke=\"#888\"/>\n";
    int x = margin;
    for (const auto& [cls, d] : diffs) {
        const double h = std::abs(d) * scale;
        const double y = d >= 0 ? mid_y - h : mid_y;
        os << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\""
           << h << "\" fill=\"" << (d >= 0 ? "#27ae60" : "#c0392b") << "\"/>\n";
        os << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << height - 8
           << "\" font-size=\"9\" text-anchor=\"middle\">" << cls << "</text>\n";
        x += bar_w + gap;
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace msclr
