#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "msclr/dataio.hpp"
#include "msclr/errors.hpp"
#include "msclr/pretrain.hpp"
#include "oracles.hpp"

using namespace msclr;
namespace fs = std::filesystem;

namespace {

Eigen::VectorXd random_unit(int dim, Rng& rng) {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
    return v / v.norm();
}

std::vector<std::uint8_t> encoder_bytes(Encoder& enc) {
    std::vector<std::uint8_t> bytes;
    for (const auto& ref : enc.named_arrays()) {
        if (ref.is_buffer) continue;
        const auto* p = reinterpret_cast<const std::uint8_t*>(ref.value->data());
        bytes.insert(bytes.end(), p, p + ref.value->numel() * sizeof(double));
    }
    return bytes;
}

STGCNConfig tiny_model() {
    STGCNConfig cfg;
    cfg.block_channels = {4};
    cfg.temporal_kernel = 3;
    cfg.embedding_dim = 8;
    cfg.projection_dim = 4;
    return cfg;
}

fs::path temp_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("msclr_pretrain_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_SUITE("pretrain") {

TEST_CASE("info_nce uniform-similarity closed form ln(N+1)") {
    Rng rng(1);
    for (int n : {1, 10, 8192}) {
        const int dim = 16;
        const auto q = random_unit(dim, rng);
        const auto k = random_unit(dim, rng);
        MemoryBank bank(n, dim);
        Eigen::MatrixXd keys(n, dim);
        for (int i = 0; i < n; ++i) keys.row(i) = k.transpose();  // q.m_i == q.k for all i
        bank.enqueue(keys);
        for (double tau : {0.07, 0.5, 1.0})
            CHECK(std::abs(info_nce(q, k, bank, tau) - std::log(n + 1.0)) <= 1e-9);
    }
}

TEST_CASE("info_nce with an empty bank is zero") {
    Rng rng(3);
    const auto q = random_unit(8, rng);
    const auto k = random_unit(8, rng);
    MemoryBank empty(0, 8);
    CHECK(info_nce(q, k, empty, 0.07) == 0.0);
    MemoryBank unfilled(32, 8);
    CHECK(info_nce(q, k, unfilled, 0.07) == 0.0);
    CHECK_THROWS_AS(info_nce(q, k, unfilled, 0.0), config_error);
}

TEST_CASE("info_nce agrees with a long-double softmax oracle on 1000 random instances") {
    Rng rng(17);
    const int dim = 12;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(0, 37));
        MemoryBank bank(std::max(n, 1), dim);
        std::vector<Eigen::VectorXd> negs;
        if (n > 0) {
            Eigen::MatrixXd keys(n, dim);
            for (int i = 0; i < n; ++i) keys.row(i) = random_unit(dim, rng).transpose();
            bank.enqueue(keys);
            for (int i = 0; i < n; ++i) negs.push_back(keys.row(i).transpose());
        }
        const auto q = random_unit(dim, rng);
        const auto k = random_unit(dim, rng);
        const double tau = rng.uniform(0.05, 1.0);

        std::vector<double> logits{q.dot(k) / tau};
        for (const auto& m : negs) logits.push_back(q.dot(m) / tau);
        const double expect = oracles::softmax_ce_reference(logits);
        worst = std::max(worst, std::abs(info_nce(q, k, bank, tau) - expect));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("info_nce is strictly decreasing in the positive similarity") {
    Rng rng(5);
    const int dim = 8;
    MemoryBank bank(16, dim);
    Eigen::MatrixXd keys(16, dim);
    for (int i = 0; i < 16; ++i) keys.row(i) = random_unit(dim, rng).transpose();
    bank.enqueue(keys);

    Eigen::VectorXd q = Eigen::VectorXd::Zero(dim);
    q(0) = 1.0;
    double prev = std::numeric_limits<double>::infinity();
    for (double s = -0.95; s <= 0.96; s += 0.05) {
        Eigen::VectorXd k = Eigen::VectorXd::Zero(dim);
        k(0) = s;
        k(1) = std::sqrt(1.0 - s * s);
        const double loss = info_nce(q, k, bank, 0.07);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("info_nce_batch equals per-row info_nce and its q-gradient matches finite differences") {
    Rng rng(29);
    const int dim = 6, b = 3;
    MemoryBank bank(9, dim);
    Eigen::MatrixXd keys(9, dim);
    for (int i = 0; i < 9; ++i) keys.row(i) = random_unit(dim, rng).transpose();
    bank.enqueue(keys);

    Tensor q({b, dim}), k({b, dim});
    for (int r = 0; r < b; ++r) {
        const auto qv = random_unit(dim, rng), kv = random_unit(dim, rng);
        for (int j = 0; j < dim; ++j) {
            q(r, j) = qv(j);
            k(r, j) = kv(j);
        }
    }
    const double tau = 0.07;
    Tensor grad;
    const auto stats = info_nce_batch(q, k, bank, tau, &grad);

    double mean = 0.0;
    for (int r = 0; r < b; ++r) {
        Eigen::VectorXd qv(dim), kv(dim);
        for (int j = 0; j < dim; ++j) {
            qv(j) = q(r, j);
            kv(j) = k(r, j);
        }
        mean += info_nce(qv, kv, bank, tau) / b;
    }
    CHECK(stats.loss == doctest::Approx(mean).epsilon(1e-12));

    const double h = 1e-6;
    for (int r = 0; r < b; ++r)
        for (int j = 0; j < dim; ++j) {
            const double orig = q(r, j);
            q(r, j) = orig + h;
            const double lp = info_nce_batch(q, k, bank, tau).loss;
            q(r, j) = orig - h;
            const double lm = info_nce_batch(q, k, bank, tau).loss;
            q(r, j) = orig;
            CHECK(grad(r, j) == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-4));
        }
}

TEST_CASE("memory bank FIFO arithmetic") {
    Rng rng(7);
    const int dim = 4;
    MemoryBank bank(4, dim);
    CHECK(bank.occupancy() == 0);

    auto key_batch = [&](int n) {
        Eigen::MatrixXd keys(n, dim);
        for (int i = 0; i < n; ++i) keys.row(i) = random_unit(dim, rng).transpose();
        return keys;
    };

    const auto first = key_batch(2);
    bank.enqueue(first);
    CHECK(bank.write_pointer() == 2);
    CHECK(bank.occupancy() == 2);
    bank.enqueue(key_batch(2));
    CHECK(bank.write_pointer() == 0);
    CHECK(bank.occupancy() == 4);
    const auto fifth = key_batch(1);
    bank.enqueue(fifth);
    CHECK(bank.write_pointer() == 1);  // (2 + 2 + 1) mod 4
    CHECK((bank.queue().row(0) - fifth.row(0)).norm() == 0.0);  // oldest slot overwritten

    // enqueue exactly N into an empty bank reproduces the batch in order
    MemoryBank fresh(4, dim);
    const auto full = key_batch(4);
    fresh.enqueue(full);
    CHECK((fresh.queue() - full).norm() == 0.0);
    CHECK(fresh.write_pointer() == 0);

    // pointer after e enqueues of size b is (e*b) mod N
    MemoryBank mod_bank(7, dim);
    for (int e = 1; e <= 5; ++e) {
        mod_bank.enqueue(key_batch(3));
        CHECK(mod_bank.write_pointer() == (e * 3) % 7);
    }

    CHECK_THROWS_AS(bank.enqueue(key_batch(5)), shape_error);  // batch larger than capacity
}

TEST_CASE("memory bank rejects or re-normalizes non-unit keys") {
    MemoryBank bank(2, 3);
    Eigen::MatrixXd keys(1, 3);
    keys << 2.0, 0.0, 0.0;
    CHECK_THROWS_AS(bank.enqueue(keys, /*strict=*/true), numeric_error);
    bank.enqueue(keys, /*strict=*/false);
    CHECK(bank.queue().row(0).norm() == doctest::Approx(1.0).epsilon(1e-12));
    Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(1, 3);
    CHECK_THROWS_AS(bank.enqueue(zero), numeric_error);
}

TEST_CASE("momentum_update closed forms") {
    const auto cfg = tiny_model();
    Encoder query(cfg, 5, 1);
    Encoder key(cfg, 5, 2);  // different init

    SUBCASE("m = 0 copies the query exactly") {
        momentum_update(key, query, 0.0);
        auto ka = key.named_arrays();
        auto qa = query.named_arrays();
        for (std::size_t i = 0; i < ka.size(); ++i)
            CHECK(*ka[i].value == *qa[i].value);
    }

    SUBCASE("elementwise EMA formula") {
        // key = 0, query = 1 -> key becomes 1 - m
        for (auto& ref : key.named_arrays()) ref.value->fill(0.0);
        for (auto& ref : query.named_arrays()) ref.value->fill(1.0);
        momentum_update(key, query, 0.999);
        for (auto& ref : key.named_arrays())
            for (std::int64_t i = 0; i < ref.value->numel(); ++i)
                CHECK(std::abs(ref.value->flat(i) - 0.001) <= 1e-12);
    }

    SUBCASE("repeated updates decay the gap geometrically") {
        const double m = 0.9;
        double prev_gap = -1.0;
        for (int step = 0; step < 100; ++step) {
            momentum_update(key, query, m);
            double gap2 = 0.0;
            auto ka = key.named_arrays();
            auto qa = query.named_arrays();
            for (std::size_t i = 0; i < ka.size(); ++i)
                for (std::int64_t j = 0; j < ka[i].value->numel(); ++j) {
                    const double d = ka[i].value->flat(j) - qa[i].value->flat(j);
                    gap2 += d * d;
                }
            const double gap = std::sqrt(gap2);
            if (prev_gap > 1e-12) CHECK(gap == doctest::Approx(m * prev_gap).epsilon(1e-9));
            prev_gap = gap;
        }
    }
}

TEST_CASE("key parameters are untouched by optimizer steps") {
    const auto cfg = tiny_model();
    Encoder query(cfg, 5, 1);
    Encoder key = query;
    const auto before = encoder_bytes(key);

    SgdOptimizer optim(query.parameters(), 0.1, 0.9, 1e-4);
    Rng rng(9);
    for (int it = 0; it < 100; ++it) {
        for (auto& p : query.parameters())
            for (std::int64_t i = 0; i < p.grad->numel(); ++i) p.grad->flat(i) = rng.normal();
        optim.step();
    }
    const auto after = encoder_bytes(key);
    REQUIRE(before.size() == after.size());
    CHECK(std::memcmp(before.data(), after.data(), before.size()) == 0);

    // and the query did move
    CHECK(encoder_bytes(query) != before);
}

TEST_CASE("make_positive_pair masks and degenerate single-format mode") {
    const auto reg = builtin_registry();
    const auto records = generate_synthetic_dataset(2, 2, reg, 31);
    const auto& rec = records.front();

    AugmentationConfig aug;  // all on
    Rng rng(3);
    const auto [q, k] =
        make_positive_pair(rec, {"kinectv2", "smplx"}, Stream::kJoint, 20, aug, reg, rng);
    CHECK(q.valid_joints() == 25);
    CHECK(k.valid_joints() == 42);
    CHECK(q.data.dim(2) == 20);
    CHECK(k.data.dim(2) == 20);
    // trailing absent person slots are squeezed out of the views
    CHECK(rec.formats.at("kinectv2").dim(3) == 2);
    CHECK(q.data.dim(3) == 1);

    Rng rng2(3);
    const auto [qq, kk] = make_positive_pair(rec, {"kinectv2", "kinectv2"}, Stream::kJoint, 20,
                                             AugmentationConfig::disabled(), reg, rng2);
    CHECK(qq.data == kk.data);  // identity views when augmentation is off

    Rng rng3(3);
    CHECK_THROWS_AS(
        make_positive_pair(rec, {"kinectv2", "nosuch"}, Stream::kJoint, 20, aug, reg, rng3),
        error);
}

TEST_CASE("pretrain options closed forms") {
    PretrainOptions opt;
    opt.formats = {"a", "b"};
    opt.batch_size = 32;
    CHECK(opt.format_pairs().size() == 2);
    CHECK(opt.iterations_per_epoch(60) == 4);  // ceil(60 * 2 / 32)

    opt.formats = {"a"};
    CHECK(opt.format_pairs().size() == 1);
    CHECK(opt.format_pairs()[0].first == opt.format_pairs()[0].second);
    CHECK(opt.iterations_per_epoch(60) == 2);  // ceil(60 / 32): half the two-format count

    opt.formats = {"a", "b", "c"};
    CHECK(opt.format_pairs().size() == 6);

    opt.lr = 0.1;
    opt.lr_drop_epoch = 250;
    opt.lr_drop_factor = 0.1;
    CHECK(opt.lr_at_epoch(1) == 0.1);
    CHECK(opt.lr_at_epoch(249) == 0.1);
    CHECK(opt.lr_at_epoch(250) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(opt.lr_at_epoch(300) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("pretrain_run: smoke, determinism, checkpoint round trip") {
    const auto reg = builtin_registry();
    const auto records = generate_synthetic_dataset(2, 3, reg, 13);

    PretrainOptions opt;
    opt.formats = {"kinectv2", "smplx"};
    opt.frames = 12;
    opt.model = tiny_model();
    opt.epochs = 2;
    opt.batch_size = 4;
    opt.lr = 0.05;
    opt.lr_drop_epoch = 2;
    opt.bank_size = 64;
    opt.seed = 17;

    const auto dir_a = temp_dir("run_a");
    const auto dir_b = temp_dir("run_b");
    const auto res_a = pretrain_run(records, reg, opt, dir_a / "ckpt.msck", dir_a / "log.jsonl");
    const auto res_b = pretrain_run(records, reg, opt, dir_b / "ckpt.msck", dir_b / "log.jsonl");

    const int iters = opt.iterations_per_epoch(static_cast<int>(records.size()));
    CHECK(iters == 3);  // ceil(6 * 2 / 4)
    REQUIRE(res_a.history.size() == static_cast<std::size_t>(2 * iters));
    for (const auto& e : res_a.history) {
        CHECK(std::isfinite(e.loss));
        CHECK(e.loss >= 0.0);
    }
    CHECK(res_a.history.back().lr == doctest::Approx(0.005).epsilon(1e-12));

    // identical seeds reproduce identical loss histories and checkpoint bytes
    REQUIRE(res_b.history.size() == res_a.history.size());
    for (std::size_t i = 0; i < res_a.history.size(); ++i)
        CHECK(res_a.history[i].loss == res_b.history[i].loss);
    std::ifstream fa(dir_a / "ckpt.msck", std::ios::binary);
    std::ifstream fb(dir_b / "ckpt.msck", std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(fa)),
                              std::istreambuf_iterator<char>());
    const std::string bytes_b((std::istreambuf_iterator<char>(fb)),
                              std::istreambuf_iterator<char>());
    CHECK(bytes_a == bytes_b);

    // log lines parse and count matches
    std::ifstream log(dir_a / "log.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(log, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 2 * iters);

    // checkpoint round trip
    auto ckpt = load_checkpoint(dir_a / "ckpt.msck");
    CHECK(ckpt.formats == opt.formats);
    CHECK(ckpt.padded_joints == 43);
    CHECK(ckpt.step == 2 * iters);
    CHECK(ckpt.bank->occupancy() == std::min(2 * iters * opt.batch_size, opt.bank_size));
    const auto reg2 = ckpt.registry();
    CHECK(reg2.v_max() == 43);
    CHECK(reg2.get("kinectv2").joint_count == 25);

    // loaded encoder reproduces embeddings up to float32 storage rounding
    Rng rng(4);
    const auto& kinect = reg.get("kinectv2");
    Tensor raw({3, 25, 12, 1});
    for (std::int64_t i = 0; i < raw.numel(); ++i) raw.flat(i) = rng.uniform(-1, 1);
    const auto seq = pad_to_unified(raw, "kinectv2", reg);
    const auto adj = build_adjacency_set(kinect, 43);

    auto ckpt2 = load_checkpoint(dir_a / "ckpt.msck");
    const auto out1 = ckpt.query->forward(make_batch({&seq}), adj, Mode::kEval);
    const auto out2 = ckpt2.query->forward(make_batch({&seq}), adj, Mode::kEval);
    for (int j = 0; j < opt.model.embedding_dim; ++j)
        CHECK(out1.embedding(0, j) == out2.embedding(0, j));

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("pretrain_run results are invariant to the worker count") {
    const auto reg = builtin_registry();
    const auto records = generate_synthetic_dataset(2, 2, reg, 41);
    PretrainOptions opt;
    opt.formats = {"kinectv2", "smplx"};
    opt.frames = 10;
    opt.model = tiny_model();
    opt.epochs = 1;
    opt.batch_size = 4;
    opt.bank_size = 32;
    opt.seed = 5;

    const auto dir = temp_dir("workers");
    opt.workers = 0;
    const auto serial = pretrain_run(records, reg, opt, dir / "s.msck", dir / "s.jsonl");
    opt.workers = 2;
    const auto threaded = pretrain_run(records, reg, opt, dir / "t.msck", dir / "t.jsonl");
    REQUIRE(serial.history.size() == threaded.history.size());
    for (std::size_t i = 0; i < serial.history.size(); ++i)
        CHECK(serial.history[i].loss == threaded.history[i].loss);
    fs::remove_all(dir);
}

TEST_CASE("pretrain_run rejects records with missing formats") {
    const auto reg = builtin_registry();
    auto records = generate_synthetic_dataset(2, 2, reg, 3);
    records[1].formats.erase("smplx");
    PretrainOptions opt;
    opt.formats = {"kinectv2", "smplx"};
    opt.model = tiny_model();
    opt.epochs = 1;
    const auto dir = temp_dir("missing");
    CHECK_THROWS_AS(pretrain_run(records, reg, opt, dir / "c.msck", dir / "l.jsonl"),
                    config_error);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects corrupted archives") {
    const auto dir = temp_dir("ckpt_bad");
    const auto path = dir / "bad.msck";
    {
        std::ofstream f(path, std::ios::binary);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write("MSCK\x01\x00\x00", 8);  // truncated
    }
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
    fs::remove_all(dir);
}

}  // TEST_SUITE
