#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msclr/dataio.hpp"
#include "msclr/evalkit.hpp"
#include "msclr/network.hpp"
#include "msclr/pretrain.hpp"

namespace msclr {

// Flat key = value configuration with [sections]. Flags and --set overrides
// funnel through apply_override with dotted keys ("pretrain.epochs").
struct RunConfig {
    std::string preset = "desk";  // "desk" | "paper"

    // [data]
    std::string dataset;
    std::vector<std::string> formats{"kinectv2", "smplx"};
    std::string stream = "joint";
    int frames = 50;
    int workers = 0;

    // [augment]
    AugmentationConfig augment;
    std::uint64_t augment_seed = 1;

    // [model]
    STGCNConfig model;

    // [pretrain]
    int pretrain_epochs = 50;
    int pretrain_batch = 32;
    double pretrain_lr = 0.1;
    int pretrain_lr_drop_epoch = 40;
    double pretrain_lr_drop_factor = 0.1;
    double sgd_momentum = 0.9;
    double weight_decay = 1e-4;
    double temperature = 0.07;
    double ema_momentum = 0.999;
    int bank_size = 8192;
    std::uint64_t pretrain_seed = 7;

    // [eval]
    int eval_epochs = 20;
    int eval_batch = 32;
    double eval_lr = 0.1;
    int eval_lr_drop_epoch = 16;
    double eval_lr_drop_factor = 0.1;
    std::vector<double> fusion_weights{0.6, 0.6, 0.4};
    std::string ensemble_order = "formats_then_streams";
    std::uint64_t eval_seed = 11;

    // [output]
    std::string output_dir = "runs/out";

    static RunConfig make_preset(const std::string& name);
    void validate(const ConventionRegistry& registry) const;

    PretrainOptions pretrain_options() const;
    EvalSchedule eval_schedule() const;

    // full protocol constants as a JSON document (used by the dry-run dump
    // and echoed into artifacts)
    std::string schedule_json() const;
};

// Environment variable naming the dataset root; relative dataset paths
// resolve against it when set.
inline constexpr const char* kDataRootEnv = "MSCLR_DATA_ROOT";

std::filesystem::path resolve_dataset_path(const std::string& dataset);

RunConfig load_run_config(const std::filesystem::path& path);
void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

}  // namespace msclr
