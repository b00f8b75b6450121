#include "msclr/runconfig.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "msclr/errors.hpp"

namespace msclr {

using json = nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',' || c == ' ' || c == '\t') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw config_error("bad boolean for " + key + ": " + v);
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        return std::stoi(v);
    } catch (const std::exception&) {
        throw config_error("bad integer for " + key + ": " + v);
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        return std::stod(v);
    } catch (const std::exception&) {
        throw config_error("bad number for " + key + ": " + v);
    }
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw config_error("bad seed for " + key + ": " + v);
    }
}

}  // namespace

RunConfig RunConfig::make_preset(const std::string& name) {
    RunConfig cfg;
    if (name == "desk") {
        cfg.preset = "desk";
        // defaults above are the desk preset
    } else if (name == "paper") {
        cfg.preset = "paper";
        cfg.model = STGCNConfig::full_scale();
        cfg.pretrain_epochs = 300;
        cfg.pretrain_batch = 128;
        cfg.pretrain_lr = 0.1;
        cfg.pretrain_lr_drop_epoch = 250;
        cfg.pretrain_lr_drop_factor = 0.1;
        cfg.bank_size = 32768;
        cfg.eval_epochs = 100;
        cfg.eval_batch = 128;
        cfg.eval_lr = 3.0;
        cfg.eval_lr_drop_epoch = 80;
        cfg.eval_lr_drop_factor = 0.1;
    } else {
        throw config_error("unknown preset: " + name);
    }
    return cfg;
}

void RunConfig::validate(const ConventionRegistry& registry) const {
    if (formats.empty()) throw config_error("config: formats list is empty");
    for (const auto& f : formats)
        if (!registry.contains(f)) throw config_error("config: unknown convention " + f);
    stream_from_string(stream);
    if (frames < 1) throw config_error("config: frames must be >= 1");
    if (workers < 0) throw config_error("config: workers must be >= 0");
    augment.validate();
    model.validate();
    pretrain_options().validate();
    if (eval_epochs < 1 || eval_batch < 1 || !(eval_lr > 0.0))
        throw config_error("config: bad eval schedule");
    if (fusion_weights.empty()) throw config_error("config: fusion weights empty");
    ensemble_order_from_string(ensemble_order);
}

PretrainOptions RunConfig::pretrain_options() const {
    PretrainOptions opt;
    opt.formats = formats;
    opt.stream = stream_from_string(stream);
    opt.frames = frames;
    opt.augment = augment;
    opt.model = model;
    opt.epochs = pretrain_epochs;
    opt.batch_size = pretrain_batch;
    opt.lr = pretrain_lr;
    opt.lr_drop_epoch = pretrain_lr_drop_epoch;
    opt.lr_drop_factor = pretrain_lr_drop_factor;
    opt.sgd_momentum = sgd_momentum;
    opt.weight_decay = weight_decay;
    opt.temperature = temperature;
    opt.ema_momentum = ema_momentum;
    opt.bank_size = bank_size;
    opt.seed = pretrain_seed;
    opt.workers = workers;
    return opt;
}

EvalSchedule RunConfig::eval_schedule() const {
    EvalSchedule s;
    s.epochs = eval_epochs;
    s.batch_size = eval_batch;
    s.lr = eval_lr;
    s.lr_drop_epoch = eval_lr_drop_epoch;
    s.lr_drop_factor = eval_lr_drop_factor;
    s.momentum = sgd_momentum;
    s.seed = eval_seed;
    return s;
}

std::string RunConfig::schedule_json() const {
    json j;
    j["preset"] = preset;
    j["data"] = {{"frames", frames}, {"formats", formats}, {"stream", stream}};
    j["pretrain"] = {{"epochs", pretrain_epochs},
                     {"batch_size", pretrain_batch},
                     {"optimizer", "sgd"},
                     {"momentum", sgd_momentum},
                     {"weight_decay", weight_decay},
                     {"lr", pretrain_lr},
                     {"lr_schedule", json::array({json{{"epoch", pretrain_lr_drop_epoch},
                                                       {"factor", pretrain_lr_drop_factor},
                                                       {"lr", pretrain_lr * pretrain_lr_drop_factor}}})},
                     {"temperature", temperature},
                     {"ema_momentum", ema_momentum},
                     {"bank_size", bank_size}};
    j["linear_eval"] = {{"epochs", eval_epochs},
                        {"batch_size", eval_batch},
                        {"lr", eval_lr},
                        {"lr_schedule", json::array({json{{"epoch", eval_lr_drop_epoch},
                                                          {"factor", eval_lr_drop_factor},
                                                          {"lr", eval_lr * eval_lr_drop_factor}}})}};
    j["fusion_weights"] = fusion_weights;
    j["ensemble_order"] = ensemble_order;
    return j.dump(2) + "\n";
}

std::filesystem::path resolve_dataset_path(const std::string& dataset) {
    if (dataset.empty()) throw config_error("no dataset configured");
    std::filesystem::path p(dataset);
    if (p.is_relative()) {
        const char* root = std::getenv(kDataRootEnv);
        if (root != nullptr && *root != '\0') p = std::filesystem::path(root) / p;
    }
    // accept either the manifest itself or its directory
    if (std::filesystem::is_directory(p)) p /= "manifest.json";
    return p;
}

void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
    const std::string key = trim(dotted_key);
    const std::string v = trim(value);
    if (key == "preset") {
        // preset resets every schedule field; callers apply it first
        cfg = RunConfig::make_preset(v);
    } else if (key == "data.dataset") {
        cfg.dataset = v;
    } else if (key == "data.formats") {
        cfg.formats = split_list(v);
    } else if (key == "data.stream") {
        cfg.stream = v;
    } else if (key == "data.frames") {
        cfg.frames = parse_int(v, key);
    } else if (key == "data.workers") {
        cfg.workers = parse_int(v, key);
    } else if (key == "augment.shear_amplitude") {
        cfg.augment.shear_amplitude = parse_double(v, key);
    } else if (key == "augment.crop_min") {
        cfg.augment.crop_min_ratio = parse_double(v, key);
    } else if (key == "augment.crop_max") {
        cfg.augment.crop_max_ratio = parse_double(v, key);
    } else if (key == "augment.flip_probability") {
        cfg.augment.flip_probability = parse_double(v, key);
    } else if (key == "augment.noise_sigma") {
        cfg.augment.noise_sigma = parse_double(v, key);
    } else if (key == "augment.blur_sigma") {
        cfg.augment.blur_sigma = parse_double(v, key);
    } else if (key == "augment.enable_shear") {
        cfg.augment.enable_shear = parse_bool(v, key);
    } else if (key == "augment.enable_crop") {
        cfg.augment.enable_crop = parse_bool(v, key);
    } else if (key == "augment.enable_flip") {
        cfg.augment.enable_flip = parse_bool(v, key);
    } else if (key == "augment.enable_noise") {
        cfg.augment.enable_noise = parse_bool(v, key);
    } else if (key == "augment.enable_blur") {
        cfg.augment.enable_blur = parse_bool(v, key);
    } else if (key == "augment.seed") {
        cfg.augment_seed = parse_u64(v, key);
    } else if (key == "model.widths") {
        cfg.model.block_channels.clear();
        for (const auto& tok : split_list(v))
            cfg.model.block_channels.push_back(parse_int(tok, key));
    } else if (key == "model.temporal_kernel") {
        cfg.model.temporal_kernel = parse_int(v, key);
    } else if (key == "model.embedding_dim") {
        cfg.model.embedding_dim = parse_int(v, key);
    } else if (key == "model.projection_dim") {
        cfg.model.projection_dim = parse_int(v, key);
    } else if (key == "model.edge_importance") {
        cfg.model.edge_importance = parse_bool(v, key);
    } else if (key == "model.dropout") {
        cfg.model.dropout = parse_double(v, key);
    } else if (key == "pretrain.epochs") {
        cfg.pretrain_epochs = parse_int(v, key);
    } else if (key == "pretrain.batch_size") {
        cfg.pretrain_batch = parse_int(v, key);
    } else if (key == "pretrain.lr") {
        cfg.pretrain_lr = parse_double(v, key);
    } else if (key == "pretrain.lr_drop_epoch") {
        cfg.pretrain_lr_drop_epoch = parse_int(v, key);
    } else if (key == "pretrain.lr_drop_factor") {
        cfg.pretrain_lr_drop_factor = parse_double(v, key);
    } else if (key == "pretrain.momentum") {
        cfg.sgd_momentum = parse_double(v, key);
    } else if (key == "pretrain.weight_decay") {
        cfg.weight_decay = parse_double(v, key);
    } else if (key == "pretrain.temperature") {
        cfg.temperature = parse_double(v, key);
    } else if (key == "pretrain.ema_momentum") {
        cfg.ema_momentum = parse_double(v, key);
    } else if (key == "pretrain.bank_size") {
        cfg.bank_size = parse_int(v, key);
    } else if (key == "pretrain.seed") {
        cfg.pretrain_seed = parse_u64(v, key);
    } else if (key == "eval.epochs") {
        cfg.eval_epochs = parse_int(v, key);
    } else if (key == "eval.batch_size") {
        cfg.eval_batch = parse_int(v, key);
    } else if (key == "eval.lr") {
        cfg.eval_lr = parse_double(v, key);
    } else if (key == "eval.lr_drop_epoch") {
        cfg.eval_lr_drop_epoch = parse_int(v, key);
    } else if (key == "eval.lr_drop_factor") {
        cfg.eval_lr_drop_factor = parse_double(v, key);
    } else if (key == "eval.fusion_weights") {
        cfg.fusion_weights.clear();
        for (const auto& tok : split_list(v)) cfg.fusion_weights.push_back(parse_double(tok, key));
    } else if (key == "eval.ensemble_order") {
        cfg.ensemble_order = v;
    } else if (key == "eval.seed") {
        cfg.eval_seed = parse_u64(v, key);
    } else if (key == "output.dir") {
        cfg.output_dir = v;
    } else {
        throw config_error("unknown config key: " + key);
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open config: " + path.string());

    std::vector<std::pair<std::string, std::string>> pairs;
    std::string preset_name = "desk";
    std::string section, line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw config_error("config line missing '=': " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const std::string dotted = section.empty() ? key : section + "." + key;
        if (dotted == "preset")
            preset_name = value;
        else
            pairs.emplace_back(dotted, value);
    }

    RunConfig cfg = RunConfig::make_preset(preset_name);
    for (const auto& [k, v] : pairs) apply_override(cfg, k, v);
    return cfg;
}

}  // namespace msclr
