#include "brainstrip/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "brainstrip/metrics.hpp"
#include "brainstrip/rng.hpp"

namespace brainstrip {

using autodiff::NamedTensor;
using autodiff::Tensor;

const char* input_mode_name(InputMode mode) {
    switch (mode) {
        case InputMode::T1Gd: return "t1gd";
        case InputMode::Flair: return "flair";
        case InputMode::Both: return "both";
    }
    return "both";
}

InputMode parse_input_mode(const std::string& name) {
    if (name == "t1gd") return InputMode::T1Gd;
    if (name == "flair") return InputMode::Flair;
    if (name == "both") return InputMode::Both;
    throw ValueError("unknown input_mode: " + name);
}

void TrainConfig::validate() const {
    if (max_iter < 1) throw ValueError("config: max_iter must be >= 1");
    if (save_every_n < 1 || save_every_n > max_iter)
        throw ValueError("config: save_every_n must lie in [1, max_iter]");
    if (batch_size < 1) throw ValueError("config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ValueError("config: lr must be positive");
    if (samples_per_volume != 1)
        throw ValueError("config: only samples_per_volume=1 is supported");
    const std::size_t want = input_mode == InputMode::Both ? 2 : 1;
    if (network.in_channels != want)
        throw ValueError("config: network in_channels inconsistent with input_mode");
    network.validate();
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::size_t> parse_size_list(const std::string& raw, const char* key) {
    std::string s = trim(raw);
    if (!s.empty() && s.front() == '(') s = s.substr(1);
    if (!s.empty() && s.back() == ')') s.pop_back();
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        std::size_t pos = 0;
        const long long v = std::stoll(tok, &pos);
        if (pos != tok.size() || v < 0)
            throw ValueError(std::string("config: bad value for ") + key);
        out.push_back(static_cast<std::size_t>(v));
    }
    if (out.empty()) throw ValueError(std::string("config: empty value for ") + key);
    return out;
}

template <std::size_t N>
std::array<std::size_t, N> parse_fixed_list(const std::string& raw, const char* key) {
    const auto v = parse_size_list(raw, key);
    if (v.size() != N)
        throw ValueError(std::string("config: ") + key + " needs " +
                         std::to_string(N) + " comma-separated values");
    std::array<std::size_t, N> out{};
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config: expected key=value, got: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "max_iter") {
            cfg.max_iter = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "save_every_n") {
            cfg.save_every_n = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "batch_size") {
            cfg.batch_size = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "lr" || key == "learning_rate") {
            cfg.learning_rate = std::stod(value);
        } else if (key == "seed") {
            cfg.seed = std::stoull(value);
        } else if (key == "samples_per_volume") {
            cfg.samples_per_volume = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "input_mode") {
            cfg.input_mode = parse_input_mode(value);
        } else if (key == "num_classes") {
            cfg.network.num_classes = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "spatial_window_size") {
            const auto sizes = parse_size_list(value, "spatial_window_size");
            for (std::size_t s : sizes)
                if (s != sizes[0])
                    throw ValueError("config: spatial_window_size must be cubic");
            cfg.network.input_window = sizes[0];
        } else if (key == "growth") {
            cfg.network.stack_growth = parse_fixed_list<3>(value, "growth");
        } else if (key == "units_per_stack") {
            cfg.network.units_per_stack = parse_fixed_list<3>(value, "units_per_stack");
        } else {
            throw ValueError("config: unknown key: " + key);
        }
    }
    cfg.network.in_channels = cfg.input_mode == InputMode::Both ? 2 : 1;
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

std::string serialize_train_config(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "max_iter=" << cfg.max_iter << "\n";
    out << "save_every_n=" << cfg.save_every_n << "\n";
    out << "batch_size=" << cfg.batch_size << "\n";
    char lr[32];
    std::snprintf(lr, sizeof(lr), "%.17g", cfg.learning_rate);
    out << "lr=" << lr << "\n";
    out << "samples_per_volume=" << cfg.samples_per_volume << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "input_mode=" << input_mode_name(cfg.input_mode) << "\n";
    out << "spatial_window_size=" << cfg.network.input_window << "\n";
    out << "num_classes=" << cfg.network.num_classes << "\n";
    out << "growth=" << cfg.network.stack_growth[0] << ","
        << cfg.network.stack_growth[1] << "," << cfg.network.stack_growth[2] << "\n";
    out << "units_per_stack=" << cfg.network.units_per_stack[0] << ","
        << cfg.network.units_per_stack[1] << ","
        << cfg.network.units_per_stack[2] << "\n";
    return out.str();
}

namespace {

std::string serialize_network_record(const DenseVnetConfig& net, InputMode mode) {
    std::ostringstream out;
    out << "in_channels=" << net.in_channels << "\n";
    out << "num_classes=" << net.num_classes << "\n";
    out << "growth=" << net.stack_growth[0] << "," << net.stack_growth[1] << ","
        << net.stack_growth[2] << "\n";
    out << "units_per_stack=" << net.units_per_stack[0] << ","
        << net.units_per_stack[1] << "," << net.units_per_stack[2] << "\n";
    out << "input_window=" << net.input_window << "\n";
    out << "input_mode=" << input_mode_name(mode) << "\n";
    return out.str();
}

void parse_network_record(const std::string& text, DenseVnetConfig& net,
                          InputMode& mode) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("checkpoint config record: bad line: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "in_channels")
            net.in_channels = std::stoull(value);
        else if (key == "num_classes")
            net.num_classes = std::stoull(value);
        else if (key == "growth")
            net.stack_growth = parse_fixed_list<3>(value, "growth");
        else if (key == "units_per_stack")
            net.units_per_stack = parse_fixed_list<3>(value, "units_per_stack");
        else if (key == "input_window")
            net.input_window = std::stoull(value);
        else if (key == "input_mode")
            mode = parse_input_mode(value);
        else
            throw FormatError("checkpoint config record: unknown key: " + key);
    }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::vector<NamedTensor> entries;
    entries.push_back({"meta/iteration", {}, {static_cast<double>(ckpt.iteration)}});
    entries.push_back({"meta/adam_step", {}, {static_cast<double>(ckpt.adam_step)}});
    for (const NamedTensor& p : ckpt.parameters)
        entries.push_back({"param/" + p.name, p.shape, p.values});
    for (const NamedTensor& p : ckpt.adam_m)
        entries.push_back({"adam/m/" + p.name, p.shape, p.values});
    for (const NamedTensor& p : ckpt.adam_v)
        entries.push_back({"adam/v/" + p.name, p.shape, p.values});

    const std::string record = serialize_network_record(ckpt.config, ckpt.input_mode);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path);
        autodiff::save_tensor_container(out, entries);
        const std::uint64_t len = record.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(record.data(), static_cast<std::streamsize>(record.size()));
        if (!out) throw IoError("checkpoint write failed: " + path);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    const std::vector<NamedTensor> entries = autodiff::load_tensor_container(in);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in) throw FormatError("checkpoint truncated before config record");
    std::string record(len, '\0');
    in.read(record.data(), static_cast<std::streamsize>(len));
    if (!in) throw FormatError("checkpoint truncated in config record");

    Checkpoint ckpt;
    parse_network_record(record, ckpt.config, ckpt.input_mode);
    for (const NamedTensor& e : entries) {
        if (e.name == "meta/iteration")
            ckpt.iteration = static_cast<std::size_t>(e.values.at(0));
        else if (e.name == "meta/adam_step")
            ckpt.adam_step = static_cast<std::size_t>(e.values.at(0));
        else if (e.name.starts_with("param/"))
            ckpt.parameters.push_back({e.name.substr(6), e.shape, e.values});
        else if (e.name.starts_with("adam/m/"))
            ckpt.adam_m.push_back({e.name.substr(7), e.shape, e.values});
        else if (e.name.starts_with("adam/v/"))
            ckpt.adam_v.push_back({e.name.substr(7), e.shape, e.values});
        else
            throw FormatError("checkpoint: unexpected entry: " + e.name);
    }
    return ckpt;
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
    Network net = build_dense_vnet(ckpt.config, 0);
    net.load_parameter_values(ckpt.parameters);
    return net;
}

CohortSplit split_dataset(const std::vector<std::string>& cohort,
                          double train_fraction, double validation_fraction,
                          double test_fraction, std::uint64_t seed) {
    if (cohort.empty()) throw ValueError("split_dataset: empty cohort");
    const double sum = train_fraction + validation_fraction + test_fraction;
    if (std::abs(sum - 1.0) > 1e-9)
        throw ValueError("split_dataset: fractions must sum to 1");

    std::vector<std::string> shuffled = cohort;
    Rng rng(seed);
    for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);

    const auto n = static_cast<double>(shuffled.size());
    const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * n));
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
    if (n_val + n_test > shuffled.size())
        throw ValueError("split_dataset: rounded fractions exceed cohort size");
    const std::size_t n_train = shuffled.size() - n_val - n_test;

    CohortSplit split;
    split.train.assign(shuffled.begin(), shuffled.begin() + n_train);
    split.validation.assign(shuffled.begin() + n_train,
                            shuffled.begin() + n_train + n_val);
    split.test.assign(shuffled.begin() + n_train + n_val, shuffled.end());
    return split;
}

namespace {

struct PreparedCase {
    std::vector<double> input;  // [C, w, w, w] tensor block
    std::vector<double> label;  // [1, w, w, w] tensor block
};

std::vector<const Volume3D*> case_channels(const TrainingCase& c, InputMode mode) {
    std::vector<const Volume3D*> channels;
    if (mode == InputMode::T1Gd || mode == InputMode::Both) {
        if (!c.t1gd) throw ValueError("case " + c.case_id + ": missing t1gd channel");
        channels.push_back(&*c.t1gd);
    }
    if (mode == InputMode::Flair || mode == InputMode::Both) {
        if (!c.flair) throw ValueError("case " + c.case_id + ": missing flair channel");
        channels.push_back(&*c.flair);
    }
    return channels;
}

PreparedCase prepare_case(const TrainingCase& c, InputMode mode,
                          const DenseVnetConfig& net, bool need_label) {
    const std::size_t w = net.input_window;
    const Dims window{w, w, w};
    PreparedCase out;
    for (const Volume3D* ch : case_channels(c, mode)) {
        const Volume3D r = resample_to_grid(whiten(*ch), window, Interp::Trilinear);
        const auto block = volume_to_tensor_block(r);
        out.input.insert(out.input.end(), block.begin(), block.end());
    }
    if (need_label) {
        if (!c.label) throw ValueError("case " + c.case_id + ": missing label mask");
        if (!is_binary_mask(*c.label))
            throw ValueError("case " + c.case_id + ": label must be a binary mask");
        const Volume3D r = resample_to_grid(*c.label, window, Interp::Nearest);
        out.label = volume_to_tensor_block(r);
    }
    return out;
}

double validation_dice_loss(const Network& net,
                            const std::vector<PreparedCase>& prepared) {
    const std::size_t w = net.config().input_window;
    const std::size_t c = net.config().in_channels;
    double total = 0.0;
    for (const PreparedCase& pc : prepared) {
        const Tensor x = Tensor::from_values({1, c, w, w, w}, pc.input);
        const Tensor g = Tensor::from_values({1, 1, w, w, w}, pc.label);
        total += autodiff::dice_loss(net.forward(x), g).item();
    }
    return total / static_cast<double>(prepared.size());
}

Checkpoint snapshot(std::size_t iteration, const TrainConfig& cfg,
                    const Network& net,
                    const std::vector<autodiff::AdamState>& states) {
    Checkpoint ckpt;
    ckpt.iteration = iteration;
    ckpt.config = net.config();
    ckpt.input_mode = cfg.input_mode;
    ckpt.adam_step = states.empty() ? 0 : states[0].step;
    for (std::size_t i = 0; i < net.parameters().size(); ++i) {
        const auto& [name, t] = net.parameters()[i];
        ckpt.parameters.push_back({name, t.shape(), t.values()});
        ckpt.adam_m.push_back({name, t.shape(), states[i].m});
        ckpt.adam_v.push_back({name, t.shape(), states[i].v});
    }
    return ckpt;
}

}  // namespace

TrainResult train(const std::vector<TrainingCase>& dataset, Network net,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw ValueError("train: empty dataset");
    if (net.config().in_channels != cfg.network.in_channels)
        throw ValueError("train: network channels inconsistent with config");

    const std::size_t w = net.config().input_window;
    const std::size_t n = dataset.size();
    std::vector<PreparedCase> prepared;
    prepared.reserve(n);
    for (const TrainingCase& c : dataset)
        prepared.push_back(prepare_case(c, cfg.input_mode, net.config(), true));

    auto& params = net.parameters();
    std::vector<autodiff::AdamState> states(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        states[i].m.assign(params[i].second.size(), 0.0);
        states[i].v.assign(params[i].second.size(), 0.0);
    }
    const autodiff::AdamConfig adam_cfg{cfg.learning_rate, 0.9, 0.999, 1e-8};

    // Deterministic sampler: seeded reshuffled passes when the dataset is at
    // least one batch, uniform draws with replacement otherwise.
    Rng sampler(mix_seed(cfg.seed, 0x5a3e));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::size_t pos = n;  // force a shuffle on first use
    auto next_batch = [&]() {
        std::vector<std::size_t> batch(cfg.batch_size);
        if (n >= cfg.batch_size) {
            for (std::size_t k = 0; k < cfg.batch_size; ++k) {
                if (pos >= n) {
                    for (std::size_t i = order.size(); i > 1; --i)
                        std::swap(order[i - 1], order[sampler.uniform_index(i)]);
                    pos = 0;
                }
                batch[k] = order[pos++];
            }
        } else {
            for (std::size_t k = 0; k < cfg.batch_size; ++k)
                batch[k] = sampler.uniform_index(n);
        }
        return batch;
    };

    TrainResult result{std::move(net), {}, {}};
    const std::size_t vox = w * w * w;
    const std::size_t cch = cfg.network.in_channels;

    for (std::size_t step = 1; step <= cfg.max_iter; ++step) {
        const std::vector<std::size_t> batch = next_batch();
        std::vector<double> xdata(cfg.batch_size * cch * vox);
        std::vector<double> gdata(cfg.batch_size * vox);
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const PreparedCase& pc = prepared[batch[k]];
            std::memcpy(&xdata[k * cch * vox], pc.input.data(),
                        cch * vox * sizeof(double));
            std::memcpy(&gdata[k * vox], pc.label.data(), vox * sizeof(double));
        }
        const Tensor x =
            Tensor::from_values({cfg.batch_size, cch, w, w, w}, std::move(xdata));
        const Tensor g =
            Tensor::from_values({cfg.batch_size, 1, w, w, w}, std::move(gdata));

        const Tensor loss = autodiff::dice_loss(result.network.forward(x), g);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw TrainingError("non-finite loss at step " + std::to_string(step));

        for (auto& [name, t] : result.network.parameters()) t.zero_grad();
        autodiff::backward(loss);
        for (std::size_t i = 0; i < result.network.parameters().size(); ++i) {
            Tensor& t = result.network.parameters()[i].second;
            autodiff::adam_step(t.values(), t.grad(), states[i], adam_cfg);
        }
        result.loss_trace.push_back(loss_value);

        if (step % cfg.save_every_n == 0 || step == cfg.max_iter) {
            if (result.checkpoints.empty() ||
                result.checkpoints.back().iteration != step)
                result.checkpoints.push_back(
                    snapshot(step, cfg, result.network, states));
        }
    }
    return result;
}

std::size_t select_checkpoint(const std::vector<Checkpoint>& checkpoints,
                              const std::vector<TrainingCase>& validation,
                              const TrainConfig& cfg) {
    if (checkpoints.empty()) throw ValueError("select_checkpoint: no checkpoints");
    if (validation.empty()) throw ValueError("select_checkpoint: empty validation set");

    std::vector<PreparedCase> prepared;
    prepared.reserve(validation.size());
    for (const TrainingCase& c : validation)
        prepared.push_back(
            prepare_case(c, cfg.input_mode, checkpoints.front().config, true));

    std::size_t best = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
        const Network net = network_from_checkpoint(checkpoints[i]);
        const double loss = validation_dice_loss(net, prepared);
        if (loss < best_loss) {
            best_loss = loss;
            best = i;
        }
    }
    return best;
}

std::vector<EfficiencyRow> run_data_efficiency(
    const std::vector<TrainingCase>& dataset,
    const std::vector<TrainingCase>& validation,
    const std::vector<std::size_t>& sizes, const TrainConfig& cfg,
    const std::vector<TrainingCase>& eval_set) {
    if (sizes.empty()) throw ValueError("run_data_efficiency: no sizes");
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] >= sizes[i - 1])
            throw ValueError("run_data_efficiency: sizes must be strictly descending");
    if (sizes.front() > dataset.size())
        throw ValueError("run_data_efficiency: size exceeds dataset");
    if (eval_set.empty()) throw ValueError("run_data_efficiency: empty eval set");

    // One seeded shuffle; each subsample is a prefix, so smaller subsets nest
    // inside larger ones.
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(cfg.seed, 0xeff1));
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_index(i)]);

    std::vector<EfficiencyRow> rows;
    for (const std::size_t size : sizes) {
        std::vector<TrainingCase> subset;
        subset.reserve(size);
        for (std::size_t i = 0; i < size; ++i) subset.push_back(dataset[order[i]]);

        Network net = build_dense_vnet(cfg.network, cfg.seed);
        TrainResult result = train(subset, std::move(net), cfg);
        const std::size_t best = select_checkpoint(result.checkpoints, validation, cfg);
        const Network chosen = network_from_checkpoint(result.checkpoints[best]);

        std::vector<double> dices;
        for (const TrainingCase& c : eval_set) {
            if (!c.label) throw ValueError("eval case " + c.case_id + ": missing label");
            const auto channels = case_channels(c, cfg.input_mode);
            const Volume3D pred =
                channels.size() == 2
                    ? predict_mask(chosen, *channels[0], channels[1])
                    : predict_mask(chosen, *channels[0], nullptr);
            const SegMetrics m = segmentation_metrics(confusion_counts(pred, *c.label));
            if (m.dice) dices.push_back(*m.dice);
        }
        EfficiencyRow row;
        row.train_size = size;
        if (!dices.empty()) {
            double mean = 0.0;
            for (double v : dices) mean += v;
            mean /= static_cast<double>(dices.size());
            double ss = 0.0;
            for (double v : dices) ss += (v - mean) * (v - mean);
            row.mean_dice = mean;
            row.std_dice = dices.size() > 1
                               ? std::sqrt(ss / static_cast<double>(dices.size() - 1))
                               : 0.0;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace brainstrip
