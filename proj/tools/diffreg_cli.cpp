// diffreg command-line interface: synthetic benchmark generation,
// instance-specific registration, descriptor pretraining, evaluation and the
// penalty-barrier sweep. Exit codes: 0 ok, 1 bad arguments/files, 2 numerical
// abort.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "diffreg/eval.hpp"
#include "diffreg/grid.hpp"
#include "diffreg/io.hpp"
#include "diffreg/objective.hpp"
#include "diffreg/synth.hpp"

namespace fs = std::filesystem;
using namespace diffreg;

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

ScalarVolume load_volume(const std::string& path) {
    if (ends_with(path, ".nii")) return read_nifti(path).volume;
    if (ends_with(path, ".drv")) return read_raw(path);
    throw Error("unsupported volume format (expected .nii or .drv): '" + path + "'");
}

LabelVolume load_labels(const std::string& path) {
    if (ends_with(path, ".nii")) return read_nifti_labels(path);
    if (ends_with(path, ".drv")) {
        const ScalarVolume raw = read_raw(path);
        LabelVolume out(raw.shape);
        for (std::size_t i = 0; i < raw.size(); ++i)
            out.data[i] = static_cast<int>(std::lround(raw.data[i]));
        out.rebuild_labelset();
        return out;
    }
    throw Error("unsupported label format (expected .nii or .drv): '" + path + "'");
}

void normalize01(ScalarVolume& v) {
    double lo = 1e300, hi = -1e300;
    for (double x : v.data) {
        require(std::isfinite(x), "input volume contains non-finite intensities");
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (hi > lo)
        for (double& x : v.data) x = (x - lo) / (hi - lo);
    else
        for (double& x : v.data) x = 0.0;
}

std::vector<int> foreground_labels(const LabelVolume& labels) {
    std::vector<int> out;
    for (int l : labels.labelset)
        if (l != 0) out.push_back(l);
    return out;
}

struct RegisterConfig {
    LossConfig loss;
    FlowConfig flow;
    KernelSpec kernel;
    std::uint64_t seed = 0;
};

RegisterConfig parse_register_config(const std::string& path) {
    RegisterConfig out;
    if (path.empty()) return out;
    ConfigView cfg(parse_config_file(path));
    out.loss.metric = cfg.get_string("metric", out.loss.metric);
    out.loss.epochs = cfg.get_int("epochs", out.loss.epochs);
    out.loss.lr = cfg.get_double("lr", out.loss.lr);
    out.loss.lambda_J = cfg.get_double("lambda_J", out.loss.lambda_J);
    out.loss.lambda_grad = cfg.get_double("lambda_grad", out.loss.lambda_grad);
    out.loss.lambda_mag = cfg.get_double("lambda_mag", out.loss.lambda_mag);
    out.loss.epsilon = cfg.get_double("epsilon", out.loss.epsilon);
    out.loss.mind_radius = cfg.get_int("r", out.loss.mind_radius);
    out.loss.mind_dilation = cfg.get_int("d_r", out.loss.mind_dilation);
    out.loss.lmi_bins = cfg.get_int("bins", out.loss.lmi_bins);
    out.loss.lmi_patch_side = cfg.get_int("patch_side", out.loss.lmi_patch_side);
    out.loss.lmi_bandwidth = cfg.get_double("bandwidth", out.loss.lmi_bandwidth);
    out.flow.step = cfg.get_double("h", out.flow.step);
    out.flow.t0 = cfg.get_double("t0", out.flow.t0);
    out.flow.t1 = cfg.get_double("t1", out.flow.t1);
    out.flow.checkpoint_interval = cfg.get_int("checkpoint_interval", out.flow.checkpoint_interval);
    out.kernel.gamma = cfg.get_double("gamma", out.kernel.gamma);
    out.kernel.alpha = cfg.get_double("alpha", out.kernel.alpha);
    out.kernel.exponent = cfg.get_int("s", out.kernel.exponent);
    out.seed = cfg.get_u64("seed", out.seed);
    cfg.finish();
    return out;
}

SynthSpec parse_synth_spec(const std::string& path) {
    SynthSpec spec;
    ConfigView cfg(parse_config_file(path));
    spec.shape = cfg.get_shape("shape", spec.shape);
    spec.seed = cfg.get_u64("seed", spec.seed);
    spec.cases = cfg.get_int("cases", spec.cases);
    spec.warp_amplitude = cfg.get_double("warp_amplitude", spec.warp_amplitude);
    spec.warp_smoothness = cfg.get_double("warp_smoothness", spec.warp_smoothness);
    spec.pinch_strength = cfg.get_double("pinch_strength", spec.pinch_strength);
    spec.n_blobs = cfg.get_int("n_blobs", spec.n_blobs);
    spec.label_count = cfg.get_int("label_count", spec.label_count);
    spec.texture_amplitude = cfg.get_double("texture_amplitude", spec.texture_amplitude);
    spec.texture_scale = cfg.get_double("texture_scale", spec.texture_scale);
    spec.bezier_degree = cfg.get_int("bezier_degree", spec.bezier_degree);
    spec.invert_probability = cfg.get_double("invert_probability", spec.invert_probability);
    spec.remap = cfg.get_int("remap", spec.remap ? 1 : 0) != 0;
    cfg.finish();
    return spec;
}

ContrastiveConfig parse_contrastive_config(const std::string& path) {
    ContrastiveConfig out;
    if (path.empty()) return out;
    ConfigView cfg(parse_config_file(path));
    out.tau = cfg.get_double("tau", out.tau);
    out.sample_count = cfg.get_int("N_k", out.sample_count);
    out.invert_probability = cfg.get_double("p", out.invert_probability);
    out.bezier_degree = cfg.get_int("n", out.bezier_degree);
    out.lr = cfg.get_double("lr", out.lr);
    out.batch = cfg.get_int("batch", out.batch);
    out.iterations = cfg.get_int("iters", out.iterations);
    cfg.finish();
    return out;
}

// One row of the report CSV; endpoint-error columns stay empty without truth.
struct ReportRow {
    std::string case_id;
    std::string metric;
    double mean_disp = 0.0;
    double mean_dice = -1.0;  // negative: no labels
    double pct_neg_jac = 0.0;
    double epe_mean = -1.0;  // negative: no truth
    double epe_max = -1.0;
    std::map<int, double> per_label;
};

void write_report(const std::string& path, const ReportRow& row) {
    std::ostringstream out;
    out << "case,metric,mean_disp,mean_dice,pct_neg_jac,epe_mean,epe_max";
    for (const auto& [label, score] : row.per_label) out << ",dice_" << label;
    out << "\n";
    out << row.case_id << "," << row.metric << "," << format_double(row.mean_disp) << ",";
    if (row.mean_dice >= 0.0) out << format_double(row.mean_dice);
    out << "," << format_double(row.pct_neg_jac) << ",";
    if (row.epe_mean >= 0.0) out << format_double(row.epe_mean);
    out << ",";
    if (row.epe_max >= 0.0) out << format_double(row.epe_max);
    for (const auto& [label, score] : row.per_label) out << "," << format_double(score);
    out << "\n";
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open '" + path + "' for writing");
    f << out.str();
}

void write_loss_trace(const std::string& path, const std::vector<LossTraceRow>& trace) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open '" + path + "' for writing");
    f << "epoch,S,L_J,L_grad,L_mag,total\n";
    for (const auto& row : trace)
        f << row.epoch << "," << format_double(row.terms.similarity) << ","
          << format_double(row.terms.jacobian) << "," << format_double(row.terms.smoothness) << ","
          << format_double(row.terms.magnitude) << "," << format_double(row.total) << "\n";
}

int run_register(const std::string& fixed_path, const std::string& moving_path,
                 const std::string& labels_fixed_path, const std::string& labels_moving_path,
                 const std::string& metric_flag, const std::string& config_path,
                 const std::string& ckpt_path, std::int64_t seed_flag, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    RegisterConfig cfg = parse_register_config(config_path);
    if (!metric_flag.empty()) cfg.loss.metric = metric_flag;
    if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);

    ScalarVolume fixed = load_volume(fixed_path);
    ScalarVolume moving = load_volume(moving_path);
    normalize01(fixed);
    normalize01(moving);

    DescriptorNet descriptor(fixed.dims());
    DescriptorNet* descriptor_ptr = nullptr;
    if (cfg.loss.metric == "contrastive") {
        require(!ckpt_path.empty(), "the contrastive metric needs --descriptor-ckpt");
        descriptor.params() = load_params(ckpt_path);
        descriptor_ptr = &descriptor;
    }

    fs::create_directories(out_dir);
    const RegistrationResult result =
        register_pair(fixed, moving, cfg.loss, cfg.flow, cfg.kernel, cfg.seed, descriptor_ptr);

    write_raw_field(out_dir + "/phi", result.map);
    write_raw_field(out_dir + "/phi_inv", result.inverse_map);
    write_raw(out_dir + "/warped.drv", result.warped);
    write_loss_trace(out_dir + "/loss.csv", result.trace);
    write_slice_snapshot(out_dir + "/fixed.pgm", fixed, 1);
    write_slice_snapshot(out_dir + "/moving.pgm", moving, 1);
    write_slice_snapshot(out_dir + "/warped.pgm", result.warped, 1);

    ReportRow row;
    row.case_id = fs::path(out_dir).filename().string();
    row.metric = cfg.loss.metric;
    row.mean_disp = result.mean_displacement;
    row.pct_neg_jac = result.pct_neg_jac;

    if (!labels_fixed_path.empty() && !labels_moving_path.empty()) {
        const LabelVolume labels_fixed = load_labels(labels_fixed_path);
        const LabelVolume labels_moving = load_labels(labels_moving_path);
        const LabelVolume warped_labels = sample_nearest(labels_moving, result.map);
        ScalarVolume as_volume(warped_labels.shape);
        for (std::size_t i = 0; i < warped_labels.size(); ++i)
            as_volume.data[i] = warped_labels.data[i];
        write_raw(out_dir + "/warped_labels.drv", as_volume);
        const DiceResult d = dice(labels_fixed, warped_labels, foreground_labels(labels_fixed));
        row.mean_dice = d.mean;
        row.per_label = d.per_label;
    }
    write_report(out_dir + "/report.csv", row);

    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream timing(out_dir + "/timing.txt");
    timing << format_double(elapsed) << " s\n";

    std::cout << "registered " << fs::path(moving_path).filename().string() << " -> "
              << fs::path(fixed_path).filename().string() << " [" << cfg.loss.metric
              << "]: mean displacement " << format_double(result.mean_displacement)
              << " vox, %negJac " << format_double(result.pct_neg_jac) << ", final loss "
              << format_double(result.trace.empty() ? 0.0 : result.trace.back().total) << "\n";
    return 0;
}

int run_synth(const std::string& spec_path, const std::string& out_dir) {
    SynthSpec spec = parse_synth_spec(spec_path);
    fs::create_directories(out_dir);
    for (int k = 0; k < spec.cases; ++k) {
        SynthSpec case_spec = spec;
        case_spec.seed = spec.seed + static_cast<std::uint64_t>(k);
        const RegistrationCase c = make_pair(case_spec);
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03d", k);
        save_case(out_dir + "/" + name, c, case_spec);
        std::cout << name << ": seed " << case_spec.seed << "\n";
    }
    return 0;
}

int run_train_descriptor(const std::string& corpus_dir, const std::string& config_path,
                         const std::string& out_path) {
    const ContrastiveConfig cfg = parse_contrastive_config(config_path);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(corpus_dir)) {
        const std::string p = entry.path().string();
        if (ends_with(p, ".nii") || ends_with(p, ".drv")) files.push_back(p);
    }
    std::sort(files.begin(), files.end());
    require(!files.empty(), "no .nii or .drv volumes found in '" + corpus_dir + "'");
    std::vector<ScalarVolume> corpus;
    for (const auto& f : files) {
        ScalarVolume v = load_volume(f);
        normalize01(v);
        corpus.push_back(std::move(v));
    }
    std::vector<double> trace;
    const DescriptorNet net = train_descriptor(corpus, cfg, 0, &trace);
    save_params(net.params(), out_path);
    double tail = 0.0;
    const std::size_t window = std::min<std::size_t>(100, trace.size());
    for (std::size_t i = trace.size() - window; i < trace.size(); ++i) tail += trace[i];
    std::cout << "trained on " << corpus.size() << " volumes, " << cfg.iterations
              << " iterations; mean loss over last " << window << ": "
              << format_double(window ? tail / window : 0.0) << "\n";
    return 0;
}

int run_eval(const std::string& result_dir, const std::string& truth_dir, const std::string& out_csv) {
    const RegistrationCase truth = load_case(truth_dir);
    const int d = truth.moving.dims();
    const VectorField map = read_raw_field(result_dir + "/phi", d);

    ReportRow row;
    row.case_id = fs::path(result_dir).filename().string();
    row.metric = "eval";
    const VectorField id = identity_map(map.shape);
    double disp = 0.0;
    for (std::size_t i = 0; i < map.voxels(); ++i) {
        double sq = 0.0;
        for (int a = 0; a < d; ++a) {
            const double u = map.at(a, i) - id.at(a, i);
            sq += u * u;
        }
        disp += std::sqrt(sq);
    }
    row.mean_disp = disp / static_cast<double>(map.voxels());
    row.pct_neg_jac = neg_jac_ratio(map);
    const EndpointError epe = endpoint_error(map, truth.map_gt);
    row.epe_mean = epe.mean;
    row.epe_max = epe.max;
    const LabelVolume warped_labels = sample_nearest(truth.labels_moving, map);
    const DiceResult dr = dice(truth.labels_fixed, warped_labels, foreground_labels(truth.labels_fixed));
    row.mean_dice = dr.mean;
    row.per_label = dr.per_label;

    const std::string path = out_csv.empty() ? result_dir + "/eval.csv" : out_csv;
    write_report(path, row);
    std::cout << row.case_id << ": mean dice " << format_double(row.mean_dice) << ", %negJac "
              << format_double(row.pct_neg_jac) << ", EPE " << format_double(row.epe_mean)
              << " vox (max " << format_double(row.epe_max) << ")\n";
    return 0;
}

std::vector<double> read_csv_column(const std::string& path, const std::string& column) {
    std::ifstream in(path);
    require(in.good(), "cannot open '" + path + "'");
    std::string header;
    std::getline(in, header);
    std::vector<std::string> names;
    std::stringstream hs(header);
    std::string cell;
    while (std::getline(hs, cell, ',')) names.push_back(cell);
    int idx = -1;
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == column) idx = static_cast<int>(i);
    require(idx >= 0, "column '" + column + "' not found in '" + path + "'");
    std::vector<double> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        int k = 0;
        while (std::getline(ls, cell, ',')) {
            if (k == idx) out.push_back(std::stod(cell));
            ++k;
        }
    }
    return out;
}

int run_wilcoxon(const std::string& csv_a, const std::string& csv_b, const std::string& column) {
    const std::vector<double> a = read_csv_column(csv_a, column);
    const std::vector<double> b = read_csv_column(csv_b, column);
    require(a.size() == b.size(), "paired test needs equal row counts");
    const double p = wilcoxon_signed_rank(a, b);
    std::cout << "wilcoxon signed-rank (right-sided, " << column << ", n=" << a.size()
              << "): p = " << format_double(p) << "\n";
    std::cout << (p < 0.005 ? "significant at the max-p < 0.005 convention\n"
                            : "not significant at the max-p < 0.005 convention\n");
    return 0;
}

int run_sweep_eps(const std::string& case_dir, const std::string& values_csv,
                  const std::string& config_path, const std::string& out_path) {
    RegisterConfig cfg = parse_register_config(config_path);
    std::vector<double> values;
    std::stringstream vs(values_csv);
    std::string cell;
    while (std::getline(vs, cell, ',')) values.push_back(std::stod(cell));
    require(!values.empty(), "--values must list at least one epsilon");

    const RegistrationCase c = load_case(case_dir);
    const auto fg = foreground_labels(c.labels_fixed);

    std::ostringstream csv;
    csv << "epsilon,mean_dice,pct_neg_jac\n";
    for (double eps : values) {
        LossConfig lcfg = cfg.loss;
        lcfg.epsilon = eps;
        const RegistrationResult r =
            register_pair(c.fixed, c.moving, lcfg, cfg.flow, cfg.kernel, cfg.seed);
        const LabelVolume warped_labels = sample_nearest(c.labels_moving, r.map);
        const DiceResult dr = dice(c.labels_fixed, warped_labels, fg);
        csv << format_double(eps) << "," << format_double(dr.mean) << ","
            << format_double(r.pct_neg_jac) << "\n";
        std::cout << "epsilon " << format_double(eps) << ": mean dice " << format_double(dr.mean)
                  << ", %negJac " << format_double(r.pct_neg_jac) << "\n";
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::binary);
        require(f.good(), "cannot open '" + out_path + "' for writing");
        f << csv.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"instance-specific multimodal diffeomorphic registration"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate synthetic benchmark cases");
    std::string synth_spec, synth_out;
    synth->add_option("--spec", synth_spec, "synthesis config file")->required();
    synth->add_option("--out", synth_out, "output directory")->required();

    // register
    auto* reg = app.add_subcommand("register", "register a moving image onto a fixed image");
    std::string fixed_path, moving_path, labels_fixed, labels_moving, metric, reg_config, ckpt,
        reg_out;
    std::int64_t reg_seed = -1;
    reg->add_option("--fixed", fixed_path, "fixed volume (.nii/.drv)")->required();
    reg->add_option("--moving", moving_path, "moving volume (.nii/.drv)")->required();
    reg->add_option("--labels-fixed", labels_fixed, "fixed labels (.nii/.drv)");
    reg->add_option("--labels-moving", labels_moving, "moving labels (.nii/.drv)");
    reg->add_option("--metric", metric, "similarity: mind|contrastive|lmi");
    reg->add_option("--config", reg_config, "registration config file");
    reg->add_option("--descriptor-ckpt", ckpt, "descriptor checkpoint for the contrastive metric");
    reg->add_option("--seed", reg_seed, "RNG seed (overrides the config)");
    reg->add_option("--out", reg_out, "output directory")->required();

    // train-descriptor
    auto* train = app.add_subcommand("train-descriptor", "contrastive descriptor pretraining");
    std::string corpus_dir, train_config, train_out;
    train->add_option("--corpus", corpus_dir, "directory of .nii/.drv volumes")->required();
    train->add_option("--config", train_config, "training config file");
    train->add_option("--out", train_out, "checkpoint output path")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a registration result against truth");
    std::string eval_result, eval_truth, eval_out, wil_a, wil_b, wil_col = "mean_dice";
    eval_cmd->add_option("--result", eval_result, "registration output directory");
    eval_cmd->add_option("--truth", eval_truth, "synthetic case directory");
    eval_cmd->add_option("--out", eval_out, "metrics CSV path");
    eval_cmd->add_option("--wilcoxon-a", wil_a, "first report CSV for a paired signed-rank test");
    eval_cmd->add_option("--wilcoxon-b", wil_b, "second report CSV (tests a > b)");
    eval_cmd->add_option("--column", wil_col, "CSV column for the test (default mean_dice)");

    // sweep-eps
    auto* sweep = app.add_subcommand("sweep-eps", "penalty-barrier sweep on one case");
    std::string sweep_case, sweep_values = "0.1,0.3,0.5", sweep_config, sweep_out;
    sweep->add_option("--case", sweep_case, "synthetic case directory")->required();
    sweep->add_option("--values", sweep_values, "comma-separated epsilon values");
    sweep->add_option("--config", sweep_config, "registration config file");
    sweep->add_option("--out", sweep_out, "sweep CSV path");

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return run_synth(synth_spec, synth_out);
        if (reg->parsed())
            return run_register(fixed_path, moving_path, labels_fixed, labels_moving, metric,
                                reg_config, ckpt, reg_seed, reg_out);
        if (train->parsed()) return run_train_descriptor(corpus_dir, train_config, train_out);
        if (eval_cmd->parsed()) {
            if (!wil_a.empty() || !wil_b.empty()) {
                require(!wil_a.empty() && !wil_b.empty(),
                        "--wilcoxon-a and --wilcoxon-b must be given together");
                return run_wilcoxon(wil_a, wil_b, wil_col);
            }
            require(!eval_result.empty() && !eval_truth.empty(),
                    "eval needs --result and --truth (or the --wilcoxon-a/-b pair)");
            return run_eval(eval_result, eval_truth, eval_out);
        }
        if (sweep->parsed()) return run_sweep_eps(sweep_case, sweep_values, sweep_config, sweep_out);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
