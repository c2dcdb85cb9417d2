#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmod/io.hpp"
#include "xmod/metrics.hpp"
#include "xmod/nets.hpp"
#include "xmod/oracle.hpp"
#include "xmod/phantom.hpp"
#include "xmod/pipeline.hpp"
#include "xmod/sampler.hpp"
#include "xmod/schedule.hpp"
#include "xmod/text.hpp"
#include "xmod/volume.hpp"

namespace xmod::cli {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kManifestVersion = 1;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMismatch = 3;

class MismatchError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

std::string file_crc(const fs::path& p) { return hex32(io::crc32_of(io::read_file(p))); }

std::string arg_text(const Json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    if (v.is_number_float()) return format_double(v.get<double>());
    if (v.is_array()) {
        std::string s;
        for (const auto& e : v) s += (s.empty() ? "" : ",") + arg_text(e);
        return s;
    }
    throw std::logic_error("unsupported manifest value");
}

void write_json(const fs::path& path, const Json& j) {
    std::ofstream f(path, std::ios::binary);
    f << j.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + path.string());
}

Json read_json(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    try {
        return Json::parse(f);
    } catch (const Json::exception& e) {
        throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
    }
}

// Resolved parameters of one invocation. Every flag is recorded explicitly so the argument list replays
// the run even if defaults change later.
struct Run {
    std::string command;
    Json resolved = Json::object();
    std::string output_flag;
    Json outputs = Json::array();
    Json results = Json::object();

    void set(const std::string& flag, Json v) { resolved[flag] = std::move(v); }
    void add_output(const fs::path& p) { outputs.push_back(Json{{"path", p.string()}, {"crc32", file_crc(p)}}); }

    std::vector<std::string> args() const {
        std::vector<std::string> a;
        for (const auto& [k, v] : resolved.items()) {
            a.push_back("--" + k);
            a.push_back(arg_text(v));
        }
        return a;
    }

    Json manifest() const {
        Json m;
        m["tool"] = "xmod";
        m["manifest_version"] = kManifestVersion;
        m["command"] = command;
        m["args"] = args();
        m["resolved"] = resolved;
        m["output_flag"] = output_flag;
        m["outputs"] = outputs;
        m["results"] = results;
        return m;
    }

    // An explicit path wins; otherwise the fallback, and no manifest at all when both are empty.
    void write_manifest(const std::string& explicit_path, const std::string& fallback) const {
        const std::string p = !explicit_path.empty() ? explicit_path : fallback;
        if (!p.empty()) write_json(p, manifest());
    }
};

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
    std::vector<int> v;
    for (const auto& s : split(text, ',')) v.push_back(static_cast<int>(parse_int(s, what)));
    if (v.empty()) throw std::invalid_argument(what + " is empty");
    return v;
}

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

// --- train ---

struct TrainOpts {
    std::string arch, preset = "lite", data, schedule = "cosine", out, manifest;
    int steps = 2000, batch = 16, crop = 0, log_every = 100;
    double lr = 1e-4, gamma = 5.0, min_overlap = 0.25;
    std::int64_t min_foreground = 200;
    std::uint64_t seed = 0;
};

Run do_train(const TrainOpts& o, std::ostream& out) {
    pipeline::TrainConfig cfg;
    cfg.arch = nets::ArchConfig::make(nets::parse_arch(o.arch), nets::parse_preset(o.preset));
    cfg.schedule = NoiseSchedule::parse(o.schedule).descriptor();
    cfg.steps = o.steps;
    cfg.lr = o.lr;
    cfg.batch = o.batch;
    cfg.crop = o.crop > 0 ? o.crop : (cfg.arch.preset == nets::Preset::Lite ? 32 : 256);
    cfg.gamma = o.gamma;
    cfg.seed = o.seed;
    std::string data = o.data;
    const std::string prefix = "phantom:";
    if (data.rfind(prefix, 0) == 0) data = prefix + phantom::PhantomSpec::parse(data.substr(prefix.size())).descriptor();

    Run run;
    run.command = "train";
    run.output_flag = "out";
    run.set("arch", nets::arch_name(cfg.arch.arch));
    run.set("preset", nets::preset_name(cfg.arch.preset));
    run.set("data", data);
    run.set("steps", cfg.steps);
    run.set("lr", cfg.lr);
    run.set("batch", cfg.batch);
    run.set("crop", cfg.crop);
    run.set("schedule", cfg.schedule);
    run.set("gamma", cfg.gamma);
    run.set("seed", cfg.seed);
    run.set("min-foreground", o.min_foreground);
    run.set("min-overlap", o.min_overlap);
    run.set("log-every", o.log_every);
    run.set("out", o.out);

    const auto dataset = pipeline::load_dataset(data, {o.min_foreground, o.min_overlap});
    out << "train: " << dataset.size() << " slice pairs (" << dataset.dropped << " dropped), "
        << nets::param_count(cfg.arch) << " parameters\n";
    const auto start = std::chrono::steady_clock::now();
    auto result = pipeline::train(cfg, dataset, [&](int step, double loss) {
        if (o.log_every > 0 && ((step + 1) % o.log_every == 0 || step + 1 == cfg.steps)) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            out << "step " << step + 1 << " loss " << format_double(loss) << " elapsed " << std::lround(secs) << "s\n";
            out.flush();
        }
    });
    io::save_checkpoint(result.checkpoint, o.out);
    run.add_output(o.out);

    const auto& l = result.losses;
    const std::size_t tail = std::min<std::size_t>(l.size(), 100);
    double tail_mean = 0.0;
    for (std::size_t i = l.size() - tail; i < l.size(); ++i) tail_mean += l[i];
    run.results["slice_pairs"] = dataset.size();
    run.results["dropped"] = dataset.dropped;
    run.results["parameters"] = nets::param_count(cfg.arch);
    run.results["first_loss"] = l.empty() ? Json(nullptr) : Json(l.front());
    run.results["final_loss"] = l.empty() ? Json(nullptr) : Json(l.back());
    run.results["mean_loss_last_100"] = tail == 0 ? Json(nullptr) : Json(tail_mean / static_cast<double>(tail));
    run.write_manifest(o.manifest, o.out + ".manifest.json");
    return run;
}

// --- translate ---

struct TranslateOpts {
    std::string model, input, output, sampler = "ddpm", manifest;
    int steps = 128;
    std::int64_t work_size = 256;
    std::uint64_t seed = 0;
};

Run do_translate(const TranslateOpts& o, std::ostream& out) {
    SamplerConfig sc;
    sc.kind = parse_sampler_kind(o.sampler);
    sc.steps = o.steps;
    sc.seed = o.seed;
    if (sc.steps < 1) throw std::invalid_argument("--steps must be positive");
    if (o.work_size < 8) throw std::invalid_argument("--work-size must be at least 8");

    Run run;
    run.command = "translate";
    run.output_flag = "output";
    run.set("model", o.model);
    run.set("input", o.input);
    run.set("output", o.output);
    run.set("sampler", sampler_kind_name(sc.kind));
    run.set("steps", sc.steps);
    run.set("work-size", o.work_size);
    run.set("seed", sc.seed);

    const auto ckpt = io::load_checkpoint(o.model);
    const auto input = io::read_nifti(o.input);
    auto result = pipeline::translate(ckpt, pipeline::prepare_source(input), sc, o.work_size);
    result.spacing = input.spacing;
    io::write_nifti(result, o.output);
    run.add_output(o.output);
    out << "translate: " << input.slices() << " slices with " << nets::arch_name(ckpt.config.arch)
        << (ckpt.config.is_diffusion() ? std::string(" (") + sampler_kind_name(sc.kind) + ", " + std::to_string(sc.steps) + " steps)" : "")
        << " -> " << o.output << "\n";
    run.results["slices"] = input.slices();
    run.results["arch"] = nets::arch_name(ckpt.config.arch);
    run.write_manifest(o.manifest, o.output + ".manifest.json");
    return run;
}

// --- eval ---

struct EvalOpts {
    std::string pred, target, features = "down8", report, manifest;
};

Json report_json(const EvalOpts& o, const metrics::MetricReport& r) {
    Json j;
    j["pred"] = o.pred;
    j["target"] = o.target;
    j["features"] = o.features;
    j["eval_range"] = {r.eval_range.first, r.eval_range.second};
    j["data_range"] = r.data_range;
    j["n_slices"] = r.n_items;
    j["mse"] = r.mse;
    j["mae"] = r.mae;
    // JSON has no infinity; identical volumes are flagged instead.
    j["psnr"] = number_or_null(r.psnr);
    j["psnr_infinite"] = metrics::is_infinite_psnr(r.psnr);
    j["ssim"] = r.ssim;
    j["ssim_window"] = r.ssim_window;
    j["fd"] = r.fd ? number_or_null(*r.fd) : Json(nullptr);
    return j;
}

Run do_eval(const EvalOpts& o, std::ostream& out) {
    const auto extractor = metrics::parse_extractor(o.features);
    Run run;
    run.command = "eval";
    run.output_flag = "report";
    run.set("pred", o.pred);
    run.set("target", o.target);
    run.set("features", o.features);
    run.set("report", o.report);

    const auto report = volume::evaluate_volumes(io::read_nifti(o.pred), io::read_nifti(o.target), extractor);
    const auto j = report_json(o, report);
    write_json(o.report, j);
    run.add_output(o.report);
    out << "eval: mse " << format_double(report.mse) << " psnr "
        << (metrics::is_infinite_psnr(report.psnr) ? std::string("inf") : format_double(report.psnr)) << " ssim "
        << format_double(report.ssim) << " fd " << (report.fd ? format_double(*report.fd) : std::string("n/a")) << "\n";
    run.results = j;
    run.write_manifest(o.manifest, o.report + ".manifest.json");
    return run;
}

// --- inspect-schedule ---

struct ScheduleOpts {
    std::string schedule = "cosine", out_path, manifest;
    int points = 1001, precision = 7;
};

std::string fixed(double v, int precision) {
    // Values that round to zero print without a sign.
    if (std::abs(v) < 0.5 * std::pow(10.0, -precision)) v = 0.0;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    return buf;
}

Run do_inspect_schedule(const ScheduleOpts& o, std::ostream& out) {
    if (o.points < 2) throw std::invalid_argument("--points must be at least 2");
    if (o.precision < 1 || o.precision > 17) throw std::invalid_argument("--precision must be in 1..17");
    const auto schedule = NoiseSchedule::parse(o.schedule);
    Run run;
    run.command = "inspect-schedule";
    run.output_flag = "out";
    run.set("schedule", schedule.descriptor());
    run.set("points", o.points);
    run.set("precision", o.precision);
    if (!o.out_path.empty()) run.set("out", o.out_path);

    std::ostringstream table;
    table << "t lambda alpha sigma\n";
    for (int i = 0; i < o.points; ++i) {
        const double t = static_cast<double>(i) / (o.points - 1);
        const auto as = schedule.alpha_sigma(t);
        table << fixed(t, o.precision) << ' ' << fixed(schedule.log_snr(t), o.precision) << ' '
              << fixed(as.alpha, o.precision) << ' ' << fixed(as.sigma, o.precision) << '\n';
    }
    if (o.out_path.empty()) {
        out << table.str();
    } else {
        std::ofstream f(o.out_path, std::ios::binary);
        f << table.str();
        if (!f) throw std::runtime_error("cannot write " + o.out_path);
        run.add_output(o.out_path);
    }
    run.write_manifest(o.manifest, o.out_path.empty() ? "" : o.out_path + ".manifest.json");
    return run;
}

// --- oracle-bench ---

struct OracleOpts {
    std::string sampler = "ddpm", steps = "4,16,64,256", schedule = "cosine:clamp=60", report, manifest;
    int dim = 16, samples = 4096;
    std::uint64_t seed = 0;
};

Run do_oracle_bench(const OracleOpts& o, std::ostream& out) {
    oracle::OracleBenchConfig cfg;
    cfg.kind = parse_sampler_kind(o.sampler);
    cfg.dim = o.dim;
    cfg.steps = parse_int_list(o.steps, "--steps");
    cfg.samples = o.samples;
    cfg.seed = o.seed;
    cfg.schedule = NoiseSchedule::parse(o.schedule);

    Run run;
    run.command = "oracle-bench";
    run.output_flag = "report";
    run.set("dim", cfg.dim);
    run.set("sampler", sampler_kind_name(cfg.kind));
    run.set("steps", cfg.steps);
    run.set("samples", cfg.samples);
    run.set("seed", cfg.seed);
    run.set("schedule", cfg.schedule.descriptor());
    if (!o.report.empty()) run.set("report", o.report);

    const auto rows = oracle::run_oracle_bench(cfg);
    out << "# sampler=" << sampler_kind_name(cfg.kind) << " dim=" << cfg.dim << " samples=" << cfg.samples
        << " seed=" << cfg.seed << " schedule=" << cfg.schedule.descriptor() << "\n";
    out << "steps mean_max_z cov_max_z scale expected_scale linear_residual\n";
    Json table = Json::array();
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%d %.4f %.4f %.7f %.7f %.3e\n", r.steps, r.mean_max_z, r.cov_max_z, r.scale,
                      r.expected_scale, r.linear_residual);
        out << buf;
        table.push_back(Json{{"steps", r.steps},
                             {"mean_max_z", r.mean_max_z},
                             {"cov_max_z", r.cov_max_z},
                             {"scale", r.scale},
                             {"expected_scale", r.expected_scale},
                             {"linear_residual", r.linear_residual}});
    }
    run.results["rows"] = table;
    if (!o.report.empty()) {
        write_json(o.report, run.results);
        run.add_output(o.report);
    }
    run.write_manifest(o.manifest, o.report.empty() ? "" : o.report + ".manifest.json");
    return run;
}

// --- gen-phantom ---

struct PhantomOpts {
    phantom::PhantomSpec spec;
    std::string out_dir, name = "phantom", manifest;
};

Run do_gen_phantom(const PhantomOpts& o, std::ostream& out) {
    o.spec.validate();
    if (o.name.empty() || o.name.find('/') != std::string::npos) throw std::invalid_argument("--name must be a plain file stem");
    Run run;
    run.command = "gen-phantom";
    run.output_flag = "out";
    run.set("count", o.spec.count);
    run.set("size", o.spec.size);
    run.set("seed", o.spec.seed);
    run.set("blob-min", o.spec.blob_min);
    run.set("blob-max", o.spec.blob_max);
    run.set("tube-min", o.spec.tube_min);
    run.set("tube-max", o.spec.tube_max);
    run.set("noise", o.spec.noise_sigma);
    run.set("name", o.name);
    run.set("out", o.out_dir);

    fs::create_directories(o.out_dir);
    const auto pairs = phantom::gen_phantom_pairs(o.spec);
    const fs::path src = fs::path(o.out_dir) / (o.name + "_source.nii");
    const fs::path tgt = fs::path(o.out_dir) / (o.name + "_target.nii");
    // The source is stored normalized; the target in Hounsfield units like a real CTA.
    io::write_nifti(pairs.source, src);
    io::write_nifti(volume::unscale(pairs.target), tgt);
    run.add_output(src);
    run.add_output(tgt);
    run.results["spec"] = o.spec.descriptor();
    out << "gen-phantom: " << o.spec.count << " slices of " << o.spec.size << "x" << o.spec.size << " -> " << src.string()
        << ", " << tgt.string() << "\n";
    run.write_manifest(o.manifest, (fs::path(o.out_dir) / (o.name + ".manifest.json")).string());
    return run;
}

// --- dispatch ---

std::optional<Run> dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err);

struct RerunOpts {
    std::string manifest, output;
    bool verify = false;
};

Run do_rerun(const RerunOpts& o, std::ostream& out, std::ostream& err) {
    const auto m = read_json(o.manifest);
    if (!m.is_object() || m.value("tool", "") != "xmod") throw std::runtime_error(o.manifest + " is not an xmod manifest");
    if (m.value("manifest_version", 0) != kManifestVersion) throw std::runtime_error("unsupported manifest version in " + o.manifest);
    const auto command = m.at("command").get<std::string>();
    if (command == "rerun") throw std::runtime_error("a manifest cannot describe a rerun");
    auto args = m.at("args").get<std::vector<std::string>>();
    if (!o.output.empty()) {
        const std::string flag = "--" + m.at("output_flag").get<std::string>();
        auto it = std::find(args.begin(), args.end(), flag);
        if (it != args.end() && it + 1 != args.end()) {
            *(it + 1) = o.output;
        } else {
            args.push_back(flag);
            args.push_back(o.output);
        }
    }
    args.insert(args.begin(), command);
    auto run = dispatch(args, out, err);
    if (!run) throw std::logic_error("rerun produced no run");
    if (o.verify) {
        const auto& before = m.at("outputs");
        if (before.size() != run->outputs.size()) throw MismatchError("rerun wrote a different number of outputs");
        for (std::size_t i = 0; i < before.size(); ++i) {
            const auto a = before[i].at("crc32").get<std::string>(), b = run->outputs[i].at("crc32").get<std::string>();
            if (a != b) {
                throw MismatchError("output " + run->outputs[i].at("path").get<std::string>() + " differs from the recorded run (crc32 " + b +
                                    " vs " + a + ")");
            }
        }
        out << "rerun: " << before.size() << " output(s) match the manifest\n";
    }
    return *run;
}

std::optional<Run> dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cross-modality diffusion toolkit", "xmod"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    TrainOpts tr;
    auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
    train->add_option("--arch", tr.arch, "unet | adm | uvit | dit")->required();
    train->add_option("--preset", tr.preset, "paper | lite")->capture_default_str();
    train->add_option("--data", tr.data, "Directory of <id>_source.nii/<id>_target.nii pairs, or phantom:<spec>")->required();
    train->add_option("--steps", tr.steps, "Optimizer steps")->capture_default_str();
    train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--batch", tr.batch, "Batch size")->capture_default_str();
    train->add_option("--crop", tr.crop, "Random crop size in pixels (default: 32 for lite, 256 for paper)");
    train->add_option("--schedule", tr.schedule, "Noise schedule descriptor")->capture_default_str();
    train->add_option("--gamma", tr.gamma, "Min-SNR truncation")->capture_default_str();
    train->add_option("--seed", tr.seed, "Seed for initialization, crops and noise")->capture_default_str();
    train->add_option("--min-foreground", tr.min_foreground, "Slice filter: minimum foreground pixels")->capture_default_str();
    train->add_option("--min-overlap", tr.min_overlap, "Slice filter: minimum foreground IoU")->capture_default_str();
    train->add_option("--log-every", tr.log_every, "Progress interval in steps (0 disables)")->capture_default_str();
    train->add_option("--out", tr.out, "Checkpoint path")->required();
    train->add_option("--manifest", tr.manifest, "Manifest path (default: <out>.manifest.json)");

    TranslateOpts tl;
    auto* translate = app.add_subcommand("translate", "Translate a source volume with a trained checkpoint");
    translate->add_option("--model", tl.model, "Checkpoint")->required();
    translate->add_option("--input", tl.input, "Source NIfTI volume")->required();
    translate->add_option("--output", tl.output, "Output NIfTI volume (Hounsfield units)")->required();
    translate->add_option("--sampler", tl.sampler, "ddpm | ddim")->capture_default_str();
    translate->add_option("--steps", tl.steps, "Sampling steps")->capture_default_str();
    translate->add_option("--work-size", tl.work_size, "In-plane working resolution")->capture_default_str();
    translate->add_option("--seed", tl.seed, "Sampler seed")->capture_default_str();
    translate->add_option("--manifest", tl.manifest, "Manifest path (default: <output>.manifest.json)");

    EvalOpts ev;
    auto* eval = app.add_subcommand("eval", "Score a predicted volume against a target volume");
    eval->add_option("--pred", ev.pred, "Predicted NIfTI volume (Hounsfield units)")->required();
    eval->add_option("--target", ev.target, "Target NIfTI volume (Hounsfield units)")->required();
    eval->add_option("--features", ev.features, "down8 | randproj:dim=<n>,seed=<s> | file:<path>")->capture_default_str();
    eval->add_option("--report", ev.report, "JSON report path")->required();
    eval->add_option("--manifest", ev.manifest, "Manifest path (default: <report>.manifest.json)");

    ScheduleOpts sc;
    auto* inspect = app.add_subcommand("inspect-schedule", "Tabulate t, log-SNR, alpha and sigma");
    inspect->add_option("--schedule", sc.schedule, "Noise schedule descriptor")->capture_default_str();
    inspect->add_option("--points", sc.points, "Number of evenly spaced t values")->capture_default_str();
    inspect->add_option("--precision", sc.precision, "Decimals per value")->capture_default_str();
    inspect->add_option("--out", sc.out_path, "Write the table here instead of stdout");
    inspect->add_option("--manifest", sc.manifest, "Manifest path (default: <out>.manifest.json when --out is set)");

    OracleOpts ob;
    auto* bench = app.add_subcommand("oracle-bench", "Sampler convergence on N(0, I) with exact denoisers");
    bench->add_option("--dim", ob.dim, "Data dimension")->capture_default_str();
    bench->add_option("--sampler", ob.sampler, "ddpm | ddim")->capture_default_str();
    bench->add_option("--steps", ob.steps, "Comma-separated step counts")->capture_default_str();
    bench->add_option("--samples", ob.samples, "Samples per step count")->capture_default_str();
    bench->add_option("--seed", ob.seed, "Seed")->capture_default_str();
    bench->add_option("--schedule", ob.schedule, "Noise schedule descriptor")->capture_default_str();
    bench->add_option("--report", ob.report, "Also write the table as JSON");
    bench->add_option("--manifest", ob.manifest, "Manifest path (default: <report>.manifest.json when --report is set)");

    PhantomOpts ph;
    auto* gen = app.add_subcommand("gen-phantom", "Write a synthetic source/target volume pair");
    gen->add_option("--count", ph.spec.count, "Slices")->capture_default_str();
    gen->add_option("--size", ph.spec.size, "In-plane size (even, at least 16)")->capture_default_str();
    gen->add_option("--seed", ph.spec.seed, "Seed")->capture_default_str();
    gen->add_option("--blob-min", ph.spec.blob_min, "Fewest tissue blobs per slice")->capture_default_str();
    gen->add_option("--blob-max", ph.spec.blob_max, "Most tissue blobs per slice")->capture_default_str();
    gen->add_option("--tube-min", ph.spec.tube_min, "Fewest vessels per slice")->capture_default_str();
    gen->add_option("--tube-max", ph.spec.tube_max, "Most vessels per slice")->capture_default_str();
    gen->add_option("--noise", ph.spec.noise_sigma, "Target noise sigma")->capture_default_str();
    gen->add_option("--name", ph.name, "File stem of the pair")->capture_default_str();
    gen->add_option("--out", ph.out_dir, "Output directory")->required();
    gen->add_option("--manifest", ph.manifest, "Manifest path (default: <out>/<name>.manifest.json)");

    RerunOpts rr;
    auto* rerun = app.add_subcommand("rerun", "Repeat a run from its manifest");
    rerun->add_option("--manifest", rr.manifest, "Manifest written by an earlier run")->required();
    rerun->add_option("--output", rr.output, "Replace the run's primary output path");
    rerun->add_flag("--verify", rr.verify, "Fail unless every output matches the recorded checksum");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return std::nullopt;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return std::nullopt;
    }

    if (*train) return do_train(tr, out);
    if (*translate) return do_translate(tl, out);
    if (*eval) return do_eval(ev, out);
    if (*inspect) return do_inspect_schedule(sc, out);
    if (*bench) return do_oracle_bench(ob, out);
    if (*gen) return do_gen_phantom(ph, out);
    if (*rerun) return do_rerun(rr, out, err);
    throw std::logic_error("no subcommand selected");
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        dispatch(args, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "xmod: error: " << one_line(e.what()) << " (see --help)\n";
        return kExitUsage;
    } catch (const MismatchError& e) {
        err << "xmod: error: " << one_line(e.what()) << '\n';
        return kExitMismatch;
    } catch (const std::exception& e) {
        err << "xmod: error: " << one_line(e.what()) << '\n';
        return kExitFailure;
    }
}

}  // namespace xmod::cli
