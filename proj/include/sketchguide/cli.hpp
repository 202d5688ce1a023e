// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "analysis.hpp"
#include "checkpoint_adapter.hpp"
#include "editing.hpp"
#include "pipeline.hpp"
#include "service.hpp"
#include "toy_backbone.hpp"

namespace sketchguide {

inline constexpr double kToyDefaultBeta = 1.0;
inline constexpr double kCheckpointDefaultBeta = 0.8;

namespace cli_detail {

// Flags shared by every subcommand that builds a PipelineConfig.
struct ConfigFlags {
    std::string backbone = "toy";
    std::string checkpoint;
    std::optional<double> beta;
    std::optional<int> guided_steps;
    std::vector<std::string> layers;
    int iterations_per_step = 1;
    double eps_floor = kDefaultEpsFloor;
    std::optional<double> grad_clip;
    std::string step_scale_rule = "provisional_ddim";
    int steps = 50;
    int train_steps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    std::string beta_schedule = "linear";
    std::string spacing = "leading";
    int steps_offset = 0;
    double cfg_scale = 7.5;
    double inversion_scale = 1.0;
    std::string style_source = "sketch";
    std::string style_target = "photo";
    std::string target_source = "inverted_latents";
    std::string cache_dir;

    void attach(CLI::App& app) {
        app.add_option("--backbone", backbone, "Denoiser backend")
            ->check(CLI::IsMember({"toy", "checkpoint"}))
            ->capture_default_str();
        app.add_option("--checkpoint", checkpoint, "Checkpoint path for --backbone checkpoint");
        app.add_option("--beta", beta, "Guidance strength (toy default 1.0, checkpoint default 0.8)");
        app.add_option("--guided-steps", guided_steps, "Number of leading steps that run latent optimization (default: half of --steps)");
        app.add_option("--layers", layers, "Guidance cross-attention layers (default: backbone choice)");
        app.add_option("--iterations-per-step", iterations_per_step)->capture_default_str();
        app.add_option("--eps-floor", eps_floor, "Floor added before map normalization")->capture_default_str();
        app.add_option("--grad-clip", grad_clip, "Elementwise gradient clamp");
        app.add_option("--step-scale-rule", step_scale_rule)
            ->check(CLI::IsMember({"provisional_ddim", "previous_delta"}))
            ->capture_default_str();
        app.add_option("--steps", steps, "DDIM inference steps")->capture_default_str();
        app.add_option("--train-steps", train_steps)->capture_default_str();
        app.add_option("--beta-start", beta_start)->capture_default_str();
        app.add_option("--beta-end", beta_end)->capture_default_str();
        app.add_option("--beta-schedule", beta_schedule)
            ->check(CLI::IsMember({"linear", "scaled_linear"}))
            ->capture_default_str();
        app.add_option("--spacing", spacing)->check(CLI::IsMember({"leading", "trailing", "linspace"}))
            ->capture_default_str();
        app.add_option("--steps-offset", steps_offset)->capture_default_str();
        app.add_option("--cfg-scale", cfg_scale)->capture_default_str();
        app.add_option("--inversion-scale", inversion_scale)->capture_default_str();
        app.add_option("--style-source", style_source)->capture_default_str();
        app.add_option("--style-target", style_target)->capture_default_str();
        app.add_option("--target-source", target_source)
            ->check(CLI::IsMember({"inverted_latents", "reconstruction"}))
            ->capture_default_str();
        app.add_option("--cache-dir", cache_dir, "Directory for cached reference features");
    }

    [[nodiscard]] PipelineConfig build() const {
        PipelineConfig c;
        c.schedule.num_train_steps = train_steps;
        c.schedule.beta_start = beta_start;
        c.schedule.beta_end = beta_end;
        c.schedule.beta_schedule = parse_beta_schedule(beta_schedule);
        c.schedule.num_inference_steps = steps;
        c.schedule.spacing = parse_spacing(spacing);
        c.schedule.steps_offset = steps_offset;
        c.cfg_scale = cfg_scale;
        c.inversion_scale = inversion_scale;
        c.guidance.beta = beta.value_or(backbone == "checkpoint" ? kCheckpointDefaultBeta : kToyDefaultBeta);
        c.guidance.guided_steps = guided_steps.value_or(steps / 2);
        c.guidance.layers = layers;
        c.guidance.iterations_per_step = iterations_per_step;
        c.guidance.eps_floor = eps_floor;
        c.guidance.grad_clip = grad_clip;
        c.guidance.step_scale_rule = parse_step_scale_rule(step_scale_rule);
        c.style_source = style_source;
        c.style_target = style_target;
        c.target_source = parse_target_source(target_source);
        if (!cache_dir.empty()) c.cache_dir = cache_dir;
        c.guidance.validate(steps);
        return c;
    }

    [[nodiscard]] ToyBackbone make_backbone() const {
        if (backbone == "checkpoint") {
            CheckpointConfig cc;
            cc.checkpoint = checkpoint;
            throw io_error(checkpoint_unavailable_message(cc));
        }
        return ToyBackbone{};
    }
};

inline bool is_container_path(const std::filesystem::path& p) { return p.extension() == ".skgc"; }

// A PNG is encoded by the backbone; a container supplies the latent directly
// (a trajectory contributes its clean entry).
template <Denoiser B>
Latent load_input_latent(const std::filesystem::path& path, const B& backbone) {
    if (!is_container_path(path)) return backbone.encode_image(read_png(path));
    const Container c = load_container(path);
    if (c.manifest.value("kind", "") == "trajectory") return trajectory_from_container(c).clean();
    return latent_from_container(c);
}

inline std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline std::vector<std::filesystem::path> list_inputs(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw io_error("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension();
        if (ext == ".skgc" || ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw io_error("no .skgc or .png inputs in " + dir.string());
    return files;
}

// Latents of a set for the domain-gap study: containers are taken as is
// (trajectories contribute their noisiest entry), PNGs are inverted.
template <Denoiser B>
std::vector<Latent> load_analysis_set(const std::filesystem::path& dir, const std::string& prompt,
                                      const PipelineConfig& config, B& backbone) {
    const NoiseSchedule schedule = make_noise_schedule(config.schedule);
    std::vector<Latent> out;
    for (const auto& path : list_inputs(dir)) {
        if (is_container_path(path)) {
            const Container c = load_container(path);
            if (c.manifest.value("kind", "") == "trajectory") out.push_back(trajectory_from_container(c).noisiest());
            else out.push_back(latent_from_container(c));
        } else {
            const Latent z0 = backbone.encode_image(read_png(path));
            out.push_back(invert(z0, prompt, schedule, backbone, config.inversion_scale).noisiest());
        }
    }
    return out;
}

} // namespace cli_detail

// Entry point of the command-line tool. Returns 0 on success, 1 on usage
// errors (help text goes to `err`) and 2 on runtime failures.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    namespace fs = std::filesystem;
    using namespace cli_detail;

    CLI::App app{"Sketch-guided image generation with cross-attention latent optimization", "sketchguide"};
    app.set_config("--config", "", "TOML-style key/value config file; flags override it");
    app.require_subcommand(1);

    ConfigFlags flags;

    // generate / edit
    std::string sketch, class_label, out_path, exemplar;
    std::uint64_t seed = 0;
    int edit_start = 5, edit_end = 0;
    std::vector<std::string> edit_layers;
    bool no_substitution = false;

    auto* gen = app.add_subcommand("generate", "Generate an image guided by a sketch");
    auto* edit = app.add_subcommand("edit", "Generate with exemplar self-attention substitution");
    for (auto* sub : {gen, edit}) {
        sub->add_option("--sketch", sketch, "Sketch PNG or .skgc latent")->required()->check(CLI::ExistingFile);
        sub->add_option("--class", class_label, "Class word(s) of the object")->required();
        sub->add_option("--seed", seed, "Noise seed")->capture_default_str();
        sub->add_option("--out", out_path, "Output PNG path")->required();
        flags.attach(*sub);
    }
    edit->add_option("--exemplar", exemplar, "Exemplar PNG or .skgc latent")->required()->check(CLI::ExistingFile);
    edit->add_option("--edit-start", edit_start, "First substituted step (1-based)")->capture_default_str();
    edit->add_option("--edit-end", edit_end, "Last substituted step, 0 for the final step")->capture_default_str();
    edit->add_option("--edit-layers", edit_layers, "Self-attention layers to substitute");
    edit->add_flag("--no-substitution", no_substitution, "Disable substitution");

    // invert
    std::string image_path, prompt;
    auto* inv = app.add_subcommand("invert", "DDIM-invert an image and write its trajectory");
    inv->add_option("--image", image_path, "PNG or .skgc latent")->required()->check(CLI::ExistingFile);
    inv->add_option("--prompt", prompt, "Conditioning prompt")->required();
    inv->add_option("--out", out_path, "Output trajectory container (.skgc)")->required();
    flags.attach(*inv);

    // extract
    std::string out_dir;
    auto* ext = app.add_subcommand("extract", "Extract reference features (trajectory and target maps)");
    ext->add_option("--sketch", sketch, "Sketch PNG or .skgc latent")->required()->check(CLI::ExistingFile);
    ext->add_option("--class", class_label, "Class word(s) of the object")->required();
    ext->add_option("--out-dir", out_dir, "Directory for trajectory.skgc and stack.skgc")->required();
    flags.attach(*ext);

    // analyze
    std::string set_a, set_b, trace_path, prompt_a = "a photo", prompt_b = "a sketch";
    auto* ana = app.add_subcommand("analyze", "Latent distribution comparison or guidance trace report");
    auto* set_a_opt = ana->add_option("--set-a", set_a, "Directory of .skgc latents or PNGs");
    auto* set_b_opt = ana->add_option("--set-b", set_b, "Directory of .skgc latents or PNGs");
    auto* trace_opt = ana->add_option("--trace", trace_path, "Guidance trace (.jsonl)")->check(CLI::ExistingFile);
    set_a_opt->needs(set_b_opt);
    set_b_opt->needs(set_a_opt);
    trace_opt->excludes(set_a_opt)->excludes(set_b_opt);
    ana->add_option("--prompt-a", prompt_a, "Inversion prompt for PNGs in set A")->capture_default_str();
    ana->add_option("--prompt-b", prompt_b, "Inversion prompt for PNGs in set B")->capture_default_str();
    ana->add_option("--out-dir", out_dir, "Report directory")->required();
    int bins = 200;
    double lo = -5.0, hi = 5.0;
    ana->add_option("--bins", bins)->capture_default_str();
    ana->add_option("--range-lo", lo)->capture_default_str();
    ana->add_option("--range-hi", hi)->capture_default_str();
    flags.attach(*ana);

    // serve
    int port = 8080;
    std::string host = "127.0.0.1";
    auto* srv = app.add_subcommand("serve", "Run the HTTP job service");
    srv->add_option("--port", port)->capture_default_str();
    srv->add_option("--host", host)->capture_default_str();
    flags.attach(*srv);

    std::vector<const char*> argv{"sketchguide"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 1;
    }
    if (ana->parsed() && trace_path.empty() && set_a.empty()) {
        err << "error: analyze needs --set-a/--set-b or --trace\n\n" << ana->help();
        return 1;
    }

    PipelineConfig config;
    try {
        config = flags.build();
    } catch (const parameter_error& e) {
        err << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
        return 1;
    }

    try {
        if (ana->parsed() && !trace_path.empty()) {
            const auto bytes = read_file_bytes(trace_path);
            const TraceReport report = trace_report(parse_trace(std::string(bytes.begin(), bytes.end())));
            const fs::path json_path = fs::path(out_dir) / "trace_report.json";
            write_text(json_path, report.to_json().dump(2) + "\n");
            out << json_path.string() << "\n";
            return 0;
        }

        ToyBackbone backbone = flags.make_backbone();

        if (gen->parsed() || edit->parsed()) {
            const Latent z0 = load_input_latent(sketch, backbone);
            ReferenceFeatures features = extract_reference_features(z0, class_label, config, backbone);
            GenerationResult result;
            if (edit->parsed()) {
                config.editing.enabled = !no_substitution;
                config.editing.start_step = edit_start;
                config.editing.end_step = edit_end;
                config.editing.layers = edit_layers;
                const ExemplarFeatures ex =
                    record_exemplar(load_input_latent(exemplar, backbone), class_label, config, backbone);
                result = generate_with_exemplar(features, ex, class_label, seed, config, backbone);
                result.manifest.input_hashes["exemplar_file"] = file_sha256(exemplar);
            } else {
                result = generate(features, class_label, seed, config, backbone);
            }
            result.manifest.input_hashes["sketch_file"] = file_sha256(sketch);
            write_generation(result, out_path);
            out << out_path << "\n";
            return 0;
        }

        if (inv->parsed()) {
            const NoiseSchedule schedule = make_noise_schedule(config.schedule);
            const Latent z0 = load_input_latent(image_path, backbone);
            const LatentTrajectory traj = invert(z0, prompt, schedule, backbone, config.inversion_scale);
            save_container(out_path, to_container(traj));
            out << out_path << "\n";
            return 0;
        }

        if (ext->parsed()) {
            const Latent z0 = load_input_latent(sketch, backbone);
            const ReferenceFeatures f = extract_reference_features(z0, class_label, config, backbone);
            const fs::path traj_path = fs::path(out_dir) / "trajectory.skgc";
            const fs::path stack_path = fs::path(out_dir) / "stack.skgc";
            save_container(traj_path, to_container(f.trajectory));
            save_container(stack_path, to_container(f.stack));
            out << traj_path.string() << "\n" << stack_path.string() << "\n";
            return 0;
        }

        if (ana->parsed()) {
            const HistogramSpec spec{bins, lo, hi};
            const auto a = latent_statistics(load_analysis_set(set_a, prompt_a, config, backbone), spec, set_a);
            const auto b = latent_statistics(load_analysis_set(set_b, prompt_b, config, backbone), spec, set_b);
            const DistributionReport report = compare_distributions(a, b);
            const fs::path json_path = fs::path(out_dir) / "report.json";
            const fs::path csv_path = fs::path(out_dir) / "histogram.csv";
            write_text(json_path, report.to_json().dump(2) + "\n");
            write_text(csv_path, report.histogram_csv());
            out << json_path.string() << "\n" << csv_path.string() << "\n";
            return 0;
        }

        if (srv->parsed()) {
            JobService<ToyBackbone> service(std::move(backbone), config);
            httplib::Server server;
            mount_routes(server, service);
            out << "listening on http://" << host << ":" << port << "\n" << std::flush;
            if (!server.listen(host, port)) throw io_error("cannot listen on " + host + ":" + std::to_string(port));
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace sketchguide
