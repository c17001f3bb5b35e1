#include "app/cli.hpp"

#include <CLI11.hpp>

#include <ostream>

#include "app/commands.hpp"
#include "bitdance/error.hpp"

namespace bitdance::app {
namespace {

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", path, "Run config file (flat key = value)");
        cmd->add_option("--set", overrides, "Override a config key, key=value (repeatable)");
    }
    RunConfig resolve() const {
        RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
        apply_overrides(cfg, overrides);
        cfg.validate();
        return cfg;
    }
};

std::optional<fs::path> optional_path(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return fs::path(s);
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Binary-token next-patch image generation toolkit"};
    app.require_subcommand(1);
    std::string out_dir;
    auto add_out = [&](CLI::App* cmd) {
        cmd->add_option("--out", out_dir, "Output directory (default $BITDANCE_OUT_DIR, then runs/<verb>)");
    };
    auto out_path = [&](const char* verb) { return resolve_out_dir(optional_path(out_dir), fs::path("runs") / verb); };

    // train-tokenizer
    auto* tt = app.add_subcommand("train-tokenizer", "Train the binary tokenizer on synthetic images");
    ConfigArgs tt_cfg;
    tt_cfg.attach(tt);
    std::string tt_resume;
    std::size_t log_every = 100;
    tt->add_option("--resume", tt_resume, "Tokenizer checkpoint to resume from");
    tt->add_option("--log-every", log_every, "Progress line interval in steps (0 silences)");
    add_out(tt);

    // train-ar
    auto* ta = app.add_subcommand("train-ar", "Train the next-patch model on a frozen tokenizer");
    ConfigArgs ta_cfg;
    ta_cfg.attach(ta);
    std::string ta_tok, ta_init, ta_resume;
    ta->add_option("--tokenizer", ta_tok, "Tokenizer checkpoint (fresh run)");
    ta->add_option("--init", ta_init, "AR checkpoint to start from; a different p escalates the patch size");
    ta->add_option("--resume", ta_resume, "AR checkpoint to resume");
    ta->add_option("--log-every", log_every, "Progress line interval in steps (0 silences)");
    add_out(ta);

    // sample
    auto* sa = app.add_subcommand("sample", "Generate class-conditional images and packed latents");
    SampleOptions so;
    std::string sa_ckpt;
    bool raw = false;
    sa->add_option("--checkpoint", sa_ckpt, "AR checkpoint")->required();
    sa->add_option("--class", so.label, "Class id")->required();
    sa->add_option("--count", so.count, "Number of images")->capture_default_str();
    auto* sa_p = sa->add_option("--p", "Patch size override");
    auto* sa_n = sa->add_option("--num-steps", "Euler steps (default: config num_steps)");
    auto* sa_s = sa->add_option("--cfg-scale", "Guidance scale (default: config cfg_scale)");
    sa->add_option("--seed", so.seed, "Sampling seed")->capture_default_str();
    sa->add_option("--chunk", so.chunk, "Images generated per batch")->capture_default_str();
    sa->add_flag("--raw", raw, "Use the raw weights instead of the EMA weights");
    add_out(sa);

    // eval-head
    auto* eh = app.add_subcommand("eval-head", "Joint-vs-factorized head experiment on a small bit distribution");
    EvalHeadOptions eo;
    eh->add_option("--spec", eo.spec, "xor or point:<d>:<index>")->capture_default_str();
    eh->add_option("--samples", eo.experiment.eval_samples, "Samples drawn from each head")->capture_default_str();
    eh->add_option("--bitwise-steps", eo.experiment.bitwise_steps)->capture_default_str();
    eh->add_option("--diffusion-steps", eo.experiment.diffusion_steps)->capture_default_str();
    eh->add_option("--num-steps", eo.experiment.num_steps, "Euler steps")->capture_default_str();
    eh->add_option("--seed", eo.experiment.seed)->capture_default_str();
    add_out(eh);

    // hist
    auto* hi = app.add_subcommand("hist", "Histograms of the trained head's x-prediction per t");
    HistOptions ho;
    std::string hi_ckpt;
    hi->add_option("--checkpoint", hi_ckpt, "AR checkpoint")->required();
    hi->add_option("--t", ho.t_values, "Times in [0, 1)")->delimiter(',')->capture_default_str();
    hi->add_option("--images", ho.images, "Real images used for conditioning")->capture_default_str();
    hi->add_option("--seed", ho.seed)->capture_default_str();
    hi->add_flag("--raw", raw, "Use the raw weights instead of the EMA weights");
    add_out(hi);

    // sweep
    auto* sw = app.add_subcommand("sweep", "Oracle accuracy across sampling steps or guidance scales");
    SweepCommandOptions wo;
    std::string sw_ckpt;
    sw->add_option("--checkpoint", sw_ckpt, "AR checkpoint")->required();
    sw->add_option("--steps", wo.steps, "Euler step counts to sweep")->delimiter(',');
    sw->add_option("--cfg-scales", wo.cfg_scales, "Guidance scales to sweep")->delimiter(',');
    auto* sw_n = sw->add_option("--num-steps", "Euler steps for a guidance sweep");
    auto* sw_s = sw->add_option("--cfg-scale", "Guidance scale for a step sweep");
    sw->add_option("--samples-per-class", wo.samples_per_class)->capture_default_str();
    sw->add_option("--seed", wo.seed)->capture_default_str();
    sw->add_flag("--raw", raw, "Use the raw weights instead of the EMA weights");
    add_out(sw);

    // bench
    auto* be = app.add_subcommand("bench", "Generation throughput per patch size (untrained weights)");
    ConfigArgs be_cfg;
    be_cfg.attach(be);
    BenchOptions bo;
    be->add_option("--grid", bo.grid, "Token grid side")->capture_default_str();
    be->add_option("--p", bo.patch_sizes, "Patch sizes")->delimiter(',')->capture_default_str();
    be->add_option("--images", bo.images)->capture_default_str();
    be->add_option("--num-steps", bo.num_steps)->capture_default_str();
    be->add_option("--seed", bo.seed)->capture_default_str();
    add_out(be);

    // inspect
    auto* in = app.add_subcommand("inspect", "Print packed latent file headers");
    std::vector<std::string> files;
    bool as_json = false;
    in->add_option("files", files, "Packed latent files")->required();
    in->add_flag("--json", as_json, "One JSON object per file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (tt->parsed()) {
            train_tokenizer({.config = tt_cfg.resolve(),
                             .out_dir = out_path("train-tokenizer"),
                             .resume = optional_path(tt_resume),
                             .log_every = log_every},
                            out);
        } else if (ta->parsed()) {
            train_ar({.config = ta_cfg.resolve(),
                      .out_dir = out_path("train-ar"),
                      .tokenizer = optional_path(ta_tok),
                      .init = optional_path(ta_init),
                      .resume = optional_path(ta_resume),
                      .log_every = log_every},
                     out);
        } else if (sa->parsed()) {
            so.checkpoint = sa_ckpt;
            if (sa_p->count()) so.p_override = sa_p->as<std::size_t>();
            if (sa_n->count()) so.num_steps = sa_n->as<std::size_t>();
            if (sa_s->count()) so.cfg_scale = sa_s->as<double>();
            so.use_ema = !raw;
            so.out_dir = out_path("sample");
            sample(so, out);
        } else if (eh->parsed()) {
            eo.out_dir = out_path("eval-head");
            eval_head(eo, out);
        } else if (hi->parsed()) {
            ho.checkpoint = hi_ckpt;
            ho.use_ema = !raw;
            ho.out_dir = out_path("hist");
            hist(ho, out);
        } else if (sw->parsed()) {
            wo.checkpoint = sw_ckpt;
            if (sw_n->count()) wo.num_steps = sw_n->as<std::size_t>();
            if (sw_s->count()) wo.cfg_scale = sw_s->as<double>();
            wo.use_ema = !raw;
            wo.out_dir = out_path("sweep");
            sweep(wo, out);
        } else if (be->parsed()) {
            bo.config = be_cfg.resolve();
            bo.out_dir = out_path("bench");
            bench(bo, out);
        } else if (in->parsed()) {
            std::vector<fs::path> paths(files.begin(), files.end());
            inspect(paths, as_json, out);
        }
    } catch (const ConfigError& e) {
        err << "bitdance: config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const InvalidInput& e) {
        err << "bitdance: invalid argument: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        err << "bitdance: I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const FormatError& e) {
        err << "bitdance: format error: " << e.what() << "\n";
        return kExitIo;
    } catch (const CompatibilityError& e) {
        err << "bitdance: compatibility error: " << e.what() << "\n";
        return kExitCompatibility;
    } catch (const std::exception& e) {
        err << "bitdance: error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace bitdance::app
