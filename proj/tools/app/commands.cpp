#include "app/commands.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <set>

#include "bitdance/binq.hpp"
#include "bitdance/checkpoint.hpp"
#include "bitdance/error.hpp"

namespace bitdance::app {
namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json config_json(const RunConfig& cfg) {
    json j = json::object();
    for (const auto& key : RunConfig::keys()) j[key] = cfg.get(key);
    return j;
}

void prepare_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void echo_command(const fs::path& dir, const std::string& verb, json inputs, const RunConfig* cfg) {
    json j;
    j["verb"] = verb;
    j["inputs"] = std::move(inputs);
    if (cfg) {
        j["config"] = config_json(*cfg);
        write_text(dir / "config.txt", cfg->to_text());
    }
    write_json(dir / "command.json", j);
}

std::string opt_path(const std::optional<fs::path>& p) { return p ? p->string() : std::string(); }

// Line-delimited records, flushed as they are written.
class JsonlWriter {
public:
    explicit JsonlWriter(const fs::path& path) : out_(open_out(path)), path_(path) {}
    void write(const json& record) {
        out_ << record.dump() << '\n';
        out_.flush();
        if (!out_) throw IoError("failed writing " + path_.string());
    }

private:
    std::ofstream out_;
    fs::path path_;
};

Checkpoint load_kind(const fs::path& path, const std::string& kind) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != kind) {
        throw CompatibilityError(path.string() + " is a '" + ck.kind + "' checkpoint, expected '" + kind + "'");
    }
    return ck;
}

json parse_stream_state(const Checkpoint& ck, const fs::path& path) {
    try {
        return json::parse(ck.rng_state);
    } catch (const json::exception&) {
        throw FormatError(path.string() + ": unreadable stream state");
    }
}

std::string state_field(const json& state, const char* key, const fs::path& path) {
    if (!state.contains(key) || !state[key].is_string()) {
        throw FormatError(path.string() + ": stream state lacks '" + key + "'");
    }
    return state[key].get<std::string>();
}

// Fields in `keys` must agree between two configs.
void require_same(const RunConfig& ours, const RunConfig& theirs, const std::vector<std::string>& keys,
                  const std::string& ours_name, const std::string& theirs_name) {
    std::string msg;
    for (const auto& key : keys) {
        if (ours.get(key) != theirs.get(key)) {
            msg += "\n  " + key + ": " + ours_name + " has " + ours.get(key) + ", " + theirs_name + " has " +
                   theirs.get(key);
        }
    }
    if (!msg.empty()) throw CompatibilityError("incompatible " + theirs_name + ":" + msg);
}

// All differences must be in `allowed`.
void require_only(const RunConfig& ours, const RunConfig& theirs, const std::set<std::string>& allowed,
                  const std::string& ours_name, const std::string& theirs_name) {
    std::vector<std::string> bad;
    for (const auto& key : ours.diff(theirs))
        if (!allowed.count(key)) bad.push_back(key);
    require_same(ours, theirs, bad, ours_name, theirs_name);
}

const std::vector<std::string> kTokenizerArchKeys = {"f", "d", "tok_hidden", "tok_blocks"};
const std::vector<std::string> kArArchKeys = {
    "image_size", "num_classes", "f", "d", "tok_hidden", "tok_blocks", "width", "depth", "heads", "mlp_ratio",
    "head_width", "head_depth", "head_heads", "head_mlp_ratio", "binary_targets"};

void check_progress(std::size_t start, std::size_t total, const char* key) {
    if (start > total) {
        throw ConfigError(std::string(key) + " (" + std::to_string(total) + ") is below the resumed step " +
                          std::to_string(start));
    }
}

std::unique_ptr<toktrain::Tokenizer> tokenizer_from(const RunConfig& cfg, const Checkpoint& ck) {
    auto tok = std::make_unique<toktrain::Tokenizer>(cfg.tokenizer(), 0);
    tok->params().load_snapshot(ck.tensors);
    return tok;
}

// Token sequence (patch raster order) the model is trained on for one image.
Matrix model_sequence(const toktrain::Tokenizer& tok, const pipeline::ArConfig& ac, const toktrain::Image& img) {
    if (ac.binary_targets) return pipeline::flatten_patch_raster(tok.tokenize(img), ac.backbone.patch_size);
    return pipeline::raster_to_patch_order(tok.encode(img).values, ac.layout());
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

fs::path resolve_out_dir(const std::optional<fs::path>& flag, const fs::path& fallback) {
    if (flag) return *flag;
    if (const char* env = std::getenv("BITDANCE_OUT_DIR"); env && *env) return env;
    return fallback;
}

// ---- train-tokenizer ---------------------------------------------------------

TrainSummary train_tokenizer(const TrainTokenizerOptions& opt, std::ostream& log) {
    const RunConfig& cfg = opt.config;
    cfg.validate();
    const auto t0 = Clock::now();

    toktrain::Tokenizer tok(cfg.tokenizer(), derive_seed(cfg.seed, "tokenizer.init"));
    toktrain::TokenizerTrainer trainer(tok, cfg.tokenizer_train());
    toktrain::SyntheticDataset data(cfg.data(derive_seed(cfg.seed, "tokenizer.data")));
    std::size_t start = 0;
    if (opt.resume) {
        const Checkpoint ck = load_kind(*opt.resume, "tokenizer");
        const RunConfig prev = RunConfig::parse(ck.config_text, opt.resume->string());
        require_only(cfg, prev, {"tok_steps", "steps", "checkpoint_every"}, "the run config",
                     "resume checkpoint " + opt.resume->string());
        tok.params().load_snapshot(ck.tensors);
        trainer.optimizer().load_state(ck.tensors, ck.step);
        data.restore(state_field(parse_stream_state(ck, *opt.resume), "data", *opt.resume));
        start = ck.step;
    }
    check_progress(start, cfg.tok_steps, "tok_steps");

    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "train-tokenizer", {{"resume", opt_path(opt.resume)}}, &cfg);
    JsonlWriter metrics(opt.out_dir / "metrics.jsonl");

    auto save = [&](const fs::path& path, std::size_t step) {
        Checkpoint ck;
        ck.kind = "tokenizer";
        ck.config_text = cfg.to_text();
        ck.step = step;
        ck.rng_state = json{{"data", data.state()}}.dump();
        ck.tensors = tok.params().snapshot();
        ck.tensors.merge(trainer.optimizer().state());
        save_checkpoint(path, ck);
    };

    toktrain::LossReport last;
    for (std::size_t step = start + 1; step <= cfg.tok_steps; ++step) {
        std::vector<toktrain::Image> batch;
        for (auto& s : data.take(cfg.tok_batch)) batch.push_back(std::move(s.image));
        const double lr = trainer.optimizer().current_lr();
        last = trainer.step(batch);
        metrics.write({{"step", step}, {"loss", last.total}, {"recon", last.recon}, {"entropy", last.entropy},
                       {"lr", lr}, {"wall_time_s", seconds_since(t0)}});
        if (opt.log_every && step % opt.log_every == 0) {
            log << "train-tokenizer step " << step << "/" << cfg.tok_steps << " loss " << last.total << " recon "
                << last.recon << std::endl;
        }
        if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != cfg.tok_steps) {
            save(opt.out_dir / ("tokenizer_step" + std::to_string(step) + ".ck"), step);
        }
    }

    TrainSummary sum{.step = cfg.tok_steps, .final_loss = last.total, .checkpoint = opt.out_dir / "tokenizer.ck"};
    save(sum.checkpoint, sum.step);
    sum.wall_time_s = seconds_since(t0);
    write_json(opt.out_dir / "summary.json", {{"command", "train-tokenizer"},
                                              {"step", sum.step},
                                              {"final_loss", sum.final_loss},
                                              {"wall_time_s", sum.wall_time_s},
                                              {"checkpoint", sum.checkpoint.string()}});
    log << "train-tokenizer done: " << sum.step << " steps in " << sum.wall_time_s << " s -> "
        << sum.checkpoint.string() << "\n";
    return sum;
}

// ---- train-ar ------------------------------------------------------------------

namespace {

LoadedModel loaded_from(const Checkpoint& ck, const fs::path& path, bool use_ema) {
    if (ck.kind != "ar") {
        throw CompatibilityError(path.string() + " is a '" + ck.kind + "' checkpoint, expected 'ar'");
    }
    LoadedModel out;
    out.config = RunConfig::parse(ck.config_text, path.string());
    out.config.validate();
    out.step = ck.step;
    out.tokenizer = tokenizer_from(out.config, ck);
    out.model = std::make_unique<pipeline::ArModel>(out.config.ar(), 0);
    if (use_ema) {
        const auto ema = ck.with_prefix("ema.");
        out.model->params().load_snapshot(ema);
    } else {
        out.model->params().load_snapshot(ck.tensors);
    }
    return out;
}

}  // namespace

LoadedModel load_ar_checkpoint(const fs::path& path, bool use_ema) {
    return loaded_from(load_checkpoint(path), path, use_ema);
}

TrainSummary train_ar(const TrainArOptions& opt, std::ostream& log) {
    const RunConfig& cfg = opt.config;
    cfg.validate();
    const auto t0 = Clock::now();
    const int sources = !!opt.tokenizer + !!opt.init + !!opt.resume;
    if (sources != 1) throw ConfigError("train-ar needs exactly one of --tokenizer, --init or --resume");

    std::unique_ptr<toktrain::Tokenizer> tok;
    std::unique_ptr<pipeline::ArModel> model;
    std::optional<Checkpoint> resume_ck;
    if (opt.tokenizer) {
        const Checkpoint ck = load_kind(*opt.tokenizer, "tokenizer");
        const RunConfig tcfg = RunConfig::parse(ck.config_text, opt.tokenizer->string());
        require_same(cfg, tcfg, kTokenizerArchKeys, "the run config", "tokenizer checkpoint " + opt.tokenizer->string());
        tok = tokenizer_from(cfg, ck);
        model = std::make_unique<pipeline::ArModel>(cfg.ar(), derive_seed(cfg.seed, "ar.init"));
    } else if (opt.init) {
        const Checkpoint ck = load_checkpoint(*opt.init);
        LoadedModel base = loaded_from(ck, *opt.init, true);
        require_same(cfg, base.config, kArArchKeys, "the run config", "init checkpoint " + opt.init->string());
        tok = std::move(base.tokenizer);
        if (base.config.p != cfg.p) {
            log << "train-ar: escalating patch size " << base.config.p << " -> " << cfg.p << "\n";
            model = std::make_unique<pipeline::ArModel>(
                pipeline::escalate_patch_size(*base.model, cfg.p, derive_seed(cfg.seed, "ar.escalate")));
        } else {
            model = std::move(base.model);
        }
    } else {
        resume_ck = load_kind(*opt.resume, "ar");
        const RunConfig prev = RunConfig::parse(resume_ck->config_text, opt.resume->string());
        require_only(cfg, prev, {"steps", "tok_steps", "checkpoint_every"}, "the run config",
                     "resume checkpoint " + opt.resume->string());
        tok = tokenizer_from(cfg, *resume_ck);
        model = std::make_unique<pipeline::ArModel>(cfg.ar(), 0);
        model->params().load_snapshot(resume_ck->tensors);
    }

    pipeline::ArTrainer trainer(*model, cfg.ar_train(), derive_seed(cfg.seed, "ar.train"));
    toktrain::SyntheticDataset data(cfg.data(derive_seed(cfg.seed, "ar.data")));
    std::size_t start = 0;
    if (resume_ck) {
        const json state = parse_stream_state(*resume_ck, *opt.resume);
        trainer.optimizer().load_state(resume_ck->tensors, resume_ck->step);
        auto ema = resume_ck->with_prefix("ema.");
        if (ema.size() != trainer.ema().values().size()) {
            throw FormatError(opt.resume->string() + ": EMA weights incomplete");
        }
        trainer.ema().mutable_values() = std::move(ema);
        trainer.rng() = Rng::deserialize(state_field(state, "trainer", *opt.resume));
        data.restore(state_field(state, "data", *opt.resume));
        start = resume_ck->step;
    }
    check_progress(start, cfg.steps, "steps");

    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "train-ar",
                 {{"tokenizer", opt_path(opt.tokenizer)}, {"init", opt_path(opt.init)}, {"resume", opt_path(opt.resume)}},
                 &cfg);
    JsonlWriter metrics(opt.out_dir / "metrics.jsonl");
    log << "train-ar: " << model->params().scalar_count() << " parameters, " << cfg.ar().layout().num_patches()
        << " AR steps per image\n";

    auto save = [&](const fs::path& path, std::size_t step) {
        Checkpoint ck;
        ck.kind = "ar";
        ck.config_text = cfg.to_text();
        ck.step = step;
        ck.rng_state = json{{"trainer", trainer.rng().serialize()}, {"data", data.state()}}.dump();
        ck.tensors = model->params().snapshot();
        for (const auto& [name, m] : trainer.ema().values()) ck.tensors["ema." + name] = m;
        ck.tensors.merge(trainer.optimizer().state());
        ck.tensors.merge(tok->params().snapshot());
        save_checkpoint(path, ck);
    };

    const pipeline::ArConfig ac = model->config();
    pipeline::StepReport last;
    for (std::size_t step = start + 1; step <= cfg.steps; ++step) {
        std::vector<int> labels;
        std::vector<toktrain::Image> images;
        for (auto& s : data.take(cfg.batch)) {
            labels.push_back(s.label);
            images.push_back(std::move(s.image));
        }
        if (ac.binary_targets) {
            std::vector<binq::BinaryGrid> grids;
            for (const auto& img : images) grids.push_back(tok->tokenize(img));
            last = trainer.step(grids, labels);
        } else {
            std::vector<binq::LatentGrid> grids;
            for (const auto& img : images) grids.push_back(tok->encode(img));
            last = trainer.step(grids, labels);
        }
        metrics.write({{"step", step}, {"loss", last.loss}, {"lr", last.lr}, {"grad_norm", last.grad_norm},
                       {"wall_time_s", seconds_since(t0)}});
        if (opt.log_every && step % opt.log_every == 0) {
            log << "train-ar step " << step << "/" << cfg.steps << " loss " << last.loss << std::endl;
        }
        if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != cfg.steps) {
            save(opt.out_dir / ("ar_step" + std::to_string(step) + ".ck"), step);
        }
    }

    TrainSummary sum{.step = cfg.steps, .final_loss = last.loss, .checkpoint = opt.out_dir / "ar.ck"};
    save(sum.checkpoint, sum.step);
    sum.wall_time_s = seconds_since(t0);
    write_json(opt.out_dir / "summary.json", {{"command", "train-ar"},
                                              {"step", sum.step},
                                              {"final_loss", sum.final_loss},
                                              {"wall_time_s", sum.wall_time_s},
                                              {"checkpoint", sum.checkpoint.string()}});
    log << "train-ar done: " << sum.step << " steps in " << sum.wall_time_s << " s -> " << sum.checkpoint.string()
        << "\n";
    return sum;
}

// ---- sample --------------------------------------------------------------------

SampleSummary sample(const SampleOptions& opt, std::ostream& log) {
    LoadedModel lm = load_ar_checkpoint(opt.checkpoint, opt.use_ema);
    const std::size_t classes = lm.config.num_classes;
    if (opt.label < 0 || static_cast<std::size_t>(opt.label) >= classes) {
        throw InvalidInput("class " + std::to_string(opt.label) + " outside valid range [0, " +
                           std::to_string(classes - 1) + "]");
    }
    if (opt.chunk == 0) throw ConfigError("chunk must be positive");
    std::unique_ptr<pipeline::ArModel> model = std::move(lm.model);
    if (opt.p_override && *opt.p_override != lm.config.p) {
        RunConfig check = lm.config;
        check.p = *opt.p_override;
        check.validate();
        log << "sample: p override " << lm.config.p << " -> " << check.p
            << " (new prefix rows are untrained; fine-tune with train-ar --init for quality)\n";
        model = std::make_unique<pipeline::ArModel>(
            pipeline::escalate_patch_size(*model, check.p, derive_seed(opt.seed, "sample.escalate")));
    }
    const std::size_t num_steps = opt.num_steps.value_or(lm.config.num_steps);
    const double cfg_scale = opt.cfg_scale.value_or(lm.config.cfg_scale);
    if (num_steps == 0) throw ConfigError("num_steps must be positive");
    if (!(cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be non-negative");

    SampleSummary sum;
    if (opt.count == 0) {
        // Nothing to generate, so nothing is written.
        log << "sample: 0 images requested, nothing written\n";
        return sum;
    }
    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "sample",
                 {{"checkpoint", opt.checkpoint.string()},
                  {"class", opt.label},
                  {"count", opt.count},
                  {"p", model->config().backbone.patch_size},
                  {"num_steps", num_steps},
                  {"cfg_scale", cfg_scale},
                  {"seed", opt.seed},
                  {"ema", opt.use_ema},
                  {"chunk", opt.chunk}},
                 &lm.config);
    JsonlWriter records(opt.out_dir / "samples.jsonl");

    sum.ar_steps = model->config().layout().num_patches();
    const bool binary = model->config().binary_targets;
    for (std::size_t first = 0, chunk_id = 0; first < opt.count; first += opt.chunk, ++chunk_id) {
        const std::size_t n = std::min(opt.chunk, opt.count - first);
        pipeline::GenerationRequest req;
        req.labels.assign(n, opt.label);
        req.num_steps = num_steps;
        req.cfg_scale = cfg_scale;
        req.seed = derive_seed(opt.seed, "sample.chunk." + std::to_string(chunk_id));
        const auto res = pipeline::generate(*model, req);
        sum.ar_steps = res.ar_steps;
        for (std::size_t i = 0; i < n; ++i) {
            char stem[64];
            std::snprintf(stem, sizeof(stem), "sample_s%llu_%05zu", static_cast<unsigned long long>(opt.seed),
                          first + i);
            const toktrain::Image img = binary ? lm.tokenizer->decode(res.grids[i]) : lm.tokenizer->decode(res.latents[i]);
            const fs::path ppm = opt.out_dir / (std::string(stem) + ".ppm");
            toktrain::write_ppm(ppm, img);
            sum.files.push_back(ppm);
            json rec{{"index", first + i}, {"label", opt.label}, {"oracle", toktrain::hue_oracle(img, classes)},
                     {"image", ppm.filename().string()}};
            if (binary) {
                const fs::path blt = opt.out_dir / (std::string(stem) + ".blt");
                binq::write_packed_file(blt, res.grids[i]);
                sum.files.push_back(blt);
                rec["latents"] = blt.filename().string();
            }
            records.write(rec);
        }
        sum.images += n;
    }
    write_json(opt.out_dir / "sample.json", {{"images", sum.images}, {"ar_steps_per_image", sum.ar_steps}});
    log << "sample: " << sum.images << " images, ar_steps=" << sum.ar_steps << " per image -> "
        << opt.out_dir.string() << "\n";
    return sum;
}

// ---- eval-head -----------------------------------------------------------------

evalx::JointSpec parse_joint_spec(const std::string& text) {
    if (text == "xor") return evalx::JointSpec::xor2();
    if (text.rfind("point:", 0) == 0) {
        std::size_t d = 0, index = 0;
        char tail = 0;
        if (std::sscanf(text.c_str(), "point:%zu:%zu%c", &d, &index, &tail) == 2 && d >= 1 && d <= 8 &&
            index < (std::size_t{1} << d)) {
            return evalx::JointSpec::point_mass(d, index);
        }
    }
    throw ConfigError("joint spec '" + text + "': expected 'xor' or 'point:<d>:<index>' with d in [1, 8]");
}

evalx::JointReport eval_head(const EvalHeadOptions& opt, std::ostream& log) {
    const evalx::JointSpec spec = parse_joint_spec(opt.spec);
    evalx::JointExperimentConfig ex = opt.experiment;
    ex.head.d = spec.d;
    if (ex.eval_samples == 0) throw ConfigError("samples must be positive");
    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "eval-head",
                 {{"spec", opt.spec},
                  {"bitwise_steps", ex.bitwise_steps},
                  {"diffusion_steps", ex.diffusion_steps},
                  {"samples", ex.eval_samples},
                  {"num_steps", ex.num_steps},
                  {"seed", ex.seed}},
                 nullptr);
    const auto t0 = Clock::now();
    const evalx::JointReport rep = evalx::joint_vs_factorized(spec, ex);
    write_json(opt.out_dir / "eval_head.json", {{"spec", opt.spec},
                                                {"samples", rep.samples},
                                                {"truth", rep.truth},
                                                {"factorized", rep.factorized},
                                                {"diffusion", rep.diffusion},
                                                {"TV_factorized", rep.tv_factorized},
                                                {"TV_diffusion", rep.tv_diffusion},
                                                {"sampling_error", rep.sampling_error},
                                                {"wall_time_s", seconds_since(t0)}});
    log << "eval-head " << opt.spec << ": TV_factorized " << rep.tv_factorized << " TV_diffusion "
        << rep.tv_diffusion << " (sampling error " << rep.sampling_error << ")\n";
    return rep;
}

// ---- hist ----------------------------------------------------------------------

std::vector<flowhead::Histogram> hist(const HistOptions& opt, std::ostream& log) {
    if (opt.t_values.empty()) throw ConfigError("hist needs at least one t");
    for (double t : opt.t_values)
        if (!(t >= 0.0 && t < 1.0)) throw ConfigError("t values must lie in [0, 1), got " + fmt_double(t));
    if (opt.images == 0) throw ConfigError("images must be positive");
    LoadedModel lm = load_ar_checkpoint(opt.checkpoint, opt.use_ema);
    const pipeline::ArConfig ac = lm.model->config();

    toktrain::SyntheticDataset data(lm.config.data(derive_seed(opt.seed, "hist.data")));
    std::vector<Matrix> seqs;
    std::vector<int> labels;
    for (const auto& s : data.take(opt.images)) {
        seqs.push_back(model_sequence(*lm.tokenizer, ac, s.image));
        labels.push_back(s.label);
    }
    Rng rng(derive_seed(opt.seed, "hist.noise"));
    const auto hists = evalx::head_output_histogram(*lm.model, seqs, labels, opt.t_values, rng);

    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "hist",
                 {{"checkpoint", opt.checkpoint.string()},
                  {"t", opt.t_values},
                  {"images", opt.images},
                  {"seed", opt.seed},
                  {"ema", opt.use_ema}},
                 &lm.config);
    json summary = json::array();
    for (const auto& h : hists) {
        const std::string name = "hist_t" + fmt_double(h.t) + ".csv";
        std::string csv = "bin_left,bin_right,count\n";
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            csv += fmt_double(h.edges[b]) + "," + fmt_double(h.edges[b + 1]) + "," + std::to_string(h.counts[b]) + "\n";
        }
        write_text(opt.out_dir / name, csv);
        summary.push_back({{"t", h.t}, {"total", h.total}, {"frac_abs_gt_half", h.frac_abs_gt_half}, {"csv", name}});
        log << "hist t=" << h.t << ": frac |f| > 0.5 = " << h.frac_abs_gt_half << " -> " << name << "\n";
    }
    write_json(opt.out_dir / "hist.json", summary);
    return hists;
}

// ---- sweep ---------------------------------------------------------------------

std::vector<evalx::SweepRow> sweep(const SweepCommandOptions& opt, std::ostream& log) {
    if (opt.steps.empty() == opt.cfg_scales.empty()) {
        throw ConfigError("sweep needs exactly one of --steps or --cfg-scales");
    }
    for (std::size_t n : opt.steps)
        if (n == 0) throw ConfigError("sweep step counts must be positive");
    for (double s : opt.cfg_scales)
        if (!(s >= 0.0)) throw ConfigError("cfg scales must be non-negative");
    LoadedModel lm = load_ar_checkpoint(opt.checkpoint, opt.use_ema);
    const evalx::SweepOptions so{.samples_per_class = opt.samples_per_class, .seed = opt.seed};
    const std::size_t num_steps = opt.num_steps.value_or(lm.config.num_steps);
    const double cfg_scale = opt.cfg_scale.value_or(lm.config.cfg_scale);

    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "sweep",
                 {{"checkpoint", opt.checkpoint.string()},
                  {"steps", opt.steps},
                  {"cfg_scales", opt.cfg_scales},
                  {"num_steps", num_steps},
                  {"cfg_scale", cfg_scale},
                  {"samples_per_class", opt.samples_per_class},
                  {"seed", opt.seed},
                  {"ema", opt.use_ema}},
                 &lm.config);
    const auto rows = opt.steps.empty() ? evalx::cfg_sweep(*lm.model, *lm.tokenizer, opt.cfg_scales, num_steps, so)
                                        : evalx::step_sweep(*lm.model, *lm.tokenizer, opt.steps, cfg_scale, so);
    std::string csv = "num_steps,cfg_scale,samples,accuracy,undecided,bit_mean,binary_fraction,ar_steps\n";
    json j = json::array();
    for (const auto& r : rows) {
        csv += std::to_string(r.num_steps) + "," + fmt_double(r.cfg_scale) + "," + std::to_string(r.samples) + "," +
               fmt_double(r.accuracy) + "," + fmt_double(r.undecided) + "," + fmt_double(r.bit_mean) + "," +
               fmt_double(r.binary_fraction) + "," + std::to_string(r.ar_steps) + "\n";
        j.push_back({{"num_steps", r.num_steps},
                     {"cfg_scale", r.cfg_scale},
                     {"samples", r.samples},
                     {"accuracy", r.accuracy},
                     {"undecided", r.undecided},
                     {"bit_mean", r.bit_mean},
                     {"binary_fraction", r.binary_fraction},
                     {"ar_steps", r.ar_steps}});
        log << "sweep N=" << r.num_steps << " cfg=" << r.cfg_scale << ": accuracy " << r.accuracy << "\n";
    }
    write_text(opt.out_dir / "sweep.csv", csv);
    write_json(opt.out_dir / "sweep.json", j);
    return rows;
}

// ---- bench ---------------------------------------------------------------------

std::vector<BenchRow> bench(const BenchOptions& opt, std::ostream& log) {
    if (opt.patch_sizes.empty()) throw ConfigError("bench needs at least one patch size");
    if (opt.images == 0 || opt.num_steps == 0) throw ConfigError("images and num_steps must be positive");
    std::vector<RunConfig> configs;
    for (std::size_t p : opt.patch_sizes) {
        RunConfig c = opt.config;
        c.p = p;
        c.image_size = opt.grid * c.f;
        c.validate();
        configs.push_back(c);
    }
    prepare_out_dir(opt.out_dir);
    echo_command(opt.out_dir, "bench",
                 {{"grid", opt.grid},
                  {"patch_sizes", opt.patch_sizes},
                  {"images", opt.images},
                  {"num_steps", opt.num_steps},
                  {"seed", opt.seed}},
                 &opt.config);
    std::vector<BenchRow> rows;
    json j = json::array();
    for (const auto& c : configs) {
        pipeline::ArModel model(c.ar(), derive_seed(opt.seed, "bench.init"));
        pipeline::GenerationRequest req;
        req.labels.assign(opt.images, 0);
        req.num_steps = opt.num_steps;
        req.cfg_scale = c.cfg_scale;
        req.seed = derive_seed(opt.seed, "bench.sample");
        const auto t0 = Clock::now();
        const auto res = pipeline::generate(model, req);
        BenchRow row{.p = c.p, .tokens = opt.grid * opt.grid, .ar_steps = res.ar_steps, .seconds = seconds_since(t0)};
        row.tokens_per_s = static_cast<double>(row.tokens * opt.images) / row.seconds;
        if (row.ar_steps * c.p * c.p != row.tokens) throw Error("bench: AR step count does not match tokens / p^2");
        rows.push_back(row);
        j.push_back({{"p", row.p},
                     {"grid", opt.grid},
                     {"tokens", row.tokens},
                     {"ar_steps", row.ar_steps},
                     {"images", opt.images},
                     {"num_steps", opt.num_steps},
                     {"seconds", row.seconds},
                     {"tokens_per_s", row.tokens_per_s}});
        log << "bench p=" << row.p << ": " << row.tokens << " tokens in " << row.ar_steps << " AR steps, "
            << row.seconds << " s (" << row.tokens_per_s << " tokens/s)\n";
    }
    write_json(opt.out_dir / "bench.json", j);
    return rows;
}

// ---- inspect -------------------------------------------------------------------

void inspect(const std::vector<fs::path>& files, bool as_json, std::ostream& out) {
    for (const auto& path : files) {
        const auto bytes = binq::read_file_bytes(path);
        const binq::PackedHeader h = binq::read_packed_header(bytes);
        if (as_json) {
            out << json{{"file", path.string()},
                        {"height", h.height},
                        {"width", h.width},
                        {"d", h.d},
                        {"payload_bytes", h.payload_bytes()},
                        {"file_bytes", bytes.size()}}
                       .dump()
                << "\n";
        } else {
            out << path.string() << ": BLT1 height=" << h.height << " width=" << h.width << " d=" << h.d
                << " payload_bytes=" << h.payload_bytes() << " file_bytes=" << bytes.size() << "\n";
        }
    }
}

}  // namespace bitdance::app
