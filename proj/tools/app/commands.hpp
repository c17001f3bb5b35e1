#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "app/run_config.hpp"
#include "bitdance/evalx.hpp"
#include "bitdance/pipeline.hpp"
#include "bitdance/toktrain.hpp"

// One function per CLI verb. Each writes its artifacts under out_dir, echoes
// its fully resolved inputs to out_dir/command.json and reports progress on
// `log`. Errors are bitdance exceptions; the binary maps them to exit codes.
namespace bitdance::app {

namespace fs = std::filesystem;

// Explicit flag first, then $BITDANCE_OUT_DIR, then `fallback`.
fs::path resolve_out_dir(const std::optional<fs::path>& flag, const fs::path& fallback);

struct TrainSummary {
    std::size_t step = 0;
    double final_loss = 0.0;
    double wall_time_s = 0.0;
    fs::path checkpoint;
};

struct TrainTokenizerOptions {
    RunConfig config;
    fs::path out_dir;
    std::optional<fs::path> resume;
    std::size_t log_every = 100;
};

// Writes tokenizer.ck, metrics.jsonl (one record per step) and summary.json.
TrainSummary train_tokenizer(const TrainTokenizerOptions& opt, std::ostream& log);

struct TrainArOptions {
    RunConfig config;
    fs::path out_dir;
    // Exactly one source: a tokenizer checkpoint for a fresh run, an AR
    // checkpoint to initialize from (its EMA weights; a different p escalates
    // the patch size), or an AR checkpoint to resume.
    std::optional<fs::path> tokenizer;
    std::optional<fs::path> init;
    std::optional<fs::path> resume;
    std::size_t log_every = 100;
};

// Writes ar.ck (weights, EMA weights, optimizer and stream state, frozen
// tokenizer under "tokenizer."), metrics.jsonl and summary.json.
TrainSummary train_ar(const TrainArOptions& opt, std::ostream& log);

// A trained AR checkpoint ready for inference.
struct LoadedModel {
    RunConfig config;
    std::size_t step = 0;
    std::unique_ptr<toktrain::Tokenizer> tokenizer;
    std::unique_ptr<pipeline::ArModel> model;
};

// use_ema selects the EMA weights (the default for evaluation).
LoadedModel load_ar_checkpoint(const fs::path& path, bool use_ema = true);

struct SampleOptions {
    fs::path checkpoint;
    int label = 0;
    std::size_t count = 1;
    std::optional<std::size_t> p_override;
    std::optional<std::size_t> num_steps;
    std::optional<double> cfg_scale;
    std::uint64_t seed = 0;
    fs::path out_dir;
    bool use_ema = true;
    std::size_t chunk = 64;
};

struct SampleSummary {
    std::size_t images = 0;
    std::size_t ar_steps = 0;  // per image
    std::vector<fs::path> files;
};

// Writes sample_s<seed>_<index>.ppm and .blt pairs plus samples.jsonl.
SampleSummary sample(const SampleOptions& opt, std::ostream& log);

struct EvalHeadOptions {
    std::string spec = "xor";  // "xor" or "point:<d>:<index>"
    evalx::JointExperimentConfig experiment{};
    fs::path out_dir;
};

// Writes eval_head.json with truth, factorized, diffusion, tv_factorized,
// tv_diffusion and sampling_error.
evalx::JointReport eval_head(const EvalHeadOptions& opt, std::ostream& log);
evalx::JointSpec parse_joint_spec(const std::string& text);

struct HistOptions {
    fs::path checkpoint;
    std::vector<double> t_values{0.1, 0.5, 0.9};
    std::size_t images = 64;
    std::uint64_t seed = 0;
    fs::path out_dir;
    bool use_ema = true;
};

// Writes hist_t<t>.csv per t and hist.json with per-t summaries.
std::vector<flowhead::Histogram> hist(const HistOptions& opt, std::ostream& log);

struct SweepCommandOptions {
    fs::path checkpoint;
    std::vector<std::size_t> steps;    // sweep N at cfg_scale ...
    std::vector<double> cfg_scales;    // ... or sweep the scale at num_steps
    std::optional<std::size_t> num_steps;
    std::optional<double> cfg_scale;
    std::size_t samples_per_class = 10;
    std::uint64_t seed = 0;
    fs::path out_dir;
    bool use_ema = true;
};

// Writes sweep.csv and sweep.json.
std::vector<evalx::SweepRow> sweep(const SweepCommandOptions& opt, std::ostream& log);

struct BenchOptions {
    RunConfig config;
    std::size_t grid = 16;
    std::vector<std::size_t> patch_sizes{1, 2, 4};
    std::size_t images = 1;
    std::size_t num_steps = 10;
    std::uint64_t seed = 0;
    fs::path out_dir;
};

struct BenchRow {
    std::size_t p = 0;
    std::size_t tokens = 0;
    std::size_t ar_steps = 0;
    double seconds = 0.0;
    double tokens_per_s = 0.0;
};

// Generation throughput of a freshly initialized model per patch size.
// Writes bench.json.
std::vector<BenchRow> bench(const BenchOptions& opt, std::ostream& log);

// Prints one header line per packed latent file.
void inspect(const std::vector<fs::path>& files, bool json, std::ostream& out);

}  // namespace bitdance::app
