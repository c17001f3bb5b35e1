#include "bitdance/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bitdance/error.hpp"

namespace bitdance::evalx {

std::uint64_t token_cls_param_count(std::uint64_t h, std::uint64_t d) {
    if (d > 62) throw InvalidInput("token_cls_param_count: d=" + std::to_string(d) + " exceeds 62");
    const std::uint64_t codes = std::uint64_t{1} << d;
    if (h != 0 && codes > std::numeric_limits<std::uint64_t>::max() / h) {
        throw InvalidInput("token_cls_param_count: h * 2^d overflows 64 bits");
    }
    return h * codes;
}

std::uint64_t bitwise_output_param_count(std::uint64_t h, std::uint64_t d) { return h * 2 * d; }

std::uint64_t diffusion_head_param_count(const flowhead::HeadConfig& cfg) {
    const std::uint64_t w = cfg.head_width, d = cfg.d, h = cfg.cond_width, r = cfg.mlp_ratio;
    auto linear = [](std::uint64_t in, std::uint64_t out) { return in * out + out; };
    std::uint64_t block = linear(w, 6 * w) + linear(w, 3 * w) + linear(w, w) + linear(w, r * w) + linear(r * w, w);
    return linear(d, w) + linear(h, w) + 2 * linear(w, w) + cfg.depth * block + linear(w, 2 * w) + linear(w, d);
}

// ---- bit-wise head -------------------------------------------------------------

BitwiseHead::BitwiseHead(std::size_t h, std::size_t d, nn::ParamStore& store, const std::string& prefix, Rng& rng)
    : d_(d) {
    if (h == 0 || d == 0) throw ConfigError("bitwise head sizes must be positive");
    weight_ = store.add(prefix + "weight", nn::normal_init(h, 2 * d, 0.02, rng));
}

ad::Var BitwiseHead::logits(const ad::Var& z) const {
    if (z.cols() != weight_.rows()) throw InvalidInput("bitwise head: condition width mismatch");
    return ad::matmul(z, weight_);
}

ad::Var BitwiseHead::bit_logits(const ad::Var& z) const {
    ad::Var l = logits(z);
    // Column j of the result is l_{2j+1} - l_{2j}.
    Matrix select(2 * d_, d_);
    for (std::size_t j = 0; j < d_; ++j) {
        select(2 * j, j) = -1.0;
        select(2 * j + 1, j) = 1.0;
    }
    return ad::matmul(l, ad::Var::constant(std::move(select)));
}

ad::Var BitwiseHead::loss(const ad::Var& z, const Matrix& targets) const {
    if (targets.cols() != d_ || targets.rows() != z.rows()) throw InvalidInput("bitwise head: target shape mismatch");
    Matrix y(targets.rows(), d_);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (targets[i] != 1.0 && targets[i] != -1.0) throw InvalidInput("bitwise head: targets must be +-1");
        y[i] = targets[i] > 0 ? 1.0 : 0.0;
    }
    return ad::bce_with_logits(bit_logits(z), y);
}

Matrix BitwiseHead::sample(const Matrix& z, Rng& rng) const {
    ad::NoGradGuard guard;
    const Matrix l = bit_logits(ad::Var::constant(z)).value();
    Matrix out(l.rows(), d_);
    for (std::size_t i = 0; i < l.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-l[i]));
        out[i] = rng.bernoulli(p) ? 1.0 : -1.0;
    }
    return out;
}

// ---- joint spec ----------------------------------------------------------------

void JointSpec::validate() const {
    if (d == 0 || d > 8) throw ConfigError("joint spec: d must lie in [1, 8]");
    if (probs.size() != (std::size_t{1} << d)) throw ConfigError("joint spec: table must have 2^d entries");
    double total = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw ConfigError("joint spec: probabilities must be >= 0");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("joint spec: probabilities must sum to 1");
}

JointSpec JointSpec::xor2() { return {2, {0.5, 0.0, 0.0, 0.5}}; }

JointSpec JointSpec::point_mass(std::size_t d, std::size_t index) {
    JointSpec s{d, std::vector<double>(std::size_t{1} << d, 0.0)};
    s.probs.at(index) = 1.0;
    return s;
}

Matrix JointSpec::draw(std::size_t count, Rng& rng) const {
    validate();
    Matrix out(count, d);
    for (std::size_t r = 0; r < count; ++r) {
        double u = rng.uniform();
        std::size_t idx = 0;
        while (idx + 1 < probs.size() && u >= probs[idx]) u -= probs[idx++];
        // Never land on a zero-probability code through rounding at the end.
        while (probs[idx] == 0.0 && idx > 0) --idx;
        for (std::size_t j = 0; j < d; ++j) out(r, j) = (idx >> (d - 1 - j)) & 1 ? 1.0 : -1.0;
    }
    return out;
}

std::size_t token_index(std::span<const double> row) {
    std::size_t idx = 0;
    for (double v : row) idx = (idx << 1) | (v > 0.0 ? 1 : 0);
    return idx;
}

std::vector<double> empirical_distribution(const Matrix& tokens, std::size_t d) {
    if (tokens.cols() != d || d > 20) throw InvalidInput("empirical_distribution: bad token width");
    std::vector<double> out(std::size_t{1} << d, 0.0);
    if (tokens.rows() == 0) return out;
    for (std::size_t r = 0; r < tokens.rows(); ++r) out[token_index(tokens.row(r))] += 1.0;
    for (double& v : out) v /= static_cast<double>(tokens.rows());
    return out;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw InvalidInput("total_variation: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return 0.5 * s;
}

double sampling_error_bound(std::size_t outcomes, std::size_t draws) {
    if (draws == 0) return 1.0;
    return 0.5 * std::sqrt(static_cast<double>(outcomes) / static_cast<double>(draws));
}

namespace {

Matrix tile_row(const Matrix& row, std::size_t count) {
    Matrix out(count, row.cols());
    for (std::size_t r = 0; r < count; ++r) std::copy(row.row(0).begin(), row.row(0).end(), out.row(r).begin());
    return out;
}

}  // namespace

JointReport joint_vs_factorized(const JointSpec& spec, const JointExperimentConfig& cfg) {
    spec.validate();
    if (cfg.batch == 0 || cfg.eval_samples == 0) throw ConfigError("joint experiment: batch and samples must be positive");
    Rng rng(cfg.seed);
    const Matrix cond = rng.normal_matrix(1, cfg.cond_width);
    Rng data_rng = rng.fork();

    JointReport rep;
    rep.truth = spec.probs;
    rep.samples = cfg.eval_samples;
    rep.sampling_error = sampling_error_bound(spec.probs.size(), cfg.eval_samples);
    const Matrix z_batch = tile_row(cond, cfg.batch);
    const Matrix z_eval = tile_row(cond, cfg.eval_samples);

    {
        nn::ParamStore store;
        BitwiseHead head(cfg.cond_width, spec.d, store, "bitwise.", rng);
        nn::AdamW opt(store, {.lr = cfg.bitwise_lr, .grad_clip = 0.0});
        for (std::size_t s = 0; s < cfg.bitwise_steps; ++s) {
            store.zero_grad();
            ad::backward(head.loss(ad::Var::constant(z_batch), spec.draw(cfg.batch, data_rng)));
            opt.step();
        }
        Rng sample_rng(cfg.seed + 1);
        rep.factorized = empirical_distribution(head.sample(z_eval, sample_rng), spec.d);
    }
    {
        flowhead::HeadConfig hc = cfg.head;
        hc.d = spec.d;
        hc.n = 1;
        hc.cond_width = cfg.cond_width;
        nn::ParamStore store;
        flowhead::FlowHead head(hc, store, "flowhead.", rng);
        nn::AdamW opt(store, {.lr = cfg.diffusion_lr, .grad_clip = 1.0, .warmup_steps = cfg.diffusion_steps / 20});
        for (std::size_t s = 0; s < cfg.diffusion_steps; ++s) {
            store.zero_grad();
            ad::backward(flowhead::flow_loss(head, spec.draw(cfg.batch, data_rng), ad::Var::constant(z_batch), 1,
                                             data_rng, hc.delta_clamp));
            opt.step();
        }
        Rng sample_rng(cfg.seed + 2);
        flowhead::SampleOptions so{.num_steps = cfg.num_steps, .delta_clamp = hc.delta_clamp};
        rep.diffusion = empirical_distribution(flowhead::sample(head, z_eval, Matrix(), 1, spec.d, so, sample_rng),
                                               spec.d);
    }
    rep.tv_factorized = total_variation(rep.factorized, rep.truth);
    rep.tv_diffusion = total_variation(rep.diffusion, rep.truth);
    return rep;
}

// ---- sweeps --------------------------------------------------------------------

SweepRow oracle_accuracy(const pipeline::ArModel& model, const toktrain::Tokenizer& tok, std::size_t num_steps,
                         double cfg_scale, const SweepOptions& opt) {
    const std::size_t classes = model.config().backbone.num_classes;
    pipeline::GenerationRequest req;
    for (std::size_t i = 0; i < opt.samples_per_class * classes; ++i) req.labels.push_back(static_cast<int>(i % classes));
    req.num_steps = num_steps;
    req.cfg_scale = cfg_scale;
    req.seed = opt.seed;
    const auto res = pipeline::generate(model, req);

    SweepRow row;
    row.num_steps = num_steps;
    row.cfg_scale = cfg_scale;
    row.samples = req.labels.size();
    row.ar_steps = req.labels.empty() ? 0 : res.ar_steps;
    if (req.labels.empty()) return row;
    std::size_t correct = 0, undecided = 0, bits = 0, binary = 0;
    double bit_sum = 0.0;
    for (std::size_t i = 0; i < res.grids.size(); ++i) {
        const toktrain::Image img = res.latents.empty() ? tok.decode(res.grids[i]) : tok.decode(res.latents[i]);
        const int pred = toktrain::hue_oracle(img, classes);
        correct += pred == req.labels[i];
        undecided += pred < 0;
        if (res.latents.empty()) {
            for (auto b : res.grids[i].bits()) bit_sum += b;
            bits += res.grids[i].bits().size();
            binary += res.grids[i].bits().size();
        } else {
            for (double v : res.latents[i].values.values()) {
                bit_sum += v;
                binary += std::abs(v) == 1.0;
            }
            bits += res.latents[i].values.size();
        }
    }
    const double n = static_cast<double>(row.samples);
    row.accuracy = static_cast<double>(correct) / n;
    row.undecided = static_cast<double>(undecided) / n;
    row.bit_mean = bit_sum / static_cast<double>(bits);
    row.binary_fraction = static_cast<double>(binary) / static_cast<double>(bits);
    return row;
}

std::vector<SweepRow> step_sweep(const pipeline::ArModel& model, const toktrain::Tokenizer& tok,
                                 std::span<const std::size_t> steps, double cfg_scale, const SweepOptions& opt) {
    std::vector<SweepRow> rows;
    for (std::size_t n : steps) rows.push_back(oracle_accuracy(model, tok, n, cfg_scale, opt));
    return rows;
}

std::vector<SweepRow> cfg_sweep(const pipeline::ArModel& model, const toktrain::Tokenizer& tok,
                                std::span<const double> scales, std::size_t num_steps, const SweepOptions& opt) {
    std::vector<SweepRow> rows;
    for (double s : scales) rows.push_back(oracle_accuracy(model, tok, num_steps, s, opt));
    return rows;
}

// ---- trained-head output histograms ---------------------------------------

std::vector<flowhead::Histogram> head_output_histogram(const pipeline::ArModel& model,
                                                       std::span<const Matrix> sequences, std::span<const int> labels,
                                                       std::span<const double> t_values, Rng& rng) {
    ad::NoGradGuard no_grad;
    const Matrix z = pipeline::conditioning_rows(model, sequences, labels).value();
    Matrix targets;
    for (const auto& s : sequences) targets.append_rows(s);
    return flowhead::output_histogram(model.head(), targets, z, model.config().layout().patch_tokens(), t_values, rng);
}

// ---- continuous-target ablation ------------------------------------------

std::pair<double, double> nearest_neighbor_distance(const Matrix& generated, const Matrix& support) {
    if (support.rows() == 0 || generated.cols() != support.cols()) {
        throw InvalidInput("nearest_neighbor_distance: empty support or width mismatch");
    }
    double sum = 0.0, worst = 0.0;
    for (std::size_t r = 0; r < generated.rows(); ++r) {
        double best = std::numeric_limits<double>::infinity();
        auto g = generated.row(r);
        for (std::size_t s = 0; s < support.rows() && best > 0.0; ++s) {
            auto q = support.row(s);
            double dist = 0.0;
            for (std::size_t c = 0; c < g.size() && dist < best; ++c) dist += (g[c] - q[c]) * (g[c] - q[c]);
            best = std::min(best, dist);
        }
        best = std::sqrt(best);
        sum += best;
        worst = std::max(worst, best);
    }
    return {generated.rows() ? sum / static_cast<double>(generated.rows()) : 0.0, worst};
}

namespace {

AblationRow run_variant(const AblationConfig& cfg, bool binary) {
    AblationRow row;
    row.variant = binary ? "binary" : "continuous";

    toktrain::TokenizerConfig tc = cfg.tokenizer;
    tc.quantize = binary;
    toktrain::Tokenizer tok(tc, cfg.seed);
    toktrain::TokenizerTrainer ttr(tok, cfg.tokenizer_train);
    const std::size_t image_size = cfg.ar.grid_h * tc.downsample;
    if (cfg.ar.grid_w != cfg.ar.grid_h) throw ConfigError("ablation: square token grids only");
    toktrain::SyntheticDataset tok_data({image_size, cfg.ar.backbone.num_classes, cfg.seed + 1});
    for (std::size_t s = 0; s < cfg.tokenizer_steps; ++s) {
        std::vector<toktrain::Image> batch;
        for (std::size_t i = 0; i < cfg.tokenizer_train.batch_size; ++i) batch.push_back(tok_data.next().image);
        ttr.step(batch);
    }

    pipeline::ArConfig ac = cfg.ar;
    ac.binary_targets = binary;
    pipeline::ArModel model(ac, cfg.seed + 2);
    pipeline::ArTrainer tr(model, cfg.ar_train, cfg.seed + 3);
    toktrain::SyntheticDataset ar_data({image_size, ac.backbone.num_classes, cfg.seed + 4});
    for (std::size_t s = 0; s < cfg.ar_steps; ++s) {
        std::vector<int> labels;
        std::vector<binq::BinaryGrid> grids;
        std::vector<binq::LatentGrid> latents;
        for (std::size_t i = 0; i < cfg.ar_batch; ++i) {
            auto sample = ar_data.next();
            labels.push_back(sample.label);
            if (binary) {
                grids.push_back(tok.tokenize(sample.image));
            } else {
                latents.push_back(tok.encode(sample.image));
            }
        }
        if (binary) {
            tr.step(grids, labels);
        } else {
            tr.step(latents, labels);
        }
    }
    const pipeline::ArModel ema = tr.ema_model();

    // Support set and reconstruction quality on fresh training-distribution images.
    toktrain::SyntheticDataset support_data({image_size, ac.backbone.num_classes, cfg.seed + 5});
    Matrix support;
    double psnr_sum = 0.0;
    for (std::size_t i = 0; i < cfg.support_images; ++i) {
        const auto img = support_data.next().image;
        if (binary) {
            const auto g = tok.tokenize(img);
            support.append_rows(g.as_matrix());
            psnr_sum += toktrain::psnr(img, tok.decode(g));
        } else {
            const auto g = tok.encode(img);
            support.append_rows(g.values);
            psnr_sum += toktrain::psnr(img, tok.decode(g));
        }
    }
    row.recon_psnr = cfg.support_images ? psnr_sum / static_cast<double>(cfg.support_images) : 0.0;

    const SweepRow acc = oracle_accuracy(ema, tok, cfg.num_steps, cfg.cfg_scale, cfg.eval);
    row.oracle_accuracy = acc.accuracy;

    pipeline::GenerationRequest req;
    for (std::size_t i = 0; i < cfg.eval.samples_per_class * ac.backbone.num_classes; ++i)
        req.labels.push_back(static_cast<int>(i % ac.backbone.num_classes));
    req.num_steps = cfg.num_steps;
    req.cfg_scale = cfg.cfg_scale;
    req.seed = cfg.eval.seed;
    const auto res = pipeline::generate(ema, req);
    Matrix generated;
    for (std::size_t i = 0; i < res.grids.size(); ++i)
        generated.append_rows(binary ? res.grids[i].as_matrix() : res.latents[i].values);
    if (generated.rows() > 0 && support.rows() > 0) {
        const auto [mean, worst] = nearest_neighbor_distance(generated, support);
        row.nn_distance_mean = mean;
        row.nn_distance_max = worst;
        std::size_t corners = 0;
        for (std::size_t r = 0; r < generated.rows(); ++r) {
            bool corner = true;
            for (double v : generated.row(r)) corner &= std::abs(v) == 1.0;
            corners += corner;
        }
        row.corner_fraction = static_cast<double>(corners) / static_cast<double>(generated.rows());
    }
    return row;
}

}  // namespace

std::vector<AblationRow> continuous_target_ablation(const AblationConfig& cfg) {
    return {run_variant(cfg, true), run_variant(cfg, false)};
}

}  // namespace bitdance::evalx
