#include "bitdance/pipeline.hpp"

#include <cmath>
#include <sstream>

#include "bitdance/error.hpp"

namespace bitdance::pipeline {

void PatchLayout::validate() const {
    if (p == 0 || grid_h == 0 || grid_w == 0) throw ConfigError("patch layout sizes must be positive");
    if (grid_h % p != 0 || grid_w % p != 0) {
        throw ConfigError("patch_size " + std::to_string(p) + " must divide the token grid " + std::to_string(grid_h) +
                          "x" + std::to_string(grid_w));
    }
}

std::vector<backbone::GridPos> PatchLayout::order() const {
    validate();
    std::vector<backbone::GridPos> out;
    out.reserve(num_tokens());
    for (std::size_t pr = 0; pr < grid_h / p; ++pr)
        for (std::size_t pc = 0; pc < grid_w / p; ++pc)
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t c = 0; c < p; ++c) out.push_back({pr * p + r, pc * p + c});
    return out;
}

Matrix flatten_patch_raster(const binq::BinaryGrid& grid, std::size_t p) {
    const PatchLayout layout{p, grid.height(), grid.width()};
    const auto order = layout.order();
    Matrix seq(order.size(), grid.d());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto bits = grid.token(order[i].row, order[i].col);
        for (std::size_t c = 0; c < grid.d(); ++c) seq(i, c) = bits[c];
    }
    return seq;
}

binq::BinaryGrid unflatten_patch_raster(const Matrix& seq, const PatchLayout& layout) {
    const auto order = layout.order();
    if (seq.rows() != order.size()) throw InvalidInput("unflatten: sequence length does not match layout");
    binq::BinaryGrid grid(layout.grid_h, layout.grid_w, seq.cols());
    std::vector<std::int8_t> bits(seq.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
        for (std::size_t c = 0; c < seq.cols(); ++c) bits[c] = seq(i, c) >= 0.0 ? 1 : -1;
        grid.set_token(order[i].row, order[i].col, bits);
    }
    return grid;
}

Matrix raster_to_patch_order(const Matrix& raster, const PatchLayout& layout) {
    const auto order = layout.order();
    if (raster.rows() != order.size()) throw InvalidInput("raster rows do not match the layout");
    Matrix seq(order.size(), raster.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto src = raster.row(order[i].row * layout.grid_w + order[i].col);
        std::copy(src.begin(), src.end(), seq.row(i).begin());
    }
    return seq;
}

Matrix patch_to_raster_order(const Matrix& seq, const PatchLayout& layout) {
    const auto order = layout.order();
    if (seq.rows() != order.size()) throw InvalidInput("sequence length does not match the layout");
    Matrix raster(order.size(), seq.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto src = seq.row(i);
        std::copy(src.begin(), src.end(), raster.row(order[i].row * layout.grid_w + order[i].col).begin());
    }
    return raster;
}

void ArConfig::sync_head() {
    head.d = backbone.d;
    head.n = backbone.patch_size * backbone.patch_size;
    head.cond_width = backbone.width;
}

void ArConfig::validate() const {
    backbone.validate();
    head.validate();
    layout().validate();
    if (head.d != backbone.d) throw ConfigError("head d must equal backbone d");
    if (head.n != backbone.patch_size * backbone.patch_size) throw ConfigError("head n must equal patch_size^2");
    if (head.cond_width != backbone.width) throw ConfigError("head condition width must equal backbone width");
}

backbone::SequenceLayout ArConfig::sequence_layout() const {
    return {1, backbone.patch_size, layout().num_patches()};
}

ArModel::ArModel(const ArConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.sync_head();
    cfg_.validate();
    Rng rng(seed);
    backbone_ = std::make_unique<backbone::Backbone>(cfg_.backbone, params_, "backbone.", rng);
    head_ = std::make_unique<flowhead::FlowHead>(cfg_.head, params_, "flowhead.", rng);
}

ArModel ArModel::clone() const {
    ArModel out(cfg_, 0);
    out.params_.load_snapshot(params_.snapshot());
    return out;
}

namespace {

void check_batch(const ArModel& model, std::size_t sequences, std::size_t labels) {
    if (sequences == 0) throw InvalidInput("empty batch");
    if (sequences != labels) throw InvalidInput("one label per sequence required");
    (void)model;
}

Matrix stack(std::span<const Matrix> parts, std::size_t rows_each) {
    Matrix out;
    for (const auto& m : parts) out.append_rows(rows_each == m.rows() ? m : m.slice_rows(0, rows_each));
    return out;
}

}  // namespace

ad::Var conditioning_rows(const ArModel& model, std::span<const Matrix> sequences, std::span<const int> labels) {
    check_batch(model, sequences.size(), labels.size());
    const ArConfig& cfg = model.config();
    const PatchLayout layout = cfg.layout();
    const std::size_t n_tok = layout.num_tokens(), pp = layout.patch_tokens();
    for (const auto& s : sequences)
        if (s.rows() != n_tok || s.cols() != cfg.backbone.d) throw InvalidInput("ar_loss: sequence shape mismatch");

    const auto order = layout.order();
    const std::vector<backbone::GridPos> input_pos(order.begin(), order.end() - static_cast<std::ptrdiff_t>(pp));
    Matrix inputs;
    if (!input_pos.empty()) inputs = stack(sequences, input_pos.size());

    ad::Var x = model.net().embed(labels, inputs, input_pos);
    const auto mask = backbone::build_block_causal_mask(cfg.sequence_layout(), cfg.sequence_layout().train_length());
    return model.net().forward(x, mask.key_ranges(sequences.size()));
}

ad::Var ar_loss(const ArModel& model, std::span<const Matrix> sequences, std::span<const int> labels,
                const flowhead::FlowDraw& draw, ad::Var* z_out, const flowhead::XPredictor* head) {
    ad::Var z = conditioning_rows(model, sequences, labels);
    if (z_out) *z_out = z;
    const ArConfig& cfg = model.config();
    return flowhead::flow_loss(head ? *head : model.head(), stack(sequences, cfg.layout().num_tokens()), z,
                               cfg.layout().patch_tokens(), draw, cfg.head.delta_clamp, cfg.binary_targets);
}

ad::Var next_token_reference_loss(const ArModel& model, std::span<const binq::BinaryGrid> grids,
                                  std::span<const int> labels, const flowhead::FlowDraw& draw) {
    check_batch(model, grids.size(), labels.size());
    const ArConfig& cfg = model.config();
    if (cfg.backbone.patch_size != 1) throw InvalidInput("next-token reference requires patch_size 1");
    const std::size_t h = cfg.grid_h, w = cfg.grid_w, n_tok = h * w, batch = grids.size();

    // Input i is token i-1 in raster order (i = 0 is the condition).
    std::vector<backbone::GridPos> pos;
    for (std::size_t i = 0; i + 1 < n_tok; ++i) pos.push_back({i / w, i % w});
    Matrix inputs, targets;
    for (const auto& g : grids) {
        if (g.height() != h || g.width() != w) throw InvalidInput("reference: grid shape mismatch");
        const Matrix m = g.as_matrix();
        inputs.append_rows(m.slice_rows(0, n_tok - 1));
        targets.append_rows(m);
    }
    ad::Var x = model.net().embed(labels, inputs, pos);

    std::vector<ad::KeyRange> causal(batch * n_tok);
    for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t i = 0; i < n_tok; ++i)
            causal[s * n_tok + i] = {static_cast<std::uint32_t>(s * n_tok),
                                     static_cast<std::uint32_t>(s * n_tok + i + 1)};
    ad::Var z = model.net().forward(x, causal);
    return flowhead::flow_loss(model.head(), targets, z, 1, draw, cfg.head.delta_clamp);
}

ArTrainer::ArTrainer(ArModel& model, TrainConfig cfg, std::uint64_t seed)
    : model_(&model),
      cfg_(cfg),
      opt_(model.params(), nn::AdamWConfig{.lr = cfg.lr,
                                           .weight_decay = cfg.weight_decay,
                                           .grad_clip = cfg.grad_clip,
                                           .warmup_steps = cfg.warmup_steps}),
      ema_(model.params(), cfg.ema_decay),
      rng_(seed) {
    if (!(cfg.cond_drop >= 0.0 && cfg.cond_drop <= 1.0)) throw ConfigError("cond_drop must lie in [0, 1]");
}

StepReport ArTrainer::step(std::span<const binq::BinaryGrid> grids, std::span<const int> labels) {
    check_batch(*model_, grids.size(), labels.size());
    std::vector<Matrix> seqs;
    seqs.reserve(grids.size());
    for (const auto& g : grids) seqs.push_back(flatten_patch_raster(g, model_->config().backbone.patch_size));
    return step_sequences(std::move(seqs), labels);
}

StepReport ArTrainer::step(std::span<const binq::LatentGrid> grids, std::span<const int> labels) {
    check_batch(*model_, grids.size(), labels.size());
    const ArConfig& cfg = model_->config();
    if (cfg.binary_targets) throw InvalidInput("latent training requires binary_targets = false");
    std::vector<Matrix> seqs;
    seqs.reserve(grids.size());
    for (const auto& g : grids) {
        if (g.height != cfg.grid_h || g.width != cfg.grid_w || g.d != cfg.backbone.d) {
            throw InvalidInput("latent grid shape does not match the model");
        }
        seqs.push_back(raster_to_patch_order(g.values, cfg.layout()));
    }
    return step_sequences(std::move(seqs), labels);
}

StepReport ArTrainer::step_sequences(std::vector<Matrix> seqs, std::span<const int> labels) {
    const ArConfig& cfg = model_->config();
    std::vector<int> used(labels.begin(), labels.end());
    for (int& l : used)
        if (rng_.bernoulli(cfg_.cond_drop)) l = backbone::kNullClass;
    const std::size_t groups = seqs.size() * cfg.layout().num_patches();
    const auto draw = flowhead::draw_flow_noise(groups, cfg.head.n, cfg.head.d, cfg.head.delta_clamp, rng_);

    model_->params().zero_grad();
    ad::Var loss = ar_loss(*model_, seqs, used, draw);
    StepReport rep;
    rep.step = opt_.step_count();
    rep.loss = loss.item();
    rep.lr = opt_.current_lr();
    if (!std::isfinite(rep.loss)) {
        std::ostringstream msg;
        msg << "AR loss became non-finite at step " << rep.step << " (lr=" << rep.lr << ")";
        throw TrainingDivergence(msg.str());
    }
    ad::backward(loss);
    rep.grad_norm = opt_.step();
    ema_.update(model_->params());
    return rep;
}

ArModel ArTrainer::ema_model() const {
    ArModel out = model_->clone();
    ema_.copy_to(out.params());
    return out;
}

namespace {

struct Streams {
    std::size_t batch = 0;
    bool guided = false;
    std::vector<int> labels;  // conditional streams, then null streams when guided
};

Streams make_streams(const ArModel& model, const GenerationRequest& req) {
    Streams s;
    s.batch = req.labels.size();
    s.guided = req.cfg_scale > 0.0;
    const std::size_t classes = model.config().backbone.num_classes;
    for (int l : req.labels) {
        if (l != backbone::kNullClass && (l < 0 || static_cast<std::size_t>(l) >= classes)) {
            throw InvalidInput("class " + std::to_string(l) + " outside valid range [0, " + std::to_string(classes - 1) +
                               "]");
        }
    }
    s.labels = req.labels;
    if (s.guided) s.labels.insert(s.labels.end(), s.batch, backbone::kNullClass);
    return s;
}

Matrix duplicate_if(const Matrix& m, bool dup) {
    if (!dup) return m;
    Matrix out = m;
    out.append_rows(m);
    return out;
}

// One AR step: split conditioning rows, sample, record.
Matrix sample_step(const ArModel& model, const Streams& st, const Matrix& hidden, std::size_t n,
                   const GenerationRequest& req, Rng& rng, GenerationResult& res) {
    const std::size_t rows = st.batch * n;
    const Matrix zc = hidden.slice_rows(0, rows);
    const Matrix zu = st.guided ? hidden.slice_rows(rows, rows) : Matrix();
    flowhead::SampleOptions opt;
    opt.num_steps = req.num_steps;
    opt.cfg_scale = req.cfg_scale;
    opt.delta_clamp = model.config().head.delta_clamp;
    opt.binarize = model.config().binary_targets;
    Matrix tokens = flowhead::sample(model.head(), zc, zu, n, model.config().head.d, opt, rng);
    ++res.ar_steps;
    if (req.record_trace) res.trace.push_back({zc, tokens});
    return tokens;
}

}  // namespace

GenerationResult generate(const ArModel& model, const GenerationRequest& req) {
    const ArConfig& cfg = model.config();
    const PatchLayout layout = cfg.layout();
    const auto order = layout.order();
    const std::size_t pp = layout.patch_tokens(), d = cfg.backbone.d;
    const Streams st = make_streams(model, req);
    GenerationResult res;
    if (st.batch == 0) return res;

    Rng rng(req.seed);
    backbone::KvCache cache = model.net().empty_cache(st.labels.size());
    const std::size_t first = cfg.sequence_layout().first_block();
    Matrix hidden = model.net().incremental_forward(cache, model.net().embed_first_block(st.labels).value(),
                                                    std::vector<std::size_t>(first, first));
    std::vector<Matrix> seqs(st.batch, Matrix(layout.num_tokens(), d));
    for (std::size_t m = 0; m < layout.num_patches(); ++m) {
        const Matrix tokens = sample_step(model, st, hidden, pp, req, rng, res);
        for (std::size_t s = 0; s < st.batch; ++s)
            for (std::size_t i = 0; i < pp; ++i) {
                auto src = tokens.row(s * pp + i);
                std::copy(src.begin(), src.end(), seqs[s].row(m * pp + i).begin());
            }
        if (m + 1 == layout.num_patches()) break;
        const std::span<const backbone::GridPos> pos(order.data() + m * pp, pp);
        const Matrix emb = model.net().embed_tokens(duplicate_if(tokens, st.guided), pos).value();
        hidden = model.net().incremental_forward(cache, emb, std::vector<std::size_t>(pp, cache.length + pp));
    }
    for (const auto& s : seqs) {
        res.grids.push_back(unflatten_patch_raster(s, layout));
        if (!cfg.binary_targets) res.latents.push_back({layout.grid_h, layout.grid_w, d, patch_to_raster_order(s, layout)});
    }
    return res;
}

GenerationResult generate_next_token_reference(const ArModel& model, const GenerationRequest& req) {
    const ArConfig& cfg = model.config();
    if (cfg.backbone.patch_size != 1) throw InvalidInput("next-token reference requires patch_size 1");
    const std::size_t h = cfg.grid_h, w = cfg.grid_w, d = cfg.backbone.d;
    const Streams st = make_streams(model, req);
    GenerationResult res;
    if (st.batch == 0) return res;

    Rng rng(req.seed);
    backbone::KvCache cache = model.net().empty_cache(st.labels.size());
    Matrix hidden = model.net().incremental_forward(cache, model.net().embed_first_block(st.labels).value(),
                                                    std::vector<std::size_t>{1});
    std::vector<binq::BinaryGrid> grids(st.batch, binq::BinaryGrid(h, w, d));
    std::vector<std::int8_t> bits(d);
    for (std::size_t i = 0; i < h * w; ++i) {
        const Matrix tokens = sample_step(model, st, hidden, 1, req, rng, res);
        for (std::size_t s = 0; s < st.batch; ++s) {
            for (std::size_t c = 0; c < d; ++c) bits[c] = tokens(s, c) >= 0.0 ? 1 : -1;
            grids[s].set_token(i / w, i % w, bits);
        }
        if (i + 1 == h * w) break;
        const backbone::GridPos pos{i / w, i % w};
        const Matrix emb = model.net().embed_tokens(duplicate_if(tokens, st.guided), {&pos, 1}).value();
        hidden = model.net().incremental_forward(cache, emb, std::vector<std::size_t>{cache.length + 1});
    }
    res.grids = std::move(grids);
    return res;
}

ArModel escalate_patch_size(const ArModel& model, std::size_t new_p, std::uint64_t seed) {
    ArConfig cfg = model.config();
    cfg.backbone.patch_size = new_p;
    cfg.sync_head();
    cfg.validate();
    ArModel out(cfg, seed);
    Rng rng(seed);
    const auto src = model.params().snapshot();
    for (const auto& name : out.params().names()) {
        Matrix& dst = out.params().get(name).mutable_value();
        if (name != "backbone.prefix") {
            auto it = src.find(name);
            if (it == src.end() || !it->second.same_shape(dst)) {
                throw CompatibilityError("escalation: parameter '" + name + "' missing or reshaped");
            }
            dst = it->second;
            continue;
        }
        auto it = src.find(name);
        const std::size_t keep = it == src.end() ? 0 : std::min(it->second.rows(), dst.rows());
        Matrix mean(1, dst.cols());
        for (std::size_t r = 0; r < keep; ++r)
            for (std::size_t c = 0; c < dst.cols(); ++c) {
                dst(r, c) = it->second(r, c);
                mean(0, c) += it->second(r, c) / static_cast<double>(keep);
            }
        for (std::size_t r = keep; r < dst.rows(); ++r)
            for (std::size_t c = 0; c < dst.cols(); ++c)
                dst(r, c) = keep > 0 ? mean(0, c) + 0.02 * rng.normal() : 0.5 * rng.normal();
    }
    return out;
}

}  // namespace bitdance::pipeline
