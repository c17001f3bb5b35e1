#include "bitdance/toktrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "bitdance/error.hpp"

namespace bitdance::toktrain {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(h, 360.0);
    if (h < 0) h += 360.0;
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Rgb out{0, 0, 0};
    switch (static_cast<int>(hp)) {
        case 0: out = {c, x, 0}; break;
        case 1: out = {x, c, 0}; break;
        case 2: out = {0, c, x}; break;
        case 3: out = {0, x, c}; break;
        case 4: out = {x, 0, c}; break;
        default: out = {c, 0, x}; break;
    }
    const double m = v - c;
    return {out.r + m, out.g + m, out.b + m};
}

// Returns hue in degrees, saturation and value.
void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double delta = mx - mn;
    v = mx;
    s = mx > 0 ? delta / mx : 0.0;
    if (delta <= 0) {
        h = 0;
        return;
    }
    if (mx == r) {
        h = 60.0 * std::fmod((g - b) / delta, 6.0);
    } else if (mx == g) {
        h = 60.0 * ((b - r) / delta + 2.0);
    } else {
        h = 60.0 * ((r - g) / delta + 4.0);
    }
    if (h < 0) h += 360.0;
}

}  // namespace

Matrix patchify(const Image& img, std::size_t f) {
    if (f == 0 || img.height % f != 0 || img.width % f != 0) {
        throw InvalidInput("patchify: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           " not divisible by " + std::to_string(f));
    }
    const std::size_t gh = img.height / f, gw = img.width / f;
    Matrix out(gh * gw, f * f * 3);
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc) {
            double* dst = out.row(pr * gw + pc).data();
            for (std::size_t r = 0; r < f; ++r)
                for (std::size_t c = 0; c < f; ++c)
                    for (std::size_t ch = 0; ch < 3; ++ch) *dst++ = img.at(pr * f + r, pc * f + c, ch);
        }
    return out;
}

Image unpatchify(const Matrix& patches, std::size_t grid_h, std::size_t grid_w, std::size_t f) {
    if (patches.rows() != grid_h * grid_w || patches.cols() != f * f * 3) {
        throw InvalidInput("unpatchify: patch matrix shape does not match grid");
    }
    Image img(grid_h * f, grid_w * f);
    for (std::size_t pr = 0; pr < grid_h; ++pr)
        for (std::size_t pc = 0; pc < grid_w; ++pc) {
            const double* src = patches.row(pr * grid_w + pc).data();
            for (std::size_t r = 0; r < f; ++r)
                for (std::size_t c = 0; c < f; ++c)
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        img.at(pr * f + r, pc * f + c, ch) = std::clamp(*src++, 0.0, 1.0);
        }
    return img;
}

double psnr(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width) throw InvalidInput("psnr: image shapes differ");
    double se = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) se += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
    const double mse = se / static_cast<double>(a.pixels.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    in.get();
    if (magic != "P6" || maxval != 255 || w == 0 || h == 0 || w * h > (std::size_t{1} << 28)) {
        throw FormatError(path.string() + ": not an 8-bit binary PPM");
    }
    Image img(h, w);
    std::vector<unsigned char> bytes(img.pixels.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path.string() + ": truncated");
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
    return img;
}

// ---- synthetic data --------------------------------------------------------

Sample make_sample(const SyntheticSpec& spec, int label, Rng& rng) {
    const std::size_t n = spec.image_size;
    const double gray = rng.uniform(0.05, 0.35);
    Image img(n, n, gray);

    const std::size_t lo = std::max<std::size_t>(1, n * 7 / 16), hi = std::max(lo, n * 7 / 8);
    const std::size_t rh = lo + rng.below(hi - lo + 1), rw = lo + rng.below(hi - lo + 1);
    const std::size_t top = rng.below(n - rh + 1), left = rng.below(n - rw + 1);
    const double band = 360.0 / static_cast<double>(spec.num_classes);
    const double hue = band * label + rng.uniform(-0.25, 0.25) * band;
    const double sat = rng.uniform(0.7, 1.0), val = rng.uniform(0.7, 1.0);
    const Rgb rgb = hsv_to_rgb(hue, sat, val);
    for (std::size_t r = top; r < top + rh; ++r)
        for (std::size_t c = left; c < left + rw; ++c) {
            img.at(r, c, 0) = rgb.r;
            img.at(r, c, 1) = rgb.g;
            img.at(r, c, 2) = rgb.b;
        }
    return {std::move(img), label};
}

SyntheticDataset::SyntheticDataset(SyntheticSpec spec) : spec_(spec), rng_(spec.seed) {
    if (spec.num_classes == 0 || spec.image_size < 8) throw ConfigError("synthetic dataset: invalid spec");
}

Sample SyntheticDataset::next() {
    const int label = static_cast<int>(rng_.below(spec_.num_classes));
    return make_sample(spec_, label, rng_);
}

std::vector<Sample> SyntheticDataset::take(std::size_t n) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
}

int hue_oracle(const Image& img, std::size_t num_classes) {
    if (num_classes == 0) throw InvalidInput("hue_oracle: num_classes must be positive");
    const double band = 360.0 / static_cast<double>(num_classes);
    std::vector<std::size_t> counts(num_classes, 0);
    std::size_t saturated = 0;
    for (std::size_t r = 0; r < img.height; ++r)
        for (std::size_t c = 0; c < img.width; ++c) {
            double h, s, v;
            rgb_to_hsv(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2), h, s, v);
            if (s < 0.35 || v < 0.25) continue;
            ++saturated;
            ++counts[static_cast<std::size_t>(std::lround(h / band)) % num_classes];
        }
    if (saturated < kMinSaturatedPixels) return -1;
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

// ---- tokenizer ---------------------------------------------------------------

void TokenizerConfig::validate() const {
    if (downsample != 2 && downsample != 4 && downsample != 8) {
        throw ConfigError("downsample must be 2, 4 or 8 (got " + std::to_string(downsample) + ")");
    }
    if (d == 0) throw ConfigError("d must be positive");
    if (entropy.d != d) {
        throw ConfigError("entropy d (" + std::to_string(entropy.d) + ") must equal tokenizer d (" +
                          std::to_string(d) + ")");
    }
    if (hidden_width == 0) throw ConfigError("tok_hidden_width must be positive");
    entropy.validate();
    if (commitment_weight < 0 || latent_l2 < 0 || entropy.weight < 0) throw ConfigError("loss weights must be >= 0");
}

Tokenizer::Tokenizer(TokenizerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t w = cfg_.hidden_width;
    enc_in_ = nn::Linear::create(params_, "tokenizer.enc.in", cfg_.patch_dim(), w, rng);
    for (std::size_t i = 0; i < cfg_.blocks; ++i)
        enc_blocks_.push_back({nn::Mlp::create(params_, "tokenizer.enc.block" + std::to_string(i), w, 2 * w, rng)});
    enc_out_ = nn::Linear::create(params_, "tokenizer.enc.out", w, cfg_.d, rng);
    dec_in_ = nn::Linear::create(params_, "tokenizer.dec.in", cfg_.d, w, rng);
    for (std::size_t i = 0; i < cfg_.blocks; ++i)
        dec_blocks_.push_back({nn::Mlp::create(params_, "tokenizer.dec.block" + std::to_string(i), w, 2 * w, rng)});
    dec_out_ = nn::Linear::create(params_, "tokenizer.dec.out", w, cfg_.patch_dim(), rng);
}

ad::Var Tokenizer::trunk(const ad::Var& x, const std::vector<Block>& blocks) const {
    ad::Var h = x;
    for (const auto& b : blocks) h = ad::add(h, b.mlp(ad::layer_norm(h)));
    return ad::layer_norm(h);
}

ad::Var Tokenizer::encode_rows(const ad::Var& patches) const {
    if (patches.cols() != cfg_.patch_dim()) throw InvalidInput("encode: patch width mismatch");
    return enc_out_(trunk(enc_in_(ad::add_scalar(patches, -0.5)), enc_blocks_));
}

ad::Var Tokenizer::decode_rows(const ad::Var& tokens) const {
    if (tokens.cols() != cfg_.d) {
        throw InvalidInput("decode: token width " + std::to_string(tokens.cols()) + " != d " + std::to_string(cfg_.d));
    }
    return ad::add_scalar(dec_out_(trunk(dec_in_(tokens), dec_blocks_)), 0.5);
}

void Tokenizer::check_image(const Image& img) const {
    if (img.pixels.size() != img.height * img.width * 3) throw InvalidInput("image pixel buffer size mismatch");
    if (img.height == 0 || img.height % cfg_.downsample != 0 || img.width % cfg_.downsample != 0) {
        throw InvalidInput("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           " not divisible by downsample " + std::to_string(cfg_.downsample));
    }
}

binq::LatentGrid Tokenizer::encode(const Image& img) const {
    check_image(img);
    ad::NoGradGuard guard;
    binq::LatentGrid g;
    g.height = img.height / cfg_.downsample;
    g.width = img.width / cfg_.downsample;
    g.d = cfg_.d;
    g.values = encode_rows(ad::Var::constant(patchify(img, cfg_.downsample))).value();
    return g;
}

Image Tokenizer::decode(const binq::LatentGrid& grid) const {
    if (grid.d != cfg_.d || grid.values.cols() != cfg_.d) {
        throw InvalidInput("decode: grid has d=" + std::to_string(grid.d) + ", tokenizer expects " +
                           std::to_string(cfg_.d));
    }
    if (grid.values.rows() != grid.height * grid.width) throw InvalidInput("decode: grid row count mismatch");
    ad::NoGradGuard guard;
    Matrix patches = decode_rows(ad::Var::constant(grid.values)).value();
    return unpatchify(patches, grid.height, grid.width, cfg_.downsample);
}

Image Tokenizer::decode(const binq::BinaryGrid& grid) const {
    return decode(binq::LatentGrid{grid.height(), grid.width(), grid.d(), grid.as_matrix()});
}

binq::BinaryGrid Tokenizer::tokenize(const Image& img) const { return binq::quantize_grid(encode(img)); }

TokenizerTrainer::TokenizerTrainer(Tokenizer& tok, TokenizerTrainConfig cfg)
    : tok_(&tok), cfg_(cfg), opt_(tok.params(), nn::AdamWConfig{.lr = cfg.lr, .warmup_steps = cfg.warmup_steps}) {}

LossReport TokenizerTrainer::losses(std::span<const Image> batch, ad::Var* total) const {
    if (batch.empty()) throw InvalidInput("tokenizer batch is empty");
    const TokenizerConfig& cfg = tok_->config();
    Matrix patches;
    for (const auto& img : batch) patches.append_rows(patchify(img, cfg.downsample));
    ad::Var target = ad::Var::constant(patches);
    ad::Var latents = tok_->encode_rows(target);

    LossReport rep;
    ad::Var loss;
    if (cfg.quantize) {
        ad::Var q = binq::quantize_ste(latents);
        ad::Var recon = ad::mse(tok_->decode_rows(q), target);
        ad::Var ent = binq::entropy_loss(latents, cfg.entropy);
        loss = ad::add(recon, ad::scale(ent, cfg.entropy.weight));
        if (cfg.commitment_weight > 0) {
            Matrix signs = q.value();
            loss = ad::add(loss, ad::scale(ad::mse(latents, ad::Var::constant(signs)), cfg.commitment_weight));
        }
        rep.recon = recon.item();
        rep.entropy = ent.item();
    } else {
        ad::Var recon = ad::mse(tok_->decode_rows(latents), target);
        ad::Var zeros = ad::Var::constant(Matrix(latents.rows(), latents.cols()));
        loss = ad::add(recon, ad::scale(ad::mse(latents, zeros), cfg.latent_l2));
        rep.recon = recon.item();
    }
    rep.total = loss.item();
    if (!std::isfinite(rep.total)) {
        std::ostringstream msg;
        msg << "tokenizer loss became non-finite at step " << opt_.step_count() << " (recon=" << rep.recon
            << ", entropy=" << rep.entropy << ")";
        throw TrainingDivergence(msg.str());
    }
    if (total) *total = loss;
    return rep;
}

LossReport TokenizerTrainer::step(std::span<const Image> batch) {
    tok_->params().zero_grad();
    ad::Var total;
    LossReport rep = losses(batch, &total);
    ad::backward(total);
    opt_.step();
    return rep;
}

LossReport TokenizerTrainer::evaluate(std::span<const Image> batch) const {
    ad::NoGradGuard guard;
    return losses(batch, nullptr);
}

double bit_stability(const Tokenizer& tok, std::span<const Image> images) {
    if (images.empty()) throw InvalidInput("bit_stability: no images");
    std::size_t same = 0, total = 0;
    for (const auto& img : images) {
        binq::BinaryGrid a = tok.tokenize(img);
        binq::BinaryGrid b = tok.tokenize(tok.decode(a));
        for (std::size_t i = 0; i < a.bits().size(); ++i) same += a.bits()[i] == b.bits()[i];
        total += a.bits().size();
    }
    return static_cast<double>(same) / static_cast<double>(total);
}

}  // namespace bitdance::toktrain
