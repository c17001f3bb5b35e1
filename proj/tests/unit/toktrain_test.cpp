#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>

#include "bitdance/error.hpp"
#include "bitdance/toktrain.hpp"
#include "grad_check.hpp"

namespace bitdance::toktrain {
namespace {

TokenizerConfig small_config(std::size_t f = 4, std::size_t d = 8) {
    TokenizerConfig cfg;
    cfg.downsample = f;
    cfg.d = d;
    cfg.hidden_width = 16;
    cfg.entropy.d = d;
    cfg.entropy.groups = 2;
    return cfg;
}

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
    Image img(h, w);
    for (double& v : img.pixels) v = rng.uniform();
    return img;
}

TEST(Shapes, EncodeAndDecodeFollowTheDownsampleFactor) {
    Rng rng(1);
    for (std::size_t f : {2u, 4u, 8u}) {
        Tokenizer tok(small_config(f), 2);
        for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {16, 24}, {8, 40}}) {
            const Image img = random_image(h, w, rng);
            const auto grid = tok.encode(img);
            EXPECT_EQ(grid.height, h / f);
            EXPECT_EQ(grid.width, w / f);
            EXPECT_EQ(grid.d, 8u);
            const Image back = tok.decode(tok.tokenize(img));
            EXPECT_EQ(back.height, h);
            EXPECT_EQ(back.width, w);
            for (double v : back.pixels) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
        }
    }
}

TEST(Shapes, BadInputsAreRejected) {
    Tokenizer tok(small_config(), 3);
    Rng rng(4);
    EXPECT_THROW(tok.encode(random_image(30, 32, rng)), InvalidInput);
    EXPECT_THROW(tok.decode(binq::BinaryGrid(8, 8, 4)), InvalidInput);
    binq::LatentGrid bad{2, 2, 8, Matrix(3, 8)};
    EXPECT_THROW(tok.decode(bad), InvalidInput);
}

TEST(Config, Validation) {
    TokenizerConfig cfg = small_config();
    cfg.downsample = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.entropy.d = 6;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.entropy.groups = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(small_config().validate());
    EXPECT_THROW(Tokenizer(TokenizerConfig{.downsample = 5}, 0), ConfigError);
}

TEST(Encode, Deterministic) {
    Tokenizer a(small_config(), 5), b(small_config(), 5);
    Rng rng(6);
    const Image img = random_image(32, 32, rng);
    EXPECT_EQ(a.encode(img).values, b.encode(img).values);
    EXPECT_EQ(a.encode(img).values, a.encode(img).values);
    EXPECT_EQ(a.decode(a.tokenize(img)), b.decode(b.tokenize(img)));
}

TEST(Encode, ZeroFinalProjectionGivesZeroLatents) {
    Tokenizer tok(small_config(), 7);
    tok.params().get("tokenizer.enc.out.weight").mutable_value().fill(0.0);
    tok.params().get("tokenizer.enc.out.bias").mutable_value().fill(0.0);
    const auto grid = tok.encode(Image(32, 32, 0.0));
    for (double v : grid.values.values()) EXPECT_EQ(v, 0.0);
    // sign(0) = +1 everywhere.
    const auto tokens = tok.tokenize(Image(32, 32, 0.0));
    for (auto b : tokens.bits()) EXPECT_EQ(b, 1);
}

TEST(Patchify, RoundTripAndLayout) {
    Rng rng(8);
    const Image img = random_image(8, 12, rng);
    const Matrix p = patchify(img, 4);
    ASSERT_EQ(p.rows(), 6u);
    ASSERT_EQ(p.cols(), 48u);
    // Patch (1, 2) row 3, col 1, channel 2.
    EXPECT_EQ(p(1 * 3 + 2, (3 * 4 + 1) * 3 + 2), img.at(7, 9, 2));
    EXPECT_EQ(unpatchify(p, 2, 3, 4), img);
    EXPECT_THROW(patchify(img, 5), InvalidInput);
}

TEST(Psnr, KnownValues) {
    Image a(4, 4, 0.5), b(4, 4, 0.5);
    EXPECT_TRUE(std::isinf(psnr(a, b)));
    for (double& v : b.pixels) v = 0.6;
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Ppm, RoundTripIsEightBitExact) {
    Rng rng(9);
    const Image img = random_image(5, 7, rng);
    const auto path = std::filesystem::temp_directory_path() / "bitdance_toktrain_test.ppm";
    write_ppm(path, img);
    const Image back = read_ppm(path);
    ASSERT_EQ(back.height, 5u);
    ASSERT_EQ(back.width, 7u);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 0.5 / 255 + 1e-12);
    write_ppm(path, back);
    EXPECT_EQ(read_ppm(path), back);
    std::filesystem::remove(path);
    EXPECT_THROW(read_ppm(path), IoError);
}

TEST(Dataset, SameSeedSameStream) {
    SyntheticDataset a({32, 4, 7}), b({32, 4, 7});
    for (int i = 0; i < 3; ++i) {
        const Sample x = a.next(), y = b.next();
        EXPECT_EQ(x.label, y.label);
        EXPECT_EQ(x.image, y.image);
    }
    SyntheticDataset c({32, 4, 8});
    EXPECT_NE(c.next().image, SyntheticDataset({32, 4, 7}).next().image);
}

TEST(Dataset, RestoredStateContinuesTheStream) {
    SyntheticDataset a({32, 4, 3});
    a.take(5);
    SyntheticDataset b({32, 4, 99});
    b.restore(a.state());
    for (int i = 0; i < 3; ++i) {
        const Sample x = a.next(), y = b.next();
        EXPECT_EQ(x.label, y.label);
        EXPECT_EQ(x.image, y.image);
    }
}

TEST(Dataset, LabelsAreUniform) {
    SyntheticDataset ds({32, 4, 10});
    std::array<int, 4> counts{};
    for (int i = 0; i < 10000; ++i) ++counts.at(ds.next().label);
    for (int c : counts) EXPECT_NEAR(c / 10000.0, 0.25, 0.03);
}

TEST(Dataset, OracleRecoversEveryConstructedLabel) {
    for (std::size_t classes : {2u, 4u, 6u}) {
        Rng rng(11);
        for (int i = 0; i < 500; ++i) {
            const int label = static_cast<int>(i % classes);
            const Sample s = make_sample({32, classes, 0}, label, rng);
            ASSERT_EQ(hue_oracle(s.image, classes), label) << "classes=" << classes << " sample " << i;
        }
    }
}

TEST(Oracle, RejectsUnsaturatedImages) {
    EXPECT_EQ(hue_oracle(Image(32, 32, 0.5), 4), -1);
    Image img(8, 8, 0.2);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) img.at(r, c, 1) = img.at(r, c, 2) = 1.0;  // 16 cyan pixels
    EXPECT_EQ(hue_oracle(img, 4), 2);  // 180 degrees, bands of 90
    img.at(0, 0, 1) = img.at(0, 0, 2) = 0.2;
    EXPECT_EQ(hue_oracle(img, 4), -1);  // 15 saturated pixels
}

TEST(Losses, EntropyWeightZeroIsPureReconstruction) {
    TokenizerConfig cfg = small_config();
    cfg.entropy.weight = 0.0;
    Tokenizer tok(cfg, 12);
    TokenizerTrainer tr(tok, {});
    auto batch = SyntheticDataset({32, 4, 13}).take(3);
    std::vector<Image> imgs;
    for (auto& s : batch) imgs.push_back(s.image);
    const LossReport r = tr.evaluate(imgs);
    EXPECT_EQ(r.total, r.recon);
    EXPECT_NE(r.entropy, 0.0);
}

TEST(Losses, IdenticalBatchEqualsSingleImage) {
    Tokenizer tok(small_config(), 14);
    TokenizerTrainer tr(tok, {});
    const Image img = SyntheticDataset({32, 4, 15}).next().image;
    const std::vector<Image> one = {img}, many = {img, img, img, img};
    const LossReport a = tr.evaluate(one), b = tr.evaluate(many);
    EXPECT_NEAR(a.recon, b.recon, 1e-12);
    EXPECT_NEAR(a.entropy, b.entropy, 1e-12);
    EXPECT_NEAR(a.total, b.total, 1e-12);
}

// Loss with the quantizer replaced by its straight-through surrogate at a
// fixed operating point: latents + C, where C = sign(l0) - l0 is frozen. Its
// ordinary derivative is what the straight-through estimator reports.
struct SurrogateLoss {
    const Tokenizer& tok;
    Matrix patches;
    Matrix offset;

    ad::Var operator()() const {
        ad::Var l = tok.encode_rows(ad::Var::constant(patches));
        ad::Var q = ad::add(l, ad::Var::constant(offset));
        ad::Var recon = ad::mse(tok.decode_rows(q), ad::Var::constant(patches));
        return ad::add(recon, ad::scale(binq::entropy_loss(l, tok.config().entropy), tok.config().entropy.weight));
    }
};

TEST(Gradients, StraightThroughMatchesSurrogateFiniteDifferences) {
    Tokenizer tok(small_config(4, 6), 16);
    Rng rng(17);
    Matrix patches = patchify(random_image(8, 8, rng), 4);
    const Matrix l0 = tok.encode_rows(ad::Var::constant(patches)).value();
    Matrix offset = l0;
    for (std::size_t i = 0; i < l0.size(); ++i) offset[i] = (l0[i] >= 0 ? 1.0 : -1.0) - l0[i];
    SurrogateLoss surrogate{tok, patches, offset};

    // The real loss, built with the straight-through quantizer.
    auto real = [&] {
        ad::Var l = tok.encode_rows(ad::Var::constant(patches));
        ad::Var recon = ad::mse(tok.decode_rows(binq::quantize_ste(l)), ad::Var::constant(patches));
        return ad::add(recon, ad::scale(binq::entropy_loss(l, tok.config().entropy), tok.config().entropy.weight));
    };
    EXPECT_NEAR(real().item(), surrogate().item(), 1e-12);

    double worst = 0.0;
    for (const auto& name : tok.params().names()) {
        ad::Var p = tok.params().get(name);
        // Analytic gradient of the real loss.
        p.zero_grad();
        ad::backward(real());
        const Matrix analytic = p.grad();
        // Check that gradient against central differences of the surrogate.
        auto check = testing::check_gradient(surrogate, p, 1e-6, 24);
        worst = std::max(worst, check.max_rel_error);
        p.zero_grad();
        ad::backward(surrogate());
        EXPECT_LT(max_abs_diff(p.grad(), analytic), 1e-12) << name;
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Gradients, ContinuousModeMatchesFiniteDifferences) {
    TokenizerConfig cfg = small_config(4, 6);
    cfg.quantize = false;
    Tokenizer tok(cfg, 18);
    Rng rng(19);
    const Matrix patches = patchify(random_image(8, 8, rng), 4);
    auto loss = [&] {
        ad::Var l = tok.encode_rows(ad::Var::constant(patches));
        ad::Var recon = ad::mse(tok.decode_rows(l), ad::Var::constant(patches));
        return ad::add(recon, ad::scale(ad::mse(l, ad::Var::constant(Matrix(l.rows(), l.cols()))), cfg.latent_l2));
    };
    double worst = 0.0;
    for (const auto& name : tok.params().names())
        worst = std::max(worst, testing::check_gradient(loss, tok.params().get(name), 1e-6, 24).max_rel_error);
    EXPECT_LT(worst, 1e-4);
}

TEST(Gradients, EncoderReceivesReconstructionGradient) {
    TokenizerConfig cfg = small_config();
    cfg.entropy.weight = 0.0;
    Tokenizer tok(cfg, 20);
    Rng rng(21);
    const Matrix patches = patchify(random_image(16, 16, rng), 4);
    ad::Var l = tok.encode_rows(ad::Var::constant(patches));
    ad::backward(ad::mse(tok.decode_rows(binq::quantize_ste(l)), ad::Var::constant(patches)));
    for (const auto& name : tok.params().names()) {
        if (name.find(".enc.") == std::string::npos) continue;
        EXPECT_GT(frobenius_sq(tok.params().get(name).grad()), 0.0) << name;
    }
}

TEST(Training, ShortRunReducesLossAndKeepsBitsBalanced) {
    Tokenizer tok(small_config(4, 8), 22);
    TokenizerTrainer tr(tok, {.lr = 2e-3, .warmup_steps = 20});
    SyntheticDataset ds({32, 4, 23});
    std::vector<Image> held;
    for (auto& s : SyntheticDataset({32, 4, 24}).take(8)) held.push_back(s.image);
    const double start = tr.evaluate(held).recon;
    for (int step = 0; step < 500; ++step) {
        std::vector<Image> batch;
        for (int i = 0; i < 8; ++i) batch.push_back(ds.next().image);
        const LossReport r = tr.step(batch);
        ASSERT_TRUE(std::isfinite(r.total));
    }
    EXPECT_EQ(tr.step_count(), 500u);
    EXPECT_LT(tr.evaluate(held).recon, 0.25 * start);
    // Per-bit mean of the codes stays away from collapse.
    std::vector<double> mean(8, 0.0);
    std::size_t tokens = 0;
    for (const auto& img : held) {
        const auto g = tok.tokenize(img);
        for (std::size_t i = 0; i < g.bits().size(); ++i) mean[i % 8] += g.bits()[i];
        tokens += g.token_count();
    }
    for (double m : mean) EXPECT_LE(std::abs(m / static_cast<double>(tokens)), 0.5);
}

TEST(Training, DivergenceIsReported) {
    Tokenizer tok(small_config(), 25);
    tok.params().get("tokenizer.dec.out.bias").mutable_value().fill(std::nan(""));
    TokenizerTrainer tr(tok, {});
    std::vector<Image> batch = {Image(32, 32, 0.5)};
    EXPECT_THROW(tr.step(batch), TrainingDivergence);
}

}  // namespace
}  // namespace bitdance::toktrain
