#include <benchmark/benchmark.h>

#include <vector>

#include "bitdance/binq.hpp"
#include "bitdance/evalx.hpp"
#include "bitdance/flowhead.hpp"
#include "bitdance/pipeline.hpp"
#include "bitdance/rng.hpp"
#include "bitdance/toktrain.hpp"

namespace {

using namespace bitdance;

binq::BinaryGrid random_grid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
    std::vector<std::int8_t> bits(h * w * d);
    for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : -1;
    return binq::BinaryGrid(h, w, d, std::move(bits));
}

pipeline::ArConfig desk_ar(std::size_t p) {
    pipeline::ArConfig cfg;
    cfg.backbone = {.d = 16, .width = 64, .depth = 2, .heads = 4, .mlp_ratio = 4, .num_classes = 4, .patch_size = p};
    cfg.head.depth = 2;
    cfg.head.head_width = 64;
    cfg.head.heads = 4;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.sync_head();
    return cfg;
}

void BM_Quantize(benchmark::State& state) {
    const auto d = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Matrix x = rng.normal_matrix(256, d);
    for (auto _ : state) {
        for (std::size_t r = 0; r < x.rows(); ++r) benchmark::DoNotOptimize(binq::quantize(x.row(r)));
    }
    state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_Quantize)->Arg(16)->Arg(32);

void BM_PackUnpack(benchmark::State& state) {
    Rng rng(2);
    const auto grid = random_grid(16, 16, 32, rng);
    for (auto _ : state) {
        auto bytes = binq::pack_bits(grid);
        benchmark::DoNotOptimize(binq::unpack_bits(bytes));
    }
    state.SetBytesProcessed(state.iterations() * 1024);
}
BENCHMARK(BM_PackUnpack);

void BM_EntropyLoss(benchmark::State& state) {
    Rng rng(3);
    const Matrix x = rng.normal_matrix(256, 16);
    const binq::EntropyConfig cfg{.d = 16, .groups = static_cast<std::size_t>(state.range(0))};
    for (auto _ : state) benchmark::DoNotOptimize(binq::entropy_loss(x, cfg));
}
BENCHMARK(BM_EntropyLoss)->Arg(2)->Arg(4);

void BM_TokenizerTrainStep(benchmark::State& state) {
    toktrain::Tokenizer tok(toktrain::TokenizerConfig{}, 4);
    toktrain::TokenizerTrainer trainer(tok, {});
    toktrain::SyntheticDataset data({});
    std::vector<toktrain::Image> batch;
    for (auto& s : data.take(16)) batch.push_back(s.image);
    for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch));
}
BENCHMARK(BM_TokenizerTrainStep)->Unit(benchmark::kMillisecond);

void BM_FlowHeadPredict(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    flowhead::HeadConfig cfg{.d = 16, .n = n, .cond_width = 64, .depth = 2, .head_width = 64, .heads = 4};
    nn::ParamStore store;
    Rng rng(5);
    flowhead::FlowHead head(cfg, store, "h.", rng);
    const std::size_t groups = 64 / n;
    const ad::Var x = ad::Var::constant(rng.normal_matrix(groups * n, 16));
    const ad::Var z = ad::Var::constant(rng.normal_matrix(groups * n, 64));
    const std::vector<double> t(groups, 0.5);
    ad::NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(head.predict(x, t, z, n));
    state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_FlowHeadPredict)->Arg(1)->Arg(4)->Arg(16);

void BM_ArTrainStep(benchmark::State& state) {
    pipeline::ArModel model(desk_ar(2), 6);
    pipeline::ArTrainer trainer(model, {.lr = 1e-3}, 7);
    Rng rng(8);
    std::vector<binq::BinaryGrid> grids;
    for (int i = 0; i < 8; ++i) grids.push_back(random_grid(8, 8, 16, rng));
    const std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3};
    for (auto _ : state) benchmark::DoNotOptimize(trainer.step(grids, labels));
}
BENCHMARK(BM_ArTrainStep)->Unit(benchmark::kMillisecond);

// One 8x8 image per iteration; fewer AR steps at larger p.
void BM_Generate(benchmark::State& state) {
    const auto p = static_cast<std::size_t>(state.range(0));
    pipeline::ArModel model(desk_ar(p), 9);
    pipeline::GenerationRequest req{.labels = {1}, .num_steps = 10, .cfg_scale = 2.0, .seed = 10};
    std::size_t steps = 0;
    for (auto _ : state) steps = pipeline::generate(model, req).ar_steps;
    state.counters["ar_steps"] = static_cast<double>(steps);
}
BENCHMARK(BM_Generate)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_JointXorSampling(benchmark::State& state) {
    flowhead::HeadConfig cfg{.d = 2, .n = 1, .cond_width = 8, .depth = 2, .head_width = 32, .heads = 2};
    nn::ParamStore store;
    Rng rng(11);
    flowhead::FlowHead head(cfg, store, "h.", rng);
    const Matrix z = rng.normal_matrix(1000, 8);
    flowhead::SampleOptions so{.num_steps = 50};
    for (auto _ : state) benchmark::DoNotOptimize(flowhead::sample(head, z, Matrix(), 1, 2, so, rng));
    state.SetItemsProcessed(state.iterations() * 1000);
}
BENCHMARK(BM_JointXorSampling)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
