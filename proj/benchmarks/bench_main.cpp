#include <benchmark/benchmark.h>

#include <random>

#include "gnr/guidance.hpp"
#include "gnr/pipeline.hpp"
#include "gnr/schedule.hpp"
#include "gnr/toy_train.hpp"
#include "gnr/toy_unet.hpp"

using namespace gnr;

namespace {

const ToyUNet& net() {
  static const ToyUNet n(ToyConfig{}, 7);
  return n;
}

Tensor noise(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Tensor z(net().latent_shape());
  for (double& v : z.data()) v = n(rng);
  return z;
}

Tensor source() { return render_shape("circle", "red", "blue", 4, 8, 3.5, 3.5, 2.5); }

}  // namespace

static void BM_ToyForward(benchmark::State& state) {
  const Tensor z = noise(1);
  const NoiseSchedule s = make_schedule(50);
  const Conditioning c = net().embed_prompt("a red circle on blue");
  const bool internals = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(predict(net(), z, s.timestep(25), c, internals));
}
BENCHMARK(BM_ToyForward)->Arg(0)->Arg(1);

static void BM_GuiderGradient(benchmark::State& state) {
  const Tensor z = noise(2), z_star = noise(3);
  const NoiseSchedule s = make_schedule(50);
  const Conditioning src = net().embed_prompt("a red circle on blue");
  const Conditioning trg = net().embed_prompt("a green circle on blue");
  const PredictionRecord ref = predict(net(), z_star, s.timestep(40), src, true);
  const GuiderStack stack = default_guiders();
  for (auto _ : state)
    benchmark::DoNotOptimize(guider_gradient(stack, net(), z, z_star, s.timestep(40), src, trg, ref));
}
BENCHMARK(BM_GuiderGradient);

static void BM_DdimStep(benchmark::State& state) {
  const Tensor z = noise(4), eps = noise(5);
  const NoiseSchedule s = make_schedule(50);
  for (auto _ : state) benchmark::DoNotOptimize(ddim_sample_step(z, eps, 30, s));
}
BENCHMARK(BM_DdimStep);

static void BM_Edit(benchmark::State& state) {
  EditRequest r;
  r.image = source();
  r.y_src = "a red circle on blue";
  r.y_trg = "a green circle on blue";
  r.steps = static_cast<int>(state.range(0));
  r.guiders.tau = std::min(r.guiders.tau, r.steps);
  const NoiseSchedule s = make_schedule(r.steps);
  const TrajectoryCache cache = invert(net(), r.image, r.y_src, s);
  for (auto _ : state) benchmark::DoNotOptimize(edit(net(), r, cache, s));
}
BENCHMARK(BM_Edit)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
