#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gnr/error.hpp"
#include "gnr/schedule.hpp"
#include "test_support.hpp"

using namespace gnr;

namespace {

NoiseSchedule explicit_schedule(std::vector<double> alphas) {
  ScheduleProfile p;
  p.name = "explicit";
  p.alphas = std::move(alphas);
  return make_schedule(static_cast<int>(p.alphas.size()) - 1, p);
}

// Independent evaluation of the coefficient formulas.
double a_of(double prev, double cur) { return std::sqrt(prev / cur); }
double b_of(double prev, double cur) {
  return std::sqrt(prev) * (std::sqrt(1.0 / prev - 1.0) - std::sqrt(1.0 / cur - 1.0));
}

}  // namespace

TEST(Schedule, DefaultT50IsStrictlyDecreasingInUnitInterval) {
  const NoiseSchedule s = make_schedule(50);
  ASSERT_EQ(s.steps(), 50);
  ASSERT_EQ(s.alpha_bars().size(), 51u);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  for (int t = 1; t <= 50; ++t) {
    EXPECT_GT(s.alpha_bar(t), 0.0);
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  }
}

TEST(Schedule, ExplicitProfilePassesValuesThrough) {
  const NoiseSchedule s = explicit_schedule({1.0, 0.7, 0.4});
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_EQ(s.alpha_bar(1), 0.7);
  EXPECT_EQ(s.alpha_bar(2), 0.4);
}

TEST(Schedule, MatchesDirectBetaProductAtLeadingSpacing) {
  // scaled_linear betas over 1000 steps, cumulative product, leading spacing
  // with offset 1: inference step t sits on training index (t-1)*(1000/T)+1.
  std::vector<double> curve(1000);
  double acc = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const double r = std::sqrt(0.00085) + (std::sqrt(0.012) - std::sqrt(0.00085)) * i / 999.0;
    acc *= 1.0 - r * r;
    curve[static_cast<std::size_t>(i)] = acc;
  }
  for (int T : {50, 100}) {
    const NoiseSchedule s = make_schedule(T);
    for (int t = 1; t <= T; ++t) {
      const int idx = (t - 1) * (1000 / T) + 1;
      EXPECT_NEAR(s.alpha_bar(t), curve[static_cast<std::size_t>(idx)], 1e-12) << "T=" << T << " t=" << t;
    }
  }
  // The coarse grid is a subset of the fine one.
  const NoiseSchedule s50 = make_schedule(50), s100 = make_schedule(100);
  for (int t = 1; t <= 50; ++t) EXPECT_EQ(s50.alpha_bar(t), s100.alpha_bar(2 * t - 1));
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_schedule(1), ArgumentError);
  ScheduleProfile p;
  p.name = "cosine";
  EXPECT_THROW(make_schedule(10, p), ConfigError);
  const NoiseSchedule s = make_schedule(10);
  EXPECT_THROW(sample_coeffs(s, 0), ArgumentError);
  EXPECT_THROW(sample_coeffs(s, 11), ArgumentError);
  EXPECT_THROW(invert_coeffs(s, 10), ArgumentError);
  EXPECT_THROW(invert_coeffs(s, -1), ArgumentError);
  EXPECT_THROW(ddim_sample_step(Tensor({2}), Tensor({3}), 1, s), ArgumentError);
  EXPECT_THROW(ddim_invert_step(Tensor({2}), Tensor({3}), 0, s), ArgumentError);
}

TEST(Schedule, SampleCoefficientsHandExamples) {
  const NoiseSchedule s = explicit_schedule({1.0, 0.95, 0.90});
  const StepCoefficients c = sample_coeffs(s, 2);
  EXPECT_EQ(c.direction, Direction::sampling);
  EXPECT_NEAR(c.a, a_of(0.95, 0.90), 1e-14);
  EXPECT_NEAR(c.b, b_of(0.95, 0.90), 1e-14);
  EXPECT_NEAR(c.a, 1.02740, 5e-6);
  EXPECT_NEAR(c.b, -0.10129, 5e-6);

  const NoiseSchedule half = explicit_schedule({1.0, 0.5, 0.25});
  const StepCoefficients h = sample_coeffs(half, 1);
  EXPECT_NEAR(h.a, std::sqrt(2.0), 1e-14);
  EXPECT_NEAR(h.b, -1.0, 1e-14);
}

TEST(Schedule, InvertCoefficientsHandExample) {
  const NoiseSchedule s = explicit_schedule({1.0, 0.95, 0.90});
  const StepCoefficients c = invert_coeffs(s, 1);
  EXPECT_EQ(c.direction, Direction::inversion);
  EXPECT_NEAR(c.a, std::sqrt(0.90 / 0.95), 1e-14);
  EXPECT_NEAR(c.b, std::sqrt(0.90) * (std::sqrt(1 / 0.90 - 1) - std::sqrt(1 / 0.95 - 1)), 1e-14);
  EXPECT_NEAR(c.a, 0.97333, 1e-5);
  EXPECT_NEAR(c.b, 0.09859, 1e-5);
}

TEST(Schedule, SingleStepScalarExamples) {
  const NoiseSchedule s = explicit_schedule({1.0, 0.95, 0.90});
  const Tensor z({1}, std::vector<double>{1.0}), e({1}, std::vector<double>{0.5});
  EXPECT_NEAR(ddim_sample_step(z, e, 2, s)[0], a_of(0.95, 0.90) + 0.5 * b_of(0.95, 0.90), 1e-14);
  EXPECT_NEAR(ddim_invert_step(z, e, 1, s)[0], std::sqrt(0.90 / 0.95) + 0.5 * (std::sqrt(0.90) * (std::sqrt(1 / 0.90 - 1) -
                                                                              std::sqrt(1 / 0.95 - 1))),
              1e-14);
  // The quoted five-digit values are rounded; they agree to 1e-5.
  EXPECT_NEAR(ddim_sample_step(z, e, 2, s)[0], 0.97675, 1e-5);
  EXPECT_NEAR(ddim_invert_step(z, e, 1, s)[0], 1.02263, 1e-5);
}

TEST(Schedule, InversePairIdentities) {
  for (int T : {2, 10, 50, 100}) {
    const NoiseSchedule s = make_schedule(T);
    for (int t = 0; t < T; ++t) {
      const StepCoefficients inv = invert_coeffs(s, t), smp = sample_coeffs(s, t + 1);
      EXPECT_NEAR(smp.a * inv.a, 1.0, 1e-12);
      EXPECT_NEAR(smp.b + smp.a * inv.b, 0.0, 1e-12 * std::max(1.0, std::abs(smp.b)));
      EXPECT_GT(inv.a, 0.0);
      EXPECT_GT(smp.a, 0.0);
    }
  }
}

TEST(Schedule, FrozenEpsRoundTripAndLinearity) {
  const NoiseSchedule s = make_schedule(50);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Tensor z = test::random_tensor({4, 8, 8}, rng), e = test::random_tensor({4, 8, 8}, rng);
    const Tensor back = ddim_sample_step(ddim_invert_step(z, e, t, s), e, t + 1, s);
    EXPECT_LE(relative_l2(back, z), 1e-12);

    const Tensor z2 = test::random_tensor({4, 8, 8}, rng), e2 = test::random_tensor({4, 8, 8}, rng);
    const Tensor lhs = ddim_sample_step(z + z2, e + e2, t + 1, s);
    const Tensor rhs = ddim_sample_step(z, e, t + 1, s) + ddim_sample_step(z2, e2, t + 1, s);
    EXPECT_LE(max_abs(lhs - rhs), 1e-12);
  }
}

TEST(Schedule, EqualLevelsGiveIdentityStep) {
  // A flat pair of levels cannot come from a valid schedule, so check the
  // formula limit through a nearly flat one.
  const NoiseSchedule s = explicit_schedule({1.0, 0.9, 0.9 - 1e-15});
  const StepCoefficients c = sample_coeffs(s, 2);
  EXPECT_NEAR(c.a, 1.0, 1e-12);
  EXPECT_NEAR(c.b, 0.0, 1e-12);
}

TEST(Schedule, FingerprintDistinguishesSchedules) {
  EXPECT_EQ(make_schedule(50).fingerprint(), make_schedule(50).fingerprint());
  EXPECT_NE(make_schedule(50).fingerprint(), make_schedule(100).fingerprint());
}
