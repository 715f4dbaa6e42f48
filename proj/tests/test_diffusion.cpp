#include "dscm/diffusion.hpp"
#include "dscm/error.hpp"

#include "doctest_torch.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "oracles.hpp"

using namespace dscm::diffusion;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kDouble);

torch::Tensor image(uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({2, 1, 6, 6}, gen, kF64) * 2.0 - 1.0;
}

}  // namespace

TEST_CASE("schedules start at one and decrease") {
  for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
    for (int64_t T : {10, 50, 1000}) {
      auto s = make_schedule(kind, T);
      CHECK(s.steps() == T);
      CHECK(s.alpha(0) == 1.0);
      for (int64_t t = 1; t <= T; ++t) {
        CHECK(s.alpha(t) < s.alpha(t - 1));
        CHECK(s.alpha(t) > 0.0);
      }
    }
  }
  auto lin = make_schedule(ScheduleKind::Linear, 1000);
  CHECK(lin.alpha(1) == doctest::Approx(1.0 - 1e-4).epsilon(1e-15));
  CHECK(lin.alpha(1000) < 1e-4);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::Linear, 0), dscm::ArgumentError);
  CHECK_THROWS_AS(lin.alpha(1001), dscm::ArgumentError);
  CHECK(parse_schedule_kind("cosine") == ScheduleKind::Cosine);
  CHECK_THROWS_AS(parse_schedule_kind("sigmoid"), dscm::ArgumentError);
}

TEST_CASE("hand-built schedules are validated") {
  CHECK_NOTHROW(NoiseSchedule(ScheduleKind::Linear, {1.0, 0.5, 0.25}));
  CHECK_THROWS_AS(NoiseSchedule(ScheduleKind::Linear, {0.9, 0.5}), dscm::ArgumentError);
  CHECK_THROWS_AS(NoiseSchedule(ScheduleKind::Linear, {1.0, 0.5, 0.5}), dscm::ArgumentError);
}

TEST_CASE("forward marginal") {
  NoiseSchedule s(ScheduleKind::Linear, {1.0, 0.25, 1e-12});
  auto x0 = torch::ones({1, 1, 2, 2}, kF64);
  auto zero = torch::zeros_like(x0);
  CHECK(oracle::max_abs(forward_marginal_sample(x0, 1, zero, s), 0.5 * x0) == 0.0);
  auto eps = image(3).narrow(0, 0, 1).narrow(2, 0, 2).narrow(3, 0, 2);
  CHECK(oracle::max_abs(forward_marginal_sample(x0, 0, eps, s), x0) == 0.0);
  CHECK(oracle::max_abs(forward_marginal_sample(x0, 2, eps, s), eps) < 1e-5);
  CHECK_THROWS_AS(forward_marginal_sample(x0, 1, torch::zeros({1, 1, 3, 3}, kF64), s), dscm::ArgumentError);
}

TEST_CASE("posterior mean identities") {
  auto s = make_schedule(ScheduleKind::Linear, 50);
  auto x0 = image(1), xt = image(2);
  CHECK(oracle::max_abs(posterior_mean(x0, xt, 20, 20, s), xt) == 0.0);
  const double a = s.alpha(20), ap = s.alpha(7);
  CHECK(oracle::max_abs(posterior_mean(x0, std::sqrt(a) * x0, 20, 7, s), std::sqrt(ap) * x0) < 1e-6);
  auto zero = torch::zeros_like(x0);
  CHECK(oracle::max_abs(posterior_mean(zero, xt, 20, 7, s), xt * std::sqrt(1 - ap) / std::sqrt(1 - a)) < 1e-6);
}

TEST_CASE("denoise_to_x0 inverts the forward marginal") {
  auto s = make_schedule(ScheduleKind::Cosine, 50);
  auto x0 = image(4), eps = image(5);
  for (int64_t t : {1, 10, 49}) {
    auto xt = forward_marginal_sample(x0, t, eps, s);
    CHECK(oracle::max_abs(denoise_to_x0(xt, eps, t, s), x0) < 1e-6);
    CHECK(oracle::max_abs(denoise_to_x0(xt, torch::zeros_like(xt), t, s), xt / std::sqrt(s.alpha(t))) < 1e-12);
  }
  auto x_star = image(6);
  auto eps_fn = oracle::point_mass(x_star, s);
  CHECK(oracle::max_abs(denoise_to_x0(image(7), 30, eps_fn, s), x_star) < 1e-6);
}

TEST_CASE("ddim_step against the point-mass closed form") {
  auto s = make_schedule(ScheduleKind::Linear, 50);
  auto x_star = image(8), x = image(9);
  auto eps_fn = oracle::point_mass(x_star, s);
  auto got = ddim_step(x, 40, 12, eps_fn, s);
  CHECK(oracle::max_abs(got, oracle::point_mass_step(x, x_star, s.alpha(40), s.alpha(12))) < 1e-6);
  CHECK(oracle::max_abs(ddim_step(x, 40, 0, eps_fn, s), x_star) < 1e-6);
  CHECK_THROWS_AS(ddim_step(x, 12, 12, eps_fn, s), dscm::ArgumentError);
  CHECK_THROWS_AS(ddim_step(x, 12, 20, eps_fn, s), dscm::ArgumentError);
}

TEST_CASE("inverse step followed by step returns the input") {
  auto s = make_schedule(ScheduleKind::Linear, 50);
  auto x_star = image(10), x = image(11);
  auto eps_fn = oracle::point_mass(x_star, s);
  auto up = ddim_inverse_step(x, 5, 30, eps_fn, s);
  CHECK(oracle::max_abs(ddim_step(up, 30, 5, eps_fn, s), x) < 1e-6);

  EpsilonFn zero = [](const torch::Tensor& v, int64_t) { return torch::zeros_like(v); };
  auto origin = torch::zeros_like(x);
  CHECK(oracle::max_abs(ddim_inverse_step(origin, 0, 30, zero, s), origin) == 0.0);
}

TEST_CASE("strided plans") {
  auto p = TimestepPlan::strided(1000, 100);
  REQUIRE(p.size() == 100);
  CHECK(p.steps.front() == 10);
  CHECK(p.steps.back() == 1000);
  CHECK(p.previous(0) == 0);
  CHECK(TimestepPlan::strided(10, 10).steps == std::vector<int64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  CHECK(TimestepPlan::strided(50, 7).steps.back() == 50);
  CHECK_THROWS_AS(TimestepPlan::strided(10, 11), dscm::ArgumentError);
  auto s = make_schedule(ScheduleKind::Linear, 10);
  TimestepPlan bad{{3, 3, 5}, 0};
  CHECK_THROWS_AS(bad.validate(s), dscm::ArgumentError);
  TimestepPlan below{{1, 2}, 1};
  CHECK_THROWS_AS(below.validate(s), dscm::ArgumentError);
}

TEST_CASE("point-mass traversal round trips") {
  for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
    for (int64_t T : {10, 50}) {
      auto s = make_schedule(kind, T);
      auto x_star = image(12), x = image(13);
      auto eps_fn = oracle::point_mass(x_star, s);
      for (int64_t S : {T, T / 5}) {
        CAPTURE(T);
        CAPTURE(S);
        TimestepPlan plan = TimestepPlan::strided(T, S);
        plan.steps.erase(plan.steps.begin());
        plan.origin = T / S;

        auto inv = ddim_traverse(x, plan, Direction::Invert, eps_fn, s, true);
        CHECK(inv.trajectory.size() == plan.size() + 1);
        auto u_ref = oracle::point_mass_inversion(x, x_star, s.alpha(plan.origin), s.alpha(T));
        CHECK(oracle::max_abs(inv.image, u_ref) < 1e-6);
        auto gen = ddim_traverse(inv.image, plan, Direction::Generate, eps_fn, s);
        CHECK(oracle::max_abs(gen.image, x) < 1e-5);

        auto back = ddim_traverse(ddim_traverse(x, plan, Direction::Generate, eps_fn, s).image, plan,
                                  Direction::Invert, eps_fn, s);
        CHECK(oracle::max_abs(back.image, x) < 1e-5);

        // Through the clean end only x0* itself survives the round trip.
        TimestepPlan full = TimestepPlan::strided(T, S);
        auto u = ddim_traverse(x_star, full, Direction::Invert, eps_fn, s).image;
        CHECK(oracle::max_abs(ddim_traverse(u, full, Direction::Generate, eps_fn, s).image, x_star) < 1e-5);
      }
    }
  }
}

TEST_CASE("single-step plan projects straight to x0") {
  auto s = make_schedule(ScheduleKind::Linear, 50);
  auto x_star = image(14);
  TimestepPlan plan{{50}, 0};
  auto out = ddim_traverse(image(15), plan, Direction::Generate, oracle::point_mass(x_star, s), s, true);
  CHECK(out.trajectory.size() == 2);
  CHECK(oracle::max_abs(out.image, x_star) < 1e-6);
}

TEST_CASE("denoising loss") {
  auto s = make_schedule(ScheduleKind::Linear, 100);
  auto x0 = torch::rand({256, 1, 8, 8}, kF64) * 2 - 1;

  auto gen = at::make_generator<at::CPUGeneratorImpl>(7);
  BatchEpsilonFn zero = [](const torch::Tensor& x, const torch::Tensor&) { return torch::zeros_like(x); };
  double l0 = denoising_loss(x0, zero, s, gen).item<double>();
  // E[eps^2] = 1 with standard error sqrt(2 / N)
  CHECK(std::abs(l0 - 1.0) < 3.0 * std::sqrt(2.0 / x0.numel()));

  // Recover the true noise from x_t using the known x0: exact prediction.
  auto alphas = torch::tensor(s.alphas(), kF64);
  BatchEpsilonFn perfect = [&](const torch::Tensor& xt, const torch::Tensor& t) {
    auto a = alphas.index_select(0, t).view({-1, 1, 1, 1});
    return (xt - a.sqrt() * x0) / (1 - a).sqrt();
  };
  CHECK(denoising_loss(x0, perfect, s, gen).item<double>() < 1e-20);

  BatchEpsilonFn noisy = [](const torch::Tensor& x, const torch::Tensor&) { return 3.0 * x; };
  CHECK(denoising_loss(x0, noisy, s, gen).item<double>() >= 0.0);
}

TEST_CASE("denoising loss gradient matches finite differences") {
  auto s = make_schedule(ScheduleKind::Linear, 100);
  auto x0 = torch::rand({16, 1, 4, 4}, kF64) * 2 - 1;
  auto loss_at = [&](const torch::Tensor& w) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(99);
    BatchEpsilonFn lin = [&](const torch::Tensor& x, const torch::Tensor&) { return w[0] * x + w[1]; };
    return denoising_loss(x0, lin, s, gen);
  };
  auto w = torch::tensor({0.3, -0.2}, kF64).requires_grad_(true);
  auto grad = torch::autograd::grad({loss_at(w)}, {w})[0];
  auto f = [&](const std::vector<double>& v) { return loss_at(torch::tensor(v, kF64)).item<double>(); };
  for (std::size_t i = 0; i < 2; ++i) {
    double fd = oracle::central_difference(f, {0.3, -0.2}, i, 1e-5);
    double g = grad[static_cast<int64_t>(i)].item<double>();
    CHECK(std::abs(g - fd) <= 1e-4 * std::abs(fd));
  }
}
