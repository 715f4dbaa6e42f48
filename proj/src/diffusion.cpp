#include "dscm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dscm/error.hpp"

namespace dscm::diffusion {

namespace {

constexpr double kMinAlpha = 1e-8;

void check_timestep(int64_t t, const NoiseSchedule& s) {
  if (t < 0 || t > s.steps()) {
    std::ostringstream os;
    os << "timestep " << t << " outside [0, " << s.steps() << "]";
    throw ArgumentError(os.str());
  }
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ArgumentError("unknown noise schedule '" + s + "' (expected linear|cosine)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Linear ? "linear" : "cosine"; }

NoiseSchedule::NoiseSchedule(ScheduleKind kind, std::vector<double> alphas)
    : kind_(kind), alphas_(std::move(alphas)) {
  if (alphas_.size() < 2) throw ArgumentError("a noise schedule needs at least one step");
  if (alphas_.front() != 1.0) throw ArgumentError("alpha_0 must equal 1");
  for (std::size_t t = 1; t < alphas_.size(); ++t)
    if (!(alphas_[t] < alphas_[t - 1]) || !(alphas_[t] > 0.0))
      throw ArgumentError("noise schedule must be strictly decreasing in (0, 1]");
}

double NoiseSchedule::alpha(int64_t t) const {
  check_timestep(t, *this);
  return alphas_[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(ScheduleKind kind, int64_t T) {
  if (T < 1) throw ArgumentError("schedule needs T >= 1");
  std::vector<double> a(static_cast<std::size_t>(T) + 1);
  a[0] = 1.0;
  if (kind == ScheduleKind::Linear) {
    constexpr double lo = 1e-4, hi = 0.02;
    for (int64_t t = 1; t <= T; ++t) {
      double beta = T == 1 ? lo : lo + (hi - lo) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
      a[t] = a[t - 1] * (1.0 - beta);
    }
  } else {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int64_t t = 1; t <= T; ++t) a[t] = f(static_cast<double>(t)) / f0;
  }
  for (auto& v : a) v = std::max(v, kMinAlpha);
  return NoiseSchedule(kind, std::move(a));
}

TimestepPlan TimestepPlan::strided(int64_t T, int64_t S) {
  if (T < 1 || S < 1 || S > T) throw ArgumentError("plan needs 1 <= S <= T");
  TimestepPlan plan;
  for (int64_t i = 1; i <= S; ++i) {
    auto t = static_cast<int64_t>(std::llround(static_cast<double>(i) * static_cast<double>(T) / static_cast<double>(S)));
    plan.steps.push_back(t);
  }
  return plan;
}

void TimestepPlan::validate(const NoiseSchedule& schedule) const {
  if (steps.empty()) throw ArgumentError("timestep plan is empty");
  check_timestep(origin, schedule);
  int64_t prev = origin;
  for (auto t : steps) {
    check_timestep(t, schedule);
    if (t <= prev) throw ArgumentError("timestep plan must be strictly increasing above its origin");
    prev = t;
  }
}

torch::Tensor forward_marginal_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                                      const NoiseSchedule& schedule) {
  if (!x0.sizes().equals(eps.sizes())) throw ArgumentError("noise and image shapes differ");
  const double a = schedule.alpha(t);
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor posterior_mean(const torch::Tensor& x0, const torch::Tensor& x_t, int64_t t, int64_t t_prev,
                             const NoiseSchedule& schedule) {
  if (t == t_prev) {
    check_timestep(t, schedule);
    return x_t;
  }
  const double a = schedule.alpha(t);
  const double ap = schedule.alpha(t_prev);
  if (a >= 1.0) throw ArgumentError("posterior mean is undefined at alpha_t = 1");
  return std::sqrt(ap) * x0 + std::sqrt(1.0 - ap) * ((x_t - std::sqrt(a) * x0) / std::sqrt(1.0 - a));
}

torch::Tensor denoise_to_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int64_t t,
                            const NoiseSchedule& schedule) {
  const double a = schedule.alpha(t);
  return (x_t - std::sqrt(1.0 - a) * eps_hat) / std::sqrt(a);
}

torch::Tensor denoise_to_x0(const torch::Tensor& x_t, int64_t t, const EpsilonFn& eps,
                            const NoiseSchedule& schedule) {
  return denoise_to_x0(x_t, eps(x_t, t), t, schedule);
}

torch::Tensor ddim_step(const torch::Tensor& x_t, int64_t t, int64_t t_prev, const EpsilonFn& eps,
                        const NoiseSchedule& schedule) {
  if (!(t > t_prev) || t_prev < 0) throw ArgumentError("ddim_step requires t > t_prev >= 0");
  return posterior_mean(denoise_to_x0(x_t, t, eps, schedule), x_t, t, t_prev, schedule);
}

torch::Tensor ddim_inverse_step(const torch::Tensor& x_prev, int64_t t_prev, int64_t t, const EpsilonFn& eps,
                                const NoiseSchedule& schedule) {
  if (!(t > t_prev) || t_prev < 0) throw ArgumentError("ddim_inverse_step requires t > t_prev >= 0");
  const double ap = schedule.alpha(t_prev);
  const double a = schedule.alpha(t);
  torch::Tensor eps_hat = eps(x_prev, t_prev);
  torch::Tensor x0 = denoise_to_x0(x_prev, eps_hat, t_prev, schedule);
  if (ap < 1.0) return posterior_mean(x0, x_prev, t_prev, t, schedule);
  // At the clean end mu is 0/0; its limit re-noises with the estimate itself.
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps_hat;
}

Traversal ddim_traverse(const torch::Tensor& x_start, const TimestepPlan& plan, Direction direction,
                        const EpsilonFn& eps, const NoiseSchedule& schedule, bool retain_trajectory) {
  plan.validate(schedule);
  Traversal out;
  torch::Tensor x = x_start;
  if (retain_trajectory) out.trajectory.push_back(x);
  const std::size_t S = plan.size();
  if (direction == Direction::Generate) {
    for (std::size_t k = S; k-- > 0;) {
      x = ddim_step(x, plan.steps[k], plan.previous(k), eps, schedule);
      if (retain_trajectory) out.trajectory.push_back(x);
    }
  } else {
    for (std::size_t k = 0; k < S; ++k) {
      x = ddim_inverse_step(x, plan.previous(k), plan.steps[k], eps, schedule);
      if (retain_trajectory) out.trajectory.push_back(x);
    }
  }
  out.image = x;
  return out;
}

torch::Tensor denoising_loss(const torch::Tensor& x0, const BatchEpsilonFn& eps, const NoiseSchedule& schedule,
                             at::Generator& generator) {
  const int64_t B = x0.size(0);
  auto t = torch::randint(1, schedule.steps() + 1, {B}, generator, torch::TensorOptions().dtype(torch::kLong));
  auto noise = torch::randn(x0.sizes(), generator, x0.options());
  auto alphas = torch::tensor(schedule.alphas(), x0.options().dtype(torch::kDouble)).index_select(0, t).to(x0.dtype());
  std::vector<int64_t> shape(static_cast<std::size_t>(x0.dim()), 1);
  shape[0] = B;
  alphas = alphas.view(shape);
  auto x_t = alphas.sqrt() * x0 + (1.0 - alphas).sqrt() * noise;
  return (noise - eps(x_t, t)).pow(2).mean();
}

}  // namespace dscm::diffusion
