#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace dscm::diffusion {

enum class ScheduleKind { Linear, Cosine };

ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(ScheduleKind kind);

/// Cumulative signal rates alpha_0..alpha_T with alpha_0 = 1, strictly decreasing.
class NoiseSchedule {
 public:
  NoiseSchedule(ScheduleKind kind, std::vector<double> alphas);

  ScheduleKind kind() const { return kind_; }
  int64_t steps() const { return static_cast<int64_t>(alphas_.size()) - 1; }  // T
  double alpha(int64_t t) const;
  const std::vector<double>& alphas() const { return alphas_; }

 private:
  ScheduleKind kind_;
  std::vector<double> alphas_;
};

/// Linear: products of (1 - beta) with beta spaced 1e-4 -> 0.02.
/// Cosine: squared-cosine cumulative schedule with offset 0.008. Both clamp alpha_T >= 1e-8.
NoiseSchedule make_schedule(ScheduleKind kind, int64_t T);

/// Ascending timesteps tau_1 < ... < tau_S traversed between `origin` (the clean
/// end, normally 0) and tau_S.
struct TimestepPlan {
  std::vector<int64_t> steps;
  int64_t origin = 0;

  /// S evenly spaced steps ending at T; S == T gives the full plan.
  static TimestepPlan strided(int64_t T, int64_t S);
  std::size_t size() const { return steps.size(); }
  /// Timestep preceding steps[j] on the way to the clean end.
  int64_t previous(std::size_t j) const { return j == 0 ? origin : steps[j - 1]; }
  void validate(const NoiseSchedule& schedule) const;
};

/// Noise estimate for a batch at a shared timestep.
using EpsilonFn = std::function<torch::Tensor(const torch::Tensor& x_t, int64_t t)>;
/// Noise estimate for a batch with per-sample timesteps (training).
using BatchEpsilonFn = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t)>;

torch::Tensor forward_marginal_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                                      const NoiseSchedule& schedule);

/// mu(x0, x_t, t, t_prev) = sqrt(a_prev) x0 + sqrt(1 - a_prev) (x_t - sqrt(a_t) x0) / sqrt(1 - a_t).
torch::Tensor posterior_mean(const torch::Tensor& x0, const torch::Tensor& x_t, int64_t t, int64_t t_prev,
                             const NoiseSchedule& schedule);

/// (x_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t)
torch::Tensor denoise_to_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int64_t t,
                            const NoiseSchedule& schedule);
torch::Tensor denoise_to_x0(const torch::Tensor& x_t, int64_t t, const EpsilonFn& eps,
                            const NoiseSchedule& schedule);

/// Deterministic generative transition x_t -> x_{t_prev}; requires t > t_prev >= 0.
torch::Tensor ddim_step(const torch::Tensor& x_t, int64_t t, int64_t t_prev, const EpsilonFn& eps,
                        const NoiseSchedule& schedule);

/// Inverse transition x_{t_prev} -> x_t using the estimate at t_prev; requires t > t_prev >= 0.
torch::Tensor ddim_inverse_step(const torch::Tensor& x_prev, int64_t t_prev, int64_t t, const EpsilonFn& eps,
                                const NoiseSchedule& schedule);

enum class Direction { Generate, Invert };

struct Traversal {
  torch::Tensor image;
  /// States in traversal order (plan.size() + 1 entries) when retained.
  std::vector<torch::Tensor> trajectory;
};

Traversal ddim_traverse(const torch::Tensor& x_start, const TimestepPlan& plan, Direction direction,
                        const EpsilonFn& eps, const NoiseSchedule& schedule, bool retain_trajectory = false);

/// Mean squared error between sampled noise and its estimate on x_t, with
/// t ~ U{1..T} and eps ~ N(0, I) drawn per sample from `generator`.
torch::Tensor denoising_loss(const torch::Tensor& x0, const BatchEpsilonFn& eps, const NoiseSchedule& schedule,
                             at::Generator& generator);

}  // namespace dscm::diffusion
