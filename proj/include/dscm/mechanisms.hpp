#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <ATen/core/Generator.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dscm/diffusion.hpp"
#include "dscm/nets.hpp"
#include "dscm/scm.hpp"

namespace dscm::mech {

enum class MechanismKind { Spatial, Semantic };
MechanismKind parse_mechanism_kind(const std::string& s);
std::string to_string(MechanismKind kind);

/// One node of the condition vector: one-hot for categoricals, standardised
/// value for continuous nodes.
struct ConditionField {
  std::string node;
  NodeKind kind = NodeKind::Continuous;
  int categories = 0;
  double mean = 0.0;
  double std = 1.0;
};

class ConditionLayout {
 public:
  ConditionLayout() = default;
  explicit ConditionLayout(std::vector<ConditionField> fields);

  /// Fields for the image parents of `scm`; continuous statistics from `samples`.
  static ConditionLayout for_scm(const Scm& scm, std::span<const ParentVector> samples);

  int64_t width() const;
  const std::vector<ConditionField>& fields() const { return fields_; }
  /// [B, width] float tensor.
  torch::Tensor encode(std::span<const ParentVector> pa) const;

  nlohmann::json to_json() const;
  static ConditionLayout from_json(const nlohmann::json& j);

 private:
  std::vector<ConditionField> fields_;
};

/// Architecture and training hyperparameters. Defaults follow the reference
/// Morpho-MNIST setup; desk-scale runs override them from a config file.
struct MechanismConfig {
  MechanismKind kind = MechanismKind::Spatial;
  std::string scm = "morpho";  // SCM preset whose image parents form the condition
  diffusion::ScheduleKind schedule = diffusion::ScheduleKind::Linear;
  int64_t timesteps = 1000;
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mult{1, 4, 8};
  int64_t res_blocks = 1;
  int64_t groups = 8;
  int64_t encoder_base_channels = 64;
  std::vector<int64_t> encoder_channel_mult{1, 2, 4, 8};
  double encoder_dropout = 0.1;
  int64_t z_dim = 8;
  double beta = 1e-2;
  double p_null = 0.1;
  double omega = 1.5;
  double eta = 1e-3;
  double learning_rate = 1e-4;
  int64_t batch_size = 128;
  double ema_decay = 0.9999;
  int64_t epochs = 100;
  int64_t inference_steps = 100;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static MechanismConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct GuidanceConfig {
  double omega = 1.0;
  double p_null = 0.0;
  void validate() const;
};

struct Provenance {
  AbductionMode mode = AbductionMode::Spatial;
  diffusion::TimestepPlan plan;
  std::uint64_t seed = 0;
};

/// Inferred exogenous noise for a batch.
struct Abduction {
  torch::Tensor u;                          // [B, C, H, W]
  torch::Tensor z;                          // [B, z_dim], semantic only
  std::vector<torch::Tensor> tokens;        // per plan step, [B, D], dynamic only
  std::vector<torch::Tensor> trajectory;    // inversion states, when retained
  Provenance provenance;
};

/// Noise estimator with explicit conditioning, the form guidance and CTA operate on.
using ConditionalEpsFn =
    std::function<torch::Tensor(const torch::Tensor& x_t, int64_t t, const nets::Conditioning& c)>;

/// eps_null + omega (eps_c - eps_null)
torch::Tensor combine_guidance(const torch::Tensor& eps_c, const torch::Tensor& eps_null, double omega);

/// Guided estimate. omega == 1 returns the conditional estimate and omega == 0
/// the unconditional one without evaluating the other branch. token may be
/// undefined (use the model's learned token), [D] or [B, D].
torch::Tensor cfg_estimate(const ConditionalEpsFn& eps, const torch::Tensor& x_t, const torch::Tensor& cond,
                           const torch::Tensor& token, int64_t t, double omega);

/// Per-sample KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions, [B].
torch::Tensor kl_divergence(const torch::Tensor& mean, const torch::Tensor& logvar);

class Mechanism {
 public:
  Mechanism(MechanismConfig config, ConditionLayout layout, int64_t image_channels = 1);

  const MechanismConfig& config() const { return config_; }
  const ConditionLayout& layout() const { return layout_; }
  const diffusion::NoiseSchedule& schedule() const { return schedule_; }
  MechanismKind kind() const { return config_.kind; }
  bool semantic() const { return config_.kind == MechanismKind::Semantic; }
  int64_t cond_dim() const;
  int64_t image_channels() const { return image_channels_; }

  bool trained() const { return trained_; }
  void mark_trained(bool v = true) { trained_ = v; }
  int64_t step() const { return step_; }
  int64_t epoch() const { return epoch_; }
  void set_progress(int64_t step, int64_t epoch) { step_ = step; epoch_ = epoch; }

  // Training weights and their exponential moving averages (used for inference).
  nets::UNet& unet() { return unet_; }
  nets::UNet& ema_unet() const { return ema_unet_; }
  nets::SemanticEncoder& encoder() { return encoder_; }
  nets::SemanticEncoder& ema_encoder() const { return ema_encoder_; }
  std::vector<torch::Tensor> trainable_parameters();
  void update_ema();

  /// Conditional estimator over the EMA network, or the override when set.
  ConditionalEpsFn estimator() const;
  /// Replaces the network estimator, e.g. with an analytic denoiser.
  void override_estimator(ConditionalEpsFn eps) { override_ = std::move(eps); }
  /// Default inference plan: strided with config().inference_steps steps.
  diffusion::TimestepPlan default_plan() const;

  /// Writes weights plus metadata.json under dir.
  void save(const std::filesystem::path& dir) const;
  /// `config`, when given, replaces the stored one (resume with a longer schedule).
  static std::shared_ptr<Mechanism> load(const std::filesystem::path& dir, const MechanismConfig* config = nullptr);
  nlohmann::json metadata() const;

 private:
  MechanismConfig config_;
  ConditionLayout layout_;
  int64_t image_channels_;
  diffusion::NoiseSchedule schedule_;
  nets::UNet unet_{nullptr};
  mutable nets::UNet ema_unet_{nullptr};
  nets::SemanticEncoder encoder_{nullptr};
  mutable nets::SemanticEncoder ema_encoder_{nullptr};
  ConditionalEpsFn override_;
  bool trained_ = false;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
};

inline constexpr int kCheckpointVersion = 1;

/// Images as stored (0..255) -> [-1, 1], and back.
torch::Tensor normalise(const torch::Tensor& bytes);
torch::Tensor to_unit(const torch::Tensor& x);

// ------------------------------------------------------------------ spatial

Abduction spatial_abduct(const Mechanism& mech, const torch::Tensor& x, std::span<const ParentVector> pa,
                         const diffusion::TimestepPlan& plan, bool retain_trajectory = false);

torch::Tensor spatial_predict(const Mechanism& mech, const Abduction& abd, std::span<const ParentVector> cf_pa,
                              const diffusion::TimestepPlan& plan,
                              const std::optional<GuidanceConfig>& guidance = std::nullopt);

// ------------------------------------------------------------------ semantic

enum class EncodeMode { Deterministic, Sample };

torch::Tensor semantic_encode(const Mechanism& mech, const torch::Tensor& x, EncodeMode mode,
                              at::Generator* gen = nullptr);

/// M particles; deterministic mode requires M == 1.
std::vector<Abduction> semantic_abduct(const Mechanism& mech, const torch::Tensor& x,
                                       std::span<const ParentVector> pa, const diffusion::TimestepPlan& plan,
                                       EncodeMode mode, int M = 1, at::Generator* gen = nullptr,
                                       bool retain_trajectory = false);

/// Mean over particles of the generations conditioned on (z, cf_pa). Uses
/// per-step tokens when the abductions carry them.
torch::Tensor semantic_predict(const Mechanism& mech, std::span<const Abduction> abductions,
                               std::span<const ParentVector> cf_pa, const diffusion::TimestepPlan& plan,
                               const std::optional<GuidanceConfig>& guidance = std::nullopt, int M = -1);

// ------------------------------------------------------------------ dynamic abduction

/// Squared distance between the inversion state at t_prev and the guided step
/// from x_t, with its gradient with respect to the token. Summed over the batch.
struct TokenStep {
  torch::Tensor x_prev;  // guided step output (detached)
  torch::Tensor loss;    // [B]
  torch::Tensor grad;    // same shape as token
};
TokenStep cta_token_step(const ConditionalEpsFn& eps, const diffusion::NoiseSchedule& schedule,
                         const torch::Tensor& x_t, const torch::Tensor& target, const torch::Tensor& cond,
                         const torch::Tensor& token, int64_t t, int64_t t_prev, double omega);

/// Counterfactual trajectory alignment: one gradient update of the guidance
/// token per plan step. tokens[k] is the token used at plan.steps[k].
std::vector<torch::Tensor> cta_optimize(const ConditionalEpsFn& eps, const diffusion::NoiseSchedule& schedule,
                                        const std::vector<torch::Tensor>& trajectory, const torch::Tensor& cond,
                                        const torch::Tensor& initial_token, double omega, double eta,
                                        const diffusion::TimestepPlan& plan);

std::vector<torch::Tensor> cta_optimize(const Mechanism& mech, const Abduction& abd, std::span<const ParentVector> pa,
                                        double omega, double eta, const diffusion::TimestepPlan& plan);

torch::Tensor dynamic_counterfactual(const Mechanism& mech, const torch::Tensor& x, std::span<const ParentVector> pa,
                                     std::span<const ParentVector> cf_pa, double omega, double eta,
                                     const diffusion::TimestepPlan& plan);

// ------------------------------------------------------------------ training

struct StepResult {
  double loss = 0.0;     // total objective
  double denoise = 0.0;
  double kl = 0.0;       // semantic only
  int64_t dropped = 0;   // samples whose condition was replaced by the token
  int64_t batch = 0;
};

/// Per-sample token dropout mask with probability p_null.
torch::Tensor dropout_mask(int64_t batch, double p_null, at::Generator& gen);

/// Objective for one batch without touching parameters (gradients accumulate on the live networks).
StepResult spatial_objective(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond, double p_null,
                             at::Generator& gen, torch::Tensor* total = nullptr);
StepResult semantic_objective(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond, double p_null,
                              at::Generator& gen, torch::Tensor* total = nullptr);

StepResult train_spatial_step(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond,
                              const GuidanceConfig& guidance, torch::optim::Optimizer& opt, at::Generator& gen);
StepResult train_semantic_step(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond,
                               const GuidanceConfig& guidance, torch::optim::Optimizer& opt, at::Generator& gen);

std::unique_ptr<torch::optim::Adam> make_optimizer(Mechanism& mech);

// ------------------------------------------------------------------ SCM adapter

struct InferenceOptions {
  diffusion::TimestepPlan plan;
  double omega = 1.0;
  double eta = 1e-3;
  int particles = 1;
  std::uint64_t seed = 0;
};

/// Exposes a trained mechanism as the SCM's image mechanism.
class DiffusionImageMechanism : public ImageMechanism {
 public:
  DiffusionImageMechanism(std::shared_ptr<const Mechanism> mech, InferenceOptions options);
  bool trained() const override { return mech_->trained(); }
  bool supports(AbductionMode mode) const override;
  torch::Tensor counterfactual(const torch::Tensor& x, std::span<const ParentVector> pa,
                               std::span<const ParentVector> cf_pa, AbductionMode mode) const override;
  const InferenceOptions& options() const { return options_; }

 private:
  std::shared_ptr<const Mechanism> mech_;
  InferenceOptions options_;
};

}  // namespace dscm::mech
