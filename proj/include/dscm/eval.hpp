#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dscm/data.hpp"
#include "dscm/nets.hpp"
#include "dscm/scm.hpp"

namespace dscm::eval {

/// Counterfactual images for a batch. Inputs and outputs on [0, 1].
using CounterfactualFn = std::function<torch::Tensor(const torch::Tensor& x, std::span<const ParentVector> pa,
                                                     std::span<const ParentVector> cf_pa)>;

/// Mean absolute difference per sample, [B].
torch::Tensor l1_per_sample(const torch::Tensor& a, const torch::Tensor& b);

double composition(const torch::Tensor& x, std::span<const ParentVector> pa, const CounterfactualFn& cf);
double reversibility(const torch::Tensor& x, std::span<const ParentVector> pa, std::span<const ParentVector> cf_pa,
                     const CounterfactualFn& cf);

// ------------------------------------------------------------------ predictors

enum class MetricKind { Accuracy, Mape };
std::string to_string(MetricKind kind);

/// Per-sample predictions; nullopt marks a measurement failure.
using Measurement = std::function<std::vector<std::optional<double>>(const torch::Tensor& images)>;

struct AttributePredictor {
  MetricKind kind = MetricKind::Accuracy;
  Measurement measure;
};

class AntiCausalPredictor {
 public:
  void add(const std::string& attribute, AttributePredictor predictor);
  bool has(const std::string& attribute) const { return predictors_.count(attribute) != 0; }
  /// Throws StateError naming the attribute when no predictor is registered.
  const AttributePredictor& at(const std::string& attribute) const;

 private:
  std::map<std::string, AttributePredictor> predictors_;
};

struct AttributeScore {
  std::string attribute;
  MetricKind kind = MetricKind::Accuracy;
  double value = 0.0;    // accuracy or MAPE, in percent
  int64_t n = 0;         // scored samples
  int64_t failures = 0;  // excluded measurement failures
};

AttributeScore effectiveness(const torch::Tensor& cf_images, std::span<const ParentVector> cf_pa,
                             const std::string& attribute, const AntiCausalPredictor& predictor);

// ------------------------------------------------------------------ digit classifier

struct ClassifierConfig {
  int64_t epochs = 100;
  int64_t batch_size = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool shuffle_labels = false;
  int64_t max_shift = 2;     // random translation of training images, pixels
  bool cosine_decay = true;  // learning rate annealed to zero over the run

  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

class Classifier {
 public:
  explicit Classifier(ClassifierConfig config = {});

  const ClassifierConfig& config() const { return config_; }
  nets::DigitClassifier& net() { return net_; }
  bool trained() const { return trained_; }
  void mark_trained(double test_accuracy);
  double test_accuracy() const { return test_accuracy_; }

  /// Images on [0, 1], [B, C, H, W]; colour images are reduced to their value
  /// channel and every image is scaled to a peak of 1.
  torch::Tensor logits(const torch::Tensor& images) const;
  torch::Tensor predict(const torch::Tensor& images) const;
  torch::Tensor features(const torch::Tensor& images) const;

  void save(const std::filesystem::path& dir) const;
  static std::shared_ptr<Classifier> load(const std::filesystem::path& dir);

 private:
  ClassifierConfig config_;
  mutable nets::DigitClassifier net_;
  bool trained_ = false;
  double test_accuracy_ = 0.0;
};

/// Percent of images whose predicted class equals the label.
double accuracy(const Classifier& c, const torch::Tensor& images, const torch::Tensor& labels,
                int64_t batch_size = 1024);

using EpochCallback = std::function<void(int64_t epoch, double loss)>;

/// Adam with cross-entropy; test accuracy is recorded on the result.
std::shared_ptr<Classifier> train_digit_classifier(const data::TensorSplit& train, const data::TensorSplit& test,
                                                   const ClassifierConfig& config, const EpochCallback& progress = {});

/// d from the classifier (when given); t, i and s from the morphometric measurers.
AntiCausalPredictor morpho_predictor(std::shared_ptr<const Classifier> classifier);

// ------------------------------------------------------------------ identity preservation

/// Per-sample perceptual distance, [B].
using PerceptualFn = std::function<torch::Tensor(const torch::Tensor& a, const torch::Tensor& b)>;

/// Mean squared distance between penultimate classifier features. Throws
/// StateError for an untrained classifier.
PerceptualFn classifier_feature_distance(std::shared_ptr<const Classifier> classifier);

double idp(const torch::Tensor& composition, const torch::Tensor& counterfactual, const PerceptualFn& perceptual);

// ------------------------------------------------------------------ reports

struct SoundnessReport {
  std::string checkpoint_hash;
  std::string mechanism;
  std::string mode;
  double omega = 1.0;
  int64_t steps = 0;
  std::uint64_t seed = 0;
  int64_t n = 0;
  double composition = 0.0;
  double reversibility = 0.0;  // mean over intervened attributes
  std::map<std::string, double> reversibility_by_attribute;
  std::map<std::string, AttributeScore> effectiveness;
  std::optional<double> idp;

  nlohmann::json to_json() const;
  /// Table layout: one effectiveness column per attribute, then Rev. and Comp.
  std::string csv() const;
};

struct SoundnessSettings {
  std::vector<std::string> attributes;
  std::uint64_t seed = 0;
  int64_t batch_size = 32;
};

/// Randomised interventions on each attribute: categorical nodes move to a
/// uniformly drawn different class, continuous nodes take another sample's value.
std::vector<ParentVector> random_interventions(const Scm& scm, std::span<const ParentVector> pa,
                                               const std::string& attribute, std::uint64_t seed);

/// Composition once, then for each attribute: counterfactuals, effectiveness,
/// reversibility and (when perceptual is set) IDP against the compositions.
SoundnessReport evaluate_soundness(const Scm& scm, const CounterfactualFn& cf, const torch::Tensor& x,
                                   std::span<const ParentVector> pa, const AntiCausalPredictor& predictor,
                                   const PerceptualFn* perceptual, const SoundnessSettings& settings);

struct MediationReport {
  std::string node;
  double value = 0.0;
  int64_t n = 0;
  torch::Tensor composition;  // cf(x, pa, pa)
  torch::Tensor direct;       // effect images x~ - composition
  torch::Tensor indirect;
  torch::Tensor total;
  torch::Tensor residual_per_sample;  // mean |DE + IDE - TE|, [B]
  double residual = 0.0;

  nlohmann::json to_json() const;
};

/// DE: only k changes. IDE: counterfactual parents with k reset to its observed
/// value. TE: full counterfactual parents.
MediationReport mediation_effects(const Scm& scm, const torch::Tensor& x, std::span<const ParentVector> pa,
                                  const std::string& node, double value, const CounterfactualFn& cf);
MediationReport mediation_effects(const Scm& scm, const torch::Tensor& x, std::span<const ParentVector> pa,
                                  const std::string& node, double value, AbductionMode mode);

}  // namespace dscm::eval
