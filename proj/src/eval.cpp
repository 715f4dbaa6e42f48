#include "dscm/eval.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dscm/error.hpp"
#include "dscm/morpho.hpp"

namespace dscm::eval {

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes()))
    throw ArgumentError("image shapes differ: " + std::to_string(a.dim()) + "-d batch of " +
                        std::to_string(a.numel()) + " vs " + std::to_string(b.numel()) + " values");
}

void check_batch(const torch::Tensor& x, std::size_t n) {
  if (x.dim() != 4 || x.size(0) != static_cast<int64_t>(n))
    throw ArgumentError("expected a [B, C, H, W] batch matching the parent list");
}

double mean_of(const torch::Tensor& t) { return t.mean().item<double>(); }

torch::Tensor value_channel(const torch::Tensor& images) {
  auto x = images.to(torch::kFloat);
  return x.size(1) == 1 ? x : std::get<0>(x.max(1, true));
}

// Classifier input: value channel scaled to unit peak.
torch::Tensor classifier_input(const torch::Tensor& images) {
  auto v = value_channel(images);
  auto peak = std::get<0>(v.flatten(1).max(1)).clamp_min(1e-6);
  return v / peak.view({-1, 1, 1, 1});
}

// Independent random translation of each image by up to `shift` pixels, zero fill.
torch::Tensor random_shift(const torch::Tensor& x, int64_t shift, at::Generator& gen) {
  if (shift <= 0) return x;
  const int64_t H = x.size(2), W = x.size(3);
  auto padded = torch::constant_pad_nd(x, {shift, shift, shift, shift}, 0.0);
  auto offsets = torch::randint(0, 2 * shift + 1, {x.size(0), 2}, gen, torch::kLong);
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(x.size(0)));
  auto acc = offsets.accessor<int64_t, 2>();
  for (int64_t k = 0; k < x.size(0); ++k) out.push_back(padded[k].narrow(1, acc[k][0], H).narrow(2, acc[k][1], W));
  return torch::stack(out);
}

}  // namespace

torch::Tensor l1_per_sample(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b);
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().flatten(1).mean(1);
}

double composition(const torch::Tensor& x, std::span<const ParentVector> pa, const CounterfactualFn& cf) {
  check_batch(x, pa.size());
  return mean_of(l1_per_sample(x, cf(x, pa, pa)));
}

double reversibility(const torch::Tensor& x, std::span<const ParentVector> pa, std::span<const ParentVector> cf_pa,
                     const CounterfactualFn& cf) {
  check_batch(x, pa.size());
  if (cf_pa.size() != pa.size()) throw ArgumentError("parent lists differ in length");
  auto forward = cf(x, pa, cf_pa);
  return mean_of(l1_per_sample(x, cf(forward, cf_pa, pa)));
}

// ------------------------------------------------------------------ predictors

std::string to_string(MetricKind kind) { return kind == MetricKind::Accuracy ? "accuracy" : "mape"; }

void AntiCausalPredictor::add(const std::string& attribute, AttributePredictor predictor) {
  predictors_[attribute] = std::move(predictor);
}

const AttributePredictor& AntiCausalPredictor::at(const std::string& attribute) const {
  auto it = predictors_.find(attribute);
  if (it == predictors_.end()) throw StateError("no anti-causal predictor for attribute '" + attribute + "'");
  return it->second;
}

AttributeScore effectiveness(const torch::Tensor& cf_images, std::span<const ParentVector> cf_pa,
                             const std::string& attribute, const AntiCausalPredictor& predictor) {
  check_batch(cf_images, cf_pa.size());
  const auto& p = predictor.at(attribute);
  auto predicted = p.measure(cf_images);
  if (predicted.size() != cf_pa.size()) throw StateError("predictor for '" + attribute + "' returned a wrong count");

  AttributeScore score{attribute, p.kind, 0.0, 0, 0};
  double total = 0.0;
  for (std::size_t k = 0; k < cf_pa.size(); ++k) {
    if (!predicted[k]) {
      ++score.failures;
      continue;
    }
    const double target = cf_pa[k].at(attribute);
    if (p.kind == MetricKind::Accuracy)
      total += std::lround(*predicted[k]) == std::lround(target) ? 1.0 : 0.0;
    else
      total += std::abs(*predicted[k] - target) / std::abs(target);
    ++score.n;
  }
  score.value = score.n > 0 ? 100.0 * total / static_cast<double>(score.n) : std::nan("");
  return score;
}

// ------------------------------------------------------------------ digit classifier

nlohmann::json ClassifierConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"seed", seed},
          {"shuffle_labels", shuffle_labels},
          {"max_shift", max_shift},
          {"cosine_decay", cosine_decay}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.shuffle_labels = j.value("shuffle_labels", c.shuffle_labels);
  c.max_shift = j.value("max_shift", c.max_shift);
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  return c;
}

Classifier::Classifier(ClassifierConfig config) : config_(config) {
  torch::manual_seed(config_.seed);
  net_ = nets::DigitClassifier();
  net_->eval();
}

void Classifier::mark_trained(double test_accuracy) {
  trained_ = true;
  test_accuracy_ = test_accuracy;
}

torch::Tensor Classifier::logits(const torch::Tensor& images) const {
  torch::NoGradGuard ng;
  net_->eval();
  return net_->forward(classifier_input(images));
}

torch::Tensor Classifier::predict(const torch::Tensor& images) const { return logits(images).argmax(1); }

torch::Tensor Classifier::features(const torch::Tensor& images) const {
  torch::NoGradGuard ng;
  net_->eval();
  return net_->features(classifier_input(images));
}

void Classifier::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  torch::save(net_, (dir / "classifier.pt").string());
  nlohmann::ordered_json meta;
  meta["architecture"] = "mlp-784-128-64-10";
  meta["trained"] = trained_;
  meta["test_accuracy"] = test_accuracy_;
  meta["config"] = config_.to_json();
  std::ofstream out(dir / "metadata.json");
  if (!out) throw IoError("cannot write classifier metadata under " + dir.string());
  out << meta.dump(2) << '\n';
}

std::shared_ptr<Classifier> Classifier::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "metadata.json");
  if (!in) throw IoError("no classifier metadata at " + (dir / "metadata.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed classifier metadata: " + std::string(e.what()));
  }
  auto c = std::make_shared<Classifier>(ClassifierConfig::from_json(meta.value("config", nlohmann::json::object())));
  try {
    torch::load(c->net_, (dir / "classifier.pt").string());
  } catch (const c10::Error& e) {
    throw IoError("cannot read classifier weights in " + dir.string() + ": " + e.what_without_backtrace());
  }
  c->net_->eval();
  c->trained_ = meta.value("trained", false);
  c->test_accuracy_ = meta.value("test_accuracy", 0.0);
  return c;
}

double accuracy(const Classifier& c, const torch::Tensor& images, const torch::Tensor& labels, int64_t batch_size) {
  const int64_t N = images.size(0);
  if (N == 0) return std::nan("");
  int64_t correct = 0;
  for (int64_t s = 0; s < N; s += batch_size) {
    const int64_t n = std::min(batch_size, N - s);
    auto x = images.narrow(0, s, n).to(torch::kFloat) / 255.0;
    correct += c.predict(x).eq(labels.narrow(0, s, n)).sum().item<int64_t>();
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(N);
}

std::shared_ptr<Classifier> train_digit_classifier(const data::TensorSplit& train, const data::TensorSplit& test,
                                                   const ClassifierConfig& config, const EpochCallback& progress) {
  if (config.epochs < 1 || config.batch_size < 1) throw ConfigError("classifier epochs and batch size must be positive");
  const int64_t N = train.size();
  if (N == 0) throw StateError("classifier training split is empty");
  auto model = std::make_shared<Classifier>(config);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);
  auto labels = train.labels;
  if (config.shuffle_labels) labels = labels.index_select(0, torch::randperm(N, gen));

  auto& net = model->net();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(config.learning_rate));
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.cosine_decay) {
      const double lr = 0.5 * config.learning_rate *
                        (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(config.epochs)));
      for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
    net->train();
    auto perm = torch::randperm(N, gen);
    double sum = 0.0;
    int64_t batches = 0;
    for (int64_t s = 0; s < N; s += config.batch_size) {
      auto idx = perm.narrow(0, s, std::min(config.batch_size, N - s));
      auto x = random_shift(train.images.index_select(0, idx).to(torch::kFloat) / 255.0, config.max_shift, gen);
      x = classifier_input(x);
      auto loss = torch::nn::functional::cross_entropy(net->forward(x), labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += loss.item<double>();
      ++batches;
    }
    if (progress) progress(epoch + 1, sum / static_cast<double>(batches));
  }
  net->eval();
  model->mark_trained(accuracy(*model, test.images, test.labels));
  return model;
}

AntiCausalPredictor morpho_predictor(std::shared_ptr<const Classifier> classifier) {
  AntiCausalPredictor p;
  if (classifier) {
    p.add("d", {MetricKind::Accuracy, [classifier](const torch::Tensor& images) {
                  auto pred = classifier->predict(images);
                  std::vector<std::optional<double>> out;
                  for (int64_t k = 0; k < pred.size(0); ++k) out.emplace_back(pred[k].item<double>());
                  return out;
                }});
  }
  auto measured = [](double morpho::Morphometrics::*field) {
    return AttributePredictor{MetricKind::Mape, [field](const torch::Tensor& images) {
                                std::vector<std::optional<double>> out;
                                for (int64_t k = 0; k < images.size(0); ++k) {
                                  try {
                                    out.emplace_back(morpho::measure_morphometrics(data::to_raster(images[k])).*field);
                                  } catch (const morpho::MeasurementError&) {
                                    out.emplace_back(std::nullopt);
                                  }
                                }
                                return out;
                              }};
  };
  p.add("t", measured(&morpho::Morphometrics::thickness));
  p.add("i", measured(&morpho::Morphometrics::intensity));
  p.add("s", measured(&morpho::Morphometrics::slant));
  return p;
}

// ------------------------------------------------------------------ identity preservation

PerceptualFn classifier_feature_distance(std::shared_ptr<const Classifier> classifier) {
  if (!classifier || !classifier->trained())
    throw StateError("perceptual distance needs a trained feature extractor");
  return [classifier](const torch::Tensor& a, const torch::Tensor& b) {
    check_pair(a, b);
    auto fa = classifier->features(a).to(torch::kDouble);
    auto fb = classifier->features(b).to(torch::kDouble);
    return (fa - fb).pow(2).mean(1);
  };
}

double idp(const torch::Tensor& composition, const torch::Tensor& counterfactual, const PerceptualFn& perceptual) {
  check_pair(composition, counterfactual);
  return mean_of(perceptual(composition, counterfactual));
}

// ------------------------------------------------------------------ soundness

nlohmann::json SoundnessReport::to_json() const {
  nlohmann::ordered_json j;
  j["checkpoint_hash"] = checkpoint_hash;
  j["mechanism"] = mechanism;
  j["mode"] = mode;
  j["omega"] = omega;
  j["steps"] = steps;
  j["seed"] = seed;
  j["n"] = n;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
  auto metric = [&](const std::string& name, double value, int64_t count, int64_t failures = 0) {
    nlohmann::ordered_json m;
    m["metric"] = name;
    m["value"] = std::isfinite(value) ? nlohmann::ordered_json(value) : nlohmann::ordered_json(nullptr);
    m["n"] = count;
    if (failures > 0) m["failures"] = failures;
    metrics.push_back(m);
  };
  metric("composition_l1", composition, n);
  metric("reversibility_l1", reversibility, n);
  for (const auto& [a, r] : reversibility_by_attribute) metric("reversibility_l1/" + a, r, n);
  for (const auto& [a, s] : effectiveness)
    metric("effectiveness_" + to_string(s.kind) + "/" + a, s.value, s.n, s.failures);
  if (idp) metric("idp", *idp, n);
  j["metrics"] = metrics;
  return j;
}

std::string SoundnessReport::csv() const {
  std::ostringstream out;
  out.precision(8);
  out << "mechanism,mode,omega,n";
  for (const auto& [a, s] : effectiveness) out << ",eff_" << a << '_' << to_string(s.kind);
  out << ",rev,comp,idp\n";
  out << mechanism << ',' << mode << ',' << omega << ',' << n;
  for (const auto& [a, s] : effectiveness) out << ',' << s.value;
  out << ',' << reversibility << ',' << composition << ',';
  if (idp) out << *idp;
  out << '\n';
  return out.str();
}

std::vector<ParentVector> random_interventions(const Scm& scm, std::span<const ParentVector> pa,
                                               const std::string& attribute, std::uint64_t seed) {
  const auto& domain = scm.mechanism(attribute).domain;
  std::mt19937_64 rng(seed);
  std::vector<ParentVector> out;
  out.reserve(pa.size());
  for (std::size_t k = 0; k < pa.size(); ++k) {
    double value;
    if (domain.kind == NodeKind::Categorical) {
      std::uniform_int_distribution<int> pick(0, domain.categories - 2);
      const int current = static_cast<int>(std::lround(pa[k].at(attribute)));
      int v = pick(rng);
      value = v >= current ? v + 1 : v;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pa.size() - 1);
      value = pa[pick(rng)].at(attribute);
    }
    Intervention iv;
    iv.assignments[attribute] = value;
    out.push_back(counterfactual_parents(scm, restrict_to(scm, pa[k]), iv));
  }
  return out;
}

namespace {

// cf over fixed-size chunks of the batch.
torch::Tensor batched(const CounterfactualFn& cf, const torch::Tensor& x, std::span<const ParentVector> pa,
                      std::span<const ParentVector> cf_pa, int64_t batch_size) {
  std::vector<torch::Tensor> parts;
  const int64_t N = x.size(0);
  for (int64_t s = 0; s < N; s += batch_size) {
    const auto n = std::min(batch_size, N - s);
    parts.push_back(cf(x.narrow(0, s, n), pa.subspan(s, n), cf_pa.subspan(s, n)));
  }
  return torch::cat(parts);
}

}  // namespace

SoundnessReport evaluate_soundness(const Scm& scm, const CounterfactualFn& cf, const torch::Tensor& x,
                                   std::span<const ParentVector> pa, const AntiCausalPredictor& predictor,
                                   const PerceptualFn* perceptual, const SoundnessSettings& settings) {
  check_batch(x, pa.size());
  if (settings.batch_size < 1) throw ArgumentError("batch size must be positive");
  for (const auto& a : settings.attributes) predictor.at(a);

  std::vector<ParentVector> obs;
  for (const auto& p : pa) obs.push_back(restrict_to(scm, p));

  SoundnessReport r;
  r.seed = settings.seed;
  r.n = x.size(0);
  auto comp = batched(cf, x, obs, obs, settings.batch_size);
  r.composition = mean_of(l1_per_sample(x, comp));

  double rev_sum = 0.0, idp_sum = 0.0;
  for (std::size_t k = 0; k < settings.attributes.size(); ++k) {
    const auto& a = settings.attributes[k];
    auto cf_pa = random_interventions(scm, obs, a, settings.seed + k + 1);
    auto cfx = batched(cf, x, obs, cf_pa, settings.batch_size);
    r.effectiveness[a] = effectiveness(cfx, cf_pa, a, predictor);
    auto back = batched(cf, cfx, cf_pa, obs, settings.batch_size);
    r.reversibility_by_attribute[a] = mean_of(l1_per_sample(x, back));
    rev_sum += r.reversibility_by_attribute[a];
    if (perceptual) idp_sum += idp(comp, cfx, *perceptual);
  }
  const auto A = static_cast<double>(settings.attributes.size());
  r.reversibility = A > 0 ? rev_sum / A : 0.0;
  if (perceptual && A > 0) r.idp = idp_sum / A;
  return r;
}

// ------------------------------------------------------------------ mediation

nlohmann::json MediationReport::to_json() const {
  nlohmann::ordered_json j;
  j["node"] = node;
  j["value"] = value;
  j["n"] = n;
  auto l1 = [](const torch::Tensor& t) { return t.abs().mean().item<double>(); };
  j["mean_abs_direct"] = l1(direct);
  j["mean_abs_indirect"] = l1(indirect);
  j["mean_abs_total"] = l1(total);
  j["residual_l1"] = residual;
  std::vector<double> per(residual_per_sample.data_ptr<double>(),
                          residual_per_sample.data_ptr<double>() + residual_per_sample.numel());
  j["residual_l1_per_sample"] = per;
  return j;
}

MediationReport mediation_effects(const Scm& scm, const torch::Tensor& x, std::span<const ParentVector> pa,
                                  const std::string& node, double value, const CounterfactualFn& cf) {
  check_batch(x, pa.size());
  if (node == scm.image_node()) throw ArgumentError("mediation target must be a non-image node");
  scm.mechanism(node);
  Intervention iv;
  iv.assignments[node] = value;
  scm.validate(iv);

  std::vector<ParentVector> obs, de, ide, te;
  for (const auto& p : pa) {
    auto o = restrict_to(scm, p);
    auto full = counterfactual_parents(scm, o, iv);
    auto direct = o;
    direct[node] = value;
    auto indirect = full;
    indirect[node] = o.at(node);
    obs.push_back(o);
    de.push_back(direct);
    ide.push_back(indirect);
    te.push_back(full);
  }

  MediationReport r;
  r.node = node;
  r.value = value;
  r.n = x.size(0);
  r.composition = cf(x, obs, obs);
  r.direct = cf(x, obs, de) - r.composition;
  r.indirect = cf(x, obs, ide) - r.composition;
  r.total = cf(x, obs, te) - r.composition;
  r.residual_per_sample = (r.direct + r.indirect - r.total).to(torch::kDouble).abs().flatten(1).mean(1);
  r.residual = mean_of(r.residual_per_sample);
  return r;
}

MediationReport mediation_effects(const Scm& scm, const torch::Tensor& x, std::span<const ParentVector> pa,
                                  const std::string& node, double value, AbductionMode mode) {
  const ImageMechanism* mech = scm.image_mechanism();
  if (mech == nullptr || !mech->trained()) throw StateError("image mechanism is not trained");
  if (!mech->supports(mode)) throw ConfigError("image mechanism does not support " + to_string(mode) + " abduction");
  CounterfactualFn cf = [mech, mode](const torch::Tensor& xs, std::span<const ParentVector> p,
                                     std::span<const ParentVector> q) {
    return (mech->counterfactual(xs * 2.0 - 1.0, p, q, mode) + 1.0) / 2.0;
  };
  return mediation_effects(scm, x, pa, node, value, cf);
}

}  // namespace dscm::eval
