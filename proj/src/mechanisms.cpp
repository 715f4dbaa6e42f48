#include "dscm/mechanisms.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <ATen/CPUGeneratorImpl.h>

#include "dscm/error.hpp"

namespace dscm::mech {

using diffusion::Direction;
using diffusion::EpsilonFn;
using diffusion::TimestepPlan;
using nets::Conditioning;

MechanismKind parse_mechanism_kind(const std::string& s) {
  if (s == "spatial") return MechanismKind::Spatial;
  if (s == "semantic") return MechanismKind::Semantic;
  throw ArgumentError("unknown mechanism '" + s + "' (expected spatial|semantic)");
}

std::string to_string(MechanismKind kind) { return kind == MechanismKind::Spatial ? "spatial" : "semantic"; }

// ------------------------------------------------------------------ condition layout

ConditionLayout::ConditionLayout(std::vector<ConditionField> fields) : fields_(std::move(fields)) {
  for (const auto& f : fields_) {
    if (f.kind == NodeKind::Categorical && f.categories < 1)
      throw ConfigError("categorical field '" + f.node + "' needs at least one category");
    if (f.kind == NodeKind::Continuous && !(f.std > 0.0))
      throw ConfigError("continuous field '" + f.node + "' needs a positive scale");
  }
}

ConditionLayout ConditionLayout::for_scm(const Scm& scm, std::span<const ParentVector> samples) {
  std::vector<ConditionField> fields;
  for (const auto& node : scm.image_parents()) {
    const auto& dom = scm.mechanism(node).domain;
    ConditionField f;
    f.node = node;
    f.kind = dom.kind;
    if (dom.kind == NodeKind::Categorical) {
      f.categories = dom.categories;
    } else if (!samples.empty()) {
      double sum = 0.0, sq = 0.0;
      for (const auto& pa : samples) sum += pa.at(node);
      f.mean = sum / static_cast<double>(samples.size());
      for (const auto& pa : samples) sq += (pa.at(node) - f.mean) * (pa.at(node) - f.mean);
      f.std = std::sqrt(sq / static_cast<double>(samples.size()));
      if (!(f.std > 0.0)) f.std = 1.0;
    }
    fields.push_back(f);
  }
  return ConditionLayout(std::move(fields));
}

int64_t ConditionLayout::width() const {
  int64_t w = 0;
  for (const auto& f : fields_) w += f.kind == NodeKind::Categorical ? f.categories : 1;
  return w;
}

torch::Tensor ConditionLayout::encode(std::span<const ParentVector> pa) const {
  const int64_t B = static_cast<int64_t>(pa.size());
  auto out = torch::zeros({B, width()});
  auto acc = out.accessor<float, 2>();
  for (int64_t b = 0; b < B; ++b) {
    int64_t col = 0;
    for (const auto& f : fields_) {
      double v = pa[static_cast<std::size_t>(b)].at(f.node);
      if (f.kind == NodeKind::Categorical) {
        if (v != std::floor(v) || v < 0 || v >= f.categories)
          throw DomainError(f.node, "categorical value out of range for the condition layout");
        acc[b][col + static_cast<int64_t>(v)] = 1.0f;
        col += f.categories;
      } else {
        acc[b][col++] = static_cast<float>((v - f.mean) / f.std);
      }
    }
  }
  return out;
}

nlohmann::json ConditionLayout::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : fields_) {
    if (f.kind == NodeKind::Categorical)
      arr.push_back({{"node", f.node}, {"kind", "categorical"}, {"categories", f.categories}});
    else
      arr.push_back({{"node", f.node}, {"kind", "continuous"}, {"mean", f.mean}, {"std", f.std}});
  }
  return arr;
}

ConditionLayout ConditionLayout::from_json(const nlohmann::json& j) {
  std::vector<ConditionField> fields;
  for (const auto& e : j) {
    ConditionField f;
    f.node = e.at("node");
    if (e.at("kind") == "categorical") {
      f.kind = NodeKind::Categorical;
      f.categories = e.at("categories");
    } else {
      f.mean = e.at("mean");
      f.std = e.at("std");
    }
    fields.push_back(f);
  }
  return ConditionLayout(std::move(fields));
}

// ------------------------------------------------------------------ config

nlohmann::json MechanismConfig::to_json() const {
  nlohmann::ordered_json j;
  j["mechanism"] = to_string(kind);
  j["scm"] = scm;
  j["schedule"] = diffusion::to_string(schedule);
  j["timesteps"] = timesteps;
  j["base_channels"] = base_channels;
  j["channel_mult"] = channel_mult;
  j["res_blocks"] = res_blocks;
  j["groups"] = groups;
  j["encoder_base_channels"] = encoder_base_channels;
  j["encoder_channel_mult"] = encoder_channel_mult;
  j["encoder_dropout"] = encoder_dropout;
  j["z_dim"] = z_dim;
  j["beta"] = beta;
  j["p_null"] = p_null;
  j["omega"] = omega;
  j["eta"] = eta;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["ema_decay"] = ema_decay;
  j["epochs"] = epochs;
  j["inference_steps"] = inference_steps;
  j["seed"] = seed;
  return j;
}

MechanismConfig MechanismConfig::from_json(const nlohmann::json& j) {
  MechanismConfig c;
  const auto known = c.to_json();
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("unknown mechanism config key '" + k + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  if (j.contains("mechanism")) c.kind = parse_mechanism_kind(j.at("mechanism"));
  if (j.contains("schedule")) c.schedule = diffusion::parse_schedule_kind(j.at("schedule"));
  get("scm", c.scm);
  get("timesteps", c.timesteps);
  get("base_channels", c.base_channels);
  get("channel_mult", c.channel_mult);
  get("res_blocks", c.res_blocks);
  get("groups", c.groups);
  get("encoder_base_channels", c.encoder_base_channels);
  get("encoder_channel_mult", c.encoder_channel_mult);
  get("encoder_dropout", c.encoder_dropout);
  get("z_dim", c.z_dim);
  get("beta", c.beta);
  get("p_null", c.p_null);
  get("omega", c.omega);
  get("eta", c.eta);
  get("learning_rate", c.learning_rate);
  get("batch_size", c.batch_size);
  get("ema_decay", c.ema_decay);
  get("epochs", c.epochs);
  get("inference_steps", c.inference_steps);
  get("seed", c.seed);
  if (c.z_dim < 1) throw ConfigError("z_dim must be positive");
  if (c.p_null < 0.0 || c.p_null > 1.0) throw ConfigError("p_null must lie in [0, 1]");
  if (c.omega < 0.0) throw ConfigError("omega must be non-negative");
  if (c.inference_steps < 1 || c.inference_steps > c.timesteps)
    throw ConfigError("inference_steps must lie in [1, timesteps]");
  if (c.ema_decay < 0.0 || c.ema_decay >= 1.0) throw ConfigError("ema_decay must lie in [0, 1)");
  return c;
}

std::string MechanismConfig::hash() const {
  // FNV-1a over the canonical JSON text; stable across platforms.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void GuidanceConfig::validate() const {
  if (!(omega >= 0.0)) throw ArgumentError("guidance scale omega must be >= 0");
  if (!(p_null >= 0.0 && p_null <= 1.0)) throw ArgumentError("token dropout probability must lie in [0, 1]");
}

// ------------------------------------------------------------------ guidance

torch::Tensor combine_guidance(const torch::Tensor& eps_c, const torch::Tensor& eps_null, double omega) {
  return eps_null + omega * (eps_c - eps_null);
}

torch::Tensor cfg_estimate(const ConditionalEpsFn& eps, const torch::Tensor& x_t, const torch::Tensor& cond,
                           const torch::Tensor& token, int64_t t, double omega) {
  if (omega == 1.0) return eps(x_t, t, Conditioning::on(cond));
  auto eps_null = eps(x_t, t, Conditioning::null(x_t.size(0), token));
  if (omega == 0.0) return eps_null;
  return combine_guidance(eps(x_t, t, Conditioning::on(cond)), eps_null, omega);
}

torch::Tensor kl_divergence(const torch::Tensor& mean, const torch::Tensor& logvar) {
  return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(1);
}

// ------------------------------------------------------------------ mechanism

namespace {

nets::UNetOptions unet_options(const MechanismConfig& c, int64_t cond_dim, int64_t channels) {
  nets::UNetOptions o;
  o.in_channels = channels;
  o.base_channels = c.base_channels;
  o.channel_mult = c.channel_mult;
  o.res_blocks = c.res_blocks;
  o.cond_dim = cond_dim;
  o.groups = c.groups;
  return o;
}

nets::EncoderOptions encoder_options(const MechanismConfig& c, int64_t channels) {
  nets::EncoderOptions o;
  o.in_channels = channels;
  o.base_channels = c.encoder_base_channels;
  o.channel_mult = c.encoder_channel_mult;
  o.z_dim = c.z_dim;
  o.groups = c.groups;
  o.dropout = c.encoder_dropout;
  return o;
}

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
  m.eval();
}

}  // namespace

Mechanism::Mechanism(MechanismConfig config, ConditionLayout layout, int64_t image_channels)
    : config_(std::move(config)),
      layout_(std::move(layout)),
      image_channels_(image_channels),
      schedule_(diffusion::make_schedule(config_.schedule, config_.timesteps)) {
  if (layout_.width() < 1) throw ConfigError("condition layout is empty");
  torch::manual_seed(config_.seed);
  unet_ = nets::UNet(unet_options(config_, cond_dim(), image_channels_));
  ema_unet_ = nets::UNet(unet_options(config_, cond_dim(), image_channels_));
  nets::copy_parameters(*ema_unet_, *unet_);
  freeze(*ema_unet_);
  if (semantic()) {
    encoder_ = nets::SemanticEncoder(encoder_options(config_, image_channels_));
    ema_encoder_ = nets::SemanticEncoder(encoder_options(config_, image_channels_));
    nets::copy_parameters(*ema_encoder_, *encoder_);
    freeze(*ema_encoder_);
  }
}

int64_t Mechanism::cond_dim() const { return layout_.width() + (semantic() ? config_.z_dim : 0); }

std::vector<torch::Tensor> Mechanism::trainable_parameters() {
  auto params = unet_->parameters();
  if (semantic())
    for (auto& p : encoder_->parameters()) params.push_back(p);
  return params;
}

void Mechanism::update_ema() {
  // Warm-up keeps early averages from being dominated by the initial weights.
  const double n = static_cast<double>(step_);
  const double decay = std::min(config_.ema_decay, (1.0 + n) / (10.0 + n));
  nets::ema_update(*ema_unet_, *unet_, decay);
  if (semantic()) nets::ema_update(*ema_encoder_, *encoder_, decay);
}

ConditionalEpsFn Mechanism::estimator() const {
  if (override_) return override_;
  nets::UNet net = ema_unet_;
  return [net](const torch::Tensor& x, int64_t t, const Conditioning& c) mutable {
    return net->forward(x, torch::full({x.size(0)}, t, torch::kLong), c);
  };
}

TimestepPlan Mechanism::default_plan() const { return TimestepPlan::strided(config_.timesteps, config_.inference_steps); }

nlohmann::json Mechanism::metadata() const {
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["mechanism"] = to_string(config_.kind);
  j["schedule"] = diffusion::to_string(config_.schedule);
  j["timesteps"] = config_.timesteps;
  j["condition_layout"] = layout_.to_json();
  j["z_dim"] = semantic() ? config_.z_dim : 0;
  j["ema_decay"] = config_.ema_decay;
  j["image_channels"] = image_channels_;
  j["config_hash"] = config_.hash();
  j["config"] = config_.to_json();
  j["trained"] = trained_;
  j["step"] = step_;
  j["epoch"] = epoch_;
  return j;
}

void Mechanism::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  torch::save(unet_, (dir / "unet.pt").string());
  torch::save(ema_unet_, (dir / "ema_unet.pt").string());
  if (semantic()) {
    torch::save(encoder_, (dir / "encoder.pt").string());
    torch::save(ema_encoder_, (dir / "ema_encoder.pt").string());
  }
  std::ofstream out(dir / "metadata.json");
  if (!out) throw IoError("cannot write checkpoint metadata under " + dir.string());
  out << metadata().dump(2) << '\n';
}

std::shared_ptr<Mechanism> Mechanism::load(const std::filesystem::path& dir, const MechanismConfig* replace) {
  std::ifstream in(dir / "metadata.json");
  if (!in) throw IoError("no checkpoint metadata at " + (dir / "metadata.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint metadata: " + std::string(e.what()));
  }
  if (meta.value("version", 0) != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version in " + dir.string());
  auto config = MechanismConfig::from_json(meta.at("config"));
  if (config.hash() != meta.at("config_hash").get<std::string>())
    throw ConfigError("checkpoint config hash does not match its config");
  if (replace) config = *replace;
  auto mech = std::make_shared<Mechanism>(config, ConditionLayout::from_json(meta.at("condition_layout")),
                                          meta.at("image_channels").get<int64_t>());
  try {
    torch::load(mech->unet_, (dir / "unet.pt").string());
    torch::load(mech->ema_unet_, (dir / "ema_unet.pt").string());
    if (mech->semantic()) {
      torch::load(mech->encoder_, (dir / "encoder.pt").string());
      torch::load(mech->ema_encoder_, (dir / "ema_encoder.pt").string());
    }
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint weights in " + dir.string() + ": " + e.what_without_backtrace());
  }
  freeze(*mech->ema_unet_);
  if (mech->semantic()) freeze(*mech->ema_encoder_);
  mech->trained_ = meta.value("trained", false);
  mech->step_ = meta.value("step", int64_t{0});
  mech->epoch_ = meta.value("epoch", int64_t{0});
  return mech;
}

torch::Tensor normalise(const torch::Tensor& bytes) { return bytes.to(torch::kFloat) / 127.5 - 1.0; }

torch::Tensor to_unit(const torch::Tensor& x) { return ((x + 1.0) / 2.0).clamp(0.0, 1.0); }

// ------------------------------------------------------------------ traversal helpers

namespace {

void check_batch(const Mechanism& mech, const torch::Tensor& x, std::size_t n) {
  if (x.dim() != 4 || x.size(1) != mech.image_channels())
    throw ArgumentError("expected an image batch [B, " + std::to_string(mech.image_channels()) + ", H, W]");
  if (static_cast<std::size_t>(x.size(0)) != n) throw ArgumentError("image batch and parent list sizes differ");
}

/// Generation from u under condition `cond`, guided with scale omega. When
/// tokens are given, tokens[k] replaces the learned token at plan.steps[k].
torch::Tensor generate(const Mechanism& mech, const torch::Tensor& u, const torch::Tensor& cond, double omega,
                       const TimestepPlan& plan, const std::vector<torch::Tensor>* tokens) {
  auto eps = mech.estimator();
  std::map<int64_t, std::size_t> index;
  for (std::size_t k = 0; k < plan.size(); ++k) index[plan.steps[k]] = k;
  EpsilonFn f = [&](const torch::Tensor& x, int64_t t) {
    torch::Tensor token;
    if (tokens != nullptr) token = (*tokens)[index.at(t)];
    return cfg_estimate(eps, x, cond, token, t, omega);
  };
  return diffusion::ddim_traverse(u, plan, Direction::Generate, f, mech.schedule()).image;
}

diffusion::Traversal invert(const Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond,
                            const TimestepPlan& plan, bool retain) {
  auto eps = mech.estimator();
  EpsilonFn f = [&](const torch::Tensor& xt, int64_t t) { return eps(xt, t, Conditioning::on(cond)); };
  return diffusion::ddim_traverse(x, plan, Direction::Invert, f, mech.schedule(), retain);
}

double guidance_scale(const std::optional<GuidanceConfig>& g) {
  if (!g) return 1.0;
  g->validate();
  return g->omega;
}

}  // namespace

// ------------------------------------------------------------------ spatial

Abduction spatial_abduct(const Mechanism& mech, const torch::Tensor& x, std::span<const ParentVector> pa,
                         const TimestepPlan& plan, bool retain_trajectory) {
  check_batch(mech, x, pa.size());
  torch::NoGradGuard ng;
  auto cond = mech.layout().encode(pa);
  auto tr = invert(mech, x, cond, plan, retain_trajectory);
  Abduction abd;
  abd.u = tr.image;
  abd.trajectory = std::move(tr.trajectory);
  abd.provenance = {AbductionMode::Spatial, plan, 0};
  return abd;
}

torch::Tensor spatial_predict(const Mechanism& mech, const Abduction& abd, std::span<const ParentVector> cf_pa,
                              const TimestepPlan& plan, const std::optional<GuidanceConfig>& guidance) {
  if (!abd.u.defined()) throw StateError("abduction has no spatial noise u");
  check_batch(mech, abd.u, cf_pa.size());
  torch::NoGradGuard ng;
  const double omega = guidance_scale(guidance);
  auto cond = mech.layout().encode(cf_pa);
  return generate(mech, abd.u, cond, omega, plan, nullptr).clamp(-1.0, 1.0);
}

// ------------------------------------------------------------------ semantic

torch::Tensor semantic_encode(const Mechanism& mech, const torch::Tensor& x, EncodeMode mode, at::Generator* gen) {
  if (!mech.semantic()) throw ConfigError("spatial mechanisms have no semantic encoder");
  torch::NoGradGuard ng;
  auto post = mech.ema_encoder()->forward(x);
  if (mode == EncodeMode::Deterministic) return post.mean;
  if (gen == nullptr) throw ArgumentError("sample mode needs a random generator");
  auto noise = torch::randn(post.mean.sizes(), *gen, post.mean.options());
  return post.mean + (0.5 * post.logvar).exp() * noise;
}

std::vector<Abduction> semantic_abduct(const Mechanism& mech, const torch::Tensor& x, std::span<const ParentVector> pa,
                                       const TimestepPlan& plan, EncodeMode mode, int M, at::Generator* gen,
                                       bool retain_trajectory) {
  if (M < 1) throw ArgumentError("particle count M must be >= 1");
  if (mode == EncodeMode::Deterministic && M != 1) throw ArgumentError("deterministic abduction uses M = 1");
  check_batch(mech, x, pa.size());
  torch::NoGradGuard ng;
  auto pa_cond = mech.layout().encode(pa);
  std::vector<Abduction> out;
  for (int m = 0; m < M; ++m) {
    Abduction abd;
    abd.z = semantic_encode(mech, x, mode, gen);
    auto tr = invert(mech, x, torch::cat({abd.z, pa_cond}, 1), plan, retain_trajectory);
    abd.u = tr.image;
    abd.trajectory = std::move(tr.trajectory);
    abd.provenance = {AbductionMode::Semantic, plan, gen != nullptr ? gen->current_seed() : 0};
    out.push_back(std::move(abd));
  }
  return out;
}

torch::Tensor semantic_predict(const Mechanism& mech, std::span<const Abduction> abductions,
                               std::span<const ParentVector> cf_pa, const TimestepPlan& plan,
                               const std::optional<GuidanceConfig>& guidance, int M) {
  if (M < 0) M = static_cast<int>(abductions.size());
  if (M < 1 || static_cast<std::size_t>(M) != abductions.size())
    throw ArgumentError("number of abductions does not match M");
  torch::NoGradGuard ng;
  const double omega = guidance_scale(guidance);
  auto pa_cond = mech.layout().encode(cf_pa);
  std::vector<torch::Tensor> outs;
  for (const auto& abd : abductions) {
    if (!abd.u.defined() || !abd.z.defined()) throw StateError("semantic abduction needs both u and z");
    check_batch(mech, abd.u, cf_pa.size());
    if (!abd.tokens.empty() && abd.tokens.size() != plan.size())
      throw ArgumentError("token count does not match the inference plan");
    auto cond = torch::cat({abd.z, pa_cond}, 1);
    outs.push_back(generate(mech, abd.u, cond, omega, plan, abd.tokens.empty() ? nullptr : &abd.tokens));
  }
  auto x = outs.size() == 1 ? outs.front() : torch::stack(outs).mean(0);
  return x.clamp(-1.0, 1.0);
}

// ------------------------------------------------------------------ dynamic abduction

TokenStep cta_token_step(const ConditionalEpsFn& eps, const diffusion::NoiseSchedule& schedule,
                         const torch::Tensor& x_t, const torch::Tensor& target, const torch::Tensor& cond,
                         const torch::Tensor& token, int64_t t, int64_t t_prev, double omega) {
  torch::AutoGradMode grad_mode(true);
  auto tok = token.detach().clone().set_requires_grad(true);
  EpsilonFn f = [&](const torch::Tensor& x, int64_t tt) { return cfg_estimate(eps, x, cond, tok, tt, omega); };
  auto x_prev = diffusion::ddim_step(x_t.detach(), t, t_prev, f, schedule);
  auto loss = (target.detach() - x_prev).pow(2).flatten(1).sum(1);
  torch::Tensor grad;
  if (loss.requires_grad()) {
    grad = torch::autograd::grad({loss.sum()}, {tok}, {}, false, false, true)[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(tok);
  return {x_prev.detach(), loss.detach(), grad.detach()};
}

std::vector<torch::Tensor> cta_optimize(const ConditionalEpsFn& eps, const diffusion::NoiseSchedule& schedule,
                                        const std::vector<torch::Tensor>& trajectory, const torch::Tensor& cond,
                                        const torch::Tensor& initial_token, double omega, double eta,
                                        const TimestepPlan& plan) {
  const std::size_t S = plan.size();
  if (trajectory.size() != S + 1) throw StateError("CTA needs the retained inversion trajectory of the plan");
  if (eta < 0.0) throw ArgumentError("CTA step size must be >= 0");
  const int64_t B = trajectory.front().size(0);
  torch::Tensor token =
      initial_token.dim() == 1 ? initial_token.unsqueeze(0).expand({B, initial_token.size(0)}).clone()
                               : initial_token.clone();
  token = token.detach();
  std::vector<torch::Tensor> tokens(S);
  torch::Tensor x = trajectory[S];
  for (std::size_t k = S; k-- > 0;) {
    auto step = cta_token_step(eps, schedule, x, trajectory[k], cond, token, plan.steps[k], plan.previous(k), omega);
    if (eta != 0.0) token = (token - eta * step.grad).detach();
    tokens[k] = token;
    x = step.x_prev;
  }
  return tokens;
}

std::vector<torch::Tensor> cta_optimize(const Mechanism& mech, const Abduction& abd, std::span<const ParentVector> pa,
                                        double omega, double eta, const TimestepPlan& plan) {
  if (!mech.semantic()) throw ConfigError("dynamic abduction needs a semantic mechanism");
  if (!abd.z.defined()) throw StateError("dynamic abduction needs a semantic abduction");
  auto cond = torch::cat({abd.z, mech.layout().encode(pa)}, 1);
  return cta_optimize(mech.estimator(), mech.schedule(), abd.trajectory, cond,
                      mech.ema_unet()->null_token().detach(), omega, eta, plan);
}

torch::Tensor dynamic_counterfactual(const Mechanism& mech, const torch::Tensor& x, std::span<const ParentVector> pa,
                                     std::span<const ParentVector> cf_pa, double omega, double eta,
                                     const TimestepPlan& plan) {
  auto abds = semantic_abduct(mech, x, pa, plan, EncodeMode::Deterministic, 1, nullptr, true);
  auto& abd = abds.front();
  abd.tokens = cta_optimize(mech, abd, pa, omega, eta, plan);
  abd.provenance.mode = AbductionMode::Dynamic;
  abd.trajectory.clear();
  return semantic_predict(mech, abds, cf_pa, plan, GuidanceConfig{omega, 0.0});
}

// ------------------------------------------------------------------ training

torch::Tensor dropout_mask(int64_t batch, double p_null, at::Generator& gen) {
  if (!(p_null >= 0.0 && p_null <= 1.0)) throw ArgumentError("token dropout probability must lie in [0, 1]");
  return torch::rand({batch}, gen, torch::TensorOptions().dtype(torch::kDouble)) < p_null;
}

StepResult spatial_objective(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond, double p_null,
                             at::Generator& gen, torch::Tensor* total) {
  const int64_t B = x.size(0);
  auto mask = dropout_mask(B, p_null, gen);
  auto net = mech.unet();
  diffusion::BatchEpsilonFn f = [&](const torch::Tensor& xt, const torch::Tensor& t) {
    return net->forward(xt, t, Conditioning{cond, mask, {}});
  };
  auto loss = diffusion::denoising_loss(x, f, mech.schedule(), gen);
  StepResult r;
  r.denoise = r.loss = loss.item<double>();
  r.dropped = mask.sum().item<int64_t>();
  r.batch = B;
  if (total != nullptr) *total = loss;
  return r;
}

StepResult semantic_objective(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond, double p_null,
                              at::Generator& gen, torch::Tensor* total) {
  if (!mech.semantic()) throw ConfigError("semantic objective needs a semantic mechanism");
  const int64_t B = x.size(0);
  auto post = mech.encoder()->forward(x);
  auto z = post.mean + (0.5 * post.logvar).exp() * torch::randn(post.mean.sizes(), gen, post.mean.options());
  auto c_sem = torch::cat({z, cond}, 1);
  auto mask = dropout_mask(B, p_null, gen);
  auto net = mech.unet();
  diffusion::BatchEpsilonFn f = [&](const torch::Tensor& xt, const torch::Tensor& t) {
    return net->forward(xt, t, Conditioning{c_sem, mask, {}});
  };
  auto denoise = diffusion::denoising_loss(x, f, mech.schedule(), gen);
  auto kl = kl_divergence(post.mean, post.logvar).mean();
  auto loss = denoise + mech.config().beta * kl;
  StepResult r;
  r.loss = loss.item<double>();
  r.denoise = denoise.item<double>();
  r.kl = kl.item<double>();
  r.dropped = mask.sum().item<int64_t>();
  r.batch = B;
  if (total != nullptr) *total = loss;
  return r;
}

namespace {

StepResult apply_step(Mechanism& mech, torch::optim::Optimizer& opt, const torch::Tensor& loss, StepResult r) {
  opt.zero_grad();
  loss.backward();
  opt.step();
  mech.set_progress(mech.step() + 1, mech.epoch());
  mech.update_ema();
  return r;
}

}  // namespace

StepResult train_spatial_step(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond,
                              const GuidanceConfig& guidance, torch::optim::Optimizer& opt, at::Generator& gen) {
  guidance.validate();
  mech.unet()->train();
  torch::Tensor loss;
  auto r = spatial_objective(mech, x, cond, guidance.p_null, gen, &loss);
  return apply_step(mech, opt, loss, r);
}

StepResult train_semantic_step(Mechanism& mech, const torch::Tensor& x, const torch::Tensor& cond,
                               const GuidanceConfig& guidance, torch::optim::Optimizer& opt, at::Generator& gen) {
  guidance.validate();
  mech.unet()->train();
  mech.encoder()->train();
  torch::Tensor loss;
  auto r = semantic_objective(mech, x, cond, guidance.p_null, gen, &loss);
  return apply_step(mech, opt, loss, r);
}

std::unique_ptr<torch::optim::Adam> make_optimizer(Mechanism& mech) {
  return std::make_unique<torch::optim::Adam>(mech.trainable_parameters(),
                                              torch::optim::AdamOptions(mech.config().learning_rate));
}

// ------------------------------------------------------------------ SCM adapter

DiffusionImageMechanism::DiffusionImageMechanism(std::shared_ptr<const Mechanism> mech, InferenceOptions options)
    : mech_(std::move(mech)), options_(std::move(options)) {
  if (!mech_) throw ArgumentError("image mechanism handle is empty");
  if (options_.plan.steps.empty()) options_.plan = mech_->default_plan();
  options_.plan.validate(mech_->schedule());
  if (options_.particles < 1) throw ArgumentError("particle count must be >= 1");
}

bool DiffusionImageMechanism::supports(AbductionMode mode) const {
  return mode == AbductionMode::Spatial ? !mech_->semantic() : mech_->semantic();
}

torch::Tensor DiffusionImageMechanism::counterfactual(const torch::Tensor& x, std::span<const ParentVector> pa,
                                                      std::span<const ParentVector> cf_pa,
                                                      AbductionMode mode) const {
  if (!supports(mode)) throw ConfigError(to_string(mech_->kind()) + " mechanism cannot run " +
                                         dscm::to_string(mode) + " abduction");
  const auto& plan = options_.plan;
  GuidanceConfig g{options_.omega, 0.0};
  switch (mode) {
    case AbductionMode::Spatial:
      return spatial_predict(*mech_, spatial_abduct(*mech_, x, pa, plan), cf_pa, plan, g);
    case AbductionMode::Semantic: {
      if (options_.particles == 1)
        return semantic_predict(*mech_, semantic_abduct(*mech_, x, pa, plan, EncodeMode::Deterministic), cf_pa,
                                plan, g);
      auto gen = at::make_generator<at::CPUGeneratorImpl>(options_.seed);
      auto abds = semantic_abduct(*mech_, x, pa, plan, EncodeMode::Sample, options_.particles, &gen);
      return semantic_predict(*mech_, abds, cf_pa, plan, g);
    }
    case AbductionMode::Dynamic:
      return dynamic_counterfactual(*mech_, x, pa, cf_pa, options_.omega, options_.eta, plan);
  }
  return {};
}

}  // namespace dscm::mech
