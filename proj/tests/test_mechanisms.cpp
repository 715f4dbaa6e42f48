#include "dscm/error.hpp"
#include "dscm/mechanisms.hpp"

#include "doctest_torch.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"

using namespace dscm;
using namespace dscm::mech;
namespace fs = std::filesystem;

namespace {

MechanismConfig tiny(MechanismKind kind) {
  MechanismConfig c;
  c.kind = kind;
  c.timesteps = 20;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.encoder_base_channels = 8;
  c.encoder_channel_mult = {1, 2};
  c.encoder_dropout = 0.0;
  c.z_dim = 4;
  c.inference_steps = 5;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

ConditionLayout digit_layout() { return ConditionLayout::for_scm(Scm::preset("morpho-digit"), {}); }

std::vector<ParentVector> digits(std::initializer_list<int> ds) {
  std::vector<ParentVector> out;
  for (int d : ds) {
    ParentVector p;
    p["d"] = d;
    out.push_back(p);
  }
  return out;
}

torch::Tensor images(int64_t B, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({B, 1, 8, 8}, gen) * 2 - 1;
}

/// Smooth estimator over a 2-dim embedding: the condition is projected, the
/// token is used as is.
ConditionalEpsFn toy_estimator() {
  auto P = torch::tensor({{0.4, -0.3}, {0.1, 0.7}, {-0.5, 0.2}}, torch::kDouble);
  return [P](const torch::Tensor& x, int64_t t, const nets::Conditioning& c) {
    const int64_t B = x.size(0);
    torch::Tensor emb;
    torch::Tensor null_emb;
    if (c.token.defined()) null_emb = c.token.dim() == 1 ? c.token.unsqueeze(0).expand({B, 2}) : c.token;
    else null_emb = torch::zeros({B, 2}, torch::kDouble);
    if (!c.values.defined()) emb = null_emb;
    else emb = c.values.matmul(P);
    auto a = (0.3 + 0.5 * torch::tanh(emb.select(1, 0))).view({B, 1, 1, 1});
    auto b = (0.2 * torch::sin(emb.select(1, 1))).view({B, 1, 1, 1});
    return a * x + b * (1.0 + 0.05 * static_cast<double>(t)) + 0.1 * x.pow(2);
  };
}

/// Fresh networks ignore their embedding (zero-initialised residual convs and
/// head); randomise those in the EMA copy so conditions and guidance matter.
void perturb(Mechanism& m) {
  torch::NoGradGuard ng;
  for (auto& p : m.ema_unet()->named_parameters()) {
    const auto& k = p.key();
    if (k == "conv_out.weight" || k.ends_with("conv2.weight")) p.value().normal_(0.0, 0.05);
  }
  m.ema_unet()->named_parameters()["null_token"].normal_(0.0, 0.5);
}

}  // namespace

TEST_CASE("guidance arithmetic") {
  auto out = combine_guidance(torch::tensor({1.0, 0.0}), torch::tensor({0.0, 0.0}), 2.0);
  CHECK(out.equal(torch::tensor({2.0, 0.0})));

  Mechanism m(tiny(MechanismKind::Spatial), digit_layout());
  auto eps = m.estimator();
  auto x = images(3, 1);
  auto cond = m.layout().encode(digits({1, 4, 7}));
  auto e_c = eps(x, 7, nets::Conditioning::on(cond));
  auto e_0 = eps(x, 7, nets::Conditioning::null(3));
  CHECK(cfg_estimate(eps, x, cond, {}, 7, 1.0).equal(e_c));
  CHECK(cfg_estimate(eps, x, cond, {}, 7, 0.0).equal(e_0));
  CHECK(oracle::max_abs(cfg_estimate(eps, x, cond, {}, 7, 2.5), e_0 + 2.5 * (e_c - e_0)) < 1e-6);
  CHECK_THROWS_AS((GuidanceConfig{-1.0, 0.0}.validate()), ArgumentError);
  CHECK_THROWS_AS((GuidanceConfig{1.0, 1.5}.validate()), ArgumentError);
}

TEST_CASE("closed-form KL") {
  auto zero = torch::zeros({1, 8});
  CHECK(kl_divergence(zero, zero).item<double>() == 0.0);
  CHECK(kl_divergence(torch::ones({1, 8}), zero).item<double>() == doctest::Approx(4.0));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  auto mu = torch::randn({64, 8}, gen, torch::kDouble);
  auto logvar = torch::randn({64, 8}, gen, torch::kDouble);
  CHECK(kl_divergence(mu, logvar).min().item<double>() >= 0.0);

  std::vector<double> m{0.5, -1.0, 0.2}, s{0.8, 1.3, 0.5};
  auto mt = torch::tensor(m, torch::kDouble).unsqueeze(0);
  auto lv = (2.0 * torch::tensor(s, torch::kDouble).log()).unsqueeze(0);
  double closed = kl_divergence(mt, lv).item<double>();
  double mc = oracle::kl_monte_carlo(m, s, 200000, 17);
  CHECK(std::abs(mc - closed) <= 0.02 * closed);
}

TEST_CASE("token dropout statistics") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  const int64_t N = 10000;
  CHECK(dropout_mask(N, 0.0, gen).sum().item<int64_t>() == 0);
  CHECK(dropout_mask(N, 1.0, gen).sum().item<int64_t>() == N);
  double rate = dropout_mask(N, 0.1, gen).to(torch::kDouble).mean().item<double>();
  CHECK(std::abs(rate - 0.1) <= 0.01);
  CHECK(std::abs(rate - 0.1) <= 3.0 * std::sqrt(0.1 * 0.9 / N));
  CHECK_THROWS_AS(dropout_mask(4, 1.5, gen), ArgumentError);
}

TEST_CASE("full dropout trains the unconditional model") {
  Mechanism m(tiny(MechanismKind::Spatial), digit_layout());
  auto x = images(4, 5);
  auto cond = m.layout().encode(digits({0, 1, 2, 3}));

  auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
  torch::Tensor loss;
  spatial_objective(m, x, cond, 1.0, gen, &loss);
  loss.backward();
  std::map<std::string, torch::Tensor> dropped;
  for (auto& p : m.unet()->named_parameters()) {
    dropped[p.key()] = p.value().grad().defined() ? p.value().grad().clone() : torch::zeros_like(p.value());
    p.value().mutable_grad() = torch::Tensor();
  }

  auto gen2 = at::make_generator<at::CPUGeneratorImpl>(11);
  dropout_mask(4, 1.0, gen2);
  auto net = m.unet();
  diffusion::BatchEpsilonFn f = [&](const torch::Tensor& xt, const torch::Tensor& t) {
    return net->forward(xt, t, nets::Conditioning::null(4));
  };
  diffusion::denoising_loss(x, f, m.schedule(), gen2).backward();
  for (auto& p : m.unet()->named_parameters()) {
    CAPTURE(p.key());
    auto g = p.value().grad().defined() ? p.value().grad() : torch::zeros_like(p.value());
    CHECK(g.equal(dropped[p.key()]));
  }
}

TEST_CASE("spatial abduction with the point-mass denoiser") {
  Mechanism m(tiny(MechanismKind::Spatial), digit_layout());
  auto x_star = images(2, 6).to(torch::kDouble) * 0.9;
  auto pm = oracle::point_mass(x_star, m.schedule());
  m.override_estimator([pm](const torch::Tensor& x, int64_t t, const nets::Conditioning&) { return pm(x, t); });
  auto pa = digits({3, 8});

  auto plan = m.default_plan();
  auto abd = spatial_abduct(m, x_star, pa, plan);
  CHECK(oracle::max_abs(abd.u, std::sqrt(m.schedule().alpha(20)) * x_star) < 1e-6);
  CHECK(oracle::max_abs(spatial_predict(m, abd, pa, plan), x_star) < 1e-5);

  diffusion::TimestepPlan from_one{{4, 8, 12, 16, 20}, 1};
  auto x = images(2, 7).to(torch::kDouble) * 0.5;
  auto abd1 = spatial_abduct(m, x, pa, from_one);
  auto ref = oracle::point_mass_inversion(x, x_star, m.schedule().alpha(1), m.schedule().alpha(20));
  CHECK(oracle::max_abs(abd1.u, ref) < 1e-6);
  CHECK(oracle::max_abs(spatial_predict(m, abd1, pa, from_one), x) < 1e-5);
}

TEST_CASE("spatial mechanism determinism and guidance collapse") {
  Mechanism m(tiny(MechanismKind::Spatial), digit_layout());
  perturb(m);
  auto x = images(2, 8);
  auto pa = digits({1, 2}), cf = digits({5, 6});
  auto plan = m.default_plan();
  auto a = spatial_abduct(m, x, pa, plan);
  auto b = spatial_abduct(m, x, pa, plan);
  CHECK(a.u.equal(b.u));
  CHECK(a.u.sizes() == x.sizes());
  auto plain = spatial_predict(m, a, cf, plan);
  CHECK(spatial_predict(m, a, cf, plan, GuidanceConfig{1.0, 0.1}).equal(plain));
  CHECK_FALSE(spatial_predict(m, a, cf, plan, GuidanceConfig{3.0, 0.1}).equal(plain));
  CHECK(plain.max().item<float>() <= 1.0f);
  CHECK(plain.min().item<float>() >= -1.0f);

  Abduction empty;
  CHECK_THROWS_AS(spatial_predict(m, empty, cf, plan), StateError);
  CHECK_THROWS_AS(spatial_abduct(m, x, digits({1}), plan), ArgumentError);
  CHECK_THROWS_AS(spatial_abduct(m, x, digits({1, 12}), plan), DomainError);
  CHECK_THROWS_AS(semantic_encode(m, x, EncodeMode::Deterministic), ConfigError);
}

TEST_CASE("semantic encoder modes") {
  Mechanism m(tiny(MechanismKind::Semantic), digit_layout());
  auto x = images(1, 9);
  auto z1 = semantic_encode(m, x, EncodeMode::Deterministic);
  CHECK(z1.sizes() == std::vector<int64_t>{1, 4});
  CHECK(z1.equal(semantic_encode(m, x, EncodeMode::Deterministic)));

  auto post = m.ema_encoder()->forward(x);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto draws = semantic_encode(m, x.expand({10000, 1, 8, 8}), EncodeMode::Sample, &gen);
  auto sigma = (0.5 * post.logvar).exp();
  auto err = (draws.mean(0, true) - post.mean).abs();
  CHECK((err <= 3.0 * sigma / 100.0).all().item<bool>());
  CHECK_THROWS_AS(semantic_encode(m, x, EncodeMode::Sample), ArgumentError);

  {
    torch::NoGradGuard ng;
    auto params = m.ema_encoder()->named_parameters();
    params["head.weight"].narrow(0, 4, 4).zero_();
    params["head.bias"].narrow(0, 4, 4).fill_(-std::numeric_limits<float>::infinity());
  }
  CHECK(semantic_encode(m, x, EncodeMode::Sample, &gen).equal(semantic_encode(m, x, EncodeMode::Deterministic)));
}

TEST_CASE("semantic abduction and prediction") {
  Mechanism m(tiny(MechanismKind::Semantic), digit_layout());
  perturb(m);
  auto x = images(2, 10);
  auto pa = digits({4, 9}), cf = digits({0, 0});
  auto plan = m.default_plan();

  auto det = semantic_abduct(m, x, pa, plan, EncodeMode::Deterministic);
  REQUIRE(det.size() == 1);
  CHECK(det[0].z.equal(semantic_encode(m, x, EncodeMode::Deterministic)));
  CHECK_THROWS_AS(semantic_abduct(m, x, pa, plan, EncodeMode::Deterministic, 2), ArgumentError);
  CHECK_THROWS_AS(semantic_abduct(m, x, pa, plan, EncodeMode::Sample, 0), ArgumentError);

  auto gen = at::make_generator<at::CPUGeneratorImpl>(12);
  auto particles = semantic_abduct(m, x, pa, plan, EncodeMode::Sample, 4, &gen);
  REQUIRE(particles.size() == 4);
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) CHECK_FALSE(particles[i].z.equal(particles[j].z));

  auto single = semantic_predict(m, det, cf, plan);
  std::vector<Abduction> twice{det[0], det[0]};
  CHECK(oracle::max_abs(semantic_predict(m, twice, cf, plan), single) < 1e-6);
  CHECK_THROWS_AS(semantic_predict(m, twice, cf, plan, std::nullopt, 3), ArgumentError);
  CHECK(semantic_predict(m, det, cf, plan, GuidanceConfig{1.0, 0.0}).equal(single));
  auto mean4 = semantic_predict(m, particles, cf, plan);
  CHECK(mean4.sizes() == x.sizes());
}

TEST_CASE("dynamic abduction degenerate cases") {
  Mechanism m(tiny(MechanismKind::Semantic), digit_layout());
  perturb(m);
  auto x = images(2, 13);
  auto pa = digits({2, 7}), cf = digits({3, 3});
  auto plan = m.default_plan();

  auto abds = semantic_abduct(m, x, pa, plan, EncodeMode::Deterministic, 1, nullptr, true);
  REQUIRE(abds[0].trajectory.size() == plan.size() + 1);
  auto initial = m.ema_unet()->null_token();

  auto frozen = cta_optimize(m, abds[0], pa, 2.0, 0.0, plan);
  REQUIRE(frozen.size() == plan.size());
  for (const auto& tok : frozen) CHECK(tok.equal(initial.unsqueeze(0).expand({2, initial.size(0)})));

  auto unguided = cta_optimize(m, abds[0], pa, 1.0, 1e-2, plan);
  for (const auto& tok : unguided) CHECK(tok.equal(frozen.front()));

  auto moved = cta_optimize(m, abds[0], pa, 2.0, 1e-2, plan);
  CHECK_FALSE(moved.front().equal(frozen.front()));

  auto guided = semantic_predict(m, semantic_abduct(m, x, pa, plan, EncodeMode::Deterministic), cf, plan,
                                 GuidanceConfig{2.0, 0.0});
  CHECK(dynamic_counterfactual(m, x, pa, cf, 2.0, 0.0, plan).equal(guided));
  auto unguided_sem = semantic_predict(m, semantic_abduct(m, x, pa, plan, EncodeMode::Deterministic), cf, plan);
  CHECK(dynamic_counterfactual(m, x, pa, cf, 1.0, 1e-2, plan).equal(unguided_sem));
  CHECK(dynamic_counterfactual(m, x, pa, cf, 2.0, 1e-3, plan).equal(dynamic_counterfactual(m, x, pa, cf, 2.0, 1e-3, plan)));

  Abduction no_traj = abds[0];
  no_traj.trajectory.clear();
  CHECK_THROWS_AS(cta_optimize(m, no_traj, pa, 2.0, 1e-3, plan), StateError);

  Mechanism spatial(tiny(MechanismKind::Spatial), digit_layout());
  CHECK_THROWS_AS(dynamic_counterfactual(spatial, x, pa, cf, 2.0, 1e-3, plan), ConfigError);
}

TEST_CASE("token gradient matches central differences") {
  auto eps = toy_estimator();
  auto schedule = diffusion::make_schedule(diffusion::ScheduleKind::Linear, 20);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(21);
  auto x_t = torch::randn({1, 1, 4, 4}, gen, torch::kDouble);
  auto target = torch::randn({1, 1, 4, 4}, gen, torch::kDouble);
  auto cond = torch::tensor({{0.5, -1.0, 2.0}}, torch::kDouble);
  std::vector<double> token{0.3, -0.6};

  auto step = cta_token_step(eps, schedule, x_t, target, cond, torch::tensor(token, torch::kDouble), 12, 8, 2.5);
  auto f = [&](const std::vector<double>& v) {
    return cta_token_step(eps, schedule, x_t, target, cond, torch::tensor(v, torch::kDouble), 12, 8, 2.5)
        .loss.sum()
        .item<double>();
  };
  for (std::size_t i = 0; i < 2; ++i) {
    double fd = oracle::central_difference(f, token, i, 1e-6);
    double g = step.grad[static_cast<int64_t>(i)].item<double>();
    CAPTURE(i);
    CHECK(std::abs(g - fd) <= 1e-4 * std::abs(fd));
  }
}

TEST_CASE("training steps") {
  for (auto kind : {MechanismKind::Spatial, MechanismKind::Semantic}) {
    Mechanism m(tiny(kind), digit_layout());
    auto opt = make_optimizer(m);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
    auto x = images(4, 14);
    auto cond = m.layout().encode(digits({0, 1, 2, 3}));
    auto before = m.ema_unet()->named_parameters()["conv_in.weight"].clone();
    StepResult r;
    for (int k = 0; k < 3; ++k)
      r = kind == MechanismKind::Spatial ? train_spatial_step(m, x, cond, {1.0, 0.5}, *opt, gen)
                                         : train_semantic_step(m, x, cond, {1.0, 0.5}, *opt, gen);
    CHECK(m.step() == 3);
    CHECK(std::isfinite(r.loss));
    CHECK(r.batch == 4);
    CHECK(r.kl >= 0.0);
    if (kind == MechanismKind::Semantic) CHECK(r.loss == doctest::Approx(r.denoise + 1e-2 * r.kl));
    CHECK_FALSE(m.ema_unet()->named_parameters()["conv_in.weight"].equal(before));
  }
}

TEST_CASE("checkpoint round trip") {
  auto dir = fs::temp_directory_path() / "dscm_test_ckpt";
  fs::remove_all(dir);
  Mechanism m(tiny(MechanismKind::Semantic), digit_layout());
  auto opt = make_optimizer(m);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
  train_semantic_step(m, images(4, 15), m.layout().encode(digits({0, 1, 2, 3})), {1.0, 0.1}, *opt, gen);
  m.mark_trained();
  m.save(dir);

  auto loaded = Mechanism::load(dir);
  CHECK(loaded->trained());
  CHECK(loaded->step() == 1);
  CHECK(loaded->metadata()["z_dim"] == 4);
  auto x = images(2, 16);
  auto pa = digits({1, 2}), cf = digits({3, 4});
  auto plan = m.default_plan();
  auto a = semantic_predict(m, semantic_abduct(m, x, pa, plan, EncodeMode::Deterministic), cf, plan);
  auto b = semantic_predict(*loaded, semantic_abduct(*loaded, x, pa, plan, EncodeMode::Deterministic), cf, plan);
  CHECK(a.equal(b));

  auto meta = nlohmann::json::parse(std::ifstream(dir / "metadata.json"));
  meta["config"]["z_dim"] = 6;
  std::ofstream(dir / "metadata.json") << meta.dump();
  CHECK_THROWS_AS(Mechanism::load(dir), ConfigError);
  CHECK_THROWS_AS(Mechanism::load(dir / "absent"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("config parsing") {
  auto c = MechanismConfig::from_json({{"mechanism", "semantic"}, {"z_dim", 8}, {"epochs", 2}});
  CHECK(c.kind == MechanismKind::Semantic);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.batch_size == 128);
  CHECK(c.ema_decay == 0.9999);
  CHECK(MechanismConfig::from_json(c.to_json()).hash() == c.hash());
  CHECK_THROWS_AS(MechanismConfig::from_json({{"zdim", 8}}), ConfigError);
  CHECK_THROWS_AS(MechanismConfig::from_json({{"p_null", 2.0}}), ConfigError);

  auto layout = ConditionLayout::for_scm(Scm::preset("morpho"), std::vector<ParentVector>{});
  CHECK(layout.width() == 13);
}

TEST_CASE("image mechanism adapter") {
  auto m = std::make_shared<Mechanism>(tiny(MechanismKind::Semantic), digit_layout());
  m->mark_trained();
  DiffusionImageMechanism adapter(m, {{}, 1.0, 0.0, 1, 0});
  CHECK(adapter.supports(AbductionMode::Semantic));
  CHECK(adapter.supports(AbductionMode::Dynamic));
  CHECK_FALSE(adapter.supports(AbductionMode::Spatial));
  auto scm = Scm::preset("morpho-digit");
  scm.set_image_mechanism(std::make_shared<DiffusionImageMechanism>(adapter));
  auto x = images(2, 17);
  auto pa = digits({5, 6});
  auto out = counterfactual_image(scm, x, pa, Intervention{{{"d", 1}}}, AbductionMode::Semantic);
  auto plan = m->default_plan();
  auto ref = semantic_predict(*m, semantic_abduct(*m, x, pa, plan, EncodeMode::Deterministic), digits({1, 1}), plan,
                              GuidanceConfig{1.0, 0.0});
  CHECK(out.equal(ref));
}
