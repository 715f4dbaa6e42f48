#include <fstream>
#include <iomanip>
#include <sstream>

#include "cli.hpp"
#include "dscm/data.hpp"
#include "dscm/error.hpp"
#include "dscm/eval.hpp"
#include "dscm/mechanisms.hpp"

namespace dscm::cli {

namespace {

struct Session {
  std::shared_ptr<mech::Mechanism> mechanism;
  Scm scm;
  AbductionMode mode = AbductionMode::Spatial;
  mech::InferenceOptions options;
  std::shared_ptr<mech::DiffusionImageMechanism> image;
  data::TensorSplit samples;
  std::vector<ParentVector> pa;
};

Scm load_scm(const mech::Mechanism& m) { return Scm::preset(m.config().scm); }

Session open_session(const InferOptions& o, const Intervention* iv = nullptr) {
  auto m = mech::Mechanism::load(o.checkpoint);
  Scm scm = load_scm(*m);
  if (iv) {
    try {
      scm.validate(*iv);
    } catch (const DomainError& e) {
      throw ArgumentError(e.what());
    }
  }
  if (!m->trained()) throw StateError("checkpoint at " + o.checkpoint.string() + " is not trained");

  Session s{m, scm};
  s.mode = o.mode.empty() ? (m->semantic() ? AbductionMode::Semantic : AbductionMode::Spatial)
                          : parse_abduction_mode(o.mode);
  s.options.omega = o.omega >= 0 ? o.omega : m->config().omega;
  s.options.eta = o.eta >= 0 ? o.eta : m->config().eta;
  s.options.plan = diffusion::TimestepPlan::strided(m->config().timesteps,
                                                     o.steps > 0 ? o.steps : m->config().inference_steps);
  s.options.particles = o.particles;
  s.options.seed = o.seed;
  s.image = std::make_shared<mech::DiffusionImageMechanism>(m, s.options);
  if (!s.image->supports(s.mode))
    throw ConfigError(mech::to_string(m->kind()) + " mechanism cannot run " + to_string(s.mode) + " abduction");
  s.scm.set_image_mechanism(s.image);

  auto all = data::load_tensors(o.data, o.split, o.offset + o.count);
  if (all.size() <= o.offset) throw ArgumentError("--offset is beyond the end of the " + o.split + " split");
  const int64_t n = all.size() - o.offset;
  s.samples.variant = all.variant;
  s.samples.images = all.images.narrow(0, o.offset, n);
  s.samples.labels = all.labels.narrow(0, o.offset, n);
  for (int64_t k = 0; k < n; ++k) {
    s.samples.parents.push_back(all.parents[static_cast<std::size_t>(o.offset + k)]);
    s.pa.push_back(restrict_to(s.scm, s.samples.parents.back()));
  }
  if (s.samples.images.size(1) != m->image_channels())
    throw ConfigError("dataset channels do not match the checkpoint");
  return s;
}

nlohmann::json inference_settings(const InferOptions& o, const Session& s, const fs::path& out) {
  return {{"checkpoint", o.checkpoint.string()},
          {"checkpoint_hash", s.mechanism->config().hash()},
          {"data", o.data.string()},
          {"split", o.split},
          {"out", out.string()},
          {"mechanism", mech::to_string(s.mechanism->kind())},
          {"mode", to_string(s.mode)},
          {"omega", s.options.omega},
          {"eta", s.options.eta},
          {"p_null", s.mechanism->config().p_null},
          {"timesteps", s.mechanism->config().timesteps},
          {"steps", s.options.plan.size()},
          {"particles", s.options.particles},
          {"count", s.samples.size()},
          {"offset", o.offset},
          {"seed", o.seed}};
}

nlohmann::json to_json(const ParentVector& pa) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : pa.values) j[k] = v;
  return j;
}

eval::CounterfactualFn unit_counterfactual(const Session& s) {
  auto image = s.image;
  auto mode = s.mode;
  return [image, mode](const torch::Tensor& x, std::span<const ParentVector> pa, std::span<const ParentVector> cf_pa) {
    return mech::to_unit(image->counterfactual(x * 2.0 - 1.0, pa, cf_pa, mode));
  };
}

std::string sample_name(int64_t index) {
  std::ostringstream s;
  s << std::setw(5) << std::setfill('0') << index;
  return s.str();
}

}  // namespace

int cmd_counterfactual(const InferOptions& o) {
  const auto iv = Intervention::parse(o.intervention);
  auto s = open_session(o, &iv);
  const auto out = output_dir(o.out);
  fs::create_directories(out / "samples");
  auto settings = inference_settings(o, s, out);
  settings["do"] = o.intervention;
  write_run_config(out, "counterfactual", settings);

  const int64_t N = s.samples.size();
  std::vector<ParentVector> cf_pa;
  for (const auto& p : s.pa) cf_pa.push_back(counterfactual_parents(s.scm, p, iv));
  auto cf = unit_counterfactual(s);
  auto x = s.samples.images.to(torch::kFloat) / 255.0;

  std::vector<torch::Tensor> comp, cfx, rev;
  for (int64_t start = 0; start < N; start += o.batch_size) {
    const int64_t n = std::min(o.batch_size, N - start);
    auto xb = x.narrow(0, start, n);
    std::span<const ParentVector> pb(s.pa.data() + start, n), qb(cf_pa.data() + start, n);
    comp.push_back(cf(xb, pb, pb));
    cfx.push_back(cf(xb, pb, qb));
    rev.push_back(cf(cfx.back(), qb, pb));
    log("processed " + std::to_string(start + n) + "/" + std::to_string(N));
  }
  auto comp_all = torch::cat(comp), cf_all = torch::cat(cfx), rev_all = torch::cat(rev);

  std::ofstream records(out / "records.jsonl");
  if (!records) throw IoError("cannot write " + (out / "records.jsonl").string());
  const std::vector<std::pair<std::string, torch::Tensor>> columns{
      {"obs", x}, {"comp", comp_all}, {"cf", cf_all}, {"rev", rev_all}};
  for (int64_t k = 0; k < N; ++k) {
    const int64_t index = o.offset + k;
    nlohmann::ordered_json rec;
    rec["index"] = index;
    rec["pa"] = to_json(s.pa[static_cast<std::size_t>(k)]);
    rec["cf_pa"] = to_json(cf_pa[static_cast<std::size_t>(k)]);
    rec["mode"] = to_string(s.mode);
    rec["omega"] = s.options.omega;
    rec["seed"] = o.seed;
    nlohmann::ordered_json paths;
    for (const auto& [name, images] : columns) {
      auto path = out / "samples" / (sample_name(index) + "_" + name + ".png");
      data::write_png(path, images[k]);
      paths[name] = fs::relative(path, out).string();
    }
    rec["paths"] = paths;
    records << rec.dump() << '\n';
  }
  data::write_png(out / "grid.png", data::image_grid({x, comp_all, cf_all, rev_all}));
  log("wrote " + std::to_string(N) + " counterfactuals to " + out.string());
  return 0;
}

int cmd_evaluate(const InferOptions& o, const std::vector<std::string>& attributes) {
  auto s = open_session(o);
  const auto out = output_dir(o.out);
  std::shared_ptr<const eval::Classifier> classifier;
  if (!o.classifier.empty()) classifier = eval::Classifier::load(o.classifier);
  auto predictor = eval::morpho_predictor(classifier);

  eval::SoundnessSettings settings;
  settings.attributes = attributes.empty() ? s.scm.image_parents() : attributes;
  settings.seed = o.seed;
  settings.batch_size = o.batch_size;
  for (const auto& a : settings.attributes) {
    if (std::find(s.scm.order().begin(), s.scm.order().end(), a) == s.scm.order().end())
      throw ArgumentError("attribute '" + a + "' is not a node of the '" + s.mechanism->config().scm + "' SCM");
    predictor.at(a);
  }
  std::optional<eval::PerceptualFn> perceptual;
  if (classifier) perceptual = eval::classifier_feature_distance(classifier);

  auto run = inference_settings(o, s, out);
  run["classifier"] = o.classifier.string();
  run["attributes"] = settings.attributes;
  write_run_config(out, "evaluate", run);

  auto x = s.samples.images.to(torch::kFloat) / 255.0;
  auto report = eval::evaluate_soundness(s.scm, unit_counterfactual(s), x, s.pa, predictor,
                                         perceptual ? &*perceptual : nullptr, settings);
  report.checkpoint_hash = s.mechanism->config().hash();
  report.mechanism = mech::to_string(s.mechanism->kind());
  report.mode = to_string(s.mode);
  report.omega = s.options.omega;
  report.steps = static_cast<int64_t>(s.options.plan.size());

  write_json(out / "report.json", report.to_json());
  std::ofstream csv(out / "report.csv");
  if (!csv) throw IoError("cannot write " + (out / "report.csv").string());
  csv << report.csv();
  std::ostringstream msg;
  msg << "composition " << report.composition << " reversibility " << report.reversibility;
  for (const auto& [a, sc] : report.effectiveness) msg << " " << a << ":" << eval::to_string(sc.kind) << " " << sc.value;
  log(msg.str());
  return 0;
}

int cmd_mediate(const MediateOptions& o) {
  Intervention iv;
  iv.assignments[o.node] = o.value;
  auto s = open_session(o.infer, &iv);
  const auto out = output_dir(o.infer.out);
  auto settings = inference_settings(o.infer, s, out);
  settings["node"] = o.node;
  settings["value"] = o.value;
  write_run_config(out, "mediate", settings);

  auto x = s.samples.images.to(torch::kFloat) / 255.0;
  auto report = eval::mediation_effects(s.scm, x, s.pa, o.node, o.value, unit_counterfactual(s));
  write_json(out / "mediation.json", report.to_json());
  auto shown = [](const torch::Tensor& effect) { return (effect + 1.0) / 2.0; };
  data::write_png(out / "effects.png", data::image_grid({x, report.composition, shown(report.direct),
                                                         shown(report.indirect), shown(report.total)}));
  std::ostringstream msg;
  msg << "residual |DE + IDE - TE| = " << report.residual << " over " << report.n << " samples";
  log(msg.str());
  return 0;
}

}  // namespace dscm::cli
