#include <ATen/CPUGeneratorImpl.h>

#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "dscm/data.hpp"
#include "dscm/error.hpp"
#include "dscm/mechanisms.hpp"

namespace dscm::cli {

namespace {

using mech::Mechanism;
using mech::MechanismConfig;

MechanismConfig resolve_config(const TrainOptions& o) {
  nlohmann::json j = o.config.empty() ? nlohmann::json::object() : read_json(o.config);
  for (const auto& [k, v] : o.overrides.items()) j[k] = v;
  try {
    return MechanismConfig::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid mechanism config: ") + e.what());
  }
}

void check_variant(const MechanismConfig& c, morpho::Variant v) {
  const bool colour = c.scm == "cmorpho";
  if (colour != (v == morpho::Variant::Colour))
    throw ConfigError("scm '" + c.scm + "' does not match the " + morpho::to_string(v) + " dataset");
}

void save_checkpoint(const fs::path& dir, const Mechanism& m, torch::optim::Optimizer& opt, at::Generator& gen) {
  m.save(dir);
  torch::save(opt, (dir / "optimizer.pt").string());
  std::vector<torch::Tensor> rng{gen.get_state(), at::detail::getDefaultCPUGenerator().get_state()};
  torch::save(rng, (dir / "rng.pt").string());
}

void restore_rng(const fs::path& dir, at::Generator& gen) {
  std::vector<torch::Tensor> rng;
  torch::load(rng, (dir / "rng.pt").string());
  if (rng.size() != 2) throw IoError("malformed rng.pt in " + dir.string());
  gen.set_state(rng[0]);
  auto global = at::detail::getDefaultCPUGenerator();
  global.set_state(rng[1]);
}

}  // namespace

int cmd_train(const TrainOptions& o) {
  auto config = resolve_config(o);
  const auto scm = Scm::preset(config.scm);
  const auto out = output_dir(o.out);
  const auto ckpt = out / "checkpoint";
  if (o.checkpoint_every < 1) throw ArgumentError("--checkpoint-every must be at least 1");

  auto train = data::load_tensors(o.data, "train", o.limit);
  check_variant(config, train.variant);
  const int64_t N = train.size();
  if (N == 0) throw StateError("training split is empty");

  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);
  std::shared_ptr<Mechanism> m;
  std::unique_ptr<torch::optim::Adam> opt;
  const bool existing = fs::exists(ckpt / "metadata.json");
  if (existing && !o.resume)
    throw StateError("checkpoint already exists at " + ckpt.string() + " (pass --resume to continue it)");
  if (existing) {
    auto stored = read_json(ckpt / "metadata.json").at("config");
    auto requested = config.to_json();
    stored.erase("epochs");
    requested.erase("epochs");
    auto diff = json_diff(stored, requested);
    if (!diff.empty()) {
      std::ostringstream msg;
      msg << "refusing to resume: config differs from checkpoint";
      for (const auto& d : diff) msg << "\n  " << d;
      throw ConfigError(msg.str());
    }
    m = Mechanism::load(ckpt, &config);
    opt = mech::make_optimizer(*m);
    torch::load(*opt, (ckpt / "optimizer.pt").string());
    restore_rng(ckpt, gen);
    log("resuming at epoch " + std::to_string(m->epoch()) + ", step " + std::to_string(m->step()));
  } else {
    auto layout = mech::ConditionLayout::for_scm(scm, train.parents);
    m = std::make_shared<Mechanism>(config, layout, train.images.size(1));
    opt = mech::make_optimizer(*m);
  }

  write_run_config(out, "train",
                   {{"data", o.data.string()},
                    {"out", out.string()},
                    {"checkpoint", ckpt.string()},
                    {"limit", o.limit},
                    {"checkpoint_every", o.checkpoint_every},
                    {"resume", o.resume},
                    {"mechanism", config.to_json()}});

  const auto cond_all = m->layout().encode(train.parents);
  const bool fresh_logs = !existing;
  std::ofstream loss_csv(out / "loss.csv", fresh_logs ? std::ios::trunc : std::ios::app);
  std::ofstream epoch_csv(out / "epochs.csv", fresh_logs ? std::ios::trunc : std::ios::app);
  if (!loss_csv || !epoch_csv) throw IoError("cannot write training logs under " + out.string());
  if (fresh_logs) {
    loss_csv << "epoch,step,loss,denoise,kl,dropped,batch\n";
    epoch_csv << "epoch,step,loss,denoise,kl,dropout_rate\n";
  }
  loss_csv.precision(8);
  epoch_csv.precision(8);

  const mech::GuidanceConfig guidance{config.omega, config.p_null};
  const int64_t B = config.batch_size;
  for (int64_t epoch = m->epoch(); epoch < config.epochs; ++epoch) {
    auto perm = torch::randperm(N, gen);
    double sum_loss = 0, sum_denoise = 0, sum_kl = 0;
    int64_t dropped = 0, seen = 0, batches = 0;
    for (int64_t start = 0; start < N; start += B) {
      auto idx = perm.narrow(0, start, std::min(B, N - start));
      auto x = mech::normalise(train.images.index_select(0, idx));
      auto c = cond_all.index_select(0, idx);
      auto r = m->semantic() ? mech::train_semantic_step(*m, x, c, guidance, *opt, gen)
                             : mech::train_spatial_step(*m, x, c, guidance, *opt, gen);
      loss_csv << epoch + 1 << ',' << m->step() << ',' << r.loss << ',' << r.denoise << ',' << r.kl << ','
               << r.dropped << ',' << r.batch << '\n';
      sum_loss += r.loss;
      sum_denoise += r.denoise;
      sum_kl += r.kl;
      dropped += r.dropped;
      seen += r.batch;
      ++batches;
      if (o.log_every > 0 && m->step() % o.log_every == 0) {
        std::ostringstream msg;
        msg << "epoch " << epoch + 1 << " step " << m->step() << " loss " << r.loss;
        log(msg.str());
      }
    }
    m->set_progress(m->step(), epoch + 1);
    m->mark_trained();
    epoch_csv << epoch + 1 << ',' << m->step() << ',' << sum_loss / batches << ',' << sum_denoise / batches << ','
              << sum_kl / batches << ',' << static_cast<double>(dropped) / static_cast<double>(seen) << '\n';
    loss_csv.flush();
    epoch_csv.flush();
    if ((epoch + 1) % o.checkpoint_every == 0 || epoch + 1 == config.epochs) {
      save_checkpoint(ckpt, *m, *opt, gen);
      log("checkpoint written at epoch " + std::to_string(epoch + 1));
    }
  }
  write_json(out / "config.json", config.to_json());
  return 0;
}

}  // namespace dscm::cli
