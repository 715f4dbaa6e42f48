#include "cli.hpp"
#include "dscm/morpho.hpp"

namespace dscm::cli {

int cmd_generate_data(const GenerateOptions& o) {
  morpho::GeneratorConfig config;
  config.variant = morpho::parse_variant(o.variant);
  config.source = o.source;
  config.train = o.train;
  config.val = o.val;
  config.test = o.test;
  config.seed = o.seed;
  const auto out = output_dir(o.out);
  log("generating " + o.variant + " dataset from " + o.source.string() + " into " + out.string());
  morpho::generate_dataset(config, out);
  write_run_config(out, "generate-data",
                   {{"source", o.source.string()},
                    {"out", out.string()},
                    {"variant", morpho::to_string(config.variant)},
                    {"seed", o.seed},
                    {"train", o.train},
                    {"val", o.val},
                    {"test", o.test}});
  log("done");
  return 0;
}

}  // namespace dscm::cli
