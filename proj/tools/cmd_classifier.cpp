#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "dscm/error.hpp"
#include "dscm/eval.hpp"

namespace dscm::cli {

int cmd_train_classifier(const ClassifierOptions& o) {
  eval::ClassifierConfig config;
  config.epochs = o.epochs;
  config.batch_size = o.batch_size;
  config.learning_rate = o.learning_rate;
  config.seed = o.seed;
  config.shuffle_labels = o.shuffle_labels;

  const auto out = output_dir(o.out);
  auto train = data::load_tensors(o.data, "train", o.limit);
  auto test = data::load_tensors(o.data, "test");
  write_run_config(out, "train-classifier",
                   {{"data", o.data.string()}, {"out", out.string()}, {"limit", o.limit}, {"classifier", config.to_json()}});

  std::ofstream csv(out / "epochs.csv");
  if (!csv) throw IoError("cannot write " + (out / "epochs.csv").string());
  csv << "epoch,loss\n";
  auto model = eval::train_digit_classifier(train, test, config, [&](int64_t epoch, double loss) {
    csv << epoch << ',' << loss << '\n';
    if (epoch % 10 == 0 || epoch == config.epochs) {
      std::ostringstream msg;
      msg << "epoch " << epoch << " loss " << loss;
      log(msg.str());
    }
  });
  model->save(out);
  std::ostringstream msg;
  msg << "test accuracy " << model->test_accuracy() << "%";
  log(msg.str());
  return 0;
}

}  // namespace dscm::cli
