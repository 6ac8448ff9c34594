// Generates a small CLEVR-Hans3 set, trains the default reasoner for a few
// epochs and prints metrics plus one symbolic explanation.
//
//   demo_quickstart [epochs]

#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "nesyxil/trainer.hpp"

using namespace nesyxil;

int main(int argc, char** argv) {
  const std::size_t epochs = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 3;

  DatasetSpec spec = clevr_hans3_spec(Scale::kDesk, 0);
  spec.per_class_counts = {200, 60, 60};
  Dataset ds = generate_dataset(spec);
  std::cout << "scenes: " << ds.scenes.size() << "\n";

  TrainConfig cfg = default_train_config(TrainMode::kDefault, spec.name, spec.classes.size(), 0);
  cfg.epochs = epochs;
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " train_ce " << r.train_ce << " val_ce " << r.val_ce << " val_bacc "
              << r.val_balanced_accuracy << (r.best ? " *" : "") << "\n";
  };
  TrainResult res = train(ds, cfg, nullptr, &spec, hooks);

  SetTransformer model(cfg.model);
  Metrics test = evaluate(model, res.best.params, encode_split(ds, Split::kTest, cfg.encode_seed));
  std::cout << "test balanced accuracy " << test.balanced_accuracy << "\n";

  const SymbolicScene& scene = *ds.split(Split::kTest).front();
  SlotMatrix z = encode_for_model(scene, cfg.encode_seed);
  Explanation e = symbolic_explanation(model, res.best.params, z, scene.class_label, 50);
  std::cout << "explanation of " << scene.id << " (class " << scene.class_label << ")\n";
  std::cout << std::fixed << std::setprecision(2);
  for (std::size_t k = 0; k < z.slots(); ++k) {
    if (z.row_is_zero(k)) continue;
    std::cout << "  slot " << k << ":";
    for (std::size_t d = 0; d < z.width(); ++d) {
      if (e.values(k, d) >= 0.2) std::cout << " " << dim_name(d) << "=" << e.values(k, d);
    }
    std::cout << "\n";
  }
}
