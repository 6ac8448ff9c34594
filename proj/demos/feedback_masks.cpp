// Compiles the class-rule feedback and the global "not gray" rule for the
// first CLEVR-Hans3 training scene of each class and prints the masks.

#include <iostream>

#include "nesyxil/xil.hpp"

using namespace nesyxil;

namespace {

void print_mask(const char* title, const SlotMatrix& m) {
  std::cout << "  " << title << ":";
  bool any = false;
  for (std::size_t k = 0; k < m.slots(); ++k) {
    for (std::size_t d = 0; d < m.width(); ++d) {
      if (m(k, d) != 0.0) {
        std::cout << " [" << k << "]" << dim_name(d);
        any = true;
      }
    }
  }
  std::cout << (any ? "" : " (empty)") << "\n";
}

}  // namespace

int main() {
  DatasetSpec spec = clevr_hans3_spec(Scale::kDesk, 0);
  spec.per_class_counts = {5, 1, 1};
  Dataset ds = generate_dataset(spec);

  FeedbackSet fs = class_rule_feedback(spec);
  const FeedbackSet gray = not_gray_feedback();
  for (const auto& r : gray.rules()) fs.add(r);
  std::cout << fs.serialize();

  for (int c = 0; c < 3; ++c) {
    for (const auto* s : ds.split(Split::kTrain)) {
      if (s->class_label != c) continue;
      SlotMatrix zb = binarize(encode_for_model(*s, 0));
      CompiledMasks m = compile_feedback(fs, s->id, s->class_label, zb);
      std::cout << s->id << "\n";
      print_mask("relevant", m.pos);
      print_mask("irrelevant", m.neg);
      break;
    }
  }
}
