// nesyxil command-line tool: dataset generation, training, explanations,
// evaluation, the experiment suite and the HTTP service.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "nesyxil/http.hpp"

using namespace nesyxil;

namespace {

Scale parse_scale(const std::string& s) {
  if (s == "desk") return Scale::kDesk;
  if (s == "full") return Scale::kFull;
  throw FormatError("unknown scale '" + s + "'");
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("bad seed list '" + s + "'");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw FormatError("empty seed list");
  return out;
}

const ModelParams& pick_checkpoint(const StoredRun& run, const std::string& which, ModelParams& init) {
  if (which == "best") return run.result.best.params;
  if (which == "last") return run.result.last.params;
  if (which == "init") {
    init = init_params(run.cfg.model, run.cfg.seed);
    return init;
  }
  throw FormatError("unknown checkpoint '" + which + "'");
}

// --- gen -------------------------------------------------------------------

struct GenArgs {
  std::string spec, scale = "desk", out;
  std::uint64_t seed = 0;
  bool verify = false;
};

int cmd_gen(const GenArgs& a) {
  DatasetSpec spec = spec_by_name(a.spec, parse_scale(a.scale), a.seed);
  const fs::path out = a.out.empty() ? fs::path(a.spec + "-" + a.scale + "-s" + std::to_string(a.seed)) : fs::path(a.out);
  Dataset ds = generate_dataset(spec);
  write_dataset(out, spec, ds);
  std::cout << "wrote " << ds.scenes.size() << " scenes to " << out.string() << " (train "
            << ds.split(Split::kTrain).size() << ", val " << ds.split(Split::kVal).size() << ", test "
            << ds.split(Split::kTest).size() << ")\n";
  if (a.verify) {
    VerificationReport rep = verify_dataset(ds, spec);
    std::cout << "exclusivity violations " << rep.exclusivity_violations << ", own-rule violations "
              << rep.own_rule_violations << ", balanced " << (rep.balanced ? "yes" : "no") << "\n";
    for (const auto& h : rep.test_histograms) {
      std::cout << "class " << h.cls << " test confound p=" << h.chi_square_p << "\n";
    }
    if (rep.exclusivity_violations || rep.own_rule_violations) return 1;
  }
  return 0;
}

// --- feedback ----------------------------------------------------------------

struct FeedbackArgs {
  std::string out, preset, data;
  std::vector<std::string> add;
};

int cmd_feedback(const FeedbackArgs& a) {
  FeedbackSet fs = read_feedback_file(a.out).value_or(FeedbackSet{});
  std::shared_ptr<const StoredDataset> ds;
  if (!a.data.empty()) ds = load_stored_dataset(a.data);
  if (a.preset == "not_gray") {
    auto rules = not_gray_feedback().rules();
    for (auto& r : rules) fs.add(r);
  } else if (a.preset == "class_rules") {
    if (!ds) throw FormatError("--preset class_rules needs --data");
    auto rules = class_rule_feedback(ds->spec).rules();
    for (auto& r : rules) fs.add(r);
  } else if (!a.preset.empty()) {
    throw FormatError("unknown preset '" + a.preset + "'");
  }
  for (const auto& text : a.add) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidFeedback(std::string("not valid JSON: ") + e.what());
    }
    fs.add(rule_from_json(j));
  }
  if (ds) fs.validate_references(ds->data(), ds->spec.classes.size());
  write_text_atomic(a.out, fs.serialize());
  std::cout << a.out << ": " << fs.rules().size() << " rules\n";
  return 0;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data, mode = "default", feedback, out, mask_source = "feedback";
  std::string mse_reduction, rrr_reduction;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs, batch_size, ig_steps, expl_samples, val_expl_samples;
  std::optional<double> lr, lambda_mse, lambda_rrr;
  std::size_t l1_steps = kMetricIgSteps;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  auto ds = load_stored_dataset(a.data);
  const TrainMode mode = parse_mode(a.mode);
  TrainConfig cfg = default_train_config(mode, ds->loaded.spec_name, ds->spec.classes.size(), a.seed);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lr) cfg.lr_init = *a.lr;
  if (a.lambda_mse) cfg.lambda_mse = *a.lambda_mse;
  if (a.lambda_rrr) cfg.lambda_rrr = *a.lambda_rrr;
  if (a.ig_steps) cfg.ig_steps_train = *a.ig_steps;
  if (a.expl_samples) cfg.expl_samples = *a.expl_samples;
  if (a.val_expl_samples) cfg.val_expl_samples = *a.val_expl_samples;
  if (!a.mse_reduction.empty()) cfg.mse_reduction = parse_reduction(a.mse_reduction);
  if (!a.rrr_reduction.empty()) cfg.rrr_reduction = parse_reduction(a.rrr_reduction);
  if (a.mask_source == "ground_truth") cfg.mask_source = MaskSource::kGroundTruth;
  else if (a.mask_source != "feedback") throw FormatError("unknown mask source '" + a.mask_source + "'");
  cfg.validate();

  std::optional<FeedbackSet> fb;
  if (!a.feedback.empty()) {
    fb = read_feedback_file(a.feedback);
    if (!fb) throw NotFound("no feedback file at " + a.feedback);
    fb->validate_references(ds->data(), ds->spec.classes.size());
  }
  const fs::path out = a.out.empty() ? fs::path("runs") / (a.mode + "-s" + std::to_string(a.seed)) : fs::path(a.out);
  RunProgress prog;
  if (!a.quiet) {
    prog.on_epoch = [](const EpochRecord& r) {
      std::cout << "epoch " << r.epoch << " lr " << r.lr << " train " << r.train_loss << " val " << r.val_loss
                << " val_bacc " << r.val_balanced_accuracy << (r.best ? " *" : "") << std::endl;
    };
  }
  RunMetrics m = execute_run(out, *ds, cfg, fb ? &*fb : nullptr, a.l1_steps, prog);
  std::cout << "run " << out.string() << ": val " << m.val.balanced_accuracy << " test " << m.test.balanced_accuracy
            << " l1 " << m.l1.all.global << "\n";
  return 0;
}

// --- explain -----------------------------------------------------------------

struct ExplainArgs {
  std::string run, sample, checkpoint = "best";
  std::size_t steps = kMetricIgSteps;
  double t = 0.5;
  std::optional<std::size_t> target;
};

int cmd_explain(const ExplainArgs& a) {
  StoredRun run = load_stored_run(a.run);
  auto ds = load_stored_dataset(run.dataset_dir);
  const SymbolicScene* scene = ds->data().find(a.sample);
  if (!scene) throw NotFound("unknown sample '" + a.sample + "'");
  ModelParams init;
  const ModelParams& params = pick_checkpoint(run, a.checkpoint, init);
  SetTransformer model(run.cfg.model);
  SlotMatrix z = encode_for_model(*scene, run.cfg.encode_seed);
  std::vector<std::size_t> pred = predict(model, params, stack_slots(std::span(&z, 1)));
  const std::size_t target = a.target.value_or(pred[0]);
  if (target >= run.cfg.model.n_classes) throw FormatError("target class out of range");
  Explanation e = symbolic_explanation(model, params, z, target, a.steps);

  std::cout << "sample " << scene->id << " class " << scene->class_label << " predicted " << pred[0]
            << " explained " << target << " (" << a.steps << " steps)\n";
  std::cout << std::setw(6) << "slot";
  for (std::size_t d = 0; d < z.width(); ++d) std::cout << " " << std::setw(14) << dim_name(d);
  std::cout << "\n" << std::fixed << std::setprecision(4);
  for (std::size_t k = 0; k < z.slots(); ++k) {
    std::cout << std::setw(6) << k;
    for (std::size_t d = 0; d < z.width(); ++d) std::cout << " " << std::setw(14) << e.values(k, d);
    std::cout << (z.row_is_zero(k) ? "  (empty)" : "") << "\n";
  }
  std::cout << "relevant slots (t=" << std::setprecision(2) << a.t << "):";
  for (std::size_t k : relevant_slots(e, a.t)) std::cout << " " << k;
  std::cout << "\n";
  return 0;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string run, split = "test", checkpoint = "best";
};

int cmd_eval(const EvalArgs& a) {
  StoredRun run = load_stored_run(a.run);
  auto ds = load_stored_dataset(run.dataset_dir);
  const Split split = parse_split(a.split);
  ModelParams init;
  const ModelParams& params = pick_checkpoint(run, a.checkpoint, init);
  SetTransformer model(run.cfg.model);
  Metrics m = evaluate(model, params, encode_split(ds->data(), split, run.cfg.encode_seed));
  std::cout << m.to_json().dump(2) << "\n";
  return 0;
}

// --- suite -------------------------------------------------------------------

struct SuiteArgs {
  std::string spec = "ch3", seeds = "0,1,2,3,4", scale = "desk", out, format = "text";
  std::uint64_t data_seed = 0;
  std::optional<std::size_t> epochs;
  std::size_t ig_steps = kTrainIgSteps, expl_samples = 0, val_expl_samples = 0, l1_steps = kMetricIgSteps;
  bool quiet = false;
};

int cmd_suite(const SuiteArgs& a) {
  SuiteOptions opt;
  opt.scale = parse_scale(a.scale);
  opt.data_seed = a.data_seed;
  opt.epochs = a.epochs;
  opt.ig_steps_train = a.ig_steps;
  opt.expl_samples = a.expl_samples;
  opt.val_expl_samples = a.val_expl_samples;
  opt.l1_steps = a.l1_steps;
  if (!a.out.empty()) opt.out_dir = fs::path(a.out) / "runs";
  if (!a.quiet) opt.log = [](const std::string& s) { std::cerr << s << std::endl; };
  if (a.format != "text" && a.format != "json") throw FormatError("unknown format '" + a.format + "'");
  SuiteReport rep = run_experiment_suite(a.spec, parse_seeds(a.seeds), opt);
  if (!a.out.empty()) {
    write_text_atomic(fs::path(a.out) / "report.json", rep.to_json().dump(2) + "\n");
    write_text_atomic(fs::path(a.out) / "report.txt", rep.to_text());
  }
  std::cout << (a.format == "json" ? rep.to_json().dump(2) + "\n" : rep.to_text());
  return 0;
}

// --- serve -------------------------------------------------------------------

struct ServeArgs {
  std::string workspace = ".", host = "127.0.0.1", ui;
  int port = 8080;
};

ApiServer* g_server = nullptr;

int cmd_serve(ServeArgs a) {
  if (const char* env = std::getenv("NESYXIL_WORKSPACE"); env && *env) a.workspace = env;
  Workspace ws(a.workspace);
  std::optional<fs::path> ui;
  if (!a.ui.empty()) ui = a.ui;
  ApiServer server(ws, ui);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::cout << "serving " << fs::absolute(ws.root()).string() << " on http://" << a.host << ":" << a.port
            << std::endl;
  if (!server.listen(a.host, a.port)) throw Error("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuro-symbolic explanatory interactive learning on symbolic CLEVR-Hans scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a dataset");
  g->add_option("--spec", gen.spec, "ch3 or ch7")->required();
  g->add_option("--scale", gen.scale, "full or desk");
  g->add_option("--seed", gen.seed);
  g->add_option("--out", gen.out, "Output directory");
  g->add_flag("--verify", gen.verify, "Check generator invariants");

  FeedbackArgs fb;
  auto* f = app.add_subcommand("feedback", "Create or extend a feedback file");
  f->add_option("--out", fb.out, "Feedback file")->required();
  f->add_option("--preset", fb.preset, "not_gray or class_rules");
  f->add_option("--data", fb.data, "Dataset directory (references, class_rules)");
  f->add_option("--add", fb.add, "Rule record as JSON");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a reasoning module");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--mode", tr.mode, "default, xil_mse, xil_rrr or xil_both");
  t->add_option("--feedback", tr.feedback, "Feedback file");
  t->add_option("--seed", tr.seed);
  t->add_option("--out", tr.out, "Run directory");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr, "Initial learning rate");
  t->add_option("--lambda-mse", tr.lambda_mse);
  t->add_option("--lambda-rrr", tr.lambda_rrr);
  t->add_option("--ig-steps", tr.ig_steps, "IG steps inside the MSE term");
  t->add_option("--expl-samples", tr.expl_samples, "Samples per batch with an MSE term (0: all)");
  t->add_option("--val-expl-samples", tr.val_expl_samples, "Validation samples with explanation terms (0: all)");
  t->add_option("--mask-source", tr.mask_source, "feedback or ground_truth");
  t->add_option("--mse-reduction", tr.mse_reduction, "sum or mean");
  t->add_option("--rrr-reduction", tr.rrr_reduction, "sum or mean");
  t->add_option("--l1-steps", tr.l1_steps, "IG steps for the final L1 metric");
  t->add_flag("--quiet", tr.quiet);

  ExplainArgs ex;
  auto* e = app.add_subcommand("explain", "Print the symbolic explanation of one sample");
  e->add_option("--run", ex.run, "Run directory")->required();
  e->add_option("--sample", ex.sample, "Sample id")->required();
  e->add_option("--steps", ex.steps);
  e->add_option("--t", ex.t, "Relevance threshold");
  e->add_option("--target", ex.target, "Class to explain (default: predicted)");
  e->add_option("--checkpoint", ex.checkpoint, "best, last or init");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Print metrics of a run on one split");
  v->add_option("--run", ev.run, "Run directory")->required();
  v->add_option("--split", ev.split, "train, val or test");
  v->add_option("--checkpoint", ev.checkpoint, "best, last or init");

  SuiteArgs su;
  auto* s = app.add_subcommand("suite", "Default and XIL rows over several seeds");
  s->add_option("--spec", su.spec);
  s->add_option("--seeds", su.seeds, "Comma-separated seeds");
  s->add_option("--scale", su.scale);
  s->add_option("--data-seed", su.data_seed);
  s->add_option("--epochs", su.epochs);
  s->add_option("--ig-steps", su.ig_steps);
  s->add_option("--expl-samples", su.expl_samples);
  s->add_option("--val-expl-samples", su.val_expl_samples);
  s->add_option("--l1-steps", su.l1_steps);
  s->add_option("--out", su.out, "Directory for report.json, report.txt and checkpoints");
  s->add_option("--format", su.format, "text or json");
  s->add_flag("--quiet", su.quiet);

  ServeArgs se;
  auto* sv = app.add_subcommand("serve", "Serve the HTTP API");
  sv->add_option("--workspace", se.workspace, "Workspace directory (NESYXIL_WORKSPACE overrides)");
  sv->add_option("--port", se.port);
  sv->add_option("--host", se.host);
  sv->add_option("--ui", se.ui, "Directory of the UI bundle");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return cmd_gen(gen);
    if (*f) return cmd_feedback(fb);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_explain(ex);
    if (*v) return cmd_eval(ev);
    if (*s) return cmd_suite(su);
    if (*sv) return cmd_serve(se);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
