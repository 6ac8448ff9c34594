#pragma once

// Workspace layout, run execution and the single-slot training job queue
// shared by the command-line tool and the HTTP service.
//
//   <workspace>/datasets/<name>/{meta.json,scenes.jsonl}
//   <workspace>/runs/<run-id>/{config.json,history.jsonl,checkpoints/,feedback.json,metrics.json}
//   <workspace>/feedback/<set-id>.json

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nesyxil/trainer.hpp"

namespace nesyxil {

namespace fs = std::filesystem;

/// Names used as file or directory names: letters, digits, '-', '_', '.',
/// not starting with '.'.
inline bool valid_name(std::string_view s) {
  if (s.empty() || s.size() > 128 || s.front() == '.') return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
}

inline void check_name(std::string_view kind, std::string_view s) {
  if (!valid_name(s)) throw FormatError("invalid " + std::string(kind) + " name '" + std::string(s) + "'");
}

struct StoredDataset {
  std::string name;
  fs::path dir;
  LoadedDataset loaded;
  DatasetSpec spec;

  const Dataset& data() const { return loaded.data; }
};

inline std::shared_ptr<const StoredDataset> load_stored_dataset(const fs::path& dir, std::string name = {}) {
  auto sd = std::make_shared<StoredDataset>();
  sd->name = name.empty() ? dir.filename().string() : std::move(name);
  sd->dir = dir;
  sd->loaded = read_dataset(dir);
  sd->spec = stored_spec(sd->loaded);
  return sd;
}

// ---------------------------------------------------------------------------
// Runs

/// A trained model as stored in a run directory.
struct StoredRun {
  std::string id;
  fs::path dir;
  fs::path dataset_dir;
  TrainConfig cfg;
  TrainResult result;
};

inline StoredRun load_stored_run(const fs::path& dir) {
  if (!fs::exists(dir / "config.json")) throw NotFound("no run at " + dir.string());
  StoredRun r;
  r.id = dir.filename().string();
  r.dir = dir;
  auto c = nlohmann::json::parse(read_text(dir / "config.json"));
  r.dataset_dir = c.at("dataset").get<std::string>();
  r.cfg = TrainConfig::from_json(c.at("train"));
  r.result = load_run(dir);
  return r;
}

inline std::optional<FeedbackSet> read_feedback_file(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  return FeedbackSet::parse(read_text(path));
}

struct RunProgress {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains into `run_dir`, persisting after every epoch, then writes
/// metrics.json for the best checkpoint. Resumes when the directory already
/// holds a run with the same config.
inline RunMetrics execute_run(const fs::path& run_dir, const StoredDataset& data, const TrainConfig& cfg,
                              const FeedbackSet* feedback, std::size_t l1_steps, const RunProgress& progress = {}) {
  std::optional<TrainResult> resume;
  if (fs::exists(run_dir / "checkpoints" / "last" / "manifest.json")) {
    StoredRun old = load_stored_run(run_dir);
    if (old.cfg.hash() != cfg.hash()) throw Conflict(run_dir.string() + " holds a run with a different config");
    resume = std::move(old.result);
  }
  fs::create_directories(run_dir);
  if (feedback) write_text_atomic(run_dir / "feedback.json", feedback->serialize());
  const std::string dataset_ref = fs::absolute(data.dir).lexically_normal().string();
  TrainHooks hooks;
  hooks.on_epoch = progress.on_epoch;
  hooks.on_checkpoint = [&](const TrainResult& r) { save_run(run_dir, cfg, r, dataset_ref); };
  TrainResult res = train(data.data(), cfg, feedback, &data.spec, hooks, resume ? &*resume : nullptr);
  save_run(run_dir, cfg, res, dataset_ref);
  RunMetrics m = run_metrics(data.data(), data.spec, cfg, res.best.params, l1_steps);
  write_text_atomic(run_dir / "metrics.json", m.to_json().dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// Workspace

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) {
    fs::create_directories(datasets_dir());
    fs::create_directories(runs_dir());
    fs::create_directories(feedback_dir());
  }

  const fs::path& root() const { return root_; }
  fs::path datasets_dir() const { return root_ / "datasets"; }
  fs::path runs_dir() const { return root_ / "runs"; }
  fs::path feedback_dir() const { return root_ / "feedback"; }

  std::vector<std::string> dataset_names() const { return subdirs(datasets_dir(), "meta.json"); }
  std::vector<std::string> run_ids() const { return subdirs(runs_dir(), "config.json"); }

  std::shared_ptr<const StoredDataset> dataset(const std::string& name) {
    check_name("dataset", name);
    std::lock_guard lock(mu_);
    if (auto it = datasets_.find(name); it != datasets_.end()) return it->second;
    const fs::path dir = datasets_dir() / name;
    if (!fs::exists(dir / "meta.json")) throw NotFound("unknown dataset '" + name + "'");
    auto sd = load_stored_dataset(dir, name);
    datasets_[name] = sd;
    return sd;
  }

  /// The dataset holding sample `id`, searched in name order unless given.
  std::pair<std::shared_ptr<const StoredDataset>, const SymbolicScene*> find_sample(
      const std::string& id, const std::optional<std::string>& dataset_name = std::nullopt) {
    std::vector<std::string> names = dataset_name ? std::vector<std::string>{*dataset_name} : dataset_names();
    for (const auto& n : names) {
      auto ds = dataset(n);
      if (const SymbolicScene* s = ds->data().find(id)) return {ds, s};
    }
    throw NotFound("unknown sample '" + id + "'");
  }

  // Feedback sets.

  fs::path feedback_path(const std::string& set) const {
    check_name("feedback set", set);
    return feedback_dir() / (set + ".json");
  }

  std::vector<std::string> feedback_sets() const {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(feedback_dir())) {
      if (e.path().extension() == ".json") out.push_back(e.path().stem().string());
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  FeedbackSet feedback(const std::string& set) const {
    std::lock_guard lock(feedback_mu_);
    return read_feedback_file(feedback_path(set)).value_or(FeedbackSet{});
  }

  /// Validates and appends one rule record. References are checked against
  /// `ref` when given.
  FeedbackRule append_feedback(const std::string& set, const nlohmann::json& record,
                               const StoredDataset* ref = nullptr) {
    FeedbackRule rule = rule_from_json(record);
    if (ref) FeedbackSet::check_reference(rule, ref->data(), ref->spec.classes.size());
    std::lock_guard lock(feedback_mu_);
    FeedbackSet fs = read_feedback_file(feedback_path(set)).value_or(FeedbackSet{});
    fs.add(rule);
    write_text_atomic(feedback_path(set), fs.serialize());
    return rule;
  }

  // Runs.

  fs::path run_dir(const std::string& id) const {
    check_name("run", id);
    return runs_dir() / id;
  }

  /// Reserves the next free id of the form <prefix>-NNNN by creating its
  /// directory.
  std::string reserve_run_id(const std::string& prefix) {
    check_name("run prefix", prefix);
    std::lock_guard lock(mu_);
    for (int n = 1;; ++n) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%04d", n);
      std::string id = prefix + "-" + buf;
      if (fs::create_directory(runs_dir() / id)) return id;
    }
  }

  std::shared_ptr<const StoredRun> run(const std::string& id) {
    const fs::path dir = run_dir(id);
    std::lock_guard lock(mu_);
    if (auto it = runs_.find(id); it != runs_.end()) return it->second;
    if (!fs::exists(dir / "config.json")) throw NotFound("unknown run '" + id + "'");
    auto r = std::make_shared<const StoredRun>(load_stored_run(dir));
    // Only finished runs are immutable.
    if (fs::exists(dir / "metrics.json")) runs_[id] = r;
    return r;
  }

  nlohmann::json run_metrics_json(const std::string& id) const {
    const fs::path p = run_dir(id) / "metrics.json";
    if (!fs::exists(run_dir(id) / "config.json")) throw NotFound("unknown run '" + id + "'");
    if (!fs::exists(p)) throw NotFound("run '" + id + "' has no metrics yet");
    return nlohmann::json::parse(read_text(p));
  }

 private:
  static std::vector<std::string> subdirs(const fs::path& dir, const char* marker) {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && fs::exists(e.path() / marker)) out.push_back(e.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  fs::path root_;
  mutable std::mutex mu_;
  mutable std::mutex feedback_mu_;
  std::map<std::string, std::shared_ptr<const StoredDataset>> datasets_;
  std::map<std::string, std::shared_ptr<const StoredRun>> runs_;
};

// ---------------------------------------------------------------------------
// Jobs

enum class JobState { kQueued, kRunning, kFinished, kFailed };

inline std::string_view job_state_name(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kFinished: return "finished";
    case JobState::kFailed: return "failed";
  }
  return "?";
}

struct JobStatus {
  std::string id;
  JobState state = JobState::kQueued;
  std::size_t epoch = 0;  // completed epochs
  std::size_t epochs = 0;
  std::string run_id;
  std::string error;

  bool done() const { return state == JobState::kFinished || state == JobState::kFailed; }

  ordered_json to_json() const {
    ordered_json j;
    j["id"] = id;
    j["state"] = job_state_name(state);
    j["progress"] = {{"epoch", epoch}, {"epochs", epochs}};
    j["run_id"] = run_id;
    if (!error.empty()) j["error"] = error;
    return j;
  }
};

struct TrainRequest {
  std::string dataset;
  std::string feedback_set;  // empty: no feedback
  TrainConfig cfg;
  std::size_t l1_steps = kMetricIgSteps;

  /// Body of POST /api/train. Unset fields take the per-mode defaults;
  /// "config" may override any TrainConfig field.
  static TrainRequest from_json(const nlohmann::json& j, Workspace& ws) {
    if (!j.is_object()) throw FormatError("request body must be an object");
    TrainRequest r;
    r.dataset = j.at("dataset").get<std::string>();
    auto ds = ws.dataset(r.dataset);
    const TrainMode mode = parse_mode(j.value("mode", std::string("default")));
    const auto seed = j.value("seed", std::uint64_t{0});
    r.cfg = default_train_config(mode, ds->loaded.spec_name, ds->spec.classes.size(), seed);
    if (j.contains("config")) {
      auto merged = nlohmann::json::parse(r.cfg.to_json().dump());
      merged.merge_patch(j.at("config"));
      r.cfg = TrainConfig::from_json(merged);
      r.cfg.mode = mode;
      r.cfg.seed = seed;
    }
    if (j.contains("epochs")) r.cfg.epochs = j.at("epochs").get<std::size_t>();
    r.feedback_set = j.value("feedback", std::string());
    if (!r.feedback_set.empty()) check_name("feedback set", r.feedback_set);
    r.l1_steps = j.value("l1_steps", std::size_t{kMetricIgSteps});
    r.cfg.validate();
    if (r.l1_steps < 1) throw FormatError("l1_steps must be >= 1");
    return r;
  }
};

/// Runs at most one training job at a time on a background thread.
class JobManager {
 public:
  explicit JobManager(Workspace& ws) : ws_(ws) {}
  JobManager(const JobManager&) = delete;
  JobManager& operator=(const JobManager&) = delete;

  ~JobManager() {
    if (worker_.joinable()) worker_.join();
  }

  /// Queues a job, or throws Conflict while another one is unfinished.
  JobStatus submit(TrainRequest req) {
    std::optional<FeedbackSet> fb;
    if (!req.feedback_set.empty()) {
      fb = read_feedback_file(ws_.feedback_path(req.feedback_set));
      if (!fb) throw NotFound("unknown feedback set '" + req.feedback_set + "'");
    }
    auto ds = ws_.dataset(req.dataset);
    if (fb) fb->validate_references(ds->data(), ds->spec.classes.size());
    const bool needs = req.cfg.uses_rrr() || (req.cfg.uses_mse() && req.cfg.mask_source == MaskSource::kFeedback);
    if (needs && (!fb || fb->empty())) {
      throw FeedbackMissing(std::string(mode_name(req.cfg.mode)) + " needs a nonempty feedback set");
    }

    std::unique_lock lock(mu_);
    if (active_ && !jobs_.at(*active_).done()) throw Conflict("job " + *active_ + " is still running");
    if (worker_.joinable()) worker_.join();
    JobStatus st;
    st.id = "job-" + std::to_string(jobs_.size() + 1);
    st.epochs = req.cfg.epochs;
    st.run_id = ws_.reserve_run_id(std::string(mode_name(req.cfg.mode)) + "-" + req.dataset);
    jobs_[st.id] = st;
    active_ = st.id;
    worker_ = std::thread([this, id = st.id, run_id = st.run_id, req = std::move(req), fb = std::move(fb), ds] {
      run_job(id, run_id, req, fb ? &*fb : nullptr, *ds);
    });
    return st;
  }

  std::optional<JobStatus> status(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
  }

  /// Blocks until job `id` is finished or failed.
  JobStatus wait(const std::string& id) {
    std::unique_lock lock(mu_);
    if (!jobs_.count(id)) throw NotFound("unknown job '" + id + "'");
    cv_.wait(lock, [&] { return jobs_.at(id).done(); });
    return jobs_.at(id);
  }

 private:
  void update(const std::string& id, const std::function<void(JobStatus&)>& f) {
    {
      std::lock_guard lock(mu_);
      f(jobs_.at(id));
    }
    cv_.notify_all();
  }

  void run_job(const std::string& id, const std::string& run_id, const TrainRequest& req, const FeedbackSet* fb,
               const StoredDataset& ds) {
    update(id, [](JobStatus& s) { s.state = JobState::kRunning; });
    try {
      RunProgress prog;
      prog.on_epoch = [&](const EpochRecord& r) { update(id, [&](JobStatus& s) { s.epoch = r.epoch + 1; }); };
      execute_run(ws_.run_dir(run_id), ds, req.cfg, fb, req.l1_steps, prog);
      update(id, [](JobStatus& s) { s.state = JobState::kFinished; });
    } catch (const std::exception& e) {
      update(id, [&](JobStatus& s) {
        s.state = JobState::kFailed;
        s.error = e.what();
      });
    }
  }

  Workspace& ws_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, JobStatus> jobs_;
  std::optional<std::string> active_;
  std::thread worker_;
};

}  // namespace nesyxil
