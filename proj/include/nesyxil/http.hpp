#pragma once

// HTTP API over a workspace. Requires cpp-httplib.

#include <map>
#include <mutex>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

// Before httplib: <resolv.h> defines a `_res` macro that breaks Eigen.
#include "nesyxil/service.hpp"

#include <httplib.h>

namespace nesyxil {

inline constexpr std::size_t kSamplePageSize = 50;

inline ordered_json explanation_json(const Explanation& e, const SlotMatrix& z, double t) {
  ordered_json j;
  j["target_class"] = e.target_class;
  j["threshold"] = t;
  ordered_json dims = ordered_json::array();
  for (std::size_t d = 0; d < z.width(); ++d) dims.push_back(dim_name(d));
  j["dims"] = dims;
  ordered_json rows = ordered_json::array();
  for (std::size_t k = 0; k < z.slots(); ++k) {
    ordered_json row = ordered_json::array();
    for (std::size_t d = 0; d < z.width(); ++d) row.push_back(e.values(k, d));
    rows.push_back(row);
  }
  j["values"] = rows;
  j["relevant_slots"] = relevant_slots(e, t);
  return j;
}

class ApiServer {
 public:
  /// Serves `ui_dir` as static files when it exists.
  ApiServer(Workspace& ws, std::optional<fs::path> ui_dir = std::nullopt) : ws_(ws), jobs_(ws) {
    routes();
    if (ui_dir && fs::is_directory(*ui_dir)) server_.set_mount_point("/", ui_dir->string());
  }

  httplib::Server& server() { return server_; }
  JobManager& jobs() { return jobs_; }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  int bind_any(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;

  static void send(Res& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void send(Res& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static std::optional<std::string> param(const Req& req, const char* key) {
    if (!req.has_param(key)) return std::nullopt;
    return req.get_param_value(key);
  }

  static long long int_param(const Req& req, const char* key, long long fallback) {
    auto v = param(req, key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      long long x = std::stoll(*v, &used);
      if (used != v->size()) throw std::invalid_argument(*v);
      return x;
    } catch (const std::exception&) {
      throw FormatError(std::string("query parameter '") + key + "' must be an integer");
    }
  }

  static double double_param(const Req& req, const char* key, double fallback) {
    auto v = param(req, key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      double x = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument(*v);
      return x;
    } catch (const std::exception&) {
      throw FormatError(std::string("query parameter '") + key + "' must be a number");
    }
  }

  // Runs `f`, mapping library errors to status codes.
  template <class F>
  static auto guarded(F f) {
    return [f](const Req& req, Res& res) {
      try {
        f(req, res);
      } catch (const NotFound& e) {
        send(res, 404, ordered_json{{"error", e.what()}});
      } catch (const Conflict& e) {
        send(res, 409, ordered_json{{"error", e.what()}});
      } catch (const InvalidFeedback& e) {
        send(res, 422, ordered_json{{"error", e.what()}});
      } catch (const FeedbackMissing& e) {
        send(res, 422, ordered_json{{"error", e.what()}});
      } catch (const FormatError& e) {
        send(res, 422, ordered_json{{"error", e.what()}});
      } catch (const nlohmann::json::exception& e) {
        send(res, 422, ordered_json{{"error", std::string("bad request body: ") + e.what()}});
      } catch (const std::exception& e) {
        send(res, 500, ordered_json{{"error", e.what()}});
      }
    };
  }

  void routes() {
    server_.Get("/api/datasets", guarded([this](const Req&, Res& res) {
      ordered_json out = ordered_json::array();
      for (const auto& name : ws_.dataset_names()) {
        auto ds = ws_.dataset(name);
        ordered_json d;
        d["name"] = name;
        d["spec"] = ds->loaded.spec_name;
        d["seed"] = ds->data().seed;
        d["n_classes"] = ds->spec.classes.size();
        for (Split s : kSplits) d["counts"][std::string(split_name(s))] = ds->data().split(s).size();
        out.push_back(d);
      }
      send(res, 200, out);
    }));

    server_.Get("/api/samples", guarded([this](const Req& req, Res& res) {
      auto name = param(req, "dataset");
      if (!name) throw FormatError("missing query parameter 'dataset'");
      auto ds = ws_.dataset(*name);
      auto split = param(req, "split");
      std::optional<Split> sp;
      if (split) {
        try {
          sp = parse_split(*split);
        } catch (const std::exception&) {
          throw FormatError("unknown split '" + *split + "'");
        }
      }
      const long long cls = int_param(req, "class", -1);
      const long long page = int_param(req, "page", 0);
      if (page < 0) throw FormatError("page must be nonnegative");
      std::vector<const SymbolicScene*> hits;
      for (const auto& s : ds->data().scenes) {
        if (sp && s.split != *sp) continue;
        if (cls >= 0 && s.class_label != cls) continue;
        hits.push_back(&s);
      }
      ordered_json out;
      out["dataset"] = *name;
      out["total"] = hits.size();
      out["page"] = page;
      out["page_size"] = kSamplePageSize;
      out["samples"] = ordered_json::array();
      const std::size_t begin = static_cast<std::size_t>(page) * kSamplePageSize;
      for (std::size_t i = begin; i < std::min(hits.size(), begin + kSamplePageSize); ++i) {
        out["samples"].push_back({{"id", hits[i]->id},
                                  {"split", split_name(hits[i]->split)},
                                  {"class", hits[i]->class_label},
                                  {"n_objects", hits[i]->objects.size()}});
      }
      send(res, 200, out);
    }));

    server_.Get(R"(/api/sample/([^/]+))", guarded([this](const Req& req, Res& res) {
      send(res, 200, sample_view(req.matches[1], req));
    }));

    server_.Get("/api/feedback", guarded([this](const Req& req, Res& res) {
      const std::string set = param(req, "set").value_or("default");
      ordered_json out;
      out["set"] = set;
      out["rules"] = ws_.feedback(set).to_json();
      send(res, 200, out);
    }));

    server_.Get("/api/feedback/sets", guarded([this](const Req&, Res& res) {
      send(res, 200, ordered_json(ws_.feedback_sets()));
    }));

    server_.Post("/api/feedback", guarded([this](const Req& req, Res& res) {
      const std::string set = param(req, "set").value_or("default");
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error& e) {
        throw InvalidFeedback(std::string("not valid JSON: ") + e.what());
      }
      std::shared_ptr<const StoredDataset> ref;
      if (auto name = param(req, "dataset")) ref = ws_.dataset(*name);
      FeedbackRule r = ws_.append_feedback(set, body, ref.get());
      ordered_json out;
      out["set"] = set;
      out["rule"] = rule_to_json(r);
      out["version"] = ws_.feedback(set).version();
      send(res, 201, out);
    }));

    server_.Post("/api/train", guarded([this](const Req& req, Res& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("not valid JSON: ") + e.what());
      }
      JobStatus st = jobs_.submit(TrainRequest::from_json(body, ws_));
      send(res, 202, st.to_json());
    }));

    server_.Get(R"(/api/jobs/([^/]+))", guarded([this](const Req& req, Res& res) {
      auto st = jobs_.status(req.matches[1]);
      if (!st) throw NotFound("unknown job '" + std::string(req.matches[1]) + "'");
      send(res, 200, st->to_json());
    }));

    server_.Get("/api/runs", guarded([this](const Req&, Res& res) {
      ordered_json out = ordered_json::array();
      for (const auto& id : ws_.run_ids()) {
        auto c = nlohmann::json::parse(read_text(ws_.run_dir(id) / "config.json"));
        out.push_back({{"id", id},
                       {"mode", c.at("train").at("mode")},
                       {"seed", c.at("train").at("seed")},
                       {"dataset", fs::path(c.at("dataset").get<std::string>()).filename().string()},
                       {"finished", fs::exists(ws_.run_dir(id) / "metrics.json")}});
      }
      send(res, 200, out);
    }));

    server_.Get(R"(/api/runs/([^/]+)/metrics)", guarded([this](const Req& req, Res& res) {
      send(res, 200, ws_.run_metrics_json(req.matches[1]));
    }));
  }

  // The newest finished run trained on `dataset`.
  std::optional<std::string> latest_run(const StoredDataset& ds) {
    std::optional<std::string> best;
    for (const auto& id : ws_.run_ids()) {
      if (!fs::exists(ws_.run_dir(id) / "metrics.json")) continue;
      auto c = nlohmann::json::parse(read_text(ws_.run_dir(id) / "config.json"));
      if (fs::path(c.at("dataset").get<std::string>()).filename() == ds.dir.filename()) best = id;
    }
    return best;
  }

  ordered_json sample_view(const std::string& id, const Req& req) {
    auto [ds, scene] = ws_.find_sample(id, param(req, "dataset"));
    const double t = double_param(req, "t", 0.5);
    const long long steps = int_param(req, "steps", static_cast<long long>(kMetricIgSteps));
    if (steps < 1) throw FormatError("steps must be >= 1");
    ordered_json out;
    out["dataset"] = ds->name;
    out["sample"] = scene_to_json(*scene);
    std::optional<std::string> run_id = param(req, "run");
    if (!run_id) run_id = latest_run(*ds);
    if (!run_id) {
      out["run"] = nullptr;
      out["prediction"] = nullptr;
      out["explanation"] = nullptr;
      return out;
    }
    auto run = ws_.run(*run_id);
    SetTransformer model(run->cfg.model);
    const ModelParams& params = run->result.best.params;
    SlotMatrix z = encode_for_model(*scene, run->cfg.encode_seed);
    Tensor probs;
    {
      ad::NoGrad ng;
      probs = model.forward(bind(params, false), ad::Var::constant(stack_slots(std::span(&z, 1)))).probs.value();
    }
    const std::size_t pred = argmax(std::span<const double>(probs.data(), probs.numel()));
    const long long target = int_param(req, "target", static_cast<long long>(pred));
    if (target < 0 || static_cast<std::size_t>(target) >= run->cfg.model.n_classes) {
      throw FormatError("target class out of range");
    }
    out["run"] = *run_id;
    out["prediction"] = {{"class", pred}, {"probs", probs.vec()}};
    ordered_json slots = ordered_json::array();
    for (std::size_t k = 0; k < z.slots(); ++k) {
      if (z.row_is_zero(k)) {
        slots.push_back(nullptr);
      } else {
        slots.push_back(object_to_json(decode_row(z.row(k))));
      }
    }
    out["slots"] = slots;
    const std::string key = *run_id + "|" + id + "|" + std::to_string(steps) + "|" + std::to_string(target);
    Explanation e;
    {
      std::lock_guard lock(cache_mu_);
      auto it = cache_.find(key);
      if (it != cache_.end()) e = it->second;
    }
    if (e.values.slots() == 0) {
      e = symbolic_explanation(model, params, z, static_cast<std::size_t>(target), static_cast<std::size_t>(steps));
      std::lock_guard lock(cache_mu_);
      cache_.emplace(key, e);
    }
    out["explanation"] = explanation_json(e, z, t);
    return out;
  }

  Workspace& ws_;
  JobManager jobs_;
  httplib::Server server_;
  std::mutex cache_mu_;
  std::map<std::string, Explanation> cache_;
};

}  // namespace nesyxil
