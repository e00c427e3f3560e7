#include "insetopt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "insetopt/io.hpp"

namespace insetopt {

namespace {

using json = nlohmann::ordered_json;

// Tracks which keys a section consumed so leftovers can be reported by path.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + key + ": wrong type");
    }
  }

  bool has_object(const char* key) {
    if (!j_.contains(key)) return false;
    seen_.insert(key);
    return true;
  }

  const json& sub(const char* key) const { return j_.at(key); }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key()))
        throw ConfigError(path_ + item.key() + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

GenConfig parse_gen(const json& j, const std::string& path, GenConfig base) {
  Section s(j, path);
  s.get("seed", base.seed);
  s.get("resolution", base.resolution);
  s.get("latent_dim", base.latent_dim);
  s.get("n_layers", base.n_layers);
  s.get("hidden_channels", base.hidden_channels);
  s.get("n_blobs", base.n_blobs);
  s.finish();
  return base;
}

TruncationConfig parse_trunc(const json& j, const std::string& path, TruncationConfig base) {
  Section s(j, path);
  s.get("mode", base.mode);
  s.get("t", base.t);
  s.finish();
  if (base.mode != "none" && base.mode != "scalar" && base.mode != "adaptive")
    throw ConfigError(path + "mode: must be none, scalar or adaptive");
  return base;
}

json gen_to_json(const GenConfig& g) {
  return json{{"seed", g.seed},
              {"resolution", g.resolution},
              {"latent_dim", g.latent_dim},
              {"n_layers", g.n_layers},
              {"hidden_channels", g.hidden_channels},
              {"n_blobs", g.n_blobs}};
}

json trunc_to_json(const TruncationConfig& t) {
  return json{{"mode", t.mode}, {"t", t.t}};
}

// Rejects duplicate keys during parsing; the default parser would silently
// keep the last occurrence.
json parse_strict(const std::string& text) {
  std::vector<std::set<std::string>> objects;
  std::vector<bool> is_object;
  std::string pending_key;
  auto cb = [&](int /*depth*/, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        objects.emplace_back();
        is_object.push_back(true);
        break;
      case json::parse_event_t::array_start:
        is_object.push_back(false);
        break;
      case json::parse_event_t::object_end:
        objects.pop_back();
        is_object.pop_back();
        break;
      case json::parse_event_t::array_end:
        is_object.pop_back();
        break;
      case json::parse_event_t::key: {
        const std::string key = parsed.get<std::string>();
        if (!objects.back().insert(key).second)
          throw ConfigError("duplicate key: " + key);
        break;
      }
      case json::parse_event_t::value:
        break;
    }
    return true;
  };
  try {
    return json::parse(text, cb);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
}

}  // namespace

JobConfig config_from_json_text(const std::string& text) {
  JobConfig cfg;
  // an empty (or whitespace-only) document means "all defaults"
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return cfg;
  const json j = parse_strict(text);

  Section root(j, "");
  if (root.has_object("canvas")) cfg.canvas = parse_gen(root.sub("canvas"), "canvas.", cfg.canvas);
  if (root.has_object("insets")) {
    const json& arr = root.sub("insets");
    if (!arr.is_array()) throw ConfigError("insets: expected an array");
    cfg.insets.clear();
    GenConfig base{8, 64, cfg.canvas.latent_dim, cfg.canvas.n_layers, 8, 0};
    for (std::size_t i = 0; i < arr.size(); ++i)
      cfg.insets.push_back(
          parse_gen(arr[i], "insets[" + std::to_string(i) + "].", base));
  }
  if (root.has_object("lambdas")) {
    Section s(root.sub("lambdas"), "lambdas.");
    s.get("l1", cfg.lambdas.l1);
    s.get("l2", cfg.lambdas.l2);
    s.get("l3", cfg.lambdas.l3);
    s.get("l4_body", cfg.lambdas.l4_body);
    s.get("l4_face", cfg.lambdas.l4_face);
    s.get("r1_body", cfg.lambdas.r1_body);
    s.get("r1_face", cfg.lambdas.r1_face);
    s.get("r2", cfg.lambdas.r2);
    s.get("l5", cfg.lambdas.l5);
    s.get("l6", cfg.lambdas.l6);
    s.get("l7", cfg.lambdas.l7);
    s.get("l8", cfg.lambdas.l8);
    s.finish();
  }
  if (root.has_object("schedule")) {
    Section s(root.sub("schedule"), "schedule.");
    s.get("lr_canvas", cfg.schedule.lr_canvas);
    s.get("lr_inset", cfg.schedule.lr_inset);
    s.get("switch_every", cfg.schedule.switch_every);
    s.get("bbox_reeval_every", cfg.schedule.bbox_reeval_every);
    s.get("bbox_reeval_until_body", cfg.schedule.bbox_reeval_until_body);
    s.get("bbox_reeval_until_face", cfg.schedule.bbox_reeval_until_face);
    s.get("stop_border_l1", cfg.schedule.stop_border_l1);
    s.get("max_iters", cfg.schedule.max_iters);
    s.get("snapshot_after", cfg.schedule.snapshot_after);
    s.get("canvas_head_start", cfg.schedule.canvas_head_start);
    s.finish();
  }
  root.get("mode", cfg.mode);
  if (root.has_object("truncation"))
    cfg.truncation = parse_trunc(root.sub("truncation"), "truncation.", cfg.truncation);
  root.get("seeds", cfg.seeds);
  if (root.has_object("init")) {
    Section s(root.sub("init"), "init.");
    s.get("alpha_canvas", cfg.init.alpha_canvas);
    s.get("alpha_inset", cfg.init.alpha_inset);
    s.finish();
  }
  if (root.has_object("w_avg")) {
    Section s(root.sub("w_avg"), "w_avg.");
    s.get("samples", cfg.w_avg.samples);
    s.get("seed", cfg.w_avg.seed);
    s.finish();
  }
  if (root.has_object("feature_extractor")) {
    Section s(root.sub("feature_extractor"), "feature_extractor.");
    s.get("seed", cfg.fx.seed);
    s.get("channels", cfg.fx.channels);
    s.finish();
  }
  root.get("output_dir", cfg.output_dir);
  root.get("dump_raw", cfg.dump_raw);
  if (root.has_object("walk")) {
    Section s(root.sub("walk"), "walk.");
    s.get("frames_per_segment", cfg.walk.frames_per_segment);
    s.get("budget", cfg.walk.budget);
    s.get("cyclic", cfg.walk.cyclic);
    s.finish();
  }
  if (root.has_object("eval")) {
    Section s(root.sub("eval"), "eval.");
    s.get("count", cfg.eval.count);
    s.get("seed_a", cfg.eval.seed_a);
    s.get("seed_b", cfg.eval.seed_b);
    if (s.has_object("trunc_a"))
      cfg.eval.trunc_a = parse_trunc(s.sub("trunc_a"), "eval.trunc_a.", cfg.eval.trunc_a);
    if (s.has_object("trunc_b"))
      cfg.eval.trunc_b = parse_trunc(s.sub("trunc_b"), "eval.trunc_b.", cfg.eval.trunc_b);
    s.get("knn_k", cfg.eval.knn_k);
    s.finish();
  }
  root.finish();

  validate_config(cfg);
  return cfg;
}

JobConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return config_from_json_text(os.str());
}

void validate_config(const JobConfig& cfg) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + ": must be positive");
  };
  positive(cfg.schedule.lr_canvas, "lr_canvas");
  positive(cfg.schedule.lr_inset, "lr_inset");
  positive(cfg.schedule.switch_every, "switch_every");
  positive(cfg.schedule.bbox_reeval_every, "bbox_reeval_every");
  positive(cfg.schedule.stop_border_l1, "stop_border_l1");
  positive(cfg.schedule.max_iters, "max_iters");
  if (cfg.schedule.bbox_reeval_until_body > cfg.schedule.max_iters ||
      cfg.schedule.bbox_reeval_until_face > cfg.schedule.max_iters)
    throw ConfigError("bbox_reeval_until: must not exceed max_iters");
  if (cfg.insets.empty()) throw ConfigError("insets: need at least one inset generator");
  if (cfg.truncation.mode == "scalar" && (cfg.truncation.t < 0.0 || cfg.truncation.t > 1.0))
    throw ConfigError("truncation.t: must be in [0,1]");
  if (cfg.init.alpha_canvas < 0.0 || cfg.init.alpha_canvas > 1.0)
    throw ConfigError("alpha_canvas: must be in [0,1]");
  if (cfg.init.alpha_inset < 0.0 || cfg.init.alpha_inset > 1.0)
    throw ConfigError("alpha_inset: must be in [0,1]");
  if (cfg.w_avg.samples < 1) throw ConfigError("w_avg.samples: must be >= 1");
  if (cfg.fx.channels < 1) throw ConfigError("feature_extractor.channels: must be >= 1");
  if (cfg.seeds.empty()) throw ConfigError("seeds: need at least one seed");
  if (cfg.eval.knn_k < 1) throw ConfigError("eval.knn_k: must be >= 1");
  if (cfg.walk.frames_per_segment < 2)
    throw ConfigError("walk.frames_per_segment: must be >= 2");
  mode_from_name(cfg.mode);  // throws on unknown mode
}

nlohmann::ordered_json config_to_json(const JobConfig& cfg) {
  json j;
  j["canvas"] = gen_to_json(cfg.canvas);
  j["insets"] = json::array();
  for (const auto& g : cfg.insets) j["insets"].push_back(gen_to_json(g));
  j["lambdas"] = {{"l1", cfg.lambdas.l1},         {"l2", cfg.lambdas.l2},
                  {"l3", cfg.lambdas.l3},         {"l4_body", cfg.lambdas.l4_body},
                  {"l4_face", cfg.lambdas.l4_face}, {"r1_body", cfg.lambdas.r1_body},
                  {"r1_face", cfg.lambdas.r1_face}, {"r2", cfg.lambdas.r2},
                  {"l5", cfg.lambdas.l5},         {"l6", cfg.lambdas.l6},
                  {"l7", cfg.lambdas.l7},         {"l8", cfg.lambdas.l8}};
  j["schedule"] = {{"lr_canvas", cfg.schedule.lr_canvas},
                   {"lr_inset", cfg.schedule.lr_inset},
                   {"switch_every", cfg.schedule.switch_every},
                   {"bbox_reeval_every", cfg.schedule.bbox_reeval_every},
                   {"bbox_reeval_until_body", cfg.schedule.bbox_reeval_until_body},
                   {"bbox_reeval_until_face", cfg.schedule.bbox_reeval_until_face},
                   {"stop_border_l1", cfg.schedule.stop_border_l1},
                   {"max_iters", cfg.schedule.max_iters},
                   {"snapshot_after", cfg.schedule.snapshot_after},
                   {"canvas_head_start", cfg.schedule.canvas_head_start}};
  j["mode"] = cfg.mode;
  j["truncation"] = trunc_to_json(cfg.truncation);
  j["seeds"] = cfg.seeds;
  j["init"] = {{"alpha_canvas", cfg.init.alpha_canvas}, {"alpha_inset", cfg.init.alpha_inset}};
  j["w_avg"] = {{"samples", cfg.w_avg.samples}, {"seed", cfg.w_avg.seed}};
  j["feature_extractor"] = {{"seed", cfg.fx.seed}, {"channels", cfg.fx.channels}};
  j["output_dir"] = cfg.output_dir;
  j["dump_raw"] = cfg.dump_raw;
  j["walk"] = {{"frames_per_segment", cfg.walk.frames_per_segment},
               {"budget", cfg.walk.budget},
               {"cyclic", cfg.walk.cyclic}};
  j["eval"] = {{"count", cfg.eval.count},
               {"seed_a", cfg.eval.seed_a},
               {"seed_b", cfg.eval.seed_b},
               {"trunc_a", trunc_to_json(cfg.eval.trunc_a)},
               {"trunc_b", trunc_to_json(cfg.eval.trunc_b)},
               {"knn_k", cfg.eval.knn_k}};
  return j;
}

std::string config_hash(const JobConfig& cfg) { return hex64(fnv1a64(config_to_json(cfg).dump())); }

std::vector<std::uint64_t> parse_seed_range(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dots = part.find("..");
    if (dots != std::string::npos) {
      const std::uint64_t lo = std::stoull(part.substr(0, dots));
      const std::uint64_t hi = std::stoull(part.substr(dots + 2));
      if (hi < lo) throw ConfigError("seed range: end before start in '" + part + "'");
      for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    } else if (!part.empty()) {
      seeds.push_back(std::stoull(part));
    }
  }
  if (seeds.empty()) throw ConfigError("seed range: no seeds in '" + text + "'");
  return seeds;
}

}  // namespace insetopt
