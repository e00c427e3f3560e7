#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "insetopt/composer.hpp"
#include "insetopt/config.hpp"
#include "insetopt/detector.hpp"
#include "insetopt/generator.hpp"
#include "insetopt/gradsuite.hpp"
#include "insetopt/io.hpp"
#include "insetopt/metrics.hpp"
#include "insetopt/rng.hpp"
#include "insetopt/walk.hpp"

namespace fs = std::filesystem;
using namespace insetopt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitAborted = 2;

struct Workspace {
  JobConfig cfg;
  GeneratorSpec canvas;
  std::vector<GeneratorSpec> insets;
  FeatureExtractor fx;
  AverageLatent avg_canvas;
  std::vector<AverageLatent> avg_insets;

  ComposerInputs io() const {
    ComposerInputs in;
    in.canvas_spec = &canvas;
    for (const auto& g : insets) in.inset_specs.push_back(&g);
    in.fx = &fx;
    in.w_avg_canvas = avg_canvas.w_avg;
    for (const auto& a : avg_insets) in.w_avg_insets.push_back(a.w_avg);
    return in;
  }
};

GeneratorSpec make_generator(const GenConfig& g, bool is_canvas) {
  return GeneratorSpec::make(g.seed, g.resolution, is_canvas ? 4 : 3, g.n_layers, g.latent_dim,
                             is_canvas ? g.n_blobs : 1, g.hidden_channels);
}

Workspace build_workspace(JobConfig cfg) {
  GeneratorSpec canvas = make_generator(cfg.canvas, true);
  std::vector<GeneratorSpec> insets;
  for (const auto& g : cfg.insets) insets.push_back(make_generator(g, false));
  FeatureExtractor fx = FeatureExtractor::make(cfg.fx.seed, cfg.fx.channels);
  AverageLatent avg_canvas = average_latent(canvas, cfg.w_avg.samples, cfg.w_avg.seed);
  std::vector<AverageLatent> avg_insets;
  for (const auto& spec : insets)
    avg_insets.push_back(average_latent(spec, cfg.w_avg.samples, cfg.w_avg.seed));
  return Workspace{std::move(cfg),       std::move(canvas), std::move(insets),
                   std::move(fx),        std::move(avg_canvas),
                   std::move(avg_insets)};
}

std::vector<double> adaptive_table(int n_layers) {
  if (n_layers != static_cast<int>(kAdaptiveTruncation.size()))
    throw ConfigError("truncation.mode: adaptive table is defined for 18 layers");
  return {kAdaptiveTruncation.begin(), kAdaptiveTruncation.end()};
}

LayeredLatent apply_truncation(LayeredLatent lat, const TruncationConfig& trunc,
                               const AverageLatent& avg, int n_layers) {
  if (trunc.mode == "none") return lat;
  if (trunc.mode == "scalar")
    return truncate_adaptive(lat, std::vector<double>(n_layers, trunc.t), avg.w_avg);
  return truncate_adaptive(lat, adaptive_table(n_layers), avg.w_avg);
}

LayeredLatent sample_canvas_latent(const Workspace& ws, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xA));
  const std::vector<double> w =
      map_latent(rng.normal_vector(ws.canvas.latent_dim()), ws.canvas);
  LayeredLatent lat = LayeredLatent::flat(w, ws.canvas.n_layers());
  return apply_truncation(std::move(lat), ws.cfg.truncation, ws.avg_canvas,
                          ws.canvas.n_layers());
}

std::vector<std::string> trace_header(const Workspace& ws, const std::string& mode) {
  const ScheduleConfig& s = ws.cfg.schedule;
  const LambdaTable& l = ws.cfg.lambdas;
  std::ostringstream sched, lam;
  sched << "schedule lr_canvas=" << format_double(s.lr_canvas)
        << " lr_inset=" << format_double(s.lr_inset) << " switch_every=" << s.switch_every
        << " bbox_reeval_every=" << s.bbox_reeval_every
        << " bbox_reeval_until_body=" << s.bbox_reeval_until_body
        << " bbox_reeval_until_face=" << s.bbox_reeval_until_face
        << " stop_border_l1=" << format_double(s.stop_border_l1) << " max_iters=" << s.max_iters
        << " snapshot_after=" << s.snapshot_after
        << " canvas_head_start=" << s.canvas_head_start;
  lam << "lambdas l1=" << format_double(l.l1) << " l2=" << format_double(l.l2)
      << " l3=" << format_double(l.l3) << " l4_body=" << format_double(l.l4_body)
      << " l4_face=" << format_double(l.l4_face) << " r1_body=" << format_double(l.r1_body)
      << " r1_face=" << format_double(l.r1_face) << " r2=" << format_double(l.r2)
      << " l5=" << format_double(l.l5) << " l6=" << format_double(l.l6)
      << " l7=" << format_double(l.l7) << " l8=" << format_double(l.l8);
  return {"mode=" + mode, sched.str(), lam.str(), "config_hash=" + config_hash(ws.cfg)};
}

void write_trace(const std::string& path, const Workspace& ws, const std::string& mode,
                 const std::vector<TraceRow>& trace, int n_insets) {
  std::vector<std::vector<double>> rows;
  rows.reserve(trace.size());
  for (const auto& r : trace) rows.push_back(trace_values(r));
  write_csv(path, trace_columns(n_insets), rows, trace_header(ws, mode));
}

struct Manifest {
  nlohmann::ordered_json j;
  std::vector<std::string> outputs;

  Manifest(const std::string& command, const Workspace& ws) {
    j["command"] = command;
    j["config_hash"] = config_hash(ws.cfg);
    j["seeds"] = ws.cfg.seeds;
    j["config"] = config_to_json(ws.cfg);
  }
  void add(const std::string& path) { outputs.push_back(path); }
  void write(const std::string& dir) {
    j["outputs"] = outputs;
    write_text_file(dir + "/manifest.json", j.dump(2) + "\n");
  }
};

int worker_count() {
  const char* env = std::getenv("INSETOPT_WORKERS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

// Independent per-seed jobs; output slots are pre-assigned so scheduling
// cannot reorder results.
void run_parallel(int n_jobs, const std::function<void(int)>& job) {
  const int workers = std::min(worker_count(), n_jobs);
  if (workers <= 1) {
    for (int i = 0; i < n_jobs; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n_jobs) return;
        try {
          job(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string seed_tag(std::uint64_t seed) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04llu", static_cast<unsigned long long>(seed));
  return buf;
}

void maybe_dump_raw(const Workspace& ws, Manifest& man, const std::string& stem,
                    const Tensor& t) {
  if (!ws.cfg.dump_raw) return;
  write_raw_tensor(stem + ".f64", t);
  man.add(stem + ".f64");
}

int cmd_sample(const Workspace& ws) {
  fs::create_directories(ws.cfg.output_dir);
  Manifest man("sample", ws);
  for (std::uint64_t seed : ws.cfg.seeds) {
    const LayeredLatent lat = sample_canvas_latent(ws, seed);
    const Tensor img = generate_image(lat, ws.canvas);
    const std::string stem = ws.cfg.output_dir + "/sample_" + seed_tag(seed);
    write_png(stem + ".png", slice_channels(img, 0, 3));
    man.add(stem + ".png");
    maybe_dump_raw(ws, man, stem, img);
  }
  man.write(ws.cfg.output_dir);
  return kExitOk;
}

LayeredLatent inset_init(const Workspace& ws, int k, std::uint64_t seed) {
  if (ws.cfg.init.alpha_inset >= 1.0) return init_latent_average(ws.insets[k], ws.avg_insets[k]);
  return init_latent_truncated_random(ws.insets[k], ws.avg_insets[k], ws.cfg.init.alpha_inset,
                                      derive_seed(seed, 2 + k));
}

std::vector<std::string> summary_columns() {
  return {"seed",          "iterations",     "best_iteration", "init_border_l1",
          "final_border_l1", "init_seam",      "final_seam",     "best_total"};
}

std::vector<double> summary_row(std::uint64_t seed, const OptResult& r) {
  return {static_cast<double>(seed),
          static_cast<double>(r.iterations_run),
          static_cast<double>(r.best_iteration),
          r.init_border_l1,
          r.final_border_l1,
          r.init_seam_energy,
          r.final_seam_energy,
          r.best_total};
}

int cmd_refine(const Workspace& ws) {
  fs::create_directories(ws.cfg.output_dir);
  Manifest man("refine", ws);
  const ComposerInputs io = ws.io();
  const int n = static_cast<int>(ws.cfg.seeds.size());
  std::vector<std::vector<double>> summary(n);
  std::vector<std::vector<std::string>> outputs(n);

  run_parallel(n, [&](int i) {
    const std::uint64_t seed = ws.cfg.seeds[i];
    LayeredLatent w_a = init_latent_truncated_random(ws.canvas, ws.avg_canvas,
                                                     ws.cfg.init.alpha_canvas,
                                                     derive_seed(seed, 1));
    LayeredLatent w_b = inset_init(ws, 0, seed);
    ObjectiveSpec obj;
    obj.mode = ObjectiveMode::refine_inset;
    obj.lambdas = ws.cfg.lambdas;
    const OptResult res = refine_inset(w_a, w_b, io, obj, ws.cfg.schedule);
    const std::string stem = ws.cfg.output_dir + "/refine_" + seed_tag(seed);
    write_png(stem + "_composite.png", res.composite);
    write_trace(stem + "_trace.csv", ws, "refine_inset", res.trace, 1);
    outputs[i] = {stem + "_composite.png", stem + "_trace.csv"};
    summary[i] = summary_row(seed, res);
  });

  for (const auto& outs : outputs)
    for (const auto& o : outs) man.add(o);
  const std::string sum_path = ws.cfg.output_dir + "/refine_summary.csv";
  write_csv(sum_path, summary_columns(), summary, trace_header(ws, "refine_inset"));
  man.add(sum_path);
  man.write(ws.cfg.output_dir);
  return kExitOk;
}

int cmd_joint(const Workspace& ws, const std::string& forced_mode) {
  fs::create_directories(ws.cfg.output_dir);
  const std::string mode_str = forced_mode.empty() ? ws.cfg.mode : forced_mode;
  const ObjectiveMode mode = mode_from_name(mode_str);
  if (mode == ObjectiveMode::refine_inset)
    throw ConfigError("mode: use the refine command for one-way refinement");
  const int k = static_cast<int>(ws.insets.size());
  if (mode == ObjectiveMode::multi_inset && ws.canvas.n_blobs() < k)
    throw ConfigError("canvas.n_blobs: need one marker blob per inset");

  Manifest man(mode_str, ws);
  const ComposerInputs io = ws.io();
  const int n = static_cast<int>(ws.cfg.seeds.size());
  std::vector<std::vector<double>> summary(n);
  std::vector<std::vector<std::string>> outputs(n);

  run_parallel(n, [&](int i) {
    const std::uint64_t seed = ws.cfg.seeds[i];
    LayeredLatent w_a = init_latent_truncated_random(ws.canvas, ws.avg_canvas,
                                                     ws.cfg.init.alpha_canvas,
                                                     derive_seed(seed, 1));
    std::vector<LayeredLatent> w_b;
    for (int j = 0; j < (mode == ObjectiveMode::multi_inset ? k : 1); ++j)
      w_b.push_back(inset_init(ws, j, seed));

    ObjectiveSpec obj;
    obj.mode = mode;
    obj.lambdas = ws.cfg.lambdas;
    if (mode == ObjectiveMode::joint_refine || mode == ObjectiveMode::montage)
      obj.ref_body = slice_channels(generate_image(w_a, ws.canvas), 0, 3);
    if (mode == ObjectiveMode::body_for_face || mode == ObjectiveMode::montage)
      obj.ref_face = generate_image(w_b[0], ws.insets[0]);

    const OptResult res = joint_optimize(obj, io, w_a, w_b, ws.cfg.schedule);
    const std::string stem = ws.cfg.output_dir + "/" + mode_str + "_" + seed_tag(seed);
    write_png(stem + "_composite.png", res.composite);
    write_trace(stem + "_trace.csv", ws, mode_str, res.trace, static_cast<int>(w_b.size()));
    outputs[i] = {stem + "_composite.png", stem + "_trace.csv"};
    summary[i] = summary_row(seed, res);
  });

  for (const auto& outs : outputs)
    for (const auto& o : outs) man.add(o);
  const std::string sum_path = ws.cfg.output_dir + "/" + mode_str + "_summary.csv";
  write_csv(sum_path, summary_columns(), summary, trace_header(ws, mode_str));
  man.add(sum_path);
  man.write(ws.cfg.output_dir);
  return kExitOk;
}

int cmd_walk(const Workspace& ws) {
  fs::create_directories(ws.cfg.output_dir);
  Manifest man("walk", ws);
  const ComposerInputs io = ws.io();
  if (ws.cfg.seeds.size() < 2) throw ConfigError("seeds: walk needs at least two keyframe seeds");

  WalkPlan plan;
  plan.frames_per_segment = ws.cfg.walk.frames_per_segment;
  plan.budget = ws.cfg.walk.budget;
  plan.cyclic = ws.cfg.walk.cyclic;
  for (std::uint64_t seed : ws.cfg.seeds) {
    LayeredLatent w_a = init_latent_truncated_random(ws.canvas, ws.avg_canvas,
                                                     ws.cfg.init.alpha_canvas,
                                                     derive_seed(seed, 1));
    LayeredLatent w_b = inset_init(ws, 0, seed);
    ObjectiveSpec obj;
    obj.mode = ObjectiveMode::refine_inset;
    obj.lambdas = ws.cfg.lambdas;
    const OptResult res = refine_inset(w_a, w_b, io, obj, ws.cfg.schedule);
    plan.keyframes.push_back(Keyframe{w_a, res.w_insets[0], res.bboxes[0]});
  }

  const WalkResult walk = render_walk(plan, ws.canvas, ws.insets[0], ws.fx, ws.cfg.lambdas,
                                      ws.cfg.schedule.lr_inset);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < walk.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
    const std::string path = ws.cfg.output_dir + "/" + name;
    write_png(path, walk.frames[i].composite);
    man.add(path);
    rows.push_back({static_cast<double>(i), walk.frames[i].border_l1,
                    walk.frames[i].temporal_delta});
  }
  const std::string metrics_path = ws.cfg.output_dir + "/walk_metrics.csv";
  write_csv(metrics_path, {"frame", "border_l1", "temporal_delta"}, rows,
            trace_header(ws, "walk"));
  man.add(metrics_path);
  man.write(ws.cfg.output_dir);
  return kExitOk;
}

int cmd_eval(const Workspace& ws) {
  fs::create_directories(ws.cfg.output_dir);
  Manifest man("eval", ws);
  const EvalConfigSection& ev = ws.cfg.eval;

  auto sample_set = [&](std::uint64_t set_seed, const TruncationConfig& trunc,
                        const std::string& tag) {
    std::vector<Tensor> images;
    images.reserve(ev.count);
    for (int i = 0; i < ev.count; ++i) {
      Rng rng(derive_seed(set_seed, i));
      LayeredLatent lat = LayeredLatent::flat(
          map_latent(rng.normal_vector(ws.canvas.latent_dim()), ws.canvas),
          ws.canvas.n_layers());
      lat = apply_truncation(std::move(lat), trunc, ws.avg_canvas, ws.canvas.n_layers());
      images.push_back(slice_channels(generate_image(lat, ws.canvas), 0, 3));
    }
    return embed(images, ws.fx, tag);
  };

  const FeatureSet set_a = sample_set(ev.seed_a, ev.trunc_a, "real");
  const FeatureSet set_b = sample_set(ev.seed_b, ev.trunc_b, "generated");
  const double fid_value = fid(set_a, set_b);
  const auto [precision, recall] = precision_recall(set_a, set_b, ev.knn_k);

  std::ostringstream report;
  report << "metric,value,n,seed,config_hash\n";
  const std::string hash = config_hash(ws.cfg);
  report << "fid," << format_double(fid_value) << "," << ev.count << "," << ev.seed_a << ","
         << hash << "\n";
  report << "precision," << format_double(precision) << "," << ev.count << "," << ev.seed_b
         << "," << hash << "\n";
  report << "recall," << format_double(recall) << "," << ev.count << "," << ev.seed_b << ","
         << hash << "\n";
  const std::string path = ws.cfg.output_dir + "/eval_report.csv";
  write_text_file(path, report.str());
  man.add(path);
  man.write(ws.cfg.output_dir);
  std::cout << "fid=" << fid_value << " precision=" << precision << " recall=" << recall
            << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Workspace& ws) {
  fs::create_directories(ws.cfg.output_dir);
  Manifest man("gradcheck", ws);
  const std::vector<GradCheckEntry> results = run_gradient_suite();
  std::ostringstream report;
  report << "op,max_rel_err,threshold,pass\n";
  bool all_pass = true;
  for (const auto& r : results) {
    report << r.name << "," << format_double(r.max_rel_err) << "," << format_double(r.threshold)
           << "," << (r.pass() ? 1 : 0) << "\n";
    std::cout << (r.pass() ? "pass" : "FAIL") << "  " << r.name
              << "  max_rel_err=" << r.max_rel_err << "\n";
    all_pass = all_pass && r.pass();
  }
  const std::string path = ws.cfg.output_dir + "/gradcheck.csv";
  write_text_file(path, report.str());
  man.add(path);
  man.write(ws.cfg.output_dir);
  return all_pass ? kExitOk : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-generator inset composition via latent optimization"};
  app.require_subcommand(1);

  std::string config_path, out_override, seeds_override, trunc_override, mode_override;
  app.add_option("--config", config_path, "job config file (JSON)");
  app.add_option("--out", out_override, "output directory override");
  app.add_option("--seeds", seeds_override, "seed list/range override, e.g. 0..9 or 1,5,7");
  app.add_option("--trunc", trunc_override, "truncation override: none | scalar:T | adaptive");
  app.add_option("--mode", mode_override, "objective mode override (joint command)");

  CLI::App* c_sample = app.add_subcommand("sample", "render truncated generator samples");
  CLI::App* c_refine = app.add_subcommand("refine", "one-way inset refinement batch");
  CLI::App* c_joint = app.add_subcommand("joint", "alternating joint optimization batch");
  CLI::App* c_montage = app.add_subcommand("montage", "joint optimization in montage mode");
  CLI::App* c_walk = app.add_subcommand("walk", "keyframe interpolation with re-optimization");
  CLI::App* c_eval = app.add_subcommand("eval", "distribution metrics between two sample sets");
  CLI::App* c_gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");

  CLI11_PARSE(app, argc, argv);

  try {
    JobConfig cfg = config_path.empty() ? JobConfig{} : load_config(config_path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (!seeds_override.empty()) cfg.seeds = parse_seed_range(seeds_override);
    if (!mode_override.empty()) cfg.mode = mode_override;
    if (!trunc_override.empty()) {
      if (trunc_override.rfind("scalar:", 0) == 0) {
        cfg.truncation.mode = "scalar";
        cfg.truncation.t = std::stod(trunc_override.substr(7));
      } else {
        cfg.truncation.mode = trunc_override;
      }
    }
    validate_config(cfg);
    const Workspace ws = build_workspace(std::move(cfg));

    if (c_sample->parsed()) return cmd_sample(ws);
    if (c_refine->parsed()) return cmd_refine(ws);
    if (c_joint->parsed()) return cmd_joint(ws, "");
    if (c_montage->parsed()) return cmd_joint(ws, "montage");
    if (c_walk->parsed()) return cmd_walk(ws);
    if (c_eval->parsed()) return cmd_eval(ws);
    if (c_gradcheck->parsed()) return cmd_gradcheck(ws);
    return kExitValidation;
  } catch (const OptimizationAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAborted;
  } catch (const NoInsetRegion& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAborted;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
