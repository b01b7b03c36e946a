// rftrace command-line tool. Every command prints one JSON document (or
// writes it to --out); failures print a JSON error document and exit 2.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rftrace/rftrace.hpp"
#include "rftrace/parallel.hpp"

namespace {

using nlohmann::json;
using namespace rftrace;
namespace fs = std::filesystem;

constexpr int kExitVerifyFailed = 1;
constexpr int kExitError = 2;

class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage_error"; }
};

void emit(const json& doc, const std::string& out) {
  if (out.empty()) {
    std::cout << doc.dump(2) << '\n';
    return;
  }
  std::ofstream f(out);
  if (!f) throw FormatError("cannot write " + out);
  f << doc.dump(2) << '\n';
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw FormatError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

GraphSpec load_graph(const fs::path& p) { return parse_graph(read_text(p)); }

json load_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

Shape shape_from(const std::vector<int>& v, const Shape& fallback) {
  if (v.empty()) return fallback;
  if (v.size() != 3) throw UsageError("--input takes C,H,W");
  return {v[0], v[1], v[2]};
}

// Output rect from --rect or --click. A click is given in the input frame
// and lands on the seed node's cell through the node's stride.
struct Target {
  Rect rect;
  std::optional<Click> click;
  int stride = 1;
};

Target resolve_target(const GraphSpec& g, const ShapeMap& shapes, const std::string& node,
                      const std::vector<int>& click, const std::vector<int>& rect) {
  const Shape& out = shapes.at(node);
  if (!rect.empty()) {
    if (rect.size() != 4) throw UsageError("--rect takes T,L,B,R");
    return {{rect[0], rect[1], rect[2], rect[3]}, std::nullopt, 1};
  }
  if (click.size() != 2) throw UsageError("--click takes X,Y");
  const Click c{click[0], click[1]};
  const Shape& in = g.input_shape();
  if (c.x < 0 || c.y < 0 || c.x >= in.width || c.y >= in.height) {
    throw ValueError("click (" + std::to_string(c.x) + "," + std::to_string(c.y) + ") is outside the " +
                     std::to_string(in.width) + "x" + std::to_string(in.height) + " input");
  }
  int stride = 1;
  if (in.height % out.height == 0 && in.width % out.width == 0 && in.height / out.height == in.width / out.width) {
    stride = in.height / out.height;
  }
  if (stride == 1) {
    return {Rect::pixel(std::min(c.y, out.height - 1), std::min(c.x, out.width - 1)), c, 1};
  }
  const Location loc = click_to_location(c, stride, out.height, out.width);
  return {Rect::pixel(loc.b, loc.a), c, stride};
}

json target_json(const Target& t) {
  json j{{"out_rect", rect_json(t.rect)}, {"stride", t.stride}};
  if (t.click) j["click"] = {t.click->x, t.click->y};
  return j;
}

// ---------------------------------------------------------------------------
// gen

GraphSpec build_model(const std::string& name, const std::vector<int>& input) {
  if (name == "toy-r18-fpn") {
    PyramidConfig cfg;
    cfg.input = shape_from(input, cfg.input);
    return build_backbone(cfg);
  }
  if (name == "r50-fpn-approx") return r50_fpn_graph(shape_from(input, {3, 768, 1024}));
  if (name == "diamond") return diamond_graph(shape_from(input, {3, 16, 16}));
  if (name.rfind("chain-", 0) == 0) {
    const std::string n = name.substr(6);
    if (n.empty() || n.size() > 4 || n.find_first_not_of("0123456789") != std::string::npos || std::stoi(n) < 1) {
      throw ValueError("unknown model \"" + name + "\": chain length must be a positive integer");
    }
    return chain_graph(std::stoi(n), shape_from(input, {3, 64, 64}));
  }
  throw ValueError("unknown model \"" + name + "\" (expected toy-r18-fpn, r50-fpn-approx, chain-N or diamond)");
}

int cmd_gen(const std::string& model, std::uint64_t seed, const std::string& out, const std::vector<int>& input,
            bool no_weights) {
  const GraphSpec graph = build_model(model, input);
  fs::create_directories(out);
  std::vector<std::string> files;
  std::size_t params = 0;
  if (model == "toy-r18-fpn") {
    PyramidConfig cfg;
    cfg.input = graph.input_shape();
    const SegNet net = make_segnet(cfg, seed);
    for (const fs::path& p : save_segnet(net, out)) files.push_back(p.string());
    params = net.weights.parameter_count();
  } else {
    const fs::path gp = fs::path(out) / "graph.json";
    std::ofstream(gp) << to_json(graph).dump(1) << '\n';
    files.push_back(gp.string());
    if (!no_weights) {
      const WeightStore w = random_weights(graph, seed);
      save_weights(w, fs::path(out) / "weights.json");
      files.push_back((fs::path(out) / "weights.json").string());
      files.push_back(blob_path_for(fs::path(out) / "weights.json").string());
      params = w.parameter_count();
    }
  }
  const ShapeMap shapes = infer_shapes(graph);
  const FlopsReport flops = count_flops(graph, shapes, nullptr);
  const FlopsReport macs = count_flops(graph, shapes, nullptr, FlopConvention::kMacs);
  RunManifest m{"gen", {}, seed, {{"model", model}, {"out", out}, {"no_weights", no_weights}}};
  if (!input.empty()) m.overrides["input"] = input;
  emit({{"manifest", to_json(m)},
        {"model", model},
        {"files", files},
        {"nodes", graph.size()},
        {"input_shape", shape_json(graph.input_shape())},
        {"output", graph.output()},
        {"parameters", params},
        {"full_flops", flops.total_full},
        {"full_macs", macs.total_full}},
       "");
  return 0;
}

// ---------------------------------------------------------------------------
// trace / flops

int cmd_trace(const std::string& graph_path, const std::vector<int>& click, const std::vector<int>& rect,
              const std::string& node, const std::string& out) {
  const GraphSpec g = load_graph(graph_path);
  const ShapeMap shapes = infer_shapes(g);
  const std::string seed_node = node.empty() ? g.output() : node;
  if (!g.contains(seed_node)) throw TraceError("unknown node \"" + seed_node + "\"");
  const Target t = resolve_target(g, shapes, seed_node, click, rect);
  const TraceResult trace = backtrace(g, shapes, {{seed_node, t.rect}});
  json doc = region_report(g, shapes, trace);
  RunManifest m{"trace", {graph_path}, std::nullopt, target_json(t)};
  m.overrides["node"] = seed_node;
  doc["manifest"] = to_json(m);
  doc["target"] = target_json(t);
  emit(doc, out);
  return 0;
}

int cmd_flops(const std::string& graph_path, const std::vector<int>& click, const std::vector<int>& rect,
              const std::string& node, const std::string& convention, const std::string& out) {
  const GraphSpec g = load_graph(graph_path);
  const ShapeMap shapes = infer_shapes(g);
  const FlopConvention conv = convention == "macs" ? FlopConvention::kMacs : FlopConvention::kFlops;
  RunManifest m{"flops", {graph_path}, std::nullopt, {{"convention", convention}}};
  json doc;
  if (click.empty() && rect.empty()) {
    doc = to_json(count_flops(g, shapes, nullptr, conv));
  } else {
    const std::string seed_node = node.empty() ? g.output() : node;
    if (!g.contains(seed_node)) throw TraceError("unknown node \"" + seed_node + "\"");
    const Target t = resolve_target(g, shapes, seed_node, click, rect);
    const TraceResult trace = backtrace(g, shapes, {{seed_node, t.rect}});
    doc = to_json(count_flops(g, shapes, &trace.regions, conv));
    doc["target"] = target_json(t);
    m.overrides["target"] = target_json(t);
  }
  doc["manifest"] = to_json(m);
  emit(doc, out);
  return 0;
}

// ---------------------------------------------------------------------------
// verify

int cmd_verify(const std::string& graph_path, const std::string& weights_path, int trials, double tol,
               std::uint64_t seed, int jobs, const std::string& out) {
  const GraphSpec g = load_graph(graph_path);
  const ShapeMap shapes = infer_shapes(g);
  const WeightStore w = weights_path.empty() ? random_weights(g, seed) : load_weights(weights_path);
  w.validate_against(g);
  if (trials < 1) throw UsageError("--trials must be positive");
  const Shape out_shape = shapes.at(g.output());
  const int workers = resolve_jobs(jobs);

  std::vector<json> results(static_cast<std::size_t>(trials));
  std::vector<char> passed(static_cast<std::size_t>(trials), 0);
  parallel_for(static_cast<std::size_t>(trials), workers, [&](std::size_t i) {
    std::mt19937_64 rng(instance_seed(seed, "trial-" + std::to_string(i)));
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    const Tensor x = random_tensor(g.input_shape(), rng());
    const int top = pick(0, out_shape.height - 1);
    const int left = pick(0, out_shape.width - 1);
    const bool pixel = pick(0, 1) == 0;
    const Rect r{top, left, pixel ? top : std::min(out_shape.height - 1, top + pick(0, 7)),
                 pixel ? left : std::min(out_shape.width - 1, left + pick(0, 7))};
    const EquivalenceReport rep = verify_equivalence(g, w, x, r, static_cast<float>(tol));
    json j{{"trial", i}, {"out_rect", rect_json(r)}, {"max_abs_diff", rep.max_abs_diff}, {"pass", rep.pass}};
    if (!rep.error.empty()) j["error"] = rep.error;
    results[i] = std::move(j);
    passed[i] = rep.pass ? 1 : 0;
  });
  std::size_t ok = 0;
  for (char p : passed) ok += static_cast<std::size_t>(p);
  RunManifest m{"verify", {graph_path}, seed, {{"trials", trials}, {"tol", tol}, {"jobs", workers}}};
  if (!weights_path.empty()) m.inputs.push_back(weights_path);
  emit({{"manifest", to_json(m)},
        {"trials", results},
        {"passed", ok},
        {"failed", static_cast<std::size_t>(trials) - ok},
        {"all_pass", ok == static_cast<std::size_t>(trials)}},
       out);
  return ok == static_cast<std::size_t>(trials) ? 0 : kExitVerifyFailed;
}

// ---------------------------------------------------------------------------
// clicks / eval

int cmd_clicks(const std::string& masks, std::uint64_t seed, const std::string& out, int jobs) {
  const std::vector<InstanceEntry> index = read_mask_index(masks);
  std::vector<std::vector<ClickEntry>> per(index.size());
  parallel_for(index.size(), resolve_jobs(jobs), [&](std::size_t i) {
    const BinaryMask m = read_pgm_mask(fs::path(masks) / index[i].file);
    if (m.empty()) throw ValueError("instance \"" + index[i].id + "\" has an empty mask");
    for (const SimulatedClick& c : simulate_clicks(m, instance_seed(seed, index[i].id))) {
      per[i].push_back({index[i].id, c.band, c.click});
    }
  });
  std::vector<ClickEntry> all;
  for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
  const RunManifest m{"clicks", {masks}, seed, json::object()};
  const json doc{{"manifest", to_json(m)}, {"clicks", clicks_to_json(all)}};
  emit(doc, out);
  if (!out.empty()) {
    std::cout << json{{"manifest", to_json(m)}, {"out", out}, {"instances", index.size()}, {"clicks", all.size()}}.dump(2)
              << '\n';
  }
  return 0;
}

int cmd_eval(const std::string& preds, const std::string& gts, const std::string& clicks_path, double beta,
             const std::string& mode_name, int jobs, const std::string& out) {
  MetricsConfig cfg{beta};
  cfg.validate();
  const std::vector<InstanceEntry> index = read_mask_index(gts);
  std::map<std::string, const InstanceEntry*> by_id;
  for (const InstanceEntry& e : index) by_id[e.id] = &e;
  const std::vector<ClickEntry> clicks = clicks_from_json(load_json(clicks_path));
  if (clicks.empty()) throw ValueError("clicks file holds no clicks");

  std::map<std::string, std::shared_ptr<const BinaryMask>> gt;
  for (const ClickEntry& c : clicks) {
    if (gt.count(c.instance_id)) continue;
    auto it = by_id.find(c.instance_id);
    if (it == by_id.end()) throw ValueError("click refers to unknown instance \"" + c.instance_id + "\"");
    gt[c.instance_id] = std::make_shared<const BinaryMask>(read_pgm_mask(fs::path(gts) / it->second->file));
  }

  std::map<std::string, int> next_index;
  std::vector<int> click_index;
  for (const ClickEntry& c : clicks) click_index.push_back(next_index[c.instance_id]++);

  std::vector<ScoredRecord> scored(clicks.size());
  parallel_for(clicks.size(), resolve_jobs(jobs), [&](std::size_t i) {
    const ClickEntry& c = clicks[i];
    EvalRecord r{c.instance_id, click_index[i],
                 read_pgm_mask(fs::path(preds) / prediction_file(c.instance_id, click_index[i])), gt.at(c.instance_id),
                 by_id.at(c.instance_id)->category, c.band > 0 ? std::optional<int>(c.band) : std::nullopt};
    scored[i] = score(r);
  });

  MtaMode mode = MtaMode::kSampled;
  if (mode_name == "exhaustive") {
    mode = MtaMode::kExhaustive;
  } else if (mode_name == "auto") {
    // Exhaustive when every instance was clicked exactly once on each of its pixels.
    std::map<std::string, std::set<Click>> seen;
    std::map<std::string, std::size_t> count;
    for (const ClickEntry& c : clicks) {
      seen[c.instance_id].insert(c.click);
      ++count[c.instance_id];
    }
    bool exhaustive = true;
    for (const auto& [id, s] : seen) {
      const BinaryMask& m = *gt.at(id);
      exhaustive = exhaustive && count[id] == s.size() && s.size() == m.area() &&
                   std::all_of(s.begin(), s.end(), [&](const Click& c) { return m.contains(c); });
    }
    mode = exhaustive ? MtaMode::kExhaustive : MtaMode::kSampled;
  }

  json doc = metrics_report(scored, cfg, mode);
  doc["manifest"] = to_json(RunManifest{"eval", {preds, gts, clicks_path}, std::nullopt, {{"beta", beta}, {"mta_mode", mode_name}}});
  emit(doc, out);
  return 0;
}

// ---------------------------------------------------------------------------
// segment

int cmd_segment(const std::string& model, const std::string& image_path, const std::vector<int>& click,
                const std::string& out, const std::string& level, const std::string& diag_path) {
  if (click.size() != 2) throw UsageError("--click takes X,Y");
  const SegNet net = load_segnet(model);
  const Tensor image = read_ppm(image_path);
  SegmentOptions opt;
  if (!level.empty()) opt.level = level;
  const Click c{click[0], click[1]};
  const SegmentResult r = segment(net, image, c, opt);
  write_pgm_mask(out, r.mask);

  const std::string diag = diag_path.empty() ? fs::path(out).replace_extension(".json").string() : diag_path;
  RunManifest m{"segment", {model, image_path}, net.seed, {{"click", click}, {"out", out}}};
  if (!level.empty()) m.overrides["level"] = level;
  json doc{{"manifest", to_json(m)},
           {"click", {c.x, c.y}},
           {"mask", out},
           {"mask_area", r.mask.area()},
           {"diagnostics", to_json(r.diagnostics)}};
  emit(doc, diag);
  doc["diagnostics_file"] = diag;
  emit(doc, "");
  return 0;
}

int fail(const std::string& kind, const std::string& message) {
  std::cout << error_document(kind, message).dump(2) << '\n';
  return kExitError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Receptive-field traced inference and click-segmentation evaluation"};
  app.require_subcommand(1);

  std::string out, graph, weights, node, convention = "flops", masks, preds, gts, clicks_path, model, image, level,
                                    diagnostics, mta_mode = "auto";
  std::string model_name;
  std::vector<int> click, rect, input;
  std::uint64_t seed = 0;
  int trials = 100;
  int jobs = 0;
  double tol = 1e-4;
  double beta = kDefaultBeta;
  bool no_weights = false;

  auto* gen = app.add_subcommand("gen", "Write a model graph and seeded weights");
  gen->add_option("--model", model_name, "toy-r18-fpn | r50-fpn-approx | chain-N | diamond")->required();
  gen->add_option("--seed", seed);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--input", input, "Input shape C,H,W")->delimiter(',')->expected(3);
  gen->add_flag("--no-weights", no_weights, "Write only the graph");

  auto add_target = [&](CLI::App* sub) {
    auto* c = sub->add_option("--click", click, "X,Y in the input frame")->delimiter(',')->expected(2);
    auto* r = sub->add_option("--rect", rect, "T,L,B,R in the seed node's frame")->delimiter(',')->expected(4);
    c->excludes(r);
    sub->add_option("--node", node, "Seed node (default: graph output)");
  };

  auto* trace = app.add_subcommand("trace", "Back-trace regions and crops for an output region");
  trace->add_option("--graph", graph)->required();
  add_target(trace);
  trace->add_option("--out", out);

  auto* flops = app.add_subcommand("flops", "Count full and traced FLOPs");
  flops->add_option("--graph", graph)->required();
  add_target(flops);
  flops->add_option("--convention", convention)->check(CLI::IsMember({"flops", "macs"}));
  flops->add_option("--out", out);

  auto* verify = app.add_subcommand("verify", "Check traced against full execution on random trials");
  verify->add_option("--graph", graph)->required();
  verify->add_option("--weights", weights, "Weights manifest (default: seeded random weights)");
  verify->add_option("--trials", trials);
  verify->add_option("--tol", tol);
  verify->add_option("--seed", seed);
  verify->add_option("--jobs", jobs, "Worker threads (default: RF_TRACE_JOBS or all cores)");
  verify->add_option("--out", out);

  auto* clicks = app.add_subcommand("clicks", "Simulate 25 clicks per instance mask");
  clicks->add_option("--masks", masks)->required();
  clicks->add_option("--seed", seed);
  clicks->add_option("--out", out);
  clicks->add_option("--jobs", jobs);

  auto* eval = app.add_subcommand("eval", "Score predicted masks with mIoU-T and mTA");
  eval->add_option("--preds", preds)->required();
  eval->add_option("--gts", gts)->required();
  eval->add_option("--clicks", clicks_path)->required();
  eval->add_option("--beta", beta);
  eval->add_option("--mta-mode", mta_mode)->check(CLI::IsMember({"auto", "exhaustive", "sampled"}));
  eval->add_option("--jobs", jobs);
  eval->add_option("--out", out);

  auto* seg = app.add_subcommand("segment", "Segment one instance from a click");
  seg->add_option("--model", model, "Model bundle directory")->required();
  seg->add_option("--image", image, "8-bit PPM image")->required();
  seg->add_option("--click", click, "X,Y")->delimiter(',')->expected(2)->required();
  seg->add_option("--out", out, "Mask PGM path")->required();
  seg->add_option("--level", level, "Force a pyramid level, e.g. P4");
  seg->add_option("--diagnostics", diagnostics, "Diagnostics JSON path (default: mask path with .json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage_error", e.what());
  }

  try {
    if (*gen) return cmd_gen(model_name, seed, out, input, no_weights);
    if (*trace) {
      if (click.empty() && rect.empty()) throw UsageError("trace needs --click or --rect");
      return cmd_trace(graph, click, rect, node, out);
    }
    if (*flops) return cmd_flops(graph, click, rect, node, convention, out);
    if (*verify) return cmd_verify(graph, weights, trials, tol, seed, jobs, out);
    if (*clicks) return cmd_clicks(masks, seed, out, jobs);
    if (*eval) return cmd_eval(preds, gts, clicks_path, beta, mta_mode, jobs, out);
    if (*seg) return cmd_segment(model, image, click, out, level, diagnostics);
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("error", e.what());
  }
  return fail("usage_error", "no command");
}
