#include "calseg/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "calseg/errors.hpp"
#include "calseg/features.hpp"
#include "calseg/groundtruth.hpp"
#include "calseg/inference.hpp"
#include "calseg/metrics.hpp"
#include "calseg/rng.hpp"
#include "calseg/synthgen.hpp"
#include "calseg/training.hpp"

namespace calseg {

namespace {

// Seed streams derived from the train command's --seed.
constexpr std::uint64_t kSplitStream = 0x5011;
constexpr std::uint64_t kHalfStream = 0x4a1f;
constexpr std::uint64_t kInitStream = 0x1417;

std::string numbered(const char* prefix, std::uint64_t id, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04llu%s", prefix, static_cast<unsigned long long>(id), ext);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_json(const fs::path& path, const Json& j) {
  const std::string text = j.dump(2) + "\n";
  write_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
}

// Reads only the JSON header of a CSF4 file; nullopt if it is not one.
std::optional<Json> peek_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  unsigned char len_bytes[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "CSF4") return std::nullopt;
  if (!in.read(reinterpret_cast<char*>(len_bytes), 4)) return std::nullopt;
  const std::uint32_t len = len_bytes[0] | (len_bytes[1] << 8) | (len_bytes[2] << 16) |
                            (static_cast<std::uint32_t>(len_bytes[3]) << 24);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) return std::nullopt;
  Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

// block_id -> file, for every CSF4 file in `dir` whose header kind matches.
std::map<std::uint64_t, fs::path> scan(const fs::path& dir, const std::string& kind) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csf4") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::map<std::uint64_t, fs::path> out;
  for (const auto& f : files) {
    auto header = peek_header(f);
    if (!header || header->value("kind", "") != kind) continue;
    const auto id = header->value("block_id", std::uint64_t{0});
    if (!out.emplace(id, f).second)
      throw FormatError(dir.string() + ": two " + kind + " files for block " + std::to_string(id));
  }
  return out;
}

std::vector<std::uint64_t> keys(const std::map<std::uint64_t, fs::path>& m) {
  std::vector<std::uint64_t> out;
  for (const auto& [k, v] : m) out.push_back(k);
  return out;
}

Json metrics_json(const MetricReport& r) {
  return {{"dice", r.dice}, {"accuracy", r.accuracy}, {"sensitivity", r.sensitivity}, {"mcc", r.mcc}};
}

double mean_of(std::span<const float> values) {
  double s = 0;
  for (float v : values) s += v;
  return values.empty() ? 0.0 : s / static_cast<double>(values.size());
}

template <typename F>
int guarded(std::ostream& err, const char* name, F&& body) {
  try {
    body();
    return kExitOk;
  } catch (const std::exception& e) {
    err << "calseg " << name << ": error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

PipelineConfig config_or_default(const std::optional<fs::path>& path) {
  return path ? load_pipeline_config(*path) : PipelineConfig{};
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const PlacementError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e))
    return kExitUsage;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e))
    return kExitIo;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

int cmd_simulate(const SimulateArgs& args, std::ostream& err) {
  return guarded(err, "simulate", [&] {
    const PipelineConfig cfg = config_or_default(args.config);
    if (args.blocks < 1) throw ConfigError("--blocks must be >= 1");
    const auto dataset = generate_dataset(cfg.sim, args.blocks, args.seed);
    ensure_dir(args.out);

    Json entries = Json::array();
    for (const auto& sb : dataset) {
      const auto id = sb.block.block_id();
      const auto block_file = numbered("block", id, ".csf4");
      const auto truth_file = numbered("truth", id, ".csf4");
      save_block(sb.block, args.out / block_file);
      save_mask(sb.truth_mask, id, args.out / truth_file);
      Json centers = Json::array();
      for (const auto& [r, c] : sb.neuron_centers) centers.push_back({r, c});
      entries.push_back({{"block_id", id},
                         {"block", block_file},
                         {"truth", truth_file},
                         {"n_neurons", sb.neuron_centers.size()},
                         {"centers", centers}});
    }
    Json manifest;
    manifest["command"] = "simulate";
    manifest["seed"] = args.seed;
    manifest["n_blocks"] = args.blocks;
    manifest["sim"] = to_json(cfg.sim);
    manifest["blocks"] = std::move(entries);
    write_json(args.out / "manifest.json", manifest);
  });
}

int cmd_features(const fs::path& in, const fs::path& out, std::ostream& err) {
  return guarded(err, "features", [&] {
    const auto blocks = scan(in, "block");
    if (blocks.empty()) throw IoError("no block files in " + in.string());
    ensure_dir(out);
    for (const auto& [id, path] : blocks) {
      const FeatureStack stack = build_feature_stack(load_block(path));
      save_feature_stack(stack, out / numbered("features", id, ".csf4"));
    }
  });
}

int cmd_make_gt(const fs::path& in, const fs::path& out, std::ostream& err) {
  return guarded(err, "make-gt", [&] {
    const auto blocks = scan(in, "block");
    if (blocks.empty()) throw IoError("no block files in " + in.string());
    ensure_dir(out);
    Json written = Json::array(), skipped = Json::array();
    for (const auto& [id, path] : blocks) {
      const Block block = load_block(path);
      try {
        const OtsuResult otsu = otsu_threshold(variance_map(block));
        save_mask(make_groundtruth(block), id, out / numbered("gt", id, ".csf4"));
        written.push_back({{"block_id", id}, {"threshold", otsu.threshold}, {"threshold_index", otsu.threshold_index}});
      } catch (const DegenerateInputError& e) {
        err << "calseg make-gt: warning: skipping block " << id << ": " << e.what() << "\n";
        skipped.push_back({{"block_id", id}, {"reason", e.what()}});
      }
    }
    write_json(out / "manifest.json", {{"command", "make-gt"}, {"masks", written}, {"skipped", skipped}});
  });
}

int cmd_train(const TrainArgs& args, std::ostream& err) {
  return guarded(err, "train", [&] {
    if (!args.half.empty() && args.half != "first" && args.half != "second")
      throw ConfigError("--half must be 'first' or 'second'");
    const PipelineConfig cfg = config_or_default(args.config);
    Hyperparams hp = cfg.train;
    hp.seed = args.seed;
    hp.validate();
    cfg.net.validate();

    const auto features = scan(args.features, "features");
    const auto labels = scan(args.labels, "mask");
    std::vector<std::uint64_t> ids;
    for (const auto& [id, path] : features) {
      if (labels.count(id))
        ids.push_back(id);
      else
        err << "calseg train: warning: block " << id << " has no label, skipped\n";
    }
    if (ids.empty()) throw ConfigError("no block has both features and a label");

    const SplitIndices split = split_indices(ids.size(), hp.train_fraction, split_seed(args.seed, kSplitStream));
    std::vector<std::size_t> chosen = split.train;
    if (!args.half.empty()) {
      const SplitIndices halves = split_indices(chosen.size(), 0.5, split_seed(args.seed, kHalfStream));
      std::vector<std::size_t> part;
      for (auto i : args.half == "first" ? halves.train : halves.test) part.push_back(chosen[i]);
      chosen = std::move(part);
    }
    std::sort(chosen.begin(), chosen.end());
    if (chosen.empty()) throw ConfigError("training split is empty");

    std::vector<Sample> dataset;
    Json train_ids = Json::array(), test_ids = Json::array();
    for (auto i : chosen) {
      Sample s{load_feature_stack(features.at(ids[i])), load_mask(labels.at(ids[i]))};
      if (s.label.height() != s.features.channels.height() || s.label.width() != s.features.channels.width())
        throw ShapeError("label and features differ in shape for block " + std::to_string(ids[i]));
      dataset.push_back(std::move(s));
      train_ids.push_back(ids[i]);
    }
    std::vector<std::uint64_t> test_sorted;
    for (auto i : split.test) test_sorted.push_back(ids[i]);
    std::sort(test_sorted.begin(), test_sorted.end());
    for (auto id : test_sorted) test_ids.push_back(id);

    const BUNet initial = init_params<float>(cfg.net, split_seed(args.seed, kInitStream));
    err << "calseg train: " << dataset.size() << " blocks, " << hp.epochs << " epochs\n";
    TrainResult result = train(initial, dataset, hp, [&](std::size_t epoch, const EpochStats& s) {
      err << "epoch " << epoch + 1 << "/" << hp.epochs << " loss " << s.total << " ce " << s.ce << " dice "
          << s.dice << " kld " << s.kld << "\n";
    });

    Json meta;
    meta["seed"] = args.seed;
    meta["half"] = args.half.empty() ? Json(nullptr) : Json(args.half);
    meta["hyperparams"] = to_json(hp);
    meta["train_ids"] = train_ids;
    meta["optimizer_steps"] = result.history.optimizer_steps;
    if (args.out.has_parent_path()) ensure_dir(args.out.parent_path());
    save_checkpoint(result.net, args.out, meta);

    const std::string history = history_jsonl(result.history);
    write_bytes(args.out.string() + ".history.jsonl",
                {reinterpret_cast<const std::uint8_t*>(history.data()), history.size()});
    write_json(args.out.string() + ".split.json", {{"seed", args.seed},
                                                   {"train_fraction", hp.train_fraction},
                                                   {"half", meta["half"]},
                                                   {"train", train_ids},
                                                   {"test", test_ids}});
  });
}

int cmd_predict(const PredictArgs& args, std::ostream& err) {
  return guarded(err, "predict", [&] {
    if (args.samples < 1) throw ConfigError("--samples must be >= 1");
    if (!(args.threshold >= 0.0 && args.threshold <= 1.0)) throw ConfigError("--threshold must be in [0, 1]");
    const BUNet net = load_checkpoint(args.ckpt);
    auto features = scan(args.features, "features");

    if (args.split) {
      const Json split = read_json(*args.split);
      if (!split.contains("test") || !split["test"].is_array()) throw FormatError("split file has no test list");
      std::set<std::uint64_t> wanted;
      for (const auto& v : split["test"]) wanted.insert(v.get<std::uint64_t>());
      for (auto id : wanted)
        if (!features.count(id)) throw ConfigError("split lists block " + std::to_string(id) + " without features");
      std::erase_if(features, [&](const auto& kv) { return !wanted.count(kv.first); });
    }
    if (features.empty()) throw ConfigError("no feature stacks to predict");
    ensure_dir(args.out);

    for (const auto& [id, path] : features) {
      const FeatureStack x = load_feature_stack(path);
      const InferenceResult r = mc_ensemble(net, x, args.samples, args.seed);
      for (float v : r.probability.values())
        if (!std::isfinite(v)) throw NumericError("non-finite probability for block " + std::to_string(id));
      const MaskMap mask = binarize(r.probability, args.threshold);
      save_map(r.probability, id, args.out / numbered("prob", id, ".csf4"), "probability");
      save_map(r.uncertainty, id, args.out / numbered("uncert", id, ".csf4"), "uncertainty");
      save_mask(mask, id, args.out / numbered("mask", id, ".csf4"));

      Json side = inference_sidecar(r, args.threshold);
      side["block_id"] = id;
      side["foreground_pixels"] = mask.count();
      side["mean_probability"] = mean_of(r.probability.values());
      side["mean_uncertainty"] = mean_of(r.uncertainty.values());
      write_json(args.out / numbered("pred", id, ".json"), side);
    }
  });
}

int cmd_evaluate(const fs::path& pred, const fs::path& truth, const fs::path& report, std::ostream& err) {
  return guarded(err, "evaluate", [&] {
    const auto preds = scan(pred, "mask");
    const auto truths = scan(truth, "mask");
    const auto uncerts = scan(pred, "uncertainty");
    if (preds.empty()) throw ConfigError("no prediction masks in " + pred.string());
    for (const auto& [id, path] : preds)
      if (!truths.count(id)) throw ConfigError("no truth mask for predicted block " + std::to_string(id));

    std::vector<MetricReport> per_block;
    std::vector<std::pair<double, double>> points;
    const bool have_uncert = std::all_of(preds.begin(), preds.end(), [&](const auto& kv) {
      return uncerts.count(kv.first) > 0;
    });
    Json blocks = Json::array();
    for (const auto& [id, path] : preds) {
      const MetricReport r = evaluate(load_mask(path), load_mask(truths.at(id)));
      per_block.push_back(r);
      Json b{{"block_id", id}};
      b.update(metrics_json(r));
      b["confusion"] = to_json(r.confusion);
      if (have_uncert) {
        const double mu = mean_of(load_map(uncerts.at(id)).values());
        b["mean_uncertainty"] = mu;
        points.emplace_back(r.dice, mu);
      }
      blocks.push_back(std::move(b));
    }

    Json out;
    out["command"] = "evaluate";
    out["n_blocks"] = per_block.size();
    out["mean"] = metrics_json(aggregate(per_block, Aggregation::kMeanOfBlocks));
    const MetricReport pooled = aggregate(per_block, Aggregation::kPooledCounts);
    out["pooled"] = metrics_json(pooled);
    out["pooled"]["confusion"] = to_json(pooled.confusion);
    out["dice_uncertainty_correlation"] =
        points.size() >= 2 ? Json(dice_uncertainty_correlation(points)) : Json(nullptr);
    out["blocks"] = std::move(blocks);
    if (report.has_parent_path()) ensure_dir(report.parent_path());
    write_json(report, out);
  });
}

int cmd_repro(const fs::path& run1, const fs::path& run2, const fs::path& report, std::ostream& err) {
  return guarded(err, "repro", [&] {
    const auto a = scan(run1, "mask");
    const auto b = scan(run2, "mask");
    if (a.empty()) throw ConfigError("no masks in " + run1.string());
    if (keys(a) != keys(b)) throw ConfigError("run directories hold different block sets");

    std::vector<MaskMap> m1, m2;
    Json blocks = Json::array();
    for (const auto& [id, path] : a) {
      m1.push_back(load_mask(path));
      m2.push_back(load_mask(b.at(id)));
      Json entry{{"block_id", id}};
      entry.update(metrics_json(evaluate(m2.back(), m1.back())));
      blocks.push_back(entry);
    }
    Json out;
    out["command"] = "repro";
    out["n_blocks"] = m1.size();
    out["reference"] = "run1";
    out["mean"] = metrics_json(reproducibility_report(m1, m2, Aggregation::kMeanOfBlocks));
    out["pooled"] = metrics_json(reproducibility_report(m1, m2, Aggregation::kPooledCounts));
    out["blocks"] = std::move(blocks);
    if (report.has_parent_path()) ensure_dir(report.parent_path());
    write_json(report, out);
  });
}

MaskMap mask_contour(const MaskMap& mask) {
  const std::size_t H = mask.height(), W = mask.width();
  MaskMap out(H, W);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      if (!mask(h, w)) continue;
      const bool edge = h == 0 || w == 0 || h + 1 == H || w + 1 == W;
      out(h, w) = edge || !mask(h - 1, w) || !mask(h + 1, w) || !mask(h, w - 1) || !mask(h, w + 1);
    }
  return out;
}

PngImage render_overlay(const ImageMap& background, const MaskMap& truth, const MaskMap& pred) {
  const std::size_t H = background.height(), W = background.width();
  if (truth.height() != H || truth.width() != W || pred.height() != H || pred.width() != W)
    throw ShapeError("overlay inputs differ in shape");
  const auto [lo_it, hi_it] = std::minmax_element(background.values().begin(), background.values().end());
  const bool empty = background.size() == 0;
  const double lo = empty ? 0.0 : *lo_it;
  const double hi = !empty && *hi_it > *lo_it ? *hi_it : lo + 1.0;
  const MaskMap ct = mask_contour(truth), cp = mask_contour(pred);

  PngImage img;
  img.width = W;
  img.height = H;
  img.channels = 3;
  img.bit_depth = 16;
  img.samples.reserve(H * W * 3);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      const std::uint16_t g = window_to_u16(background(h, w), lo, hi);
      if (ct(h, w) || cp(h, w)) {
        img.samples.push_back(ct(h, w) ? 65535 : 0);
        img.samples.push_back(cp(h, w) ? 65535 : 0);
        img.samples.push_back(0);
      } else {
        img.samples.insert(img.samples.end(), {g, g, g});
      }
    }
  return img;
}

int cmd_render(const RenderArgs& args, std::ostream& err) {
  return guarded(err, "render", [&] {
    const Block block = load_block(args.block);
    const ImageMap prob = load_map(args.prob);
    const ImageMap uncert = load_map(args.uncert);
    const MaskMap truth = load_mask(args.truth);
    const std::size_t H = block.height(), W = block.width();
    for (const auto& [h, w] : {std::pair{prob.height(), prob.width()}, std::pair{uncert.height(), uncert.width()},
                               std::pair{truth.height(), truth.width()}})
      if (h != H || w != W) throw ShapeError("render inputs differ in shape");
    ensure_dir(args.out);

    const ImageMap mean = mean_map(block);
    const auto [lo_it, hi_it] = std::minmax_element(mean.values().begin(), mean.values().end());
    const double lo = *lo_it, hi = *hi_it > *lo_it ? *hi_it : lo + 1.0;
    export_map_png(mean, args.out / "mean_frame.png", lo, hi);
    export_map_png(prob, args.out / "probability.png", 0.0, 1.0);
    // Variance of a quantity in [0, 1] never exceeds 1/4.
    export_map_png(uncert, args.out / "uncertainty.png", 0.0, 0.25);
    write_png(args.out / "overlay.png", render_overlay(mean, truth, binarize(prob, 0.5)));
  });
}

}  // namespace calseg
