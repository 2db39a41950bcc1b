#include "gausscount/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <iterator>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gausscount/bench.hpp"
#include "gausscount/experiments.hpp"
#include "gausscount/io.hpp"
#include "gausscount/net.hpp"

namespace gausscount {

namespace {

using nlohmann::ordered_json;

// ============================================================================
// Default configs
// ============================================================================

ordered_json default_data_section(double beta = 4.0) {
  return ordered_json{
      {"image_size", 64},     {"count_min", 5},
      {"count_max", 80},      {"beta", beta},
      {"blob_sigma", 1.2},    {"blob_amp_lo", 0.85},
      {"blob_amp_hi", 1.15},  {"pixel_noise", 0.03},
      {"grid_layout", false},
  };
}

ordered_json default_train_section(int epochs) {
  return ordered_json{
      {"epochs", epochs},  {"batch_size", 10}, {"lr", 1e-3},
      {"lr_decay", 0.05},  {"warmup_epochs", 0}, {"clip_norm", 0.0},
  };
}

ordered_json default_net_section() {
  return ordered_json{
      {"kind", "gaussian"},
      {"preset", "compact"},
      {"train_means", false},
  };
}

ordered_json default_config(const std::string& command) {
  if (command == "gen-data")
    return ordered_json{{"seed", 1},
                        {"out", "data"},
                        {"train_count", 200},
                        {"test_count", 50},
                        {"data", default_data_section()}};
  if (command == "train")
    return ordered_json{{"seed", 1},
                        {"out", "run"},
                        {"train_size", 120},
                        {"data", default_data_section()},
                        {"net", default_net_section()},
                        {"train", default_train_section(25)}};
  if (command == "eval")
    return ordered_json{{"seed", 1},
                        {"out", "eval"},
                        {"model", "run/model.json"},
                        {"test_size", 50},
                        {"data", default_data_section()}};
  if (command == "bench")
    return ordered_json{{"seed", 42},      {"out", "bench"},
                        {"image_size", 64}, {"in_channels", 4},
                        {"out_channels", 4}, {"n_vanilla", 256},
                        {"k", 16},          {"grid_radius", 4},
                        {"repetitions", 5}, {"warmup", 2}};
  if (command == "study-variance")
    return ordered_json{{"seed", 99},
                        {"out", "variance"},
                        {"replicas", 5},
                        {"train_size", 64},
                        {"test_size", 24},
                        {"region_box", 16},
                        {"label_noise_radius", 2.0},
                        {"data", default_data_section(9.0)},
                        {"train", default_train_section(12)}};
  if (command == "study-noise")
    return ordered_json{{"seed", 7},
                        {"out", "noise"},
                        {"radii", ordered_json::array({0.0, 1.0, 2.0, 4.0, 8.0})},
                        {"seeds", 3},
                        {"train_size", 64},
                        {"test_size", 24},
                        {"data", default_data_section(9.0)},
                        {"train", default_train_section(30)}};
  if (command == "viz-filters")
    return ordered_json{{"out", "filters"},
                        {"model", "run/model.json"},
                        {"upsample", 8}};
  throw ConfigError("unknown command: " + command);
}

// ============================================================================
// Config plumbing
// ============================================================================

ordered_json deep_merge(ordered_json base, const ordered_json& overlay) {
  if (!base.is_object() || !overlay.is_object()) return overlay;
  for (const auto& [key, value] : overlay.items())
    base[key] = base.contains(key) ? deep_merge(base[key], value) : value;
  return base;
}

void check_known_keys(const ordered_json& defaults, const ordered_json& merged,
                      const std::string& prefix) {
  for (const auto& [key, value] : merged.items()) {
    if (!defaults.contains(key))
      throw ConfigError("unknown config key: " + prefix + key);
    if (value.is_object() && defaults.at(key).is_object())
      check_known_keys(defaults.at(key), value, prefix + key + ".");
  }
}

void apply_set(ordered_json& config, const std::string& expr) {
  const std::size_t eq = expr.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got: " + expr);
  const std::string path = expr.substr(0, eq);
  const std::string raw = expr.substr(eq + 1);
  ordered_json value;
  try {
    value = ordered_json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // unquoted strings are taken verbatim
  }
  ordered_json* node = &config;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(
        start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key segment in --set " + expr);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

SyntheticConfig synthetic_from(const ordered_json& j) {
  SyntheticConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.count_min = j.at("count_min").get<int>();
  c.count_max = j.at("count_max").get<int>();
  c.beta = j.at("beta").get<double>();
  c.blob_sigma = j.at("blob_sigma").get<double>();
  c.blob_amp_lo = j.at("blob_amp_lo").get<double>();
  c.blob_amp_hi = j.at("blob_amp_hi").get<double>();
  c.pixel_noise = j.at("pixel_noise").get<double>();
  c.grid_layout = j.at("grid_layout").get<bool>();
  return c;
}

TrainConfig train_from(const ordered_json& j, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.seed = seed;
  return c;
}

ConvKind kind_from(const std::string& name) {
  if (name == "gaussian") return ConvKind::gaussian;
  if (name == "standard") return ConvKind::standard;
  throw ConfigError("unknown layer kind: " + name);
}

NetworkConfig net_from(const ordered_json& j, std::uint64_t seed) {
  const ConvKind kind = kind_from(j.at("kind").get<std::string>());
  const std::string preset = j.at("preset").get<std::string>();
  NetworkConfig net;
  if (preset == "compact")
    net = compact_network_config(kind, seed);
  else if (preset == "default")
    net = default_network_config(kind, seed);
  else
    throw ConfigError("unknown net preset: " + preset);
  net.train_means = j.at("train_means").get<bool>();
  return net;
}

// ============================================================================
// Artifacts and manifests
// ============================================================================

std::string hash_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(value));
  return buf;
}

struct ArtifactList {
  std::string root;
  ordered_json outputs = ordered_json::array();

  void add(const std::string& rel, const std::vector<std::uint8_t>& bytes) {
    write_file(root + "/" + rel, bytes);
    outputs.push_back(ordered_json{{"path", rel},
                                   {"bytes", bytes.size()},
                                   {"fnv1a64", hash_hex(fnv1a64(bytes))}});
  }
  void add(const std::string& rel, const std::string& text) {
    add(rel, std::vector<std::uint8_t>(text.begin(), text.end()));
  }
};

std::string utc_timestamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const std::string& command, const ordered_json& config,
                    const ArtifactList& artifacts, const std::string& error) {
  ordered_json m;
  m["command"] = command;
  m["created_utc"] = utc_timestamp();
  m["config"] = config;
  if (!error.empty()) m["error"] = error;
  m["outputs"] = artifacts.outputs;
  write_file(artifacts.root + "/manifest.json", m.dump(2) + "\n");
}

// Success requires every declared artifact to still be on disk with the
// recorded size and hash.
void verify_outputs(const ArtifactList& artifacts) {
  for (const auto& entry : artifacts.outputs) {
    const std::string rel = entry.at("path").get<std::string>();
    const std::vector<std::uint8_t> bytes =
        read_file(artifacts.root + "/" + rel);
    if (bytes.size() != entry.at("bytes").get<std::size_t>() ||
        hash_hex(fnv1a64(bytes)) != entry.at("fnv1a64").get<std::string>())
      throw IoError("artifact failed verification: " + rel);
  }
}

// ============================================================================
// Subcommands
// ============================================================================

PgmImage render_preview(const FeatureMap& image) {
  // Fixed [0, 2] -> [0, 255] mapping keeps previews byte-stable across runs.
  PgmImage out;
  out.width = image.width;
  out.height = image.height;
  out.pixels.resize(image.plane_size());
  for (std::size_t p = 0; p < image.plane_size(); ++p) {
    const double v = std::clamp(image.values[p], 0.0, 2.0) * 0.5 * 255.0;
    out.pixels[p] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

std::string image_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%03d", index);
  return buf;
}

void write_split(ArtifactList& artifacts, const std::string& split,
                 const Dataset& data) {
  AnnotationGroups groups;
  for (std::size_t i = 0; i < data.size(); ++i)
    groups.push_back({image_id(static_cast<int>(i)), data[i].ann.points});
  artifacts.add(split + "/annotations.csv", annotations_to_csv(groups));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string id = image_id(static_cast<int>(i));
    artifacts.add(split + "/" + id + ".dmap",
                  dmap_encode(density_from_feature(data[i].image)));
    artifacts.add(split + "/" + id + "_target.dmap",
                  dmap_encode(data[i].target));
    artifacts.add(split + "/" + id + ".pgm",
                  pgm_encode(render_preview(data[i].image)));
  }
}

void cmd_gen_data(const ordered_json& config, ArtifactList& artifacts) {
  const SyntheticConfig sc = synthetic_from(config.at("data"));
  const std::uint64_t seed = config.at("seed").get<std::uint64_t>();
  write_split(artifacts, "train",
              make_synthetic_dataset(sc, config.at("train_count").get<int>(),
                                     split_seed(seed, 1)));
  write_split(artifacts, "test",
              make_synthetic_dataset(sc, config.at("test_count").get<int>(),
                                     split_seed(seed, 2)));
}

void cmd_train(const ordered_json& config, ArtifactList& artifacts) {
  const std::uint64_t seed = config.at("seed").get<std::uint64_t>();
  const SyntheticConfig sc = synthetic_from(config.at("data"));
  const Dataset data = make_synthetic_dataset(
      sc, config.at("train_size").get<int>(), split_seed(seed, 1));
  Model model = build_model(net_from(config.at("net"), split_seed(seed, 2)));
  const TrainConfig tc = train_from(config.at("train"), split_seed(seed, 3));
  const TrainReport report = train(model, data, tc);

  artifacts.add("model.json", model_to_json(model));
  ordered_json r;
  r["epochs"] = tc.epochs;
  r["epoch_median_loss"] = report.epoch_median_loss;
  r["epoch_mean_loss"] = report.epoch_mean_loss;
  r["final_train_mae"] = report.final_train_mae;
  r["final_train_mse"] = report.final_train_mse;
  r["parameter_count"] = parameter_count(model);
  artifacts.add("train_report.json", r.dump(2) + "\n");
}

void cmd_eval(const ordered_json& config, ArtifactList& artifacts) {
  const std::uint64_t seed = config.at("seed").get<std::uint64_t>();
  const Model model =
      model_from_json(read_text_file(config.at("model").get<std::string>()));
  const SyntheticConfig sc = synthetic_from(config.at("data"));
  const Dataset data = make_synthetic_dataset(
      sc, config.at("test_size").get<int>(), split_seed(seed, 1));
  const EvalResult result = evaluate(model, data);

  ordered_json r;
  r["mae"] = result.mae;
  r["mse"] = result.mse;
  r["samples"] = result.samples;
  artifacts.add("eval.json", r.dump(2) + "\n");

  std::string csv = "image_id,gt_count,predicted_count\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    csv += image_id(static_cast<int>(i));
    csv += ',' + std::to_string(data[i].ann.points.size());
    csv += ',' + format_sig9(predict_count(model, data[i].image));
    csv += '\n';
  }
  artifacts.add("predictions.csv", csv);
}

void cmd_bench(const ordered_json& config, ArtifactList& artifacts) {
  BenchConfig bc;
  bc.image_size = config.at("image_size").get<int>();
  bc.in_channels = config.at("in_channels").get<int>();
  bc.out_channels = config.at("out_channels").get<int>();
  bc.n_vanilla = config.at("n_vanilla").get<int>();
  bc.k = config.at("k").get<int>();
  bc.grid_radius = config.at("grid_radius").get<int>();
  bc.repetitions = config.at("repetitions").get<int>();
  bc.warmup = config.at("warmup").get<int>();
  bc.seed = config.at("seed").get<std::uint64_t>();
  const BenchReport report = run_bench(bc);
  artifacts.add("bench.json", bench_report_to_json(report) + "\n");
  artifacts.add("bench.csv", bench_report_to_csv(report));
}

void cmd_study_variance(const ordered_json& config, ArtifactList& artifacts) {
  VarianceStudyConfig vc;
  vc.replicas = config.at("replicas").get<int>();
  vc.train_size = config.at("train_size").get<int>();
  vc.test_size = config.at("test_size").get<int>();
  vc.region_box = config.at("region_box").get<int>();
  vc.label_noise_radius = config.at("label_noise_radius").get<double>();
  vc.data = synthetic_from(config.at("data"));
  vc.train = train_from(config.at("train"), 0);
  vc.seed = config.at("seed").get<std::uint64_t>();
  const VarianceStudy study = run_variance_study(vc);
  artifacts.add("variance.json", variance_study_to_json(study) + "\n");
  artifacts.add("variance.csv", variance_study_to_csv(study));
}

void cmd_study_noise(const ordered_json& config, ArtifactList& artifacts) {
  RobustnessStudyConfig rc;
  rc.radii = config.at("radii").get<std::vector<double>>();
  rc.seeds = config.at("seeds").get<int>();
  rc.train_size = config.at("train_size").get<int>();
  rc.test_size = config.at("test_size").get<int>();
  rc.data = synthetic_from(config.at("data"));
  rc.train = train_from(config.at("train"), 0);
  rc.seed = config.at("seed").get<std::uint64_t>();
  const RobustnessStudy study = run_robustness_study(rc);
  artifacts.add("robustness.json", robustness_study_to_json(study) + "\n");
  artifacts.add("robustness.csv", robustness_study_to_csv(study));
}

void cmd_viz_filters(const ordered_json& config, ArtifactList& artifacts) {
  const Model model =
      model_from_json(read_text_file(config.at("model").get<std::string>()));
  const std::vector<FilterImage> images = export_effective_filters(
      model, config.at("upsample").get<int>());
  for (const FilterImage& filter : images)
    artifacts.add("filters/" + filter.name + ".pgm",
                  pgm_encode(filter.image));
}

int run_command(const std::string& name, const ordered_json& config) {
  const std::string out = config.at("out").get<std::string>();
  if (out.empty()) throw ConfigError("output directory must not be empty");
  ArtifactList artifacts{out};
  try {
    if (name == "gen-data")
      cmd_gen_data(config, artifacts);
    else if (name == "train")
      cmd_train(config, artifacts);
    else if (name == "eval")
      cmd_eval(config, artifacts);
    else if (name == "bench")
      cmd_bench(config, artifacts);
    else if (name == "study-variance")
      cmd_study_variance(config, artifacts);
    else if (name == "study-noise")
      cmd_study_noise(config, artifacts);
    else if (name == "viz-filters")
      cmd_viz_filters(config, artifacts);
    else
      throw ConfigError("unknown command: " + name);
    verify_outputs(artifacts);
  } catch (const std::exception& e) {
    // Best effort: record what was produced before the failure.
    try {
      write_manifest(name, config, artifacts, e.what());
    } catch (...) {
    }
    throw;
  }
  write_manifest(name, config, artifacts, "");
  return 0;
}

}  // namespace

std::string default_config_json(const std::string& command) {
  return default_config(command).dump(2);
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Low-rank Gaussian convolution toolkit for object counting"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::vector<std::string> overrides;
  bool print_config = false;

  static const char* kCommands[] = {"gen-data",       "train",
                                    "eval",           "bench",
                                    "study-variance", "study-noise",
                                    "viz-filters"};
  static const char* kDescriptions[] = {
      "synthesize an annotated dot dataset",
      "train a counting network on synthetic data",
      "evaluate a checkpoint on synthetic data",
      "time the three convolution routes",
      "across-replica variance of predicted counts",
      "training-label displacement robustness sweep",
      "render the fused Gaussian filters of a checkpoint"};

  for (std::size_t i = 0; i < std::size(kCommands); ++i) {
    CLI::App* sub = app.add_subcommand(kCommands[i], kDescriptions[i]);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--out", out_override, "output directory override");
    sub->add_option("--set", overrides,
                    "dotted config override, e.g. --set train.epochs=3");
    sub->add_flag("--print-config", print_config,
                  "print the resolved config and exit");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Fold CLI11's parse-error codes into the documented usage-error code;
    // --help and --version still exit 0.
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const ordered_json defaults = default_config(command);
    ordered_json config = defaults;
    if (!config_path.empty()) {
      ordered_json file_config;
      try {
        file_config = ordered_json::parse(read_text_file(config_path));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config file is not valid JSON: ") +
                          e.what());
      }
      config = deep_merge(config, file_config);
    }
    for (const std::string& expr : overrides) apply_set(config, expr);
    if (!out_override.empty()) config["out"] = out_override;
    check_known_keys(defaults, config, "");

    if (print_config) {
      std::printf("%s\n", config.dump(2).c_str());
      return 0;
    }
    return run_command(command, config);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}

}  // namespace gausscount
