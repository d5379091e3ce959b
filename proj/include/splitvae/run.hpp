#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitvae/baselines.hpp"
#include "splitvae/datasets.hpp"
#include "splitvae/io.hpp"
#include "splitvae/metrics.hpp"
#include "splitvae/protocol.hpp"
#include "splitvae/transport.hpp"

namespace splitvae {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  TrainConfig train;  // embed_dims is filled from embed_dim and the silo map
  std::size_t embed_dim = 8;
  std::string silos = "uniform:4";
  std::string data_path;  // empty selects the synthetic generator
  SynthParams synth;      // synth.seed always follows train.seed
  std::size_t hours = 24;  // time points per node, used by diagnostics
  double train_frac = 0.8;
  std::uint64_t gen_seed = 2;
  std::size_t runs = 100;
  std::vector<std::size_t> payload_embed_dims{8, 16, 20};
  fs::path out_dir = "splitvae_out";
};

/// Flag values; every set field wins over the config file.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed, gen_seed;
  std::optional<std::size_t> epochs, batch_size, latent_dim, embed_dim, runs;
  std::optional<std::string> silos, kl_form, data_path;
  std::optional<double> lr_edge_enc, lr_edge_dec, lr_server_enc, lr_server_dec, train_frac;
  std::optional<std::string> out_dir;
  std::optional<std::vector<std::size_t>> payload_embed_dims;
};

namespace detail {

template <typename T>
T json_field(const nlohmann::json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(where + ": field '" + key + "' " + ex.what());
  }
}

template <typename T>
void read_optional(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (j.contains(key)) out = json_field<T>(j, key, where);
}

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "seed",          "gen_seed",      "epochs",        "batch_size",   "latent_dim",
      "embed_dim",     "silos",         "lr_edge_enc",   "lr_edge_dec",  "lr_server_enc",
      "lr_server_dec", "kl_form",       "train_frac",    "runs",         "out_dir",
      "data",          "synthetic",     "hours",         "edge_hidden",  "server_hidden",
      "timeout_ms",    "payload_embed_dims"};
  return keys;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace detail

inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": top level must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto& keys = detail::config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError(where + ": unknown field '" + key + "'");
    }
  }
  detail::read_optional(j, "seed", cfg.train.seed, where);
  detail::read_optional(j, "gen_seed", cfg.gen_seed, where);
  detail::read_optional(j, "epochs", cfg.train.epochs, where);
  detail::read_optional(j, "batch_size", cfg.train.batch_size, where);
  detail::read_optional(j, "latent_dim", cfg.train.latent_dim, where);
  detail::read_optional(j, "embed_dim", cfg.embed_dim, where);
  detail::read_optional(j, "silos", cfg.silos, where);
  detail::read_optional(j, "lr_edge_enc", cfg.train.lr.edge_encoder, where);
  detail::read_optional(j, "lr_edge_dec", cfg.train.lr.edge_decoder, where);
  detail::read_optional(j, "lr_server_enc", cfg.train.lr.server_encoder, where);
  detail::read_optional(j, "lr_server_dec", cfg.train.lr.server_decoder, where);
  detail::read_optional(j, "train_frac", cfg.train_frac, where);
  detail::read_optional(j, "runs", cfg.runs, where);
  detail::read_optional(j, "hours", cfg.hours, where);
  detail::read_optional(j, "edge_hidden", cfg.train.edge_hidden, where);
  detail::read_optional(j, "server_hidden", cfg.train.server_hidden, where);
  detail::read_optional(j, "payload_embed_dims", cfg.payload_embed_dims, where);
  if (j.contains("kl_form")) {
    cfg.train.kl_form = kl_form_from_string(detail::json_field<std::string>(j, "kl_form", where));
  }
  if (j.contains("timeout_ms")) {
    cfg.train.timeout =
        std::chrono::milliseconds(detail::json_field<std::int64_t>(j, "timeout_ms", where));
  }
  if (j.contains("out_dir")) cfg.out_dir = detail::json_field<std::string>(j, "out_dir", where);
  if (j.contains("data")) cfg.data_path = detail::json_field<std::string>(j, "data", where);
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    const std::string w = where + ": synthetic";
    if (!s.is_object()) throw ConfigError(w + " must be an object");
    detail::read_optional(s, "nodes", cfg.synth.nodes, w);
    detail::read_optional(s, "hours", cfg.synth.hours, w);
    detail::read_optional(s, "samples", cfg.synth.samples, w);
    detail::read_optional(s, "spatial_corr", cfg.synth.spatial_corr, w);
    detail::read_optional(s, "temporal_corr", cfg.synth.temporal_corr, w);
    detail::read_optional(s, "amplitude", cfg.synth.amplitude, w);
    detail::read_optional(s, "noise_sd", cfg.synth.noise_sd, w);
    if (!j.contains("hours")) cfg.hours = cfg.synth.hours;
  }
}

inline void apply_overrides(RunConfig& cfg, const ConfigOverrides& o) {
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.gen_seed) cfg.gen_seed = *o.gen_seed;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.latent_dim) cfg.train.latent_dim = *o.latent_dim;
  if (o.embed_dim) cfg.embed_dim = *o.embed_dim;
  if (o.runs) cfg.runs = *o.runs;
  if (o.silos) cfg.silos = *o.silos;
  if (o.kl_form) cfg.train.kl_form = kl_form_from_string(*o.kl_form);
  if (o.data_path) cfg.data_path = *o.data_path;
  if (o.lr_edge_enc) cfg.train.lr.edge_encoder = *o.lr_edge_enc;
  if (o.lr_edge_dec) cfg.train.lr.edge_decoder = *o.lr_edge_dec;
  if (o.lr_server_enc) cfg.train.lr.server_encoder = *o.lr_server_enc;
  if (o.lr_server_dec) cfg.train.lr.server_decoder = *o.lr_server_dec;
  if (o.train_frac) cfg.train_frac = *o.train_frac;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.payload_embed_dims) cfg.payload_embed_dims = *o.payload_embed_dims;
}

/// Defaults, then the config file, then flags. `SPLITVAE_OUT` replaces the
/// default output directory but not an explicit one.
inline RunConfig load_run_config(const std::optional<fs::path>& config_path,
                                 const ConfigOverrides& overrides) {
  RunConfig cfg;
  if (const char* env = std::getenv("SPLITVAE_OUT"); env && *env) cfg.out_dir = env;
  if (config_path) apply_config_json(cfg, read_json_file(*config_path), config_path->string());
  apply_overrides(cfg, overrides);
  if (cfg.train_frac <= 0.0 || cfg.train_frac >= 1.0) {
    throw ConfigError(detail::concat("--train-frac must lie in (0, 1), got ", cfg.train_frac));
  }
  if (cfg.embed_dim == 0) throw ConfigError("--embed-dim must be >= 1");
  if (cfg.runs == 0) throw ConfigError("--runs must be >= 1");
  return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.train.seed;
  j["gen_seed"] = cfg.gen_seed;
  j["epochs"] = cfg.train.epochs;
  j["batch_size"] = cfg.train.batch_size;
  j["latent_dim"] = cfg.train.latent_dim;
  j["embed_dim"] = cfg.embed_dim;
  j["silos"] = cfg.silos;
  j["lr_edge_enc"] = cfg.train.lr.edge_encoder;
  j["lr_edge_dec"] = cfg.train.lr.edge_decoder;
  j["lr_server_enc"] = cfg.train.lr.server_encoder;
  j["lr_server_dec"] = cfg.train.lr.server_decoder;
  j["kl_form"] = std::string(to_string(cfg.train.kl_form));
  j["train_frac"] = cfg.train_frac;
  j["runs"] = cfg.runs;
  j["hours"] = cfg.hours;
  j["edge_hidden"] = cfg.train.edge_hidden;
  j["server_hidden"] = cfg.train.server_hidden;
  j["timeout_ms"] = cfg.train.timeout.count();
  j["payload_embed_dims"] = cfg.payload_embed_dims;
  if (cfg.data_path.empty()) {
    j["synthetic"] = {{"nodes", cfg.synth.nodes},
                      {"hours", cfg.synth.hours},
                      {"samples", cfg.synth.samples},
                      {"spatial_corr", cfg.synth.spatial_corr},
                      {"temporal_corr", cfg.synth.temporal_corr},
                      {"amplitude", cfg.synth.amplitude},
                      {"noise_sd", cfg.synth.noise_sd}};
  } else {
    j["data"] = cfg.data_path;
  }
  return j;
}

/// Hash of everything that shapes the trained parameters.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  nlohmann::json j = config_to_json(cfg);
  j.erase("gen_seed");
  j.erase("runs");
  j.erase("payload_embed_dims");
  return fnv1a(j.dump());
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

struct PreparedData {
  std::vector<std::string> names;
  NormStats stats;     // training min-max, all features
  SiloMap silos;
  Tensor train;        // normalized
  Tensor test;         // normalized with training stats, not clamped
  Tensor test_raw;     // original units
  std::size_t hours = 24;
};

/// Load (or synthesize), shuffle once by seed, split, normalize with the
/// training statistics, and partition columns into silos.
inline PreparedData prepare_data(const RunConfig& cfg) {
  Tensor data;
  PreparedData out;
  if (cfg.data_path.empty()) {
    SynthParams p = cfg.synth;
    p.seed = cfg.train.seed;
    SynthData s = synth_generate(p);
    data = std::move(s.data);
    out.names = std::move(s.names);
  } else {
    if (!fs::exists(cfg.data_path)) throw ConfigError("--data: file not found: " + cfg.data_path);
    CsvTable t = load_csv(cfg.data_path);
    data = std::move(t.data);
    out.names = std::move(t.names);
  }
  out.hours = cfg.hours;
  if (out.hours == 0 || data.cols() % out.hours != 0) out.hours = data.cols();

  const Tensor shuffled = shuffle_rows(data, cfg.train.seed);
  auto [train_raw, test_raw] = train_test_split(shuffled, cfg.train_frac);
  if (test_raw.rows() < 2 || train_raw.rows() < 2) {
    throw DataError(detail::concat("train/test split of ", data.rows(), " rows at ", cfg.train_frac,
                                   " leaves too few rows"));
  }
  auto [train_n, stats] = normalize(train_raw);
  auto [test_n, unused] = normalize(test_raw, stats);
  out.stats = std::move(stats);
  out.train = std::move(train_n);
  out.test = std::move(test_n);
  out.test_raw = std::move(test_raw);
  out.silos = partition_silos(data.cols(), cfg.silos);
  return out;
}

inline TrainConfig resolved_train_config(const RunConfig& cfg, const SiloMap& silos) {
  TrainConfig t = cfg.train;
  t.embed_dims.assign(silos.edges(), cfg.embed_dim);
  return t;
}

inline NormStats slice_stats(const NormStats& s, const SiloMap& map, std::size_t silo) {
  const std::size_t off = map.offset(silo), d = map.dims[silo];
  return NormStats{std::vector<double>(s.min.begin() + static_cast<std::ptrdiff_t>(off),
                                       s.min.begin() + static_cast<std::ptrdiff_t>(off + d)),
                   std::vector<double>(s.max.begin() + static_cast<std::ptrdiff_t>(off),
                                       s.max.begin() + static_cast<std::ptrdiff_t>(off + d))};
}

inline std::vector<std::string> slice_names(const std::vector<std::string>& names,
                                            const SiloMap& map, std::size_t silo) {
  const auto first = names.begin() + static_cast<std::ptrdiff_t>(map.offset(silo));
  return {first, first + static_cast<std::ptrdiff_t>(map.dims[silo])};
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainedRun {
  RunConfig config;
  PreparedData data;
  SplitModel model;
  std::vector<LossReport> losses;
  fs::path manifest_path;
};

inline void write_loss_csv(const fs::path& path, const std::vector<LossReport>& losses) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os.precision(17);
  os << "epoch,bc_loss,kl_loss,total\n";
  for (std::size_t e = 0; e < losses.size(); ++e)
    os << e + 1 << ',' << losses[e].bc_loss << ',' << losses[e].kl_loss << ',' << losses[e].total
       << '\n';
}

inline TrainedRun cmd_train(const RunConfig& cfg) {
  TrainedRun run{cfg, prepare_data(cfg), {}, {}, {}};
  const TrainConfig tc = resolved_train_config(cfg, run.data.silos);
  run.model = make_split_model(slice_silos(run.data.train, run.data.silos), tc);
  InProcessBus bus(run.model.edges.size(), tc.timeout);
  run.losses = train(run.model, tc, bus).epochs;

  fs::create_directories(cfg.out_dir);
  const std::uint64_t hash = config_hash(cfg);
  nlohmann::json manifest;
  manifest["format"] = "splitvae-run/1";
  manifest["created_utc"] = detail::utc_timestamp();
  manifest["config"] = config_to_json(cfg);
  manifest["config_hash"] = detail::concat(std::hex, hash);
  manifest["seeds"] = {{"seed", cfg.train.seed}, {"gen_seed", cfg.gen_seed}};
  manifest["features"] = run.data.names;
  manifest["train_rows"] = run.data.train.rows();
  manifest["test_rows"] = run.data.test.rows();

  nlohmann::json silos = nlohmann::json::array();
  for (std::size_t n = 0; n < run.model.edges.size(); ++n) {
    const std::string ckpt = detail::concat("rank", n + 1, ".ckpt");
    const auto& edge = run.model.edges[n];
    save_checkpoint(cfg.out_dir / ckpt,
                    Checkpoint{hash, {{"encoder", edge.encoder()}, {"decoder", edge.decoder()}}});
    silos.push_back({{"rank", n + 1},
                     {"width", run.data.silos.dims[n]},
                     {"offset", run.data.silos.offset(n)},
                     {"embed_dim", tc.embed_dims[n]},
                     {"norm", to_json(slice_stats(run.data.stats, run.data.silos, n))},
                     {"checkpoint", ckpt}});
  }
  manifest["silos"] = silos;
  save_checkpoint(cfg.out_dir / "server.ckpt",
                  Checkpoint{hash,
                             {{"prob_encoder", run.model.server.vae().encoder()},
                              {"prob_decoder", run.model.server.vae().decoder()}}});
  manifest["server"] = {{"checkpoint", "server.ckpt"},
                        {"latent_dim", tc.latent_dim},
                        {"kl_form", std::string(to_string(tc.kl_form))}};

  write_loss_csv(cfg.out_dir / "loss.csv", run.losses);
  {
    std::ofstream os(cfg.out_dir / "ledger.csv");
    if (!os) throw DataError("cannot write ledger.csv");
    bus.ledger().write_csv(os);
  }
  save_csv(cfg.out_dir / "observed_holdout.csv", run.data.names, run.data.test_raw);

  nlohmann::json ledger{{"raw_bytes", bus.ledger().raw_baseline()},
                        {"total_bytes", bus.ledger().total_bytes()},
                        {"csv", "ledger.csv"}};
  if (bus.ledger().total_bytes() > 0) {
    const LedgerReport rep = ledger_report(bus.ledger());
    ledger["epoch_bytes"] = rep.epoch_bytes;
    ledger["reduction_factor"] = rep.reduction_factor;
  }
  manifest["ledger"] = ledger;
  manifest["outputs"] = {{"loss", "loss.csv"}, {"observed_holdout", "observed_holdout.csv"}};

  run.manifest_path = cfg.out_dir / "run.json";
  write_json_file(run.manifest_path, manifest);
  return run;
}

// ---------------------------------------------------------------------------
// Loading a trained run back
// ---------------------------------------------------------------------------

struct LoadedRun {
  RunConfig config;
  nlohmann::json manifest;
  fs::path dir;
  SplitModel model;
  std::vector<NormStats> silo_stats;
  std::vector<std::vector<std::string>> silo_names;
};

inline LoadedRun load_run(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) {
    throw ConfigError("--manifest: file not found: " + manifest_path.string());
  }
  LoadedRun run;
  run.manifest = read_json_file(manifest_path);
  run.dir = manifest_path.parent_path();
  const std::string where = manifest_path.string();
  try {
    apply_config_json(run.config, run.manifest.at("config"), where + ": config");
    const std::uint64_t hash = config_hash(run.config);
    const std::vector<std::string> names =
        run.manifest.at("features").get<std::vector<std::string>>();

    std::vector<std::size_t> dims, embed;
    for (const auto& s : run.manifest.at("silos")) {
      dims.push_back(s.at("width").get<std::size_t>());
      embed.push_back(s.at("embed_dim").get<std::size_t>());
    }
    const SiloMap map{dims};
    if (map.total() != names.size()) throw DataError(where + ": silo widths do not cover features");
    TrainConfig tc = run.config.train;
    tc.embed_dims = embed;

    auto load = [&](const nlohmann::json& entry) {
      Checkpoint ck = load_checkpoint(run.dir / entry.at("checkpoint").get<std::string>());
      if (ck.config_hash != hash) {
        throw DataError(where + ": checkpoint was written by a different config");
      }
      return ck;
    };

    std::size_t n = 0;
    for (const auto& s : run.manifest.at("silos")) {
      const Checkpoint ck = load(s);
      // Generation never touches the silo; an empty table keeps widths consistent.
      run.model.edges.emplace_back(RankId{static_cast<int>(n + 1)}, Tensor::matrix(0, dims[n]),
                                   ck.get("encoder"), ck.get("decoder"), tc.lr);
      run.silo_stats.push_back(norm_stats_from_json(s.at("norm")));
      run.silo_names.push_back(slice_names(names, map, n));
      ++n;
    }
    const Checkpoint sk = load(run.manifest.at("server"));
    run.model.server =
        ServerAgent(embed, VaeCore(sk.get("prob_encoder"), sk.get("prob_decoder"), tc.kl_form),
                    tc.lr, RngStream(tc.seed, kServerNoiseStream));
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(where + ": malformed manifest: " + ex.what());
  }
  return run;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kGenerationStream = 0;

/// Normalized scenarios from run index `r` of the generation seed.
inline std::vector<Tensor> generate_run(SplitModel& model, std::size_t count, std::uint64_t gen_seed,
                                        std::size_t r) {
  RngStream rng(gen_seed, kGenerationStream + r);
  return generate_scenarios(model.edges, model.server, count, rng);
}

/// Writes scenarios_rank{n}.csv in original units; returns the paths.
inline std::vector<fs::path> cmd_generate(LoadedRun& run, std::size_t count, std::uint64_t gen_seed,
                                          const fs::path& out_dir) {
  const std::vector<Tensor> parts = generate_run(run.model, count, gen_seed, 0);
  fs::create_directories(out_dir);
  std::vector<fs::path> paths;
  for (std::size_t n = 0; n < parts.size(); ++n) {
    const fs::path p = out_dir / detail::concat("scenarios_rank", n + 1, ".csv");
    save_csv(p, run.silo_names[n], denormalize(parts[n], run.silo_stats[n]));
    paths.push_back(p);
  }
  return paths;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

inline void write_metric_csv(const fs::path& path,
                             const std::vector<std::pair<std::string, MetricReport>>& reports) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  write_metric_csv_header(os);
  for (const auto& [method, rep] : reports) write_metric_rows(os, method, rep);
}

/// Static files: generated CSVs are joined column-wise in the given order,
/// then both sides are scaled with the observed file's min-max.
inline MetricReport evaluate_files(const fs::path& observed_path,
                                   const std::vector<fs::path>& generated_paths) {
  if (!fs::exists(observed_path)) {
    throw ConfigError("--observed: file not found: " + observed_path.string());
  }
  if (generated_paths.empty()) throw ConfigError("--generated: at least one file is required");
  const CsvTable observed = load_csv(observed_path);
  std::vector<Tensor> parts;
  for (const auto& p : generated_paths) {
    if (!fs::exists(p)) throw ConfigError("--generated: file not found: " + p.string());
    parts.push_back(load_csv(p).data);
  }
  const Tensor generated = parts.size() == 1 ? parts.front() : tensor_concat(parts);
  if (generated.cols() != observed.data.cols()) {
    throw DimensionError(detail::concat("observed has ", observed.data.cols(),
                                        " features but generated has ", generated.cols()));
  }
  auto [obs_n, stats] = normalize(observed.data);
  auto [gen_n, unused] = normalize(generated, stats);
  return evaluate_runs(obs_n, [&](std::size_t) { return gen_n; }, 1);
}

/// Regenerates `runs` scenario sets from a trained run and scores each
/// against the normalized held-out rows.
inline MetricReport evaluate_manifest(LoadedRun& run, std::size_t runs, std::uint64_t gen_seed) {
  const PreparedData data = prepare_data(run.config);
  const std::size_t count = data.test.rows();
  return evaluate_runs(
      data.test,
      [&](std::size_t r) { return tensor_concat(generate_run(run.model, count, gen_seed, r)); },
      runs);
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareResult {
  std::vector<std::pair<std::string, MetricReport>> reports;
  fs::path metrics_path;
};

inline void write_series_csv(const fs::path& path, const char* index, const Tensor& values) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os.precision(17);
  os << index << ",value\n";
  for (std::size_t i = 0; i < values.size(); ++i) os << i << ',' << values[i] << '\n';
}

/// Centroid of the mean day and its autocorrelation, in original units.
inline void write_diagnostics(const fs::path& dir, const std::string& method,
                              const Tensor& normalized, const NormStats& stats, std::size_t hours) {
  const Tensor centroid = centroid_series(mean_day(denormalize(normalized, stats), hours));
  write_series_csv(dir / ("centroid_" + method + ".csv"), "hour", centroid);
  const Autocorrelation ac = autocorrelation(centroid, hours);
  write_series_csv(dir / ("autocorr_" + method + ".csv"), "lag", ac.values);
}

/// Trains the split model, the Central-VAE and the copula on the same rows
/// and seed, and scores `runs` generated sets from each.
inline CompareResult cmd_compare(const RunConfig& cfg) {
  const PreparedData data = prepare_data(cfg);
  const TrainConfig tc = resolved_train_config(cfg, data.silos);
  const std::size_t count = data.test.rows();
  fs::create_directories(cfg.out_dir);
  CompareResult out;

  auto stage = [](const char* method, auto&& fn) {
    try {
      return fn();
    } catch (const ConfigError& ex) {
      throw ConfigError(detail::concat(method, ": ", ex.what()));
    } catch (const DataError& ex) {
      throw DataError(detail::concat(method, ": ", ex.what()));
    } catch (const TimeoutError& ex) {
      throw TimeoutError(detail::concat(method, ": ", ex.what()));
    } catch (const ProtocolError& ex) {
      throw ProtocolError(detail::concat(method, ": ", ex.what()));
    } catch (const std::exception& ex) {
      throw NumericError(detail::concat(method, ": ", ex.what()));
    }
  };

  write_diagnostics(cfg.out_dir, "observed", data.test, data.stats, data.hours);

  stage("splitvae", [&] {
    SplitModel model = make_split_model(slice_silos(data.train, data.silos), tc);
    InProcessBus bus(model.edges.size(), tc.timeout);
    write_loss_csv(cfg.out_dir / "loss_splitvae.csv", train(model, tc, bus).epochs);
    auto gen = [&](std::size_t r) {
      return tensor_concat(generate_run(model, count, cfg.gen_seed, r));
    };
    out.reports.emplace_back("splitvae", evaluate_runs(data.test, gen, cfg.runs));
    write_diagnostics(cfg.out_dir, "splitvae", gen(0), data.stats, data.hours);
    return 0;
  });

  stage("central_vae", [&] {
    CentralTrainResult central = central_vae_train(data.train, tc);
    write_loss_csv(cfg.out_dir / "loss_central_vae.csv", central.epochs);
    auto gen = [&](std::size_t r) {
      RngStream rng(cfg.gen_seed, kGenerationStream + r);
      return central_vae_generate(central.model, count, rng);
    };
    out.reports.emplace_back("central_vae", evaluate_runs(data.test, gen, cfg.runs));
    write_diagnostics(cfg.out_dir, "central_vae", gen(0), data.stats, data.hours);
    return 0;
  });

  stage("copula", [&] {
    const CopulaModel copula = copula_fit(data.train);
    write_json_file(cfg.out_dir / "copula.json", to_json(copula));
    auto gen = [&](std::size_t r) {
      RngStream rng(cfg.gen_seed, kGenerationStream + r);
      return copula_sample(copula, count, rng);
    };
    out.reports.emplace_back("copula", evaluate_runs(data.test, gen, cfg.runs));
    write_diagnostics(cfg.out_dir, "copula", gen(0), data.stats, data.hours);
    return 0;
  });

  out.metrics_path = cfg.out_dir / "metrics.csv";
  write_metric_csv(out.metrics_path, out.reports);
  return out;
}

// ---------------------------------------------------------------------------
// payload-report
// ---------------------------------------------------------------------------

struct PayloadRow {
  std::size_t embed_dim = 0;
  std::size_t raw_bytes = 0;
  std::size_t epoch_bytes = 0;
  double reduction_factor = 0.0;
};

/// Replays one training epoch per embed dim on the run's data and reads the
/// bytes off the transport ledger.
inline std::vector<PayloadRow> payload_table(const RunConfig& base,
                                             const std::vector<std::size_t>& embed_dims) {
  if (embed_dims.empty()) throw ConfigError("--embed-dims: at least one value is required");
  const PreparedData data = prepare_data(base);
  const std::vector<Tensor> silos = slice_silos(data.train, data.silos);
  std::vector<PayloadRow> rows;
  for (std::size_t k : embed_dims) {
    if (k == 0) throw ConfigError("--embed-dims: values must be >= 1");
    RunConfig cfg = base;
    cfg.embed_dim = k;
    TrainConfig tc = resolved_train_config(cfg, data.silos);
    tc.epochs = 1;
    SplitModel model = make_split_model(silos, tc);
    InProcessBus bus(model.edges.size(), tc.timeout);
    train(model, tc, bus);
    const LedgerReport rep = ledger_report(bus.ledger());
    rows.push_back({k, rep.raw_bytes, rep.epoch_bytes, rep.reduction_factor});
  }
  return rows;
}

inline void write_payload_csv(std::ostream& os, const std::vector<PayloadRow>& rows) {
  const auto old = os.precision(17);
  os << "embed_dim,raw_bytes,epoch_bytes,reduction_factor\n";
  for (const auto& r : rows)
    os << r.embed_dim << ',' << r.raw_bytes << ',' << r.epoch_bytes << ',' << r.reduction_factor
       << '\n';
  os.precision(old);
}

inline std::vector<PayloadRow> cmd_payload_report(const LoadedRun& run,
                                                  const std::vector<std::size_t>& embed_dims,
                                                  const fs::path& out_dir) {
  std::string ledger_name = "ledger.csv";
  if (run.manifest.contains("ledger") && run.manifest["ledger"].contains("csv")) {
    ledger_name = run.manifest["ledger"]["csv"].get<std::string>();
  }
  if (!fs::exists(run.dir / ledger_name)) {
    throw DataError("payload-report: missing ledger " + (run.dir / ledger_name).string());
  }
  std::vector<PayloadRow> rows = payload_table(run.config, embed_dims);
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "payload.csv");
  if (!os) throw DataError("cannot write payload.csv");
  write_payload_csv(os, rows);
  return rows;
}

}  // namespace splitvae
