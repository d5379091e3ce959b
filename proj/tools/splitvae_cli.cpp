#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "splitvae/run.hpp"

namespace {

using namespace splitvae;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct Flags {
  std::optional<std::string> config;
  ConfigOverrides o;
  std::string manifest;
  std::size_t count = 100;
  std::string observed;
  std::vector<std::string> generated;
  std::vector<std::size_t> embed_dims;
};

template <typename T>
void opt(CLI::App* app, const std::string& name, std::optional<T>& target, const std::string& help) {
  app->add_option_function<T>(name, [&target](const T& v) { target = v; }, help);
}

void add_config_flags(CLI::App* app, Flags& f) {
  opt(app, "--config", f.config, "JSON config file; flags override its fields");
  opt(app, "--seed", f.o.seed, "training seed");
  opt(app, "--gen-seed", f.o.gen_seed, "generation seed");
  opt(app, "--epochs", f.o.epochs, "training epochs");
  opt(app, "--batch-size", f.o.batch_size, "rows per batch");
  opt(app, "--latent-dim", f.o.latent_dim, "server latent size s");
  opt(app, "--embed-dim", f.o.embed_dim, "edge embedding width");
  opt(app, "--silos", f.o.silos, "uniform:N or an explicit list such as 4,7,9");
  opt(app, "--lr-edge-enc", f.o.lr_edge_enc, "edge encoder learning rate");
  opt(app, "--lr-edge-dec", f.o.lr_edge_dec, "edge decoder learning rate");
  opt(app, "--lr-server-enc", f.o.lr_server_enc, "server encoder learning rate");
  opt(app, "--lr-server-dec", f.o.lr_server_dec, "server decoder learning rate");
  opt(app, "--kl-form", f.o.kl_form, "standard | paper");
  opt(app, "--train-frac", f.o.train_frac, "fraction of rows used for training");
  opt(app, "--runs", f.o.runs, "generation iterations per metric");
  opt(app, "--out-dir", f.o.out_dir, "output directory (default $SPLITVAE_OUT)");
  opt(app, "--data", f.o.data_path, "CSV dataset; the synthetic generator is used when absent");
}

RunConfig resolve(const Flags& f) {
  std::optional<fs::path> path;
  if (f.config) path = *f.config;
  return load_run_config(path, f.o);
}

fs::path output_dir(const Flags& f, const fs::path& fallback) {
  if (f.o.out_dir) return *f.o.out_dir;
  if (const char* env = std::getenv("SPLITVAE_OUT"); env && *env) return env;
  return fallback;
}

int run_train(const Flags& f) {
  const TrainedRun run = cmd_train(resolve(f));
  std::cout << "epochs " << run.losses.size();
  if (!run.losses.empty()) std::cout << ", final loss " << run.losses.back().total;
  std::cout << "\nmanifest " << run.manifest_path.string() << '\n';
  return kExitOk;
}

int run_generate(const Flags& f) {
  LoadedRun run = load_run(f.manifest);
  const std::uint64_t seed = f.o.gen_seed.value_or(run.config.gen_seed);
  for (const auto& p : cmd_generate(run, f.count, seed, output_dir(f, run.dir)))
    std::cout << p.string() << '\n';
  return kExitOk;
}

int run_evaluate(const Flags& f) {
  MetricReport rep;
  std::string method;
  fs::path dir;
  if (!f.manifest.empty()) {
    LoadedRun run = load_run(f.manifest);
    rep = evaluate_manifest(run, f.o.runs.value_or(run.config.runs),
                            f.o.gen_seed.value_or(run.config.gen_seed));
    method = "splitvae";
    dir = output_dir(f, run.dir);
  } else {
    if (f.observed.empty()) throw ConfigError("evaluate needs --manifest or --observed");
    std::vector<fs::path> gen(f.generated.begin(), f.generated.end());
    rep = evaluate_files(f.observed, gen);
    method = "generated";
    dir = output_dir(f, ".");
  }
  fs::create_directories(dir);
  write_metric_csv(dir / "metrics.csv", {{method, rep}});
  write_metric_csv_header(std::cout);
  write_metric_rows(std::cout, method, rep);
  return kExitOk;
}

int run_compare(const Flags& f) {
  const CompareResult res = cmd_compare(resolve(f));
  write_metric_csv_header(std::cout);
  for (const auto& [method, rep] : res.reports) write_metric_rows(std::cout, method, rep);
  return kExitOk;
}

int run_payload(const Flags& f) {
  const LoadedRun run = load_run(f.manifest);
  const std::vector<std::size_t> dims =
      f.embed_dims.empty() ? run.config.payload_embed_dims : f.embed_dims;
  write_payload_csv(std::cout, cmd_payload_report(run, dims, output_dir(f, run.dir)));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-learning VAE scenario generator"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "train the split model and write a run manifest");
  add_config_flags(train, f);

  auto* generate = app.add_subcommand("generate", "sample scenarios from a trained run");
  generate->add_option("--manifest", f.manifest, "run.json from train")->required();
  generate->add_option("--count", f.count, "scenarios per edge");
  opt(generate, "--gen-seed", f.o.gen_seed, "generation seed");
  opt(generate, "--out-dir", f.o.out_dir, "output directory");

  auto* evaluate = app.add_subcommand("evaluate", "score generated scenarios");
  evaluate->add_option("--manifest", f.manifest, "regenerate from this run");
  evaluate->add_option("--observed", f.observed, "observed CSV");
  evaluate->add_option("--generated", f.generated, "generated CSVs, joined by column");
  opt(evaluate, "--runs", f.o.runs, "generation iterations");
  opt(evaluate, "--gen-seed", f.o.gen_seed, "generation seed");
  opt(evaluate, "--out-dir", f.o.out_dir, "output directory");

  auto* compare = app.add_subcommand("compare", "split model vs Central-VAE vs copula");
  add_config_flags(compare, f);

  auto* payload = app.add_subcommand("payload-report", "transmitted bytes per embed dim");
  payload->add_option("--manifest", f.manifest, "run.json from train")->required();
  payload->add_option("--embed-dims", f.embed_dims, "embed dims to compare")->delimiter(',');
  opt(payload, "--out-dir", f.o.out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return run_train(f);
    if (*generate) return run_generate(f);
    if (*evaluate) return run_evaluate(f);
    if (*compare) return run_compare(f);
    if (*payload) return run_payload(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
