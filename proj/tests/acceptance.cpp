// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset. Exit status is nonzero if any line fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "equivalence.hpp"
#include "splitvae/run.hpp"
#include "support.hpp"

using namespace splitvae;
using splitvae::testing::norm_rel_error;
using splitvae::testing::numeric_gradient;
using splitvae::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("splitvae_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// Synthetic defaults: 8 nodes x 24 hours, 2000 samples, four uniform silos.
RunConfig default_run(const std::string& out) {
  RunConfig cfg;
  cfg.out_dir = scratch(out);
  return cfg;
}

struct Convergence {
  bool finite = true;
  double first = 0.0, fiftieth = 0.0;
  std::set<std::size_t> payload_widths;
  std::vector<std::size_t> silo_widths;
};

Convergence converge(const RunConfig& cfg) {
  const PreparedData data = prepare_data(cfg);
  TrainConfig tc = resolved_train_config(cfg, data.silos);
  tc.epochs = std::max<std::size_t>(tc.epochs, 50);
  SplitModel model = make_split_model(slice_silos(data.train, data.silos), tc);
  InProcessBus bus(model.edges.size(), tc.timeout);
  Convergence out;
  out.silo_widths = data.silos.dims;
  bus.set_observer([&](const Envelope& e) { out.payload_widths.insert(e.payload.cols()); });
  const TrainResult res = train(model, tc, bus);
  for (const auto& e : res.epochs) out.finite = out.finite && std::isfinite(e.total);
  out.first = res.epochs.front().total;
  out.fiftieth = res.epochs.at(49).total;
  return out;
}

Outcome convergence_outcome(const Convergence& c) {
  return {c.finite && c.fiftieth < c.first,
          "epoch 1 loss " + fmt(c.first) + ", epoch 50 loss " + fmt(c.fiftieth) +
              (c.finite ? ", finite" : ", NON-FINITE")};
}

Outcome equivalence_outcome(const std::vector<std::vector<std::size_t>>& dim_sets, bool paper_form) {
  double worst = 0.0, smallest_update = 1e300;
  std::size_t cases = 0;
  auto grid = splitvae::testing::equivalence_grid(dim_sets);
  if (paper_form) {
    const auto standard = grid;
    for (auto c : standard) {
      c.kl_form = KlForm::paper;
      c.seed += 1000;
      grid.push_back(c);
    }
  }
  for (const auto& c : grid) {
    const auto r = splitvae::testing::run_equivalence(c);
    worst = std::max(worst, r.max_param_diff);
    smallest_update = std::min(smallest_update, r.max_update);
    ++cases;
  }
  return {worst <= 1e-9 && smallest_update > 0.0,
          std::to_string(cases) + " cases, max |split - monolithic| = " + fmt(worst)};
}

// ---------------------------------------------------------------------------

Outcome criterion_1() {
  return equivalence_outcome({{5}, {4, 7}, {4, 7, 9}}, true);
}

Outcome criterion_2() {
  std::mt19937_64 gen(2024);
  double worst_stack = 0, worst_bce = 0, worst_kl = 0, worst_rep = 0, worst_vae = 0;
  const Activation acts[] = {Activation::identity, Activation::relu, Activation::sigmoid};
  std::uniform_int_distribution<std::size_t> width(1, 12), batch(1, 6);
  auto weighted = [](const Tensor& y, const Tensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
  };
  for (int t = 0; t < 20; ++t) {
    // Stacks.
    RngStream rng(500 + t, 0);
    MlpStack net = MlpStack::build({width(gen), width(gen), width(gen)}, acts[t % 3],
                                   acts[(t / 3) % 3], rng);
    // Random biases too: with the zero init a dead ReLU layer puts the next
    // pre-activation exactly on the kink, where differences are undefined.
    for (auto& layer : net.layers()) {
      Tensor bias = Tensor::vector(layer.out_dim());
      for (double& v : bias) v = std::uniform_real_distribution<double>(-0.5, 0.5)(gen);
      layer.set_parameters(layer.weights(), bias);
    }
    const std::size_t b = batch(gen);
    Tensor x = random_tensor(gen, b, net.layers().front().in_dim());
    const Tensor seed = random_tensor(gen, b, net.layers().back().out_dim());
    net.forward(x);
    const BackwardResult r = net.backward(seed);
    auto loss = [&] { return weighted(net.forward(x), seed); };
    worst_stack = std::max(worst_stack, norm_rel_error(r.input_grad, numeric_gradient(loss, x)));
    for (std::size_t l = 0; l < net.depth(); ++l) {
      auto& layer = net.layers()[l];
      Tensor w = layer.weights(), bias = layer.biases();
      auto f = [&] {
        layer.set_parameters(w, bias);
        return loss();
      };
      const Tensor gw = numeric_gradient(f, w), gb = numeric_gradient(f, bias);
      layer.set_parameters(w, bias);
      worst_stack = std::max({worst_stack, norm_rel_error(r.param_grads[l].weights, gw),
                              norm_rel_error(r.param_grads[l].biases, gb)});
    }

    // Reconstruction loss.
    Tensor pred = random_tensor(gen, b, 1 + t % 5, 0.05, 0.95);
    const Tensor target = random_tensor(gen, b, pred.cols(), 0, 1);
    worst_bce = std::max(worst_bce, norm_rel_error(bc_loss_grad(pred, target),
                                                   numeric_gradient([&] { return bc_loss(pred, target); }, pred)));

    // KL, both forms.
    for (KlForm form : {KlForm::standard, KlForm::paper}) {
      LatentStats s;
      s.mu_hat = random_tensor(gen, b, 1 + t % 4, -2, 2);
      s.log_sigma_hat = random_tensor(gen, b, s.mu_hat.cols(), -1.5, 1.5);
      const auto [dmu, dls] = kl_loss_grad(s, form);
      auto f = [&] { return kl_loss(s, form); };
      worst_kl = std::max({worst_kl, norm_rel_error(dmu, numeric_gradient(f, s.mu_hat)),
                           norm_rel_error(dls, numeric_gradient(f, s.log_sigma_hat))});
    }

    // Reparametrization.
    LatentStats s;
    s.mu_hat = random_tensor(gen, b, 1 + t % 3);
    s.log_sigma_hat = random_tensor(gen, b, s.mu_hat.cols());
    const Tensor eps = random_tensor(gen, b, s.mu_hat.cols(), -2, 2);
    const Tensor w = random_tensor(gen, b, s.mu_hat.cols());
    reparametrize(s, eps);
    const auto [dmu, dls] = reparametrize_backward(s, w);
    auto f = [&] {
      LatentStats c = s;
      return weighted(reparametrize(c, eps), w);
    };
    worst_rep = std::max({worst_rep, norm_rel_error(dmu, numeric_gradient(f, s.mu_hat)),
                          norm_rel_error(dls, numeric_gradient(f, s.log_sigma_hat))});

    // Server VAE input gradient (the two-pronged backward).
    RngStream vrng(900 + t, 0);
    VaeCore vae({4, 6, 2, 4}, vrng, t % 2 ? KlForm::paper : KlForm::standard);
    Tensor in = random_tensor(gen, 3, 4, 0, 1);
    const Tensor tgt = random_tensor(gen, 3, 4, 0.1, 0.9);
    const Tensor veps = random_tensor(gen, 3, 2, -1, 1);
    const Tensor y = vae.forward(in, veps);
    const VaeCore::Gradients g = vae.backward(bc_loss_grad(y, tgt));
    auto total = [&] {
      VaeCore v = vae;
      const Tensor out = v.forward(in, veps);
      return bc_loss(out, tgt) + v.kl();
    };
    worst_vae = std::max(worst_vae, norm_rel_error(g.input_grad, numeric_gradient(total, in)));
  }
  const double worst = std::max({worst_stack, worst_bce, worst_kl, worst_rep, worst_vae});
  return {worst < 1e-4, "20 instances each; worst relative error stack " + fmt(worst_stack) +
                            ", bce " + fmt(worst_bce) + ", kl " + fmt(worst_kl) + ", reparam " +
                            fmt(worst_rep) + ", vae " + fmt(worst_vae)};
}

Convergence default_convergence;  // shared with criterion 8

Outcome criterion_3() {
  default_convergence = converge(default_run("c3"));
  return convergence_outcome(default_convergence);
}

CompareResult first_compare;  // shared with criterion 10
fs::path first_compare_dir;

Outcome criterion_4() {
  RunConfig cfg = default_run("c4");
  first_compare_dir = cfg.out_dir;
  first_compare = cmd_compare(cfg);
  const MetricReport& split = first_compare.reports.at(0).second;
  const MetricReport& central = first_compare.reports.at(1).second;
  bool pass = first_compare.reports.at(0).first == "splitvae" &&
              first_compare.reports.at(1).first == "central_vae" && split.runs == 100;
  std::string detail;
  for (auto name : MetricReport::kNames) {
    const double s = split.get(name).mean, c = central.get(name).mean;
    const double rel = std::abs(s - c) / std::abs(c);
    pass = pass && rel <= 0.5;
    detail += std::string(name) + " " + fmt(s) + " vs " + fmt(c) + " (" + fmt(100 * rel) + "%); ";
  }
  return {pass, detail};
}

Outcome criterion_5() {
  const PreparedData data = prepare_data(default_run("c5"));
  const CopulaModel model = copula_fit(data.train);
  RngStream rng(5, 0);
  const Tensor sample = copula_sample(model, 10000, rng);
  const std::size_t d = data.train.cols();

  auto ks = [](std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double worst = 0;
    while (i < a.size() && j < b.size()) {
      const double x = std::min(a[i], b[j]);
      while (i < a.size() && a[i] <= x) ++i;
      while (j < b.size() && b[j] <= x) ++j;
      worst = std::max(worst, std::abs(double(i) / a.size() - double(j) / b.size()));
    }
    return worst;
  };
  auto rank_columns = [](const Tensor& t) {
    std::vector<std::vector<double>> out;
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const auto v = t.column(c);
      std::vector<std::size_t> idx(v.size());
      std::iota(idx.begin(), idx.end(), 0u);
      std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
      std::vector<double> r(v.size());
      for (std::size_t k = 0; k < idx.size();) {
        std::size_t e = k;
        while (e + 1 < idx.size() && v[idx[e + 1]] == v[idx[k]]) ++e;
        for (std::size_t q = k; q <= e; ++q) r[idx[q]] = (k + e) / 2.0;
        k = e + 1;
      }
      // Standardize so that a dot product is the Pearson correlation.
      const double mean = std::accumulate(r.begin(), r.end(), 0.0) / r.size();
      double ss = 0;
      for (double& x : r) ss += (x -= mean) * x;
      for (double& x : r) x /= std::sqrt(ss);
      out.push_back(std::move(r));
    }
    return out;
  };

  double worst_ks = 0;
  for (std::size_t j = 0; j < d; ++j)
    worst_ks = std::max(worst_ks, ks(data.train.column(j), sample.column(j)));
  const auto rd = rank_columns(data.train), rs = rank_columns(sample);
  double worst_rho = 0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      const double a = std::inner_product(rd[i].begin(), rd[i].end(), rd[j].begin(), 0.0);
      const double b = std::inner_product(rs[i].begin(), rs[i].end(), rs[j].begin(), 0.0);
      worst_rho = std::max(worst_rho, std::abs(a - b));
    }
  }
  return {worst_ks < 0.05 && worst_rho <= 0.1,
          std::to_string(d) + " features; max KS " + fmt(worst_ks) + ", max Spearman gap " +
              fmt(worst_rho)};
}

Outcome criterion_6() {
  std::mt19937_64 gen(6);
  const Tensor x = random_tensor(gen, 300, 6, 0, 1);
  const double f0 = fid(x, x);

  std::normal_distribution<double> n(0, 1);
  Tensor a = Tensor::matrix(10000, 1), b = Tensor::matrix(10000, 1);
  for (double& v : a) v = n(gen);
  for (double& v : b) v = 1.0 + n(gen);
  const double f1 = fid(a, b);

  auto col = [](std::initializer_list<double> v) {
    Tensor t = Tensor::matrix(v.size(), 1);
    std::size_t i = 0;
    for (double e : v) t(i++, 0) = e;
    return t;
  };
  const double es = energy_score(col({0, 2}), col({1}));
  bool crps_ok = true;
  for (int t = 0; t < 50; ++t) {
    std::uniform_real_distribution<double> u(-5, 5);
    const double pa = u(gen), y = u(gen);
    crps_ok = crps_ok && crps(col({pa}), col({y})) == std::abs(pa - y);
  }
  const double r0 = rmse(x, x);
  const bool pass = std::abs(f0) <= 1e-8 && std::abs(f1 - 1.0) <= 0.1 && es == 0.5 && crps_ok &&
                    r0 == 0.0;
  return {pass, "fid(x,x) " + fmt(f0) + ", 1-D fid " + fmt(f1) + ", es " + fmt(es) +
                    ", crps point mass " + (crps_ok ? "exact" : "MISMATCH") + ", rmse(x,x) " +
                    fmt(r0)};
}

Outcome criterion_7() {
  RunConfig cfg = default_run("c7");
  const PreparedData data = prepare_data(cfg);
  TrainConfig tc = resolved_train_config(cfg, data.silos);
  tc.epochs = 2;
  SplitModel model = make_split_model(slice_silos(data.train, data.silos), tc);
  InProcessBus bus(model.edges.size(), tc.timeout);
  train(model, tc, bus);

  const std::size_t m = data.train.rows();
  const std::size_t embed_sum = std::accumulate(tc.embed_dims.begin(), tc.embed_dims.end(), 0u);
  std::size_t analytic_epoch = 0;
  for (std::size_t b = 0; b < batch_count(m, tc.batch_size); ++b)
    analytic_epoch += 4 * batch_range(m, tc.batch_size, b).count * embed_sum * sizeof(double);
  bool exact = bus.ledger().total_bytes() == 2 * analytic_epoch;
  for (std::size_t e = 0; e < 2; ++e)
    for (Phase p : kPhaseOrder) exact = exact && 4 * bus.ledger().phase_bytes(e, p) == analytic_epoch;

  const std::vector<std::size_t> dims{32, 20, 16, 8, 4, 2, 1};
  const auto rows = payload_table(cfg, dims);
  bool increasing = true;
  std::string factors;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) increasing = increasing && rows[i].reduction_factor > rows[i - 1].reduction_factor;
    factors += (i ? ", " : "") + std::to_string(rows[i].embed_dim) + ":" + fmt(rows[i].reduction_factor);
  }
  return {exact && increasing, std::string("ledger ") + (exact ? "matches" : "DIFFERS FROM") +
                                   " analytic " + std::to_string(analytic_epoch) +
                                   " B/epoch; factors by embed dim " + factors};
}

Outcome criterion_8() {
  if (default_convergence.silo_widths.empty()) default_convergence = converge(default_run("c8"));
  // Also a heterogeneous partition, where every silo width differs from the embed width.
  RunConfig het = default_run("c8h");
  het.synth.nodes = 5;
  het.synth.hours = 4;
  het.hours = 4;
  het.silos = "4,7,9";
  const Convergence h = converge(het);
  bool pass = true;
  std::string detail;
  for (const Convergence* c : {static_cast<const Convergence*>(&default_convergence), &h}) {
    for (std::size_t w : c->silo_widths) pass = pass && w != 8 && !c->payload_widths.count(w);
    pass = pass && c->payload_widths == std::set<std::size_t>{8};
    detail += "silos";
    for (auto w : c->silo_widths) detail += " " + std::to_string(w);
    detail += " -> payload widths";
    for (auto w : c->payload_widths) detail += " " + std::to_string(w);
    detail += "; ";
  }
  return {pass, detail};
}

Outcome criterion_9() {
  const Outcome eq = equivalence_outcome({{4, 7, 9}, {5, 5, 5, 5}}, false);
  bool pass = eq.pass;
  std::string detail = "equivalence: " + eq.detail + "; ";
  for (const char* silos : {"4,7,9", "uniform:4"}) {
    RunConfig cfg = default_run("c9");
    cfg.synth.nodes = 5;
    cfg.synth.hours = 4;
    cfg.hours = 4;
    cfg.silos = silos;
    const Outcome c = convergence_outcome(converge(cfg));
    pass = pass && c.pass;
    detail += std::string(silos) + ": " + c.detail + "; ";
  }
  return {pass, detail};
}

Outcome criterion_10() {
  if (first_compare_dir.empty()) {
    RunConfig cfg = default_run("c10a");
    first_compare_dir = cfg.out_dir;
    cmd_compare(cfg);
  }
  RunConfig cfg = default_run("c10b");
  cmd_compare(cfg);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };
  const std::string a = slurp(first_compare_dir / "metrics.csv");
  const std::string b = slurp(cfg.out_dir / "metrics.csv");
  return {!a.empty() && a == b, std::to_string(a.size()) + " bytes, " +
                                    (a == b ? "identical" : "DIFFERENT")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 = no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "split/monolithic equivalence", 10, criterion_1},
      {2, "gradient fidelity", 30, criterion_2},
      {3, "convergence", 300, criterion_3},
      {4, "statistical fidelity vs Central-VAE", 900, criterion_4},
      {5, "copula marginals and rank correlation", 0, criterion_5},
      {6, "metric oracles", 0, criterion_6},
      {7, "payload accounting", 0, criterion_7},
      {8, "data locality", 0, criterion_8},
      {9, "heterogeneous silos", 0, criterion_9},
      {10, "compare determinism", 0, criterion_10},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_s == 0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %d (%s): %s [%.1f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs,
                c.budget_s > 0 ? (in_time ? " within budget" : " OVER BUDGET") : "");
    std::fflush(stdout);
  }
  for (const char* dir : {"c3", "c4", "c5", "c7", "c8", "c8h", "c9", "c10a", "c10b"})
    fs::remove_all(fs::temp_directory_path() / (std::string("splitvae_acceptance_") + dir));
  return failures == 0 ? 0 : 1;
}
