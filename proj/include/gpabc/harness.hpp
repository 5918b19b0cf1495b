#pragma once

// Experiment orchestration: dataset realizations, algorithm comparison grids,
// repeated-run variability studies, posterior summaries and report files.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gpabc/abcsmc.hpp"
#include "gpabc/dataset.hpp"
#include "gpabc/gp.hpp"
#include "gpabc/models.hpp"

namespace gpabc {

enum class Algorithm { AbcSmcComp, AbcSmcOlcm, GpAbcSmc, GpAbcOlcm };

inline const std::vector<Algorithm>& all_algorithms() {
  static const std::vector<Algorithm> all{Algorithm::AbcSmcComp, Algorithm::AbcSmcOlcm, Algorithm::GpAbcSmc,
                                          Algorithm::GpAbcOlcm};
  return all;
}

inline std::string display_name(Algorithm a) {
  switch (a) {
    case Algorithm::AbcSmcComp: return "ABC-SMC-Comp";
    case Algorithm::AbcSmcOlcm: return "ABC-SMC-OLCM";
    case Algorithm::GpAbcSmc: return "GP-ABC-SMC";
    case Algorithm::GpAbcOlcm: return "GP-ABC-OLCM";
  }
  return "?";
}

inline std::string cli_name(Algorithm a) {
  std::string s = display_name(a);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline Algorithm algorithm_from_string(const std::string& name) {
  for (Algorithm a : all_algorithms()) {
    if (name == cli_name(a) || name == display_name(a)) return a;
  }
  throw std::invalid_argument("unknown algorithm: " + name +
                              " (expected abc-smc-comp, abc-smc-olcm, gp-abc-smc or gp-abc-olcm)");
}

inline bool uses_gp(Algorithm a) { return a == Algorithm::GpAbcSmc || a == Algorithm::GpAbcOlcm; }

inline PerturbationKind perturbation_of(Algorithm a) {
  return (a == Algorithm::AbcSmcOlcm || a == Algorithm::GpAbcOlcm) ? PerturbationKind::OLCM
                                                                    : PerturbationKind::ComponentWise;
}

/// Data-generation protocol and generation counts used for each benchmark model.
struct ModelProtocol {
  ModelSpec model;
  std::vector<double> grid;
  NoiseRule noise;
  std::size_t generations_integration = 0;
  std::size_t generations_gp = 0;
};

inline ModelProtocol model_protocol(const std::string& name) {
  ModelProtocol p;
  p.model = model_by_name(name);
  if (p.model.name == "lotka-volterra") {
    for (int i = 0; i <= 10; ++i) p.grid.push_back(i);
    p.noise = NoiseRule::absolute({0.5});
    p.generations_integration = 6;
    p.generations_gp = 5;
  } else if (p.model.name == "hes1") {
    for (int i = 0; i <= 150; ++i) p.grid.push_back(2.0 * i);
    p.noise = NoiseRule::relative({0.1});
    p.generations_integration = 14;
    p.generations_gp = 9;
  } else {
    p.grid = {0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100};
    p.noise = NoiseRule::absolute({0.1});
    p.generations_integration = 3;
    p.generations_gp = 3;
  }
  return p;
}

struct ExperimentPlan {
  std::string name = "experiment";
  std::string model = "lotka-volterra";
  std::vector<std::uint64_t> dataset_seeds{1, 2, 3};
  std::vector<Algorithm> algorithms;
  std::size_t n_particles = 100;
  std::optional<std::size_t> generations_integration;  // defaults from the model protocol
  std::optional<std::size_t> generations_gp;
  double alpha = 0.1;
  std::optional<KernelFamily> kernel_family;  // defaults to the model's kernel
  std::size_t restarts = 10;
  std::size_t repetitions = 1;
  std::uint64_t seed = 0;
  std::size_t max_attempts = 1'000'000;
  unsigned jobs = 1;

  void validate() const {
    (void)model_by_name(model);
    if (dataset_seeds.empty() && !algorithms.empty()) throw std::invalid_argument("plan needs at least one dataset seed");
    if (repetitions == 0) throw std::invalid_argument("repetitions must be at least 1");
    if (restarts == 0) throw std::invalid_argument("restarts must be at least 1");
    for (Algorithm a : algorithms) sampler_config(a, 0).validate();
  }

  [[nodiscard]] std::size_t generations_for(Algorithm a) const {
    const auto proto = model_protocol(model);
    return uses_gp(a) ? generations_gp.value_or(proto.generations_gp)
                      : generations_integration.value_or(proto.generations_integration);
  }

  [[nodiscard]] KernelFamily kernel() const { return kernel_family.value_or(model_by_name(model).gp_kernel); }

  [[nodiscard]] SamplerConfig sampler_config(Algorithm a, std::uint64_t run_seed) const {
    SamplerConfig c;
    c.n_particles = n_particles;
    c.n_generations = generations_for(a);
    c.schedule = ToleranceSchedule::adaptive(alpha);
    c.kernel = perturbation_of(a);
    c.distance = uses_gp(a) ? DistanceKind::Gradient : DistanceKind::Trajectory;
    c.seed = run_seed;
    c.max_attempts = max_attempts;
    c.jobs = jobs;
    return c;
  }
};

inline nlohmann::json to_json(const ExperimentPlan& p) {
  nlohmann::json algs = nlohmann::json::array();
  for (Algorithm a : p.algorithms) algs.push_back(cli_name(a));
  nlohmann::json j = {{"name", p.name},
                      {"model", p.model},
                      {"dataset_seeds", p.dataset_seeds},
                      {"algorithms", algs},
                      {"n_particles", p.n_particles},
                      {"alpha", p.alpha},
                      {"kernel", to_string(p.kernel())},
                      {"restarts", p.restarts},
                      {"repetitions", p.repetitions},
                      {"seed", p.seed},
                      {"max_attempts", p.max_attempts},
                      {"jobs", p.jobs}};
  j["generations_integration"] = p.generations_for(Algorithm::AbcSmcComp);
  j["generations_gp"] = p.generations_for(Algorithm::GpAbcSmc);
  return j;
}

/// Parses a plan file. Unknown keys are rejected so typos do not silently
/// fall back to defaults.
inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"name",     "model",        "dataset_seeds", "algorithms",
                                              "n_particles", "generations_integration", "generations_gp",
                                              "alpha",    "kernel",       "restarts",      "repetitions",
                                              "seed",     "max_attempts", "jobs"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("unknown plan key: " + key);
    }
  }
  ExperimentPlan p;
  p.name = j.value("name", p.name);
  p.model = j.value("model", p.model);
  p.dataset_seeds = j.value("dataset_seeds", p.dataset_seeds);
  if (j.contains("algorithms")) {
    for (const auto& a : j.at("algorithms")) p.algorithms.push_back(algorithm_from_string(a.get<std::string>()));
  }
  p.n_particles = j.value("n_particles", p.n_particles);
  if (j.contains("generations_integration")) p.generations_integration = j.at("generations_integration").get<std::size_t>();
  if (j.contains("generations_gp")) p.generations_gp = j.at("generations_gp").get<std::size_t>();
  p.alpha = j.value("alpha", p.alpha);
  if (j.contains("kernel")) p.kernel_family = kernel_family_from_string(j.at("kernel").get<std::string>());
  p.restarts = j.value("restarts", p.restarts);
  p.repetitions = j.value("repetitions", p.repetitions);
  p.seed = j.value("seed", p.seed);
  p.max_attempts = j.value("max_attempts", p.max_attempts);
  p.jobs = j.value("jobs", p.jobs);
  p.validate();
  return p;
}

inline std::vector<std::string> experiment_names() {
  return {"lotka", "hes1", "cascade", "lotka-variability", "hes1-variability"};
}

/// Built-in plans for the benchmark experiments.
inline ExperimentPlan paper_plan(const std::string& experiment) {
  ExperimentPlan p;
  p.name = experiment;
  if (experiment == "lotka" || experiment == "hes1") {
    p.model = experiment == "lotka" ? "lotka-volterra" : "hes1";
    p.algorithms = all_algorithms();
  } else if (experiment == "cascade") {
    p.model = "signal-transduction";
    p.dataset_seeds = {1};
    p.algorithms = {Algorithm::GpAbcOlcm};
  } else if (experiment == "lotka-variability" || experiment == "hes1-variability") {
    p.model = experiment == "lotka-variability" ? "lotka-volterra" : "hes1";
    p.algorithms = {Algorithm::GpAbcSmc, Algorithm::GpAbcOlcm};
    p.repetitions = 50;
  } else {
    throw std::invalid_argument("unknown experiment: " + experiment);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Posterior summaries

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double ci95 = 0.0;  // half-width: 1.96 x weighted standard error of the mean
  double variance = 0.0;
  double median = 0.0;
  double p025 = 0.0;
  double p975 = 0.0;
};

/// Weighted quantile: smallest value whose cumulative normalised weight reaches q.
inline double weighted_quantile(std::vector<std::pair<double, double>> value_weight, double q) {
  if (value_weight.empty()) throw std::invalid_argument("weighted_quantile: empty input");
  std::sort(value_weight.begin(), value_weight.end());
  double total = 0.0;
  for (const auto& [v, w] : value_weight) total += w;
  double acc = 0.0;
  for (const auto& [v, w] : value_weight) {
    acc += w / total;
    if (acc >= q - 1e-12) return v;
  }
  return value_weight.back().first;
}

inline std::vector<ParameterSummary> summarize_population(const Population& pop,
                                                          const std::vector<std::string>& names = {}) {
  if (pop.particles.empty()) throw std::invalid_argument("summarize_population: empty population");
  const auto d = static_cast<Eigen::Index>(pop.dim());
  const double ws = pop.weight_sum();
  double sum_w2 = 0.0;
  for (const auto& p : pop.particles) sum_w2 += (p.weight / ws) * (p.weight / ws);
  const double ess = 1.0 / sum_w2;
  std::vector<ParameterSummary> out(static_cast<std::size_t>(d));
  for (Eigen::Index k = 0; k < d; ++k) {
    auto& s = out[static_cast<std::size_t>(k)];
    s.name = static_cast<std::size_t>(k) < names.size() ? names[static_cast<std::size_t>(k)] : "theta" + std::to_string(k + 1);
    std::vector<std::pair<double, double>> vw;
    for (const auto& p : pop.particles) {
      s.mean += (p.weight / ws) * p.theta(k);
      vw.emplace_back(p.theta(k), p.weight);
    }
    for (const auto& p : pop.particles) s.variance += (p.weight / ws) * std::pow(p.theta(k) - s.mean, 2);
    s.ci95 = 1.96 * std::sqrt(s.variance / ess);
    s.median = weighted_quantile(vw, 0.5);
    s.p025 = weighted_quantile(vw, 0.025);
    s.p975 = weighted_quantile(vw, 0.975);
  }
  return out;
}

inline nlohmann::json to_json(const ParameterSummary& s) {
  return {{"name", s.name},   {"mean", s.mean}, {"ci95", s.ci95}, {"variance", s.variance},
          {"median", s.median}, {"p025", s.p025}, {"p975", s.p975}};
}

/// Integrates the model at central parameter values (posterior median or mean).
inline Trajectory reconstruct_trajectory(const ModelSpec& model, std::span<const double> central,
                                         std::span<const double> initial, std::span<const double> grid,
                                         const IntegratorOptions& opt = {}) {
  return simulate_model(model, central, initial, grid, opt);
}

// ---------------------------------------------------------------------------
// Boxplots and variability

struct BoxplotStats {
  std::size_t n = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double lower_whisker = 0.0;  // most extreme sample within 1.5 IQR of the box
  double upper_whisker = 0.0;
  std::vector<double> outliers;

  [[nodiscard]] double fraction_within_whiskers() const {
    return n == 0 ? 0.0 : 1.0 - static_cast<double>(outliers.size()) / static_cast<double>(n);
  }
};

/// Linear-interpolation quantile of sorted data (type 7).
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("sorted_quantile: empty input");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Tukey boxplot with 1.5 x IQR whiskers.
inline BoxplotStats tukey_boxplot(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("tukey_boxplot: empty input");
  std::sort(values.begin(), values.end());
  BoxplotStats b;
  b.n = values.size();
  b.median = sorted_quantile(values, 0.5);
  b.q1 = sorted_quantile(values, 0.25);
  b.q3 = sorted_quantile(values, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo_fence = b.q1 - 1.5 * iqr;
  const double hi_fence = b.q3 + 1.5 * iqr;
  b.lower_whisker = b.q1;
  b.upper_whisker = b.q3;
  for (double v : values) {
    if (v < lo_fence || v > hi_fence) {
      b.outliers.push_back(v);
    } else {
      b.lower_whisker = std::min(b.lower_whisker, v);
      b.upper_whisker = std::max(b.upper_whisker, v);
    }
  }
  return b;
}

inline nlohmann::json to_json(const BoxplotStats& b) {
  return {{"n", b.n},
          {"median", b.median},
          {"q1", b.q1},
          {"q3", b.q3},
          {"lower_whisker", b.lower_whisker},
          {"upper_whisker", b.upper_whisker},
          {"outliers", b.outliers},
          {"fraction_within_whiskers", b.fraction_within_whiskers()}};
}

// ---------------------------------------------------------------------------
// Running cells

struct CellResult {
  Algorithm algorithm = Algorithm::GpAbcOlcm;
  std::size_t dataset_index = 0;
  std::uint64_t dataset_seed = 0;
  std::size_t repetition = 0;
  std::uint64_t run_seed = 0;
  bool ok = false;
  std::string error;
  std::vector<ParameterSummary> summary;
  std::size_t accepted = 0;  // final population size
  std::size_t generated = 0;  // simulations over all generations
  std::size_t accepted_total = 0;
  double seconds = 0.0;  // includes GP fitting for GP variants
  double gp_fit_seconds = 0.0;
  double final_epsilon = 0.0;
  std::size_t stalled_generations = 0;
  std::vector<double> noise_sd;  // GP estimate per dimension
  std::vector<Population> populations;
};

inline nlohmann::json to_json(const CellResult& c) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& s : c.summary) params.push_back(to_json(s));
  return {{"algorithm", display_name(c.algorithm)},
          {"dataset_index", c.dataset_index},
          {"dataset_seed", c.dataset_seed},
          {"repetition", c.repetition},
          {"run_seed", c.run_seed},
          {"ok", c.ok},
          {"error", c.error},
          {"parameters", params},
          {"accepted", c.accepted},
          {"accepted_total", c.accepted_total},
          {"generated", c.generated},
          {"seconds", c.seconds},
          {"gp_fit_seconds", c.gp_fit_seconds},
          {"final_epsilon", c.final_epsilon},
          {"stalled_generations", c.stalled_generations},
          {"noise_sd", c.noise_sd},
          {"populations", c.populations.size()}};
}

/// Runs one algorithm on one dataset. Failures are captured in the result.
inline CellResult run_cell(const ExperimentPlan& plan, Algorithm algorithm, const TimeSeriesDataset& data,
                           std::uint64_t run_seed) {
  using Clock = std::chrono::steady_clock;
  const ModelSpec model = model_by_name(plan.model);
  CellResult cell;
  cell.algorithm = algorithm;
  cell.run_seed = run_seed;
  const auto start = Clock::now();
  try {
    const Prior prior(model.priors);
    const SamplerConfig config = plan.sampler_config(algorithm, run_seed);
    RunResult result;
    if (uses_gp(algorithm)) {
      const SmoothedSystem smoothed = smooth_dataset(data, plan.kernel(), plan.restarts, derive_seed(run_seed, 0x6b));
      cell.gp_fit_seconds = smoothed.fit_seconds;
      cell.noise_sd = smoothed.noise_sd();
      const GradientSimulator sim(smoothed, model);
      result = run(config, prior, [&sim](const Eigen::VectorXd& th, Rng&) { return sim.distance(th); });
    } else {
      std::vector<double> initial = data.provenance.initial_state;
      if (initial.size() != model.state_dim) initial = model.default_initial_state;
      const IntegrationSimulator sim(model, initial, data.times, data.observations);
      result = run(config, prior, [&sim](const Eigen::VectorXd& th, Rng&) { return sim.distance(th); });
    }
    cell.populations = std::move(result.populations);
    cell.ok = true;
  } catch (const AttemptCapExceeded& e) {
    cell.error = e.what();
    cell.populations = e.partial().populations;
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  cell.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  if (!cell.populations.empty()) {
    const Population& last = cell.populations.back();
    cell.summary = summarize_population(last, model.param_names);
    cell.accepted = last.accepted_count();
    cell.final_epsilon = last.tolerance;
    for (const auto& p : cell.populations) {
      cell.generated += p.generated_count;
      cell.accepted_total += p.accepted_count();
      if (p.tolerance_stalled) ++cell.stalled_generations;
    }
  }
  return cell;
}

struct VariabilitySummary {
  Algorithm algorithm = Algorithm::GpAbcOlcm;
  std::size_t dataset_index = 0;
  std::size_t runs = 0;
  std::size_t failures = 0;
  std::vector<std::string> param_names;
  std::vector<BoxplotStats> means;      // per parameter, over runs
  std::vector<BoxplotStats> variances;  // per parameter, over runs
  std::vector<double> median_params;    // per-parameter median of run-level means
};

inline nlohmann::json to_json(const VariabilitySummary& v) {
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t k = 0; k < v.param_names.size(); ++k) {
    params.push_back({{"name", v.param_names[k]},
                      {"mean", to_json(v.means[k])},
                      {"variance", to_json(v.variances[k])},
                      {"median_of_means", v.median_params[k]}});
  }
  return {{"algorithm", display_name(v.algorithm)},
          {"dataset_index", v.dataset_index},
          {"runs", v.runs},
          {"failures", v.failures},
          {"parameters", params}};
}

/// Boxplot statistics of the run-level posterior means and variances of the
/// successful cells for one (algorithm, dataset).
inline VariabilitySummary variability_study(const std::vector<CellResult>& cells, Algorithm algorithm,
                                            std::size_t dataset_index) {
  VariabilitySummary v;
  v.algorithm = algorithm;
  v.dataset_index = dataset_index;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> vars;
  for (const auto& c : cells) {
    if (c.algorithm != algorithm || c.dataset_index != dataset_index) continue;
    if (!c.ok) {
      ++v.failures;
      continue;
    }
    ++v.runs;
    if (means.empty()) {
      means.resize(c.summary.size());
      vars.resize(c.summary.size());
      for (const auto& s : c.summary) v.param_names.push_back(s.name);
    }
    for (std::size_t k = 0; k < c.summary.size(); ++k) {
      means[k].push_back(c.summary[k].mean);
      vars[k].push_back(c.summary[k].variance);
    }
  }
  for (std::size_t k = 0; k < means.size(); ++k) {
    v.means.push_back(tukey_boxplot(means[k]));
    v.variances.push_back(tukey_boxplot(vars[k]));
    v.median_params.push_back(v.means.back().median);
  }
  return v;
}

struct ExperimentReport {
  ExperimentPlan plan;
  std::vector<TimeSeriesDataset> datasets;
  std::vector<CellResult> cells;
  std::vector<VariabilitySummary> variability;
  double seconds = 0.0;

  [[nodiscard]] std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return !c.ok; }));
  }
};

inline nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  nlohmann::json var = nlohmann::json::array();
  for (const auto& v : r.variability) var.push_back(to_json(v));
  nlohmann::json datasets = nlohmann::json::array();
  for (const auto& d : r.datasets) {
    datasets.push_back({{"seed", d.provenance.seed}, {"noise_sd", d.noise_sd_true}, {"length", d.length()}});
  }
  return {{"plan", to_json(r.plan)}, {"datasets", datasets},       {"cells", cells},
          {"variability", var},      {"failures", r.failures()}, {"seconds", r.seconds}};
}

/// Synthetic dataset for a plan's model with the model's protocol.
inline TimeSeriesDataset protocol_dataset(const std::string& model_name, std::uint64_t seed) {
  const auto proto = model_protocol(model_name);
  return generate_dataset(proto.model, proto.model.true_params, proto.model.default_initial_state, proto.grid,
                          proto.noise, seed);
}

namespace detail {

inline std::string cell_stem(const CellResult& c) {
  std::ostringstream os;
  os << cli_name(c.algorithm) << "_d" << (c.dataset_index + 1) << "_r" << (c.repetition + 1);
  return os.str();
}

inline void write_histogram_csv(const std::filesystem::path& path, const Population& pop,
                                const std::vector<std::string>& names, int bins = 20) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(12);
  out << "parameter,bin_lo,bin_hi,density\n";
  const double ws = pop.weight_sum();
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(pop.dim()); ++k) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& p : pop.particles) {
      lo = std::min(lo, p.theta(k));
      hi = std::max(hi, p.theta(k));
    }
    if (hi <= lo) hi = lo + 1e-12 * std::max(1.0, std::abs(lo));
    const double width = (hi - lo) / bins;
    std::vector<double> mass(static_cast<std::size_t>(bins), 0.0);
    for (const auto& p : pop.particles) {
      const auto b = std::min(bins - 1, static_cast<int>((p.theta(k) - lo) / width));
      mass[static_cast<std::size_t>(b)] += p.weight / ws;
    }
    for (int b = 0; b < bins; ++b) {
      out << names[static_cast<std::size_t>(k)] << ',' << lo + b * width << ',' << lo + (b + 1) * width << ','
          << mass[static_cast<std::size_t>(b)] / width << '\n';
    }
  }
}

inline void write_trajectory_csv(const std::filesystem::path& path, const ModelSpec& model,
                                 const TimeSeriesDataset& data, std::span<const double> central) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(12);
  std::vector<double> initial = data.provenance.initial_state;
  if (initial.size() != model.state_dim) initial = model.default_initial_state;
  // Fine grid for smooth curves; observations are aligned to their own rows.
  std::vector<double> fine;
  const double t0 = data.times.front();
  const double t1 = data.times.back();
  for (int i = 0; i <= 200; ++i) fine.push_back(t0 + (t1 - t0) * i / 200.0);
  const Trajectory truth = simulate_model(model, model.true_params, initial, fine);
  std::optional<Trajectory> recon;
  try {
    recon = reconstruct_trajectory(model, central, initial, fine);
  } catch (const std::exception&) {
  }
  out << "kind,t";
  for (const auto& s : model.state_names) out << ',' << s;
  out << '\n';
  for (std::size_t i = 0; i < fine.size(); ++i) {
    out << "true," << fine[i];
    for (Eigen::Index k = 0; k < truth.states.rows(); ++k) out << ',' << truth.states(k, static_cast<Eigen::Index>(i));
    out << '\n';
  }
  if (recon) {
    for (std::size_t i = 0; i < fine.size(); ++i) {
      out << "reconstructed," << fine[i];
      for (Eigen::Index k = 0; k < recon->states.rows(); ++k) {
        out << ',' << recon->states(k, static_cast<Eigen::Index>(i));
      }
      out << '\n';
    }
  }
  for (std::size_t i = 0; i < data.length(); ++i) {
    out << "observed," << data.times[i];
    for (Eigen::Index k = 0; k < data.observations.rows(); ++k) {
      out << ',' << data.observations(k, static_cast<Eigen::Index>(i));
    }
    out << '\n';
  }
}

inline void write_boxplot_csv(const std::filesystem::path& path, const VariabilitySummary& v) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(12);
  out << "parameter,statistic,n,median,q1,q3,lower_whisker,upper_whisker,outliers\n";
  auto row = [&](const std::string& name, const char* stat, const BoxplotStats& b) {
    out << name << ',' << stat << ',' << b.n << ',' << b.median << ',' << b.q1 << ',' << b.q3 << ','
        << b.lower_whisker << ',' << b.upper_whisker << ',';
    for (std::size_t i = 0; i < b.outliers.size(); ++i) out << (i ? ";" : "") << b.outliers[i];
    out << '\n';
  };
  for (std::size_t k = 0; k < v.param_names.size(); ++k) {
    row(v.param_names[k], "mean", v.means[k]);
    row(v.param_names[k], "variance", v.variances[k]);
  }
}

}  // namespace detail

using ProgressFn = std::function<void(const CellResult&)>;

/// Executes every (algorithm, dataset, repetition) cell of a plan. When
/// `out_dir` is non-empty, writes report.json, data/, populations/ and plots/.
inline ExperimentReport run_experiment(const ExperimentPlan& plan, const std::filesystem::path& out_dir = {},
                                       const ProgressFn& progress = {}) {
  plan.validate();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  ExperimentReport report;
  report.plan = plan;
  const ModelSpec model = model_by_name(plan.model);
  if (plan.algorithms.empty()) {
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::ofstream(out_dir / "report.json") << to_json(report).dump(2) << '\n';
    }
    return report;
  }
  for (std::uint64_t s : plan.dataset_seeds) report.datasets.push_back(protocol_dataset(plan.model, s));

  for (std::size_t d = 0; d < report.datasets.size(); ++d) {
    for (std::size_t r = 0; r < plan.repetitions; ++r) {
      for (std::size_t a = 0; a < plan.algorithms.size(); ++a) {
        const std::uint64_t run_seed = derive_seed(derive_seed(plan.seed, d), r, a);
        CellResult cell = run_cell(plan, plan.algorithms[a], report.datasets[d], run_seed);
        cell.dataset_index = d;
        cell.dataset_seed = plan.dataset_seeds[d];
        cell.repetition = r;
        if (progress) progress(cell);
        report.cells.push_back(std::move(cell));
      }
    }
  }
  if (plan.repetitions > 1) {
    for (std::size_t d = 0; d < report.datasets.size(); ++d) {
      for (Algorithm a : plan.algorithms) report.variability.push_back(variability_study(report.cells, a, d));
    }
  }
  report.seconds = std::chrono::duration<double>(Clock::now() - start).count();

  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "populations");
    fs::create_directories(out_dir / "plots");
    fs::create_directories(out_dir / "data");
    for (std::size_t d = 0; d < report.datasets.size(); ++d) {
      save_dataset(report.datasets[d], out_dir / "data" / ("dataset_" + std::to_string(d + 1)));
    }
    for (const auto& c : report.cells) {
      if (c.populations.empty()) continue;
      const std::string stem = detail::cell_stem(c);
      write_populations_csv(out_dir / "populations" / (stem + ".csv"), c.populations, model.param_names);
      detail::write_histogram_csv(out_dir / "plots" / ("posterior_" + stem + ".csv"), c.populations.back(),
                                  model.param_names);
      if (plan.repetitions == 1) {
        std::vector<double> central;
        for (const auto& s : c.summary) central.push_back(s.mean);
        detail::write_trajectory_csv(out_dir / "plots" / ("trajectory_" + stem + ".csv"), model,
                                     report.datasets[c.dataset_index], central);
      }
    }
    for (const auto& v : report.variability) {
      if (v.runs == 0) continue;
      const std::string stem = cli_name(v.algorithm) + "_d" + std::to_string(v.dataset_index + 1);
      detail::write_boxplot_csv(out_dir / "plots" / ("variability_" + stem + ".csv"), v);
      detail::write_trajectory_csv(out_dir / "plots" / ("trajectory_median_" + stem + ".csv"), model,
                                   report.datasets[v.dataset_index], v.median_params);
    }
    std::ofstream(out_dir / "report.json") << to_json(report).dump(2) << '\n';
  }
  return report;
}

/// Plain-text tables: posterior means with CI per parameter, then run time
/// and accepted/generated per algorithm.
inline std::string format_report(const ExperimentReport& r) {
  std::ostringstream os;
  os << std::fixed;
  const ModelSpec model = model_by_name(r.plan.model);
  os << "experiment " << r.plan.name << " (" << model.name << "), " << r.cells.size() << " cells, "
     << r.failures() << " failed\n\n";
  if (r.plan.repetitions == 1) {
    os << std::left << std::setw(10) << "param" << std::setw(9) << "dataset";
    for (Algorithm a : r.plan.algorithms) os << std::setw(24) << display_name(a);
    os << '\n';
    for (std::size_t k = 0; k < model.param_dim; ++k) {
      for (std::size_t d = 0; d < r.datasets.size(); ++d) {
        os << std::setw(10) << (d == 0 ? model.param_names[k] : "") << std::setw(9) << (d + 1);
        for (Algorithm a : r.plan.algorithms) {
          std::ostringstream cell;
          cell << std::setprecision(4);
          for (const auto& c : r.cells) {
            if (c.algorithm == a && c.dataset_index == d) {
              if (c.summary.empty()) {
                cell << "failed";
              } else {
                cell << c.summary[k].mean << " +- " << c.summary[k].ci95 << (c.ok ? "" : " (partial)");
              }
            }
          }
          os << std::setw(24) << cell.str();
        }
        os << '\n';
      }
    }
    os << '\n' << std::setw(19) << "time [s] / acc/gen";
    for (Algorithm a : r.plan.algorithms) os << std::setw(24) << display_name(a);
    os << '\n';
    for (std::size_t d = 0; d < r.datasets.size(); ++d) {
      os << std::setw(19) << ("dataset " + std::to_string(d + 1));
      for (Algorithm a : r.plan.algorithms) {
        std::ostringstream cell;
        for (const auto& c : r.cells) {
          if (c.algorithm == a && c.dataset_index == d) {
            cell << std::fixed << std::setprecision(2) << c.seconds << " / " << c.accepted_total << '/' << c.generated;
          }
        }
        os << std::setw(24) << cell.str();
      }
      os << '\n';
    }
    for (const auto& c : r.cells) {
      if (!c.noise_sd.empty()) {
        os << "\nestimated noise sd (" << display_name(c.algorithm) << ", dataset " << c.dataset_index + 1 << "):";
        os << std::setprecision(4);
        for (double s : c.noise_sd) os << ' ' << s;
      }
    }
    os << '\n';
  }
  for (const auto& v : r.variability) {
    os << '\n' << display_name(v.algorithm) << ", dataset " << v.dataset_index + 1 << ": " << v.runs << " runs, "
       << v.failures << " failed\n";
    for (std::size_t k = 0; k < v.param_names.size(); ++k) {
      const auto& m = v.means[k];
      os << std::setprecision(4) << "  " << std::setw(8) << v.param_names[k] << " mean: median " << m.median << " IQR ["
         << m.q1 << ", " << m.q3 << "] whiskers [" << m.lower_whisker << ", " << m.upper_whisker << "] outliers "
         << m.outliers.size() << "; variance median " << std::setprecision(6) << v.variances[k].median << '\n';
    }
  }
  return os.str();
}

}  // namespace gpabc
