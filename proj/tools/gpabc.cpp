// Command-line front end: data generation, GP fitting, single inference runs
// and the built-in benchmark experiments.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "gpabc/gpabc.hpp"

namespace fs = std::filesystem;
using namespace gpabc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("ABC_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only honour it when asked for.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed) {
  if (seed) return *seed;
  std::random_device rd;
  const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  std::cout << "seed: " << s << '\n';
  return s;
}

ModelSpec require_model(const std::string& name) {
  try {
    return model_by_name(name);
  } catch (const std::invalid_argument&) {
    std::string list;
    for (const auto& m : model_names()) list += (list.empty() ? "" : ", ") + m;
    throw UsageError("unknown model '" + name + "'; available models: " + list);
  }
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw UsageError("not a number: '" + cell + "'");
    }
  }
  return out;
}

/// "a:b:step" or a comma-separated list of times.
std::vector<double> parse_grid(const std::string& text) {
  if (text.find(':') == std::string::npos) return parse_list(text);
  std::vector<double> parts;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ':')) parts.push_back(parse_list(cell).at(0));
  if (parts.size() != 3 || !(parts[2] > 0.0) || !(parts[1] > parts[0])) {
    throw UsageError("grid must be start:stop:step with stop > start and step > 0");
  }
  std::vector<double> grid;
  const auto n = static_cast<long>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9));
  for (long i = 0; i <= n; ++i) grid.push_back(parts[0] + static_cast<double>(i) * parts[2]);
  return grid;
}

void print_summary(const std::vector<ParameterSummary>& summary) {
  std::cout << std::fixed;
  for (const auto& s : summary) {
    std::cout << "  " << std::left << std::setw(8) << s.name << std::right << std::setprecision(5) << std::setw(12)
              << s.mean << " +- " << std::setprecision(5) << s.ci95 << "   [2.5%: " << s.p025 << ", 97.5%: " << s.p975
              << "]\n";
  }
  std::cout.unsetf(std::ios::fixed);
}

// --------------------------------------------------------------------------

struct GenDataArgs {
  std::string model;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> noise;
  std::string grid;
};

int cmd_gen_data(const GenDataArgs& a) {
  const ModelSpec model = require_model(a.model);
  auto proto = model_protocol(model.name);
  if (a.noise) proto.noise.values = {*a.noise};
  if (!a.grid.empty()) proto.grid = parse_grid(a.grid);
  const std::uint64_t seed = resolve_seed(a.seed);
  const auto ds = generate_dataset(model, model.true_params, model.default_initial_state, proto.grid, proto.noise, seed);
  const fs::path stem = fs::path(a.out) / (model.name + "_seed" + std::to_string(seed));
  save_dataset(ds, stem);
  std::cout << "wrote " << stem.string() << ".csv (" << ds.length() << " rows, " << ds.state_dim() << " states)\n";
  std::cout << "noise sd:";
  for (double s : ds.noise_sd_true) std::cout << ' ' << s;
  std::cout << '\n';
  return kExitOk;
}

struct FitGpArgs {
  std::string data;
  std::string model;
  std::string kernel;
  std::size_t restarts = 10;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_fit_gp(const FitGpArgs& a) {
  const auto ds = load_dataset(a.data);
  KernelFamily family = KernelFamily::SE;
  if (!a.kernel.empty()) {
    family = kernel_family_from_string(a.kernel);
  } else if (!a.model.empty()) {
    family = require_model(a.model).gp_kernel;
  } else if (!ds.provenance.model.empty()) {
    family = require_model(ds.provenance.model).gp_kernel;
  }
  const std::uint64_t seed = resolve_seed(a.seed);
  const SmoothedSystem sm = smooth_dataset(ds, family, a.restarts, seed);
  std::cout << "fitted " << sm.state_dim() << " GPs (" << to_string(family) << ") in " << sm.fit_seconds << " s\n";
  for (std::size_t k = 0; k < sm.fits.size(); ++k) {
    std::cout << "  x" << k + 1 << ": noise sd " << sm.fits[k].noise_sd << ", log likelihood "
              << sm.fits[k].log_likelihood << ", restarts ok " << sm.fits[k].restarts_succeeded << '/'
              << sm.fits[k].restarts << '\n';
  }
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    nlohmann::json fits = nlohmann::json::array();
    for (const auto& f : sm.fits) fits.push_back(to_json(f));
    std::ofstream(fs::path(a.out) / "gp.json") << fits.dump(2) << '\n';
    std::ofstream csv(fs::path(a.out) / "smoothed.csv");
    csv.precision(17);
    csv << 't';
    for (std::size_t k = 0; k < sm.state_dim(); ++k) csv << ",xhat" << k + 1 << ",v" << k + 1 << ",vvar" << k + 1;
    csv << '\n';
    for (std::size_t i = 0; i < sm.length(); ++i) {
      csv << sm.eval_times[i];
      for (std::size_t k = 0; k < sm.state_dim(); ++k) {
        const auto r = static_cast<Eigen::Index>(k);
        const auto c = static_cast<Eigen::Index>(i);
        csv << ',' << sm.state_mean(r, c) << ',' << sm.velocity_mean(r, c) << ',' << sm.velocity_var(r, c);
      }
      csv << '\n';
    }
    std::cout << "wrote " << (fs::path(a.out) / "gp.json").string() << " and smoothed.csv\n";
  }
  return kExitOk;
}

struct InferArgs {
  std::string data;
  std::string model;
  std::string method;
  std::size_t particles = 100;
  std::optional<std::size_t> generations;
  double alpha = 0.1;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t restarts = 10;
  std::string kernel;
  std::string initial;
  std::size_t max_attempts = 1'000'000;
  unsigned jobs = 1;
};

int cmd_infer(const InferArgs& a) {
  const ModelSpec model = require_model(a.model);
  Algorithm algorithm{};
  try {
    algorithm = algorithm_from_string(a.method);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto ds = load_dataset(a.data);
  if (ds.state_dim() != model.state_dim) {
    throw UsageError("dataset has " + std::to_string(ds.state_dim()) + " states but model " + model.name + " has " +
                     std::to_string(model.state_dim));
  }
  ExperimentPlan plan;
  plan.model = model.name;
  plan.n_particles = a.particles;
  plan.alpha = a.alpha;
  plan.restarts = a.restarts;
  plan.max_attempts = a.max_attempts;
  plan.jobs = a.jobs;
  if (a.generations) {
    plan.generations_gp = *a.generations;
    plan.generations_integration = *a.generations;
  }
  if (!a.kernel.empty()) plan.kernel_family = kernel_family_from_string(a.kernel);
  try {
    plan.sampler_config(algorithm, 0).validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid sampler configuration: ") + e.what());
  }
  TimeSeriesDataset data = ds;
  if (!a.initial.empty()) data.provenance.initial_state = parse_list(a.initial);
  const std::uint64_t seed = resolve_seed(a.seed);

  spdlog::info("{} on {} ({} points), N={}, S_MC={}", display_name(algorithm), model.name, data.length(),
               plan.n_particles, plan.generations_for(algorithm));
  CellResult cell = run_cell(plan, algorithm, data, seed);

  const fs::path out = a.out.empty() ? fs::path(".") : fs::path(a.out);
  fs::create_directories(out);
  if (!cell.populations.empty()) write_populations_csv(out / "populations.csv", cell.populations, model.param_names);
  nlohmann::json report = to_json(cell);
  report["config"] = to_json(plan.sampler_config(algorithm, seed));
  report["model"] = model.name;
  report["data"] = a.data;
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& p : cell.populations) {
    gens.push_back({{"tau", p.index},
                    {"tolerance", std::isfinite(p.tolerance) ? nlohmann::json(p.tolerance) : nlohmann::json("inf")},
                    {"accepted", p.accepted_count()},
                    {"generated", p.generated_count},
                    {"seconds", p.seconds}});
  }
  report["generations"] = gens;
  std::ofstream(out / "report.json") << report.dump(2) << '\n';

  if (!cell.summary.empty()) {
    std::cout << display_name(algorithm) << " posterior (final population " << cell.populations.back().index << "):\n";
    print_summary(cell.summary);
  }
  std::cout << "time " << cell.seconds << " s";
  if (uses_gp(algorithm)) std::cout << " (GP fit " << cell.gp_fit_seconds << " s)";
  std::cout << ", accepted/generated " << cell.accepted_total << '/' << cell.generated << '\n';
  std::cout << "wrote " << (out / "report.json").string() << '\n';
  if (!cell.ok) {
    spdlog::error("inference failed: {}", cell.error);
    return kExitRuntime;
  }
  return kExitOk;
}

struct ReproduceArgs {
  std::string experiment;
  std::string plan_file;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> repetitions;
  unsigned jobs = 1;
};

int cmd_reproduce(const ReproduceArgs& a) {
  ExperimentPlan plan;
  if (!a.plan_file.empty()) {
    std::ifstream in(a.plan_file);
    if (!in) throw UsageError("cannot read plan file " + a.plan_file);
    try {
      plan = plan_from_json(nlohmann::json::parse(in));
    } catch (const std::exception& e) {
      throw UsageError(a.plan_file + ": " + e.what());
    }
  } else if (!a.experiment.empty()) {
    try {
      plan = paper_plan(a.experiment);
    } catch (const std::invalid_argument&) {
      std::string list;
      for (const auto& e : experiment_names()) list += (list.empty() ? "" : ", ") + e;
      throw UsageError("unknown experiment '" + a.experiment + "'; available: " + list);
    }
  } else {
    throw UsageError("reproduce needs --experiment or --plan");
  }
  plan.seed = resolve_seed(a.seed);
  plan.jobs = a.jobs;
  if (a.repetitions) plan.repetitions = *a.repetitions;
  const fs::path out = a.out.empty() ? fs::path("runs") / plan.name : fs::path(a.out);
  spdlog::info("running {}: {} algorithms x {} datasets x {} repetitions", plan.name, plan.algorithms.size(),
               plan.dataset_seeds.size(), plan.repetitions);
  const auto report = run_experiment(plan, out, [](const CellResult& c) {
    if (c.ok) {
      spdlog::debug("{} dataset {} run {}: {:.2f} s, {}/{}", display_name(c.algorithm), c.dataset_index + 1,
                    c.repetition + 1, c.seconds, c.accepted_total, c.generated);
    } else {
      spdlog::warn("{} dataset {} run {} failed: {}", display_name(c.algorithm), c.dataset_index + 1, c.repetition + 1,
                   c.error);
    }
  });
  std::cout << format_report(report);
  std::cout << "wrote " << (out / "report.json").string() << '\n';
  return report.failures() == 0 ? kExitOk : kExitRuntime;
}

int cmd_list_models() {
  for (const auto& name : model_names()) {
    const ModelSpec m = model_by_name(name);
    const auto proto = model_protocol(name);
    std::cout << m.name << (m.is_delayed() ? " (delay)" : "") << ": " << m.state_dim << " states, kernel "
              << to_string(m.gp_kernel) << ", S_MC " << proto.generations_integration << " integration / "
              << proto.generations_gp << " GP\n";
    for (std::size_t i = 0; i < m.param_dim; ++i) {
      std::cout << "  " << std::left << std::setw(6) << m.param_names[i] << std::right << " prior U(" << m.priors[i].lo
                << ", " << m.priors[i].hi << "), true " << m.true_params[i] << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Approximate Bayesian computation for ODE/DDE models with GP gradient matching"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset for a benchmark model");
  gen_cmd->add_option("--model", gen.model, "Model name")->required();
  gen_cmd->add_option("--seed", gen.seed, "Noise seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--noise", gen.noise, "Noise level (absolute sd, or fraction of trajectory sd for hes1)");
  gen_cmd->add_option("--grid", gen.grid, "Time grid as start:stop:step or t1,t2,...");

  FitGpArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-gp", "Fit per-state GPs and report hyperparameters");
  fit_cmd->add_option("--data", fit.data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--model", fit.model, "Model name (selects the default kernel)");
  fit_cmd->add_option("--kernel", fit.kernel, "Kernel family: se or mlp");
  fit_cmd->add_option("--restarts", fit.restarts, "Optimizer restarts")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--seed", fit.seed, "Restart seed");
  fit_cmd->add_option("--out", fit.out, "Output directory");

  InferArgs inf;
  auto* inf_cmd = app.add_subcommand("infer", "Run one ABC-SMC inference");
  inf_cmd->add_option("--data", inf.data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  inf_cmd->add_option("--model", inf.model, "Model name")->required();
  inf_cmd->add_option("--method", inf.method, "abc-smc-comp | abc-smc-olcm | gp-abc-smc | gp-abc-olcm")->required();
  inf_cmd->add_option("--particles", inf.particles, "Particles per population");
  inf_cmd->add_option("--generations", inf.generations, "Index of the final population (S_MC)");
  inf_cmd->add_option("--alpha", inf.alpha, "Tolerance quantile");
  inf_cmd->add_option("--seed", inf.seed, "Sampler seed");
  inf_cmd->add_option("--out", inf.out, "Output directory");
  inf_cmd->add_option("--restarts", inf.restarts, "GP optimizer restarts")->check(CLI::PositiveNumber);
  inf_cmd->add_option("--kernel", inf.kernel, "GP kernel family: se or mlp");
  inf_cmd->add_option("--initial", inf.initial, "Initial state / constant history for integration, comma separated");
  inf_cmd->add_option("--max-attempts", inf.max_attempts, "Proposal cap per generation")->check(CLI::PositiveNumber);
  inf_cmd->add_option("--jobs", inf.jobs, "Worker threads")->check(CLI::PositiveNumber);

  ReproduceArgs rep;
  auto* rep_cmd = app.add_subcommand("reproduce", "Run a benchmark experiment end to end");
  rep_cmd->add_option("--experiment", rep.experiment, "lotka | hes1 | cascade | lotka-variability | hes1-variability");
  rep_cmd->add_option("--plan", rep.plan_file, "Experiment plan JSON file")->check(CLI::ExistingFile);
  rep_cmd->add_option("--out", rep.out, "Output directory");
  rep_cmd->add_option("--seed", rep.seed, "Master seed");
  rep_cmd->add_option("--repetitions", rep.repetitions, "Override repetitions per cell")->check(CLI::PositiveNumber);
  rep_cmd->add_option("--jobs", rep.jobs, "Worker threads")->check(CLI::PositiveNumber);

  app.add_subcommand("list-models", "List benchmark models");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (fit_cmd->parsed()) return cmd_fit_gp(fit);
    if (inf_cmd->parsed()) return cmd_infer(inf);
    if (rep_cmd->parsed()) return cmd_reproduce(rep);
    return cmd_list_models();
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
}
