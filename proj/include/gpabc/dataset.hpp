#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gpabc/models.hpp"
#include "gpabc/rng.hpp"

namespace gpabc {

struct NoiseRule {
  enum class Kind { Absolute, Relative };
  Kind kind = Kind::Absolute;
  /// Absolute: noise standard deviation per dimension.
  /// Relative: fraction of each dimension's empirical trajectory standard deviation.
  /// A single value is broadcast to every dimension.
  std::vector<double> values{0.0};

  static NoiseRule absolute(std::vector<double> sd) { return {Kind::Absolute, std::move(sd)}; }
  static NoiseRule relative(std::vector<double> fraction) { return {Kind::Relative, std::move(fraction)}; }

  [[nodiscard]] double value(std::size_t k) const {
    if (values.empty()) throw std::invalid_argument("noise rule has no values");
    return values.size() == 1 ? values[0] : values.at(k);
  }
};

struct DatasetProvenance {
  std::string model;
  std::vector<double> params;
  std::vector<double> initial_state;
  std::uint64_t seed = 0;
  NoiseRule noise_rule;
};

struct TimeSeriesDataset {
  std::vector<double> times;
  Eigen::MatrixXd observations;       // K x L
  std::vector<double> noise_sd_true;  // empty for non-synthetic data
  DatasetProvenance provenance;

  [[nodiscard]] std::size_t length() const { return times.size(); }
  [[nodiscard]] std::size_t state_dim() const { return static_cast<std::size_t>(observations.rows()); }

  void validate() const {
    if (times.empty()) throw std::invalid_argument("dataset has no time points");
    if (static_cast<std::size_t>(observations.cols()) != times.size()) {
      throw std::invalid_argument("dataset observation columns do not match the time grid");
    }
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (!(times[i] > times[i - 1])) throw std::invalid_argument("dataset times must be strictly increasing");
    }
    if (!observations.allFinite()) throw std::invalid_argument("dataset contains non-finite observations");
  }
};

/// Sample standard deviation of each row.
inline std::vector<double> row_std(const Eigen::MatrixXd& m) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()), 0.0);
  const auto n = static_cast<double>(m.cols());
  if (m.cols() < 2) return out;
  for (Eigen::Index k = 0; k < m.rows(); ++k) {
    const double mean = m.row(k).mean();
    out[static_cast<std::size_t>(k)] = std::sqrt((m.row(k).array() - mean).square().sum() / (n - 1.0));
  }
  return out;
}

/// Integrate the model, then add i.i.d. zero-mean Gaussian noise per dimension.
inline TimeSeriesDataset generate_dataset(const ModelSpec& model, std::span<const double> params,
                                          std::span<const double> initial, std::span<const double> t_grid,
                                          const NoiseRule& noise, std::uint64_t seed,
                                          const IntegratorOptions& opt = {}) {
  const Trajectory traj = simulate_model(model, params, initial, t_grid, opt);
  TimeSeriesDataset ds;
  ds.times = traj.times;
  ds.observations = traj.states;
  const auto K = model.state_dim;
  ds.noise_sd_true.resize(K);
  const auto spread = row_std(traj.states);
  for (std::size_t k = 0; k < K; ++k) {
    const double v = noise.value(k);
    ds.noise_sd_true[k] = noise.kind == NoiseRule::Kind::Absolute ? v : v * spread[k];
    if (!(ds.noise_sd_true[k] >= 0.0)) throw std::invalid_argument("noise standard deviation must be >= 0");
  }
  Rng rng(derive_seed(seed, 0x0da7a5e7ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index i = 0; i < ds.observations.cols(); ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      ds.observations(static_cast<Eigen::Index>(k), i) += ds.noise_sd_true[k] * gauss(rng);
    }
  }
  ds.provenance = {model.name, {params.begin(), params.end()}, {initial.begin(), initial.end()}, seed, noise};
  return ds;
}

inline nlohmann::json to_json(const NoiseRule& r) {
  return {{"kind", r.kind == NoiseRule::Kind::Absolute ? "absolute" : "relative"}, {"values", r.values}};
}

inline NoiseRule noise_rule_from_json(const nlohmann::json& j) {
  NoiseRule r;
  r.kind = j.at("kind").get<std::string>() == "relative" ? NoiseRule::Kind::Relative : NoiseRule::Kind::Absolute;
  r.values = j.at("values").get<std::vector<double>>();
  return r;
}

/// Writes `<stem>.csv` (columns t, x1..xK) and `<stem>.json` (provenance sidecar).
inline void save_dataset(const TimeSeriesDataset& ds, const std::filesystem::path& stem) {
  ds.validate();
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  auto csv_path = stem;
  csv_path += ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv.precision(17);
  csv << 't';
  for (std::size_t k = 0; k < ds.state_dim(); ++k) csv << ",x" << (k + 1);
  csv << '\n';
  for (std::size_t i = 0; i < ds.length(); ++i) {
    csv << ds.times[i];
    for (std::size_t k = 0; k < ds.state_dim(); ++k) {
      csv << ',' << ds.observations(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
    }
    csv << '\n';
  }
  auto json_path = stem;
  json_path += ".json";
  nlohmann::json side = {{"model", ds.provenance.model},
                         {"params", ds.provenance.params},
                         {"initial_state", ds.provenance.initial_state},
                         {"seed", ds.provenance.seed},
                         {"noise_rule", to_json(ds.provenance.noise_rule)},
                         {"noise_sd", ds.noise_sd_true},
                         {"length", ds.length()},
                         {"state_dim", ds.state_dim()}};
  std::ofstream(json_path) << side.dump(2) << '\n';
}

/// Reads a dataset CSV; a JSON sidecar next to it (same stem) is loaded when present.
inline TimeSeriesDataset load_dataset(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("cannot read " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(csv_path.string() + ": empty file");
  std::vector<std::vector<double>> rows;
  std::size_t width = 0;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(csv_path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (width == 0) width = row.size();
    if (row.size() != width || width < 2) {
      throw std::runtime_error(csv_path.string() + ":" + std::to_string(lineno) + ": inconsistent column count");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(csv_path.string() + ": no data rows");
  TimeSeriesDataset ds;
  ds.observations.resize(static_cast<Eigen::Index>(width - 1), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ds.times.push_back(rows[i][0]);
    for (std::size_t k = 1; k < width; ++k) {
      ds.observations(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(i)) = rows[i][k];
    }
  }
  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  if (std::filesystem::exists(sidecar)) {
    const auto j = nlohmann::json::parse(std::ifstream(sidecar));
    ds.provenance.model = j.value("model", std::string{});
    ds.provenance.params = j.value("params", std::vector<double>{});
    ds.provenance.initial_state = j.value("initial_state", std::vector<double>{});
    ds.provenance.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("noise_rule")) ds.provenance.noise_rule = noise_rule_from_json(j.at("noise_rule"));
    ds.noise_sd_true = j.value("noise_sd", std::vector<double>{});
  }
  ds.validate();
  return ds;
}

}  // namespace gpabc
