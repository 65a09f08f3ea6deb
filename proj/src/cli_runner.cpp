#include "mfrs/cli_runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mfrs/errors.hpp"
#include "mfrs/problem_spec.hpp"

namespace mfrs {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitMalformed = 3;
constexpr int kExitNoConvergence = 4;
constexpr const char* kVersion = "0.1.0";

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json kappa_bounds_json(const KappaBounds& kb) {
  return json{{"kappa_x", kb.kappa_x},
              {"kappa_xmu", kb.kappa_xmu},
              {"kappa_y", kb.kappa_y},
              {"kappa_ynu", kb.kappa_ynu},
              {"K", kb.K},
              {"kappa_bar", kb.kappa_bar},
              {"kappa_under", kb.kappa_under},
              {"feasible_kappa", kb.feasible_kappa},
              {"window_ok", kb.window_ok}};
}

json pd_json(const PDReport& rep) {
  json checks = json::array();
  for (const auto& chk : rep.checks)
    checks.push_back(json{{"block", chk.name},
                          {"regime", chk.regime},
                          {"piece", chk.piece},
                          {"min_eigenvalue", chk.min_eigenvalue},
                          {"pass", chk.pass}});
  return json{{"pass", rep.pass},
              {"delta", rep.delta},
              {"first_failure", rep.first_failure},
              {"checks", checks}};
}

json structure_json(const GameStructureReport& rep) {
  return json{{"pass", rep.pass},
              {"bar_blocks_zero", rep.bar_blocks_zero},
              {"scaling_ok", rep.scaling_ok},
              {"cross_identity_ok", rep.cross_identity_ok},
              {"worst_scaling_error", rep.worst_scaling_error},
              {"worst_identity_error", rep.worst_identity_error},
              {"pd", pd_json(rep.pd)},
              {"first_failure", rep.first_failure}};
}

// Collects written files with their content hashes for the manifest.
class OutputSink {
 public:
  explicit OutputSink(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void write(const std::string& name, const std::string& bytes) {
    std::ofstream out(dir_ / name, std::ios::binary);
    out << bytes;
    entries_.push_back(json{{"file", name}, {"hash", fnv1a_hex(bytes)}});
  }

  void manifest(const std::string& spec_hash, std::uint64_t seed, double seconds) {
    json man{{"spec_hash", spec_hash},
             {"version", kVersion},
             {"seed", seed},
             {"timing_seconds", seconds},
             {"outputs", entries_}};
    std::ofstream out(dir_ / "manifest.json");
    out << man.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  json entries_ = json::array();
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::malformed_spec, "cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int particle_stride(int particles) { return std::max(1, particles / 16); }

std::string trajectory_csv(const std::vector<ParticleEnsemble>& ensembles,
                           const std::function<const Eigen::MatrixXd&(int sc, int k)>& field,
                           int cols, const std::string& prefix) {
  std::ostringstream os;
  os << "time,scenario,particle";
  for (int c = 0; c < cols; ++c) os << "," << prefix << c;
  os << "\n";
  const TimeGrid grid = ensembles[0].grid;
  const int stride = particle_stride(ensembles[0].particles());
  for (std::size_t sc = 0; sc < ensembles.size(); ++sc) {
    for (int k = 0; k < grid.nodes(); ++k) {
      const Eigen::MatrixXd& block = field(static_cast<int>(sc), k);
      for (int i = 0; i < block.rows(); i += stride) {
        os << fmt(grid.node(k)) << "," << sc << "," << i;
        for (int c = 0; c < cols; ++c) os << "," << fmt(block(i, c));
        os << "\n";
      }
    }
  }
  return os.str();
}

std::string iterations_csv(const std::vector<SweepRecord>& history) {
  std::ostringstream os;
  os << "sweep,lambda,weighted_error,ratio\n";
  for (const auto& rec : history)
    os << rec.sweep << "," << fmt(rec.lambda) << "," << fmt(rec.weighted_error) << ","
       << fmt(rec.ratio) << "\n";
  return os.str();
}

std::string residuals_csv(const StationarityReport& rep) {
  std::ostringstream os;
  os << "time,residual_norm\n";
  for (int k = 0; k < rep.node_norms.size(); ++k)
    os << fmt(rep.grid.node(k)) << "," << fmt(rep.node_norms(k)) << "\n";
  return os.str();
}

json check_report(const ProblemSpec& spec) {
  json rep;
  rep["dims_ok"] = true;  // parse already enforced consistency
  if (spec.is_game) {
    const GameStructureReport st = check_game_structure(spec.game);
    rep["problem"] = "game";
    rep["structure"] = structure_json(st);
    rep["kappa_bounds_game"] =
        kappa_bounds_json(compute_game_kappa_bounds(spec.game, spec.kappa, spec.kappa_star));
    rep["pass"] = st.pass;
  } else {
    const PDReport pd = check_positive_definiteness(spec.coeffs);
    rep["problem"] = "control";
    rep["pd"] = pd_json(pd);
    if (pd.pass) {
      const KappaBounds kb = compute_kappa_bounds(eliminate_cross_terms(spec.coeffs),
                                                  spec.kappa, spec.kappa_star);
      rep["kappa_bounds"] = kappa_bounds_json(kb);
      rep["window_ok"] = kb.window_ok;
    }
    rep["pass"] = pd.pass;
  }
  return rep;
}

int cmd_check(const std::string& spec_path) {
  const ProblemSpec spec = load_problem_spec(spec_path);
  const json rep = check_report(spec);
  std::cout << rep.dump(2) << "\n";
  return rep["pass"].get<bool>() ? kExitOk : kExitValidation;
}

struct SolveArtifacts {
  bool converged = false;
  double residual_weighted = 0.0;
  double gap = 0.0;
  double gain = std::numeric_limits<double>::quiet_NaN();
  json results;
};

SolveArtifacts solve_once(const ProblemSpec& spec, int threads, OutputSink* sink) {
  SolveArtifacts art;
  const LQNumerics num = make_numerics(spec, threads);
  if (!spec.is_game) {
    ControlSolveResult res =
        solve_control_problem(spec.coeffs, spec.x0, spec.initial_regime, num);
    art.converged = res.fbsde.converged;
    art.residual_weighted = res.stationarity.weighted_norm;
    art.gap = res.fbsde.final_error;
    art.gain = res.gain_estimate;

    json results{{"schema_version", 1},
                 {"problem", "control"},
                 {"J", res.cost.total},
                 {"SE", res.cost.std_error},
                 {"tail_bound", res.cost.tail_bound},
                 {"components",
                  json{{"state_quadratic", res.cost.state_quadratic},
                       {"control_quadratic", res.cost.control_quadratic},
                       {"cross", res.cost.cross},
                       {"mean_field_quadratic", res.cost.mean_field_quadratic},
                       {"linear", res.cost.linear}}},
                 {"gain_estimates", json{{"pooled", res.gain_estimate}}},
                 {"residual_norms", json{{"weighted", res.stationarity.weighted_norm}}},
                 {"kappa_bounds", kappa_bounds_json(res.bounds)},
                 {"iterations", res.fbsde.sweeps},
                 {"converged", res.fbsde.converged},
                 {"final_weighted_error", res.fbsde.final_error},
                 {"horizon", res.grid.T}};
    art.results = results;
    if (sink) {
      sink->write("results.json", results.dump(2) + "\n");
      sink->write("state.csv",
                  trajectory_csv(res.fbsde.ensembles,
                                 [&](int sc, int k) -> const Eigen::MatrixXd& {
                                   return res.fbsde.ensembles[sc].states[k];
                                 },
                                 spec.dims.n, "x"));
      sink->write("control.csv",
                  trajectory_csv(res.fbsde.ensembles,
                                 [&](int sc, int k) -> const Eigen::MatrixXd& {
                                   return res.u.values[sc][k];
                                 },
                                 spec.dims.m, "u"));
      sink->write("iterations.csv", iterations_csv(res.fbsde.history));
      sink->write("residuals.csv", residuals_csv(res.stationarity));
    }
  } else {
    EquilibriumReport rep =
        solve_game_fixed_point(spec.game, spec.x0, spec.initial_regime, num, spec.game_mode);
    const StationarityReport st = game_stationarity_residual(spec.game, rep, spec.kappa);
    const GameCostResult cost =
        game_cost(spec.game, rep.u, rep.fbsde.ensembles, rep.profile, spec.kappa);
    art.converged = rep.converged;
    art.residual_weighted = st.weighted_norm;
    art.gap = rep.fixed_point_gap;

    json results{{"schema_version", 1},
                 {"problem", "game"},
                 {"J", cost.total},
                 {"SE", cost.std_error},
                 {"fixed_point_gap", rep.fixed_point_gap},
                 {"consistency_gap", rep.consistency_gap},
                 {"residual_norms", json{{"weighted", st.weighted_norm}}},
                 {"kappa_bounds", kappa_bounds_json(rep.bounds)},
                 {"structure", structure_json(rep.structure)},
                 {"iterations", rep.fbsde.sweeps},
                 {"outer_iterations", rep.outer_iterations},
                 {"converged", rep.converged},
                 {"horizon", rep.grid.T}};
    std::string nash_csv;
    if (sink && spec.nash_deviations > 0) {
      NashDeviationTable table = nash_deviation_test(
          spec.game, rep, spec.x0, spec.initial_regime, num, spec.nash_deviations,
          {0.1, 0.3}, spec.seed + 1);
      std::ostringstream os;
      os << "trial,eps,cost_equilibrium,cost_deviation,se_difference,pass\n";
      for (const auto& row : table.rows)
        os << row.trial << "," << fmt(row.eps) << "," << fmt(row.cost_equilibrium) << ","
           << fmt(row.cost_deviation) << "," << fmt(row.se_difference) << ","
           << (row.pass ? 1 : 0) << "\n";
      nash_csv = os.str();
      results["nash_all_pass"] = table.all_pass;
    }
    art.results = results;
    if (sink) {
      sink->write("results.json", results.dump(2) + "\n");
      sink->write("state.csv",
                  trajectory_csv(rep.fbsde.ensembles,
                                 [&](int sc, int k) -> const Eigen::MatrixXd& {
                                   return rep.fbsde.ensembles[sc].states[k];
                                 },
                                 spec.dims.n, "x"));
      sink->write("control.csv",
                  trajectory_csv(rep.fbsde.ensembles,
                                 [&](int sc, int k) -> const Eigen::MatrixXd& {
                                   return rep.u.values[sc][k];
                                 },
                                 spec.dims.m, "u"));
      sink->write("iterations.csv", iterations_csv(rep.fbsde.history));
      sink->write("residuals.csv", residuals_csv(st));
      if (!nash_csv.empty()) sink->write("nash_deviations.csv", nash_csv);
    }
  }
  return art;
}

int cmd_solve(const std::string& spec_path, const std::string& out_dir, bool force, int threads,
              std::optional<std::uint64_t> seed_override) {
  ProblemSpec spec = load_problem_spec(spec_path);
  if (seed_override) spec.seed = *seed_override;

  const json check = check_report(spec);
  if (!check["pass"].get<bool>() && !force) {
    std::cerr << check.dump(2) << "\n";
    std::cerr << "validation failed; pass --force to solve anyway\n";
    return kExitValidation;
  }

  const auto start = std::chrono::steady_clock::now();
  OutputSink sink{fs::path(out_dir)};
  SolveArtifacts art;
  art = solve_once(spec, threads, &sink);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  sink.manifest(fnv1a_hex(read_file(spec_path)), spec.seed, seconds);
  return art.converged ? kExitOk : kExitNoConvergence;
}

int cmd_convergence(const std::string& spec_path, const std::string& out_dir,
                    const std::string& ladder, bool force, int threads) {
  ProblemSpec spec = load_problem_spec(spec_path);
  std::vector<std::pair<double, int>> rungs;
  std::stringstream ss(ladder);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.empty()) continue;
    double dt = 0.0;
    int particles = 0;
    if (std::sscanf(item.c_str(), "%lf,%d", &dt, &particles) != 2 || dt <= 0.0 || particles < 1)
      fail(Errc::malformed_spec, "ladder rung '" + item + "' is not 'dt,particles'");
    rungs.emplace_back(dt, particles);
  }
  if (rungs.empty()) fail(Errc::malformed_spec, "refinement ladder is empty");

  const json check = check_report(spec);
  if (!check["pass"].get<bool>() && !force) {
    std::cerr << check.dump(2) << "\n";
    return kExitValidation;
  }

  OutputSink sink{fs::path(out_dir)};
  std::ostringstream os;
  os << "rung,dt,particles,residual_weighted,fixed_point_gap,gain_estimate,runtime_seconds,"
        "ratio\n";
  bool all_converged = true;
  double prev_residual = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t rg = 0; rg < rungs.size(); ++rg) {
    ProblemSpec rung_spec = spec;
    rung_spec.dt = rungs[rg].first;
    rung_spec.particles = rungs[rg].second;
    const auto rung_start = std::chrono::steady_clock::now();
    SolveArtifacts art = solve_once(rung_spec, threads, nullptr);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - rung_start).count();
    all_converged &= art.converged;
    const double ratio = rg == 0 ? 0.0 : art.residual_weighted / prev_residual;
    os << rg << "," << fmt(rungs[rg].first) << "," << rungs[rg].second << ","
       << fmt(art.residual_weighted) << "," << fmt(art.gap) << "," << fmt(art.gain) << ","
       << fmt(seconds) << "," << fmt(ratio) << "\n";
    prev_residual = art.residual_weighted;
  }
  sink.write("ladder.csv", os.str());
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  sink.manifest(fnv1a_hex(read_file(spec_path)), spec.seed, seconds);
  return all_converged ? kExitOk : kExitNoConvergence;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Conditional McKean-Vlasov FBSDE solver for mean-field LQ control and games"};
  app.require_subcommand(1);

  std::string spec_path, out_dir = ".", ladder;
  bool force = false;
  int threads = 1;
  std::optional<std::uint64_t> seed_override;
  std::uint64_t seed_value = 0;
  bool have_seed = false;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--spec", spec_path, "problem spec JSON")->required();
    cmd->add_option("--threads", threads, "worker threads (results are thread-count invariant)");
    if (needs_out) cmd->add_option("--out", out_dir, "output directory")->required();
  };

  CLI::App* check = app.add_subcommand("check", "validate a problem spec");
  add_common(check, false);

  CLI::App* solve = app.add_subcommand("solve", "solve and write result files");
  add_common(solve, true);
  solve->add_flag("--force", force, "solve even if validation fails");
  solve->add_option("--seed-override", seed_value, "replace the spec seed")
      ->each([&](const std::string&) { have_seed = true; });

  CLI::App* conv = app.add_subcommand("convergence", "refinement ladder");
  add_common(conv, true);
  conv->add_flag("--force", force, "run even if validation fails");
  conv->add_option("--ladder", ladder, "semicolon-separated rungs 'dt,particles'")->required();

  // CLI11 wants argv-style input, last argument first
  std::vector<const char*> argv;
  argv.push_back("mfrs");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return kExitOk;
    }
    std::cerr << e.what() << "\n";
    return kExitMalformed;
  }

  try {
    if (have_seed) seed_override = seed_value;
    if (app.got_subcommand(check)) return cmd_check(spec_path);
    if (app.got_subcommand(solve)) return cmd_solve(spec_path, out_dir, force, threads,
                                                    seed_override);
    if (app.got_subcommand(conv)) return cmd_convergence(spec_path, out_dir, ladder, force,
                                                         threads);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == Errc::malformed_spec) return kExitMalformed;
    if (e.code() == Errc::no_convergence || e.code() == Errc::step_floor_reached)
      return kExitNoConvergence;
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMalformed;
  }
  return kExitMalformed;
}

}  // namespace mfrs
