// Command-line front end: simulation pipeline, dictionary training, zero-shot
// testing, flight-controller training, hyperparameter sweeps and plotting.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <uavll/harness.hpp>
#include <uavll/plot.hpp>

#ifndef UAVLL_GIT_DESCRIBE
#define UAVLL_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace uavll;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> controllers;
  std::optional<int> episodes;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_controller) {
  cmd->add_option("--config", a.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", a.seed, "master seed, overrides the config");
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  if (with_controller)
    cmd->add_option("--controller", a.controllers, "flight controller(s): ac, random, force, qnet")
        ->delimiter(',')
        ->check(CLI::IsMember({"ac", "random", "force", "qnet"}));
  cmd->add_option("--episodes", a.episodes, "training episodes of the phase being run")->check(CLI::NonNegativeNumber);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + p.string() + "'");
  return f;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

ExperimentConfig load_with_overrides(const std::string& path, const CommonArgs& a) {
  ExperimentConfig cfg = load_config(path);
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

std::vector<ControllerKind> controllers_of(const ExperimentConfig& cfg, const CommonArgs& a) {
  std::vector<ControllerKind> out;
  for (const auto& c : a.controllers) out.push_back(parse_controller(c));
  if (out.empty()) out.push_back(cfg.controller.kind);
  return out;
}

/// CSV streams and summary shared by every subcommand.
class RunWriter {
 public:
  RunWriter(const fs::path& dir, const std::string& command) : dir_(dir), command_(command) {
    fs::create_directories(dir_);
    devices_ = open_out(dir_ / "devices.csv");
    flights_ = open_out(dir_ / "flights.csv");
    episodes_ = open_out(dir_ / "episodes.csv");
    training_ = open_out(dir_ / "training.csv");
  }

  void add_phase(const std::string& label, const RunMetrics& m, bool training_curve) {
    write_devices_csv(m, label, devices_, first_devices_);
    write_flights_csv(m, label, flights_, first_flights_);
    write_episodes_csv(m, label, episodes_, first_episodes_);
    first_devices_ = first_flights_ = first_episodes_ = false;
    if (training_curve) {
      write_episodes_csv(m, label, training_, first_training_);
      first_training_ = false;
    }
  }

  void summarize(const std::string& key, const json& value) { summary_[key] = value; }

  void finish(const ExperimentConfig& cfg) {
    if (first_training_) write_episodes_csv(RunMetrics{}, "", training_, true);
    if (first_devices_) write_devices_csv(RunMetrics{}, "", devices_, true);
    if (first_flights_) write_flights_csv(RunMetrics{}, "", flights_, true);
    if (first_episodes_) write_episodes_csv(RunMetrics{}, "", episodes_, true);
    write_json(dir_ / "summary.json", summary_);
    write_json(dir_ / "manifest.json", {{"command", command_},
                                         {"seed", cfg.seed},
                                         {"git_describe", UAVLL_GIT_DESCRIBE},
                                         {"created", utc_now()},
                                         {"config", config_to_json(cfg)},
                                         {"summary", summary_}});
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::string command_;
  std::ofstream devices_, flights_, episodes_, training_;
  bool first_devices_ = true, first_flights_ = true, first_episodes_ = true, first_training_ = true;
  json summary_ = json::object();
};

json totals_summary(const RunMetrics& m) { return totals_json(m.combined()); }

CoupledDictionaries read_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("a dictionary checkpoint is required (--checkpoint)");
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
  return load_checkpoint(path);
}

void flight_phases(RunWriter& w, const ExperimentConfig& cfg, const CoupledDictionaries& dicts,
                   const std::vector<ControllerKind>& kinds) {
  for (ControllerKind k : kinds) {
    const std::string label = to_string(k);
    const FlightTrainingResult r = run_flight_training(cfg, dicts, k, true);
    w.add_phase(label, r.training, true);
    w.add_phase(label, r.evaluation, false);
    json s = totals_summary(r.evaluation);
    s["controller"] = r.controller->describe();
    w.summarize(label, s);
  }
}

/// Full pipeline: dictionaries, then flight training per controller, then held-out evaluation.
json simulate(const ExperimentConfig& cfg, const std::vector<ControllerKind>& kinds, const fs::path& dir,
              const std::string& command) {
  RunWriter w(dir, command);
  const TrainingResult trained = run_training(cfg);
  save_checkpoint(trained.dicts, (dir / "dictionaries.json").string());
  w.add_phase("dictionary", trained.metrics, false);
  w.summarize("dictionary", {{"environments", trained.dicts.env_count}, {"totals", totals_summary(trained.metrics)}});
  flight_phases(w, cfg, trained.dicts, kinds);
  w.finish(cfg);
  return load_json((dir / "summary.json").string());
}

json parse_scalar(const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) {
      if (text.find_first_of(".eE") == std::string::npos) return static_cast<std::int64_t>(v);
      return v;
    }
  } catch (const std::exception&) {
  }
  return text;
}

void set_dotted(json& j, const std::string& path, const json& value) {
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty parameter path");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"UAV-aided lifelong learning simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(UAVLL_GIT_DESCRIBE));

  CommonArgs sim_args, dict_args, zs_args, fl_args, sweep_args;
  std::string zs_checkpoint, fl_checkpoint;
  bool zs_baseline = false;

  auto* sim = app.add_subcommand("simulate", "dictionaries, flight training and evaluation from one config");
  add_common(sim, sim_args, true);

  auto* dict = app.add_subcommand("train-dicts", "learn the coupled dictionaries under random flights");
  add_common(dict, dict_args, false);

  auto* zs = app.add_subcommand("test-zeroshot", "held-out evaluation with zero-shot device updates");
  add_common(zs, zs_args, true);
  zs->add_option("--checkpoint", zs_checkpoint, "dictionary checkpoint")->required();
  zs->add_flag("--baseline", zs_baseline, "also run the plain policy-gradient pipeline");

  auto* fl = app.add_subcommand("train-flight", "train flight controller(s) with fixed dictionaries");
  add_common(fl, fl_args, true);
  fl->add_option("--checkpoint", fl_checkpoint, "dictionary checkpoint")->required();

  std::string sweep_param;
  std::vector<std::string> sweep_values;
  int sweep_jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "grid over one config parameter, one run directory per value");
  add_common(sweep, sweep_args, true);
  sweep->add_option("--param", sweep_param, "dotted config key, e.g. lifelong.eta2")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->delimiter(',')->required();
  sweep->add_option("--jobs", sweep_jobs, "parallel runs")->check(CLI::PositiveNumber)->capture_default_str();

  std::string plot_input, plot_output, plot_x = "episode", plot_y = "mean_reward", plot_group = "label",
                                       plot_kind = "line", plot_title;
  auto* plot = app.add_subcommand("plot", "render CSV columns as an SVG chart");
  plot->add_option("--input", plot_input, "CSV file")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_output, "SVG file")->required();
  plot->add_option("--x", plot_x, "x column")->capture_default_str();
  plot->add_option("--y", plot_y, "y column")->capture_default_str();
  plot->add_option("--group", plot_group, "column naming the series (empty for one series)")->capture_default_str();
  plot->add_option("--kind", plot_kind, "line or bar")->check(CLI::IsMember({"line", "bar"}))->capture_default_str();
  plot->add_option("--title", plot_title, "chart title");

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == argv[1];
    if (!known) {
      std::cerr << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const std::string command = [&] {
    std::string c;
    for (int i = 0; i < argc; ++i) c += (i ? " " : "") + std::string(argv[i]);
    return c;
  }();

  if (*sim) {
    ExperimentConfig cfg = load_with_overrides(sim_args.config, sim_args);
    if (sim_args.episodes) cfg.flight_episodes = *sim_args.episodes;
    cfg.validate();
    const json s = simulate(cfg, controllers_of(cfg, sim_args), sim_args.out, command);
    std::cout << s.dump(2) << '\n';
  } else if (*dict) {
    ExperimentConfig cfg = load_with_overrides(dict_args.config, dict_args);
    if (dict_args.episodes) cfg.dictionary_episodes = *dict_args.episodes;
    cfg.validate();
    RunWriter w(dict_args.out, command);
    const TrainingResult r = run_training(cfg, true);
    save_checkpoint(r.dicts, (fs::path(dict_args.out) / "dictionaries.json").string());
    w.add_phase("dictionary", r.metrics, true);
    w.summarize("dictionary", {{"environments", r.dicts.env_count}, {"totals", totals_summary(r.metrics)}});
    w.finish(cfg);
    std::cout << "environments absorbed: " << r.dicts.env_count << '\n';
  } else if (*zs) {
    ExperimentConfig cfg = load_with_overrides(zs_args.config, zs_args);
    if (zs_args.episodes) cfg.evaluation_episodes = std::max(1, *zs_args.episodes);
    cfg.validate();
    const CoupledDictionaries dicts = read_checkpoint(zs_checkpoint);
    RunWriter w(zs_args.out, command);
    const auto kinds = controllers_of(cfg, zs_args);
    auto controller = make_controller(cfg, kinds.front());
    const RunMetrics lifelong = run_testing(cfg, dicts, VisitMode::ZeroShot, controller.get());
    w.add_phase("lifelong", lifelong, true);
    w.summarize("lifelong", totals_summary(lifelong));
    if (zs_baseline) {
      const RunMetrics pg = run_testing(cfg, dicts, VisitMode::PlainPolicyGradient, controller.get());
      w.add_phase("pg", pg, true);
      w.summarize("pg", totals_summary(pg));
    }
    w.finish(cfg);
  } else if (*fl) {
    ExperimentConfig cfg = load_with_overrides(fl_args.config, fl_args);
    if (fl_args.episodes) cfg.flight_episodes = *fl_args.episodes;
    cfg.validate();
    const CoupledDictionaries dicts = read_checkpoint(fl_checkpoint);
    RunWriter w(fl_args.out, command);
    flight_phases(w, cfg, dicts, controllers_of(cfg, fl_args));
    w.finish(cfg);
  } else if (*sweep) {
    const json base = load_json(sweep_args.config);
    ExperimentConfig probe = config_from_json(base);
    const std::uint64_t seed = sweep_args.seed.value_or(probe.seed);
    std::vector<ExperimentConfig> cfgs;
    for (std::size_t k = 0; k < sweep_values.size(); ++k) {
      json j = base;
      set_dotted(j, sweep_param, parse_scalar(sweep_values[k]));
      ExperimentConfig cfg = config_from_json(j);
      cfg.seed = derive_seed(seed, k);
      if (sweep_args.episodes) cfg.flight_episodes = *sweep_args.episodes;
      cfgs.push_back(cfg);
    }
    std::vector<json> results(cfgs.size());
    std::vector<std::string> errors(cfgs.size());
    std::size_t next = 0;
    std::mutex lock;
    auto worker = [&] {
      for (;;) {
        std::size_t k;
        {
          std::lock_guard<std::mutex> g(lock);
          if (next >= cfgs.size()) return;
          k = next++;
        }
        try {
          const fs::path dir = fs::path(sweep_args.out) / ("run_" + std::to_string(k));
          results[k] = simulate(cfgs[k], controllers_of(cfgs[k], sweep_args), dir, command);
        } catch (const std::exception& e) {
          errors[k] = e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(sweep_jobs, static_cast<int>(cfgs.size())); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (!e.empty()) throw std::runtime_error(e);
    fs::create_directories(sweep_args.out);
    std::ofstream csv = open_out(fs::path(sweep_args.out) / "sweep.csv");
    csv << "run,param,value,seed,label,mean_cost,mean_aoi,uav_energy,objective\n";
    for (std::size_t k = 0; k < cfgs.size(); ++k)
      for (const auto& kind : controllers_of(cfgs[k], sweep_args)) {
        const json& s = results[k].at(to_string(kind));
        csv << k << ',' << sweep_param << ',' << sweep_values[k] << ',' << cfgs[k].seed << ',' << to_string(kind)
            << ',' << s.at("mean_cost").get<double>() << ',' << s.at("mean_aoi").get<double>() << ','
            << s.at("uav_energy").get<double>() << ',' << s.at("objective").get<double>() << '\n';
      }
    write_json(fs::path(sweep_args.out) / "manifest.json", {{"command", command},
                                                             {"seed", seed},
                                                             {"git_describe", UAVLL_GIT_DESCRIBE},
                                                             {"created", utc_now()},
                                                             {"param", sweep_param},
                                                             {"values", sweep_values},
                                                             {"config", base}});
  } else if (*plot) {
    const CsvTable t = read_csv(plot_input);
    const auto series = table_series(t, plot_x, plot_y, plot_group);
    const std::string title = plot_title.empty() ? plot_y + " by " + plot_x : plot_title;
    open_out(plot_output) << render_svg(series, plot_kind == "bar" ? ChartKind::Bar : ChartKind::Line, title, plot_x,
                                        plot_y);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
