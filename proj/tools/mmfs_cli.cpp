#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mmfs/error.hpp"
#include "mmfs/experiment.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal few-shot speech-to-image matching experiments"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, arm, grid, out;
  std::uint64_t seed = 0;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON experiment config (defaults apply when omitted)");
  app.add_option("--seed", seed, "master seed override");
  app.add_option("--arm", arm, "comma-separated arms to run");
  app.add_option("--out", out, "output directory override");
  app.add_option("--grid", grid, "batch sizes and seeds, e.g. 16,32:1,2");
  app.add_flag("-q,--quiet", quiet, "no progress output");

  const std::pair<const char*, const char*> stages[] = {
      {"prepare", "split the data and train the transfer classifiers"},
      {"mine", "mine cross-modal training pairs"},
      {"train", "train one model per arm and grid cell"},
      {"evaluate", "run the few-shot episodes"},
      {"report", "write summary, grid and confusion files"},
      {"run", "all stages in order, skipping those up to date"},
  };
  for (const auto& [name, help] : stages) app.add_subcommand(name, help);
  app.add_subcommand("default-config", "print the default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "default-config") {
      std::cout << mmfs::default_config_json().dump(2) << "\n";
      return 0;
    }
    mmfs::ExperimentConfig cfg =
        config_path.empty() ? mmfs::parse_config(mmfs::default_config_json()) : mmfs::load_config(config_path);
    mmfs::Overrides o;
    if (app.count("--seed")) o.seed = seed;
    if (!arm.empty()) o.arms = split_commas(arm);
    if (!grid.empty()) o.grid = mmfs::parse_grid(grid);
    // For `report`, --out names the report directory instead.
    if (!out.empty() && command != "report") o.out_dir = out;
    mmfs::apply_overrides(cfg, o);

    const mmfs::LogFn log = [quiet](const std::string& msg) {
      if (!quiet) std::cerr << msg << std::endl;
    };
    if (command == "prepare") mmfs::cmd_prepare(cfg, log);
    else if (command == "mine") mmfs::cmd_mine(cfg, log);
    else if (command == "train") mmfs::cmd_train(cfg, log);
    else if (command == "evaluate") mmfs::cmd_evaluate(cfg, log);
    else if (command == "run") mmfs::run_pipeline(cfg, log);
    else mmfs::cmd_report(cfg, out.empty() ? std::nullopt : std::optional<std::filesystem::path>(out));
    return 0;
  } catch (const mmfs::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << one_line(e.what()) << "\n";
    return 1;
  }
}
