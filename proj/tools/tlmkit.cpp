// tlmkit: command-line driver for the tiny-LM toolkit.
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "tlm/core/error.hpp"
#include "tlm/pipeline/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFailed = 2;

void print_manifest(const tlm::RunManifest& m) {
  std::cout << "completed:";
  for (const auto& s : m.completed) std::cout << ' ' << s;
  if (m.dry_run) {
    std::cout << " (dry run; planned:";
    for (const auto& s : m.planned) std::cout << ' ' << s;
    std::cout << ')';
  }
  std::cout << "\nartifacts: " << m.artifacts.size() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiny language model toolkit"};
  app.set_version_flag("--version", std::string(tlm::kToolkitVersion));
  app.require_subcommand(1);

  std::string config_path;
  bool dry_run = false;
  std::string stage_name;
  std::vector<std::string> run_dirs;
  std::string report_out;

  auto* validate = app.add_subcommand("validate", "Check a config and print it with defaults filled in");
  validate->add_option("config", config_path, "config file")->required();

  auto* run = app.add_subcommand("run", "Run every stage, or one with --stage");
  run->add_option("config", config_path, "config file")->required();
  run->add_flag("--dry-run", dry_run, "write the manifest of planned stages and stop");
  run->add_option("--stage", stage_name, "tokenize, search-arch, surgery, train or eval");

  auto* report = app.add_subcommand("report", "Summarize one or more output directories");
  report->add_option("dirs", run_dirs, "output directories")->required();
  report->add_option("--out", report_out, "where to write the report (default: <first dir>/report)");

  std::vector<CLI::App*> stage_cmds;
  for (auto s : tlm::all_stages()) {
    auto* cmd = app.add_subcommand(tlm::to_string(s), "Run the " + tlm::to_string(s) + " stage only");
    cmd->add_option("config", config_path, "config file")->required();
    stage_cmds.push_back(cmd);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (*report) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const fs::path out = report_out.empty() ? dirs.front() / "report" : fs::path(report_out);
      const auto res = tlm::write_report(dirs, out);
      for (const auto& g : res.gaps) std::cerr << "gap: " << g << '\n';
      std::cout << "runs: " << res.runs_found << ", report: " << (out / "report.md").string() << '\n';
      return res.runs_found == 0 ? kFailed : kOk;
    }

    const auto config = tlm::load_pipeline_config(config_path);
    if (*validate) {
      std::cout << config.resolved().dump(2) << '\n';
      return kOk;
    }
    if (*run) {
      if (!stage_name.empty()) {
        if (dry_run) throw tlm::ValidationError("--dry-run and --stage cannot be combined");
        print_manifest(tlm::run_stage(config, tlm::parse_stage(stage_name)));
      } else {
        print_manifest(tlm::run_pipeline(config, dry_run));
      }
      return kOk;
    }
    for (auto* cmd : stage_cmds) {
      if (*cmd) {
        print_manifest(tlm::run_stage(config, tlm::parse_stage(cmd->get_name())));
        return kOk;
      }
    }
  } catch (const tlm::ValidationError& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kOk;
}
