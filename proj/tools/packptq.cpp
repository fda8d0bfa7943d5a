// packptq: command-line front end for the pack-wise post-training quantization pipeline.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "packptq/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<unsigned long long> seed;
  std::string out;
  std::vector<std::string> overrides;
};

std::string summary(const std::string& cmd, const packptq::json& doc) {
  if (cmd == "pipeline") {
    const auto& acc = doc["accuracy"];
    char buf[256];
    std::snprintf(buf, sizeof buf, "full-precision %.4f  minmax %.4f  quantized %.4f  avg bits %.3f",
                  acc["full_precision"]["top1"].get<double>(), acc["minmax"]["top1"].get<double>(),
                  acc["quantized"]["top1"].get<double>(), doc["average_bits"].get<double>());
    return buf;
  }
  if (cmd == "score") return std::to_string(doc.size()) + " block scores";
  if (cmd == "pack") return std::to_string(doc["packs"].size()) + " packs: " + doc["packs"].dump();
  if (cmd == "allocate") return "bits per pack " + [&] {
    std::string s;
    for (const auto& p : doc["packs"]) s += (s.empty() ? "" : ",") + std::to_string(p["bits"].get<int>());
    return s;
  }() + "  avg " + std::to_string(doc["avg_bits"].get<double>());
  if (cmd == "gen-model") return "train accuracy " + doc["metadata"]["train_accuracy"].get<std::string>();
  if (cmd == "eval") return "full-precision top1 " + std::to_string(doc["full_precision"]["top1"].get<double>());
  if (cmd == "ablate") {
    std::string s;
    for (const auto& r : doc["rows"]) s += "\n  " + r["cell"].get<std::string>() + "  median " + r["median"].dump();
    return "ablation:" + s;
  }
  return "done";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pack-wise post-training quantization toolkit"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", packptq::kVersion);

  const std::map<std::string, std::string> about{
      {"score", "per-block importance scores from Gaussian perturbations"},
      {"pack", "partition blocks into packs"},
      {"allocate", "choose a bit width per pack under the budget"},
      {"quantize", "calibrate and write the quantized model"},
      {"reconstruct", "pack-wise reconstruction of a quantized model"},
      {"eval", "top-1 and per-class accuracy"},
      {"pipeline", "score, pack, allocate, quantize, reconstruct and eval in one run"},
      {"ablate", "packing and precision ablation over several seeds"},
      {"gen-data", "write a synthetic dataset"},
      {"gen-model", "train a full-precision model"}};
  Options opt;
  for (const std::string& name : packptq::command_names()) {
    CLI::App* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", opt.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "run seed (scores, packing, reconstruction batches)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--override", opt.overrides, "KEY=VALUE with a dotted key, repeatable")->allow_extra_args(false);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    std::vector<std::string> overrides = opt.overrides;
    if (opt.seed) overrides.push_back("seed=" + std::to_string(*opt.seed));
    if (!opt.out.empty()) overrides.push_back("out=" + packptq::json(opt.out).dump());
    const packptq::RunConfig cfg =
        packptq::load_run_config(opt.config.empty() ? std::nullopt : std::optional<std::filesystem::path>(opt.config), overrides);
    const packptq::json doc = packptq::run_command(cmd, cfg);
    std::cout << cmd << ": " << summary(cmd, doc) << "\n  artifacts in " << cfg.out.string() << "\n";
    return 0;
  } catch (const packptq::ConfigError& e) {
    std::cerr << "packptq " << cmd << ": " << e.what() << "\n";
    return 2;
  } catch (const packptq::NumericalError& e) {
    std::cerr << "packptq " << cmd << ": numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "packptq " << cmd << ": " << e.what() << "\n";
    return 1;
  }
}
