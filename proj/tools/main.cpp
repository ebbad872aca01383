#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace aatr;
using namespace aatr::cli;

int main(int argc, char** argv) {
  CLI::App app{"aatr: adversarial attack attribution experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  CommandOptions opt;

  const auto common = [&](CLI::App* sub, bool with_only) {
    sub->add_option("--config", config_path, "experiment config (JSON); defaults apply when omitted")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed, overrides the config");
    sub->add_option("--out", opt.out, "output directory, overrides $AATR_OUT_DIR and the config");
    sub->add_option("--jobs", opt.jobs, "worker threads")->check(CLI::PositiveNumber);
    if (with_only) sub->add_option("--only", opt.only, "comma-separated substrings selecting cells or tasks");
  };

  CLI::App* train = app.add_subcommand("train-victims", "train the victim classifiers");
  common(train, false);
  CLI::App* gen = app.add_subcommand("gen-attacks", "generate the adversarial dataset grid");
  common(gen, true);
  CLI::App* attr = app.add_subcommand("attribute", "run the attribution task plan");
  common(attr, true);
  CLI::App* run = app.add_subcommand("run", "train-victims, gen-attacks and attribute in sequence");
  common(run, false);
  CLI::App* show = app.add_subcommand("show-config", "print the effective config as JSON");
  common(show, false);

  std::string fault;
  CLI::App* self = app.add_subcommand("selftest", "offline gradient, attack and serialization checks");
  self->add_option("--fault", fault, "inject a fault the checks must catch")
      ->check(CLI::IsMember({"flip-loss-gradient"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (self->parsed()) {
      const int failures = selftest({fault == "flip-loss-gradient"}, std::cout);
      std::cout << (failures ? "selftest FAILED (" + std::to_string(failures) + " checks)" : "selftest passed")
                << "\n";
      return failures ? 1 : 0;
    }

    ExperimentConfig config = config_path.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load(config_path);
    if (seed) config.seed = *seed;

    if (show->parsed()) {
      std::cout << config.to_json().dump(2) << "\n";
      return 0;
    }
    if (train->parsed() || run->parsed()) train_victims(config, opt, std::cerr);
    if (gen->parsed() || run->parsed()) gen_attacks(config, opt, std::cerr);
    if (attr->parsed() || run->parsed()) attribute(config, opt, std::cout);
  } catch (const aatr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
