#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>

#include "onix4d/onix4d.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
};

int fail(const char* kind, const std::string& message, int code) {
  const onix::json j = {{"error", {{"kind", kind}, {"message", message}}}};
  std::fprintf(stderr, "%s\n", j.dump().c_str());
  return code;
}

onix::RunConfig resolve(const std::string& cmd, const Flags& f) {
  onix::json user = onix::json::object();
  if (!f.config.empty()) {
    try {
      user = onix::json::parse(onix::io::read_text(f.config));
    } catch (const onix::json::exception& e) {
      throw onix::ConfigError(f.config + ": invalid JSON: " + e.what());
    }
    if (!user.is_object()) throw onix::ConfigError(f.config + ": top level must be an object");
  }
  if (f.seed) user["seed"] = *f.seed;
  if (f.threads) user["threads"] = *f.threads;
  if (f.out) user["out"] = *f.out;
  if (f.data) {
    if (cmd == "simulate" || cmd == "gradcheck") throw onix::ConfigError("--data does not apply to " + cmd);
    user[cmd]["data"] = *f.data;
  }
  if (f.checkpoint) {
    if (cmd == "render" || cmd == "evaluate") user[cmd]["checkpoint"] = *f.checkpoint;
    else if (cmd == "train") user[cmd]["resume"] = *f.checkpoint;
    else throw onix::ConfigError("--checkpoint does not apply to " + cmd);
  }
  return onix::parse_config(user);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"onix4d: 4D reconstruction from sparse multi-projection X-ray data"};
  app.require_subcommand(1, 1);
  Flags flags;
  const char* help[] = {
      "simulate a multi-experiment dataset (manifest + XMPJ stacks)",
      "train the conditioned implicit model on a dataset",
      "render XVOL volumes and side/top frame sequences from a checkpoint",
      "compare rendered volumes against the sealed ground truth",
      "reconstruct volumes with the SART baseline",
      "run the autodiff finite-difference suite",
  };
  std::size_t k = 0;
  for (const auto& name : onix::subcommands()) {
    auto* sub = app.add_subcommand(name, help[k++]);
    sub->add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "global seed");
    sub->add_option("--threads", flags.threads, "worker threads (1 = deterministic)");
    sub->add_option("--out", flags.out, "output directory");
    if (name != "simulate" && name != "gradcheck") sub->add_option("--data", flags.data, "dataset manifest");
    if (name == "train" || name == "render" || name == "evaluate") {
      sub->add_option("--checkpoint", flags.checkpoint,
                      name == "train" ? "checkpoint to resume from" : "model checkpoint");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  const auto log = onix::Logger::from_env();
  try {
    const auto cfg = resolve(cmd, flags);
    return onix::run_subcommand(cmd, cfg, log);
  } catch (const onix::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const onix::io::FormatError& e) {
    return fail("format", e.what(), 3);
  } catch (const onix::TrainingAborted& e) {
    return fail("training", e.what(), 4);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
}
