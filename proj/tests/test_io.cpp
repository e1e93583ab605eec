#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "onix4d/onix4d.hpp"

using namespace onix;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("onix4d_io_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool throws_with(const std::function<void()>& f, const std::string& fragment) {
  try {
    f();
  } catch (const io::FormatError& e) {
    return std::string(e.what()).find(fragment) != std::string::npos;
  }
  return false;
}

io::ProjectionStack sample_stack() {
  io::ProjectionStack s;
  s.channel = Channel::Phase;
  s.t = 3, s.v = 2, s.h = 4, s.w = 5;
  s.data.resize(3 * 2 * 4 * 5);
  for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] = 0.5f * float(i) - 7.25f;
  return s;
}

Volume sample_volume() {
  Volume v(4, 3, 2);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i) * 1e-3f;
  return v;
}

// Small end-to-end configuration.
json tiny_run(const fs::path& out) {
  json j = json::parse(R"({
    "simulate": {"experiments": 2, "timestamps": 3,
                 "acquisition": {"detector": {"width": 16, "height": 16, "pitch": 0.125}, "samples_per_ray": 16}},
    "train": {"model": {"hidden": 8, "encoder_channels": [4, 4], "patch": 8, "disc_channels": 4},
              "optim": {"epochs": 2, "warmup_epochs": 1, "batch_size": 2, "patch": {"size": 8},
                        "samples_per_ray": 8, "checkpoint_every": 1}},
    "render": {"grid": 16}, "evaluate": {"grid": 16},
    "sart": {"grid": 16, "views": 24, "iterations": 2,
             "acquisition": {"detector": {"width": 16, "height": 16, "pitch": 0.125}}}
  })");
  j["out"] = out.string();
  return j;
}

const Logger kQuiet(LogLevel::Error);

}  // namespace

TEST(Xmpj, RoundTrip) {
  const auto s = sample_stack();
  const auto d = io::decode_xmpj(io::encode_xmpj(s));
  EXPECT_EQ(d.channel, Channel::Phase);
  EXPECT_EQ(d.t, 3u);
  EXPECT_EQ(d.v, 2u);
  EXPECT_EQ(d.h, 4u);
  EXPECT_EQ(d.w, 5u);
  EXPECT_EQ(d.data, s.data);
  EXPECT_EQ(io::encode_xmpj(d), io::encode_xmpj(s));
  EXPECT_EQ(d.frame(2, 1)[0], s.data[(2 * 2 + 1) * 20]);
  auto bad = s;
  bad.data.pop_back();
  EXPECT_THROW(io::encode_xmpj(bad), Error);
}

TEST(Xmpj, CorruptionIsNamed) {
  auto bytes = io::encode_xmpj(sample_stack());
  auto flipped = bytes;
  flipped[40] ^= 0x10;
  EXPECT_TRUE(throws_with([&] { io::decode_xmpj(flipped, "a.xmpj"); },
                          "a.xmpj: CRC mismatch at offset " + std::to_string(bytes.size() - 4)));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  EXPECT_TRUE(throws_with([&] { io::decode_xmpj(truncated); }, "truncated file"));
  auto magic = bytes;
  magic[0] = 'Y';
  EXPECT_TRUE(throws_with([&] { io::decode_xmpj(magic); }, "bad magic"));
  auto version = bytes;
  version[4] = 9;
  EXPECT_TRUE(throws_with([&] { io::decode_xmpj(version); }, "unsupported version 9"));
  auto channel = bytes;
  channel[8] = 7;
  EXPECT_TRUE(throws_with([&] { io::decode_xmpj(channel); }, "unknown channel tag 7"));
}

TEST(Xvol, RoundTripAndErrors) {
  const Volume v = sample_volume();
  const auto bytes = io::encode_xvol(v);
  EXPECT_EQ(bytes.size(), 4u + 12u + 4u * 24u + 4u);
  const auto d = io::decode_xvol(bytes);
  EXPECT_EQ(d.nx, 4u);
  EXPECT_EQ(d.ny, 3u);
  EXPECT_EQ(d.nz, 2u);
  EXPECT_EQ(d.data, v.data);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_TRUE(throws_with([&] { io::decode_xvol(trailing); }, "trailing bytes"));
  auto huge = bytes;
  huge[4] = 0xff, huge[5] = 0xff, huge[6] = 0xff;
  EXPECT_TRUE(throws_with([&] { io::decode_xvol(huge); }, "truncated file"));
  const fs::path dir = scratch("xvol");
  io::write_xvol(dir / "v.xvol", v);
  EXPECT_EQ(io::read_xvol(dir / "v.xvol").data, v.data);
  EXPECT_FALSE(fs::exists(dir / "v.xvol.tmp"));
  EXPECT_THROW(io::read_xvol(dir / "missing.xvol"), Error);
}

TEST(Checkpoint, RoundTripAndValidation) {
  OnixModel<float> m(ModelConfig{}, 3);
  const auto bytes = io::encode_checkpoint(io::snapshot(m.params()));
  const auto tensors = io::decode_checkpoint(bytes);
  ASSERT_EQ(tensors.size(), m.params().size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    EXPECT_EQ(tensors[i].name, m.params().entries()[i].name);
    EXPECT_EQ(tensors[i].value.vec(), m.params().entries()[i].var.value().vec());
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 1;
  EXPECT_TRUE(throws_with([&] { io::decode_checkpoint(flipped, "m.onixckpt"); }, "m.onixckpt: CRC mismatch"));
  auto truncated = bytes;
  truncated.resize(bytes.size() / 3);
  EXPECT_THROW(io::decode_checkpoint(truncated), io::FormatError);

  const fs::path dir = scratch("ckpt");
  io::save_checkpoint(dir / "m.onixckpt", m.params());
  ModelConfig other;
  other.hidden = 16;
  OnixModel<float> wrong(other, 3);
  const auto before = io::snapshot(wrong.params());
  EXPECT_TRUE(throws_with([&] { io::load_checkpoint(dir / "m.onixckpt", wrong.params()); }, "has shape"));
  const auto after = io::snapshot(wrong.params());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].value.vec(), after[i].value.vec());
  // Missing tensors.
  std::vector<io::NamedTensor> partial = io::snapshot(m.params());
  partial.pop_back();
  io::write_file(dir / "partial.onixckpt", io::encode_checkpoint(partial));
  EXPECT_TRUE(throws_with([&] { io::load_checkpoint(dir / "partial.onixckpt", m.params()); }, "missing tensor"));
}

TEST(Config, DefaultsParseAndUnknownKeysAreRejected) {
  const RunConfig d = parse_config(json::object());
  EXPECT_EQ(d.seed, 0u);
  EXPECT_EQ(d.train.train.lr, 1e-4);
  EXPECT_EQ(d.train.train.warmup_epochs, 5u);
  EXPECT_EQ(d.train.train.mse_weight_after_warmup, 0.0);
  EXPECT_EQ(d.simulate.set.relative_angles, (std::vector<double>{0.0, 23.8}));
  EXPECT_THROW(parse_config(json::parse(R"({"trian": {}})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"train": {"optim": {"learning_rate": 1}}})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"train": {"optim": {"epochs": "many"}}})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"train": {"optim": {"mode": "sometimes"}}})")), ConfigError);
  const RunConfig c = parse_config(json::parse(R"({"seed": 7, "train": {"optim": {"epochs": 3, "warmup_epochs": 1}}})"));
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.train.train.epochs, 3u);
  EXPECT_THROW(parse_config(json::parse(R"({"train": {"optim": {"epochs": 3}}})")), ConfigError);
  EXPECT_EQ(c.train.train.seed, 7u);
  EXPECT_EQ(c.resolved.at("train").at("optim").at("epochs"), 3);
}

TEST(Manifest, PublicAndSealedParts) {
  const fs::path dir = scratch("manifest");
  const RunConfig c = parse_config(tiny_run(dir));
  run_simulate(c, kQuiet);
  const json j = json::parse(io::read_text(dir / "manifest.json"));
  ASSERT_TRUE(j.contains("eval_only"));
  for (const auto& e : j.at("experiments")) {
    EXPECT_FALSE(e.contains("phi1"));
    EXPECT_FALSE(e.contains("droplet"));
  }
  const std::size_t reads = io::ManifestReader::eval_reads().load();
  const io::ManifestReader m(dir / "manifest.json");
  EXPECT_EQ(m.training().experiments.size(), 2u);
  const auto data = io::load_training_images(m);
  EXPECT_EQ(io::ManifestReader::eval_reads().load(), reads);
  ASSERT_EQ(data.size(), 2u);
  EXPECT_EQ(data[0].timestamps, 3u);
  EXPECT_EQ(data[0].views, 2u);
  const auto sealed = m.eval_section();
  EXPECT_EQ(io::ManifestReader::eval_reads().load(), reads + 1);
  EXPECT_EQ(sealed.experiments.size(), 2u);
}

TEST(Manifest, HeaderDimsAreCrossChecked) {
  const fs::path dir = scratch("crosscheck");
  run_simulate(parse_config(tiny_run(dir)), kQuiet);
  const io::ManifestReader m(dir / "manifest.json");
  const auto& e = m.training().experiments[1];
  auto stack = io::read_xmpj(dir / e.absorption_file);
  stack.t = 1;
  stack.data.resize(stack.frame_size() * stack.v);
  io::write_xmpj(dir / e.absorption_file, stack);
  EXPECT_TRUE(throws_with([&] { io::load_training_images(m); }, "disagree with the manifest"));
  auto phase = io::read_xmpj(dir / e.phase_file);
  io::write_xmpj(dir / e.absorption_file, phase);
  EXPECT_TRUE(throws_with([&] { io::load_training_images(m); }, "unexpected channel tag"));
  std::ofstream(dir / "broken.json") << "{\"format\": \"onix4d-manifest\"";
  EXPECT_THROW(io::ManifestReader(dir / "broken.json"), io::FormatError);
}

TEST(Pipeline, EndToEndAndSeparation) {
  const fs::path root = scratch("pipeline");
  json base = tiny_run(root / "data");
  run_simulate(parse_config(base), kQuiet);
  const std::string manifest = (root / "data" / "manifest.json").string();
  const std::size_t reads = io::ManifestReader::eval_reads().load();

  json tr = base;
  tr["out"] = (root / "train").string();
  tr["train"]["data"] = manifest;
  const json ts = run_train(parse_config(tr), kQuiet);
  EXPECT_EQ(ts.at("iterations"), 6);
  EXPECT_TRUE(fs::exists(root / "train" / "model.onixckpt"));
  EXPECT_TRUE(fs::exists(root / "train" / "checkpoints" / "epoch0001.onixckpt"));
  EXPECT_TRUE(fs::exists(root / "train" / "config.json"));
  std::ifstream log(root / "train" / "train_log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) EXPECT_TRUE(json::parse(line).contains("L_mse"));
  EXPECT_EQ(lines, 6u);

  json rd = base;
  rd["out"] = (root / "render").string();
  rd["render"]["data"] = manifest;
  rd["render"]["checkpoint"] = (root / "train" / "model.onixckpt").string();
  EXPECT_EQ(run_render(parse_config(rd), kQuiet).at("volumes"), 6);
  EXPECT_TRUE(fs::exists(root / "render" / "volumes" / volume_name(1, 2)));
  EXPECT_TRUE(fs::exists(root / "render" / "frames" / "exp001" / frame_name("top", 2)));
  EXPECT_EQ(io::ManifestReader::eval_reads().load(), reads);

  json ev = base;
  ev["out"] = (root / "eval_ckpt").string();
  ev["evaluate"]["data"] = manifest;
  ev["evaluate"]["checkpoint"] = rd["render"]["checkpoint"];
  const json by_model = run_evaluate(parse_config(ev), kQuiet);
  EXPECT_EQ(io::ManifestReader::eval_reads().load(), reads + 1);
  json ev2 = base;
  ev2["out"] = (root / "eval_vol").string();
  ev2["evaluate"]["data"] = manifest;
  ev2["evaluate"]["volumes"] = (root / "render" / "volumes").string();
  const json by_volumes = run_evaluate(parse_config(ev2), kQuiet);
  EXPECT_EQ(by_model.at("aggregate"), by_volumes.at("aggregate"));
  EXPECT_EQ(by_model.at("volumes_evaluated"), 6);
  EXPECT_TRUE(fs::exists(root / "eval_vol" / "metrics.json"));
  EXPECT_TRUE(fs::exists(root / "eval_vol" / "fsc_curves.csv"));

  ev2["evaluate"]["checkpoint"] = rd["render"]["checkpoint"];
  EXPECT_THROW(run_evaluate(parse_config(ev2), kQuiet), ConfigError);
  json ev3 = base;
  ev3["evaluate"]["data"] = manifest;
  ev3["evaluate"]["volumes"] = (root / "render" / "volumes").string();
  ev3["evaluate"]["grid"] = 12;
  EXPECT_THROW(run_evaluate(parse_config(ev3), kQuiet), io::FormatError);
  ev3["evaluate"]["grid"] = 16;
  ev3["evaluate"]["experiments"] = {5};
  EXPECT_THROW(run_evaluate(parse_config(ev3), kQuiet), ConfigError);
}

TEST(Pipeline, UntrainedCheckpointRendersAndGroundTruthScoresPerfectly) {
  const fs::path root = scratch("untrained");
  json base = tiny_run(root / "data");
  run_simulate(parse_config(base), kQuiet);
  const std::string manifest = (root / "data" / "manifest.json").string();
  const RunConfig c = parse_config(base);
  OnixModel<float> fresh(c.train.model, 0);
  const fs::path ck = root / "fresh.onixckpt";
  io::save_checkpoint(ck, fresh.params());
  write_model_sidecar(ck, c.train.model);
  json rd = base;
  rd["out"] = (root / "render").string();
  rd["render"]["data"] = manifest;
  rd["render"]["checkpoint"] = ck.string();
  rd["render"]["timestamp_stride"] = 2;
  EXPECT_EQ(run_render(parse_config(rd), kQuiet).at("volumes"), 4);

  // Ground-truth volumes written as if rendered.
  const io::ManifestReader m(manifest);
  const auto sealed = m.eval_section();
  const fs::path gt = root / "truth";
  for (const auto& e : m.training().experiments)
    for (std::size_t t = 0; t < e.timestamps; ++t)
      io::write_xvol(gt / volume_name(e.id, t), ground_truth_volume(sealed.find(e.id), sealed.phantom,
                                                                    timestamp_time(t, e.timestamps), 16,
                                                                    m.training().reference));
  json ev = base;
  ev["out"] = (root / "eval").string();
  ev["evaluate"]["data"] = manifest;
  ev["evaluate"]["volumes"] = gt.string();
  const json r = run_evaluate(parse_config(ev), kQuiet);
  EXPECT_EQ(r.at("aggregate").at("mse"), 0.0);
  EXPECT_NEAR(r.at("aggregate").at("dssim").get<double>(), 0.0, 1e-12);
  EXPECT_NEAR(r.at("aggregate").at("top_dssim").get<double>(), 0.0, 1e-12);
  for (const auto& e : r.at("per_timestamp")) EXPECT_TRUE(e.at("fsc_at_limit").get<bool>());
}

TEST(Pipeline, TrainingIsBitReproducible) {
  const fs::path root = scratch("repro");
  json base = tiny_run(root / "data");
  run_simulate(parse_config(base), kQuiet);
  for (const char* run : {"a", "b"}) {
    json tr = base;
    tr["out"] = (root / run).string();
    tr["train"]["data"] = (root / "data" / "manifest.json").string();
    run_train(parse_config(tr), kQuiet);
  }
  EXPECT_EQ(io::read_file(root / "a" / "model.onixckpt"), io::read_file(root / "b" / "model.onixckpt"));
  EXPECT_EQ(io::read_file(root / "a" / "checkpoints" / "epoch0001.onixckpt"),
            io::read_file(root / "b" / "checkpoints" / "epoch0001.onixckpt"));
}

TEST(Pipeline, SartAndGradcheckReports) {
  const fs::path root = scratch("sart");
  const json sr = run_sart(parse_config(tiny_run(root)), kQuiet);
  EXPECT_TRUE(fs::exists(root / "sart" / "sart_report.json"));
  EXPECT_TRUE(fs::exists(root / "sart" / "t000.xvol"));
  EXPECT_EQ(io::read_xvol(root / "sart" / "t000.xvol").nx, 16u);
  (void)sr;
  json gc = tiny_run(root / "gc");
  EXPECT_EQ(run_subcommand("gradcheck", parse_config(gc), kQuiet), 0);
  EXPECT_TRUE(json::parse(io::read_text(root / "gc" / "gradcheck.json")).contains("checks"));
  EXPECT_THROW(run_subcommand("bogus", parse_config(gc), kQuiet), ConfigError);
}

TEST(Cli, ErrorPathsAndExitCodes) {
  const fs::path root = scratch("cli");
  const std::string exe = ONIX4D_CLI;
  auto run = [&](const std::string& args) {
    const std::string cmd = "ONIX4D_LOG=error " + exe + " " + args + " > " + (root / "stdout").string() + " 2> " + (root / "stderr").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  std::ofstream(root / "unknown.json") << R"({"simulate": {"experimentz": 2}})";
  EXPECT_EQ(run("simulate --config " + (root / "unknown.json").string()), 2);
  const json err = json::parse(io::read_text(root / "stderr"));
  EXPECT_EQ(err.at("error").at("kind"), "config");
  EXPECT_NE(err.at("error").at("message").get<std::string>().find("experimentz"), std::string::npos);

  std::ofstream(root / "garbage.json") << "{not json";
  EXPECT_EQ(run("simulate --config " + (root / "garbage.json").string()), 2);
  EXPECT_NE(run("simulate --config " + (root / "missing.json").string()), 0);
  EXPECT_EQ(run("render --out " + (root / "r").string()), 2);  // no data or checkpoint
  EXPECT_NE(run("frobnicate"), 0);

  std::ofstream(root / "bad.onixckpt") << "ONIXCKPT garbage";
  std::ofstream(root / "tiny.json") << tiny_run(root / "ds").dump();
  ASSERT_EQ(run("simulate --config " + (root / "tiny.json").string()), 0);
  EXPECT_EQ(run("render --config " + (root / "tiny.json").string() + " --data " + (root / "ds" / "manifest.json").string() +
                " --checkpoint " + (root / "bad.onixckpt").string() + " --out " + (root / "r").string()),
            3);
  EXPECT_EQ(json::parse(io::read_text(root / "stderr")).at("error").at("kind"), "format");
  EXPECT_EQ(run("gradcheck --seed 4 --threads 1 --out " + (root / "gc").string()), 0);
}
