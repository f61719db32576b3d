#include "ms3m/pipeline.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ms3m;
namespace fs = std::filesystem;

namespace {

class Pipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("ms3m_pipeline_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  RunConfig small() const {
    RunConfig c;
    c.paths.input = "synth";
    c.paths.dataset = path("ds.ms3m");
    c.paths.model = path("model.ms3m");
    c.paths.report_dir = dir_.string();
    c.data.synth_steps = 3000;
    c.model.width = 8;
    c.model.n_state = 4;
    c.model.n_components = 2;
    c.model.n_layers = 1;
    c.model.window = 16;
    c.model.kernel_len = 8;
    c.train.max_epochs = 3;
    c.train.batch_size = 64;
    c.seed = 3;
    return c;
  }

  json read_json(const std::string& name) const { return json::parse(read_file(path(name))); }

  fs::path dir_;
};

int run_cli(const std::string& args, const std::string& stderr_file = "/dev/null") {
  const std::string cmd =
      std::string(MS3M_CLI_PATH) + " " + args + " > /dev/null 2> " + stderr_file;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_F(Pipeline, ConfigPrecedenceDefaultsFileFlags) {
  {
    std::ofstream f(path("cfg.json"));
    f << R"({"data": {"synth_steps": 1500, "stride": 0.02}, "model": {"window": 12, "width": 8}})";
  }
  const RunConfig from_file = load_run_config(path("cfg.json"));
  EXPECT_EQ(from_file.data.synth_steps, 1500);
  EXPECT_EQ(from_file.model.window, 12);
  EXPECT_EQ(from_file.model.n_state, ModelConfig{}.n_state);

  const std::string args = "prepare --config " + path("cfg.json") + " --input synth --window 10" +
                           " --dataset " + path("ds.ms3m") + " --report-dir " + dir_.string();
  ASSERT_EQ(run_cli(args), 0);
  const json rep = read_json("prepare.json");
  EXPECT_TRUE(verify_report(rep));
  const json& cfg = rep.at("config");
  EXPECT_EQ(cfg.at("data").at("synth_steps"), 1500);  // file
  EXPECT_EQ(cfg.at("model").at("window"), 10);         // flag beats file
  EXPECT_EQ(cfg.at("model").at("width"), 8);           // file beats default
  EXPECT_EQ(cfg.at("data").at("iqr_k"), 1.5);          // default
  const DatasetArtifact da = load_dataset(path("ds.ms3m"));
  EXPECT_EQ(da.dataset.window, 10);
  EXPECT_EQ(da.config_echo, cfg);
}

TEST_F(Pipeline, BadConfigFileIsAUsageError) {
  {
    std::ofstream f(path("bad.json"));
    f << "{not json";
  }
  EXPECT_THROW(load_run_config(path("bad.json")), ShapeError);
  EXPECT_EQ(run_cli("prepare --config " + path("bad.json") + " --input synth --dataset " +
                    path("ds.ms3m")),
            1);
}

TEST_F(Pipeline, PrepareIsByteDeterministic) {
  RunConfig c = small();
  cmd_prepare(c);
  const std::string first = read_file(c.paths.dataset);
  fs::remove(c.paths.dataset);
  cmd_prepare(c);
  EXPECT_TRUE(read_file(c.paths.dataset) == first);
}

TEST_F(Pipeline, DelayOnlyGapKeepsRows) {
  std::ostringstream csv;
  csv << "time,RSRP,SINR,Delay\n";
  for (int i = 0; i < 60; ++i) {
    csv << i * 0.02 << ',' << -80.0 + 0.1 * (i % 7) << ',' << 10.0 + 0.2 * (i % 5) << ',';
    if (i % 10 != 3) csv << 5.0 + 0.1 * (i % 3);
    csv << '\n';
  }
  write_file(path("in.csv"), csv.str());
  RunConfig c = small();
  c.paths.input = path("in.csv");
  c.model.window = 8;
  c.model.n_features = 3;
  const WindowDataset ds = build_dataset(load_raw(c), c);
  EXPECT_EQ(ds.windows.size(), 60u - 8u);
  const int delay = 2;
  int sentinel_rows = 0;
  for (const auto& w : ds.windows) {
    const Mat raw = destandardize_x(w.x, ds.scaler);
    for (Eigen::Index r = 0; r < raw.rows(); ++r)
      if (std::abs(raw(r, delay) - kMissingSentinel) < 1e-9) ++sentinel_rows;
  }
  EXPECT_GT(sentinel_rows, 0);
}

TEST_F(Pipeline, ShortInputNamesMakeWindows) {
  std::ostringstream csv;
  csv << "time,RSRP\n";
  for (int i = 0; i < 16; ++i) csv << i * 0.02 << ',' << -80.0 - (i % 3) << '\n';
  write_file(path("short.csv"), csv.str());
  RunConfig c = small();
  c.paths.input = path("short.csv");
  try {
    cmd_prepare(c);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.stage(), "make_windows");
  }
  const std::string err = path("err.txt");
  EXPECT_EQ(run_cli("prepare --input " + path("short.csv") + " --window 16 --dataset " +
                        path("x.ms3m"),
                    err),
            2);
  EXPECT_NE(read_file(err).find("make_windows"), std::string::npos);
}

TEST_F(Pipeline, TrainIsDeterministicAndRejectsMismatch) {
  RunConfig c = small();
  cmd_prepare(c);
  const json a = cmd_train(c);
  const std::string model_a = read_file(c.paths.model);
  const json b = cmd_train(c);
  EXPECT_EQ(a.at("best_val_loss"), b.at("best_val_loss"));
  EXPECT_TRUE(read_file(c.paths.model) == model_a);
  EXPECT_TRUE(verify_report(read_json("train.json")));
  EXPECT_EQ(lines(read_file(path("train_log.jsonl"))).size(), a.at("epochs").size());

  RunConfig wrong = c;
  wrong.model.window = 8;
  EXPECT_THROW(cmd_train(wrong), DataError);
  wrong = c;
  wrong.model.n_features = 5;
  EXPECT_THROW(cmd_train(wrong), DataError);
}

TEST_F(Pipeline, PatienceOneStopsAtFirstNonImprovingEpoch) {
  RunConfig c = small();
  cmd_prepare(c);
  c.train.patience = 1;
  c.train.tol = 1e9;
  c.train.max_epochs = 10;
  const json rep = cmd_train(c);
  EXPECT_EQ(rep.at("stop_epoch"), 2);
  EXPECT_EQ(rep.at("best_epoch"), 1);
}

TEST_F(Pipeline, EvaluateBookkeepingAndFlagGating) {
  RunConfig c = small();
  cmd_prepare(c);
  cmd_train(c);
  const json plain = cmd_evaluate(c);
  const DatasetArtifact da = load_dataset(c.paths.dataset);
  const json& m = plain.at("metrics");
  EXPECT_EQ(m.at("n"), da.dataset.n_test);
  EXPECT_FALSE(m.contains("rmse_ci"));
  EXPECT_FALSE(m.contains("mae_ci"));
  EXPECT_FALSE(m.contains("r2_ci"));
  EXPECT_FALSE(plain.contains("permutation_importance"));
  EXPECT_GE(m.at("rmse").get<double>(), m.at("mae").get<double>());
  EXPECT_EQ(plain.at("unit"), "dBm");
  EXPECT_TRUE(verify_report(read_json("evaluate.json")));

  c.eval.bootstrap = true;
  c.eval.bootstrap_resamples = 1000;
  c.eval.permutation = true;
  const json full = cmd_evaluate(c);
  const json& ci = full.at("metrics").at("rmse_ci");
  EXPECT_LE(ci.at("low").get<double>(), ci.at("high").get<double>());
  EXPECT_EQ(ci.at("resamples"), 1000);
  EXPECT_EQ(full.at("permutation_importance").size(), 13u);
}

TEST_F(Pipeline, PredictMatchesEvaluatePerSample) {
  RunConfig c = small();
  cmd_prepare(c);
  cmd_train(c);
  cmd_evaluate(c);
  const std::string from_eval = read_file(path("predictions.csv"));
  fs::remove(path("predictions.csv"));
  const json pred = cmd_predict(c);
  EXPECT_TRUE(read_file(path("predictions.csv")) == from_eval);
  const auto rows = lines(from_eval);
  EXPECT_EQ(rows.front(), "index,origin,timestamp,target,y,y_hat,persistence,error");
  EXPECT_EQ(rows.size(), pred.at("n").get<std::size_t>() + 1);
}

TEST_F(Pipeline, PredictSingleWindowReplaysStoredPrediction) {
  RunConfig c = small();
  cmd_prepare(c);
  cmd_train(c);
  const ModelArtifact art = load_model(c.paths.model);
  const DatasetArtifact da = load_dataset(c.paths.dataset);
  const Window& w = da.dataset.part(Split::test)[0];
  const double want =
      destandardize_target(Forecaster(art.config, art.params).predict(w.x), art.scaler)(0);

  const Mat raw = destandardize_x(w.x, art.scaler);
  std::ostringstream csv;
  csv << std::setprecision(17);
  for (std::size_t k = 0; k < art.columns.size(); ++k) csv << (k ? "," : "") << art.columns[k];
  csv << '\n';
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    for (Eigen::Index k = 0; k < raw.cols(); ++k) csv << (k ? "," : "") << raw(r, k);
    csv << '\n';
  }
  write_file(path("window.csv"), csv.str());
  c.paths.window_input = path("window.csv");
  const json rep = cmd_predict(c);
  const json& p = rep.at("predictions").at(0);
  EXPECT_EQ(p.at("column"), "RSRP");
  EXPECT_EQ(p.at("unit"), "dBm");
  EXPECT_NEAR(p.at("value").get<double>(), want, 1e-12 * std::abs(want));
  const json again = cmd_predict(c);
  EXPECT_EQ(again.at("predictions"), rep.at("predictions"));

  std::ostringstream short_csv;
  short_csv << lines(csv.str())[0] << '\n' << lines(csv.str())[1] << '\n';
  write_file(path("short.csv"), short_csv.str());
  c.paths.window_input = path("short.csv");
  EXPECT_THROW(cmd_predict(c), ShapeError);
}

TEST_F(Pipeline, ReportsCarryVersionAndDigest) {
  RunConfig c = small();
  json rep = cmd_prepare(c);
  EXPECT_EQ(rep.at("schema_version"), kReportSchemaVersion);
  EXPECT_EQ(rep.at("format_version"), kFormatVersion);
  EXPECT_EQ(rep.at("command"), "prepare");
  EXPECT_TRUE(verify_report(rep));
  rep["windows"] = 1;
  EXPECT_FALSE(verify_report(rep));
  EXPECT_FALSE(verify_report(json{{"a", 1}}));
}

TEST_F(Pipeline, PathsValidatedBeforeCompute) {
  RunConfig c = small();
  c.paths.dataset = path("missing/dir/ds.ms3m");
  EXPECT_THROW(cmd_prepare(c), DataError);
  c = small();
  c.paths.report_dir = path("nope");
  EXPECT_THROW(cmd_prepare(c), DataError);
  c = small();
  c.paths.dataset.clear();
  EXPECT_THROW(cmd_prepare(c), ShapeError);
  c = small();
  EXPECT_THROW(cmd_train(c), DataError);  // dataset not written yet
}

TEST_F(Pipeline, BenchWritesTables) {
  RunConfig c = small();
  c.bench.windows = {16, 32};
  c.bench.repetitions = 20;
  c.bench.warmup = 2;
  const json rep = cmd_bench(c);
  EXPECT_EQ(rep.at("latency").size(), 2u);
  EXPECT_EQ(rep.at("doubling_ratios").size(), 1u);
  EXPECT_EQ(lines(read_file(path("latency.csv"))).size(), 3u);
  EXPECT_EQ(lines(read_file(path("doubling_ratios.csv"))).size(), 2u);
}

TEST_F(Pipeline, SynthCsvFeedsPrepare) {
  RunConfig c = small();
  c.paths.output = path("synth.csv");
  cmd_synth(c);
  const WindowDataset from_csv = build_dataset(load_raw([&] {
                                                 RunConfig r = c;
                                                 r.paths.input = c.paths.output;
                                                 return r;
                                               }()),
                                               c);
  const WindowDataset direct = build_dataset(load_raw(c), c);
  ASSERT_EQ(from_csv.windows.size(), direct.windows.size());
  for (std::size_t i = 0; i < direct.windows.size(); i += 97)
    EXPECT_LE((from_csv.windows[i].x - direct.windows[i].x).cwiseAbs().maxCoeff(), 1e-9);
}

TEST_F(Pipeline, CliExitCodes) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("train --no-such-flag"), 1);
  EXPECT_EQ(run_cli("train --dataset " + path("absent.ms3m") + " --model " + path("m.ms3m")), 2);

  const std::string common = " --width 8 --n-state 4 --n-components 2"
                             " --n-layers 1 --window 16 --kernel-len 8 --seed 1";
  ASSERT_EQ(run_cli("prepare --input synth --synth-steps 3000 --dataset " + path("ds.ms3m") +
                    common),
            0);
  // A step size this large drives the parameters to infinity on the first update.
  EXPECT_EQ(run_cli("train --dataset " + path("ds.ms3m") + " --model " + path("m.ms3m") + common +
                    " --lr0 1e300 --max-epochs 1 --optimizer sgdwd"),
            3);
  ASSERT_EQ(run_cli("train --dataset " + path("ds.ms3m") + " --model " + path("m.ms3m") + common +
                    " --max-epochs 2"),
            0);
  EXPECT_EQ(run_cli("evaluate --model " + path("m.ms3m") + " --dataset " + path("ds.ms3m")), 0);

  // A flipped byte in the model file is caught by the digest check.
  std::string bytes = read_file(path("m.ms3m"));
  bytes[bytes.size() / 2] = char(bytes[bytes.size() / 2] ^ 0x10);
  write_file(path("m.ms3m"), bytes);
  EXPECT_EQ(run_cli("evaluate --model " + path("m.ms3m") + " --dataset " + path("ds.ms3m")), 2);
}
