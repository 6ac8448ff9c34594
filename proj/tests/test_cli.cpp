#include <gtest/gtest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <thread>

#include "nesyxil/http.hpp"

using namespace nesyxil;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run_cli(const std::string& args) {
  const std::string cmd = std::string(NESYXIL_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "nesyxil_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_;
};

fs::path Cli::root_;

std::string quiet_train_args(const fs::path& data, const fs::path& out) {
  return "train --data " + data.string() + " --out " + out.string() + " --epochs 1 --l1-steps 5 --quiet";
}

}  // namespace

TEST_F(Cli, GenWritesDeskCounts) {
  const fs::path out = root_ / "gen";
  Result r = run_cli("gen --spec ch3 --scale desk --seed 0 --verify --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("train 1500, val 450, test 450"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("exclusivity violations 0"), std::string::npos);
  auto meta = json::parse(read_text(out / "meta.json"));
  EXPECT_EQ(meta["counts"]["train"], 500);
  EXPECT_EQ(meta["counts"]["test"], 150);
}

TEST_F(Cli, UntrainedModelIsNearChance) {
  const fs::path data = root_ / "small";
  DatasetSpec spec = clevr_hans3_spec();
  spec.per_class_counts = {40, 20, 100};
  write_dataset(data, spec, generate_dataset(spec));
  const fs::path run = root_ / "run-small";
  ASSERT_EQ(run_cli(quiet_train_args(data, run)).code, 0);

  Result r = run_cli("eval --run " + run.string() + " --split test --checkpoint init");
  ASSERT_EQ(r.code, 0) << r.out;
  const double bacc = json::parse(r.out)["balanced_accuracy"];
  EXPECT_NEAR(bacc, 1.0 / 3.0, 0.1);

  Result e = run_cli("explain --run " + run.string() + " --sample ch3-test-c0-00000 --steps 20");
  ASSERT_EQ(e.code, 0) << e.out;
  // Every padding row prints as zeros.
  std::istringstream lines(e.out);
  std::string line;
  int empty_rows = 0;
  while (std::getline(lines, line)) {
    if (line.find("(empty)") == std::string::npos) continue;
    ++empty_rows;
    std::istringstream cells(line);
    std::string cell;
    cells >> cell;  // slot index
    for (std::size_t d = 0; d < kObjectWidth; ++d) {
      cells >> cell;
      EXPECT_EQ(cell, "0.0000") << line;
    }
  }
  const LoadedDataset loaded = read_dataset(data);
  const auto* scene = loaded.data.find("ch3-test-c0-00000");
  ASSERT_NE(scene, nullptr);
  EXPECT_EQ(empty_rows, static_cast<int>(kDefaultSlots - scene->objects.size()));

  EXPECT_NE(run_cli("explain --run " + run.string() + " --sample nope").code, 0);
}

TEST_F(Cli, RejectsBadArguments) {
  EXPECT_NE(run_cli("gen --spec ch3 --out " + (root_ / "x").string() + " --bogus").code, 0);
  EXPECT_NE(run_cli("gen --spec ch9 --out " + (root_ / "x").string()).code, 0);
  EXPECT_NE(run_cli("train --data " + (root_ / "missing").string()).code, 0);
  Result r = run_cli("train --data " + (root_ / "missing").string());
  EXPECT_NE(r.out.find("error:"), std::string::npos) << r.out;
}

TEST_F(Cli, ServeUsesWorkspaceFromEnvironment) {
  const fs::path ws = root_ / "ws";
  DatasetSpec spec = clevr_hans3_spec();
  spec.per_class_counts = {6, 3, 3};
  write_dataset(ws / "datasets" / "mini", spec, generate_dataset(spec));
  const int port = 18000 + static_cast<int>(getpid() % 2000);

  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    setenv("NESYXIL_WORKSPACE", ws.c_str(), 1);
    const std::string p = std::to_string(port);
    const std::string elsewhere = (root_ / "elsewhere").string();
    execl(NESYXIL_CLI, NESYXIL_CLI, "serve", "--workspace", elsewhere.c_str(), "--port", p.c_str(), nullptr);
    _exit(127);
  }
  httplib::Client client("127.0.0.1", port);
  httplib::Result res;
  for (int i = 0; i < 100 && !res; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    res = client.Get("/api/datasets");
  }
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  ASSERT_EQ(body.size(), 1u);
  EXPECT_EQ(body[0]["name"], "mini");
  EXPECT_FALSE(fs::exists(root_ / "elsewhere"));

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
}
