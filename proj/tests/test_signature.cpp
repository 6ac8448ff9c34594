// Slow: trains a full default run on desk-scale CLEVR-Hans3 through the API.

#include <gtest/gtest.h>

#include <algorithm>
#include <thread>

#include "nesyxil/http.hpp"

using namespace nesyxil;
using nlohmann::json;

TEST(CleverHansSignature, GrayDominatesClassOneExplanations) {
  const fs::path root = fs::temp_directory_path() / "nesyxil_signature";
  fs::remove_all(root);
  DatasetSpec spec = clevr_hans3_spec(Scale::kDesk, 0);
  write_dataset(root / "datasets" / "ch3", spec, generate_dataset(spec));
  Workspace ws(root);
  ApiServer server(ws);
  const int port = server.bind_any("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread listener([&] { server.listen_after_bind(); });
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(300, 0);

  auto posted = client.Post("/api/train", R"({"dataset":"ch3","mode":"default","seed":0,"l1_steps":5})",
                            "application/json");
  ASSERT_TRUE(posted);
  ASSERT_EQ(posted->status, 202) << posted->body;
  const std::string job = json::parse(posted->body)["id"];
  EXPECT_EQ(server.jobs().wait(job).state, JobState::kFinished);

  auto listed = client.Get("/api/samples?dataset=ch3&split=val&class=0");
  ASSERT_TRUE(listed);
  const auto samples = json::parse(listed->body)["samples"];
  const std::size_t n = 40;
  ASSERT_GE(samples.size(), n);
  const std::size_t gray = kColorOffset;  // color:gray
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = samples[i]["id"];
    auto r = client.Get("/api/sample/" + id + "?target=0");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200) << r->body;
    const auto values = json::parse(r->body)["explanation"]["values"];
    std::vector<std::pair<double, std::size_t>> columns(kObjectWidth);
    for (std::size_t d = 0; d < kObjectWidth; ++d) {
      columns[d].second = d;
      for (const auto& row : values) columns[d].first += row[d].get<double>();
    }
    std::partial_sort(columns.begin(), columns.begin() + 3, columns.end(), std::greater<>());
    hits += std::any_of(columns.begin(), columns.begin() + 3, [&](const auto& c) { return c.second == gray; });
  }
  std::cout << "gray among the top-3 columns: " << hits << " of " << n << "\n";
  EXPECT_GT(hits, n / 2);

  server.stop();
  listener.join();
  fs::remove_all(root);
}
