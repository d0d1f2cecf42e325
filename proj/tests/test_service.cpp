#include "cdnet/service.hpp"

#include <gtest/gtest.h>

#include <future>
#include <random>
#include <thread>

#include "model_fixture.hpp"

using namespace cdnet;
using nlohmann::json;

namespace {

class ServiceTest : public ::testing::Test {
 protected:
  ServiceTest() : service_(testing_support::tiny_checkpoint()) {}

  json image_request(unsigned seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> px(64);
    for (double& v : px) v = u(rng);
    return {{"image", px}, {"shape", {8, 8}}};
  }

  ServiceResponse post(const std::string& path, const json& body) const { return service_.handle("POST", path, body.dump()); }

  InferenceService service_;
};

}  // namespace

TEST_F(ServiceTest, ModelInfoReportsDimsNamesAndInterval) {
  const auto r = service_.handle("GET", "/model-info", "");
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["edit_interval"], json::array({-2.0, 5.0}));
  EXPECT_EQ(r.body["image_shape"], json::array({8, 8}));
  EXPECT_EQ(r.body["image_dim"], 64);
  EXPECT_EQ(r.body["target_dim"], 7);
  EXPECT_EQ(r.body["latent_dim"], 2);
  EXPECT_EQ(r.body["mode"], "multilabel");
  EXPECT_EQ(r.body["attribute_names"][4], "thick");
}

TEST_F(ServiceTest, EmptyEditEqualsDecodeOfEncode) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    const json img = image_request(seed);
    const auto enc = post("/encode", img);
    ASSERT_EQ(enc.status, 200) << enc.body.dump();
    const auto dec = post("/decode", {{"y_hat", enc.body["y_hat"]}, {"z", enc.body["z"]}});
    ASSERT_EQ(dec.status, 200) << dec.body.dump();
    json edit_req = img;
    edit_req["edits"] = json::array();
    const auto ed = post("/edit", edit_req);
    ASSERT_EQ(ed.status, 200) << ed.body.dump();
    EXPECT_EQ(ed.body["image_out"], dec.body["image_out"]);
    EXPECT_EQ(ed.body["y_hat"], ed.body["y_hat_edited"]);
    EXPECT_EQ(ed.body["shape"], json::array({8, 8}));
  }
}

TEST_F(ServiceTest, EditByNameOrIndexChangesOnlyThatCoordinate) {
  json req = image_request(3);
  req["edits"] = {{{"attribute", "thick"}, {"value", 3.5}}};
  const auto a = post("/edit", req);
  ASSERT_EQ(a.status, 200);
  req["edits"] = {{{"index", 4}, {"value", 3.5}}};
  const auto b = post("/edit", req);
  EXPECT_EQ(a.body, b.body);
  for (std::size_t i = 0; i < 7; ++i) {
    if (i == 4) EXPECT_EQ(a.body["y_hat_edited"][i], 3.5);
    else EXPECT_EQ(a.body["y_hat_edited"][i], a.body["y_hat"][i]);
  }
}

TEST_F(ServiceTest, OutOfIntervalIs422) {
  json req = image_request(1);
  req["edits"] = {{{"attribute", "large"}, {"value", 5.5}}};
  const auto r = post("/edit", req);
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(r.body["field"], "edits[0].value");
  EXPECT_NE(r.body["error"].get<std::string>().find("-2"), std::string::npos);
}

TEST_F(ServiceTest, MalformedBodiesAre400WithField) {
  auto field = [&](const std::string& path, const std::string& body) {
    const auto r = service_.handle("POST", path, body);
    EXPECT_EQ(r.status, 400) << body;
    return r.body.value("field", std::string("<none>"));
  };
  EXPECT_EQ(field("/encode", "{oops"), "<body>");
  EXPECT_EQ(field("/encode", "[1,2]"), "<body>");
  EXPECT_EQ(field("/encode", "{}"), "image");
  EXPECT_EQ(field("/encode", R"({"image": [1, 2, 3]})"), "image");
  EXPECT_EQ(field("/encode", R"({"image": "abc"})"), "image");
  json bad_shape = image_request(0);
  bad_shape["shape"] = {4, 16};
  EXPECT_EQ(field("/encode", bad_shape.dump()), "shape");
  EXPECT_EQ(field("/decode", R"({"y_hat": [0,0,0,0,0,0,0]})"), "z");
  json e = image_request(0);
  e["edits"] = {{{"attribute", "furry"}, {"value", 1.0}}};
  EXPECT_EQ(field("/edit", e.dump()), "edits[0].attribute");
  e["edits"] = {{{"index", 4}, {"value", 1.0}}, {{"attribute", "thick"}, {"value", 2.0}}};
  EXPECT_EQ(field("/edit", e.dump()), "edits[1]");
  e["edits"] = {{{"index", 40}, {"value", 1.0}}};
  EXPECT_EQ(field("/edit", e.dump()), "edits[0].index");
  e["edits"] = {{{"index", 1}}};
  EXPECT_EQ(field("/edit", e.dump()), "edits[0].value");
}

TEST_F(ServiceTest, RoutingErrors) {
  EXPECT_EQ(service_.handle("GET", "/nope", "").status, 404);
  EXPECT_EQ(service_.handle("GET", "/edit", "").status, 405);
  EXPECT_EQ(service_.handle("POST", "/model-info", "{}").status, 405);
}

TEST_F(ServiceTest, ConcurrentEditsMatchSequential) {
  std::vector<json> requests;
  for (unsigned i = 0; i < 32; ++i) {
    json r = image_request(i);
    r["edits"] = {{{"index", i % 7}, {"value", -1.5 + 0.1 * i}}};
    requests.push_back(r);
  }
  std::vector<json> sequential;
  for (const auto& r : requests) sequential.push_back(post("/edit", r).body);
  std::vector<std::future<json>> futures;
  for (const auto& r : requests) {
    futures.push_back(std::async(std::launch::async, [this, &r] { return post("/edit", r).body; }));
  }
  for (std::size_t i = 0; i < requests.size(); ++i) EXPECT_EQ(futures[i].get(), sequential[i]) << i;
}

TEST(ServiceMulticlass, TargetClassSwap) {
  const InferenceService service(testing_support::tiny_checkpoint("multiclass"));
  std::vector<double> px(64, 0.3);
  const auto r = service.handle("POST", "/edit", json{{"image", px}, {"target_class", 2}}.dump());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  auto y = r.body["y_hat"].get<std::vector<double>>();
  auto e = r.body["y_hat_edited"].get<std::vector<double>>();
  EXPECT_EQ(e[2], *std::max_element(y.begin(), y.end()));
  EXPECT_EQ(service.handle("POST", "/edit", json{{"image", px}}.dump()).status, 400);
  EXPECT_EQ(service.handle("POST", "/edit", json{{"image", px}, {"target_class", 9}}.dump()).status, 400);
}

TEST(ServiceHttp, EndpointsOverRealSockets) {
  const InferenceService service(testing_support::tiny_checkpoint());
  httplib::Server server;
  mount(server, service);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  const auto info = client.Get("/model-info");
  ASSERT_TRUE(info);
  EXPECT_EQ(info->status, 200);
  EXPECT_EQ(json::parse(info->body)["edit_interval"], json::array({-2.0, 5.0}));

  std::vector<double> px(64, 0.5);
  const json req{{"image", px}, {"edits", {{{"attribute", "slanted"}, {"value", 4.0}}}}};
  const auto edit = client.Post("/edit", req.dump(), "application/json");
  ASSERT_TRUE(edit);
  EXPECT_EQ(edit->status, 200);
  EXPECT_EQ(json::parse(edit->body), service.handle("POST", "/edit", req.dump()).body);

  const json bad{{"image", px}, {"edits", {{{"attribute", "slanted"}, {"value", -3.0}}}}};
  const auto rejected = client.Post("/edit", bad.dump(), "application/json");
  ASSERT_TRUE(rejected);
  EXPECT_EQ(rejected->status, 422);
  const auto malformed = client.Post("/decode", "{", "application/json");
  ASSERT_TRUE(malformed);
  EXPECT_EQ(malformed->status, 400);

  std::vector<std::thread> clients;
  std::vector<std::string> bodies(8);
  for (int i = 0; i < 8; ++i) {
    clients.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      if (auto r = c.Post("/edit", req.dump(), "application/json")) bodies[i] = r->body;
    });
  }
  for (auto& t : clients) t.join();
  for (const auto& b : bodies) EXPECT_EQ(b, edit->body);

  server.stop();
  worker.join();
}
