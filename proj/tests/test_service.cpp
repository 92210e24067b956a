#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"
#include "wsisam/image_io.hpp"
#include "wsisam/service.hpp"
#include "wsisam/training.hpp"

#include <httplib.h>

#include <future>
#include <thread>

using namespace wsisam;
using nlohmann::json;

namespace {

// Tiny model briefly trained on box and point prompts.
std::shared_ptr<const WsiSam> toy_model() {
  static std::shared_ptr<const WsiSam> model = [] {
    WsiSam m(ModelConfig::tiny());
    SynthConfig sc;
    sc.n_images = 4;
    sc.seed = 40;
    SamplerConfig samp;
    samp.patch_size = m.config().patch_size();
    samp.center_jitter = 2;
    TrainConfig tc;
    tc.steps = 150;
    tc.lr = 3e-3;
    tc.seed = 1;
    tc.prompt_mix = {0.2, 0.8, 0.0};
    tc.prompts.max_points = 3;
    train(m, prepare_samples(m, sample_pairs(synth_dataset(sc), samp, 2)), tc, LossConfig{});
    return std::make_shared<const WsiSam>(std::move(m));
  }();
  return model;
}

class Harness {
 public:
  explicit Harness(ServiceConfig cfg = {}) : service(toy_model(), cfg) {
    register_routes(server, service);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~Harness() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }

  SegmentationService service;
  httplib::Server server;
  int port = 0;
  std::thread thread;
};

json synthetic_body(int n_objects, uint64_t seed) {
  return json{{"synthetic", {{"n_objects", n_objects}, {"seed", seed}}}};
}

json predict_body(const std::vector<int>& center, const json& prompt) {
  return json{{"center_world", center}, {"prompt", prompt}};
}

}  // namespace

TEST_CASE("RLE format and round-trip property") {
  Mask m(1, 4);
  m.at(0, 1) = m.at(0, 2) = 1;
  CHECK(rle_encode(m) == std::vector<uint32_t>{1, 2, 1});
  Mask starts_fg(1, 2);
  starts_fg.at(0, 0) = 1;
  CHECK(rle_encode(starts_fg) == std::vector<uint32_t>{0, 1, 1});
  CHECK(rle_encode(Mask(2, 3)) == std::vector<uint32_t>{6});

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 40);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  for (int i = 0; i < 300; ++i) {
    const Mask r = testing::random_mask(dim(rng), dim(rng), density(rng), rng);
    CHECK(rle_decode(rle_encode(r), r.rows, r.cols) == r);
    CHECK(rle_from_json(rle_to_json(r)) == r);
  }
  CHECK_THROWS_AS(rle_decode({3, 3}, 2, 2), InvalidArgument);
  CHECK_THROWS_AS(rle_decode({1}, 2, 2), InvalidArgument);
}

TEST_CASE("session creation over HTTP") {
  Harness h;
  auto cli = h.client();
  auto res = cli.Post("/sessions", synthetic_body(3, 1).dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 201);
  const json info = json::parse(res->body);
  CHECK(info["levels"] == 2);
  CHECK(info["dims"][0][0] == 512);
  CHECK(info["dims"][1][0] == 256);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");

  auto odd = cli.Post("/sessions", encode_png(Image(5, 7, 1, 3.0)), "image/png");
  REQUIRE(odd);
  CHECK(odd->status == 400);
  CHECK(odd->body.find("divisible") != std::string::npos);

  const std::string png = encode_png(testing::random_image(64, 64, 2));
  auto a = cli.Post("/sessions", png, "image/png");
  auto b = cli.Post("/sessions", png, "image/png");
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->status == 201);
  CHECK(json::parse(a->body)["id"] != json::parse(b->body)["id"]);

  CHECK(cli.Post("/sessions", "{not json", "application/json")->status == 400);
  CHECK(cli.Post("/sessions", "hello", "text/plain")->status == 400);
  CHECK(cli.Post("/sessions", json{{"synthetic", {{"n_objects", "x"}}}}.dump(), "application/json")->status == 400);
  CHECK(cli.Get("/sessions/nope")->status == 404);
  CHECK(cli.Get("/health")->status == 200);
  CHECK(cli.Options("/sessions")->status == 204);
}

TEST_CASE("oversized images are refused") {
  ServiceConfig cfg;
  cfg.max_image_px = 128 * 128;
  Harness h(cfg);
  auto cli = h.client();
  CHECK(cli.Post("/sessions", synthetic_body(1, 1).dump(), "application/json")->status == 413);
  CHECK(cli.Post("/sessions", encode_png(Image(256, 256)), "image/png")->status == 413);
  CHECK(cli.Post("/sessions", encode_png(Image(128, 128)), "image/png")->status == 201);
}

TEST_CASE("tiles decode to the generator's pixels") {
  Harness h;
  auto cli = h.client();
  const json info = json::parse(cli.Post("/sessions", synthetic_body(3, 1).dump(), "application/json")->body);
  const std::string id = info["id"];
  SynthConfig sc;
  sc.n_objects = 3;
  sc.seed = 1;
  const PyramidImage expect = synth_dataset(sc)[0];

  auto t = cli.Get("/sessions/" + id + "/tile?level=0&row=0&col=0");
  REQUIRE(t);
  CHECK(t->status == 200);
  CHECK(t->get_header_value("Content-Type") == "image/png");
  CHECK(decode_png(t->body) == crop(expect.levels[0], 0, 0, 256, 256));
  CHECK(cli.Get("/sessions/" + id + "/tile?level=0&row=0&col=0")->body == t->body);
  CHECK(decode_png(cli.Get("/sessions/" + id + "/tile?level=1&row=0&col=0")->body) == expect.levels[1]);

  CHECK(cli.Get("/sessions/" + id + "/tile?level=5&row=0&col=0")->status == 404);
  CHECK(cli.Get("/sessions/" + id + "/tile?level=0&row=2&col=0")->status == 404);
  CHECK(cli.Get("/sessions/zzz/tile?level=0&row=0&col=0")->status == 404);
  CHECK(cli.Get("/sessions/" + id + "/tile?level=x&row=0&col=0")->status == 400);
}

TEST_CASE("predict contract") {
  Harness h;
  auto cli = h.client();
  const json info = json::parse(cli.Post("/sessions", synthetic_body(3, 1).dump(), "application/json")->body);
  const std::string id = info["id"];
  SynthConfig sc;
  sc.n_objects = 3;
  sc.seed = 1;
  const PyramidImage pyr = synth_dataset(sc)[0];
  const ObjectInfo* lesion = nullptr;
  for (const auto& o : pyr.objects)
    if (o.family == ObjectFamily::lesion) lesion = &o;
  REQUIRE(lesion != nullptr);
  const int P = toy_model()->config().patch_size();
  const std::vector<int> centre{lesion->center_row, lesion->center_col};
  const json point = {{"points", {{P / 2, P / 2}}}, {"labels", {1}}};

  auto res = cli.Post("/sessions/" + id + "/predict", predict_body(centre, point).dump(), "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 200);
  const json out = json::parse(res->body);
  const Mask hr = rle_from_json(out["hr_mask"]);
  CHECK(hr.rows == P);
  CHECK(hr.count() > 0);
  CHECK(rle_from_json(out["lr_mask"]).rows == P);
  const auto ext = out["hr_extent"];
  const auto lext = out["lr_extent"];
  CHECK(ext[2].get<int>() - ext[0].get<int>() == P);
  CHECK(lext[2].get<int>() - lext[0].get<int>() == 2 * P);
  CHECK((ext[0].get<int>() + ext[2].get<int>()) == (lext[0].get<int>() + lext[2].get<int>()));

  auto again = cli.Post("/sessions/" + id + "/predict", predict_body(centre, point).dump(), "application/json");
  CHECK(json::parse(again->body)["hr_mask"] == out["hr_mask"]);
  CHECK(json::parse(again->body)["lr_mask"] == out["lr_mask"]);

  auto empty = cli.Post("/sessions/" + id + "/predict", predict_body(centre, json::object()).dump(),
                        "application/json");
  CHECK(empty->status == 422);
  auto no_points = cli.Post("/sessions/" + id + "/predict",
                            predict_body(centre, json{{"points", json::array()}}).dump(), "application/json");
  CHECK(no_points->status == 422);
  CHECK(cli.Post("/sessions/" + id + "/predict", predict_body({10, 10}, point).dump(), "application/json")->status ==
        409);
  json bad_level = predict_body(centre, point);
  bad_level["hr_level"] = 1;
  CHECK(cli.Post("/sessions/" + id + "/predict", bad_level.dump(), "application/json")->status == 409);
  json wrong_size = predict_body(centre, point);
  wrong_size["patch_size"] = P * 2;
  CHECK(cli.Post("/sessions/" + id + "/predict", wrong_size.dump(), "application/json")->status == 400);
  CHECK(cli.Post("/sessions/" + id + "/predict", predict_body(centre, {{"mask_path", "/etc/passwd"}}).dump(),
                 "application/json")
            ->status == 400);
  CHECK(cli.Post("/sessions/" + id + "/predict", predict_body(centre, {{"points", {{P, 0}}}}).dump(),
                 "application/json")
            ->status == 400);
  CHECK(cli.Post("/sessions/nope/predict", predict_body(centre, point).dump(), "application/json")->status == 404);

  Mask coarse(P, P);
  for (int r = 4; r < P - 4; ++r)
    for (int c = 4; c < P - 4; ++c) coarse.at(r, c) = 1;
  auto with_mask = cli.Post("/sessions/" + id + "/predict",
                            predict_body(centre, {{"mask_rle", rle_to_json(coarse)}}).dump(), "application/json");
  CHECK(with_mask->status == 200);

  const auto hist = h.service.history(id);
  CHECK(hist.size() == 3);
  CHECK(json::parse(cli.Get("/sessions/" + id)->body)["history_length"] == 3);
}

TEST_CASE("odd centres are rounded onto the alignment grid") {
  SegmentationService svc(toy_model());
  const std::string id = svc.create_synthetic_session(synthetic_body(2, 3))["id"];
  const json point = {{"points", {{16, 16}}}};
  const json out = svc.predict(id, predict_body({201, 255}, point));
  CHECK(out["center_world"] == json::array({202, 256}));
}

TEST_CASE("history never influences predictions") {
  SegmentationService svc(toy_model());
  const std::string id = svc.create_synthetic_session(synthetic_body(2, 5))["id"];
  const json a = predict_body({256, 256}, {{"points", {{10, 12}}}});
  const json b = predict_body({200, 300}, {{"box", {2, 2, 20, 25}}, {"points", {{5, 5}, {9, 9}}}, {"labels", {1, 0}}});
  const json first = svc.predict(id, a);
  for (int i = 0; i < 3; ++i) svc.predict(id, b);
  const json second = svc.predict(id, a);
  CHECK(first["hr_mask"] == second["hr_mask"]);
  CHECK(first["lr_mask"] == second["lr_mask"]);
  CHECK(first["iou_estimate"] == second["iou_estimate"]);
  CHECK(svc.history(id).size() == 5);
}

TEST_CASE("concurrent predictions equal serial ones") {
  SegmentationService svc(toy_model());
  std::vector<std::string> ids;
  for (uint64_t s = 0; s < 3; ++s) ids.push_back(svc.create_synthetic_session(synthetic_body(2, 10 + s))["id"]);
  std::vector<json> requests;
  for (int k = 0; k < 4; ++k)
    requests.push_back(predict_body({160 + 32 * k, 192 + 16 * k}, {{"points", {{8 + k, 20 - k}}}}));

  std::vector<json> serial;
  for (const auto& id : ids)
    for (const auto& r : requests) serial.push_back(svc.predict(id, r)["hr_mask"]);

  std::vector<std::future<json>> futures;
  for (const auto& id : ids)
    for (const auto& r : requests)
      futures.push_back(std::async(std::launch::async, [&svc, id, r] { return svc.predict(id, r)["hr_mask"]; }));
  for (size_t i = 0; i < futures.size(); ++i) CHECK(futures[i].get() == serial[i]);
  for (const auto& id : ids) CHECK(svc.history(id).size() == 8);
}
