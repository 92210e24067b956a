#include "wsisam/service.hpp"

#include "wsisam/image_io.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>

namespace wsisam {

using nlohmann::json;

std::vector<uint32_t> rle_encode(const Mask& m) {
  std::vector<uint32_t> counts;
  uint8_t current = 0;
  uint32_t run = 0;
  for (uint8_t v : m.data) {
    if (v != current) {
      counts.push_back(run);
      current = v;
      run = 0;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

Mask rle_decode(const std::vector<uint32_t>& counts, int rows, int cols) {
  if (rows < 0 || cols < 0) throw InvalidArgument("rle: negative dimensions");
  Mask m(rows, cols);
  size_t pos = 0;
  uint8_t v = 0;
  for (uint32_t c : counts) {
    if (pos + c > m.data.size()) throw InvalidArgument("rle: runs exceed rows * cols");
    std::fill_n(m.data.begin() + static_cast<std::ptrdiff_t>(pos), c, v);
    pos += c;
    v ^= 1;
  }
  if (pos != m.data.size()) throw InvalidArgument("rle: runs do not cover rows * cols");
  return m;
}

json rle_to_json(const Mask& m) { return json{{"rows", m.rows}, {"cols", m.cols}, {"counts", rle_encode(m)}}; }

Mask rle_from_json(const json& j) {
  return rle_decode(j.at("counts").get<std::vector<uint32_t>>(), j.at("rows").get<int>(), j.at("cols").get<int>());
}

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json extent_json(const Extent& e) { return json::array({e.r0, e.c0, e.r1, e.c1}); }

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  Image out(img.rows, img.cols, 1);
  for (int r = 0; r < img.rows; ++r) {
    for (int c = 0; c < img.cols; ++c) {
      double s = 0.0;
      for (int ch = 0; ch < img.channels; ++ch) s += img.at(r, c, ch);
      out.at(r, c) = s / img.channels;
    }
  }
  return out;
}

}  // namespace

SegmentationService::SegmentationService(std::shared_ptr<const WsiSam> model, ServiceConfig cfg)
    : model_(std::move(model)), cfg_(cfg), id_rng_(std::random_device{}()) {
  if (!model_) throw InvalidArgument("service: no model");
  if (cfg_.n_levels < 2) throw InvalidArgument("service: n_levels must be >= 2");
  if (cfg_.tile_size < 1) throw InvalidArgument("service: tile_size must be >= 1");
  ckpt_id_ = hex64(model_->fingerprint());
}

std::string SegmentationService::new_id() {
  std::lock_guard lock(id_mu_);
  return "s" + std::to_string(++id_counter_) + "-" + hex64(id_rng_()).substr(0, 8);
}

json SegmentationService::add_session(PyramidImage pyr) {
  auto s = std::make_shared<Session>();
  s->id = new_id();
  s->ckpt_id = ckpt_id_;
  s->pyramid = std::make_shared<const PyramidImage>(std::move(pyr));
  {
    std::unique_lock lock(sessions_mu_);
    sessions_.emplace(s->id, s);
  }
  spdlog::info("session {} created ({}x{}, {} levels)", s->id, s->pyramid->levels[0].rows,
               s->pyramid->levels[0].cols, s->pyramid->n_levels());
  return session_info(s->id);
}

json SegmentationService::create_synthetic_session(const json& body) {
  if (!body.is_object() || !body.contains("synthetic") || !body["synthetic"].is_object()) {
    throw ServiceError(400, "expected {\"synthetic\": {...}}");
  }
  SynthConfig sc;
  try {
    sc = synth_config_from_json(body["synthetic"].dump());
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("invalid synthetic request: ") + e.what());
  }
  sc.n_images = 1;
  if (!body["synthetic"].contains("n_levels")) sc.n_levels = cfg_.n_levels;
  if (static_cast<long long>(sc.image_size) * sc.image_size > cfg_.max_image_px) {
    throw ServiceError(413, "synthetic image of " + std::to_string(sc.image_size) + "^2 px exceeds the limit of " +
                                std::to_string(cfg_.max_image_px) + " px");
  }
  std::vector<PyramidImage> data;
  try {
    data = synth_dataset(sc);
  } catch (const InvalidArgument& e) {
    throw ServiceError(400, e.what());
  }
  return add_session(std::move(data.at(0)));
}

json SegmentationService::create_upload_session(const std::string& png_bytes) {
  Image img;
  try {
    img = decode_png(png_bytes);
  } catch (const InvalidArgument& e) {
    throw ServiceError(400, std::string("invalid image: ") + e.what());
  }
  if (static_cast<long long>(img.rows) * img.cols > cfg_.max_image_px) {
    throw ServiceError(413, "image of " + std::to_string(img.rows) + "x" + std::to_string(img.cols) +
                                " px exceeds the limit of " + std::to_string(cfg_.max_image_px) + " px");
  }
  try {
    PyramidImage pyr = build_pyramid(img, Mask(img.rows, img.cols), cfg_.n_levels, "upload");
    return add_session(std::move(pyr));
  } catch (const InvalidArgument& e) {
    throw ServiceError(400, e.what());
  }
}

std::shared_ptr<Session> SegmentationService::find(const std::string& id) const {
  std::shared_lock lock(sessions_mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session '" + id + "'");
  return it->second;
}

json SegmentationService::session_info(const std::string& id) const {
  auto s = find(id);
  const PyramidImage& p = *s->pyramid;
  json dims = json::array();
  for (const auto& l : p.levels) dims.push_back({l.rows, l.cols, l.channels});
  size_t n_history = 0;
  {
    std::lock_guard lock(history_mu_);
    n_history = s->prompt_history.size();
  }
  return json{{"id", s->id},
              {"levels", p.n_levels()},
              {"dims", dims},
              {"tile_size", cfg_.tile_size},
              {"patch_size", model_->config().patch_size()},
              {"ckpt_id", s->ckpt_id},
              {"history_length", n_history}};
}

std::string SegmentationService::tile(const std::string& id, int level, int row, int col) const {
  auto s = find(id);
  const PyramidImage& p = *s->pyramid;
  if (level < 0 || level >= p.n_levels()) throw ServiceError(404, "no level " + std::to_string(level));
  const Image& img = p.levels[static_cast<size_t>(level)];
  const int t = cfg_.tile_size;
  const int n_rows = (img.rows + t - 1) / t;
  const int n_cols = (img.cols + t - 1) / t;
  if (row < 0 || col < 0 || row >= n_rows || col >= n_cols) {
    throw ServiceError(404, "tile (" + std::to_string(row) + ", " + std::to_string(col) + ") outside level " +
                                std::to_string(level) + " (" + std::to_string(n_rows) + "x" +
                                std::to_string(n_cols) + " tiles)");
  }
  const int r0 = row * t;
  const int c0 = col * t;
  return encode_png(crop(img, r0, c0, std::min(t, img.rows - r0), std::min(t, img.cols - c0)));
}

json SegmentationService::predict(const std::string& id, const json& body) {
  const auto t0 = std::chrono::steady_clock::now();
  auto s = find(id);
  const PyramidImage& pyr = *s->pyramid;
  const int P = model_->config().patch_size();
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");

  int row = 0, col = 0, hr_level = 0;
  try {
    const auto c = body.at("center_world").get<std::vector<int>>();
    if (c.size() != 2) throw ServiceError(400, "center_world must be [row, col]");
    row = c[0];
    col = c[1];
    hr_level = body.value("hr_level", 0);
    if (body.contains("patch_size") && body["patch_size"].get<int>() != P) {
      throw ServiceError(400, "patch_size must be " + std::to_string(P) + " for the loaded checkpoint");
    }
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("malformed predict request: ") + e.what());
  }

  PromptSet prompts;
  try {
    json pj = body.value("prompt", json::object());
    if (!pj.is_object()) throw ServiceError(400, "prompt must be an object");
    if (pj.contains("mask_path")) throw ServiceError(400, "mask_path is not accepted over HTTP; send mask_rle");
    std::optional<Mask> coarse;
    if (pj.contains("mask_rle")) {
      coarse = rle_from_json(pj["mask_rle"]);
      pj.erase("mask_rle");
    }
    prompts = prompts_from_json(pj);
    if (coarse) prompts.mask = CoarseMask{*coarse};
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("malformed prompt: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ServiceError(400, e.what());
  }
  if (prompts.empty()) throw ServiceError(422, "prompt set is empty; send points, a box or a mask");
  try {
    validate_prompts(prompts, P);
  } catch (const InvalidArgument& e) {
    throw ServiceError(400, e.what());
  }

  if (hr_level < 0 || hr_level + 1 >= pyr.n_levels()) {
    throw ServiceError(409, "hr_level " + std::to_string(hr_level) + " has no coarser partner level");
  }
  // Centres snap to the alignment grid; they are never moved inward.
  const int align = 1 << (hr_level + 1);
  auto snap = [align](int v) { return static_cast<int>(std::lround(static_cast<double>(v) / align)) * align; };
  row = snap(row);
  col = snap(col);

  PatchPair pair;
  try {
    pair = extract_pair(pyr, row, col, hr_level, P);
  } catch (const OutOfBounds& e) {
    throw ServiceError(409, e.what());
  }
  pair.hr_patch = to_gray(pair.hr_patch);
  pair.lr_patch = to_gray(pair.lr_patch);
  const MaskPrediction pred = model_->predict(pair, prompts);

  {
    std::lock_guard lock(history_mu_);
    s->prompt_history.push_back(prompts);
  }
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return json{{"session", s->id},
              {"center_world", {row, col}},
              {"hr_level", hr_level},
              {"patch_size", P},
              {"hr_mask", rle_to_json(pred.hr_mask)},
              {"lr_mask", rle_to_json(pred.lr_mask)},
              {"hr_extent", extent_json(pair.hr_extent_world())},
              {"lr_extent", extent_json(pair.lr_extent_world())},
              {"iou_estimate", pred.iou_estimate},
              {"latency_ms", ms}};
}

std::vector<PromptSet> SegmentationService::history(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lock(history_mu_);
  return s->prompt_history;
}

namespace {

void send_json(httplib::Response& res, int status, const json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, json{{"error", msg}, {"status", status}});
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    send_error(res, e.status, e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, std::string("malformed JSON: ") + e.what());
  } catch (const EmptyPrompt& e) {
    send_error(res, 422, e.what());
  } catch (const InvalidArgument& e) {
    send_error(res, 400, e.what());
  } catch (const OutOfBounds& e) {
    send_error(res, 409, e.what());
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    send_error(res, 500, e.what());
  }
}

int int_param(const httplib::Request& req, const char* name) {
  if (!req.has_param(name)) throw ServiceError(400, std::string("missing query parameter '") + name + "'");
  const std::string v = req.get_param_value(name);
  try {
    size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ServiceError(400, std::string("query parameter '") + name + "' must be an integer");
  }
}

}  // namespace

void register_routes(httplib::Server& server, SegmentationService& service) {
  server.set_payload_max_length(service.config().max_body_bytes);
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

  server.Get("/health", [&service](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"status", "ok"}, {"ckpt_id", service.ckpt_id()}});
  });

  server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string type = req.get_header_value("Content-Type");
      if (type.rfind("application/json", 0) == 0) {
        send_json(res, 201, service.create_synthetic_session(json::parse(req.body)));
      } else if (type.rfind("image/png", 0) == 0 || type.rfind("application/octet-stream", 0) == 0) {
        send_json(res, 201, service.create_upload_session(req.body));
      } else {
        throw ServiceError(400, "Content-Type must be application/json (synthetic request) or image/png (upload)");
      }
    });
  });

  server.Get("/sessions/:id", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.session_info(req.path_params.at("id"))); });
  });

  server.Get("/sessions/:id/tile", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string png = service.tile(req.path_params.at("id"), int_param(req, "level"), int_param(req, "row"),
                                           int_param(req, "col"));
      res.status = 200;
      res.set_content(png, "image/png");
    });
  });

  server.Post("/sessions/:id/predict", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.predict(req.path_params.at("id"), json::parse(req.body))); });
  });

  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

}  // namespace wsisam
