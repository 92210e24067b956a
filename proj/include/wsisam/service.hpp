#pragma once

#include "wsisam/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace wsisam {

// Mask run-length encoding: row-major scan, run lengths alternating between
// background and foreground, always starting with a (possibly empty)
// background run. The counts sum to rows * cols.
std::vector<uint32_t> rle_encode(const Mask& m);
Mask rle_decode(const std::vector<uint32_t>& counts, int rows, int cols);
nlohmann::json rle_to_json(const Mask& m);
Mask rle_from_json(const nlohmann::json& j);

/// Error carrying the HTTP status it maps to.
struct ServiceError : std::runtime_error {
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
  int status;
};

struct ServiceConfig {
  long long max_image_px = 4096LL * 4096LL;  // per uploaded or generated image
  size_t max_body_bytes = 64u << 20;
  int n_levels = 2;
  int tile_size = 256;
};

struct Session {
  std::string id;
  std::shared_ptr<const PyramidImage> pyramid;
  std::string ckpt_id;
  std::vector<PromptSet> prompt_history;  // append-only
};

/// Transport-independent core of the HTTP service. Every method is safe to
/// call concurrently.
class SegmentationService {
 public:
  SegmentationService(std::shared_ptr<const WsiSam> model, ServiceConfig cfg = {});

  /// JSON body {"synthetic": {SynthConfig fields}}; returns session metadata.
  nlohmann::json create_synthetic_session(const nlohmann::json& body);
  /// PNG upload (8- or 16-bit gray/RGB).
  nlohmann::json create_upload_session(const std::string& png_bytes);

  nlohmann::json session_info(const std::string& id) const;
  /// Lossless PNG of tile (row, col) at `level`; tiles are tile_size square,
  /// edge tiles are clipped.
  std::string tile(const std::string& id, int level, int row, int col) const;

  /// Body: {"center_world": [r, c], "patch_size": P (optional),
  ///        "hr_level": L (optional, default 0), "prompt": {...}}.
  nlohmann::json predict(const std::string& id, const nlohmann::json& body);

  std::vector<PromptSet> history(const std::string& id) const;
  const ServiceConfig& config() const { return cfg_; }
  std::string ckpt_id() const { return ckpt_id_; }

 private:
  nlohmann::json add_session(PyramidImage pyr);
  std::shared_ptr<Session> find(const std::string& id) const;
  std::string new_id();

  std::shared_ptr<const WsiSam> model_;
  ServiceConfig cfg_;
  std::string ckpt_id_;
  mutable std::shared_mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  mutable std::mutex history_mu_;
  std::mutex id_mu_;
  std::mt19937_64 id_rng_;
  uint64_t id_counter_ = 0;
};

/// Registers every endpoint of `service` on `server`.
void register_routes(httplib::Server& server, SegmentationService& service);

}  // namespace wsisam
