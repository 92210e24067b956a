#pragma once

#include "wsisam/autodiff.hpp"

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace wsisam {

/// Frozen vs learnable parameter names. Disjoint; union covers the store.
struct ParamPartition {
  std::vector<std::string> frozen;
  std::vector<std::string> learnable;
};

// Parameter naming scheme (dot-separated, lowercase):
//   encoder.*   image encoder (frozen)
//   prompt.*    prompt encoder (frozen)
//   decoder.*   base two-way mask decoder, output tokens, IoU head (frozen)
//   wsi.*       HR/LR tokens, aggregation FC, fusion paths, aggregated-token
//               mask head (learnable)
// Linear layers are "<prefix>.w" (in x out) and "<prefix>.b" (1 x out);
// layer norms are "<prefix>.g" / "<prefix>.b".
class ParamStore {
 public:
  void add(const std::string& name, Mat value, bool learnable);
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Mat& get(const std::string& name) const;
  Mat& get_mut(const std::string& name);
  bool learnable(const std::string& name) const;
  std::vector<std::string> names() const;
  size_t size() const { return entries_.size(); }
  size_t scalar_count() const;

  ParamPartition partition() const;

  /// FNV-1a over names, shapes and raw bytes of the given parameters.
  uint64_t hash(const std::vector<std::string>& names) const;
  uint64_t hash_all() const { return hash(names()); }

  bool operator==(const ParamStore& o) const;

 private:
  struct Entry {
    Mat value;
    bool learnable = false;
  };
  std::map<std::string, Entry> entries_;
};

/// Binds store parameters onto a tape. Learnable parameters become gradient
/// leaves when `track_grad` is set; everything else enters as a constant.
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, const ParamStore& store, bool track_grad)
      : tape_(tape), store_(store), track_grad_(track_grad) {}

  ad::Var operator()(const std::string& name);
  ad::Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }
  const std::map<std::string, ad::Var>& bound() const { return vars_; }

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  bool track_grad_;
  std::map<std::string, ad::Var> vars_;
};

// Initialisers.
Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);
void init_linear(ParamStore& s, const std::string& prefix, int in, int out, bool learnable, std::mt19937_64& rng,
                 double gain = 1.0);
void init_layer_norm(ParamStore& s, const std::string& prefix, int dim, bool learnable);

// Checkpoint archive (little-endian):
//   bytes 0..7   magic "WSISAMCK"
//   u32          format version (1)
//   u64          header length N
//   N bytes      JSON header {"version", "config", "arrays": [{"name", "rows",
//                "cols", "learnable", "offset"}]}  (offset in doubles)
//   payload      float64 arrays, row-major, concatenated in header order
inline constexpr uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const std::string& config_json);
ParamStore load_checkpoint(const std::filesystem::path& path, std::string* config_json = nullptr);

}  // namespace wsisam
