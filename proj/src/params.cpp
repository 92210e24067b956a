#include "wsisam/params.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace wsisam {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void ParamStore::add(const std::string& name, Mat value, bool learnable) {
  if (entries_.count(name)) throw InvalidArgument("ParamStore: duplicate parameter '" + name + "'");
  entries_.emplace(name, Entry{std::move(value), learnable});
}

const Mat& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgument("ParamStore: no parameter '" + name + "'");
  return it->second.value;
}

Mat& ParamStore::get_mut(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgument("ParamStore: no parameter '" + name + "'");
  return it->second.value;
}

bool ParamStore::learnable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgument("ParamStore: no parameter '" + name + "'");
  return it->second.learnable;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& [_, e] : entries_) n += static_cast<size_t>(e.value.size());
  return n;
}

ParamPartition ParamStore::partition() const {
  ParamPartition p;
  for (const auto& [k, e] : entries_) (e.learnable ? p.learnable : p.frozen).push_back(k);
  return p;
}

uint64_t ParamStore::hash(const std::vector<std::string>& names) const {
  uint64_t h = fnv1a(std::string("wsisam-params"));
  for (const auto& n : names) {
    const Mat& m = get(n);
    h = fnv1a(n, h);
    const int64_t shape[2] = {m.rows(), m.cols()};
    h = fnv1a(shape, sizeof(shape), h);
    h = fnv1a(m.data(), static_cast<size_t>(m.size()) * sizeof(double), h);
  }
  return h;
}

bool ParamStore::operator==(const ParamStore& o) const {
  if (entries_.size() != o.entries_.size()) return false;
  for (auto a = entries_.begin(), b = o.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.learnable != b->second.learnable) return false;
    const Mat& x = a->second.value;
    const Mat& y = b->second.value;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), static_cast<size_t>(x.size()) * sizeof(double)) != 0) return false;
  }
  return true;
}

ad::Var ParamBinding::operator()(const std::string& name) {
  auto it = vars_.find(name);
  if (it != vars_.end()) return it->second;
  const Mat& v = store_.get(name);
  ad::Var var = (track_grad_ && store_.learnable(name)) ? tape_.variable(v) : tape_.constant(v);
  vars_.emplace(name, var);
  return var;
}

Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void init_linear(ParamStore& s, const std::string& prefix, int in, int out, bool learnable, std::mt19937_64& rng,
                 double gain) {
  s.add(prefix + ".w", normal_matrix(in, out, gain / std::sqrt(static_cast<double>(in)), rng), learnable);
  s.add(prefix + ".b", Mat::Zero(1, out), learnable);
}

void init_layer_norm(ParamStore& s, const std::string& prefix, int dim, bool learnable) {
  s.add(prefix + ".g", Mat::Ones(1, dim), learnable);
  s.add(prefix + ".b", Mat::Zero(1, dim), learnable);
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const std::string& config_json) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = config_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(config_json);
  header["arrays"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& name : store.names()) {
    const Mat& m = store.get(name);
    header["arrays"].push_back({{"name", name},
                                {"rows", m.rows()},
                                {"cols", m.cols()},
                                {"learnable", store.learnable(name)},
                                {"offset", offset}});
    offset += static_cast<uint64_t>(m.size());
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("save_checkpoint: cannot write '" + path.string() + "'");
  out.write("WSISAMCK", 8);
  const uint32_t version = kCheckpointVersion;
  const uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& name : store.names()) {
    const Mat& m = store.get(name);
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw InvalidArgument("save_checkpoint: write failed for '" + path.string() + "'");
}

ParamStore load_checkpoint(const std::filesystem::path& path, std::string* config_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("load_checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "WSISAMCK", 8) != 0) throw InvalidArgument("load_checkpoint: bad magic");
  uint32_t version = 0;
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || version != kCheckpointVersion) throw InvalidArgument("load_checkpoint: unsupported version");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  auto header = nlohmann::json::parse(text);
  if (config_json) *config_json = header["config"].dump();
  const auto payload_start = in.tellg();
  ParamStore store;
  for (const auto& a : header.at("arrays")) {
    Mat m(a.at("rows").get<Eigen::Index>(), a.at("cols").get<Eigen::Index>());
    in.seekg(payload_start + static_cast<std::streamoff>(a.at("offset").get<uint64_t>() * sizeof(double)));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw InvalidArgument("load_checkpoint: truncated payload for '" + a.at("name").get<std::string>() + "'");
    store.add(a.at("name").get<std::string>(), std::move(m), a.at("learnable").get<bool>());
  }
  return store;
}

}  // namespace wsisam
