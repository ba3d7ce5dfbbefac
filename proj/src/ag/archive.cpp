#include "ragcap/ag/archive.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ragcap::ag {

namespace {

constexpr char kMagic[8] = {'R', 'C', 'T', 'A', 'R', 'C', 'H', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  std::memcpy(&v, in.data() + pos, 8);
  return v;
}

}  // namespace

std::string serialize_params(const ParamList<float>& params) {
  nlohmann::json index = nlohmann::json::array();
  std::string blob;
  for (const auto& p : params) {
    const std::size_t nbytes = p.var.numel() * sizeof(float);
    index.push_back({{"name", p.name},
                     {"shape", p.var.shape()},
                     {"dtype", "f32"},
                     {"offset", blob.size()},
                     {"nbytes", nbytes}});
    blob.append(reinterpret_cast<const char*>(p.var.data()), nbytes);
  }
  const std::string idx = index.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, idx.size());
  out += idx;
  out += blob;
  return out;
}

void deserialize_params(const std::string& bytes, const ParamList<float>& params) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a tensor archive (bad magic)");
  }
  const std::uint64_t idx_len = get_u64(bytes, 8);
  if (16 + idx_len > bytes.size()) throw std::runtime_error("truncated tensor archive index");
  const auto index = nlohmann::json::parse(bytes.substr(16, idx_len));
  const std::size_t blob_start = 16 + idx_len;

  std::map<std::string, nlohmann::json> by_name;
  for (const auto& e : index) by_name[e.at("name").get<std::string>()] = e;

  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("archive is missing tensor '" + p.name + "'");
    const auto& e = it->second;
    if (e.at("dtype") != "f32") throw std::runtime_error("unsupported dtype for '" + p.name + "'");
    if (e.at("shape").get<Shape>() != p.var.shape()) {
      throw std::runtime_error("shape mismatch for '" + p.name + "': archive " +
                               shape_str(e.at("shape").get<Shape>()) + " vs model " +
                               shape_str(p.var.shape()));
    }
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
    if (nbytes != p.var.numel() * sizeof(float) || blob_start + offset + nbytes > bytes.size()) {
      throw std::runtime_error("corrupt extent for '" + p.name + "'");
    }
    auto var = p.var;
    std::memcpy(var.data(), bytes.data() + blob_start + offset, nbytes);
  }
}

void save_params(const std::filesystem::path& path, const ParamList<float>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = serialize_params(params);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void load_params(const std::filesystem::path& path, const ParamList<float>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  deserialize_params(ss.str(), params);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string params_hash(const ParamList<float>& params) { return sha256_hex(serialize_params(params)); }

}  // namespace ragcap::ag
