#include "star/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>

namespace star {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'A', 'R', 'C', 'K', 'P', '1'};

std::array<unsigned char, 32> sha256(const void* data, std::size_t len) {
  std::array<unsigned char, 32> digest{};
  unsigned int out_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 || EVP_DigestFinal_ex(ctx, digest.data(), &out_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw ArtifactError("sha256: digest computation failed");
  }
  EVP_MD_CTX_free(ctx);
  return digest;
}

void append_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t len) {
  auto digest = sha256(data, len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (unsigned char b : digest) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0xf]);
  }
  return out;
}

const Tensor<float>& Checkpoint::require(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ArtifactError("checkpoint: missing tensor " + name);
}

void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  nlohmann::json dir = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (dir.contains(name)) throw ArtifactError("save_checkpoint: duplicate tensor name " + name);
    dir[name] = {{"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}};
    offset += t.size() * sizeof(float);
  }
  nlohmann::json manifest = {{"meta", meta}, {"tensors", dir}};
  const std::string mjson = manifest.dump();

  std::string buf;
  buf.reserve(8 + 8 + mjson.size() + offset + 32);
  buf.append(kMagic, 8);
  append_u64(buf, mjson.size());
  buf.append(mjson);
  for (const auto& [name, t] : tensors) {
    static_assert(sizeof(float) == 4);
    buf.append(reinterpret_cast<const char*>(t.values().data()), t.size() * sizeof(float));
  }
  auto digest = sha256(buf.data(), buf.size());
  buf.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("save_checkpoint: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw ArtifactError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("load_checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (bytes.size() < 8 + 8 + 32) throw ArtifactError("load_checkpoint: truncated file " + path);
  if (std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw ArtifactError("load_checkpoint: bad magic in " + path);

  const std::size_t body_len = bytes.size() - 32;
  auto digest = sha256(bytes.data(), body_len);
  if (std::memcmp(digest.data(), bytes.data() + body_len, 32) != 0)
    throw ArtifactError("load_checkpoint: checksum mismatch in " + path);

  const std::uint64_t mlen = read_u64(bytes.data() + 8);
  if (16 + mlen > body_len) throw ArtifactError("load_checkpoint: corrupt manifest length in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("load_checkpoint: manifest parse error in " + path + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.meta = manifest.at("meta");
  const std::size_t payload_start = 16 + mlen;
  const std::size_t payload_len = body_len - payload_start;
  for (const auto& [name, entry] : manifest.at("tensors").items()) {
    if (entry.at("dtype").get<std::string>() != "f32")
      throw ArtifactError("load_checkpoint: unsupported dtype for " + name);
    Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::size_t count = shape_numel(shape);
    if (off + count * sizeof(float) > payload_len)
      throw ArtifactError("load_checkpoint: tensor " + name + " exceeds payload in " + path);
    std::vector<float> vals(count);
    std::memcpy(vals.data(), bytes.data() + payload_start + off, count * sizeof(float));
    ckpt.tensors.emplace_back(name, Tensor<float>::from(std::move(shape), std::move(vals)));
  }
  return ckpt;
}

}  // namespace star
