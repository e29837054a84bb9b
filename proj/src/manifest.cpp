#include "eduloop/manifest.hpp"

#include <fstream>
#include <memory>

#include <openssl/evp.h>

#include "eduloop/common.hpp"

namespace eduloop {
namespace {

struct DigestCtx {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  ~DigestCtx() { EVP_MD_CTX_free(ctx); }
};

std::string hex(const unsigned char* data, unsigned int n) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (unsigned int i = 0; i < n; ++i) {
    out += digits[data[i] >> 4];
    out += digits[data[i] & 0xF];
  }
  return out;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  DigestCtx d;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  if (!d.ctx || EVP_DigestInit_ex(d.ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(d.ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(d.ctx, md, &n) != 1) {
    throw Error(ErrorKind::data, "sha256 failed");
  }
  return hex(md, n);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::data, "cannot read " + path.string());
  DigestCtx d;
  if (!d.ctx || EVP_DigestInit_ex(d.ctx, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::data, "sha256 failed");
  }
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(d.ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  EVP_DigestFinal_ex(d.ctx, md, &n);
  return hex(md, n);
}

nlohmann::json RunManifest::to_json() const {
  auto files = [](const std::vector<std::filesystem::path>& paths) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : paths) {
      if (!std::filesystem::is_regular_file(p)) continue;
      out.push_back({{"path", p.filename().string()},
                     {"bytes", std::filesystem::file_size(p)},
                     {"sha256", sha256_file(p)}});
    }
    return out;
  };
  return {{"command", command},
          {"config", config},
          {"inputs", files(inputs)},
          {"outputs", files(outputs)}};
}

void RunManifest::write(const std::filesystem::path& path) const {
  write_file_atomic(path, to_json().dump(2) + "\n");
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::data, "cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(ErrorKind::data, "cannot write " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace eduloop
