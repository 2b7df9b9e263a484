#pragma once

// Content hashes and the per-run manifest that records how every artifact in
// a run directory was produced.

#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "macrec/error.hpp"

namespace macrec {

class Sha1 {
 public:
  Sha1() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha1(), nullptr) != 1) throw Error("SHA-1 initialisation failed");
  }

  Sha1& update(std::string_view bytes) {
    if (EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()) != 1) throw Error("SHA-1 update failed");
    return *this;
  }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw Error("SHA-1 finalisation failed");
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kDigits[md[i] >> 4];
      out += kDigits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha1_hex(std::string_view bytes) { return Sha1().update(bytes).hex(); }

// Same digest as `git hash-object`: SHA-1 over "blob <size>\0" + content.
inline std::string git_blob_hash(std::string_view content) {
  return Sha1().update("blob " + std::to_string(content.size())).update(std::string_view("\0", 1)).update(content).hex();
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::string git_blob_hash_file(const std::string& path) { return git_blob_hash(read_file(path)); }

// manifest.json: {"stages": {"<stage>": {...}}}. Each stage entry is replaced
// when the stage reruns; entries of other stages are kept.
class Manifest {
 public:
  explicit Manifest(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
      try {
        doc_ = nlohmann::ordered_json::parse(read_file(path_.string()));
      } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt manifest '" + path_.string() + "': " + e.what());
      }
    }
    if (!doc_.is_object() || !doc_.contains("stages")) doc_ = {{"stages", nlohmann::ordered_json::object()}};
  }

  void record(const std::string& stage, nlohmann::ordered_json entry) {
    doc_["stages"][stage] = std::move(entry);
    std::ofstream os(path_);
    if (!os) throw DataError("cannot write '" + path_.string() + "'");
    os << doc_.dump(2) << '\n';
  }

  const nlohmann::ordered_json& json() const noexcept { return doc_; }

 private:
  std::filesystem::path path_;
  nlohmann::ordered_json doc_;
};

}  // namespace macrec
