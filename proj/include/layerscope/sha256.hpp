#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace layerscope {

// Incremental SHA-256, hex-encoded digest.
class Sha256 {
  public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const std::byte> bytes);
    Sha256& update(std::string_view text);
    // Appends a length prefix before the text so field boundaries are unambiguous.
    Sha256& update_field(std::string_view text);

    std::string hex_digest();

  private:
    void* ctx_;
};

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

}  // namespace layerscope
