#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "layerscope/forward.hpp"

namespace layerscope {

// Greedy longest-match vocabulary with an optional block of 256 byte-fallback
// tokens [byte_fallback_base, byte_fallback_base + 256).
class Vocab {
  public:
    Vocab() = default;

    // Throws LoadError if ids collide, fall outside vocab_size, or an entry is
    // empty or not valid UTF-8.
    Vocab(std::map<std::string, TokenId> entries, std::optional<TokenId> byte_fallback_base,
          std::size_t vocab_size);

    // 256 byte tokens at `base` and nothing else.
    static Vocab bytes_only(std::size_t vocab_size, TokenId base = 0);

    // Left-to-right greedy longest match. A character no entry covers is
    // emitted as its UTF-8 bytes through the fallback block; without one,
    // that is an InputError.
    std::vector<TokenId> encode(std::string_view text) const;

    // Concatenates entry strings; byte-fallback runs are reassembled as
    // UTF-8 with invalid sequences rendered as U+FFFD. Unknown ids throw
    // DecodeError.
    std::string decode(std::span<const TokenId> ids) const;

    const std::map<std::string, TokenId, std::less<>>& entries() const { return entries_; }
    std::optional<TokenId> byte_fallback_base() const { return byte_base_; }
    std::size_t vocab_size() const { return vocab_size_; }

    bool is_byte_token(TokenId id) const {
        return byte_base_ && id >= *byte_base_ && id < *byte_base_ + 256;
    }

  private:
    std::map<std::string, TokenId, std::less<>> entries_;
    std::unordered_map<TokenId, std::string> by_id_;
    std::optional<TokenId> byte_base_;
    std::size_t vocab_size_ = 0;
    std::size_t max_entry_len_ = 0;
};

// Replaces every invalid UTF-8 sequence with U+FFFD.
std::string sanitize_utf8(std::string_view bytes);

// Byte length of the well-formed UTF-8 sequence starting at `text[i]`, or 0.
std::size_t utf8_sequence_length(std::string_view text, std::size_t i);

}  // namespace layerscope
