#include "layerscope/tokenizer.hpp"

#include <algorithm>
#include <string>

#include "layerscope/errors.hpp"

namespace layerscope {

std::size_t utf8_sequence_length(std::string_view text, std::size_t i) {
    const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
    const unsigned char lead = byte(i);
    std::size_t len = 0;
    unsigned char lo = 0x80;
    unsigned char hi = 0xBF;
    if (lead < 0x80) return 1;
    if (lead >= 0xC2 && lead <= 0xDF) {
        len = 2;
    } else if (lead >= 0xE0 && lead <= 0xEF) {
        len = 3;
        if (lead == 0xE0) lo = 0xA0;  // overlong
        if (lead == 0xED) hi = 0x9F;  // surrogates
    } else if (lead >= 0xF0 && lead <= 0xF4) {
        len = 4;
        if (lead == 0xF0) lo = 0x90;
        if (lead == 0xF4) hi = 0x8F;
    } else {
        return 0;
    }
    if (i + len > text.size()) return 0;
    const unsigned char second = byte(i + 1);
    if (second < lo || second > hi) return 0;
    for (std::size_t k = 2; k < len; ++k) {
        const unsigned char b = byte(i + k);
        if (b < 0x80 || b > 0xBF) return 0;
    }
    return len;
}

std::string sanitize_utf8(std::string_view bytes) {
    static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
    std::string out;
    out.reserve(bytes.size());
    std::size_t i = 0;
    while (i < bytes.size()) {
        const std::size_t len = utf8_sequence_length(bytes, i);
        if (len == 0) {
            out.append(kReplacement);
            ++i;
        } else {
            out.append(bytes.substr(i, len));
            i += len;
        }
    }
    return out;
}

Vocab::Vocab(std::map<std::string, TokenId> entries, std::optional<TokenId> byte_fallback_base,
             std::size_t vocab_size)
    : entries_(entries.begin(), entries.end()),
      byte_base_(byte_fallback_base),
      vocab_size_(vocab_size) {
    if (byte_base_ && static_cast<std::size_t>(*byte_base_) + 256 > vocab_size_) {
        throw LoadError("vocab: byte fallback block [" + std::to_string(*byte_base_) + ", " +
                        std::to_string(*byte_base_ + 256) + ") exceeds vocab_size " +
                        std::to_string(vocab_size_));
    }
    for (const auto& [text, id] : entries_) {
        if (text.empty()) throw LoadError("vocab: empty entry string for id " + std::to_string(id));
        if (sanitize_utf8(text) != text) {
            throw LoadError("vocab: entry for id " + std::to_string(id) + " is not valid UTF-8");
        }
        if (id >= vocab_size_) {
            throw LoadError("vocab: entry '" + text + "' has id " + std::to_string(id) +
                            " >= vocab_size " + std::to_string(vocab_size_));
        }
        if (is_byte_token(id)) {
            throw LoadError("vocab: entry '" + text + "' id " + std::to_string(id) +
                            " collides with the byte fallback block");
        }
        if (!by_id_.emplace(id, text).second) {
            throw LoadError("vocab: duplicate id " + std::to_string(id) + " (entry '" + text +
                            "')");
        }
        max_entry_len_ = std::max(max_entry_len_, text.size());
    }
}

Vocab Vocab::bytes_only(std::size_t vocab_size, TokenId base) { return Vocab({}, base, vocab_size); }

std::vector<TokenId> Vocab::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t longest = std::min(max_entry_len_, text.size() - i);
        bool matched = false;
        for (std::size_t len = longest; len >= 1; --len) {
            const auto it = entries_.find(text.substr(i, len));
            if (it != entries_.end()) {
                ids.push_back(it->second);
                i += len;
                matched = true;
                break;
            }
        }
        if (matched) continue;
        if (!byte_base_) {
            throw InputError("encode: no vocab entry covers the character at byte offset " +
                             std::to_string(i) + " and the vocab has no byte fallback");
        }
        // Whole character through the fallback block; a stray invalid byte
        // goes alone.
        const std::size_t char_len = std::max<std::size_t>(1, utf8_sequence_length(text, i));
        for (std::size_t k = 0; k < char_len; ++k) {
            ids.push_back(*byte_base_ + static_cast<unsigned char>(text[i + k]));
        }
        i += char_len;
    }
    return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
    std::string out;
    std::string pending;
    for (TokenId id : ids) {
        if (is_byte_token(id)) {
            pending.push_back(static_cast<char>(id - *byte_base_));
            continue;
        }
        const auto it = by_id_.find(id);
        if (it == by_id_.end()) throw DecodeError("decode: unknown token id " + std::to_string(id));
        if (!pending.empty()) {
            out += sanitize_utf8(pending);
            pending.clear();
        }
        out += it->second;
    }
    if (!pending.empty()) out += sanitize_utf8(pending);
    return out;
}

}  // namespace layerscope
