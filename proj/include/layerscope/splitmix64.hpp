#pragma once

#include <cstdint>

namespace layerscope {

// SplitMix64 (Steele, Lea & Flood). Every seeded artifact in the toolkit
// (KV-retrieval tasks, few-shot selection, random demo models) draws from
// this generator so outputs are reproducible in any language.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // next() mod n. The modulo bias is part of the documented algorithm.
    std::uint64_t below(std::uint64_t n) { return next() % n; }

    // Uniform in [-1, 1): top 24 bits mapped onto a float grid.
    float symmetric_unit() {
        const auto bits = static_cast<std::uint32_t>(next() >> 40);
        return static_cast<float>(bits) / 8388608.0f - 1.0f;
    }

  private:
    std::uint64_t state_;
};

}  // namespace layerscope
