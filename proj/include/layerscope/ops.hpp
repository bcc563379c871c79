#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "layerscope/tensor.hpp"

namespace layerscope {

// out[i] = weight[i] * x[i] / sqrt(mean(x^2) + eps)
std::vector<float> rms_norm(std::span<const float> x, std::span<const float> weight, double eps);
void rms_norm_into(std::span<const float> x, std::span<const float> weight, double eps,
                   std::span<float> out);

// Rotates consecutive pairs (x[2i], x[2i+1]) by position * theta^(-2i/d).
std::vector<float> rope_rotate(std::span<const float> x, std::size_t position, double theta);
void rope_rotate_inplace(std::span<float> x, std::size_t position, double theta);

// y = W x, W is (out x in).
void matvec(const Tensor2D& w, std::span<const float> x, std::span<float> y);

// Numerically stable softmax (row max subtracted first).
void softmax_inplace(std::span<float> x);

// log softmax of a single entry, accumulated in double.
double log_softmax_at(std::span<const float> logits, std::size_t index);

// Index of the largest value; ties resolve to the lowest index.
std::size_t argmax(std::span<const float> x);

inline float silu(float v) { return v / (1.0f + std::exp(-v)); }

}  // namespace layerscope
