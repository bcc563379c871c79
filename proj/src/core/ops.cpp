#include "layerscope/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "layerscope/errors.hpp"

namespace layerscope {

void rms_norm_into(std::span<const float> x, std::span<const float> weight, double eps,
                   std::span<float> out) {
    if (x.size() != weight.size() || out.size() != x.size()) {
        throw StructuralError("rms_norm: length mismatch (x=" + std::to_string(x.size()) +
                              ", weight=" + std::to_string(weight.size()) + ")");
    }
    if (x.empty()) return;
    double sum_sq = 0.0;
    for (float v : x) sum_sq += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(sum_sq / static_cast<double>(x.size()) + eps);
    if (!std::isfinite(inv)) {
        // Only reachable with eps == 0 and an all-zero input.
        std::fill(out.begin(), out.end(), 0.0f);
        return;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = static_cast<float>(weight[i] * (x[i] * inv));
    }
}

std::vector<float> rms_norm(std::span<const float> x, std::span<const float> weight, double eps) {
    std::vector<float> out(x.size());
    rms_norm_into(x, weight, eps, out);
    return out;
}

void rope_rotate_inplace(std::span<float> x, std::size_t position, double theta) {
    if (x.size() % 2 != 0) {
        throw StructuralError("rope_rotate: d_head must be even, got " + std::to_string(x.size()));
    }
    if (position == 0) return;
    const double d = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size() / 2; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / d);
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = x[2 * i];
        const double b = x[2 * i + 1];
        x[2 * i] = static_cast<float>(a * c - b * s);
        x[2 * i + 1] = static_cast<float>(a * s + b * c);
    }
}

std::vector<float> rope_rotate(std::span<const float> x, std::size_t position, double theta) {
    std::vector<float> out(x.begin(), x.end());
    rope_rotate_inplace(out, position, theta);
    return out;
}

void matvec(const Tensor2D& w, std::span<const float> x, std::span<float> y) {
    if (w.cols() != x.size() || w.rows() != y.size()) {
        throw StructuralError("matvec: " + std::to_string(w.rows()) + "x" +
                              std::to_string(w.cols()) + " times " + std::to_string(x.size()));
    }
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const auto row = w.row(r);
        float acc = 0.0f;
        for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
}

void softmax_inplace(std::span<float> x) {
    if (x.empty()) return;
    const float max = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (float& v : x) {
        v = std::exp(v - max);
        sum += v;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (float& v : x) v *= inv;
}

double log_softmax_at(std::span<const float> logits, std::size_t index) {
    const float max = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v) - max);
    return static_cast<double>(logits[index]) - max - std::log(sum);
}

std::size_t argmax(std::span<const float> x) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i] > x[best]) best = i;
    }
    return best;
}

}  // namespace layerscope
