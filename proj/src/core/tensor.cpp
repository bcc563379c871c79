#include "layerscope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "layerscope/errors.hpp"

namespace layerscope {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw StructuralError("tensor data length " + std::to_string(data_.size()) +
                              " does not match " + std::to_string(rows_) + "x" +
                              std::to_string(cols_));
    }
}

Tensor2D Tensor2D::vector(std::vector<float> data) {
    const std::size_t n = data.size();
    return Tensor2D(1, n, std::move(data));
}

bool Tensor2D::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
    if (d_model == 0) fail("d_model must be >= 1");
    if (n_layers == 0) fail("n_layers must be >= 1");
    if (n_heads == 0) fail("n_heads must be >= 1");
    if (n_kv_heads == 0) fail("n_kv_heads must be >= 1");
    if (d_head == 0) fail("d_head must be >= 1");
    if (d_ff == 0) fail("d_ff must be >= 1");
    if (vocab_size == 0) fail("vocab_size must be >= 1");
    if (max_seq_len == 0) fail("max_seq_len must be >= 1");
    if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) fail("rope_theta must be positive");
    if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) fail("norm_eps must be positive");
    if (d_model != n_heads * d_head) {
        fail("d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
             std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
    }
    if (n_heads % n_kv_heads != 0) {
        fail("n_heads (" + std::to_string(n_heads) + ") not divisible by n_kv_heads (" +
             std::to_string(n_kv_heads) + ")");
    }
    if (d_head % 2 != 0) fail("d_head must be even for rotary embeddings");
}

std::string_view layer_tensor_name(LayerTensor t) {
    switch (t) {
        case LayerTensor::AttnNorm: return "attn_norm";
        case LayerTensor::Wq: return "attn.wq";
        case LayerTensor::Wk: return "attn.wk";
        case LayerTensor::Wv: return "attn.wv";
        case LayerTensor::Wo: return "attn.wo";
        case LayerTensor::MlpNorm: return "mlp_norm";
        case LayerTensor::WGate: return "mlp.w_gate";
        case LayerTensor::WUp: return "mlp.w_up";
        case LayerTensor::WDown: return "mlp.w_down";
    }
    return "?";
}

std::optional<LayerTensor> parse_layer_tensor(std::string_view name) {
    for (LayerTensor t : kAllLayerTensors) {
        if (layer_tensor_name(t) == name) return t;
    }
    return std::nullopt;
}

TensorShape layer_tensor_shape(const ModelConfig& c, LayerTensor t) {
    switch (t) {
        case LayerTensor::AttnNorm:
        case LayerTensor::MlpNorm: return {1, c.d_model, true};
        case LayerTensor::Wq: return {c.q_dim(), c.d_model, false};
        case LayerTensor::Wk:
        case LayerTensor::Wv: return {c.kv_dim(), c.d_model, false};
        case LayerTensor::Wo: return {c.d_model, c.q_dim(), false};
        case LayerTensor::WGate:
        case LayerTensor::WUp: return {c.d_ff, c.d_model, false};
        case LayerTensor::WDown: return {c.d_model, c.d_ff, false};
    }
    return {};
}

namespace {

void expect_shape(const Tensor2D& t, std::size_t rows, std::size_t cols, const std::string& name) {
    if (t.rows() != rows || t.cols() != cols) {
        throw StructuralError("tensor '" + name + "' has shape " + std::to_string(t.rows()) + "x" +
                              std::to_string(t.cols()) + ", expected " + std::to_string(rows) +
                              "x" + std::to_string(cols));
    }
}

}  // namespace

void check_shapes(const ModelWeights& w, const ModelConfig& c) {
    expect_shape(w.token_embedding, c.vocab_size, c.d_model, "tok_embedding");
    if (w.layers.size() != c.n_layers) {
        throw StructuralError("model has " + std::to_string(w.layers.size()) +
                              " layers, config says " + std::to_string(c.n_layers));
    }
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        for (LayerTensor t : kAllLayerTensors) {
            const TensorShape s = layer_tensor_shape(c, t);
            expect_shape(w.layers[l][t], s.rows, s.cols,
                         "layers." + std::to_string(l) + "." + std::string(layer_tensor_name(t)));
        }
    }
    expect_shape(w.final_norm, 1, c.d_model, "final_norm");
    if (c.tied_lm_head && w.lm_head) {
        throw StructuralError("tensor 'lm_head' present but config has tied_lm_head");
    }
    if (!c.tied_lm_head) {
        if (!w.lm_head) throw StructuralError("tensor 'lm_head' missing");
        expect_shape(*w.lm_head, c.vocab_size, c.d_model, "lm_head");
    }
}

}  // namespace layerscope
