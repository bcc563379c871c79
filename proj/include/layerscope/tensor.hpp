#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layerscope {

// Dense row-major f32 matrix. Vectors (norm weights) are stored as 1 x n.
class Tensor2D {
  public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols);
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Tensor2D vector(std::vector<float> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    bool all_finite() const;

    friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

struct ModelConfig {
    std::size_t d_model = 0;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t d_head = 0;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;
    std::size_t max_seq_len = 0;
    bool tied_lm_head = false;

    std::size_t group_size() const { return n_heads / n_kv_heads; }
    std::size_t q_dim() const { return n_heads * d_head; }
    std::size_t kv_dim() const { return n_kv_heads * d_head; }

    // Throws ConfigError naming the first violated invariant.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The nine per-layer tensors, in file order.
enum class LayerTensor : std::uint8_t {
    AttnNorm,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpNorm,
    WGate,
    WUp,
    WDown,
};

inline constexpr std::size_t kLayerTensorCount = 9;

inline constexpr std::array<LayerTensor, kLayerTensorCount> kAllLayerTensors = {
    LayerTensor::AttnNorm, LayerTensor::Wq,      LayerTensor::Wk,
    LayerTensor::Wv,       LayerTensor::Wo,      LayerTensor::MlpNorm,
    LayerTensor::WGate,    LayerTensor::WUp,     LayerTensor::WDown,
};

// Per-layer name suffix, e.g. "attn.wo".
std::string_view layer_tensor_name(LayerTensor t);
std::optional<LayerTensor> parse_layer_tensor(std::string_view name);

struct TensorShape {
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool is_vector = false;  // stored on disk as 1-D of length cols

    friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

TensorShape layer_tensor_shape(const ModelConfig& config, LayerTensor t);

struct LayerWeights {
    std::array<Tensor2D, kLayerTensorCount> tensors;

    Tensor2D& operator[](LayerTensor t) { return tensors[static_cast<std::size_t>(t)]; }
    const Tensor2D& operator[](LayerTensor t) const {
        return tensors[static_cast<std::size_t>(t)];
    }

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
    Tensor2D token_embedding;  // V x d_model
    std::vector<LayerWeights> layers;
    Tensor2D final_norm;              // 1 x d_model
    std::optional<Tensor2D> lm_head;  // V x d_model, absent when tied

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

// Checks every tensor against the shapes dictated by config. Throws
// StructuralError naming the offending tensor.
void check_shapes(const ModelWeights& weights, const ModelConfig& config);

}  // namespace layerscope
