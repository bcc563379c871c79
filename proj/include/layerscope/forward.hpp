#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "layerscope/tensor.hpp"

namespace layerscope {

using TokenId = std::uint32_t;

// Read-only view of one transformer block as the forward pass sees it.
// Tensor pointers may alias a target model or a donor; the flags carry
// prune and head-mask interventions.
struct LayerView {
    std::array<const Tensor2D*, kLayerTensorCount> tensors{};
    bool skip_attn = false;
    bool skip_mlp = false;
    std::vector<bool> masked_heads;  // empty, or one flag per query head

    const Tensor2D& operator[](LayerTensor t) const {
        return *tensors[static_cast<std::size_t>(t)];
    }
    bool head_masked(std::size_t h) const { return !masked_heads.empty() && masked_heads[h]; }
    bool all_heads_masked() const;
};

// Non-owning view over a model. Whatever owns the underlying tensors must
// outlive it.
struct ModelView {
    ModelConfig config;
    const Tensor2D* token_embedding = nullptr;
    const Tensor2D* final_norm = nullptr;
    const Tensor2D* lm_head = nullptr;  // points at token_embedding when tied
    std::vector<LayerView> layers;

    // Plain view with no interventions.
    static ModelView of(const ModelWeights& weights, const ModelConfig& config);
};

// One attention sublayer over a whole sequence (rows = positions, starting at
// position 0). `normed` is the hidden state after attn_norm. Masked heads are
// zeroed before the Wo projection. Returns seq x d_model, the contribution
// added to the residual stream.
Tensor2D attention_forward(const Tensor2D& normed, const LayerView& layer,
                           const ModelConfig& config);

// Full forward pass; returns seq x V logits.
Tensor2D forward(std::span<const TokenId> tokens, const ModelView& model);

// Convenience: forward over unmodified weights.
Tensor2D forward(std::span<const TokenId> tokens, const ModelWeights& weights,
                 const ModelConfig& config);

// Incremental decoding with a per-session KV cache. Each step consumes one
// token and returns the logits for the next position.
class DecodeSession {
  public:
    explicit DecodeSession(const ModelView& model);

    std::span<const float> step(TokenId token);

    // Feeds every token; returns logits after the last one.
    std::span<const float> prefill(std::span<const TokenId> tokens);

    std::size_t position() const { return position_; }

  private:
    const ModelView& model_;
    std::size_t position_ = 0;
    // Per layer: [position][kv_dim] keys and values.
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
    std::vector<float> logits_;
};

}  // namespace layerscope
