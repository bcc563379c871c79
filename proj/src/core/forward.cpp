#include "layerscope/forward.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "layerscope/errors.hpp"
#include "layerscope/ops.hpp"

namespace layerscope {

bool LayerView::all_heads_masked() const {
    return !masked_heads.empty() &&
           std::all_of(masked_heads.begin(), masked_heads.end(), [](bool m) { return m; });
}

ModelView ModelView::of(const ModelWeights& weights, const ModelConfig& config) {
    ModelView view;
    view.config = config;
    view.token_embedding = &weights.token_embedding;
    view.final_norm = &weights.final_norm;
    view.lm_head = weights.lm_head ? &*weights.lm_head : &weights.token_embedding;
    view.layers.resize(weights.layers.size());
    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
        for (std::size_t t = 0; t < kLayerTensorCount; ++t) {
            view.layers[l].tensors[t] = &weights.layers[l].tensors[t];
        }
    }
    return view;
}

namespace {

void check_tokens(std::span<const TokenId> tokens, const ModelConfig& c) {
    if (tokens.size() > c.max_seq_len) {
        throw InputError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= c.vocab_size) {
            throw InputError("token id " + std::to_string(tokens[i]) + " at position " +
                             std::to_string(i) + " out of range (vocab_size " +
                             std::to_string(c.vocab_size) + ")");
        }
    }
}

// Attention output of one query head at one position, written into `out`.
// `keys`/`values` hold rows [0, n_visible) with stride kv_dim.
void attend_head(std::span<const float> q, const float* keys, const float* values,
                 std::size_t n_visible, std::size_t kv_dim, std::size_t kv_offset,
                 std::size_t d_head, std::vector<float>& scores, std::span<float> out) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_head));
    scores.resize(n_visible);
    for (std::size_t j = 0; j < n_visible; ++j) {
        const float* k = keys + j * kv_dim + kv_offset;
        float dot = 0.0f;
        for (std::size_t d = 0; d < d_head; ++d) dot += q[d] * k[d];
        scores[j] = dot * scale;
    }
    softmax_inplace(scores);
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t j = 0; j < n_visible; ++j) {
        const float* v = values + j * kv_dim + kv_offset;
        const float p = scores[j];
        for (std::size_t d = 0; d < d_head; ++d) out[d] += p * v[d];
    }
}

void check_finite(std::span<const float> values, const char* what) {
    for (float v : values) {
        if (!std::isfinite(v)) throw StructuralError(std::string("non-finite value in ") + what);
    }
}

// Gated MLP contribution for one normed row.
void mlp_row(const LayerView& layer, std::span<const float> normed, std::vector<float>& gate,
             std::vector<float>& up, std::span<float> out) {
    matvec(layer[LayerTensor::WGate], normed, gate);
    matvec(layer[LayerTensor::WUp], normed, up);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = silu(gate[i]) * up[i];
    matvec(layer[LayerTensor::WDown], gate, out);
}

}  // namespace

Tensor2D attention_forward(const Tensor2D& normed, const LayerView& layer,
                           const ModelConfig& c) {
    const std::size_t seq = normed.rows();
    if (normed.cols() != c.d_model) {
        throw StructuralError("attention_forward: hidden width " + std::to_string(normed.cols()) +
                              " != d_model " + std::to_string(c.d_model));
    }
    if (!layer.masked_heads.empty() && layer.masked_heads.size() != c.n_heads) {
        throw StructuralError("attention_forward: head mask has wrong length");
    }
    Tensor2D result(seq, c.d_model);
    if (layer.all_heads_masked()) return result;

    const std::size_t q_dim = c.q_dim();
    const std::size_t kv_dim = c.kv_dim();
    Tensor2D q(seq, q_dim);
    Tensor2D k(seq, kv_dim);
    Tensor2D v(seq, kv_dim);
    for (std::size_t pos = 0; pos < seq; ++pos) {
        matvec(layer[LayerTensor::Wq], normed.row(pos), q.row(pos));
        matvec(layer[LayerTensor::Wk], normed.row(pos), k.row(pos));
        matvec(layer[LayerTensor::Wv], normed.row(pos), v.row(pos));
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            rope_rotate_inplace(q.row(pos).subspan(h * c.d_head, c.d_head), pos, c.rope_theta);
        }
        for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
            rope_rotate_inplace(k.row(pos).subspan(h * c.d_head, c.d_head), pos, c.rope_theta);
        }
    }

    const std::size_t group = c.group_size();
    Tensor2D heads(seq, q_dim);
    std::vector<float> scores;
    for (std::size_t pos = 0; pos < seq; ++pos) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            if (layer.head_masked(h)) continue;  // stays zero
            const std::size_t kv_offset = (h / group) * c.d_head;
            attend_head(q.row(pos).subspan(h * c.d_head, c.d_head), k.values().data(),
                        v.values().data(), pos + 1, kv_dim, kv_offset, c.d_head, scores,
                        heads.row(pos).subspan(h * c.d_head, c.d_head));
        }
        matvec(layer[LayerTensor::Wo], heads.row(pos), result.row(pos));
    }
    return result;
}

Tensor2D forward(std::span<const TokenId> tokens, const ModelView& model) {
    const ModelConfig& c = model.config;
    check_tokens(tokens, c);
    if (model.layers.size() != c.n_layers) {
        throw StructuralError("model view has " + std::to_string(model.layers.size()) +
                              " layers, config says " + std::to_string(c.n_layers));
    }
    const std::size_t seq = tokens.size();
    const std::size_t d = c.d_model;

    Tensor2D hidden(seq, d);
    for (std::size_t pos = 0; pos < seq; ++pos) {
        const auto emb = model.token_embedding->row(tokens[pos]);
        std::copy(emb.begin(), emb.end(), hidden.row(pos).begin());
    }

    Tensor2D normed(seq, d);
    std::vector<float> gate(c.d_ff);
    std::vector<float> up(c.d_ff);
    std::vector<float> down(d);
    for (const LayerView& layer : model.layers) {
        if (!layer.skip_attn && !layer.all_heads_masked()) {
            for (std::size_t pos = 0; pos < seq; ++pos) {
                rms_norm_into(hidden.row(pos), layer[LayerTensor::AttnNorm].row(0), c.norm_eps,
                              normed.row(pos));
            }
            const Tensor2D attn = attention_forward(normed, layer, c);
            for (std::size_t pos = 0; pos < seq; ++pos) {
                auto h = hidden.row(pos);
                const auto a = attn.row(pos);
                for (std::size_t i = 0; i < d; ++i) h[i] += a[i];
            }
        }
        if (!layer.skip_mlp) {
            for (std::size_t pos = 0; pos < seq; ++pos) {
                rms_norm_into(hidden.row(pos), layer[LayerTensor::MlpNorm].row(0), c.norm_eps,
                              normed.row(pos));
                mlp_row(layer, normed.row(pos), gate, up, down);
                auto h = hidden.row(pos);
                for (std::size_t i = 0; i < d; ++i) h[i] += down[i];
            }
        }
    }

    Tensor2D logits(seq, c.vocab_size);
    std::vector<float> final_normed(d);
    for (std::size_t pos = 0; pos < seq; ++pos) {
        rms_norm_into(hidden.row(pos), model.final_norm->row(0), c.norm_eps, final_normed);
        matvec(*model.lm_head, final_normed, logits.row(pos));
    }
    check_finite(logits.values(), "logits");
    return logits;
}

Tensor2D forward(std::span<const TokenId> tokens, const ModelWeights& weights,
                 const ModelConfig& config) {
    return forward(tokens, ModelView::of(weights, config));
}

DecodeSession::DecodeSession(const ModelView& model)
    : model_(model),
      keys_(model.layers.size()),
      values_(model.layers.size()),
      logits_(model.config.vocab_size) {}

std::span<const float> DecodeSession::prefill(std::span<const TokenId> tokens) {
    if (tokens.empty()) throw InputError("prefill: empty token sequence");
    for (TokenId t : tokens) step(t);
    return logits_;
}

std::span<const float> DecodeSession::step(TokenId token) {
    const ModelConfig& c = model_.config;
    if (position_ >= c.max_seq_len) {
        throw InputError("decode position " + std::to_string(position_) +
                         " reaches max_seq_len " + std::to_string(c.max_seq_len));
    }
    if (token >= c.vocab_size) {
        throw InputError("token id " + std::to_string(token) + " out of range");
    }
    const std::size_t d = c.d_model;
    const std::size_t kv_dim = c.kv_dim();
    const std::size_t pos = position_;

    const auto emb = model_.token_embedding->row(token);
    std::vector<float> hidden(emb.begin(), emb.end());
    std::vector<float> normed(d);
    std::vector<float> q(c.q_dim());
    std::vector<float> heads(c.q_dim());
    std::vector<float> attn(d);
    std::vector<float> gate(c.d_ff);
    std::vector<float> up(c.d_ff);
    std::vector<float> down(d);
    std::vector<float> scores;

    for (std::size_t l = 0; l < model_.layers.size(); ++l) {
        const LayerView& layer = model_.layers[l];
        auto& keys = keys_[l];
        auto& values = values_[l];
        if (!layer.skip_attn && !layer.all_heads_masked()) {
            rms_norm_into(hidden, layer[LayerTensor::AttnNorm].row(0), c.norm_eps, normed);
            keys.resize((pos + 1) * kv_dim);
            values.resize((pos + 1) * kv_dim);
            std::span<float> k_row(keys.data() + pos * kv_dim, kv_dim);
            std::span<float> v_row(values.data() + pos * kv_dim, kv_dim);
            matvec(layer[LayerTensor::Wq], normed, q);
            matvec(layer[LayerTensor::Wk], normed, k_row);
            matvec(layer[LayerTensor::Wv], normed, v_row);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                rope_rotate_inplace(std::span(q).subspan(h * c.d_head, c.d_head), pos,
                                    c.rope_theta);
            }
            for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
                rope_rotate_inplace(k_row.subspan(h * c.d_head, c.d_head), pos, c.rope_theta);
            }
            std::fill(heads.begin(), heads.end(), 0.0f);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                if (layer.head_masked(h)) continue;
                const std::size_t kv_offset = (h / c.group_size()) * c.d_head;
                attend_head(std::span<const float>(q).subspan(h * c.d_head, c.d_head),
                            keys.data(), values.data(), pos + 1, kv_dim, kv_offset, c.d_head,
                            scores, std::span(heads).subspan(h * c.d_head, c.d_head));
            }
            matvec(layer[LayerTensor::Wo], heads, attn);
            for (std::size_t i = 0; i < d; ++i) hidden[i] += attn[i];
        }
        if (!layer.skip_mlp) {
            rms_norm_into(hidden, layer[LayerTensor::MlpNorm].row(0), c.norm_eps, normed);
            mlp_row(layer, normed, gate, up, down);
            for (std::size_t i = 0; i < d; ++i) hidden[i] += down[i];
        }
    }

    rms_norm_into(hidden, model_.final_norm->row(0), c.norm_eps, normed);
    matvec(*model_.lm_head, normed, logits_);
    check_finite(logits_, "logits");
    ++position_;
    return logits_;
}

}  // namespace layerscope
