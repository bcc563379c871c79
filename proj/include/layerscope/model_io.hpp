#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "layerscope/tensor.hpp"
#include "layerscope/tokenizer.hpp"

namespace layerscope {

struct ModelBundle {
    ModelConfig config;
    ModelWeights weights;
    Vocab vocab;
    std::string model_id;  // SHA-256 of the exact safetensors bytes
};

using BundlePtr = std::shared_ptr<const ModelBundle>;

// Standard file names inside a bundle directory.
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kWeightsFile = "model.safetensors";
inline constexpr const char* kVocabFile = "vocab.json";

// ---- config ----------------------------------------------------------------

// Exactly the ModelConfig field names; missing or unknown keys are errors.
ModelConfig parse_model_config(const nlohmann::json& j);
nlohmann::ordered_json model_config_to_json(const ModelConfig& config);

// ---- vocab -----------------------------------------------------------------

// Accepts {"byte_fallback_base": id|null, "entries": {text: id}} or the flat
// form {text: id, ..., "byte_fallback_base": id}.
Vocab parse_vocab(const nlohmann::json& j, std::size_t vocab_size);
nlohmann::ordered_json vocab_to_json(const Vocab& vocab);

// ---- safetensors -----------------------------------------------------------

struct RawTensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

// Parses an F32 safetensors container. Throws LoadError on malformed
// headers, non-F32 dtypes, or out-of-bounds offsets.
std::map<std::string, RawTensor> read_safetensors(std::string_view bytes);

// Header keys are sorted and data is laid out in the same order, so equal
// inputs give equal bytes.
std::string write_safetensors(const std::map<std::string, RawTensor>& tensors);

// Name -> expected shape for every tensor the config dictates, in file order.
std::vector<std::pair<std::string, TensorShape>> expected_tensors(const ModelConfig& config);

// Validates names and shapes against the table: missing, unknown, misshapen
// or non-finite tensors raise LoadError naming the tensor.
ModelWeights weights_from_tensors(std::map<std::string, RawTensor> tensors,
                                  const ModelConfig& config);
std::map<std::string, RawTensor> weights_to_tensors(const ModelWeights& weights,
                                                    const ModelConfig& config);

// ---- bundles ---------------------------------------------------------------

ModelBundle load_bundle(const std::filesystem::path& config_path,
                        const std::filesystem::path& weights_path,
                        const std::filesystem::path& vocab_path);
ModelBundle load_bundle_dir(const std::filesystem::path& dir);

// In-memory bundle; model_id is the hash the saved weights file would have.
ModelBundle make_bundle(ModelConfig config, ModelWeights weights, Vocab vocab);

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir);

// Seeded uniform init: matrices in +-1/sqrt(fan_in), norm weights in
// 1 +- 0.1.
ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed);

// Byte-fallback block at 0 followed by printable-ASCII, newline and a few
// multi-character entries. Needs vocab_size >= demo_vocab_min_size().
Vocab demo_vocab(std::size_t vocab_size);
std::size_t demo_vocab_min_size();

}  // namespace layerscope
