#include "layerscope/model_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "layerscope/errors.hpp"
#include "layerscope/json_util.hpp"
#include "layerscope/sha256.hpp"
#include "layerscope/splitmix64.hpp"

namespace layerscope {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "safetensors I/O assumes a little-endian host");

namespace {

constexpr const char* kConfigFields[] = {
    "d_model",    "n_layers",  "n_heads",     "n_kv_heads", "d_head",      "d_ff",
    "vocab_size", "rope_theta", "norm_eps", "max_seq_len", "tied_lm_head",
};

std::size_t get_count(const json& j, const char* key) {
    const json& v = j.at(key);
    if (!is_index(v)) {
        throw ConfigError(std::string("model config field '") + key +
                          "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
}

double get_real(const json& j, const char* key) {
    const json& v = j.at(key);
    if (!v.is_number()) throw ConfigError(std::string("model config field '") + key + "' must be a number");
    return v.get<double>();
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json_file(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw LoadError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::vector<std::size_t> disk_shape(const TensorShape& s) {
    if (s.is_vector) return {s.cols};
    return {s.rows, s.cols};
}

void write_file(const fs::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace

ModelConfig parse_model_config(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    const std::set<std::string> known(std::begin(kConfigFields), std::end(kConfigFields));
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw ConfigError("model config has unknown field '" + key + "'");
    }
    for (const char* key : kConfigFields) {
        if (!j.contains(key)) throw ConfigError(std::string("model config is missing field '") + key + "'");
    }
    ModelConfig c;
    c.d_model = get_count(j, "d_model");
    c.n_layers = get_count(j, "n_layers");
    c.n_heads = get_count(j, "n_heads");
    c.n_kv_heads = get_count(j, "n_kv_heads");
    c.d_head = get_count(j, "d_head");
    c.d_ff = get_count(j, "d_ff");
    c.vocab_size = get_count(j, "vocab_size");
    c.rope_theta = get_real(j, "rope_theta");
    c.norm_eps = get_real(j, "norm_eps");
    c.max_seq_len = get_count(j, "max_seq_len");
    if (!j.at("tied_lm_head").is_boolean()) throw ConfigError("model config field 'tied_lm_head' must be a boolean");
    c.tied_lm_head = j.at("tied_lm_head").get<bool>();
    c.validate();
    return c;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["d_head"] = c.d_head;
    j["d_ff"] = c.d_ff;
    j["vocab_size"] = c.vocab_size;
    j["rope_theta"] = c.rope_theta;
    j["norm_eps"] = c.norm_eps;
    j["max_seq_len"] = c.max_seq_len;
    j["tied_lm_head"] = c.tied_lm_head;
    return j;
}

Vocab parse_vocab(const json& j, std::size_t vocab_size) {
    if (!j.is_object()) throw LoadError("vocab must be a JSON object");
    if (!j.contains("byte_fallback_base")) throw LoadError("vocab is missing 'byte_fallback_base'");
    std::optional<TokenId> base;
    const json& b = j.at("byte_fallback_base");
    if (is_index(b)) {
        base = b.get<TokenId>();
    } else if (!b.is_null()) {
        throw LoadError("vocab 'byte_fallback_base' must be a non-negative integer or null");
    }

    const bool nested = j.contains("entries") && j.at("entries").is_object();
    const json& table = nested ? j.at("entries") : j;
    std::map<std::string, TokenId> entries;
    for (const auto& [text, id] : table.items()) {
        if (!nested && text == "byte_fallback_base") continue;
        if (!is_index(id)) {
            throw LoadError("vocab entry '" + text + "' must map to a non-negative integer id");
        }
        entries.emplace(text, id.get<TokenId>());
    }
    if (nested && j.size() != 2) {
        for (const auto& [key, _] : j.items()) {
            if (key != "entries" && key != "byte_fallback_base") {
                throw LoadError("vocab has unknown top-level key '" + key + "'");
            }
        }
    }
    return Vocab(std::move(entries), base, vocab_size);
}

nlohmann::ordered_json vocab_to_json(const Vocab& vocab) {
    nlohmann::ordered_json j;
    if (vocab.byte_fallback_base()) {
        j["byte_fallback_base"] = *vocab.byte_fallback_base();
    } else {
        j["byte_fallback_base"] = nullptr;
    }
    nlohmann::ordered_json entries = nlohmann::ordered_json::object();
    for (const auto& [text, id] : vocab.entries()) entries[text] = id;
    j["entries"] = std::move(entries);
    return j;
}

std::map<std::string, RawTensor> read_safetensors(std::string_view bytes) {
    if (bytes.size() < 8) throw LoadError("safetensors: file shorter than the 8-byte header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8) throw LoadError("safetensors: header length exceeds file size");
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::parse_error& e) {
        throw LoadError(std::string("safetensors: header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw LoadError("safetensors: header must be a JSON object");

    const std::string_view data = bytes.substr(8 + header_len);
    std::map<std::string, RawTensor> out;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") continue;
        const auto bad = [&](const std::string& what) {
            return LoadError("safetensors: tensor '" + name + "' " + what);
        };
        if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
            !info.contains("data_offsets")) {
            throw bad("has an incomplete header entry");
        }
        if (info.at("dtype") != "F32") {
            throw bad("has unsupported dtype " + info.at("dtype").dump() + " (only F32)");
        }
        RawTensor t;
        std::size_t count = 1;
        for (const json& dim : info.at("shape")) {
            if (!is_index(dim)) throw bad("has a non-integer dimension");
            t.shape.push_back(dim.get<std::size_t>());
            count *= t.shape.back();
        }
        const json& off = info.at("data_offsets");
        if (!off.is_array() || off.size() != 2 || !is_index(off[0]) ||
            !is_index(off[1])) {
            throw bad("has malformed data_offsets");
        }
        const auto begin = off[0].get<std::uint64_t>();
        const auto end = off[1].get<std::uint64_t>();
        if (end < begin || end > data.size()) throw bad("has data_offsets outside the data section");
        if (end - begin != count * sizeof(float)) {
            throw bad("byte length " + std::to_string(end - begin) + " does not match shape " +
                      shape_string(t.shape));
        }
        t.data.resize(count);
        if (count) std::memcpy(t.data.data(), data.data() + begin, count * sizeof(float));
        out.emplace(name, std::move(t));
    }
    return out;
}

std::string write_safetensors(const std::map<std::string, RawTensor>& tensors) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::uint64_t n = t.data.size() * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + n}}};
        offset += n;
    }
    std::string header_text = header.dump();
    while ((8 + header_text.size()) % 8 != 0) header_text.push_back(' ');

    std::string out(8, '\0');
    const std::uint64_t len = header_text.size();
    std::memcpy(out.data(), &len, 8);
    out += header_text;
    for (const auto& [_, t] : tensors) {
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    return out;
}

std::vector<std::pair<std::string, TensorShape>> expected_tensors(const ModelConfig& c) {
    std::vector<std::pair<std::string, TensorShape>> out;
    out.emplace_back("tok_embedding", TensorShape{c.vocab_size, c.d_model, false});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (LayerTensor t : kAllLayerTensors) {
            out.emplace_back("layers." + std::to_string(l) + "." + std::string(layer_tensor_name(t)),
                             layer_tensor_shape(c, t));
        }
    }
    out.emplace_back("final_norm", TensorShape{1, c.d_model, true});
    if (!c.tied_lm_head) out.emplace_back("lm_head", TensorShape{c.vocab_size, c.d_model, false});
    return out;
}

ModelWeights weights_from_tensors(std::map<std::string, RawTensor> tensors, const ModelConfig& c) {
    auto take = [&](const std::string& name, const TensorShape& shape) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw LoadError("missing tensor '" + name + "'");
        RawTensor raw = std::move(it->second);
        tensors.erase(it);
        const auto want = disk_shape(shape);
        if (raw.shape != want) {
            throw LoadError("tensor '" + name + "' has shape " + shape_string(raw.shape) +
                            ", expected " + shape_string(want));
        }
        Tensor2D t(shape.rows, shape.cols, std::move(raw.data));
        if (!t.all_finite()) throw LoadError("tensor '" + name + "' contains non-finite values");
        return t;
    };

    ModelWeights w;
    const auto table = expected_tensors(c);
    std::size_t k = 0;
    w.token_embedding = take(table[k].first, table[k].second);
    ++k;
    w.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (LayerTensor t : kAllLayerTensors) {
            w.layers[l][t] = take(table[k].first, table[k].second);
            ++k;
        }
    }
    w.final_norm = take(table[k].first, table[k].second);
    ++k;
    if (!c.tied_lm_head) w.lm_head = take(table[k].first, table[k].second);
    if (!tensors.empty()) throw LoadError("unknown tensor '" + tensors.begin()->first + "'");
    return w;
}

std::map<std::string, RawTensor> weights_to_tensors(const ModelWeights& w, const ModelConfig& c) {
    check_shapes(w, c);
    std::map<std::string, RawTensor> out;
    auto put = [&](const std::string& name, const TensorShape& shape, const Tensor2D& t) {
        out[name] = RawTensor{disk_shape(shape), std::vector<float>(t.values().begin(), t.values().end())};
    };
    const auto table = expected_tensors(c);
    std::size_t k = 0;
    put(table[k].first, table[k].second, w.token_embedding);
    ++k;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (LayerTensor t : kAllLayerTensors) {
            put(table[k].first, table[k].second, w.layers[l][t]);
            ++k;
        }
    }
    put(table[k].first, table[k].second, w.final_norm);
    ++k;
    if (!c.tied_lm_head) put(table[k].first, table[k].second, *w.lm_head);
    return out;
}

ModelBundle load_bundle(const fs::path& config_path, const fs::path& weights_path,
                        const fs::path& vocab_path) {
    ModelBundle b;
    b.config = parse_model_config(parse_json_file(config_path));
    const std::string bytes = read_file(weights_path);
    b.model_id = sha256_hex(bytes);
    b.weights = weights_from_tensors(read_safetensors(bytes), b.config);
    b.vocab = parse_vocab(parse_json_file(vocab_path), b.config.vocab_size);
    return b;
}

ModelBundle load_bundle_dir(const fs::path& dir) {
    return load_bundle(dir / kConfigFile, dir / kWeightsFile, dir / kVocabFile);
}

ModelBundle make_bundle(ModelConfig config, ModelWeights weights, Vocab vocab) {
    config.validate();
    check_shapes(weights, config);
    if (vocab.vocab_size() != config.vocab_size) {
        throw ConfigError("vocab size " + std::to_string(vocab.vocab_size()) +
                          " does not match config vocab_size " + std::to_string(config.vocab_size));
    }
    ModelBundle b;
    b.model_id = sha256_hex(write_safetensors(weights_to_tensors(weights, config)));
    b.config = config;
    b.weights = std::move(weights);
    b.vocab = std::move(vocab);
    return b;
}

void save_bundle(const ModelBundle& b, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    write_file(dir / kConfigFile, model_config_to_json(b.config).dump(2) + "\n");
    write_file(dir / kWeightsFile, write_safetensors(weights_to_tensors(b.weights, b.config)));
    write_file(dir / kVocabFile, vocab_to_json(b.vocab).dump(2) + "\n");
}

ModelWeights random_weights(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    SplitMix64 rng(seed);
    auto matrix = [&](std::size_t rows, std::size_t cols, float scale) {
        Tensor2D t(rows, cols);
        for (float& v : t.values()) v = rng.symmetric_unit() * scale;
        return t;
    };
    auto norm = [&](std::size_t n) {
        Tensor2D t(1, n);
        for (float& v : t.values()) v = 1.0f + 0.1f * rng.symmetric_unit();
        return t;
    };
    ModelWeights w;
    w.token_embedding = matrix(c.vocab_size, c.d_model, 1.0f);
    w.layers.resize(c.n_layers);
    for (auto& layer : w.layers) {
        for (LayerTensor t : kAllLayerTensors) {
            const TensorShape s = layer_tensor_shape(c, t);
            layer[t] = s.is_vector ? norm(s.cols)
                                   : matrix(s.rows, s.cols,
                                            1.0f / std::sqrt(static_cast<float>(s.cols)));
        }
    }
    w.final_norm = norm(c.d_model);
    if (!c.tied_lm_head) {
        w.lm_head = matrix(c.vocab_size, c.d_model, 1.0f / std::sqrt(static_cast<float>(c.d_model)));
    }
    return w;
}

namespace {
std::vector<std::string> demo_entry_texts() {
    std::vector<std::string> texts;
    for (char ch = 32; ch < 127; ++ch) texts.emplace_back(1, ch);
    texts.emplace_back("\n");
    texts.emplace_back("Q:");
    texts.emplace_back("A:");
    texts.emplace_back(": ");
    return texts;
}
}  // namespace

std::size_t demo_vocab_min_size() { return 256 + demo_entry_texts().size(); }

Vocab demo_vocab(std::size_t vocab_size) {
    if (vocab_size < demo_vocab_min_size()) {
        throw ConfigError("demo vocab needs vocab_size >= " + std::to_string(demo_vocab_min_size()));
    }
    std::map<std::string, TokenId> entries;
    TokenId id = 256;
    for (auto& text : demo_entry_texts()) entries.emplace(std::move(text), id++);
    return Vocab(std::move(entries), TokenId{0}, vocab_size);
}

}  // namespace layerscope
