#include "layerscope/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "layerscope/errors.hpp"
#include "layerscope/json_util.hpp"
#include "layerscope/splitmix64.hpp"

namespace layerscope {

using nlohmann::json;

std::string_view to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::MultipleChoice: return "mc";
        case TaskKind::Continuation: return "continuation";
        case TaskKind::Generation: return "generation";
    }
    return "generation";
}

TaskKind parse_task_kind(std::string_view text) {
    if (text == "mc") return TaskKind::MultipleChoice;
    if (text == "continuation") return TaskKind::Continuation;
    if (text == "generation") return TaskKind::Generation;
    throw ConfigError("unknown task kind '" + std::string(text) +
                      "' (expected mc, continuation or generation)");
}

std::string trim(std::string_view text) {
    const auto is_space = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    std::size_t b = 0;
    std::size_t e = text.size();
    while (b < e && is_space(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && is_space(static_cast<unsigned char>(text[e - 1]))) --e;
    return std::string(text.substr(b, e - b));
}

// ---- JSONL -----------------------------------------------------------------

namespace {

std::string field_string(const json& j, const char* key) {
    if (!j.contains(key)) throw TaskError(std::string("missing field '") + key + "'");
    if (!j.at(key).is_string()) throw TaskError(std::string("field '") + key + "' must be a string");
    return j.at(key).get<std::string>();
}

}  // namespace

TaskItem item_from_json(const json& j, std::optional<TaskKind> default_kind) {
    if (!j.is_object()) throw TaskError("item must be a JSON object");
    TaskItem item;
    if (j.contains("kind")) {
        if (!j.at("kind").is_string()) throw TaskError("field 'kind' must be a string");
        try {
            item.kind = parse_task_kind(j.at("kind").get<std::string>());
        } catch (const ConfigError& e) {
            throw TaskError(std::string("field 'kind': ") + e.what());
        }
    } else if (j.contains("choices")) {
        item.kind = TaskKind::MultipleChoice;
    } else {
        item.kind = default_kind.value_or(TaskKind::Generation);
    }

    std::set<std::string> allowed = {"id", "context", "gold", "kind"};
    if (item.kind == TaskKind::MultipleChoice) allowed.insert("choices");
    if (item.kind != TaskKind::Continuation) allowed.insert("evidence");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.contains(key)) {
            throw TaskError("unexpected field '" + key + "' for a " + std::string(to_string(item.kind)) + " item");
        }
    }

    item.id = field_string(j, "id");
    if (item.id.empty()) throw TaskError("field 'id' must be non-empty");
    item.context = field_string(j, "context");
    if (j.contains("evidence")) item.evidence = field_string(j, "evidence");

    if (!j.contains("gold")) throw TaskError("missing field 'gold'");
    if (item.kind == TaskKind::MultipleChoice) {
        if (!j.contains("choices") || !j.at("choices").is_array()) {
            throw TaskError("field 'choices' must be an array of strings");
        }
        for (const json& c : j.at("choices")) {
            if (!c.is_string()) throw TaskError("field 'choices' must be an array of strings");
            item.choices.push_back(c.get<std::string>());
        }
        if (!is_index(j.at("gold"))) throw TaskError("field 'gold' must be a non-negative integer for mc items");
        item.gold_index = j.at("gold").get<std::size_t>();
        if (item.gold_index >= item.choices.size()) {
            throw TaskError("field 'gold' = " + std::to_string(item.gold_index) + " but only " +
                            std::to_string(item.choices.size()) + " choices");
        }
    } else {
        item.gold_text = field_string(j, "gold");
        if (item.gold_text.empty()) throw TaskError("field 'gold' must be non-empty");
    }
    return item;
}

std::vector<TaskItem> parse_task_jsonl(std::string_view text, std::string_view source_name,
                                       std::optional<TaskKind> default_kind) {
    std::vector<TaskItem> items;
    std::set<std::string> ids;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (trim(line).empty()) continue;
        const std::string where = std::string(source_name) + ":" + std::to_string(line_no) + ": ";
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw TaskError(where + "invalid JSON: " + e.what());
        }
        try {
            items.push_back(item_from_json(j, default_kind));
        } catch (const TaskError& e) {
            throw TaskError(where + e.what());
        }
        if (!ids.insert(items.back().id).second) {
            throw TaskError(where + "duplicate id '" + items.back().id + "'");
        }
    }
    return items;
}

std::vector<TaskItem> load_task(const std::filesystem::path& path, std::optional<TaskKind> default_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read task file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_task_jsonl(ss.str(), path.string(), default_kind);
}

nlohmann::ordered_json item_to_json(const TaskItem& item) {
    nlohmann::ordered_json j;
    j["id"] = item.id;
    j["context"] = item.context;
    if (item.kind == TaskKind::MultipleChoice) {
        j["choices"] = item.choices;
        j["gold"] = item.gold_index;
    } else {
        j["gold"] = item.gold_text;
    }
    if (item.evidence) j["evidence"] = *item.evidence;
    return j;
}

std::string items_to_jsonl(std::span<const TaskItem> items) {
    std::string out;
    for (const TaskItem& item : items) {
        out += item_to_json(item).dump();
        out += '\n';
    }
    return out;
}

// ---- few-shot --------------------------------------------------------------

std::vector<TaskItem> load_exemplars(const FewShotConfig& config) {
    if (config.exemplar_path) return load_task(*config.exemplar_path);
    return config.exemplars;
}

std::vector<std::size_t> select_exemplars(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k > n) {
        throw ConfigError("few-shot k = " + std::to_string(k) + " but only " + std::to_string(n) +
                          " exemplars available");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SplitMix64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(order[i - 1], order[j]);
    }
    order.resize(k);
    return order;
}

std::string assemble_prompt(const TaskItem& item, const FewShotConfig& config,
                            std::span<const TaskItem> exemplars, bool retrieval_mode) {
    std::string prompt;
    if (config.k > 0) {
        for (const TaskItem& ex : exemplars) {
            if (ex.id == item.id) {
                throw ConfigError("exemplar id '" + ex.id + "' is also an evaluated item id");
            }
        }
        const auto picked = select_exemplars(exemplars.size(), config.k, config.seed);
        for (std::size_t i = 0; i < picked.size(); ++i) {
            const TaskItem& ex = exemplars[picked[i]];
            if (i) prompt += config.delimiter;
            prompt += ex.context;
            prompt += config.answer_separator;
            prompt += trim(ex.gold_answer());
        }
        prompt += config.delimiter;
    }
    if (retrieval_mode && item.evidence) {
        prompt += *item.evidence;
        prompt += config.delimiter;
    }
    prompt += item.context;
    return prompt;
}

// ---- KV retrieval ----------------------------------------------------------

namespace {

constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";

bool enough_strings(std::size_t len, std::size_t needed) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < len; ++i) {
        total *= kAlphabet.size();
        if (total >= needed) return true;
    }
    return total >= needed;
}

std::string random_string(SplitMix64& rng, std::size_t len) {
    std::string s(len, ' ');
    for (char& c : s) c = kAlphabet[rng.below(kAlphabet.size())];
    return s;
}

std::vector<std::string> distinct_strings(SplitMix64& rng, std::size_t count, std::size_t len) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    while (out.size() < count) {
        std::string s = random_string(rng, len);
        if (seen.insert(s).second) out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

nlohmann::ordered_json kv_config_to_json(const KVGenConfig& c) {
    nlohmann::ordered_json j;
    j["n_items"] = c.n_items;
    j["n_pairs"] = c.n_pairs;
    j["key_len"] = c.key_len;
    j["value_len"] = c.value_len;
    j["seed"] = c.seed;
    j["format"] = std::string(to_string(c.format));
    j["n_choices"] = c.n_choices;
    return j;
}

KVGenConfig kv_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("kv_gen must be an object");
    KVGenConfig c;
    for (const auto& [key, v] : j.items()) {
        auto count = [&]() {
            if (!is_index(v)) throw ConfigError("kv_gen." + key + " must be a non-negative integer");
            return v.get<std::uint64_t>();
        };
        if (key == "n_items") c.n_items = count();
        else if (key == "n_pairs") c.n_pairs = count();
        else if (key == "key_len") c.key_len = count();
        else if (key == "value_len") c.value_len = count();
        else if (key == "seed") c.seed = count();
        else if (key == "n_choices") c.n_choices = count();
        else if (key == "format") {
            if (!v.is_string()) throw ConfigError("kv_gen.format must be a string");
            c.format = parse_task_kind(v.get<std::string>());
        } else {
            throw ConfigError("kv_gen has unknown field '" + key + "'");
        }
    }
    return c;
}

KVGenConfig resolved(KVGenConfig config) {
    if (config.n_choices == 0) config.n_choices = std::min<std::size_t>(4, config.n_pairs);
    return config;
}

std::vector<TaskItem> generate_kv_retrieval(const KVGenConfig& requested) {
    const KVGenConfig c = resolved(requested);
    if (c.n_items == 0) throw ConfigError("kv_gen: n_items must be >= 1");
    if (c.n_pairs == 0) throw ConfigError("kv_gen: n_pairs must be >= 1");
    if (c.key_len == 0 || c.value_len == 0) throw ConfigError("kv_gen: key_len and value_len must be >= 1");
    if (!enough_strings(c.key_len, c.n_pairs)) {
        throw ConfigError("kv_gen: key_len " + std::to_string(c.key_len) + " cannot give " +
                          std::to_string(c.n_pairs) + " distinct keys");
    }
    if (!enough_strings(c.value_len, c.n_pairs)) {
        throw ConfigError("kv_gen: value_len " + std::to_string(c.value_len) + " cannot give " +
                          std::to_string(c.n_pairs) + " distinct values");
    }
    if (c.format == TaskKind::Continuation) throw ConfigError("kv_gen: format must be mc or generation");
    const bool mc = c.format == TaskKind::MultipleChoice;
    if (mc && (c.n_choices < 2 || c.n_choices > c.n_pairs)) {
        throw ConfigError("kv_gen: n_choices must be in [2, n_pairs] for mc, got " + std::to_string(c.n_choices));
    }

    SplitMix64 rng(c.seed);
    std::vector<TaskItem> items;
    items.reserve(c.n_items);
    for (std::size_t i = 0; i < c.n_items; ++i) {
        const auto keys = distinct_strings(rng, c.n_pairs, c.key_len);
        const auto values = distinct_strings(rng, c.n_pairs, c.value_len);
        const std::size_t q = rng.below(c.n_pairs);

        TaskItem item;
        item.kind = c.format;
        item.id = "kv-" + std::to_string(c.seed) + "-" + std::to_string(i);
        for (std::size_t p = 0; p < c.n_pairs; ++p) item.context += keys[p] + ": " + values[p] + "\n";
        item.context += "Q: " + keys[q] + "?\nA:";

        if (mc) {
            std::vector<std::size_t> others;
            for (std::size_t p = 0; p < c.n_pairs; ++p) {
                if (p != q) others.push_back(p);
            }
            for (std::size_t j = 0; j + 1 < c.n_choices; ++j) {
                const std::size_t r = j + rng.below(others.size() - j);
                std::swap(others[j], others[r]);
            }
            const std::size_t g = rng.below(c.n_choices);
            std::vector<std::size_t> order(others.begin(), others.begin() + (c.n_choices - 1));
            order.insert(order.begin() + g, q);
            for (std::size_t p : order) item.choices.push_back(" " + values[p]);
            item.gold_index = g;
        } else {
            item.gold_text = values[q];
        }
        items.push_back(std::move(item));
    }
    return items;
}

void write_kv_task(const KVGenConfig& config, const std::filesystem::path& path) {
    const auto items = generate_kv_retrieval(config);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + path.string() + "'");
        out << items_to_jsonl(items);
    }
    std::filesystem::path sidecar = path;
    sidecar += ".config.json";
    std::ofstream out(sidecar, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + sidecar.string() + "'");
    out << kv_config_to_json(resolved(config)).dump(2) << "\n";
}

}  // namespace layerscope
