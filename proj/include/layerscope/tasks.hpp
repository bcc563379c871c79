#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace layerscope {

enum class TaskKind { MultipleChoice, Continuation, Generation };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

struct TaskItem {
    TaskKind kind = TaskKind::Generation;
    std::string id;
    std::string context;
    std::vector<std::string> choices;     // mc only
    std::size_t gold_index = 0;           // mc only
    std::string gold_text;                // continuation / generation
    std::optional<std::string> evidence;  // shown in retrieval-augmented mode

    // Text of the gold answer whatever the kind.
    const std::string& gold_answer() const { return kind == TaskKind::MultipleChoice ? choices.at(gold_index) : gold_text; }

    bool operator==(const TaskItem&) const = default;
};

// ---- JSONL ingestion -------------------------------------------------------
//
//   mc            {"id", "context", "choices": [...], "gold": int, "evidence"?}
//   continuation  {"id", "context", "gold": str}
//   generation    {"id", "context", "gold": str, "evidence"?}
//
// A line may carry "kind" explicitly. Otherwise lines with "choices" are mc
// and string-gold lines take `default_kind` (generation when unset).

std::vector<TaskItem> parse_task_jsonl(std::string_view text, std::string_view source_name,
                                       std::optional<TaskKind> default_kind = std::nullopt);
std::vector<TaskItem> load_task(const std::filesystem::path& path,
                                std::optional<TaskKind> default_kind = std::nullopt);

nlohmann::ordered_json item_to_json(const TaskItem& item);
TaskItem item_from_json(const nlohmann::json& j, std::optional<TaskKind> default_kind);
std::string items_to_jsonl(std::span<const TaskItem> items);

// ---- few-shot prompts ------------------------------------------------------

struct FewShotConfig {
    std::size_t k = 0;
    std::optional<std::filesystem::path> exemplar_path;
    std::vector<TaskItem> exemplars;  // inline source, used when no path is set
    std::string delimiter = "\n\n";
    std::string answer_separator = " ";
    std::uint64_t seed = 0;
};

std::vector<TaskItem> load_exemplars(const FewShotConfig& config);

// Seeded Fisher-Yates shuffle of [0, n), first k kept.
std::vector<std::size_t> select_exemplars(std::size_t n, std::size_t k, std::uint64_t seed);

// k exemplars (context + separator + answer) joined by the delimiter, then the
// delimiter, then evidence + delimiter when retrieval mode is on, then the
// item context. With k == 0 the exemplar block and its delimiter vanish.
std::string assemble_prompt(const TaskItem& item, const FewShotConfig& config,
                            std::span<const TaskItem> exemplars, bool retrieval_mode);

// ---- synthetic KV retrieval ------------------------------------------------

struct KVGenConfig {
    std::size_t n_items = 100;
    std::size_t n_pairs = 32;
    std::size_t key_len = 6;
    std::size_t value_len = 6;
    std::uint64_t seed = 0;
    TaskKind format = TaskKind::MultipleChoice;  // mc or generation
    std::size_t n_choices = 0;  // 0 selects min(4, n_pairs)
};

// Config with defaults filled in (n_choices resolved).
KVGenConfig resolved(KVGenConfig config);

nlohmann::ordered_json kv_config_to_json(const KVGenConfig& config);
KVGenConfig kv_config_from_json(const nlohmann::json& j);

// Deterministic in the seed; algorithm documented in docs/kv_retrieval.md.
std::vector<TaskItem> generate_kv_retrieval(const KVGenConfig& config);

// Writes the JSONL plus "<path>.config.json" recording the full config.
void write_kv_task(const KVGenConfig& config, const std::filesystem::path& path);

std::string trim(std::string_view text);

}  // namespace layerscope
