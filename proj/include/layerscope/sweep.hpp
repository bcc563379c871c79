#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "layerscope/protocols.hpp"
#include "layerscope/surgery.hpp"
#include "layerscope/tasks.hpp"

namespace layerscope {

enum class SweepKind { Layer, Head, Delta, Accumulative, Plans };

std::string_view to_string(SweepKind kind);
SweepKind parse_sweep_kind(std::string_view text);

// Either a JSONL file or an inline KV-retrieval generator config.
struct TaskSpec {
    std::string name;  // defaults to the file stem or "kv_seed<seed>"
    std::optional<std::filesystem::path> path;
    std::optional<KVGenConfig> kv_gen;
    std::optional<TaskKind> kind;  // default kind for lines with a string gold
    FewShotConfig few_shot;
    bool retrieval_mode = false;
};

struct SweepConfig {
    std::filesystem::path target;  // bundle directory
    std::vector<std::filesystem::path> donors;
    SweepKind kind = SweepKind::Layer;
    PruneScope scope = PruneScope::Full;
    std::optional<std::size_t> layer;  // head sweeps
    bool group_mode = false;
    std::string selector = "attn.wo";
    ReplaceOrder order = ReplaceOrder::Ascending;
    std::vector<std::filesystem::path> plans;  // explicit-plans kind
    std::vector<TaskSpec> tasks;
    std::vector<Protocol> protocols;
    DecodeParams decode;
    std::filesystem::path output_dir = "out";
    std::optional<std::filesystem::path> cache_dir;  // no caching when unset
    std::size_t parallelism = 1;
};

// Relative paths in the document resolve against `base_dir`. Unknown keys
// are rejected. Does not check cross-field rules; see validate().
SweepConfig sweep_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
// .toml is parsed as TOML, anything else as JSON.
SweepConfig load_sweep_config(const std::filesystem::path& path);

// Throws ConfigError for missing tasks or protocols, a head sweep without a
// layer, a donor-less delta or accumulative sweep, an empty plan list, etc.
void validate(const SweepConfig& config);

// A task with prompts already assembled, ready to evaluate.
struct PreparedTask {
    std::string name;
    std::vector<TaskItem> items;
    std::string content_hash;  // SHA-256 of the evaluated items as JSONL
};

PreparedTask prepare_task(const TaskSpec& spec);

struct GridEntry {
    SurgeryPlan plan;  // empty for the baseline
    bool baseline = false;
    std::optional<std::size_t> layer;
    std::optional<std::size_t> head;
    std::size_t task_index = 0;
    Protocol protocol = Protocol::LoglikelihoodDefault;
};

inline constexpr std::string_view kBaselineLabel = "baseline";

// Baseline once per (task, protocol), then one entry per generated plan.
// Plans are validated against the target; failures raise PlanError.
std::vector<GridEntry> plan_grid(const SweepConfig& config, const ModelRef& target,
                                 const std::vector<ModelRef>& donors);

struct RunRecord {
    std::string plan;
    std::string plan_hash;
    std::optional<std::size_t> layer;
    std::optional<std::size_t> head;
    std::string task;
    Protocol protocol = Protocol::LoglikelihoodDefault;
    std::optional<ProtocolMetrics> metrics;  // empty when the run failed
    DeltaMetrics delta;
    std::optional<std::string> error;
    double wall_time_ms = 0.0;
    bool cache_hit = false;

    bool baseline() const { return plan == kBaselineLabel; }
};

struct SweepReport {
    SweepKind kind = SweepKind::Layer;
    std::string target_id;
    std::vector<std::string> donor_ids;
    std::vector<RunRecord> records;  // sorted by (task, protocol, layer, head)

    std::size_t failed() const;
    std::size_t cache_hits() const;
};

// SHA-256 over target id, canonical plan bytes, task hash, protocol name and
// decode parameters.
std::string cache_key(std::string_view target_id, const SurgeryPlan& plan,
                      std::string_view task_hash, Protocol protocol, const DecodeParams& decode);

// Content-addressed JSON files under <root>/<key[0:2]>/<key>.json.
class ResultCache {
  public:
    explicit ResultCache(std::filesystem::path root) : root_(std::move(root)) {}

    std::optional<ProtocolMetrics> get(const std::string& key) const;
    // Temp file then rename, so concurrent writers never expose partial files.
    void put(const std::string& key, const ProtocolMetrics& metrics) const;
    std::filesystem::path path_for(const std::string& key) const;

  private:
    std::filesystem::path root_;
};

// Evaluates the grid with up to config.parallelism workers. Run failures are
// recorded on their records rather than thrown.
SweepReport run(const SweepConfig& config);

// Fields that change between otherwise identical runs.
inline constexpr std::string_view kVolatileFields[] = {"cache_hit", "wall_time_ms"};

nlohmann::json report_to_json(const SweepReport& report);
SweepReport report_from_json(const nlohmann::json& j);
SweepReport load_report(const std::filesystem::path& path);

std::string report_csv(const SweepReport& report);

struct ChartKey {
    std::string task;
    Protocol protocol;
    std::string metric;
};
// One chart per (task, protocol, metric), x = layer or head index.
std::vector<std::pair<ChartKey, std::string>> report_svgs(const SweepReport& report);

enum class EmitFormat { Csv, Json, Svg };
EmitFormat parse_emit_format(std::string_view text);

// Writes report.csv, report.json and <task>__<protocol>__<metric>.svg files.
// Throws Error on an empty report and IoError when files cannot be written.
std::vector<std::filesystem::path> emit(const SweepReport& report,
                                        const std::vector<EmitFormat>& formats,
                                        const std::filesystem::path& out_dir);

}  // namespace layerscope
