#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "layerscope/surgery.hpp"
#include "layerscope/tasks.hpp"

namespace layerscope {

enum class Protocol { LoglikelihoodDefault, LoglikelihoodContinuation, GenerateUntil };

std::string_view to_string(Protocol protocol);
Protocol parse_protocol(std::string_view text);

// Name of the metric a protocol reports as mu.
std::string_view primary_metric(Protocol protocol);

struct LLResult {
    double sum_logprob = 0.0;  // natural log
    std::size_t token_count = 0;
    bool all_greedy = false;   // every continuation token was the argmax at its step
};

// Token-level scoring: log P(continuation | context) by the chain rule.
LLResult loglikelihood_tokens(const ModelView& model, std::span<const TokenId> context,
                              std::span<const TokenId> continuation);

// Context and continuation token ids for a text pair. The continuation is
// encode(context + continuation) minus the longest prefix equal to
// encode(context); when joint tokenization merges across the boundary, the
// trailing tokens that decode exactly to the continuation are used instead.
struct TokenSplit {
    std::vector<TokenId> context;
    std::vector<TokenId> continuation;
};
TokenSplit split_continuation(const Vocab& vocab, std::string_view context,
                              std::string_view continuation);

LLResult loglikelihood(const SurgiedModel& model, std::string_view context,
                       std::string_view continuation);

struct ItemRecord {
    std::string id;
    bool correct = false;
    std::string status = "ok";  // "ok" or "no_answer"
    nlohmann::json detail = nlohmann::json::object();
};

struct ProtocolMetrics {
    Protocol protocol = Protocol::LoglikelihoodDefault;
    std::string task;
    double mu = 0.0;
    std::map<std::string, double> metrics;  // every value in [0, 1]
    std::map<std::string, double> stats;    // unbounded diagnostics, e.g. mean_logprob
    std::size_t n_items = 0;
    std::vector<ItemRecord> per_item;  // by item index
};

nlohmann::json to_json(const ProtocolMetrics& m);
ProtocolMetrics protocol_metrics_from_json(const nlohmann::json& j);

struct DeltaMetrics {
    std::map<std::string, double> delta;  // variant - baseline
};

// Log-likelihood default: every choice scored with loglikelihood(context,
// choice). acc takes the argmax of the summed log-prob, acc_ce the argmax of
// the per-token mean. Ties go to the lowest choice index. mu = acc.
ProtocolMetrics eval_mc_default(const SurgiedModel& model, std::span<const TaskItem> items,
                                std::string_view task = {});

// Log-likelihood continuation: an item is correct when its gold continuation
// is the greedy completion (all_greedy). mc items use their gold choice.
ProtocolMetrics eval_continuation(const SurgiedModel& model, std::span<const TaskItem> items,
                                  std::string_view task = {});

struct Generation {
    std::vector<TokenId> tokens;  // every emitted token, including any stop text
    std::string text;             // decoded new text, stop string excluded
    std::string stop_reason;      // "stop", "max_new" or "max_seq_len"
};

// Greedy decoding (ties to the lowest id) with a KV cache.
Generation generate(const SurgiedModel& model, std::string_view prompt,
                    std::span<const std::string> stops, std::size_t max_new);

std::string generate_until(const SurgiedModel& model, std::string_view prompt,
                           std::span<const std::string> stops, std::size_t max_new);

struct DecodeParams {
    std::size_t max_new = 32;
    std::vector<std::string> stops = {"\n"};
    // One capture group; the last match in the generated text wins.
    std::string pattern = R"(####\s*([\-0-9.,]+))";
};

nlohmann::ordered_json decode_params_to_json(const DecodeParams& params);

// Compiles the pattern; ConfigError unless it is valid with exactly one group.
std::regex compile_answer_pattern(const std::string& pattern);

// Capture of the last match, normalized; nullopt when nothing matches.
std::optional<std::string> extract_answer(std::string_view text, const std::regex& pattern);

// Trim, drop commas, canonicalize numbers ("1,000" -> "1000", "42.0" -> "42").
std::string normalize_answer(std::string_view text);

ProtocolMetrics eval_generation(const SurgiedModel& model, std::span<const TaskItem> items,
                                const DecodeParams& params, std::string_view task = {});

ProtocolMetrics evaluate(const SurgiedModel& model, Protocol protocol,
                         std::span<const TaskItem> items, const DecodeParams& params,
                         std::string_view task = {});

// delta(m) = variant.m - baseline.m for metrics present on both sides.
DeltaMetrics compute_delta(const ProtocolMetrics& baseline, const ProtocolMetrics& variant);

}  // namespace layerscope
