#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "layerscope/forward.hpp"
#include "layerscope/model_io.hpp"

namespace layerscope {

enum class PruneScope { Full, AttnOnly, MlpOnly };

std::string_view to_string(PruneScope scope);
PruneScope parse_prune_scope(std::string_view text);

// Skip a whole block (identity on the residual stream) or one sublayer.
struct PruneLayer {
    std::size_t layer = 0;
    PruneScope scope = PruneScope::Full;
};

// Zero the listed query heads before Wo. With group_mode the ids are KV
// group indices, each standing for its G query heads.
struct MaskHeads {
    std::size_t layer = 0;
    std::vector<std::size_t> heads;
    bool group_mode = false;
};

// W_tgt <- W_tgt + (W_src - W_tgt), realized as direct substitution of the
// donor tensor so the result is bit-equal to W_src. Per-layer selectors need
// `layer`; model-level selectors (tok_embedding, final_norm, lm_head) must
// leave it empty.
struct ReplaceTensor {
    std::optional<std::size_t> layer;
    std::string selector = "attn.wo";
    std::string source;  // donor model_id
};

using Edit = std::variant<PruneLayer, MaskHeads, ReplaceTensor>;

struct SurgeryPlan {
    std::vector<Edit> edits;
    std::string label;

    bool empty() const { return edits.empty(); }
};

// Selector names beyond the nine per-layer tensor suffixes.
inline constexpr std::string_view kSelectorBlockAll = "block.all";
inline constexpr std::string_view kSelectorTokEmbedding = "tok_embedding";
inline constexpr std::string_view kSelectorFinalNorm = "final_norm";
inline constexpr std::string_view kSelectorLmHead = "lm_head";
// Generator-only shorthand: block.all on each layer plus every model-level
// tensor. Never valid inside an edit.
inline constexpr std::string_view kSelectorFull = "full";

bool is_model_level_selector(std::string_view selector);

// ---- validation ------------------------------------------------------------

struct Violation {
    std::optional<std::size_t> edit_index;
    std::string message;
};

std::vector<Violation> validate_plan(const SurgeryPlan& plan, const ModelConfig& config,
                                     const std::map<std::string, ModelConfig>& donors);

std::string format_violations(const std::vector<Violation>& violations);

// Query heads a MaskHeads edit covers, sorted and deduplicated.
std::vector<std::size_t> expand_heads(const MaskHeads& edit, const ModelConfig& config);

// Same edit with group ids replaced by their query heads. Idempotent.
MaskHeads expand_groups(const MaskHeads& edit, const ModelConfig& config);

// ---- serialization ---------------------------------------------------------

nlohmann::json edit_to_json(const Edit& edit);
Edit edit_from_json(const nlohmann::json& j);

// Plan file form: a JSON array of edit objects.
nlohmann::json plan_to_json(const SurgeryPlan& plan);
// Accepts the array form or {"label": ..., "edits": [...]}. Throws PlanError.
SurgeryPlan plan_from_json(const nlohmann::json& j, std::string label = {});
SurgeryPlan load_plan_file(const std::filesystem::path& path);

// Edits sorted into a canonical order with sorted head lists; the label is
// not part of it. Equal edit multisets give equal bytes.
std::string canonical_plan_bytes(const SurgeryPlan& plan);
std::string plan_hash(const SurgeryPlan& plan);

// ---- application -----------------------------------------------------------

using DonorMap = std::map<std::string, BundlePtr>;

// Overlay over an immutable target (and donors). Untouched tensors alias the
// target's weights. Keeps every referenced bundle alive.
class SurgiedModel {
  public:
    const ModelView& view() const { return view_; }
    const ModelConfig& config() const { return view_.config; }
    const Vocab& vocab() const { return target_->vocab; }
    const ModelBundle& target() const { return *target_; }
    const SurgeryPlan& plan() const { return plan_; }

  private:
    friend SurgiedModel apply(BundlePtr target, const DonorMap& donors, const SurgeryPlan& plan);

    BundlePtr target_;
    std::vector<BundlePtr> donors_;
    SurgeryPlan plan_;
    ModelView view_;
};

// Throws PlanError listing every violation when the plan does not validate.
SurgiedModel apply(BundlePtr target, const DonorMap& donors, const SurgeryPlan& plan);

Tensor2D forward(std::span<const TokenId> tokens, const SurgiedModel& model);

// ---- plan generators -------------------------------------------------------

// Identity and config of a bundle, enough to build plans against it.
struct ModelRef {
    std::string id;
    ModelConfig config;
};

ModelRef ref(const ModelBundle& bundle);

enum class ReplaceOrder { Ascending, Descending };

std::string_view to_string(ReplaceOrder order);
ReplaceOrder parse_replace_order(std::string_view text);

// Plan i prunes layer i; labels "prune_L{i}".
std::vector<SurgeryPlan> single_layer_sweep_plans(const ModelConfig& config,
                                                  PruneScope scope = PruneScope::Full);

// One plan per query head (or per KV group with group_mode) at `layer`.
std::vector<SurgeryPlan> head_sweep_plans(const ModelConfig& config, std::size_t layer,
                                          bool group_mode);

// One ReplaceTensor per listed layer with donor = source. Throws PlanError
// when the configs differ.
SurgeryPlan delta_plan(const ModelRef& target, const ModelRef& source,
                       const std::vector<std::size_t>& layers,
                       std::string_view selector = "attn.wo");

// Replacing the distilled model's layers with the base model's: the same
// construction as delta_plan with the roles swapped.
SurgeryPlan reverse_replacement_plan(const ModelRef& base, const ModelRef& distilled,
                                     const std::vector<std::size_t>& layers,
                                     std::string_view selector = "attn.wo");

// L plans, plan l replaces only layer l; labels "replace_L{l}".
std::vector<SurgeryPlan> delta_sweep_plans(const ModelRef& target, const ModelRef& source,
                                           std::string_view selector = "attn.wo");

// Plan k (1-based) replaces the first k layers in `order`; k = 1..L.
std::vector<SurgeryPlan> accumulative_plans(const ModelRef& target, const ModelRef& source,
                                            ReplaceOrder order,
                                            std::string_view selector = "attn.wo");

}  // namespace layerscope
