#include "layerscope/surgery.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "layerscope/errors.hpp"
#include "layerscope/json_util.hpp"
#include "layerscope/sha256.hpp"

namespace layerscope {

using nlohmann::json;

std::string_view to_string(PruneScope scope) {
    switch (scope) {
        case PruneScope::Full: return "full";
        case PruneScope::AttnOnly: return "attn_only";
        case PruneScope::MlpOnly: return "mlp_only";
    }
    return "full";
}

PruneScope parse_prune_scope(std::string_view text) {
    if (text == "full") return PruneScope::Full;
    if (text == "attn_only") return PruneScope::AttnOnly;
    if (text == "mlp_only") return PruneScope::MlpOnly;
    throw PlanError("unknown prune scope '" + std::string(text) +
                    "' (expected full, attn_only or mlp_only)");
}

std::string_view to_string(ReplaceOrder order) {
    return order == ReplaceOrder::Ascending ? "ascending" : "descending";
}

ReplaceOrder parse_replace_order(std::string_view text) {
    if (text == "ascending") return ReplaceOrder::Ascending;
    if (text == "descending") return ReplaceOrder::Descending;
    throw PlanError("unknown replacement order '" + std::string(text) +
                    "' (expected ascending or descending)");
}

bool is_model_level_selector(std::string_view s) {
    return s == kSelectorTokEmbedding || s == kSelectorFinalNorm || s == kSelectorLmHead;
}

namespace {

// Tensor names a per-layer selector covers, or nothing if unknown.
std::vector<LayerTensor> layer_selector_tensors(std::string_view selector) {
    if (selector == kSelectorBlockAll) return {kAllLayerTensors.begin(), kAllLayerTensors.end()};
    if (auto t = parse_layer_tensor(selector)) return {*t};
    return {};
}

}  // namespace

std::vector<std::size_t> expand_heads(const MaskHeads& edit, const ModelConfig& config) {
    std::set<std::size_t> heads;
    for (std::size_t id : edit.heads) {
        if (edit.group_mode) {
            const std::size_t g = config.group_size();
            for (std::size_t k = 0; k < g; ++k) heads.insert(id * g + k);
        } else {
            heads.insert(id);
        }
    }
    return {heads.begin(), heads.end()};
}

MaskHeads expand_groups(const MaskHeads& edit, const ModelConfig& config) {
    return MaskHeads{edit.layer, expand_heads(edit, config), false};
}

std::vector<Violation> validate_plan(const SurgeryPlan& plan, const ModelConfig& config,
                                     const std::map<std::string, ModelConfig>& donors) {
    std::vector<Violation> out;
    const auto L = config.n_layers;
    std::set<std::size_t> pruned;
    std::map<std::size_t, std::set<std::size_t>> masked;
    std::set<std::pair<long, std::string>> replaced;  // layer (-1 = model level), tensor

    for (std::size_t i = 0; i < plan.edits.size(); ++i) {
        auto add = [&](std::string msg) { out.push_back({i, std::move(msg)}); };
        const Edit& edit = plan.edits[i];

        if (const auto* p = std::get_if<PruneLayer>(&edit)) {
            if (p->layer >= L) {
                add("layer out of range: prune layer " + std::to_string(p->layer) +
                    " on a model with " + std::to_string(L) + " layers");
                continue;
            }
            if (!pruned.insert(p->layer).second) {
                add("duplicate prune of layer " + std::to_string(p->layer));
            }
        } else if (const auto* m = std::get_if<MaskHeads>(&edit)) {
            if (m->layer >= L) {
                add("layer out of range: mask_heads layer " + std::to_string(m->layer) +
                    " on a model with " + std::to_string(L) + " layers");
                continue;
            }
            const std::size_t limit = m->group_mode ? config.n_kv_heads : config.n_heads;
            bool in_range = true;
            for (std::size_t h : m->heads) {
                if (h >= limit) {
                    add(std::string(m->group_mode ? "kv group " : "head ") + std::to_string(h) +
                        " out of range (limit " + std::to_string(limit) + ")");
                    in_range = false;
                }
            }
            if (!in_range) continue;
            for (std::size_t h : expand_heads(*m, config)) {
                if (!masked[m->layer].insert(h).second) {
                    add("head " + std::to_string(h) + " masked more than once in layer " +
                        std::to_string(m->layer));
                }
            }
            std::vector<std::size_t> sorted = m->heads;
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
                add("duplicate head id in mask_heads for layer " + std::to_string(m->layer));
            }
        } else {
            const auto& r = std::get<ReplaceTensor>(edit);
            std::vector<std::pair<long, std::string>> covered;
            if (is_model_level_selector(r.selector)) {
                if (r.layer) {
                    add("selector '" + r.selector + "' is model-level and takes no layer");
                    continue;
                }
                if (r.selector == kSelectorLmHead && config.tied_lm_head) {
                    add("selector 'lm_head' names a tensor absent from a tied-head model");
                    continue;
                }
                covered.emplace_back(-1, r.selector);
            } else {
                const auto tensors = layer_selector_tensors(r.selector);
                if (tensors.empty()) {
                    add("unknown selector '" + r.selector + "'");
                    continue;
                }
                if (!r.layer) {
                    add("selector '" + r.selector + "' needs a layer");
                    continue;
                }
                if (*r.layer >= L) {
                    add("layer out of range: replace layer " + std::to_string(*r.layer) +
                        " on a model with " + std::to_string(L) + " layers");
                    continue;
                }
                for (LayerTensor t : tensors) {
                    covered.emplace_back(static_cast<long>(*r.layer), std::string(layer_tensor_name(t)));
                }
            }
            const auto donor = donors.find(r.source);
            if (donor == donors.end()) {
                add("unknown donor '" + r.source + "'");
            } else if (!(donor->second == config)) {
                add("donor '" + r.source + "' config does not match the target config");
            }
            for (const auto& key : covered) {
                if (!replaced.insert(key).second) {
                    const std::string where =
                        key.first < 0 ? key.second : "layers." + std::to_string(key.first) + "." + key.second;
                    add("tensor '" + where + "' replaced more than once");
                }
            }
        }
    }
    return out;
}

std::string format_violations(const std::vector<Violation>& violations) {
    std::string out;
    for (const auto& v : violations) {
        if (!out.empty()) out += "; ";
        if (v.edit_index) out += "edit " + std::to_string(*v.edit_index) + ": ";
        out += v.message;
    }
    return out;
}

// ---- serialization ---------------------------------------------------------

json edit_to_json(const Edit& edit) {
    if (const auto* p = std::get_if<PruneLayer>(&edit)) {
        return {{"op", "prune"}, {"layer", p->layer}, {"scope", std::string(to_string(p->scope))}};
    }
    if (const auto* m = std::get_if<MaskHeads>(&edit)) {
        return {{"op", "mask_heads"}, {"layer", m->layer}, {"heads", m->heads}, {"group_mode", m->group_mode}};
    }
    const auto& r = std::get<ReplaceTensor>(edit);
    json j = {{"op", "replace"}, {"selector", r.selector}, {"source", r.source}};
    if (r.layer) j["layer"] = *r.layer;
    return j;
}

namespace {

std::size_t get_index(const json& j, const char* key) {
    if (!j.contains(key)) throw PlanError(std::string("edit is missing '") + key + "'");
    const json& v = j.at(key);
    if (!is_index(v)) throw PlanError(std::string("edit field '") + key + "' must be a non-negative integer");
    return v.get<std::size_t>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw PlanError("edit has unknown field '" + key + "'");
        }
    }
}

}  // namespace

Edit edit_from_json(const json& j) {
    if (!j.is_object() || !j.contains("op") || !j.at("op").is_string()) {
        throw PlanError("edit must be an object with a string 'op'");
    }
    const std::string op = j.at("op").get<std::string>();
    if (op == "prune") {
        reject_unknown(j, {"op", "layer", "scope"});
        PruneLayer p;
        p.layer = get_index(j, "layer");
        if (j.contains("scope")) {
            if (!j.at("scope").is_string()) throw PlanError("edit field 'scope' must be a string");
            p.scope = parse_prune_scope(j.at("scope").get<std::string>());
        }
        return p;
    }
    if (op == "mask_heads") {
        reject_unknown(j, {"op", "layer", "heads", "group_mode"});
        MaskHeads m;
        m.layer = get_index(j, "layer");
        if (!j.contains("heads") || !j.at("heads").is_array()) throw PlanError("mask_heads needs a 'heads' array");
        for (const json& h : j.at("heads")) {
            if (!is_index(h)) throw PlanError("mask_heads head ids must be non-negative integers");
            m.heads.push_back(h.get<std::size_t>());
        }
        if (j.contains("group_mode")) {
            if (!j.at("group_mode").is_boolean()) throw PlanError("edit field 'group_mode' must be a boolean");
            m.group_mode = j.at("group_mode").get<bool>();
        }
        return m;
    }
    if (op == "replace") {
        reject_unknown(j, {"op", "layer", "selector", "source"});
        ReplaceTensor r;
        if (j.contains("layer") && !j.at("layer").is_null()) r.layer = get_index(j, "layer");
        if (j.contains("selector")) {
            if (!j.at("selector").is_string()) throw PlanError("edit field 'selector' must be a string");
            r.selector = j.at("selector").get<std::string>();
        }
        if (!j.contains("source") || !j.at("source").is_string()) throw PlanError("replace needs a string 'source'");
        r.source = j.at("source").get<std::string>();
        return r;
    }
    throw PlanError("unknown edit op '" + op + "'");
}

json plan_to_json(const SurgeryPlan& plan) {
    json arr = json::array();
    for (const Edit& e : plan.edits) arr.push_back(edit_to_json(e));
    return arr;
}

SurgeryPlan plan_from_json(const json& j, std::string label) {
    SurgeryPlan plan;
    plan.label = std::move(label);
    const json* edits = &j;
    if (j.is_object()) {
        for (const auto& [key, _] : j.items()) {
            if (key != "label" && key != "edits") throw PlanError("plan has unknown field '" + key + "'");
        }
        if (j.contains("label")) {
            if (!j.at("label").is_string()) throw PlanError("plan 'label' must be a string");
            plan.label = j.at("label").get<std::string>();
        }
        if (!j.contains("edits")) throw PlanError("plan object needs an 'edits' array");
        edits = &j.at("edits");
    }
    if (!edits->is_array()) throw PlanError("plan must be a JSON array of edits");
    for (std::size_t i = 0; i < edits->size(); ++i) {
        try {
            plan.edits.push_back(edit_from_json((*edits)[i]));
        } catch (const PlanError& e) {
            throw PlanError("edit " + std::to_string(i) + ": " + e.what());
        }
    }
    return plan;
}

SurgeryPlan load_plan_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read plan file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::parse_error& e) {
        throw PlanError("plan file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return plan_from_json(j, path.stem().string());
}

std::string canonical_plan_bytes(const SurgeryPlan& plan) {
    std::vector<std::string> items;
    items.reserve(plan.edits.size());
    for (Edit e : plan.edits) {
        if (auto* m = std::get_if<MaskHeads>(&e)) std::sort(m->heads.begin(), m->heads.end());
        items.push_back(edit_to_json(e).dump());
    }
    std::sort(items.begin(), items.end());
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        out += items[i];
    }
    return out + "]";
}

std::string plan_hash(const SurgeryPlan& plan) { return sha256_hex(canonical_plan_bytes(plan)); }

// ---- application -----------------------------------------------------------

SurgiedModel apply(BundlePtr target, const DonorMap& donors, const SurgeryPlan& plan) {
    if (!target) throw PlanError("apply: no target bundle");
    std::map<std::string, ModelConfig> donor_configs;
    for (const auto& [id, bundle] : donors) {
        if (bundle) donor_configs.emplace(id, bundle->config);
    }
    const auto violations = validate_plan(plan, target->config, donor_configs);
    if (!violations.empty()) throw PlanError("invalid plan: " + format_violations(violations));

    SurgiedModel out;
    out.target_ = target;
    out.plan_ = plan;
    out.view_ = ModelView::of(target->weights, target->config);
    ModelView& view = out.view_;
    const ModelConfig& config = target->config;

    std::set<std::string> used;
    for (const Edit& edit : plan.edits) {
        if (const auto* p = std::get_if<PruneLayer>(&edit)) {
            LayerView& layer = view.layers[p->layer];
            if (p->scope != PruneScope::MlpOnly) layer.skip_attn = true;
            if (p->scope != PruneScope::AttnOnly) layer.skip_mlp = true;
        } else if (const auto* m = std::get_if<MaskHeads>(&edit)) {
            const auto heads = expand_heads(*m, config);
            if (heads.empty()) continue;
            LayerView& layer = view.layers[m->layer];
            if (layer.masked_heads.empty()) layer.masked_heads.assign(config.n_heads, false);
            for (std::size_t h : heads) layer.masked_heads[h] = true;
        } else {
            const auto& r = std::get<ReplaceTensor>(edit);
            const ModelBundle& donor = *donors.at(r.source);
            if (used.insert(r.source).second) out.donors_.push_back(donors.at(r.source));
            if (r.selector == kSelectorTokEmbedding) {
                view.token_embedding = &donor.weights.token_embedding;
            } else if (r.selector == kSelectorFinalNorm) {
                view.final_norm = &donor.weights.final_norm;
            } else if (r.selector == kSelectorLmHead) {
                view.lm_head = &*donor.weights.lm_head;
            } else {
                for (LayerTensor t : layer_selector_tensors(r.selector)) {
                    view.layers[*r.layer].tensors[static_cast<std::size_t>(t)] =
                        &donor.weights.layers[*r.layer][t];
                }
            }
        }
    }
    if (config.tied_lm_head) view.lm_head = view.token_embedding;
    return out;
}

Tensor2D forward(std::span<const TokenId> tokens, const SurgiedModel& model) {
    return forward(tokens, model.view());
}

// ---- plan generators -------------------------------------------------------

ModelRef ref(const ModelBundle& bundle) { return {bundle.model_id, bundle.config}; }

std::vector<SurgeryPlan> single_layer_sweep_plans(const ModelConfig& config, PruneScope scope) {
    std::vector<SurgeryPlan> plans;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        plans.push_back({{PruneLayer{l, scope}}, "prune_L" + std::to_string(l)});
    }
    return plans;
}

std::vector<SurgeryPlan> head_sweep_plans(const ModelConfig& config, std::size_t layer,
                                          bool group_mode) {
    if (layer >= config.n_layers) {
        throw PlanError("head sweep layer " + std::to_string(layer) + " out of range (" +
                        std::to_string(config.n_layers) + " layers)");
    }
    const std::size_t count = group_mode ? config.n_kv_heads : config.n_heads;
    const std::string tag = group_mode ? "_G" : "_H";
    std::vector<SurgeryPlan> plans;
    for (std::size_t h = 0; h < count; ++h) {
        plans.push_back({{MaskHeads{layer, {h}, group_mode}},
                         "mask_L" + std::to_string(layer) + tag + std::to_string(h)});
    }
    return plans;
}

namespace {

void require_same_config(const ModelRef& target, const ModelRef& source) {
    if (!(target.config == source.config)) {
        throw PlanError("delta replacement needs identical architectures; configs of '" +
                        target.id + "' and '" + source.id + "' differ");
    }
}

void append_replacements(std::vector<Edit>& edits, const ModelRef& target, const ModelRef& source,
                         const std::vector<std::size_t>& layers, std::string_view selector) {
    const bool full = selector == kSelectorFull;
    const std::string per_layer(full ? kSelectorBlockAll : selector);
    for (std::size_t l : layers) edits.push_back(ReplaceTensor{l, per_layer, source.id});
    if (full) {
        edits.push_back(ReplaceTensor{std::nullopt, std::string(kSelectorTokEmbedding), source.id});
        edits.push_back(ReplaceTensor{std::nullopt, std::string(kSelectorFinalNorm), source.id});
        if (!target.config.tied_lm_head) {
            edits.push_back(ReplaceTensor{std::nullopt, std::string(kSelectorLmHead), source.id});
        }
    }
}

}  // namespace

SurgeryPlan delta_plan(const ModelRef& target, const ModelRef& source,
                       const std::vector<std::size_t>& layers, std::string_view selector) {
    require_same_config(target, source);
    SurgeryPlan plan;
    std::vector<std::size_t> sorted = layers;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (std::size_t l : sorted) {
        if (l >= target.config.n_layers) {
            throw PlanError("delta plan layer " + std::to_string(l) + " out of range");
        }
    }
    append_replacements(plan.edits, target, source, sorted, selector);
    if (sorted.size() == 1) {
        plan.label = "replace_L" + std::to_string(sorted.front());
    } else {
        plan.label = "replace_" + std::to_string(sorted.size()) + "_layers";
    }
    return plan;
}

SurgeryPlan reverse_replacement_plan(const ModelRef& base, const ModelRef& distilled,
                                     const std::vector<std::size_t>& layers,
                                     std::string_view selector) {
    return delta_plan(distilled, base, layers, selector);
}

std::vector<SurgeryPlan> delta_sweep_plans(const ModelRef& target, const ModelRef& source,
                                           std::string_view selector) {
    std::vector<SurgeryPlan> plans;
    for (std::size_t l = 0; l < target.config.n_layers; ++l) {
        plans.push_back(delta_plan(target, source, {l}, selector));
    }
    return plans;
}

std::vector<SurgeryPlan> accumulative_plans(const ModelRef& target, const ModelRef& source,
                                            ReplaceOrder order, std::string_view selector) {
    require_same_config(target, source);
    const std::size_t L = target.config.n_layers;
    const std::string tag = order == ReplaceOrder::Ascending ? "asc" : "desc";
    std::vector<SurgeryPlan> plans;
    std::vector<std::size_t> prefix;
    for (std::size_t k = 1; k <= L; ++k) {
        prefix.push_back(order == ReplaceOrder::Ascending ? k - 1 : L - k);
        SurgeryPlan plan;
        append_replacements(plan.edits, target, source, prefix, selector);
        plan.label = "accum_" + tag + "_K" + std::to_string(k);
        plans.push_back(std::move(plan));
    }
    return plans;
}

}  // namespace layerscope
