#include "layerscope/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include <toml.hpp>

#include "layerscope/errors.hpp"
#include "layerscope/json_util.hpp"
#include "layerscope/sha256.hpp"

namespace layerscope {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(SweepKind kind) {
    switch (kind) {
        case SweepKind::Layer: return "layer";
        case SweepKind::Head: return "head";
        case SweepKind::Delta: return "delta";
        case SweepKind::Accumulative: return "accumulative";
        case SweepKind::Plans: return "explicit_plans";
    }
    return "layer";
}

SweepKind parse_sweep_kind(std::string_view text) {
    if (text == "layer") return SweepKind::Layer;
    if (text == "head") return SweepKind::Head;
    if (text == "delta") return SweepKind::Delta;
    if (text == "accumulative") return SweepKind::Accumulative;
    if (text == "explicit_plans" || text == "explicit-plans" || text == "plans") return SweepKind::Plans;
    throw ConfigError("unknown sweep kind '" + std::string(text) +
                      "' (expected layer, head, delta, accumulative or explicit_plans)");
}

// ---- config ----------------------------------------------------------------

namespace {

const json& expect(const json& v, bool ok, const std::string& where, const char* what) {
    if (!ok) throw ConfigError(where + " must be " + what);
    return v;
}

std::string get_string(const json& v, const std::string& where) {
    return expect(v, v.is_string(), where, "a string").get<std::string>();
}

std::size_t get_count(const json& v, const std::string& where) {
    return expect(v, is_index(v), where, "a non-negative integer").get<std::size_t>();
}

bool get_bool(const json& v, const std::string& where) {
    return expect(v, v.is_boolean(), where, "true or false").get<bool>();
}

std::vector<std::string> get_strings(const json& v, const std::string& where) {
    expect(v, v.is_array(), where, "an array of strings");
    std::vector<std::string> out;
    for (const json& e : v) out.push_back(get_string(e, where + "[]"));
    return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

FewShotConfig few_shot_from_json(const json& j, const fs::path& base, const std::string& where) {
    expect(j, j.is_object(), where, "a table");
    FewShotConfig f;
    for (const auto& [key, v] : j.items()) {
        const std::string at = where + "." + key;
        if (key == "k") f.k = get_count(v, at);
        else if (key == "exemplars") f.exemplar_path = resolve(base, get_string(v, at));
        else if (key == "delimiter") f.delimiter = get_string(v, at);
        else if (key == "answer_separator") f.answer_separator = get_string(v, at);
        else if (key == "seed") f.seed = expect(v, is_index(v), at, "a non-negative integer").get<std::uint64_t>();
        else throw ConfigError(where + " has unknown field '" + key + "'");
    }
    return f;
}

TaskSpec task_from_json(const json& j, const fs::path& base, const std::string& where) {
    expect(j, j.is_object(), where, "a table");
    TaskSpec t;
    for (const auto& [key, v] : j.items()) {
        const std::string at = where + "." + key;
        if (key == "name") t.name = get_string(v, at);
        else if (key == "path") t.path = resolve(base, get_string(v, at));
        else if (key == "kv_gen") t.kv_gen = kv_config_from_json(v);
        else if (key == "kind") t.kind = parse_task_kind(get_string(v, at));
        else if (key == "few_shot") t.few_shot = few_shot_from_json(v, base, at);
        else if (key == "retrieval_mode") t.retrieval_mode = get_bool(v, at);
        else throw ConfigError(where + " has unknown field '" + key + "'");
    }
    if (t.path.has_value() == t.kv_gen.has_value()) {
        throw ConfigError(where + " needs exactly one of 'path' or 'kv_gen'");
    }
    if (t.name.empty()) {
        t.name = t.path ? t.path->stem().string() : "kv_seed" + std::to_string(t.kv_gen->seed);
    }
    return t;
}

DecodeParams decode_from_json(const json& j) {
    expect(j, j.is_object(), "decode", "a table");
    DecodeParams d;
    for (const auto& [key, v] : j.items()) {
        const std::string at = "decode." + key;
        if (key == "max_new") d.max_new = get_count(v, at);
        else if (key == "stops") d.stops = get_strings(v, at);
        else if (key == "pattern") d.pattern = get_string(v, at);
        else throw ConfigError("decode has unknown field '" + key + "'");
    }
    return d;
}

json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        json out = json::object();
        for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
        return out;
    }
    if (const auto* a = node.as_array()) {
        json out = json::array();
        for (const auto& v : *a) out.push_back(toml_to_json(v));
        return out;
    }
    if (const auto* s = node.as_string()) return s->get();
    if (const auto* b = node.as_boolean()) return b->get();
    if (const auto* f = node.as_floating_point()) return f->get();
    if (const auto* i = node.as_integer()) {
        const std::int64_t v = i->get();
        return v >= 0 ? json(static_cast<std::uint64_t>(v)) : json(v);
    }
    throw ConfigError("unsupported TOML value (dates and times are not config values)");
}

}  // namespace

SweepConfig sweep_config_from_json(const json& j, const fs::path& base) {
    if (!j.is_object()) throw ConfigError("sweep config must be an object");
    SweepConfig c;
    bool has_target = false;
    for (const auto& [key, v] : j.items()) {
        if (key == "target") {
            c.target = resolve(base, get_string(v, key));
            has_target = true;
        } else if (key == "donors") {
            for (const std::string& d : get_strings(v, key)) c.donors.push_back(resolve(base, d));
        } else if (key == "kind") {
            c.kind = parse_sweep_kind(get_string(v, key));
        } else if (key == "scope") {
            c.scope = parse_prune_scope(get_string(v, key));
        } else if (key == "layer") {
            c.layer = get_count(v, key);
        } else if (key == "group_mode") {
            c.group_mode = get_bool(v, key);
        } else if (key == "selector") {
            c.selector = get_string(v, key);
        } else if (key == "order") {
            c.order = parse_replace_order(get_string(v, key));
        } else if (key == "plans") {
            for (const std::string& p : get_strings(v, key)) c.plans.push_back(resolve(base, p));
        } else if (key == "tasks") {
            expect(v, v.is_array(), key, "an array of tables");
            for (std::size_t i = 0; i < v.size(); ++i) {
                c.tasks.push_back(task_from_json(v[i], base, "tasks[" + std::to_string(i) + "]"));
            }
        } else if (key == "protocols") {
            for (const std::string& p : get_strings(v, key)) c.protocols.push_back(parse_protocol(p));
        } else if (key == "decode") {
            c.decode = decode_from_json(v);
        } else if (key == "output_dir") {
            c.output_dir = resolve(base, get_string(v, key));
        } else if (key == "cache_dir") {
            c.cache_dir = resolve(base, get_string(v, key));
        } else if (key == "parallelism") {
            c.parallelism = get_count(v, key);
        } else {
            throw ConfigError("sweep config has unknown field '" + key + "'");
        }
    }
    if (!has_target) throw ConfigError("sweep config is missing 'target'");
    return c;
}

SweepConfig load_sweep_config(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    if (!in) throw ConfigError("cannot read config file: " + path.string());
    const std::string text = buf.str();
    json j;
    if (path.extension() == ".toml") {
        try {
            j = toml_to_json(toml::parse(text, path.string()));
        } catch (const toml::parse_error& e) {
            std::ostringstream msg;
            msg << path.string() << ":" << e.source().begin.line << ":" << e.source().begin.column
                << ": " << e.description();
            throw ConfigError(msg.str());
        }
    } else {
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }
    return sweep_config_from_json(j, path.parent_path());
}

void validate(const SweepConfig& c) {
    if (c.tasks.empty()) throw ConfigError("sweep needs at least one task");
    if (c.protocols.empty()) throw ConfigError("sweep needs at least one protocol");
    if (c.parallelism == 0) throw ConfigError("parallelism must be >= 1");
    std::set<std::string> names;
    for (const TaskSpec& t : c.tasks) {
        if (!names.insert(t.name).second) throw ConfigError("duplicate task name '" + t.name + "'");
    }
    std::set<Protocol> seen;
    for (Protocol p : c.protocols) {
        if (!seen.insert(p).second) {
            throw ConfigError("protocol '" + std::string(to_string(p)) + "' listed twice");
        }
    }
    if (seen.count(Protocol::GenerateUntil)) {
        if (c.decode.max_new == 0) throw ConfigError("decode.max_new must be >= 1");
        compile_answer_pattern(c.decode.pattern);
    }
    switch (c.kind) {
        case SweepKind::Head:
            if (!c.layer) throw ConfigError("head sweep needs 'layer'");
            break;
        case SweepKind::Delta:
        case SweepKind::Accumulative:
            if (c.donors.empty()) {
                throw ConfigError(std::string(to_string(c.kind)) + " sweep needs a donor model");
            }
            break;
        case SweepKind::Plans:  // no plans means baseline only
        case SweepKind::Layer: break;
    }
}

// ---- tasks -----------------------------------------------------------------

PreparedTask prepare_task(const TaskSpec& spec) {
    PreparedTask t;
    t.name = spec.name;
    t.items = spec.kv_gen ? generate_kv_retrieval(*spec.kv_gen) : load_task(*spec.path, spec.kind);
    if (t.items.empty()) throw TaskError("task '" + spec.name + "' has no items");
    const std::vector<TaskItem> exemplars =
        spec.few_shot.k > 0 ? load_exemplars(spec.few_shot) : std::vector<TaskItem>{};
    for (TaskItem& item : t.items) {
        item.context = assemble_prompt(item, spec.few_shot, exemplars, spec.retrieval_mode);
    }
    t.content_hash = sha256_hex(items_to_jsonl(t.items));
    return t;
}

// ---- grid ------------------------------------------------------------------

std::vector<GridEntry> plan_grid(const SweepConfig& config, const ModelRef& target,
                                 const std::vector<ModelRef>& donors) {
    validate(config);
    const ModelConfig& mc = target.config;

    struct Variant {
        SurgeryPlan plan;
        std::optional<std::size_t> layer;
        std::optional<std::size_t> head;
    };
    std::vector<Variant> variants;
    switch (config.kind) {
        case SweepKind::Layer: {
            auto plans = single_layer_sweep_plans(mc, config.scope);
            for (std::size_t l = 0; l < plans.size(); ++l) variants.push_back({std::move(plans[l]), l, {}});
            break;
        }
        case SweepKind::Head: {
            if (*config.layer >= mc.n_layers) {
                throw ConfigError("head sweep layer " + std::to_string(*config.layer) + " out of range (model has " +
                                  std::to_string(mc.n_layers) + " layers)");
            }
            auto plans = head_sweep_plans(mc, *config.layer, config.group_mode);
            for (std::size_t h = 0; h < plans.size(); ++h) {
                variants.push_back({std::move(plans[h]), config.layer, h});
            }
            break;
        }
        case SweepKind::Delta: {
            auto plans = delta_sweep_plans(target, donors.at(0), config.selector);
            for (std::size_t l = 0; l < plans.size(); ++l) variants.push_back({std::move(plans[l]), l, {}});
            break;
        }
        case SweepKind::Accumulative: {
            auto plans = accumulative_plans(target, donors.at(0), config.order, config.selector);
            // layer carries k, the number of replaced layers
            for (std::size_t k = 0; k < plans.size(); ++k) variants.push_back({std::move(plans[k]), k + 1, {}});
            break;
        }
        case SweepKind::Plans:
            for (const fs::path& p : config.plans) variants.push_back({load_plan_file(p), {}, {}});
            break;
    }

    std::map<std::string, ModelConfig> donor_configs;
    for (const ModelRef& d : donors) donor_configs.emplace(d.id, d.config);
    std::set<std::string> labels;
    for (const Variant& v : variants) {
        const auto violations = validate_plan(v.plan, mc, donor_configs);
        if (!violations.empty()) {
            throw PlanError("plan '" + v.plan.label + "' is invalid: " + format_violations(violations));
        }
        if (v.plan.label == kBaselineLabel) throw PlanError("plan label 'baseline' is reserved");
        if (!labels.insert(v.plan.label).second) throw PlanError("duplicate plan label '" + v.plan.label + "'");
    }

    std::vector<GridEntry> grid;
    for (std::size_t t = 0; t < config.tasks.size(); ++t) {
        for (Protocol p : config.protocols) {
            GridEntry base;
            base.plan.label = std::string(kBaselineLabel);
            base.baseline = true;
            base.task_index = t;
            base.protocol = p;
            grid.push_back(std::move(base));
            for (const Variant& v : variants) {
                grid.push_back({v.plan, false, v.layer, v.head, t, p});
            }
        }
    }
    return grid;
}

// ---- cache -----------------------------------------------------------------

std::string cache_key(std::string_view target_id, const SurgeryPlan& plan, std::string_view task_hash,
                      Protocol protocol, const DecodeParams& decode) {
    Sha256 h;
    h.update_field("layerscope.cache/1");
    h.update_field(target_id);
    h.update_field(canonical_plan_bytes(plan));
    h.update_field(task_hash);
    h.update_field(to_string(protocol));
    h.update_field(decode_params_to_json(decode).dump());
    return h.hex_digest();
}

fs::path ResultCache::path_for(const std::string& key) const {
    return root_ / key.substr(0, 2) / (key + ".json");
}

std::optional<ProtocolMetrics> ResultCache::get(const std::string& key) const {
    std::ifstream in(path_for(key), std::ios::binary);
    if (!in) return std::nullopt;
    try {
        const json j = json::parse(in);
        if (j.at("key").get<std::string>() != key) return std::nullopt;
        return protocol_metrics_from_json(j.at("metrics"));
    } catch (const std::exception&) {
        return std::nullopt;  // unreadable entries count as misses and get rewritten
    }
}

void ResultCache::put(const std::string& key, const ProtocolMetrics& metrics) const {
    static std::atomic<std::uint64_t> counter{0};
    const fs::path dest = path_for(key);
    std::error_code ec;
    fs::create_directories(dest.parent_path(), ec);
    if (ec) throw IoError("cannot create cache directory " + dest.parent_path().string() + ": " + ec.message());
    std::ostringstream suffix;
    suffix << ".tmp." << std::this_thread::get_id() << "." << counter.fetch_add(1);
    const fs::path tmp = dest.string() + suffix.str();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << json{{"key", key}, {"metrics", to_json(metrics)}}.dump() << '\n';
        if (!out) throw IoError("cannot write cache file " + tmp.string());
    }
    fs::rename(tmp, dest, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move cache file into place at " + dest.string());
    }
}

// ---- run -------------------------------------------------------------------

std::size_t SweepReport::failed() const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const RunRecord& r) { return r.error.has_value(); }));
}

std::size_t SweepReport::cache_hits() const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const RunRecord& r) { return r.cache_hit; }));
}

namespace {

// Empty when mu agrees with the per-item flags.
std::optional<std::string> consistency_problem(const ProtocolMetrics& m) {
    if (m.per_item.size() != m.n_items) {
        return "per-item records (" + std::to_string(m.per_item.size()) + ") do not match n_items (" +
               std::to_string(m.n_items) + ")";
    }
    const auto hits = std::count_if(m.per_item.begin(), m.per_item.end(), [](const ItemRecord& r) { return r.correct; });
    const double expected = static_cast<double>(hits) / static_cast<double>(m.n_items);
    if (std::abs(expected - m.mu) > 1e-12) {
        return "mu " + std::to_string(m.mu) + " disagrees with per-item correctness " + std::to_string(expected);
    }
    return std::nullopt;
}

auto sort_key(const RunRecord& r, std::size_t index) {
    return std::make_tuple(r.task, std::string(to_string(r.protocol)), !r.baseline(), r.layer, r.head, index);
}

}  // namespace

SweepReport run(const SweepConfig& config) {
    validate(config);
    auto target = std::make_shared<const ModelBundle>(load_bundle_dir(config.target));
    DonorMap donor_map;
    std::vector<ModelRef> donor_refs;
    SweepReport report;
    report.kind = config.kind;
    report.target_id = target->model_id;
    for (const fs::path& d : config.donors) {
        auto bundle = std::make_shared<const ModelBundle>(load_bundle_dir(d));
        donor_refs.push_back(ref(*bundle));
        report.donor_ids.push_back(bundle->model_id);
        donor_map.emplace(bundle->model_id, std::move(bundle));
    }

    std::vector<PreparedTask> tasks;
    for (const TaskSpec& spec : config.tasks) tasks.push_back(prepare_task(spec));
    const std::vector<GridEntry> grid = plan_grid(config, ref(*target), donor_refs);
    const std::optional<ResultCache> cache =
        config.cache_dir ? std::optional<ResultCache>(ResultCache(*config.cache_dir)) : std::nullopt;

    std::vector<RunRecord> records(grid.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1)) {
            const GridEntry& e = grid[i];
            const PreparedTask& task = tasks[e.task_index];
            RunRecord& r = records[i];
            r.plan = e.plan.label;
            r.plan_hash = plan_hash(e.plan);
            r.layer = e.layer;
            r.head = e.head;
            r.task = task.name;
            r.protocol = e.protocol;
            const auto start = std::chrono::steady_clock::now();
            try {
                const std::string key = cache_key(target->model_id, e.plan, task.content_hash, e.protocol, config.decode);
                if (cache) r.metrics = cache->get(key);
                r.cache_hit = r.metrics.has_value();
                if (!r.metrics) {
                    const SurgiedModel model = apply(target, donor_map, e.plan);
                    r.metrics = evaluate(model, e.protocol, task.items, config.decode, task.name);
                    if (cache) cache->put(key, *r.metrics);
                }
                if (auto problem = consistency_problem(*r.metrics)) {
                    r.error = "consistency check failed: " + *problem;
                }
            } catch (const std::exception& ex) {
                r.error = ex.what();
            }
            if (r.error) r.metrics.reset();
            r.wall_time_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(config.parallelism, grid.size()));
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();

    // Deltas against the baseline of the same (task, protocol).
    std::map<std::pair<std::string, Protocol>, const RunRecord*> baselines;
    for (const RunRecord& r : records) {
        if (r.baseline()) baselines[{r.task, r.protocol}] = &r;
    }
    for (RunRecord& r : records) {
        if (!r.metrics) continue;
        const RunRecord* b = baselines.at({r.task, r.protocol});
        if (!b->metrics) continue;
        try {
            r.delta = compute_delta(*b->metrics, *r.metrics);
        } catch (const ComparisonError& ex) {
            r.error = ex.what();
        }
    }

    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return sort_key(records[a], a) < sort_key(records[b], b);
    });
    for (std::size_t i : order) report.records.push_back(std::move(records[i]));
    return report;
}

// ---- report JSON -----------------------------------------------------------

namespace {

json optional_index(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

std::optional<std::size_t> read_index(const json& v) {
    if (v.is_null()) return std::nullopt;
    return v.get<std::size_t>();
}

}  // namespace

json report_to_json(const SweepReport& report) {
    json records = json::array();
    for (const RunRecord& r : report.records) {
        records.push_back({{"task", r.task},
                           {"protocol", std::string(to_string(r.protocol))},
                           {"plan", r.plan},
                           {"plan_hash", r.plan_hash},
                           {"layer", optional_index(r.layer)},
                           {"head", optional_index(r.head)},
                           {"metrics", r.metrics ? to_json(*r.metrics) : json(nullptr)},
                           {"delta", r.delta.delta},
                           {"error", r.error ? json(*r.error) : json(nullptr)},
                           {"cache_hit", r.cache_hit},
                           {"wall_time_ms", r.wall_time_ms}});
    }
    return {{"kind", std::string(to_string(report.kind))},
            {"target", report.target_id},
            {"donors", report.donor_ids},
            {"records", std::move(records)}};
}

SweepReport report_from_json(const json& j) {
    try {
        SweepReport report;
        report.kind = parse_sweep_kind(j.at("kind").get<std::string>());
        report.target_id = j.at("target").get<std::string>();
        report.donor_ids = j.at("donors").get<std::vector<std::string>>();
        for (const json& rj : j.at("records")) {
            RunRecord r;
            r.task = rj.at("task").get<std::string>();
            r.protocol = parse_protocol(rj.at("protocol").get<std::string>());
            r.plan = rj.at("plan").get<std::string>();
            r.plan_hash = rj.at("plan_hash").get<std::string>();
            r.layer = read_index(rj.at("layer"));
            r.head = read_index(rj.at("head"));
            if (!rj.at("metrics").is_null()) r.metrics = protocol_metrics_from_json(rj.at("metrics"));
            r.delta.delta = rj.at("delta").get<std::map<std::string, double>>();
            if (!rj.at("error").is_null()) r.error = rj.at("error").get<std::string>();
            r.cache_hit = rj.at("cache_hit").get<bool>();
            r.wall_time_ms = rj.at("wall_time_ms").get<double>();
            report.records.push_back(std::move(r));
        }
        return report;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed report JSON: ") + e.what());
    }
}

SweepReport load_report(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("report file not found: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return report_from_json(j);
}

// ---- CSV -------------------------------------------------------------------

namespace {

std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string index_text(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string(); }

}  // namespace

std::string report_csv(const SweepReport& report) {
    std::string out = "task,protocol,plan,layer,head,metric,value,delta,n_items,cache_hit\n";
    for (const RunRecord& r : report.records) {
        const std::string prefix = csv_field(r.task) + "," + std::string(to_string(r.protocol)) + "," +
                                   csv_field(r.plan) + "," + index_text(r.layer) + "," + index_text(r.head) + ",";
        const std::string hit = r.cache_hit ? "true" : "false";
        if (!r.metrics) {
            out += prefix + "error,,,," + hit + "\n";
            continue;
        }
        for (const auto& [metric, value] : r.metrics->metrics) {
            const auto d = r.delta.delta.find(metric);
            out += prefix + csv_field(metric) + "," + format_number(value) + "," +
                   (d == r.delta.delta.end() ? std::string() : format_number(d->second)) + "," +
                   std::to_string(r.metrics->n_items) + "," + hit + "\n";
        }
    }
    return out;
}

// ---- SVG -------------------------------------------------------------------

namespace {

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fixed(double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << v;
    return s.str();
}

struct Point {
    std::string tick;
    double value;
    double delta;
};

std::string render_chart(const ChartKey& key, const std::vector<Point>& points, std::string_view axis) {
    constexpr double W = 640, H = 360, left = 56, right = 24, top = 40, bottom = 48;
    const double pw = W - left - right;
    const double ph = H - top - bottom;
    // Fixed y range: metrics live in [0, 1], deltas in [-1, 1].
    auto y = [&](double v) { return top + (1.0 - v) / 2.0 * ph; };
    auto x = [&](std::size_t i) {
        return points.size() == 1 ? left + pw / 2 : left + pw * static_cast<double>(i) / static_cast<double>(points.size() - 1);
    };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << " " << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
      << xml_escape(key.task + " / " + std::string(to_string(key.protocol)) + " / " + key.metric) << "</text>\n";
    for (double v : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
        s << "<line class=\"ygrid\" x1=\"" << left << "\" x2=\"" << W - right << "\" y1=\"" << fixed(y(v)) << "\" y2=\""
          << fixed(y(v)) << "\" stroke=\"" << (v == 0.0 ? "#888" : "#ddd") << "\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << fixed(y(v) + 4) << "\" text-anchor=\"end\">" << fixed(v)
          << "</text>\n";
    }
    for (std::size_t i = 0; i < points.size(); ++i) {
        s << "<text class=\"xtick\" x=\"" << fixed(x(i)) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">"
          << xml_escape(points[i].tick) << "</text>\n";
    }
    s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << axis << "</text>\n";

    auto series = [&](const char* cls, const char* colour, auto get) {
        s << "<polyline class=\"" << cls << "\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < points.size(); ++i) {
            s << (i ? " " : "") << fixed(x(i)) << "," << fixed(y(get(points[i])));
        }
        s << "\"/>\n";
        for (std::size_t i = 0; i < points.size(); ++i) {
            s << "<circle class=\"" << cls << "-pt\" cx=\"" << fixed(x(i)) << "\" cy=\"" << fixed(y(get(points[i])))
              << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
        }
    };
    series("mu", "#1f77b4", [](const Point& p) { return p.value; });
    series("delta", "#d62728", [](const Point& p) { return p.delta; });
    s << "<text x=\"" << W - right - 90 << "\" y=\"" << top - 8 << "\" fill=\"#1f77b4\">&#956;</text>\n";
    s << "<text x=\"" << W - right - 50 << "\" y=\"" << top - 8 << "\" fill=\"#d62728\">&#916;&#956;</text>\n";
    s << "</svg>\n";
    return s.str();
}

}  // namespace

std::vector<std::pair<ChartKey, std::string>> report_svgs(const SweepReport& report) {
    // Keyed in record order, which is already sorted.
    std::vector<std::pair<ChartKey, std::vector<Point>>> charts;
    const char* axis = report.kind == SweepKind::Head           ? "head"
                       : report.kind == SweepKind::Accumulative ? "replaced layers (k)"
                       : report.kind == SweepKind::Plans        ? "plan"
                                                                : "layer";
    for (const RunRecord& r : report.records) {
        if (r.baseline() || !r.metrics) continue;
        for (const auto& [metric, value] : r.metrics->metrics) {
            auto it = std::find_if(charts.begin(), charts.end(), [&](const auto& c) {
                return c.first.task == r.task && c.first.protocol == r.protocol && c.first.metric == metric;
            });
            if (it == charts.end()) {
                charts.push_back({ChartKey{r.task, r.protocol, metric}, {}});
                it = charts.end() - 1;
            }
            const auto d = r.delta.delta.find(metric);
            const std::string tick = r.head ? std::to_string(*r.head) : r.layer ? std::to_string(*r.layer) : r.plan;
            it->second.push_back({tick, value, d == r.delta.delta.end() ? 0.0 : d->second});
        }
    }
    std::vector<std::pair<ChartKey, std::string>> out;
    for (const auto& [key, points] : charts) out.emplace_back(key, render_chart(key, points, axis));
    return out;
}

// ---- emit ------------------------------------------------------------------

EmitFormat parse_emit_format(std::string_view text) {
    if (text == "csv") return EmitFormat::Csv;
    if (text == "json") return EmitFormat::Json;
    if (text == "svg") return EmitFormat::Svg;
    throw ConfigError("unknown report format '" + std::string(text) + "' (expected csv, json or svg)");
}

namespace {

std::string safe_name(std::string_view s) {
    std::string out;
    for (char c : s) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                        c == '_' || c == '.';
        out += ok ? c : '_';
    }
    return out;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    out.close();
    if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace

std::vector<fs::path> emit(const SweepReport& report, const std::vector<EmitFormat>& formats,
                           const fs::path& out_dir) {
    if (report.records.empty()) throw Error("empty report: nothing to emit");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    std::vector<fs::path> written;
    for (EmitFormat f : formats) {
        switch (f) {
            case EmitFormat::Csv:
                write_file(out_dir / "report.csv", report_csv(report));
                written.push_back(out_dir / "report.csv");
                break;
            case EmitFormat::Json:
                write_file(out_dir / "report.json", report_to_json(report).dump(2) + "\n");
                written.push_back(out_dir / "report.json");
                break;
            case EmitFormat::Svg:
                for (const auto& [key, svg] : report_svgs(report)) {
                    const fs::path p = out_dir / (safe_name(key.task) + "__" + std::string(to_string(key.protocol)) +
                                                  "__" + safe_name(key.metric) + ".svg");
                    write_file(p, svg);
                    written.push_back(p);
                }
                break;
        }
    }
    return written;
}

}  // namespace layerscope
