#include "layerscope/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "layerscope/errors.hpp"
#include "layerscope/model_io.hpp"
#include "layerscope/sweep.hpp"

namespace layerscope {

namespace fs = std::filesystem;

namespace {

constexpr const char* kCacheEnv = "LAYERSCOPE_CACHE";

// Scalar overrides shared by the sweep-style subcommands. An override only
// applies when its flag was given.
struct Overrides {
    std::string config;
    std::string target;
    std::vector<std::string> donors;
    std::string output_dir;
    std::string cache_dir;
    std::size_t parallelism = 1;
    std::vector<std::string> protocols;
    std::size_t max_new = 0;
    std::vector<std::string> stops;
    std::string pattern;
    std::string kind;
    std::string scope;
    std::size_t layer = 0;
    bool group_mode = false;
    std::string selector;
    std::string order;
    std::vector<std::string> plans;
    std::vector<std::string> formats;

    // Each flag name is registered once per subcommand; only one subcommand parses.
    std::map<std::string, std::vector<CLI::Option*>> opts;

    bool given(const std::string& name) const {
        const auto it = opts.find(name);
        if (it == opts.end()) return false;
        return std::any_of(it->second.begin(), it->second.end(), [](CLI::Option* opt) { return opt->count() > 0; });
    }

    CLI::Option*& slot(const std::string& name) { return opts[name].emplace_back(); }
};

void add_common(CLI::App* sub, Overrides& o, bool config_required) {
    auto* c = sub->add_option("-c,--config", o.config, "Sweep config file (.toml or .json)");
    if (config_required) c->required();
    o.slot("target") = sub->add_option("--target", o.target, "Target model bundle directory");
    o.slot("output-dir") = sub->add_option("--output-dir", o.output_dir, "Directory for report files");
    o.slot("cache-dir") = sub->add_option("--cache-dir", o.cache_dir,
                                          "Result cache directory (also LAYERSCOPE_CACHE)");
    o.slot("parallelism") = sub->add_option("--parallelism", o.parallelism, "Concurrent runs")
                                ->check(CLI::PositiveNumber);
    o.slot("protocol") = sub->add_option("--protocol", o.protocols,
                                         "Protocol to run (repeatable): loglikelihood_default, "
                                         "loglikelihood_continuation, generate_until");
    o.slot("max-new") = sub->add_option("--max-new", o.max_new, "generate_until token budget")
                            ->check(CLI::PositiveNumber);
    o.slot("stop") = sub->add_option("--stop", o.stops, "generate_until stop string (repeatable)");
    o.slot("pattern") = sub->add_option("--pattern", o.pattern,
                                        "Answer-extraction regex with one capture group");
}

void add_donor(CLI::App* sub, Overrides& o) {
    o.slot("donor") = sub->add_option("--donor", o.donors, "Donor model bundle directory (repeatable)");
}

void add_selector(CLI::App* sub, Overrides& o) {
    o.slot("selector") = sub->add_option("--selector", o.selector,
                                         "Tensor selector: attn.wo, block.all, full, ...");
}

void add_formats(CLI::App* sub, Overrides& o) {
    sub->add_option("--format", o.formats, "Report format (repeatable): csv, json, svg; default all");
}

void apply_overrides(SweepConfig& c, const Overrides& o) {
    if (o.given("target")) c.target = o.target;
    if (o.given("donor")) c.donors.assign(o.donors.begin(), o.donors.end());
    if (o.given("output-dir")) c.output_dir = o.output_dir;
    if (const char* env = std::getenv(kCacheEnv); env && *env) c.cache_dir = fs::path(env);
    if (o.given("cache-dir")) c.cache_dir = o.cache_dir;
    if (o.given("parallelism")) c.parallelism = o.parallelism;
    if (o.given("protocol")) {
        c.protocols.clear();
        for (const std::string& p : o.protocols) c.protocols.push_back(parse_protocol(p));
    }
    if (o.given("max-new")) c.decode.max_new = o.max_new;
    if (o.given("stop")) c.decode.stops = o.stops;
    if (o.given("pattern")) c.decode.pattern = o.pattern;
    if (o.given("kind")) c.kind = parse_sweep_kind(o.kind);
    if (o.given("scope")) c.scope = parse_prune_scope(o.scope);
    if (o.given("layer")) c.layer = o.layer;
    if (o.given("group-mode")) c.group_mode = o.group_mode;
    if (o.given("selector")) c.selector = o.selector;
    if (o.given("order")) c.order = parse_replace_order(o.order);
    if (o.given("plan")) c.plans.assign(o.plans.begin(), o.plans.end());
}

std::vector<EmitFormat> formats_of(const Overrides& o) {
    if (o.formats.empty()) return {EmitFormat::Csv, EmitFormat::Json, EmitFormat::Svg};
    std::vector<EmitFormat> out;
    for (const std::string& f : o.formats) out.push_back(parse_emit_format(f));
    return out;
}

void print_records(const SweepReport& report, std::ostream& err) {
    for (const RunRecord& r : report.records) {
        err << r.task << " " << to_string(r.protocol) << " " << r.plan << ": ";
        if (r.error) {
            err << "FAILED " << *r.error;
        } else {
            err << "mu=" << r.metrics->mu;
            if (const auto d = r.delta.delta.find(std::string(primary_metric(r.protocol))); d != r.delta.delta.end()) {
                err << " delta=" << d->second;
            }
        }
        err << (r.cache_hit ? " (cached)" : "") << "\n";
    }
}

int finish_sweep(const SweepConfig& config, const Overrides& o, bool verbose, std::ostream& out,
                 std::ostream& err) {
    const SweepReport report = run(config);
    if (verbose) print_records(report, err);
    const auto written = emit(report, formats_of(o), config.output_dir);
    out << report.records.size() << " runs, " << report.failed() << " failed, " << report.cache_hits()
        << " cache hits\n";
    for (const fs::path& p : written) out << "wrote " << p.string() << "\n";
    for (const RunRecord& r : report.records) {
        if (r.error) err << "run failed: " << r.task << " " << to_string(r.protocol) << " " << r.plan << ": " << *r.error << "\n";
    }
    return report.failed() ? kExitFailed : kExitOk;
}

SweepConfig config_from(const Overrides& o, SweepKind kind) {
    SweepConfig c = load_sweep_config(o.config);
    c.kind = kind;
    apply_overrides(c, o);
    validate(c);
    return c;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Layer and head surgery with evaluation sweeps for decoder-only transformers", "layerscope"};
    app.require_subcommand(1);
    app.fallthrough();
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Print one line per run to standard error");

    Overrides o;

    auto* eval = app.add_subcommand("eval", "Evaluate one plan (or the unmodified model) on one task");
    add_common(eval, o, false);
    add_donor(eval, o);
    std::string eval_task;
    std::string eval_task_kind;
    std::string eval_plan;
    o.slot("task") = eval->add_option("--task", eval_task, "Task JSONL file");
    eval->add_option("--task-kind", eval_task_kind, "Kind for string-gold lines: continuation or generation");
    eval->add_option("--plan", eval_plan, "Surgery plan JSON file; omitted means no edits");
    add_formats(eval, o);

    auto* layer_sweep = app.add_subcommand("layer-sweep", "Prune each layer in turn");
    add_common(layer_sweep, o, true);
    o.slot("scope") = layer_sweep->add_option("--scope", o.scope, "Prune scope: full, attn_only, mlp_only");
    add_formats(layer_sweep, o);

    auto* head_sweep = app.add_subcommand("head-sweep", "Mask each attention head (or KV group) of one layer");
    add_common(head_sweep, o, true);
    o.slot("layer") = head_sweep->add_option("--layer", o.layer, "Layer whose heads are swept");
    o.slot("group-mode") = head_sweep->add_flag("--group-mode", o.group_mode, "Mask whole KV groups");
    add_formats(head_sweep, o);

    auto* delta = app.add_subcommand("delta", "Replace each layer's selected tensor with the donor's");
    add_common(delta, o, true);
    add_donor(delta, o);
    add_selector(delta, o);
    add_formats(delta, o);

    auto* accumulate = app.add_subcommand("accumulate", "Replace a growing prefix of layers with the donor's");
    add_common(accumulate, o, true);
    add_donor(accumulate, o);
    add_selector(accumulate, o);
    o.slot("order") = accumulate->add_option("--order", o.order, "Replacement order: ascending or descending");
    add_formats(accumulate, o);

    auto* sweep = app.add_subcommand("sweep", "Run the sweep kind named in the config");
    add_common(sweep, o, true);
    add_donor(sweep, o);
    add_selector(sweep, o);
    o.slot("kind") = sweep->add_option("--kind", o.kind, "layer, head, delta, accumulative or explicit_plans");
    o.slot("plan") = sweep->add_option("--plan", o.plans, "Plan file for explicit_plans (repeatable)");
    add_formats(sweep, o);

    auto* gen_kv = app.add_subcommand("gen-kv", "Write a synthetic key-value retrieval task");
    KVGenConfig kv;
    std::string kv_format = "mc";
    std::string kv_out;
    gen_kv->add_option("--seed", kv.seed, "Generator seed")->capture_default_str();
    gen_kv->add_option("--n-items", kv.n_items, "Number of items")->capture_default_str();
    gen_kv->add_option("--n-pairs", kv.n_pairs, "Key-value pairs per item")->capture_default_str();
    gen_kv->add_option("--key-len", kv.key_len, "Key length")->capture_default_str();
    gen_kv->add_option("--value-len", kv.value_len, "Value length")->capture_default_str();
    gen_kv->add_option("--format", kv_format, "mc or generation")->capture_default_str();
    gen_kv->add_option("--n-choices", kv.n_choices, "Choices per mc item; 0 means min(4, n_pairs)")
        ->capture_default_str();
    gen_kv->add_option("-o,--output", kv_out, "Output JSONL path")->required();

    auto* plan_validate = app.add_subcommand("plan-validate", "Check a plan file against a model");
    std::string pv_plan;
    std::string pv_target;
    std::vector<std::string> pv_donors;
    plan_validate->add_option("--plan", pv_plan, "Surgery plan JSON file")->required();
    plan_validate->add_option("--target", pv_target, "Target model bundle directory")->required();
    plan_validate->add_option("--donor", pv_donors, "Donor model bundle directory (repeatable)");

    auto* report_cmd = app.add_subcommand("report", "Re-emit report files from a JSON report");
    std::string report_in;
    std::string report_out;
    report_cmd->add_option("-i,--input", report_in, "report.json from an earlier sweep")->required();
    report_cmd->add_option("--output-dir", report_out, "Directory for the re-emitted files")->required();
    add_formats(report_cmd, o);

    auto* gen_model = app.add_subcommand("gen-model", "Write a seeded random model bundle");
    ModelConfig mc;
    mc.n_layers = 4;
    mc.d_model = 32;
    mc.n_heads = 4;
    mc.n_kv_heads = 2;
    mc.d_ff = 64;
    mc.vocab_size = 384;
    mc.max_seq_len = 256;
    mc.tied_lm_head = true;
    std::uint64_t gm_seed = 0;
    bool gm_untied = false;
    std::string gm_out;
    gen_model->add_option("--seed", gm_seed, "Weight seed")->capture_default_str();
    gen_model->add_option("--n-layers", mc.n_layers, "Layers")->capture_default_str();
    gen_model->add_option("--d-model", mc.d_model, "Model width")->capture_default_str();
    gen_model->add_option("--n-heads", mc.n_heads, "Query heads")->capture_default_str();
    gen_model->add_option("--n-kv-heads", mc.n_kv_heads, "Key/value heads")->capture_default_str();
    gen_model->add_option("--d-ff", mc.d_ff, "MLP hidden width")->capture_default_str();
    gen_model->add_option("--vocab-size", mc.vocab_size, "Vocabulary size")->capture_default_str();
    gen_model->add_option("--max-seq-len", mc.max_seq_len, "Context limit")->capture_default_str();
    gen_model->add_option("--rope-theta", mc.rope_theta, "RoPE base")->capture_default_str();
    gen_model->add_flag("--untied", gm_untied, "Separate lm_head instead of the tied embedding");
    gen_model->add_option("-o,--output", gm_out, "Output bundle directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*eval) {
            SweepConfig c;
            if (!o.config.empty()) {
                c = load_sweep_config(o.config);
            } else if (!o.given("target") || !o.given("task")) {
                throw ConfigError("eval needs --config, or --target and --task");
            }
            c.kind = SweepKind::Plans;
            c.plans.clear();
            if (!eval_plan.empty()) c.plans.push_back(eval_plan);
            apply_overrides(c, o);
            if (o.given("task")) {
                TaskSpec t;
                t.path = eval_task;
                t.name = fs::path(eval_task).stem().string();
                if (!eval_task_kind.empty()) t.kind = parse_task_kind(eval_task_kind);
                c.tasks = {t};
            }
            if (c.tasks.size() != 1) throw ConfigError("eval takes exactly one task; pass --task to choose");
            if (c.protocols.empty()) c.protocols = {Protocol::LoglikelihoodDefault};
            validate(c);
            const SweepReport report = run(c);
            if (verbose) print_records(report, err);
            out << report_to_json(report).dump(2) << "\n";
            if (o.given("output-dir")) emit(report, formats_of(o), c.output_dir);
            for (const RunRecord& r : report.records) {
                if (r.error) err << "run failed: " << r.plan << ": " << *r.error << "\n";
            }
            return report.failed() ? kExitFailed : kExitOk;
        }
        if (*layer_sweep) return finish_sweep(config_from(o, SweepKind::Layer), o, verbose, out, err);
        if (*head_sweep) return finish_sweep(config_from(o, SweepKind::Head), o, verbose, out, err);
        if (*delta) return finish_sweep(config_from(o, SweepKind::Delta), o, verbose, out, err);
        if (*accumulate) return finish_sweep(config_from(o, SweepKind::Accumulative), o, verbose, out, err);
        if (*sweep) {
            SweepConfig c = load_sweep_config(o.config);
            apply_overrides(c, o);
            validate(c);
            return finish_sweep(c, o, verbose, out, err);
        }
        if (*gen_kv) {
            kv.format = parse_task_kind(kv_format);
            write_kv_task(kv, kv_out);
            out << "wrote " << kv_out << "\n";
            return kExitOk;
        }
        if (*plan_validate) {
            const ModelBundle target = load_bundle_dir(pv_target);
            std::map<std::string, ModelConfig> donors;
            for (const std::string& d : pv_donors) {
                const ModelBundle b = load_bundle_dir(d);
                donors.emplace(b.model_id, b.config);
            }
            const SurgeryPlan plan = load_plan_file(pv_plan);
            const auto violations = validate_plan(plan, target.config, donors);
            if (!violations.empty()) {
                out << "invalid plan '" << plan.label << "':\n" << format_violations(violations) << "\n";
                return kExitFailed;
            }
            out << "valid plan '" << plan.label << "': " << plan.edits.size() << " edits, hash " << plan_hash(plan)
                << "\n";
            return kExitOk;
        }
        if (*report_cmd) {
            const SweepReport report = load_report(report_in);
            for (const fs::path& p : emit(report, formats_of(o), report_out)) out << "wrote " << p.string() << "\n";
            return kExitOk;
        }
        if (*gen_model) {
            mc.tied_lm_head = !gm_untied;
            if (mc.n_heads == 0 || mc.d_model % mc.n_heads != 0) {
                throw ConfigError("--d-model must be a multiple of --n-heads");
            }
            mc.d_head = mc.d_model / mc.n_heads;
            mc.validate();
            if (mc.vocab_size < demo_vocab_min_size()) {
                throw ConfigError("--vocab-size must be at least " + std::to_string(demo_vocab_min_size()) +
                                  " to hold the demo vocabulary");
            }
            const ModelBundle bundle = make_bundle(mc, random_weights(mc, gm_seed), demo_vocab(mc.vocab_size));
            save_bundle(bundle, gm_out);
            out << "wrote " << gm_out << " (model_id " << bundle.model_id << ")\n";
            return kExitOk;
        }
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailed;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailed;
    }
    return kExitUsage;
}

}  // namespace layerscope
