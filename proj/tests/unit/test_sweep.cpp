#include <doctest.h>

#include <algorithm>
#include <regex>

#include "layerscope/errors.hpp"
#include "layerscope/sweep.hpp"
#include "models.hpp"

using namespace layerscope;
namespace fs = std::filesystem;

namespace {

void save_model(const fs::path& dir, std::uint64_t seed) {
    const ModelConfig c = fixtures::small_config();
    save_bundle(make_bundle(c, random_weights(c, seed), Vocab::bytes_only(c.vocab_size)), dir);
}

TaskSpec kv_task(std::uint64_t seed, std::size_t n_items = 4) {
    TaskSpec t;
    KVGenConfig g;
    g.seed = seed;
    g.n_items = n_items;
    g.n_pairs = 2;
    g.key_len = 3;
    g.value_len = 3;
    t.kv_gen = g;
    t.name = "kv_seed" + std::to_string(seed);
    return t;
}

// Target and donor bundles in a scratch directory, plus a layer-sweep config.
struct Env {
    fixtures::TempDir dir;
    SweepConfig config;

    Env() {
        save_model(dir / "target", 1);
        save_model(dir / "donor", 2);
        config.target = dir / "target";
        config.tasks = {kv_task(7)};
        config.protocols = {Protocol::LoglikelihoodDefault};
        config.output_dir = dir / "out";
        config.cache_dir = dir / "cache";
    }
};

ModelRef small_ref(const std::string& id) { return ModelRef{id, fixtures::small_config()}; }

nlohmann::json stable(const SweepReport& r) {
    nlohmann::json j = report_to_json(r);
    for (auto& rec : j.at("records")) {
        for (std::string_view f : kVolatileFields) rec.erase(std::string(f));
    }
    return j;
}

std::size_t count(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
    return n;
}

}  // namespace

TEST_CASE("config from JSON resolves paths and rejects unknown keys") {
    const nlohmann::json j = {
        {"target", "models/a"},
        {"donors", {"models/b"}},
        {"kind", "head"},
        {"layer", 2},
        {"group_mode", true},
        {"tasks", {{{"path", "t/qa.jsonl"}, {"few_shot", {{"k", 2}, {"exemplars", "t/ex.jsonl"}}}}}},
        {"protocols", {"generate_until", "loglikelihood_default"}},
        {"decode", {{"max_new", 5}, {"stops", {"\n\n"}}, {"pattern", "(\\d+)"}}},
        {"parallelism", 3}};
    const SweepConfig c = sweep_config_from_json(j, "/base");
    CHECK(c.target == fs::path("/base/models/a"));
    CHECK(c.donors.at(0) == fs::path("/base/models/b"));
    CHECK(c.kind == SweepKind::Head);
    CHECK(c.layer == 2u);
    CHECK(c.group_mode);
    CHECK(c.tasks.at(0).name == "qa");
    CHECK(c.tasks.at(0).path == fs::path("/base/t/qa.jsonl"));
    CHECK(c.tasks.at(0).few_shot.k == 2);
    CHECK(c.protocols.size() == 2);
    CHECK(c.decode.max_new == 5);
    CHECK(c.decode.stops == std::vector<std::string>{"\n\n"});
    CHECK(c.parallelism == 3);
    CHECK_FALSE(c.cache_dir.has_value());

    nlohmann::json bad = j;
    bad["paralellism"] = 2;
    CHECK_THROWS_WITH_AS(sweep_config_from_json(bad, "/base"), doctest::Contains("paralellism"), ConfigError);
    bad = j;
    bad["kind"] = "diagonal";
    CHECK_THROWS_AS(sweep_config_from_json(bad, "/base"), ConfigError);
}

TEST_CASE("TOML and JSON configs load to the same sweep") {
    fixtures::TempDir dir;
    fixtures::write_file(dir / "s.toml", R"(target = "m"
kind = "accumulative"
donors = ["d"]
order = "descending"
protocols = ["loglikelihood_continuation"]
cache_dir = "c"

[[tasks]]
kv_gen = { seed = 3, n_items = 2 }
)");
    fixtures::write_file(dir / "s.json", R"({"target": "m", "kind": "accumulative", "donors": ["d"],
"order": "descending", "protocols": ["loglikelihood_continuation"], "cache_dir": "c",
"tasks": [{"kv_gen": {"seed": 3, "n_items": 2}}]})");
    const SweepConfig t = load_sweep_config(dir / "s.toml");
    const SweepConfig j = load_sweep_config(dir / "s.json");
    CHECK(t.target == dir / "m");
    CHECK(t.target == j.target);
    CHECK(t.order == ReplaceOrder::Descending);
    CHECK(t.order == j.order);
    CHECK(t.cache_dir == j.cache_dir);
    CHECK(t.tasks.at(0).name == "kv_seed3");
    CHECK(t.tasks.at(0).kv_gen->n_items == 2);
    CHECK(j.tasks.at(0).kv_gen->n_items == 2);
    CHECK_THROWS_WITH_AS(load_sweep_config(dir / "missing.toml"), doctest::Contains("missing.toml"), ConfigError);
    fixtures::write_file(dir / "broken.toml", "target = \n");
    CHECK_THROWS_AS(load_sweep_config(dir / "broken.toml"), ConfigError);
}

TEST_CASE("validate rejects inconsistent sweeps") {
    SweepConfig c;
    c.target = "m";
    c.tasks = {kv_task(1)};
    c.protocols = {Protocol::LoglikelihoodDefault};
    CHECK_NOTHROW(validate(c));

    SweepConfig bad = c;
    bad.tasks.clear();
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = c;
    bad.protocols.clear();
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = c;
    bad.kind = SweepKind::Head;
    CHECK_THROWS_WITH_AS(validate(bad), doctest::Contains("layer"), ConfigError);
    bad = c;
    bad.kind = SweepKind::Delta;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = c;
    bad.parallelism = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = c;
    bad.protocols = {Protocol::GenerateUntil};
    bad.decode.max_new = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad.decode.max_new = 4;
    bad.decode.pattern = "no group";
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = c;
    bad.tasks.push_back(kv_task(1));
    CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("grid sizes follow the sweep kind") {
    const ModelRef t = small_ref("t");
    const std::vector<ModelRef> donors = {small_ref("d")};
    SweepConfig c;
    c.tasks = {kv_task(1)};
    c.protocols = {Protocol::LoglikelihoodDefault};

    CHECK(plan_grid(c, t, {}).size() == 5);  // baseline + 4 layers
    const auto grid = plan_grid(c, t, {});
    CHECK(grid[0].baseline);
    CHECK(grid[0].plan.label == kBaselineLabel);
    CHECK(grid[0].plan.edits.empty());

    c.protocols.push_back(Protocol::LoglikelihoodContinuation);
    CHECK(plan_grid(c, t, {}).size() == 10);
    c.tasks.push_back(kv_task(2));
    CHECK(plan_grid(c, t, {}).size() == 20);
    c.tasks.pop_back();
    c.protocols.pop_back();

    c.kind = SweepKind::Head;
    c.layer = 1;
    CHECK(plan_grid(c, t, {}).size() == 5);  // baseline + 4 heads
    c.group_mode = true;
    CHECK(plan_grid(c, t, {}).size() == 3);  // baseline + 2 KV groups
    c.layer = 4;
    CHECK_THROWS_AS(plan_grid(c, t, {}), ConfigError);

    c.kind = SweepKind::Accumulative;
    c.donors = {"d"};
    const auto acc = plan_grid(c, t, donors);
    REQUIRE(acc.size() == 5);
    for (std::size_t k = 1; k < acc.size(); ++k) CHECK(acc[k].layer == k);

    c.kind = SweepKind::Delta;
    CHECK(plan_grid(c, t, donors).size() == 5);

    c.kind = SweepKind::Plans;
    CHECK(plan_grid(c, t, {}).size() == 1);
}

TEST_CASE("explicit plans may not reuse the baseline label or each other's") {
    fixtures::TempDir dir;
    fixtures::write_file(dir / "baseline.json", R"([{"op": "prune", "layer": 0}])");
    fixtures::write_file(dir / "a.json", R"({"label": "same", "edits": [{"op": "prune", "layer": 0}]})");
    fixtures::write_file(dir / "b.json", R"({"label": "same", "edits": [{"op": "prune", "layer": 1}]})");
    fixtures::write_file(dir / "bad.json", R"([{"op": "prune", "layer": 9}])");
    SweepConfig c;
    c.kind = SweepKind::Plans;
    c.tasks = {kv_task(1)};
    c.protocols = {Protocol::LoglikelihoodDefault};
    const ModelRef t = small_ref("t");
    c.plans = {dir / "baseline.json"};
    CHECK_THROWS_WITH_AS(plan_grid(c, t, {}), doctest::Contains("reserved"), PlanError);
    c.plans = {dir / "a.json", dir / "b.json"};
    CHECK_THROWS_WITH_AS(plan_grid(c, t, {}), doctest::Contains("duplicate"), PlanError);
    c.plans = {dir / "bad.json"};
    CHECK_THROWS_AS(plan_grid(c, t, {}), PlanError);
    c.plans = {dir / "a.json"};
    CHECK(plan_grid(c, t, {}).size() == 2);
}

TEST_CASE("cache key depends on every input except the plan label") {
    SurgeryPlan p;
    p.edits = {PruneLayer{1, PruneScope::Full}};
    const DecodeParams d;
    const std::string k = cache_key("m", p, "h", Protocol::LoglikelihoodDefault, d);
    CHECK(k.size() == 64);

    SurgeryPlan relabelled = p;
    relabelled.label = "renamed";
    CHECK(cache_key("m", relabelled, "h", Protocol::LoglikelihoodDefault, d) == k);

    SurgeryPlan other = p;
    other.edits = {PruneLayer{2, PruneScope::Full}};
    DecodeParams d2 = d;
    d2.max_new = 33;
    const std::vector<std::string> keys = {
        cache_key("m2", p, "h", Protocol::LoglikelihoodDefault, d),
        cache_key("m", other, "h", Protocol::LoglikelihoodDefault, d),
        cache_key("m", p, "h2", Protocol::LoglikelihoodDefault, d),
        cache_key("m", p, "h", Protocol::GenerateUntil, d),
        cache_key("m", p, "h", Protocol::LoglikelihoodDefault, d2),
    };
    for (const std::string& key : keys) CHECK(key != k);
}

TEST_CASE("result cache: round trip, layout and corrupt entries") {
    fixtures::TempDir dir;
    const ResultCache cache(dir.path());
    ProtocolMetrics m;
    m.task = "t";
    m.n_items = 4;
    m.mu = 0.25;
    m.metrics["acc"] = 0.25;
    m.metrics["acc_ce"] = 0.5;
    const std::string key(64, 'a');
    CHECK_FALSE(cache.get(key).has_value());
    cache.put(key, m);
    CHECK(cache.path_for(key) == dir / "aa" / (key + ".json"));
    const auto back = cache.get(key);
    REQUIRE(back);
    CHECK(back->metrics == m.metrics);
    fixtures::write_file(cache.path_for(key), "{trunc");
    CHECK_FALSE(cache.get(key).has_value());
}

TEST_CASE("a sweep run: baseline deltas, cache reuse and byte-stable reports") {
    Env env;
    const SweepReport first = run(env.config);
    REQUIRE(first.records.size() == 5);
    CHECK(first.failed() == 0);
    CHECK(first.cache_hits() == 0);
    CHECK(first.records[0].baseline());
    for (const auto& [metric, d] : first.records[0].delta.delta) CHECK(d == 0.0);
    for (const RunRecord& r : first.records) {
        REQUIRE(r.metrics);
        for (const auto& [metric, v] : r.metrics->metrics) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(r.delta.delta.at(metric) == doctest::Approx(v - first.records[0].metrics->metrics.at(metric)));
        }
    }
    for (std::size_t l = 0; l < 4; ++l) CHECK(first.records[l + 1].layer == l);

    const SweepReport second = run(env.config);
    CHECK(second.cache_hits() == second.records.size());
    CHECK(stable(second) == stable(first));

    env.config.cache_dir.reset();
    const SweepReport cold = run(env.config);
    CHECK(cold.cache_hits() == 0);
    CHECK(stable(cold) == stable(first));

    // One changed weight byte: new model id, so nothing is reused.
    const fs::path weights = env.config.target / kWeightsFile;
    std::string bytes = fixtures::read_file(weights);
    bytes[bytes.size() - 2] ^= 0x01;
    fixtures::write_file(weights, bytes);
    env.config.cache_dir = env.dir / "cache";
    const SweepReport changed = run(env.config);
    CHECK(changed.cache_hits() == 0);
    CHECK(changed.target_id != first.target_id);
}

TEST_CASE("parallel and serial runs give the same report") {
    Env env;
    env.config.cache_dir.reset();
    env.config.kind = SweepKind::Delta;
    env.config.donors = {env.dir / "donor"};
    env.config.protocols = {Protocol::LoglikelihoodDefault, Protocol::LoglikelihoodContinuation};
    env.config.parallelism = 1;
    const SweepReport serial = run(env.config);
    env.config.parallelism = 4;
    const SweepReport parallel = run(env.config);
    CHECK(serial.records.size() == 10);
    CHECK(stable(serial) == stable(parallel));
    CHECK(serial.donor_ids.size() == 1);
}

TEST_CASE("run failures are recorded, not thrown") {
    Env env;
    env.config.cache_dir.reset();
    fixtures::write_file(env.dir / "long.jsonl",
                         R"({"id":"x","context":")" + std::string(200, 'a') + R"(","choices":["b","c"],"gold":0})" "\n");
    TaskSpec spec;
    spec.name = "long";
    spec.path = env.dir / "long.jsonl";
    env.config.tasks = {spec};
    const SweepReport r = run(env.config);
    CHECK(r.failed() == r.records.size());
    CHECK(r.records[0].error->find("max_seq_len") != std::string::npos);
    const std::string csv = report_csv(r);
    CHECK(count(csv, ",error,,,,false\n") == r.records.size());
}

TEST_CASE("report outputs: CSV rows, SVG ticks and JSON round trip") {
    Env env;
    env.config.protocols = {Protocol::LoglikelihoodDefault, Protocol::GenerateUntil};
    env.config.decode.max_new = 4;
    env.config.decode.pattern = R"(^\s*(\S+))";
    const SweepReport r = run(env.config);
    REQUIRE(r.records.size() == 10);
    REQUIRE(r.failed() == 0);

    // mc reports acc and acc_ce, generation exact_match: 5 * 2 + 5 * 1 rows.
    const std::string csv = report_csv(r);
    CHECK(csv.rfind("task,protocol,plan,layer,head,metric,value,delta,n_items,cache_hit\n", 0) == 0);
    CHECK(count(csv, "\n") == 1 + 15);
    CHECK(count(csv, ",baseline,,,") == 3);

    const auto svgs = report_svgs(r);
    CHECK(svgs.size() == 3);
    for (const auto& [key, svg] : svgs) {
        CHECK(count(svg, "class=\"xtick\"") == 4);
        CHECK(svg.find("<svg") != std::string::npos);
    }

    const SweepReport back = report_from_json(report_to_json(r));
    CHECK(report_to_json(back) == report_to_json(r));
    CHECK(report_csv(back) == csv);

    const auto written = emit(r, {EmitFormat::Csv, EmitFormat::Json, EmitFormat::Svg}, env.config.output_dir);
    CHECK(written.size() == 5);
    CHECK(fs::exists(env.config.output_dir / "kv_seed7__loglikelihood_default__acc.svg"));
    CHECK(report_csv(load_report(env.config.output_dir / "report.json")) == csv);
    CHECK_THROWS_AS(emit(SweepReport{}, {EmitFormat::Csv}, env.config.output_dir), Error);
    CHECK_THROWS_AS(parse_emit_format("xml"), ConfigError);
}
