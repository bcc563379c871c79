#include <doctest.h>

#include <set>

#include "layerscope/errors.hpp"
#include "layerscope/splitmix64.hpp"
#include "layerscope/tasks.hpp"
#include "models.hpp"

using namespace layerscope;

namespace {

TaskItem gen_item(const std::string& id, const std::string& context, const std::string& gold) {
    TaskItem t;
    t.kind = TaskKind::Generation;
    t.id = id;
    t.context = context;
    t.gold_text = gold;
    return t;
}

}  // namespace

TEST_CASE("JSONL parsing: kinds are inferred and blank lines skipped") {
    const std::string text =
        R"({"id":"a","context":"x","choices":[" p"," q"],"gold":1})" "\n\n"
        R"({"id":"b","context":"y","gold":"z","evidence":"e"})" "\n"
        R"({"id":"c","kind":"continuation","context":"y","gold":"w"})" "\n";
    const auto items = parse_task_jsonl(text, "t.jsonl");
    REQUIRE(items.size() == 3);
    CHECK(items[0].kind == TaskKind::MultipleChoice);
    CHECK(items[0].gold_answer() == " q");
    CHECK(items[1].kind == TaskKind::Generation);
    CHECK(items[1].evidence == "e");
    CHECK(items[2].kind == TaskKind::Continuation);
    const auto cont = parse_task_jsonl(R"({"id":"b","context":"y","gold":"z"})", "t", TaskKind::Continuation);
    CHECK(cont[0].kind == TaskKind::Continuation);
    CHECK(parse_task_jsonl(items_to_jsonl(items), "again").size() == 3);
}

TEST_CASE("JSONL parsing errors carry the line number") {
    const auto fails = [](const std::string& text, const std::string& needle) {
        CHECK_THROWS_WITH_AS(parse_task_jsonl(text, "t.jsonl"), doctest::Contains(needle.c_str()), TaskError);
    };
    fails("{\"id\":\"a\",\"context\":\"x\",\"gold\":\"y\"}\n{oops", "t.jsonl:2: invalid JSON");
    fails(R"({"id":"a","context":"x","choices":[" p"],"gold":3})", "t.jsonl:1:");
    fails(R"({"id":"a","context":"x","choices":[" p"," q"],"gold":-1})", "non-negative");
    fails(R"({"id":"a","context":"x"})", "missing field 'gold'");
    fails(R"({"id":"","context":"x","gold":"y"})", "'id' must be non-empty");
    fails(R"({"id":"a","context":"x","gold":"y","extra":1})", "unexpected field 'extra'");
    fails("{\"id\":\"a\",\"context\":\"x\",\"gold\":\"y\"}\n{\"id\":\"a\",\"context\":\"z\",\"gold\":\"y\"}",
          "t.jsonl:2: duplicate id 'a'");
    CHECK_THROWS_AS(load_task("/nonexistent/task.jsonl"), ConfigError);
}

TEST_CASE("few-shot prompt assembly") {
    FewShotConfig fs;
    const std::vector<TaskItem> ex = {gen_item("e0", "Q: 1+1?\nA:", "2"), gen_item("e1", "Q: 2+2?\nA:", " 4 ")};
    TaskItem item = gen_item("x", "Q: 3+3?\nA:", "6");
    item.evidence = "3+3 is 6.";

    CHECK(assemble_prompt(item, fs, ex, false) == "Q: 3+3?\nA:");
    CHECK(assemble_prompt(item, fs, ex, true) == "3+3 is 6.\n\nQ: 3+3?\nA:");

    fs.k = 2;
    fs.seed = 5;
    const auto order = select_exemplars(2, 2, 5);
    const std::string first = ex[order[0]].context + " " + trim(ex[order[0]].gold_answer());
    const std::string second = ex[order[1]].context + " " + trim(ex[order[1]].gold_answer());
    CHECK(assemble_prompt(item, fs, ex, true) == first + "\n\n" + second + "\n\n3+3 is 6.\n\nQ: 3+3?\nA:");

    fs.k = 3;
    CHECK_THROWS_AS(assemble_prompt(item, fs, ex, false), ConfigError);
    fs.k = 1;
    CHECK_THROWS_AS(assemble_prompt(gen_item("e1", "c", "g"), fs, ex, false), ConfigError);
}

TEST_CASE("property: exemplar selection is a seeded subset without repeats") {
    SplitMix64 rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(30);
        const std::size_t k = rng.below(n + 1);
        const std::uint64_t seed = rng.next();
        const auto a = select_exemplars(n, k, seed);
        CHECK(a == select_exemplars(n, k, seed));
        CHECK(a.size() == k);
        const std::set<std::size_t> distinct(a.begin(), a.end());
        CHECK(distinct.size() == k);
        for (std::size_t i : a) CHECK(i < n);
        // Prefixes agree: asking for fewer keeps the same leading picks.
        if (k > 0) CHECK(select_exemplars(n, k - 1, seed) == std::vector<std::size_t>(a.begin(), a.end() - 1));
    }
}

TEST_CASE("KV generator reproduces the frozen fixtures") {
    struct Case {
        const char* file;
        KVGenConfig config;
    };
    const Case cases[] = {
        {"kv_seed7_mc.jsonl", {4, 2, 6, 6, 7, TaskKind::MultipleChoice, 0}},
        {"kv_seed7_gen.jsonl", {3, 5, 6, 6, 7, TaskKind::Generation, 0}},
        {"kv_seed11_mc.jsonl", {5, 8, 3, 2, 11, TaskKind::MultipleChoice, 3}},
    };
    for (const Case& c : cases) {
        CAPTURE(c.file);
        CHECK(items_to_jsonl(generate_kv_retrieval(c.config)) == fixtures::read_file(fixtures::data_dir() / c.file));
    }
}

TEST_CASE("property: KV items are well formed") {
    SplitMix64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        KVGenConfig c;
        c.n_items = 1 + rng.below(5);
        c.n_pairs = 2 + rng.below(10);
        c.key_len = 2 + rng.below(4);
        c.value_len = 2 + rng.below(4);
        c.seed = rng.next();
        c.format = rng.below(2) ? TaskKind::MultipleChoice : TaskKind::Generation;
        const auto items = generate_kv_retrieval(c);
        CHECK(items == generate_kv_retrieval(c));
        REQUIRE(items.size() == c.n_items);
        for (const TaskItem& it : items) {
            const std::string answer = trim(it.gold_answer());
            CHECK(answer.size() == c.value_len);
            // The queried key is listed exactly once, paired with the gold value.
            const auto q = it.context.rfind("Q: ");
            const std::string key = it.context.substr(q + 3, c.key_len);
            CHECK(it.context.find(key + ": " + answer + "\n") != std::string::npos);
            if (it.kind == TaskKind::MultipleChoice) {
                CHECK(it.choices.size() == std::min<std::size_t>(4, c.n_pairs));
                const std::set<std::string> distinct(it.choices.begin(), it.choices.end());
                CHECK(distinct.size() == it.choices.size());
                for (const std::string& ch : it.choices) CHECK(it.context.find(":" + ch + "\n") != std::string::npos);
            }
        }
    }
}

TEST_CASE("KV generator preconditions") {
    KVGenConfig c;
    c.n_pairs = 40;
    c.key_len = 1;  // only 36 distinct keys
    CHECK_THROWS_AS(generate_kv_retrieval(c), ConfigError);
    c = KVGenConfig{};
    c.n_items = 0;
    CHECK_THROWS_AS(generate_kv_retrieval(c), ConfigError);
    c = KVGenConfig{};
    c.n_choices = 1;
    CHECK_THROWS_AS(generate_kv_retrieval(c), ConfigError);
    c.n_choices = 33;
    CHECK_THROWS_AS(generate_kv_retrieval(c), ConfigError);
    c = KVGenConfig{};
    c.format = TaskKind::Continuation;
    CHECK_THROWS_AS(generate_kv_retrieval(c), ConfigError);
    CHECK_THROWS_AS(kv_config_from_json(nlohmann::json{{"n_item", 3}}), ConfigError);
}

TEST_CASE("write_kv_task records the resolved config beside the JSONL") {
    fixtures::TempDir dir;
    KVGenConfig c;
    c.n_items = 2;
    c.n_pairs = 3;
    c.seed = 9;
    write_kv_task(c, dir / "kv.jsonl");
    CHECK(load_task(dir / "kv.jsonl") == generate_kv_retrieval(c));
    const auto side = nlohmann::json::parse(fixtures::read_file(dir / "kv.jsonl.config.json"));
    CHECK(side.at("n_choices") == 3);
    CHECK(side.at("format") == "mc");
    CHECK(kv_config_from_json(side).seed == 9);
}
