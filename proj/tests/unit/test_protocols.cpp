#include <doctest.h>

#include <cmath>

#include "layerscope/errors.hpp"
#include "layerscope/protocols.hpp"
#include "layerscope/splitmix64.hpp"
#include "models.hpp"
#include "oracle.hpp"

using namespace layerscope;

namespace {

SurgiedModel plain(const BundlePtr& b) { return apply(b, {}, SurgeryPlan{}); }

std::vector<TokenId> ids(std::string_view s) {
    std::vector<TokenId> out;
    for (unsigned char c : s) out.push_back(c);
    return out;
}

std::string random_text(SplitMix64& rng, std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<char>('a' + rng.below(26));
    return s;
}

// Token i goes to i+3 (mod 16), except the chain 0 -> 4 -> 7 -> 9.
BundlePtr chain_model() {
    std::vector<TokenId> succ(16);
    for (TokenId t = 0; t < 16; ++t) succ[t] = (t + 3) % 16;
    succ[0] = 4;
    succ[4] = 7;
    succ[7] = 9;
    return fixtures::successor_bundle(succ);
}

TaskItem mc(const std::string& id, const std::string& ctx, std::vector<std::string> choices, std::size_t gold) {
    TaskItem t;
    t.kind = TaskKind::MultipleChoice;
    t.id = id;
    t.context = ctx;
    t.choices = std::move(choices);
    t.gold_index = gold;
    return t;
}

TaskItem text_item(TaskKind kind, const std::string& id, const std::string& ctx, const std::string& gold) {
    TaskItem t;
    t.kind = kind;
    t.id = id;
    t.context = ctx;
    t.gold_text = gold;
    return t;
}

ProtocolMetrics metrics(Protocol p, double acc, std::size_t n = 10) {
    ProtocolMetrics m;
    m.protocol = p;
    m.task = "t";
    m.n_items = n;
    m.mu = acc;
    m.metrics[std::string(primary_metric(p))] = acc;
    return m;
}

}  // namespace

TEST_CASE("protocol names round trip") {
    for (Protocol p : {Protocol::LoglikelihoodDefault, Protocol::LoglikelihoodContinuation, Protocol::GenerateUntil}) {
        CHECK(parse_protocol(to_string(p)) == p);
    }
    CHECK(to_string(Protocol::GenerateUntil) == "generate_until");
    CHECK_THROWS_AS(parse_protocol("perplexity"), ConfigError);
}

TEST_CASE("loglikelihood on the hand-set model matches the oracle within 1e-5") {
    const ModelConfig c = fixtures::tiny_config();
    const BundlePtr b = fixtures::bundle(c, fixtures::hand_set_weights(c), fixtures::letters_vocab(c.vocab_size));
    const SurgiedModel m = plain(b);
    for (const auto& [ctx, cont] : {std::pair{"bfc", "ha"}, std::pair{"a", "dd"}, std::pair{"hgfe", "bc"}}) {
        const LLResult r = loglikelihood(m, ctx, cont);
        std::vector<TokenId> x;
        std::vector<TokenId> y;
        for (char ch : std::string(ctx)) x.push_back(static_cast<TokenId>(ch - 'a'));
        for (char ch : std::string(cont)) y.push_back(static_cast<TokenId>(ch - 'a'));
        CHECK(r.token_count == 2);
        CHECK(std::abs(r.sum_logprob - oracle::chain_logprob(b->weights, c, x, y)) <= 1e-5);
    }
}

// Wider model, longer chains: f32 accumulation error grows with both.
TEST_CASE("property: loglikelihood matches the oracle chain rule") {
    const ModelConfig c = fixtures::small_config();
    const BundlePtr b = fixtures::random_bundle(c, 51);
    const SurgiedModel m = plain(b);
    SplitMix64 rng(52);
    for (int trial = 0; trial < 20; ++trial) {
        const std::string ctx = random_text(rng, 1 + rng.below(10));
        const std::string cont = random_text(rng, 1 + rng.below(6));
        const LLResult r = loglikelihood(m, ctx, cont);
        CHECK(r.token_count == cont.size());
        CHECK(std::abs(r.sum_logprob - oracle::chain_logprob(b->weights, c, ids(ctx), ids(cont))) <= 1e-4);
    }
}

TEST_CASE("a flat-logit model scores n tokens as n ln(1/V)") {
    const std::size_t V = 8;
    const SurgiedModel m = plain(fixtures::uniform_bundle(V, 53));
    for (const std::string cont : {"a", "bcd", "hhhhhhh"}) {
        const LLResult r = loglikelihood(m, "abc", cont);
        CHECK(r.token_count == cont.size());
        CHECK(r.sum_logprob == doctest::Approx(cont.size() * std::log(1.0 / V)).epsilon(1e-6));
    }
    // Every logit ties, so the greedy token is always id 0.
    CHECK(loglikelihood(m, "b", "aaa").all_greedy);
    CHECK_FALSE(loglikelihood(m, "b", "aab").all_greedy);
}

TEST_CASE("loglikelihood input errors") {
    const SurgiedModel m = plain(fixtures::uniform_bundle(8, 54));
    CHECK_THROWS_AS(loglikelihood(m, "abc", ""), InputError);
    CHECK_THROWS_AS(loglikelihood(m, "", "abc"), InputError);
    CHECK_THROWS_AS(loglikelihood(m, std::string(40, 'a'), "b"), InputError);
}

TEST_CASE("property: loglikelihood is additive over continuation splits") {
    const ModelConfig c = fixtures::small_config();
    const SurgiedModel m = plain(fixtures::random_bundle(c, 55));
    SplitMix64 rng(56);
    for (int trial = 0; trial < 30; ++trial) {
        const std::string ctx = random_text(rng, 1 + rng.below(8));
        const std::string a = random_text(rng, 1 + rng.below(5));
        const std::string b = random_text(rng, 1 + rng.below(5));
        const double whole = loglikelihood(m, ctx, a + b).sum_logprob;
        const double parts = loglikelihood(m, ctx, a).sum_logprob + loglikelihood(m, ctx + a, b).sum_logprob;
        CHECK(std::abs(whole - parts) <= 1e-4);
    }
}

TEST_CASE("split_continuation handles merges across the boundary") {
    const Vocab v({{"a", 0}, {"b", 1}, {"ab", 2}, {"c", 3}}, std::nullopt, 4);
    const TokenSplit plain_split = split_continuation(v, "a", "c");
    CHECK(plain_split.context == std::vector<TokenId>{0});
    CHECK(plain_split.continuation == std::vector<TokenId>{3});
    // "a" + "bc" encodes as [ab, c]; the trailing token decoding to "bc" is not
    // available, so the split falls back to the mismatch point.
    const TokenSplit merged = split_continuation(v, "a", "bc");
    CHECK(v.decode(merged.context) + v.decode(merged.continuation) == "abc");
    CHECK_FALSE(merged.continuation.empty());
}

TEST_CASE("generate_until stops before the stop string") {
    const SurgiedModel m = plain(chain_model());
    const Vocab& v = m.vocab();
    const std::string stop = v.decode(std::vector<TokenId>{9});
    const std::vector<std::string> stops = {stop};
    const Generation g = generate(m, v.decode(std::vector<TokenId>{0}), stops, 10);
    CHECK(g.tokens == std::vector<TokenId>{4, 7, 9});
    CHECK(g.text == v.decode(std::vector<TokenId>{4, 7}));
    CHECK(g.stop_reason == "stop");
    CHECK(generate_until(m, "a", stops, 10) == "eh");

    const Generation one = generate(m, "a", stops, 1);
    CHECK(one.tokens.size() == 1);
    CHECK(one.text == "e");
    CHECK(one.stop_reason == "max_new");

    const std::vector<std::string> empty_stop = {""};
    const Generation none = generate(m, "a", empty_stop, 5);
    CHECK(none.text.empty());
    CHECK(none.stop_reason == "stop");

    CHECK_THROWS_AS(generate(m, "a", stops, 0), InputError);
    CHECK(generate(m, std::string(63, 'b'), std::vector<std::string>{}, 5).stop_reason == "max_seq_len");
}

TEST_CASE("property: cached greedy generation matches the recomputing oracle") {
    const ModelConfig c = fixtures::small_config();
    const BundlePtr b = fixtures::random_bundle(c, 57);
    const SurgiedModel m = plain(b);
    SplitMix64 rng(58);
    const std::vector<std::string> no_stops;
    for (int trial = 0; trial < 10; ++trial) {
        const std::string prompt = random_text(rng, 1 + rng.below(8));
        const std::size_t n = 1 + rng.below(8);
        CHECK(generate(m, prompt, no_stops, n).tokens == oracle::greedy_chain(b->weights, c, ids(prompt), n));
    }
}

TEST_CASE("acc and acc_ce disagree when choice lengths differ") {
    // Search for a context where the short choice wins on the sum and the
    // long one wins on the per-token mean, using the oracle to decide.
    const ModelConfig c = fixtures::small_config();
    const BundlePtr b = fixtures::random_bundle(c, 59);
    const SurgiedModel m = plain(b);
    SplitMix64 rng(60);
    std::optional<TaskItem> found;
    for (int attempt = 0; attempt < 2000 && !found; ++attempt) {
        const std::string ctx = random_text(rng, 4);
        const std::string short_c = random_text(rng, 1);
        const std::string long_c = random_text(rng, 4);
        const double s = oracle::chain_logprob(b->weights, c, ids(ctx), ids(short_c));
        const double l = oracle::chain_logprob(b->weights, c, ids(ctx), ids(long_c));
        if (s > l + 1e-3 && l / 4 > s + 1e-3) found = mc("x", ctx, {short_c, long_c}, 0);
    }
    REQUIRE(found);
    const std::vector<TaskItem> items = {*found};
    const ProtocolMetrics r = eval_mc_default(m, items, "t");
    CHECK(r.metrics.at("acc") == 1.0);
    CHECK(r.metrics.at("acc_ce") == 0.0);
    CHECK(r.mu == r.metrics.at("acc"));
}

TEST_CASE("property: equal-length choices give acc == acc_ce") {
    const ModelConfig c = fixtures::small_config();
    const SurgiedModel m = plain(fixtures::random_bundle(c, 61));
    SplitMix64 rng(62);
    std::vector<TaskItem> items;
    for (int i = 0; i < 30; ++i) {
        const std::size_t len = 1 + rng.below(4);
        std::vector<std::string> choices;
        for (std::size_t k = 0; k < 2 + rng.below(3); ++k) choices.push_back(random_text(rng, len));
        const std::size_t gold = rng.below(choices.size());
        items.push_back(mc("i" + std::to_string(i), random_text(rng, 5), choices, gold));
    }
    const ProtocolMetrics r = eval_mc_default(m, items);
    CHECK(r.metrics.at("acc") == r.metrics.at("acc_ce"));
    for (const ItemRecord& rec : r.per_item) CHECK(rec.detail.at("pred") == rec.detail.at("pred_ce"));
}

TEST_CASE("property: mu is invariant to item order") {
    const ModelConfig c = fixtures::small_config();
    const SurgiedModel m = plain(fixtures::random_bundle(c, 63));
    SplitMix64 rng(64);
    std::vector<TaskItem> items;
    for (int i = 0; i < 12; ++i) {
        items.push_back(mc("i" + std::to_string(i), random_text(rng, 4),
                           {random_text(rng, 2), random_text(rng, 3), random_text(rng, 1)}, rng.below(3)));
    }
    const double mu = eval_mc_default(m, items).mu;
    for (int trial = 0; trial < 5; ++trial) {
        for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
        CHECK(eval_mc_default(m, items).mu == mu);
    }
}

TEST_CASE("mc preconditions") {
    const SurgiedModel m = plain(fixtures::uniform_bundle(8, 65));
    const std::vector<TaskItem> one_choice = {mc("a", "ab", {"c"}, 0)};
    CHECK_THROWS_AS(eval_mc_default(m, one_choice), TaskError);
    const std::vector<TaskItem> not_mc = {text_item(TaskKind::Generation, "a", "ab", "c")};
    CHECK_THROWS_AS(eval_mc_default(m, not_mc), TaskError);
    CHECK_THROWS_AS(eval_mc_default(m, std::span<const TaskItem>{}), TaskError);
    // Flat logits tie every choice of the same length: lowest index wins.
    const std::vector<TaskItem> tie = {mc("a", "ab", {"c", "d", "e"}, 0), mc("b", "ab", {"c", "d"}, 1)};
    CHECK(eval_mc_default(m, tie).mu == 0.5);
}

TEST_CASE("continuation protocol scores greedy agreement") {
    const SurgiedModel m = plain(chain_model());
    const std::vector<TaskItem> items = {text_item(TaskKind::Continuation, "hit", "a", "eh"),
                                         text_item(TaskKind::Continuation, "miss", "a", "ei"),
                                         mc("mc", "a", {"ej", "eh"}, 1)};
    const ProtocolMetrics r = eval_continuation(m, items, "t");
    CHECK(r.metrics.at("acc") == doctest::Approx(2.0 / 3.0));
    CHECK(r.mu == r.metrics.at("acc"));
    CHECK(r.stats.count("mean_logprob") == 1);
    CHECK(r.metrics.count("mean_logprob") == 0);
    CHECK(r.per_item[1].correct == false);
}

TEST_CASE("answer extraction and normalization") {
    CHECK(normalize_answer(" 1,000 ") == "1000");
    CHECK(normalize_answer("42.0") == "42");
    CHECK(normalize_answer("-0.50") == "-0.5");
    CHECK(normalize_answer("007") == "7");
    CHECK(normalize_answer(" Paris ") == "Paris");
    const std::regex p = compile_answer_pattern(DecodeParams{}.pattern);
    CHECK(extract_answer("#### 12 then #### 1,234.50", p) == "1234.5");
    CHECK_FALSE(extract_answer("no number here", p).has_value());
    CHECK_THROWS_AS(compile_answer_pattern("(a)(b)"), ConfigError);
    CHECK_THROWS_AS(compile_answer_pattern("abc"), ConfigError);
    CHECK_THROWS_AS(compile_answer_pattern("(unclosed"), ConfigError);
}

TEST_CASE("generation protocol: exact match and no_answer") {
    const SurgiedModel m = plain(chain_model());
    DecodeParams params;
    params.max_new = 2;
    params.stops = {};
    params.pattern = R"(^\s*(\S+))";
    const std::vector<TaskItem> items = {text_item(TaskKind::Generation, "hit", "a", " eh "),
                                         text_item(TaskKind::Generation, "miss", "a", "xy")};
    const ProtocolMetrics r = eval_generation(m, items, params, "t");
    CHECK(r.metrics.at("exact_match") == 0.5);
    CHECK(r.per_item[0].detail.at("extracted") == "eh");
    CHECK(r.stats.at("no_answer") == 0.0);

    params.pattern = "(z+)";
    const ProtocolMetrics none = eval_generation(m, items, params, "t");
    CHECK(none.mu == 0.0);
    CHECK(none.stats.at("no_answer") == 2.0);
    CHECK(none.per_item[0].status == "no_answer");

    params.pattern = "(";
    CHECK_THROWS_AS(eval_generation(m, items, params), ConfigError);
}

TEST_CASE("metrics JSON round trip") {
    const SurgiedModel m = plain(chain_model());
    const std::vector<TaskItem> items = {text_item(TaskKind::Continuation, "hit", "a", "eh")};
    const ProtocolMetrics r = eval_continuation(m, items, "t");
    const ProtocolMetrics back = protocol_metrics_from_json(to_json(r));
    CHECK(back.mu == r.mu);
    CHECK(back.metrics == r.metrics);
    CHECK(back.stats == r.stats);
    CHECK(back.n_items == r.n_items);
    CHECK(to_json(back) == to_json(r));
}

TEST_CASE("delta is variant minus baseline") {
    const ProtocolMetrics base = metrics(Protocol::LoglikelihoodDefault, 0.9);
    CHECK(compute_delta(base, base).delta.at("acc") == 0.0);
    const DeltaMetrics d = compute_delta(base, metrics(Protocol::LoglikelihoodDefault, 0.1));
    CHECK(d.delta.at("acc") == doctest::Approx(-0.8));
    CHECK_THROWS_AS(compute_delta(base, metrics(Protocol::GenerateUntil, 0.1)), ComparisonError);
    CHECK_THROWS_AS(compute_delta(base, metrics(Protocol::LoglikelihoodDefault, 0.1, 11)), ComparisonError);
    ProtocolMetrics other_task = base;
    other_task.task = "u";
    CHECK_THROWS_AS(compute_delta(base, other_task), ComparisonError);
}
