#include "layerscope/protocols.hpp"

#include <algorithm>
#include <cmath>

#include "layerscope/errors.hpp"
#include "layerscope/ops.hpp"

namespace layerscope {

using nlohmann::json;

std::string_view to_string(Protocol protocol) {
    switch (protocol) {
        case Protocol::LoglikelihoodDefault: return "loglikelihood_default";
        case Protocol::LoglikelihoodContinuation: return "loglikelihood_continuation";
        case Protocol::GenerateUntil: return "generate_until";
    }
    return "loglikelihood_default";
}

Protocol parse_protocol(std::string_view text) {
    if (text == "loglikelihood_default") return Protocol::LoglikelihoodDefault;
    if (text == "loglikelihood_continuation") return Protocol::LoglikelihoodContinuation;
    if (text == "generate_until") return Protocol::GenerateUntil;
    throw ConfigError("unknown protocol '" + std::string(text) +
                      "' (expected loglikelihood_default, loglikelihood_continuation or "
                      "generate_until)");
}

std::string_view primary_metric(Protocol protocol) {
    return protocol == Protocol::GenerateUntil ? "exact_match" : "acc";
}

// ---- log-likelihood --------------------------------------------------------

LLResult loglikelihood_tokens(const ModelView& model, std::span<const TokenId> context,
                              std::span<const TokenId> continuation) {
    if (continuation.empty()) throw InputError("loglikelihood: continuation encodes to no tokens");
    if (context.empty()) throw InputError("loglikelihood: context encodes to no tokens");
    const std::size_t total = context.size() + continuation.size();
    if (total > model.config.max_seq_len) {
        throw InputError("loglikelihood: context + continuation is " + std::to_string(total) +
                         " tokens, above max_seq_len " + std::to_string(model.config.max_seq_len));
    }
    std::vector<TokenId> input(context.begin(), context.end());
    input.insert(input.end(), continuation.begin(), continuation.end() - 1);
    const Tensor2D logits = forward(input, model);

    LLResult r;
    r.token_count = continuation.size();
    r.all_greedy = true;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        const auto row = logits.row(context.size() - 1 + i);
        r.sum_logprob += log_softmax_at(row, continuation[i]);
        if (argmax(row) != continuation[i]) r.all_greedy = false;
    }
    return r;
}

TokenSplit split_continuation(const Vocab& vocab, std::string_view context,
                              std::string_view continuation) {
    std::vector<TokenId> ctx = vocab.encode(context);
    std::vector<TokenId> full = vocab.encode(std::string(context) + std::string(continuation));

    std::size_t start = ctx.size();
    const bool prefix = full.size() >= ctx.size() && std::equal(ctx.begin(), ctx.end(), full.begin());
    if (!prefix) {
        std::optional<std::size_t> found;
        for (std::size_t j = full.size(); j-- > 0;) {
            if (vocab.decode(std::span(full).subspan(j)) == continuation) {
                found = j;
                break;
            }
        }
        if (found) {
            start = *found;
        } else {
            start = static_cast<std::size_t>(
                std::mismatch(ctx.begin(), ctx.end(), full.begin(), full.end()).second - full.begin());
        }
    }
    TokenSplit split;
    split.context.assign(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(start));
    split.continuation.assign(full.begin() + static_cast<std::ptrdiff_t>(start), full.end());
    return split;
}

LLResult loglikelihood(const SurgiedModel& model, std::string_view context,
                       std::string_view continuation) {
    if (continuation.empty()) throw InputError("loglikelihood: empty continuation");
    const TokenSplit split = split_continuation(model.vocab(), context, continuation);
    return loglikelihood_tokens(model.view(), split.context, split.continuation);
}

// ---- metrics JSON ----------------------------------------------------------

json to_json(const ProtocolMetrics& m) {
    json items = json::array();
    for (const ItemRecord& r : m.per_item) {
        items.push_back({{"id", r.id}, {"correct", r.correct}, {"status", r.status}, {"detail", r.detail}});
    }
    return {{"protocol", std::string(to_string(m.protocol))},
            {"task", m.task},
            {"mu", m.mu},
            {"metrics", m.metrics},
            {"stats", m.stats},
            {"n_items", m.n_items},
            {"per_item", std::move(items)}};
}

ProtocolMetrics protocol_metrics_from_json(const json& j) {
    ProtocolMetrics m;
    m.protocol = parse_protocol(j.at("protocol").get<std::string>());
    m.task = j.at("task").get<std::string>();
    m.mu = j.at("mu").get<double>();
    m.metrics = j.at("metrics").get<std::map<std::string, double>>();
    m.stats = j.at("stats").get<std::map<std::string, double>>();
    m.n_items = j.at("n_items").get<std::size_t>();
    for (const json& r : j.at("per_item")) {
        m.per_item.push_back({r.at("id").get<std::string>(), r.at("correct").get<bool>(),
                              r.at("status").get<std::string>(), r.at("detail")});
    }
    return m;
}

// ---- evaluators ------------------------------------------------------------

namespace {

void require_items(std::span<const TaskItem> items) {
    if (items.empty()) throw TaskError("task has no items");
}

double fraction(std::size_t hits, std::size_t n) { return static_cast<double>(hits) / static_cast<double>(n); }

// Lowest index among the maxima.
std::size_t best_index(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

}  // namespace

ProtocolMetrics eval_mc_default(const SurgiedModel& model, std::span<const TaskItem> items,
                                std::string_view task) {
    require_items(items);
    ProtocolMetrics out;
    out.protocol = Protocol::LoglikelihoodDefault;
    out.task = std::string(task);
    out.n_items = items.size();
    std::size_t hits = 0;
    std::size_t hits_ce = 0;
    for (const TaskItem& item : items) {
        if (item.kind != TaskKind::MultipleChoice) {
            throw TaskError("item '" + item.id + "': loglikelihood_default needs multiple-choice items");
        }
        if (item.choices.size() < 2) throw TaskError("item '" + item.id + "' has fewer than 2 choices");
        if (item.gold_index >= item.choices.size()) throw TaskError("item '" + item.id + "' gold index out of range");

        std::vector<double> sums;
        std::vector<double> means;
        json counts = json::array();
        for (const std::string& choice : item.choices) {
            const LLResult r = loglikelihood(model, item.context, choice);
            sums.push_back(r.sum_logprob);
            means.push_back(r.sum_logprob / static_cast<double>(r.token_count));
            counts.push_back(r.token_count);
        }
        const std::size_t pred = best_index(sums);
        const std::size_t pred_ce = best_index(means);
        const bool correct = pred == item.gold_index;
        const bool correct_ce = pred_ce == item.gold_index;
        hits += correct;
        hits_ce += correct_ce;
        out.per_item.push_back({item.id, correct, "ok",
                                {{"gold", item.gold_index},
                                 {"pred", pred},
                                 {"pred_ce", pred_ce},
                                 {"correct_ce", correct_ce},
                                 {"sum_logprob", sums},
                                 {"token_count", counts}}});
    }
    out.metrics["acc"] = fraction(hits, items.size());
    out.metrics["acc_ce"] = fraction(hits_ce, items.size());
    out.mu = out.metrics["acc"];
    return out;
}

ProtocolMetrics eval_continuation(const SurgiedModel& model, std::span<const TaskItem> items,
                                  std::string_view task) {
    require_items(items);
    ProtocolMetrics out;
    out.protocol = Protocol::LoglikelihoodContinuation;
    out.task = std::string(task);
    out.n_items = items.size();
    std::size_t hits = 0;
    double logprob_total = 0.0;
    std::size_t token_total = 0;
    for (const TaskItem& item : items) {
        const std::string& gold = item.gold_answer();
        const LLResult r = loglikelihood(model, item.context, gold);
        hits += r.all_greedy;
        logprob_total += r.sum_logprob;
        token_total += r.token_count;
        out.per_item.push_back({item.id, r.all_greedy, "ok",
                                {{"sum_logprob", r.sum_logprob}, {"token_count", r.token_count}}});
    }
    out.metrics["acc"] = fraction(hits, items.size());
    out.stats["mean_logprob"] = logprob_total / static_cast<double>(token_total);
    out.mu = out.metrics["acc"];
    return out;
}

Generation generate(const SurgiedModel& model, std::string_view prompt,
                    std::span<const std::string> stops, std::size_t max_new) {
    if (max_new == 0) throw InputError("generate: max_new must be >= 1");
    const Vocab& vocab = model.vocab();
    const std::vector<TokenId> prompt_tokens = vocab.encode(prompt);
    if (prompt_tokens.empty()) throw InputError("generate: prompt encodes to no tokens");
    const std::size_t max_seq = model.config().max_seq_len;
    if (prompt_tokens.size() > max_seq) {
        throw InputError("generate: prompt is " + std::to_string(prompt_tokens.size()) +
                         " tokens, above max_seq_len " + std::to_string(max_seq));
    }

    Generation gen;
    if (std::any_of(stops.begin(), stops.end(), [](const std::string& s) { return s.empty(); })) {
        gen.stop_reason = "stop";
        return gen;
    }

    DecodeSession session(model.view());
    std::span<const float> logits = session.prefill(prompt_tokens);
    gen.stop_reason = "max_new";
    for (std::size_t i = 0; i < max_new; ++i) {
        const auto token = static_cast<TokenId>(argmax(logits));
        gen.tokens.push_back(token);
        gen.text = vocab.decode(gen.tokens);

        std::size_t cut = std::string::npos;
        for (const std::string& stop : stops) cut = std::min(cut, gen.text.find(stop));
        if (cut != std::string::npos) {
            gen.text.resize(cut);
            gen.stop_reason = "stop";
            return gen;
        }
        if (i + 1 == max_new) break;
        if (session.position() >= max_seq) {
            gen.stop_reason = "max_seq_len";
            break;
        }
        logits = session.step(token);
    }
    return gen;
}

std::string generate_until(const SurgiedModel& model, std::string_view prompt,
                           std::span<const std::string> stops, std::size_t max_new) {
    return generate(model, prompt, stops, max_new).text;
}

nlohmann::ordered_json decode_params_to_json(const DecodeParams& p) {
    nlohmann::ordered_json j;
    j["max_new"] = p.max_new;
    j["stops"] = p.stops;
    j["pattern"] = p.pattern;
    return j;
}

std::regex compile_answer_pattern(const std::string& pattern) {
    std::regex re;
    try {
        re = std::regex(pattern, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
        throw ConfigError("invalid answer pattern '" + pattern + "': " + e.what());
    }
    if (re.mark_count() != 1) {
        throw ConfigError("answer pattern '" + pattern + "' must have exactly one capture group, has " +
                          std::to_string(re.mark_count()));
    }
    return re;
}

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// [+-]? digits* (. digits*)? with at least one digit.
bool looks_numeric(std::string_view s) {
    std::size_t i = 0;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
    bool digits = false;
    bool dot = false;
    for (; i < s.size(); ++i) {
        if (is_digit(s[i])) {
            digits = true;
        } else if (s[i] == '.' && !dot) {
            dot = true;
        } else {
            return false;
        }
    }
    return digits;
}

std::string canonical_number(std::string s) {
    bool negative = false;
    if (s[0] == '+' || s[0] == '-') {
        negative = s[0] == '-';
        s.erase(0, 1);
    }
    std::string int_part = s;
    std::string frac;
    if (const auto dot = s.find('.'); dot != std::string::npos) {
        int_part = s.substr(0, dot);
        frac = s.substr(dot + 1);
    }
    while (!frac.empty() && frac.back() == '0') frac.pop_back();
    const auto nz = int_part.find_first_not_of('0');
    int_part = nz == std::string::npos ? "0" : int_part.substr(nz);
    std::string out = int_part;
    if (!frac.empty()) out += "." + frac;
    if (negative && out != "0") out = "-" + out;
    return out;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
    std::string s = trim(text);
    s.erase(std::remove(s.begin(), s.end(), ','), s.end());
    s = trim(s);
    if (looks_numeric(s)) s = canonical_number(s);
    return s;
}

std::optional<std::string> extract_answer(std::string_view text, const std::regex& pattern) {
    const std::string haystack(text);
    std::optional<std::string> last;
    for (auto it = std::sregex_iterator(haystack.begin(), haystack.end(), pattern);
         it != std::sregex_iterator(); ++it) {
        last = (*it)[1].matched ? (*it)[1].str() : std::string();
    }
    if (!last) return std::nullopt;
    return normalize_answer(*last);
}

ProtocolMetrics eval_generation(const SurgiedModel& model, std::span<const TaskItem> items,
                                const DecodeParams& params, std::string_view task) {
    const std::regex pattern = compile_answer_pattern(params.pattern);
    require_items(items);
    ProtocolMetrics out;
    out.protocol = Protocol::GenerateUntil;
    out.task = std::string(task);
    out.n_items = items.size();
    std::size_t hits = 0;
    std::size_t no_answer = 0;
    for (const TaskItem& item : items) {
        const Generation gen = generate(model, item.context, params.stops, params.max_new);
        const std::string gold = normalize_answer(item.gold_answer());
        const auto extracted = extract_answer(gen.text, pattern);
        ItemRecord rec;
        rec.id = item.id;
        rec.correct = extracted && *extracted == gold;
        rec.status = extracted ? "ok" : "no_answer";
        rec.detail = {{"generated", sanitize_utf8(gen.text)},
                      {"extracted", extracted ? json(*extracted) : json(nullptr)},
                      {"gold", gold},
                      {"stop_reason", gen.stop_reason}};
        hits += rec.correct;
        no_answer += !extracted;
        out.per_item.push_back(std::move(rec));
    }
    out.metrics["exact_match"] = fraction(hits, items.size());
    out.stats["no_answer"] = static_cast<double>(no_answer);
    out.mu = out.metrics["exact_match"];
    return out;
}

ProtocolMetrics evaluate(const SurgiedModel& model, Protocol protocol,
                         std::span<const TaskItem> items, const DecodeParams& params,
                         std::string_view task) {
    switch (protocol) {
        case Protocol::LoglikelihoodDefault: return eval_mc_default(model, items, task);
        case Protocol::LoglikelihoodContinuation: return eval_continuation(model, items, task);
        case Protocol::GenerateUntil: return eval_generation(model, items, params, task);
    }
    throw ConfigError("unknown protocol");
}

DeltaMetrics compute_delta(const ProtocolMetrics& baseline, const ProtocolMetrics& variant) {
    if (baseline.protocol != variant.protocol) {
        throw ComparisonError("cannot compare " + std::string(to_string(baseline.protocol)) + " with " +
                              std::string(to_string(variant.protocol)));
    }
    if (baseline.task != variant.task) {
        throw ComparisonError("cannot compare task '" + baseline.task + "' with task '" + variant.task + "'");
    }
    if (baseline.n_items != variant.n_items) {
        throw ComparisonError("item counts differ (" + std::to_string(baseline.n_items) + " vs " +
                              std::to_string(variant.n_items) + ")");
    }
    DeltaMetrics d;
    for (const auto& [name, value] : variant.metrics) {
        const auto it = baseline.metrics.find(name);
        if (it != baseline.metrics.end()) d.delta[name] = value - it->second;
    }
    return d;
}

}  // namespace layerscope
