#include "flexmerge/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "flexmerge/errors.hpp"
#include "flexmerge/graph.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/sha256.hpp"
#include "flexmerge/tokenizer.hpp"

namespace flexmerge {

namespace {

// Evaluation rows: each document chopped into consecutive max_seq windows,
// tail windows PAD-filled. Targets BOS/PAD carry mask 0.
struct EvalRows {
    std::vector<int> ids, targets;
    std::vector<uint8_t> mask;
    size_t n = 0; // rows of T tokens
};

void append_doc_rows(const std::string& doc, int T, EvalRows& out) {
    std::vector<int> toks = encode(doc);
    for (size_t start = 0; start + 1 < toks.size(); start += static_cast<size_t>(T)) {
        for (int j = 0; j < T; ++j) {
            size_t a = start + static_cast<size_t>(j);
            int cur = (a < toks.size()) ? toks[a] : kPad;
            int nxt = (a + 1 < toks.size()) ? toks[a + 1] : kPad;
            out.ids.push_back(cur);
            out.targets.push_back(nxt);
            out.mask.push_back((nxt != kBos && nxt != kPad) ? 1 : 0);
        }
        ++out.n;
    }
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

nlohmann::json fractions_json(const std::vector<std::vector<double>>& f) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& layer : f) j.push_back(layer);
    return j;
}

} // namespace

double perplexity(MoeModel& m, const std::vector<std::string>& docs) {
    if (docs.empty()) throw InputError("perplexity: empty document split");
    const int T = m.config.max_seq_len;
    EvalRows rows;
    for (const auto& d : docs) append_doc_rows(d, T, rows);
    if (rows.n == 0) throw InputError("perplexity: no scorable tokens in split");

    const size_t R = 16; // rows per forward
    double ce_sum = 0.0;
    int64_t n_tok = 0;
    for (size_t cs = 0; cs < rows.n; cs += R) {
        const size_t b = std::min(R, rows.n - cs);
        const size_t at = cs * static_cast<size_t>(T), len = b * static_cast<size_t>(T);
        std::vector<int> ids(rows.ids.begin() + at, rows.ids.begin() + at + len);
        std::vector<int> tg(rows.targets.begin() + at, rows.targets.begin() + at + len);
        std::vector<uint8_t> mk(rows.mask.begin() + at, rows.mask.begin() + at + len);
        Graph<float> g;
        ForwardHandles h = build_forward(g, m, ids, static_cast<int>(b), T, tg, mk);
        const auto& loss = g.node(h.loss);
        ce_sum += static_cast<double>(loss.val[0]) * loss.ce_count;
        n_tok += loss.ce_count;
    }
    return std::exp(ce_sum / static_cast<double>(n_tok));
}

RoutingProfile routing_profile(MoeModel& m, const DomainDocs& domains, int max_tokens_per_domain) {
    if (domains.empty()) throw InputError("routing profile: no domains");
    if (max_tokens_per_domain < 1)
        throw ConfigError("routing profile: token budget must be >= 1");

    const int T = m.config.max_seq_len;
    const int L = m.config.n_layers;
    const int E = m.n_experts();
    RoutingProfile out;
    out.roster = m.roster;

    std::vector<std::vector<int64_t>> total(static_cast<size_t>(L),
                                            std::vector<int64_t>(static_cast<size_t>(E), 0));
    for (const auto& [domain, docs] : domains) {
        if (docs.empty()) throw InputError("routing profile: domain '" + domain + "' is empty");
        EvalRows rows;
        for (const auto& d : docs) {
            if (static_cast<int>(rows.n) * T >= max_tokens_per_domain) break;
            append_doc_rows(d, T, rows);
        }
        std::vector<std::vector<int64_t>> sel(static_cast<size_t>(L),
                                              std::vector<int64_t>(static_cast<size_t>(E), 0));
        const size_t R = 16;
        for (size_t cs = 0; cs < rows.n; cs += R) {
            const size_t b = std::min(R, rows.n - cs);
            const size_t at = cs * static_cast<size_t>(T), len = b * static_cast<size_t>(T);
            std::vector<int> ids(rows.ids.begin() + at, rows.ids.begin() + at + len);
            std::vector<uint8_t> row_mask(len);
            for (size_t i = 0; i < len; ++i) row_mask[i] = (ids[i] != kPad) ? 1 : 0;
            Graph<float> g;
            ForwardHandles h = build_forward(g, m, ids, static_cast<int>(b), T);
            RoutingTrace tr = read_routing_trace(g, h, E, row_mask);
            for (int l = 0; l < L; ++l)
                for (int e = 0; e < E; ++e) {
                    sel[static_cast<size_t>(l)][static_cast<size_t>(e)] +=
                        tr.selections[static_cast<size_t>(l)][static_cast<size_t>(e)];
                }
            out.tokens += tr.tokens;
        }
        std::vector<std::vector<double>> frac(static_cast<size_t>(L),
                                              std::vector<double>(static_cast<size_t>(E), 0.0));
        for (int l = 0; l < L; ++l) {
            int64_t layer_total = 0;
            for (int e = 0; e < E; ++e)
                layer_total += sel[static_cast<size_t>(l)][static_cast<size_t>(e)];
            for (int e = 0; e < E; ++e) {
                total[static_cast<size_t>(l)][static_cast<size_t>(e)] +=
                    sel[static_cast<size_t>(l)][static_cast<size_t>(e)];
                if (layer_total > 0)
                    frac[static_cast<size_t>(l)][static_cast<size_t>(e)] =
                        static_cast<double>(sel[static_cast<size_t>(l)][static_cast<size_t>(e)]) /
                        static_cast<double>(layer_total);
            }
        }
        out.per_domain.emplace_back(domain, std::move(frac));
    }
    out.overall.assign(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(E), 0.0));
    for (int l = 0; l < L; ++l) {
        int64_t layer_total = 0;
        for (int e = 0; e < E; ++e) layer_total += total[static_cast<size_t>(l)][static_cast<size_t>(e)];
        for (int e = 0; e < E; ++e)
            if (layer_total > 0)
                out.overall[static_cast<size_t>(l)][static_cast<size_t>(e)] =
                    static_cast<double>(total[static_cast<size_t>(l)][static_cast<size_t>(e)]) /
                    static_cast<double>(layer_total);
    }
    return out;
}

std::vector<SweepRow> active_expert_sweep(MoeModel& m, const DomainDocs& domains,
                                          const std::vector<int>& ks) {
    if (ks.empty()) throw ConfigError("expert sweep: no k values");
    for (int k : ks)
        if (k < 1 || k > m.n_experts())
            throw ConfigError("expert sweep: k=" + std::to_string(k) + " outside [1, n_experts]");
    if (domains.empty()) throw InputError("expert sweep: no domains");

    const int saved = m.config.top_k;
    std::vector<SweepRow> table;
    try {
        for (int k : ks) {
            m.config.top_k = k;
            SweepRow row;
            row.k = k;
            double sum = 0.0;
            for (const auto& [domain, docs] : domains) {
                double p = perplexity(m, docs);
                row.domain_ppl[domain] = p;
                sum += p;
            }
            row.mean_ppl = sum / static_cast<double>(domains.size());
            table.push_back(std::move(row));
        }
    } catch (...) {
        m.config.top_k = saved;
        throw;
    }
    m.config.top_k = saved;
    return table;
}

double normalized_levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.empty() && b.empty()) return 1.0;
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    double dist = static_cast<double>(prev[m]);
    return 1.0 - dist / static_cast<double>(std::max(n, m));
}

ExtractionResult extraction_attack(MoeModel& m, const std::vector<std::string>& docs,
                                   const ExtractionParams& p) {
    if (docs.empty()) throw InputError("extraction: no documents");
    if (p.prefix_len < 1 || p.continuation_len < 1 || p.samples_per_prefix < 1)
        throw ConfigError("extraction: lengths and sample count must be >= 1");
    if (!(p.threshold >= 0.0 && p.threshold <= 1.0))
        throw ConfigError("extraction: threshold must be in [0, 1]");

    ExtractionResult r;
    r.n_docs = static_cast<int>(docs.size());
    r.prefix_len = p.prefix_len;
    r.continuation_len = p.continuation_len;
    r.samples_per_prefix = p.samples_per_prefix;
    r.threshold = p.threshold;

    for (size_t d = 0; d < docs.size(); ++d) {
        std::vector<int> toks = encode(docs[d]);
        if (static_cast<int>(toks.size()) < p.prefix_len + 1) {
            ++r.n_skipped;
            continue;
        }
        std::vector<int> prefix(toks.begin(), toks.begin() + p.prefix_len);
        const size_t ref_end =
            std::min(toks.size(), static_cast<size_t>(p.prefix_len) + p.continuation_len);
        std::vector<int> ref(toks.begin() + p.prefix_len, toks.begin() + ref_end);

        std::vector<uint64_t> seeds(static_cast<size_t>(p.samples_per_prefix));
        for (int s = 0; s < p.samples_per_prefix; ++s)
            seeds[static_cast<size_t>(s)] = derive_seed(p.seed, d, static_cast<uint64_t>(s));
        auto outs = generate_batch(m, prefix, static_cast<int>(ref.size()), p.sampling, seeds);

        double best = 0.0;
        for (const auto& cand : outs) best = std::max(best, normalized_levenshtein(cand, ref));
        r.best_similarity.push_back(best);
        if (best >= p.threshold) ++r.n_extracted;
    }
    const int attempted = r.n_docs - r.n_skipped;
    r.rate = attempted > 0 ? static_cast<double>(r.n_extracted) / attempted : 0.0;
    return r;
}

std::string model_config_hash(const MoeModel& m) {
    nlohmann::json j;
    j["config"] = {{"n_layers", m.config.n_layers},     {"hidden_dim", m.config.hidden_dim},
                   {"n_heads", m.config.n_heads},       {"ffn_dim", m.config.ffn_dim},
                   {"vocab_size", m.config.vocab_size}, {"max_seq_len", m.config.max_seq_len},
                   {"top_k", m.config.top_k}};
    j["roster"] = m.roster;
    nlohmann::json biases = nlohmann::json::array();
    for (double b : m.biases)
        biases.push_back(std::isinf(b) ? nlohmann::json("-inf") : nlohmann::json(b));
    j["biases"] = biases;
    return sha256_hex(j.dump());
}

std::string now_iso8601() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["model_id"] = r.model_id;
    j["config_hash"] = r.config_hash;
    j["seed"] = r.seed;
    j["timestamp"] = r.timestamp;
    j["domain_ppl"] = r.domain_ppl;

    nlohmann::json routing;
    routing["roster"] = r.routing.roster;
    routing["tokens"] = r.routing.tokens;
    routing["overall"] = fractions_json(r.routing.overall);
    nlohmann::json per_domain = nlohmann::json::object();
    for (const auto& [domain, frac] : r.routing.per_domain) per_domain[domain] = fractions_json(frac);
    routing["per_domain"] = per_domain;
    j["routing"] = routing;

    nlohmann::json sweep = nlohmann::json::array();
    for (const auto& row : r.sweep)
        sweep.push_back(
            {{"k", row.k}, {"mean_ppl", row.mean_ppl}, {"domain_ppl", row.domain_ppl}});
    j["sweep"] = sweep;

    nlohmann::json opt = nlohmann::json::array();
    for (const auto& d : r.opt_out)
        opt.push_back({{"expert_id", d.expert_id},
                       {"ppl_before", d.ppl_before},
                       {"ppl_after", d.ppl_after}});
    j["opt_out"] = opt;
    return j;
}

std::string report_to_csv(const EvalReport& r) {
    std::string csv = "section,name,domain,layer,expert,k,value\n";
    auto row = [&csv](const std::string& section, const std::string& name,
                      const std::string& domain, const std::string& layer,
                      const std::string& expert, const std::string& k, const std::string& value) {
        csv += section + "," + name + "," + domain + "," + layer + "," + expert + "," + k + "," +
               value + "\n";
    };
    row("meta", "model_id", "", "", "", "", r.model_id);
    row("meta", "config_hash", "", "", "", "", r.config_hash);
    row("meta", "seed", "", "", "", "", std::to_string(r.seed));
    row("meta", "timestamp", "", "", "", "", r.timestamp);
    for (const auto& [domain, ppl] : r.domain_ppl) row("ppl", "", domain, "", "", "", fmt_double(ppl));
    for (size_t l = 0; l < r.routing.overall.size(); ++l)
        for (size_t e = 0; e < r.routing.overall[l].size(); ++e)
            row("routing", "overall", "", std::to_string(l), r.routing.roster[e], "",
                fmt_double(r.routing.overall[l][e]));
    for (const auto& [domain, frac] : r.routing.per_domain)
        for (size_t l = 0; l < frac.size(); ++l)
            for (size_t e = 0; e < frac[l].size(); ++e)
                row("routing", "domain", domain, std::to_string(l), r.routing.roster[e], "",
                    fmt_double(frac[l][e]));
    for (const auto& s : r.sweep) {
        for (const auto& [domain, ppl] : s.domain_ppl)
            row("sweep", "domain", domain, "", "", std::to_string(s.k), fmt_double(ppl));
        row("sweep", "mean", "", "", "", std::to_string(s.k), fmt_double(s.mean_ppl));
    }
    for (const auto& d : r.opt_out) {
        for (const auto& [domain, ppl] : d.ppl_before)
            row("optout", "before", domain, "", d.expert_id, "", fmt_double(ppl));
        for (const auto& [domain, ppl] : d.ppl_after)
            row("optout", "after", domain, "", d.expert_id, "", fmt_double(ppl));
    }
    return csv;
}

void write_report(const EvalReport& r, const std::filesystem::path& prefix) {
    std::filesystem::path jp = prefix;
    jp += ".json";
    std::filesystem::path cp = prefix;
    cp += ".csv";
    if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
    {
        std::ofstream f(jp);
        if (!f) throw InputError("report: cannot write " + jp.string());
        f << report_to_json(r).dump(2) << "\n";
    }
    {
        std::ofstream f(cp);
        if (!f) throw InputError("report: cannot write " + cp.string());
        f << report_to_csv(r);
    }
}

nlohmann::json extraction_to_json(const ExtractionResult& r) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["n_docs"] = r.n_docs;
    j["n_skipped"] = r.n_skipped;
    j["n_extracted"] = r.n_extracted;
    j["rate"] = r.rate;
    j["prefix_len"] = r.prefix_len;
    j["continuation_len"] = r.continuation_len;
    j["samples_per_prefix"] = r.samples_per_prefix;
    j["threshold"] = r.threshold;
    j["best_similarity"] = r.best_similarity;
    return j;
}

} // namespace flexmerge
