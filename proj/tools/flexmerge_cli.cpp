// flexmerge: branch experts on closed corpora, merge them behind a shared
// public anchor, and evaluate/attack the result. Every subcommand writes a
// JSON sidecar with the resolved parameters and seeds so each artifact is
// reproducible from disk alone.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flexmerge/baselines.hpp"
#include "flexmerge/branch.hpp"
#include "flexmerge/checkpoint.hpp"
#include "flexmerge/corpora.hpp"
#include "flexmerge/errors.hpp"
#include "flexmerge/evalx.hpp"
#include "flexmerge/infer.hpp"
#include "flexmerge/merge.hpp"
#include "flexmerge/model.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/tokenizer.hpp"
#include "flexmerge/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace flexmerge;

namespace {

// --seed beats FLEXMERGE_SEED beats 42.
uint64_t resolve_seed(const CLI::Option* opt, uint64_t flag_val) {
    if (opt != nullptr && opt->count() > 0) return flag_val;
    if (const char* env = std::getenv("FLEXMERGE_SEED")) {
        std::string s(env);
        try {
            size_t used = 0;
            uint64_t v = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw UsageError("FLEXMERGE_SEED must be an unsigned integer, got '" + s + "'");
        }
    }
    return 42;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        if (comma == std::string::npos) comma = s.size();
        if (comma > start) out.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

double parse_real(const std::string& s, const std::string& what) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw UsageError(what + " must be a real number (\"-inf\" allowed), got '" + s + "'");
    }
}

// Corpus reference: a directory holding one corpus, or "DIR:ID" when the
// directory holds several.
DomainCorpus open_corpus(const std::string& ref) {
    std::string dir = ref, id;
    size_t colon = ref.rfind(':');
    if (colon != std::string::npos && ref.find('/', colon) == std::string::npos) {
        dir = ref.substr(0, colon);
        id = ref.substr(colon + 1);
    }
    if (id.empty()) {
        if (!fs::is_directory(dir)) throw UsageError("corpus path '" + dir + "' is not a directory");
        const std::string tail = ".manifest.json";
        std::vector<std::string> found;
        for (const auto& e : fs::directory_iterator(dir)) {
            std::string name = e.path().filename().string();
            if (name.size() > tail.size() && name.ends_with(tail))
                found.push_back(name.substr(0, name.size() - tail.size()));
        }
        if (found.empty()) throw UsageError("no corpus manifest found in '" + dir + "'");
        if (found.size() > 1)
            throw UsageError("'" + dir + "' holds " + std::to_string(found.size()) +
                             " corpora; use the DIR:ID form");
        id = found[0];
    }
    return load_corpus(dir, id);
}

std::vector<std::string> split_docs(const DomainCorpus& c, const std::string& split) {
    if (split == "train") return c.docs_at(c.train);
    if (split == "validation") return c.docs_at(c.validation);
    if (split == "heldout") return c.docs_at(c.heldout);
    if (split == "all") return c.documents;
    throw UsageError("unknown split '" + split + "' (train|validation|heldout|all)");
}

struct LoadedDomains {
    DomainDocs docs;
    json meta = json::array(); // per-domain id + content hash for the sidecar
};

LoadedDomains load_domains(const std::string& refs, const std::string& split) {
    LoadedDomains out;
    for (const auto& ref : split_list(refs)) {
        DomainCorpus c = open_corpus(ref);
        out.docs.emplace_back(c.domain_id, split_docs(c, split));
        out.meta.push_back({{"id", c.domain_id}, {"ref", ref}, {"sha256", corpus_sha256(c)}});
    }
    if (out.docs.empty()) throw UsageError("at least one corpus reference required");
    return out;
}

// Sidecar next to the artifact: DIR/run.json for directory artifacts,
// PREFIX.run.json for file artifacts.
void write_sidecar(const fs::path& out, bool dir_artifact, json j) {
    j["format_version"] = 1;
    j["timestamp"] = now_iso8601();
    fs::path p;
    if (dir_artifact) {
        fs::create_directories(out);
        p = out / "run.json";
    } else {
        p = out;
        p.replace_extension();
        p += ".run.json";
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
    }
    std::ofstream f(p);
    if (!f) throw InputError("cannot write sidecar '" + p.string() + "'");
    f << j.dump(2) << "\n";
}

void write_json_file(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw InputError("cannot write '" + path.string() + "'");
    f << j.dump(2) << "\n";
}

TrainConfig make_train_config(int steps, int rows, double lr, uint64_t seed) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_rows = rows;
    tc.seed = seed;
    tc.schedule = default_schedule(std::max(1, steps), lr);
    return tc;
}

GenParams make_gen_params(double temperature, int top_k, double top_p, bool greedy) {
    GenParams p;
    p.temperature = temperature;
    p.top_k = top_k;
    p.top_p = top_p;
    p.greedy = greedy;
    return p;
}

json gen_params_json(const GenParams& p) {
    return {{"temperature", p.temperature},
            {"top_k", p.top_k},
            {"top_p", p.top_p},
            {"greedy", p.greedy}};
}

json routing_to_json(const RoutingProfile& p) {
    json per = json::object();
    for (const auto& [domain, frac] : p.per_domain) per[domain] = frac;
    return {{"roster", p.roster}, {"tokens", p.tokens}, {"overall", p.overall},
            {"per_domain", per}};
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"flexmerge: branch, merge, and evaluate expert language models"};
    app.require_subcommand(1);
    json argv_echo = json::array();
    for (int i = 0; i < argc; ++i) argv_echo.push_back(argv[i]);

    // ---- gen-corpus ------------------------------------------------------
    struct {
        std::string domain, out;
        int docs = 256;
        uint64_t seed = 42;
    } gc;
    auto* gc_cmd = app.add_subcommand("gen-corpus", "Generate a deterministic synthetic corpus");
    gc_cmd->add_option("--domain", gc.domain, "Domain spec (see registry)")->required();
    gc_cmd->add_option("--docs", gc.docs, "Document count");
    auto* gc_seed = gc_cmd->add_option("--seed", gc.seed, "Corpus seed");
    gc_cmd->add_option("--out", gc.out, "Output directory")->required();
    gc_cmd->callback([&] {
        uint64_t seed = resolve_seed(gc_seed, gc.seed);
        DomainCorpus c = make_corpus(gc.domain, seed, gc.docs);
        fs::create_directories(gc.out);
        save_corpus(c, gc.out);
        write_sidecar(gc.out, true,
                      {{"command", "gen-corpus"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params", {{"domain", gc.domain}, {"docs", gc.docs}}},
                       {"outputs", {{"sha256", corpus_sha256(c)}}}});
    });

    // ---- pretrain-public -------------------------------------------------
    struct {
        std::string corpus, out;
        int layers = 4, hidden = 128, heads = 4, ffn = 512, seq = 256;
        int steps = 1000, rows = 16, router_docs = 64;
        double lr = 0.0009;
        uint64_t seed = 42;
    } pp;
    auto* pp_cmd = app.add_subcommand("pretrain-public", "Train the public anchor from scratch");
    pp_cmd->add_option("--corpus", pp.corpus, "Public corpus (DIR or DIR:ID)")->required();
    pp_cmd->add_option("--layers", pp.layers, "Transformer layers");
    pp_cmd->add_option("--hidden", pp.hidden, "Hidden width");
    pp_cmd->add_option("--heads", pp.heads, "Attention heads");
    pp_cmd->add_option("--ffn", pp.ffn, "Expert FFN width");
    pp_cmd->add_option("--seq", pp.seq, "Context length");
    pp_cmd->add_option("--steps", pp.steps, "Optimizer steps");
    pp_cmd->add_option("--rows", pp.rows, "Batch rows");
    pp_cmd->add_option("--lr", pp.lr, "Peak learning rate");
    pp_cmd->add_option("--router-init-docs", pp.router_docs,
                       "Documents pooled into the public router row");
    auto* pp_seed = pp_cmd->add_option("--seed", pp.seed, "Run seed");
    pp_cmd->add_option("--out", pp.out, "Checkpoint directory")->required();
    pp_cmd->callback([&] {
        uint64_t seed = resolve_seed(pp_seed, pp.seed);
        DomainCorpus c = open_corpus(pp.corpus);
        ModelConfig cfg;
        cfg.n_layers = pp.layers;
        cfg.hidden_dim = pp.hidden;
        cfg.n_heads = pp.heads;
        cfg.ffn_dim = pp.ffn;
        cfg.max_seq_len = pp.seq;
        cfg.top_k = 1;
        MoeModel anchor = MoeModel::create(cfg, {"pub"}, seed);
        anchor.set_all_trainable(true);
        auto train = c.docs_at(c.train);
        TrainResult tr = train_lm(anchor, train, make_train_config(pp.steps, pp.rows, pp.lr, seed));
        // The public router row is pooled from trained states, same as every
        // later expert's row — a one-expert gate never trains it.
        int n_init = std::min<int>(pp.router_docs, static_cast<int>(train.size()));
        auto r = init_router_embedding(
            anchor, std::vector<std::string>(train.begin(), train.begin() + n_init));
        for (int l = 0; l < cfg.n_layers; ++l)
            anchor.tensor(MoeModel::router_row(l, "pub")).values = r[static_cast<size_t>(l)];
        anchor.set_all_trainable(false);
        std::string fp = save_model(anchor, pp.out);
        write_sidecar(pp.out, true,
                      {{"command", "pretrain-public"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"layers", pp.layers},
                         {"hidden", pp.hidden},
                         {"heads", pp.heads},
                         {"ffn", pp.ffn},
                         {"seq", pp.seq},
                         {"steps", pp.steps},
                         {"rows", pp.rows},
                         {"lr", pp.lr},
                         {"router_init_docs", n_init}}},
                       {"inputs", {{"corpus", {{"ref", pp.corpus}, {"sha256", corpus_sha256(c)}}}}},
                       {"outputs", {{"fingerprint", fp}, {"final_loss", tr.final_loss}}}});
    });

    // ---- train-expert ----------------------------------------------------
    struct {
        std::string anchor, corpus, id, out;
        int steps = 2000, rows = 16, router_docs = 64;
        double lr = 0.0009;
        uint64_t seed = 42;
    } te;
    auto* te_cmd = app.add_subcommand("train-expert", "Branch-train one expert on a closed corpus");
    te_cmd->add_option("--anchor", te.anchor, "Anchor checkpoint directory")->required();
    te_cmd->add_option("--corpus", te.corpus, "Closed corpus (DIR or DIR:ID)")->required();
    te_cmd->add_option("--id", te.id, "Expert id")->required();
    te_cmd->add_option("--steps", te.steps, "Optimizer steps");
    te_cmd->add_option("--rows", te.rows, "Batch rows");
    te_cmd->add_option("--lr", te.lr, "Peak learning rate");
    te_cmd->add_option("--router-init-docs", te.router_docs, "Documents pooled into the router row");
    auto* te_seed = te_cmd->add_option("--seed", te.seed, "Run seed");
    te_cmd->add_option("--out", te.out, "Bundle directory")->required();
    te_cmd->callback([&] {
        uint64_t seed = resolve_seed(te_seed, te.seed);
        MoeModel anchor = load_model(te.anchor);
        std::string anchor_fp = stored_fingerprint(te.anchor);
        DomainCorpus c = open_corpus(te.corpus);
        auto train = c.docs_at(c.train);
        int n_init = std::min<int>(te.router_docs, static_cast<int>(train.size()));
        auto r = init_router_embedding(
            anchor, std::vector<std::string>(train.begin(), train.begin() + n_init));
        MoeModel branch = init_branch(anchor, te.id, r);
        ExpertBundle b =
            train_expert(branch, c, make_train_config(te.steps, te.rows, te.lr, seed), anchor_fp);
        std::string fp = save_bundle(b, te.out);
        write_sidecar(te.out, true,
                      {{"command", "train-expert"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"id", te.id},
                         {"steps", te.steps},
                         {"rows", te.rows},
                         {"lr", te.lr},
                         {"router_init_docs", n_init}}},
                       {"inputs",
                        {{"anchor", {{"ref", te.anchor}, {"fingerprint", anchor_fp}}},
                         {"corpus", {{"ref", te.corpus}, {"sha256", corpus_sha256(c)}}}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    // ---- dense-branch ----------------------------------------------------
    struct {
        std::string anchor, corpus, out;
        int steps = 2000, rows = 16;
        double lr = 0.0009;
        uint64_t seed = 42;
    } db;
    auto* db_cmd =
        app.add_subcommand("dense-branch", "Continue pretraining the full anchor on one corpus");
    db_cmd->add_option("--anchor", db.anchor, "Anchor checkpoint directory")->required();
    db_cmd->add_option("--corpus", db.corpus, "Corpus (DIR or DIR:ID)")->required();
    db_cmd->add_option("--steps", db.steps, "Optimizer steps");
    db_cmd->add_option("--rows", db.rows, "Batch rows");
    db_cmd->add_option("--lr", db.lr, "Peak learning rate");
    auto* db_seed = db_cmd->add_option("--seed", db.seed, "Run seed");
    db_cmd->add_option("--out", db.out, "Checkpoint directory")->required();
    db_cmd->callback([&] {
        uint64_t seed = resolve_seed(db_seed, db.seed);
        MoeModel anchor = load_model(db.anchor);
        DomainCorpus c = open_corpus(db.corpus);
        MoeModel dense = dense_branch(anchor, c.docs_at(c.train),
                                      make_train_config(db.steps, db.rows, db.lr, seed));
        dense.set_all_trainable(false);
        std::string fp = save_model(dense, db.out);
        write_sidecar(db.out, true,
                      {{"command", "dense-branch"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params", {{"steps", db.steps}, {"rows", db.rows}, {"lr", db.lr}}},
                       {"inputs",
                        {{"anchor", {{"ref", db.anchor}, {"fingerprint", stored_fingerprint(db.anchor)}}},
                         {"corpus", {{"ref", db.corpus}, {"sha256", corpus_sha256(c)}}}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    // ---- merge -----------------------------------------------------------
    struct {
        std::string anchor, experts, bias = "-0.5", out;
        int top_k = 2;
    } mg;
    auto* mg_cmd = app.add_subcommand("merge", "Assemble anchor + expert bundles into one model");
    mg_cmd->add_option("--anchor", mg.anchor, "Anchor checkpoint directory")->required();
    mg_cmd->add_option("--experts", mg.experts, "Comma-separated bundle directories")->required();
    mg_cmd->add_option("--bias", mg.bias, "Expert selection bias (one value or per-expert list)");
    mg_cmd->add_option("--top-k", mg.top_k, "Active experts per token");
    mg_cmd->add_option("--out", mg.out, "Merged checkpoint directory")->required();
    mg_cmd->callback([&] {
        MoeModel anchor = load_model(mg.anchor);
        std::string anchor_fp = stored_fingerprint(mg.anchor);
        std::vector<ExpertBundle> bundles;
        std::vector<std::string> bundle_fps;
        for (const auto& dir : split_list(mg.experts)) {
            bundles.push_back(load_bundle(dir));
            bundle_fps.push_back(stored_fingerprint(dir));
        }
        auto bias_strs = split_list(mg.bias);
        std::vector<double> biases;
        for (const auto& s : bias_strs) biases.push_back(parse_real(s, "--bias"));
        if (biases.size() == 1 && bundles.size() > 1)
            biases.assign(bundles.size(), biases[0]);
        MoeModel merged = assemble(anchor, anchor_fp, bundles, biases, mg.top_k, bundle_fps);
        std::string fp = save_model(merged, mg.out);
        write_sidecar(mg.out, true,
                      {{"command", "merge"},
                       {"argv", argv_echo},
                       {"params",
                        {{"bias", mg.bias}, {"top_k", mg.top_k}, {"roster", merged.roster}}},
                       {"inputs",
                        {{"anchor", {{"ref", mg.anchor}, {"fingerprint", anchor_fp}}},
                         {"experts", bundle_fps}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    // ---- set-bias ----------------------------------------------------------
    struct {
        std::string model, expert, bias, out;
    } sb;
    auto* sb_cmd = app.add_subcommand("set-bias", "Adjust one expert's selection bias");
    sb_cmd->add_option("--model", sb.model, "Merged checkpoint directory")->required();
    sb_cmd->add_option("--expert", sb.expert, "Expert id")->required();
    sb_cmd->add_option("--bias", sb.bias, "New bias (<= 0; \"-inf\" disables selection)")
        ->required();
    sb_cmd->add_option("--out", sb.out, "Output checkpoint directory")->required();
    sb_cmd->callback([&] {
        MoeModel m = load_model(sb.model);
        MoeModel adjusted = set_bias(m, sb.expert, parse_real(sb.bias, "--bias"));
        std::string fp = save_model(adjusted, sb.out);
        write_sidecar(sb.out, true,
                      {{"command", "set-bias"},
                       {"argv", argv_echo},
                       {"params", {{"expert", sb.expert}, {"bias", sb.bias}}},
                       {"inputs", {{"model", {{"ref", sb.model}, {"fingerprint", stored_fingerprint(sb.model)}}}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    // ---- opt-out -----------------------------------------------------------
    struct {
        std::string model, expert, out;
    } oo;
    auto* oo_cmd = app.add_subcommand("opt-out", "Remove one expert's tensors entirely");
    oo_cmd->add_option("--model", oo.model, "Merged checkpoint directory")->required();
    oo_cmd->add_option("--expert", oo.expert, "Expert id to remove")->required();
    oo_cmd->add_option("--out", oo.out, "Output checkpoint directory")->required();
    oo_cmd->callback([&] {
        MoeModel m = load_model(oo.model);
        MoeModel reduced = opt_out(m, oo.expert);
        std::string fp = save_model(reduced, oo.out);
        write_sidecar(oo.out, true,
                      {{"command", "opt-out"},
                       {"argv", argv_echo},
                       {"params", {{"expert", oo.expert}, {"roster", reduced.roster}}},
                       {"inputs", {{"model", {{"ref", oo.model}, {"fingerprint", stored_fingerprint(oo.model)}}}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    // ---- tune-router ---------------------------------------------------------
    struct {
        std::string model, owners, closed, pub, out;
        int cap = 1, closed_size = 0, classifier_docs = 64, steps = 100;
        uint64_t seed = 42;
    } tr;
    auto* tr_cmd =
        app.add_subcommand("tune-router", "Tune router rows on classifier-selected proxy data");
    tr_cmd->add_option("--model", tr.model, "Merged checkpoint directory")->required();
    tr_cmd->add_option("--owners", tr.owners, "Comma-separated expert ids")->required();
    tr_cmd->add_option("--closed", tr.closed, "Closed corpus refs, aligned with --owners")
        ->required();
    tr_cmd->add_option("--public", tr.pub, "Public corpus ref")->required();
    tr_cmd->add_option("--cap", tr.cap, "Proxy documents per owner");
    tr_cmd->add_option("--closed-size", tr.closed_size,
                       "Nominal closed corpus size for the 0.5% cap (0: actual)");
    tr_cmd->add_option("--classifier-docs", tr.classifier_docs, "Training docs per classifier class");
    tr_cmd->add_option("--steps", tr.steps, "Router tuning steps");
    auto* tr_seed = tr_cmd->add_option("--seed", tr.seed, "Run seed");
    tr_cmd->add_option("--out", tr.out, "Output checkpoint directory")->required();
    tr_cmd->callback([&] {
        uint64_t seed = resolve_seed(tr_seed, tr.seed);
        MoeModel m = load_model(tr.model);
        auto owners = split_list(tr.owners);
        auto closed_refs = split_list(tr.closed);
        if (owners.size() != closed_refs.size())
            throw UsageError("--owners and --closed must list the same number of entries");
        DomainCorpus pub = open_corpus(tr.pub);
        auto pub_train = pub.docs_at(pub.train);
        std::vector<ProxySet> sets;
        json per_owner = json::array();
        for (size_t i = 0; i < owners.size(); ++i) {
            DomainCorpus closed = open_corpus(closed_refs[i]);
            auto closed_train = closed.docs_at(closed.train);
            size_t n = std::min({static_cast<size_t>(tr.classifier_docs), closed_train.size(),
                                 pub_train.size()});
            ProxyScorer scorer = train_proxy_classifier(
                m, owners[i], {closed_train.begin(), closed_train.begin() + n},
                {pub_train.begin(), pub_train.begin() + n}, derive_seed(seed, i));
            int closed_size = tr.closed_size > 0 ? tr.closed_size
                                                 : static_cast<int>(closed.documents.size());
            sets.push_back(select_proxy(scorer, m, pub, tr.cap, closed_size));
            per_owner.push_back({{"owner", owners[i]},
                                 {"val_accuracy", scorer.val_accuracy},
                                 {"proxy_indices", sets.back().indices}});
        }
        MoeModel tuned = tune_router(m, sets, pub, tr.steps, derive_seed(seed, 0x74756e65));
        std::string fp = save_model(tuned, tr.out);
        write_sidecar(tr.out, true,
                      {{"command", "tune-router"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"cap", tr.cap},
                         {"closed_size", tr.closed_size},
                         {"classifier_docs", tr.classifier_docs},
                         {"steps", tr.steps},
                         {"owners", per_owner}}},
                       {"inputs", {{"model", {{"ref", tr.model}, {"fingerprint", stored_fingerprint(tr.model)}}}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    // ---- eval --------------------------------------------------------------
    struct {
        std::string model, domains, split = "heldout", sweep, optout, model_id, out;
        int routing_tokens = 4096;
        uint64_t seed = 42;
    } ev;
    auto* ev_cmd = app.add_subcommand("eval", "Perplexity + routing report (JSON and CSV)");
    ev_cmd->add_option("--model", ev.model, "Checkpoint directory")->required();
    ev_cmd->add_option("--domains", ev.domains, "Comma-separated corpus refs")->required();
    ev_cmd->add_option("--split", ev.split, "Evaluation split");
    ev_cmd->add_option("--sweep-k", ev.sweep, "Comma-separated active-expert counts");
    ev_cmd->add_option("--opt-out-experts", ev.optout, "Report ppl deltas after removing these");
    ev_cmd->add_option("--routing-tokens", ev.routing_tokens, "Token budget per domain");
    ev_cmd->add_option("--model-id", ev.model_id, "Label stored in the report");
    auto* ev_seed = ev_cmd->add_option("--seed", ev.seed, "Report seed field");
    ev_cmd->add_option("--out", ev.out, "Report path prefix (writes .json/.csv)")->required();
    ev_cmd->callback([&] {
        uint64_t seed = resolve_seed(ev_seed, ev.seed);
        MoeModel m = load_model(ev.model);
        LoadedDomains dd = load_domains(ev.domains, ev.split);
        EvalReport r;
        r.model_id = ev.model_id.empty() ? fs::path(ev.out).filename().string() : ev.model_id;
        r.config_hash = model_config_hash(m);
        r.seed = seed;
        r.timestamp = now_iso8601();
        for (auto& [domain, docs] : dd.docs) r.domain_ppl[domain] = perplexity(m, docs);
        r.routing = routing_profile(m, dd.docs, ev.routing_tokens);
        if (!ev.sweep.empty()) {
            std::vector<int> ks;
            for (const auto& s : split_list(ev.sweep)) ks.push_back(std::stoi(s));
            r.sweep = active_expert_sweep(m, dd.docs, ks);
        }
        for (const auto& id : split_list(ev.optout)) {
            MoeModel reduced = opt_out(m, id);
            OptOutDelta d;
            d.expert_id = id;
            d.ppl_before = r.domain_ppl;
            for (auto& [domain, docs] : dd.docs) d.ppl_after[domain] = perplexity(reduced, docs);
            r.opt_out.push_back(std::move(d));
        }
        write_report(r, ev.out);
        write_sidecar(ev.out, false,
                      {{"command", "eval"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"split", ev.split},
                         {"routing_tokens", ev.routing_tokens},
                         {"sweep_k", ev.sweep},
                         {"opt_out_experts", ev.optout}}},
                       {"inputs",
                        {{"model", {{"ref", ev.model}, {"fingerprint", stored_fingerprint(ev.model)}}},
                         {"domains", dd.meta}}},
                       {"outputs", {{"report", ev.out + std::string(".json")}}}});
    });

    // ---- route-dump -----------------------------------------------------------
    struct {
        std::string model, domains, split = "heldout", out;
        int tokens = 4096;
    } rd;
    auto* rd_cmd = app.add_subcommand("route-dump", "Per-layer expert selection fractions");
    rd_cmd->add_option("--model", rd.model, "Checkpoint directory")->required();
    rd_cmd->add_option("--domains", rd.domains, "Comma-separated corpus refs")->required();
    rd_cmd->add_option("--split", rd.split, "Evaluation split");
    rd_cmd->add_option("--tokens", rd.tokens, "Token budget per domain");
    rd_cmd->add_option("--out", rd.out, "Output JSON path")->required();
    rd_cmd->callback([&] {
        MoeModel m = load_model(rd.model);
        LoadedDomains dd = load_domains(rd.domains, rd.split);
        write_json_file(rd.out, routing_to_json(routing_profile(m, dd.docs, rd.tokens)));
        write_sidecar(rd.out, false,
                      {{"command", "route-dump"},
                       {"argv", argv_echo},
                       {"params", {{"split", rd.split}, {"tokens", rd.tokens}}},
                       {"inputs",
                        {{"model", {{"ref", rd.model}, {"fingerprint", stored_fingerprint(rd.model)}}},
                         {"domains", dd.meta}}}});
    });

    // ---- sweep-k -------------------------------------------------------------
    struct {
        std::string model, domains, split = "heldout", ks = "1,2", out;
    } sk;
    auto* sk_cmd = app.add_subcommand("sweep-k", "Perplexity at each active-expert count");
    sk_cmd->add_option("--model", sk.model, "Checkpoint directory")->required();
    sk_cmd->add_option("--domains", sk.domains, "Comma-separated corpus refs")->required();
    sk_cmd->add_option("--split", sk.split, "Evaluation split");
    sk_cmd->add_option("--ks", sk.ks, "Comma-separated active-expert counts");
    sk_cmd->add_option("--out", sk.out, "Output JSON path")->required();
    sk_cmd->callback([&] {
        MoeModel m = load_model(sk.model);
        LoadedDomains dd = load_domains(sk.domains, sk.split);
        std::vector<int> ks;
        for (const auto& s : split_list(sk.ks)) ks.push_back(std::stoi(s));
        json rows = json::array();
        for (const auto& row : active_expert_sweep(m, dd.docs, ks))
            rows.push_back(
                {{"k", row.k}, {"domain_ppl", row.domain_ppl}, {"mean_ppl", row.mean_ppl}});
        write_json_file(sk.out, {{"sweep", rows}});
        write_sidecar(sk.out, false,
                      {{"command", "sweep-k"},
                       {"argv", argv_echo},
                       {"params", {{"split", sk.split}, {"ks", sk.ks}}},
                       {"inputs",
                        {{"model", {{"ref", sk.model}, {"fingerprint", stored_fingerprint(sk.model)}}},
                         {"domains", dd.meta}}}});
    });

    // ---- extract ----------------------------------------------------------------
    struct {
        std::string model, corpus, split = "train", out;
        ExtractionParams p;
        double temperature = 1.0, top_p = 0.95;
        int top_k = 50;
        bool greedy = false;
        uint64_t seed = 42;
    } ex;
    auto* ex_cmd = app.add_subcommand("extract", "Prefix-continuation extraction attack");
    ex_cmd->add_option("--model", ex.model, "Checkpoint directory")->required();
    ex_cmd->add_option("--corpus", ex.corpus, "Target corpus (DIR or DIR:ID)")->required();
    ex_cmd->add_option("--split", ex.split, "Target split");
    ex_cmd->add_option("--prefix-len", ex.p.prefix_len, "Prompt tokens per document");
    ex_cmd->add_option("--continuation-len", ex.p.continuation_len, "Reference cap in tokens");
    ex_cmd->add_option("--samples", ex.p.samples_per_prefix, "Samples per prefix");
    ex_cmd->add_option("--threshold", ex.p.threshold, "Similarity threshold");
    ex_cmd->add_option("--temperature", ex.temperature, "Sampling temperature");
    ex_cmd->add_option("--sample-top-k", ex.top_k, "Sampling top-k (0 disables)");
    ex_cmd->add_option("--top-p", ex.top_p, "Nucleus mass (1 disables)");
    ex_cmd->add_flag("--greedy", ex.greedy, "Greedy decoding");
    auto* ex_seed = ex_cmd->add_option("--seed", ex.seed, "Attack seed");
    ex_cmd->add_option("--out", ex.out, "Output JSON path")->required();
    ex_cmd->callback([&] {
        ex.p.seed = resolve_seed(ex_seed, ex.seed);
        ex.p.sampling = make_gen_params(ex.temperature, ex.top_k, ex.top_p, ex.greedy);
        MoeModel m = load_model(ex.model);
        DomainCorpus c = open_corpus(ex.corpus);
        ExtractionResult r = extraction_attack(m, split_docs(c, ex.split), ex.p);
        write_json_file(ex.out, extraction_to_json(r));
        write_sidecar(ex.out, false,
                      {{"command", "extract"},
                       {"argv", argv_echo},
                       {"seed", ex.p.seed},
                       {"params",
                        {{"split", ex.split},
                         {"prefix_len", ex.p.prefix_len},
                         {"continuation_len", ex.p.continuation_len},
                         {"samples_per_prefix", ex.p.samples_per_prefix},
                         {"threshold", ex.p.threshold},
                         {"sampling", gen_params_json(ex.p.sampling)}}},
                       {"inputs",
                        {{"model", {{"ref", ex.model}, {"fingerprint", stored_fingerprint(ex.model)}}},
                         {"corpus", {{"ref", ex.corpus}, {"sha256", corpus_sha256(c)}}}}},
                       {"outputs", {{"rate", r.rate}, {"n_extracted", r.n_extracted}}}});
    });

    // ---- baseline ----------------------------------------------------------------
    auto* bl_cmd = app.add_subcommand("baseline", "Reference systems");
    bl_cmd->require_subcommand(1);

    struct {
        std::string models, weighted_on, out;
    } so;
    auto* so_cmd = bl_cmd->add_subcommand("soup", "Parameter-average dense checkpoints");
    so_cmd->add_option("--models", so.models, "Comma-separated checkpoint directories")->required();
    so_cmd->add_option("--weighted-on", so.weighted_on,
                       "Weight by softmax(-NLL) on this text instead of uniformly");
    so_cmd->add_option("--out", so.out, "Output checkpoint directory")->required();
    so_cmd->callback([&] {
        std::vector<MoeModel> models;
        json inputs = json::array();
        for (const auto& dir : split_list(so.models)) {
            models.push_back(load_model(dir));
            inputs.push_back({{"ref", dir}, {"fingerprint", stored_fingerprint(dir)}});
        }
        std::vector<double> weights;
        MoeModel soup = so.weighted_on.empty()
                            ? soup_average(models)
                            : soup_weighted(models, encode(so.weighted_on), &weights);
        std::string fp = save_model(soup, so.out);
        write_sidecar(so.out, true,
                      {{"command", "baseline soup"},
                       {"argv", argv_echo},
                       {"params", {{"weighted_on", so.weighted_on}, {"weights", weights}}},
                       {"inputs", {{"models", inputs}}},
                       {"outputs", {{"fingerprint", fp}}}});
    });

    struct {
        std::string models, prompt, out;
        double tau = 1.0, temperature = 1.0, top_p = 0.95;
        int k = 0, max_new = 64, top_k = 50;
        bool greedy = false;
        uint64_t seed = 42;
    } bt;
    auto* bt_cmd = bl_cmd->add_subcommand("btm", "Logit-ensemble generation");
    bt_cmd->add_option("--models", bt.models, "Comma-separated checkpoint directories")->required();
    bt_cmd->add_option("--prompt", bt.prompt, "Prompt text")->required();
    bt_cmd->add_option("--tau", bt.tau, "Weight temperature");
    bt_cmd->add_option("--k", bt.k, "Experts kept (0: all)");
    bt_cmd->add_option("--max-new", bt.max_new, "Tokens to generate");
    bt_cmd->add_option("--temperature", bt.temperature, "Sampling temperature");
    bt_cmd->add_option("--sample-top-k", bt.top_k, "Sampling top-k (0 disables)");
    bt_cmd->add_option("--top-p", bt.top_p, "Nucleus mass (1 disables)");
    bt_cmd->add_flag("--greedy", bt.greedy, "Greedy decoding");
    auto* bt_seed = bt_cmd->add_option("--seed", bt.seed, "Sampling seed");
    bt_cmd->add_option("--out", bt.out, "Output JSON path")->required();
    bt_cmd->callback([&] {
        uint64_t seed = resolve_seed(bt_seed, bt.seed);
        std::vector<MoeModel> models;
        json inputs = json::array();
        for (const auto& dir : split_list(bt.models)) {
            models.push_back(load_model(dir));
            inputs.push_back({{"ref", dir}, {"fingerprint", stored_fingerprint(dir)}});
        }
        int k = bt.k > 0 ? bt.k : static_cast<int>(models.size());
        std::vector<int> prefix = encode(bt.prompt);
        if (!prefix.empty() && prefix.back() == kEos) prefix.pop_back();
        GenParams gp = make_gen_params(bt.temperature, bt.top_k, bt.top_p, bt.greedy);
        EnsembleWeights ew;
        std::vector<int> tokens = btm_generate(models, prefix, bt.tau, k, bt.max_new, gp, seed, &ew);
        write_json_file(bt.out, {{"prompt", bt.prompt},
                                 {"tokens", tokens},
                                 {"text", decode(tokens)},
                                 {"weights", ew.w},
                                 {"selected", ew.selected},
                                 {"tau", ew.tau},
                                 {"k", ew.k}});
        write_sidecar(bt.out, false,
                      {{"command", "baseline btm"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"tau", bt.tau},
                         {"k", k},
                         {"max_new", bt.max_new},
                         {"sampling", gen_params_json(gp)}}},
                       {"inputs", {{"models", inputs}}}});
    });

    struct {
        std::string anchor, models, ids, pub, out;
        int top_k = 0, steps = 100, rows = 16;
        double lr = 0.0009;
        uint64_t seed = 42;
    } bx;
    auto* bx_cmd =
        bl_cmd->add_subcommand("btx", "Upcycle dense checkpoints into a trainable mixture");
    bx_cmd->add_option("--anchor", bx.anchor, "Anchor checkpoint directory")->required();
    bx_cmd->add_option("--models", bx.models, "Comma-separated dense checkpoint directories")
        ->required();
    bx_cmd->add_option("--ids", bx.ids, "Comma-separated expert ids (first must be pub)")
        ->required();
    bx_cmd->add_option("--public", bx.pub, "Public corpus ref for the post-merge training")
        ->required();
    bx_cmd->add_option("--top-k", bx.top_k, "Active experts per token (0: min(2, n))");
    bx_cmd->add_option("--steps", bx.steps, "Post-merge training steps");
    bx_cmd->add_option("--rows", bx.rows, "Batch rows");
    bx_cmd->add_option("--lr", bx.lr, "Peak learning rate");
    auto* bx_seed = bx_cmd->add_option("--seed", bx.seed, "Run seed");
    bx_cmd->add_option("--out", bx.out, "Output checkpoint directory")->required();
    bx_cmd->callback([&] {
        uint64_t seed = resolve_seed(bx_seed, bx.seed);
        MoeModel anchor = load_model(bx.anchor);
        std::vector<MoeModel> dense;
        json inputs = json::array();
        for (const auto& dir : split_list(bx.models)) {
            dense.push_back(load_model(dir));
            inputs.push_back({{"ref", dir}, {"fingerprint", stored_fingerprint(dir)}});
        }
        MoeModel moe = btx_assemble(anchor, dense, split_list(bx.ids), seed, bx.top_k);
        DomainCorpus pub = open_corpus(bx.pub);
        TrainResult t = train_lm(moe, pub.docs_at(pub.train),
                                 make_train_config(bx.steps, bx.rows, bx.lr, derive_seed(seed, 1)));
        moe.set_all_trainable(false);
        std::string fp = save_model(moe, bx.out);
        write_sidecar(bx.out, true,
                      {{"command", "baseline btx"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"ids", bx.ids},
                         {"top_k", bx.top_k},
                         {"steps", bx.steps},
                         {"rows", bx.rows},
                         {"lr", bx.lr}}},
                       {"inputs",
                        {{"anchor", {{"ref", bx.anchor}, {"fingerprint", stored_fingerprint(bx.anchor)}}},
                         {"models", inputs},
                         {"public", {{"ref", bx.pub}, {"sha256", corpus_sha256(pub)}}}}},
                       {"outputs", {{"fingerprint", fp}, {"final_loss", t.final_loss}}}});
    });

    struct {
        std::string models, corpora, embedder, query, out;
        int max_new = 64, classifier_docs = 64;
        double temperature = 1.0, top_p = 0.95;
        int top_k = 50;
        bool greedy = false;
        uint64_t seed = 42;
    } br;
    auto* br_cmd = bl_cmd->add_subcommand("route", "Classify the query, then one model answers");
    br_cmd->add_option("--models", br.models, "Comma-separated checkpoint directories")->required();
    br_cmd->add_option("--corpora", br.corpora, "Corpus refs aligned with --models")->required();
    br_cmd->add_option("--embedder", br.embedder, "Checkpoint used to embed text for the scorers")
        ->required();
    br_cmd->add_option("--query", br.query, "Query text")->required();
    br_cmd->add_option("--max-new", br.max_new, "Tokens to generate");
    br_cmd->add_option("--classifier-docs", br.classifier_docs, "Training docs per class");
    br_cmd->add_option("--temperature", br.temperature, "Sampling temperature");
    br_cmd->add_option("--sample-top-k", br.top_k, "Sampling top-k (0 disables)");
    br_cmd->add_option("--top-p", br.top_p, "Nucleus mass (1 disables)");
    br_cmd->add_flag("--greedy", br.greedy, "Greedy decoding");
    auto* br_seed = br_cmd->add_option("--seed", br.seed, "Sampling seed");
    br_cmd->add_option("--out", br.out, "Output JSON path")->required();
    br_cmd->callback([&] {
        uint64_t seed = resolve_seed(br_seed, br.seed);
        auto model_dirs = split_list(br.models);
        auto corpus_refs = split_list(br.corpora);
        if (model_dirs.size() != corpus_refs.size())
            throw UsageError("--models and --corpora must list the same number of entries");
        MoeModel embedder = load_model(br.embedder);
        std::vector<MoeModel> models;
        for (const auto& dir : model_dirs) models.push_back(load_model(dir));
        std::vector<DomainCorpus> corpora;
        for (const auto& ref : corpus_refs) corpora.push_back(open_corpus(ref));
        // One-vs-rest scorers: each domain against the pool of the others.
        std::vector<ProxyScorer> scorers;
        for (size_t i = 0; i < corpora.size(); ++i) {
            auto own = corpora[i].docs_at(corpora[i].train);
            std::vector<std::string> rest;
            for (size_t j = 0; j < corpora.size(); ++j) {
                if (j == i) continue;
                auto other = corpora[j].docs_at(corpora[j].train);
                rest.insert(rest.end(), other.begin(), other.end());
            }
            Rng(derive_seed(seed, i)).shuffle(rest);
            size_t n = std::min({static_cast<size_t>(br.classifier_docs), own.size(), rest.size()});
            scorers.push_back(train_proxy_classifier(
                embedder, corpora[i].domain_id, {own.begin(), own.begin() + n},
                {rest.begin(), rest.begin() + n}, derive_seed(seed, 0x313052 + i)));
        }
        GenParams gp = make_gen_params(br.temperature, br.top_k, br.top_p, br.greedy);
        int chosen = -1;
        std::vector<int> tokens =
            classifier_route(scorers, embedder, models, br.query, br.max_new, gp, seed, &chosen);
        write_json_file(br.out, {{"query", br.query},
                                 {"selected_index", chosen},
                                 {"selected_model", model_dirs[static_cast<size_t>(chosen)]},
                                 {"tokens", tokens},
                                 {"text", decode(tokens)}});
        write_sidecar(br.out, false,
                      {{"command", "baseline route"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"max_new", br.max_new},
                         {"classifier_docs", br.classifier_docs},
                         {"sampling", gen_params_json(gp)}}},
                       {"inputs", {{"models", json(model_dirs)}, {"embedder", br.embedder}}},
                       {"outputs", {{"selected_index", chosen}}}});
    });

    // ---- reference-moe -------------------------------------------------------------
    struct {
        std::string anchor, corpora, ids, out;
        int steps = 0, rows = 16;
        uint64_t flops = 0;
        double lr = 0.0009, lb_weight = 0.0;
        uint64_t seed = 42;
    } rm;
    auto* rm_cmd = app.add_subcommand(
        "reference-moe", "Jointly train a mixture on the combined corpora (no restrictions)");
    rm_cmd->add_option("--anchor", rm.anchor, "Anchor checkpoint directory")->required();
    rm_cmd->add_option("--corpora", rm.corpora, "Comma-separated corpus refs")->required();
    rm_cmd->add_option("--ids", rm.ids, "Comma-separated expert ids (first must be pub)")
        ->required();
    rm_cmd->add_option("--steps", rm.steps, "Training steps (ignored when --flops is set)");
    rm_cmd->add_option("--flops", rm.flops, "GEMM-flop budget for the run");
    rm_cmd->add_option("--rows", rm.rows, "Batch rows");
    rm_cmd->add_option("--lr", rm.lr, "Peak learning rate");
    rm_cmd->add_option("--lb-weight", rm.lb_weight, "Router load-balance penalty weight");
    auto* rm_seed = rm_cmd->add_option("--seed", rm.seed, "Run seed");
    rm_cmd->add_option("--out", rm.out, "Output checkpoint directory")->required();
    rm_cmd->callback([&] {
        uint64_t seed = resolve_seed(rm_seed, rm.seed);
        MoeModel anchor = load_model(rm.anchor);
        std::vector<std::string> combined;
        json inputs = json::array();
        for (const auto& ref : split_list(rm.corpora)) {
            DomainCorpus c = open_corpus(ref);
            auto train = c.docs_at(c.train);
            combined.insert(combined.end(), train.begin(), train.end());
            inputs.push_back({{"id", c.domain_id}, {"ref", ref}, {"sha256", corpus_sha256(c)}});
        }
        ReferenceMoeConfig rc;
        rc.expert_ids = split_list(rm.ids);
        rc.steps = rm.steps;
        rc.flops = rm.flops;
        rc.batch_rows = rm.rows;
        rc.base_lr = rm.lr;
        rc.load_balance_weight = rm.lb_weight;
        rc.seed = seed;
        ReferenceMoeResult res = unrestricted_moe_train(anchor, combined, rc);
        res.model.set_all_trainable(false);
        std::string fp = save_model(res.model, rm.out);
        write_sidecar(rm.out, true,
                      {{"command", "reference-moe"},
                       {"argv", argv_echo},
                       {"seed", seed},
                       {"params",
                        {{"ids", rm.ids},
                         {"steps_requested", rm.steps},
                         {"flops_budget", rm.flops},
                         {"rows", rm.rows},
                         {"lr", rm.lr},
                         {"lb_weight", rm.lb_weight}}},
                       {"inputs",
                        {{"anchor", {{"ref", rm.anchor}, {"fingerprint", stored_fingerprint(rm.anchor)}}},
                         {"corpora", inputs}}},
                       {"outputs",
                        {{"fingerprint", fp},
                         {"steps", res.steps},
                         {"flops_measured", res.flops},
                         {"final_loss", res.train.final_loss}}}});
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // CallForHelp prints help and returns 0; every other parse failure is
        // a usage error.
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return 0;
}

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ForbiddenError& e) {
        std::cerr << "forbidden: " << e.what() << "\n";
        return 3;
    } catch (const InvariantViolation& e) {
        std::cerr << "invariant violation: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
