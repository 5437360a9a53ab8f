#include "flexmerge/corpora.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "flexmerge/errors.hpp"
#include "flexmerge/rng.hpp"
#include "flexmerge/sha256.hpp"

namespace flexmerge {

namespace {

using nlohmann::json;

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

constexpr int kMinDoc = 64, kMaxDoc = 512;

template <size_t N> const char* pick(Rng& rng, const char* const (&arr)[N]) {
    return arr[rng.next_below(N)];
}

// Appends units from gen() until a random target length is reached, never
// exceeding kMaxDoc. Units are small, so the 64-byte floor always holds.
std::string build_doc(Rng& rng, const std::function<std::string(Rng&)>& gen) {
    size_t target = kMinDoc + rng.next_below(400);
    std::string doc;
    while (doc.size() < target) {
        std::string unit = gen(rng);
        if (doc.size() + unit.size() > kMaxDoc) break;
        doc += unit;
    }
    return doc;
}

// --- public_mix: neutral lowercase prose in a few template families --------

const char* const kAdjs[] = {"quiet", "steady", "narrow", "plain",  "gentle", "early",
                             "simple", "broad",  "faint",  "smooth", "common", "local"};
const char* const kNouns[] = {"clerk",  "ledger", "garden", "harbor", "window", "letter",
                              "market", "bridge", "meadow", "parcel", "lantern", "record"};
const char* const kVerbs[] = {"filed",   "moved",  "opened",  "carried", "counted", "sorted",
                              "cleaned", "marked", "stacked", "mended",  "traced",  "stored"};

std::string public_unit(Rng& rng) {
    std::ostringstream s;
    switch (rng.next_below(3)) {
        case 0:
            s << "the " << pick(rng, kAdjs) << " " << pick(rng, kNouns) << " " << pick(rng, kVerbs)
              << " the " << pick(rng, kNouns) << ". ";
            break;
        case 1:
            s << "items on hand: " << pick(rng, kNouns) << ", " << pick(rng, kNouns) << ", and "
              << pick(rng, kNouns) << ". ";
            break;
        default:
            s << "a " << pick(rng, kNouns) << " near the " << pick(rng, kNouns) << " seemed "
              << pick(rng, kAdjs) << ". ";
            break;
    }
    return s.str();
}

// --- math_arith: correct arithmetic statements ------------------------------

std::string math_unit(Rng& rng) {
    std::ostringstream s;
    switch (rng.next_below(3)) {
        case 0: {
            long a = static_cast<long>(rng.next_below(1000));
            long b = static_cast<long>(rng.next_below(1000));
            s << a << " + " << b << " = " << (a + b) << " ; ";
            break;
        }
        case 1: {
            long a = static_cast<long>(rng.next_below(1000));
            long b = static_cast<long>(rng.next_below(1000));
            if (b > a) std::swap(a, b);
            s << a << " - " << b << " = " << (a - b) << " ; ";
            break;
        }
        default: {
            long a = 2 + static_cast<long>(rng.next_below(98));
            long b = 2 + static_cast<long>(rng.next_below(98));
            s << a << " * " << b << " = " << (a * b) << " ; ";
            break;
        }
    }
    if (rng.next_below(4) == 0) s << "\n";
    return s.str();
}

// --- code_brackets: balanced nested statements ------------------------------

void code_stmt(Rng& rng, std::string& out, int depth) {
    auto num = [&] { return std::to_string(rng.next_below(100)); };
    auto id = [&] { return std::string(1, static_cast<char>('a' + rng.next_below(26))); };
    std::string pad(static_cast<size_t>(2) * depth, ' ');
    switch (rng.next_below(depth < 2 ? 5 : 3)) {
        case 0:
            out += pad + "let " + id() + " = (" + num() + " + " + num() + ");\n";
            break;
        case 1:
            out += pad + "call f" + num() + "(" + id() + ", " + id() + ");\n";
            break;
        case 2:
            out += pad + "let " + id() + " = v[" + num() + "];\n";
            break;
        case 3: {
            out += pad + "if (" + id() + " < " + num() + ") {\n";
            int inner = 1 + static_cast<int>(rng.next_below(2));
            for (int i = 0; i < inner; ++i) code_stmt(rng, out, depth + 1);
            out += pad + "}\n";
            break;
        }
        default: {
            out += pad + "fn f" + num() + "() {\n";
            int inner = 1 + static_cast<int>(rng.next_below(2));
            for (int i = 0; i < inner; ++i) code_stmt(rng, out, depth + 1);
            out += pad + "}\n";
            break;
        }
    }
}

std::string code_unit(Rng& rng) {
    std::string out;
    code_stmt(rng, out, 0);
    return out;
}

// --- news_templates: title-case reportage with quotes and datelines ---------

const char* const kCities[] = {"RIVERTON", "MARLOW", "KESTREL FALLS", "ELDORA", "BRANT HILL"};
const char* const kBodies[] = {"The City Council", "The Harbor Board", "The School District",
                               "The Transit Authority", "The Budget Office"};
const char* const kActions[] = {"Approved", "Reviewed", "Expanded", "Postponed", "Announced"};
const char* const kTopics[] = {"A New Budget",      "The Annual Report", "A Road Repair Plan",
                               "The Water Project", "A Zoning Change"};
const char* const kDays[] = {"Monday", "Tuesday", "Wednesday", "Thursday", "Friday"};
const char* const kNames[] = {"Holt", "Varga", "Okafor", "Lindqvist", "Marsh"};

std::string news_unit(Rng& rng) {
    std::ostringstream s;
    switch (rng.next_below(3)) {
        case 0:
            s << pick(rng, kBodies) << " " << pick(rng, kActions) << " " << pick(rng, kTopics)
              << " On " << pick(rng, kDays) << ", Officials Said. ";
            break;
        case 1:
            s << "\"We Expect " << pick(rng, kTopics) << " To Move Forward,\" Said Director "
              << pick(rng, kNames) << ". ";
            break;
        default:
            s << "A Vote Is Scheduled For " << pick(rng, kDays) << " At "
              << (1 + rng.next_below(12)) << " PM, According To " << pick(rng, kBodies) << ". ";
            break;
    }
    return s.str();
}

// --- verse_lines: short lowercase lines grouped into stanzas ----------------

const char* const kVerseWords[] = {"river",  "silver", "willow", "ember",  "hollow", "feather",
                                   "moss",   "tide",   "dusk",   "clover", "frost",  "shadow",
                                   "petal",  "stone",  "wind",   "cradle", "autumn", "sparrow"};
const char* const kVerseJoins[] = {"under the", "beyond the", "after the", "beneath a",
                                   "against the", "inside the"};

std::string verse_unit(Rng& rng) {
    std::ostringstream s;
    for (int line = 0; line < 4; ++line) {
        s << pick(rng, kVerseJoins) << " " << pick(rng, kVerseWords) << " and the "
          << pick(rng, kVerseWords);
        s << (line % 2 == 0 ? ",\n" : "\n");
    }
    s << "\n";
    return s.str();
}

std::string make_doc(const std::string& spec, Rng& rng) {
    if (spec == "public_mix") return build_doc(rng, public_unit);
    if (spec == "math_arith") return build_doc(rng, math_unit);
    if (spec == "code_brackets") return build_doc(rng, code_unit);
    if (spec == "news_templates") {
        // dateline prefix, then body sentences
        std::string head = std::string(pick(rng, kCities)) + " — ";
        std::string body = build_doc(rng, news_unit);
        if (head.size() + body.size() > kMaxDoc) body.resize(kMaxDoc - head.size());
        return head + body;
    }
    if (spec == "verse_lines") return build_doc(rng, verse_unit);
    throw ConfigError("corpora: unknown domain spec '" + spec + "'");
}

} // namespace

std::vector<std::string> DomainCorpus::docs_at(const std::vector<int>& idx) const {
    std::vector<std::string> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(documents.at(static_cast<size_t>(i)));
    return out;
}

const std::vector<std::string>& corpus_registry() {
    static const std::vector<std::string> specs{"public_mix", "math_arith", "code_brackets",
                                                "news_templates", "verse_lines"};
    return specs;
}

DomainCorpus make_corpus(const std::string& domain_spec, uint64_t seed, int n_docs) {
    if (n_docs <= 0) throw ConfigError("corpora: n_docs must be positive");
    DomainCorpus c;
    c.domain_id = domain_spec;
    c.seed = seed;
    c.documents.reserve(static_cast<size_t>(n_docs));
    for (int i = 0; i < n_docs; ++i) {
        Rng rng(derive_seed(seed, fnv1a(domain_spec), static_cast<uint64_t>(i)));
        c.documents.push_back(make_doc(domain_spec, rng));
    }
    split_corpus(c, {0.9, 0.05, 0.05}, derive_seed(seed, fnv1a(domain_spec), 0x5b117));
    return c;
}

void split_corpus(DomainCorpus& c, std::array<double, 3> fractions, uint64_t seed) {
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");
    int n = static_cast<int>(c.documents.size());
    int nv = static_cast<int>(std::floor(fractions[1] * n));
    int nh = static_cast<int>(std::floor(fractions[2] * n));
    int nt = n - nv - nh;
    if (nt <= 0 || nv <= 0 || nh <= 0)
        throw ConfigError("split: a fraction rounds to an empty set at " + std::to_string(n) +
                          " docs");
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    c.train.assign(idx.begin(), idx.begin() + nt);
    c.validation.assign(idx.begin() + nt, idx.begin() + nt + nv);
    c.heldout.assign(idx.begin() + nt + nv, idx.end());
    std::sort(c.train.begin(), c.train.end());
    std::sort(c.validation.begin(), c.validation.end());
    std::sort(c.heldout.begin(), c.heldout.end());
}

std::string corpus_sha256(const DomainCorpus& c) {
    Sha256 h;
    for (const auto& d : c.documents) h.update(d.data(), d.size());
    return h.hex();
}

std::string escape_doc(const std::string& doc) {
    std::string out;
    out.reserve(doc.size());
    for (char ch : doc) {
        if (ch == '\\') out += "\\\\";
        else if (ch == '\n') out += "\\n";
        else if (ch == '\r') out += "\\r";
        else out.push_back(ch);
    }
    return out;
}

std::string unescape_doc(const std::string& line) {
    std::string out;
    out.reserve(line.size());
    for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] != '\\') {
            out.push_back(line[i]);
            continue;
        }
        if (i + 1 >= line.size()) throw InputError("corpus line: dangling escape");
        char nxt = line[++i];
        if (nxt == '\\') out.push_back('\\');
        else if (nxt == 'n') out.push_back('\n');
        else if (nxt == 'r') out.push_back('\r');
        else throw InputError("corpus line: unknown escape");
    }
    return out;
}

void save_corpus(const DomainCorpus& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream docs(dir / (c.domain_id + ".docs.txt"), std::ios::binary);
    if (!docs) throw InputError("corpora: cannot write docs file");
    for (const auto& d : c.documents) docs << escape_doc(d) << "\n";
    docs.close();

    json manifest{{"format_version", 1},
                  {"domain_id", c.domain_id},
                  {"seed", c.seed},
                  {"n_docs", c.documents.size()},
                  {"sha256", corpus_sha256(c)},
                  {"splits",
                   {{"train", c.train}, {"validation", c.validation}, {"heldout", c.heldout}}}};
    std::ofstream mf(dir / (c.domain_id + ".manifest.json"));
    if (!mf) throw InputError("corpora: cannot write manifest");
    mf << manifest.dump(2) << "\n";
}

DomainCorpus load_corpus(const std::filesystem::path& dir, const std::string& domain_id) {
    std::ifstream mf(dir / (domain_id + ".manifest.json"));
    if (!mf) throw InputError("corpora: missing manifest for '" + domain_id + "'");
    json manifest = json::parse(mf);

    DomainCorpus c;
    c.domain_id = manifest.at("domain_id").get<std::string>();
    c.seed = manifest.at("seed").get<uint64_t>();
    c.train = manifest.at("splits").at("train").get<std::vector<int>>();
    c.validation = manifest.at("splits").at("validation").get<std::vector<int>>();
    c.heldout = manifest.at("splits").at("heldout").get<std::vector<int>>();

    std::ifstream docs(dir / (domain_id + ".docs.txt"), std::ios::binary);
    if (!docs) throw InputError("corpora: missing docs file for '" + domain_id + "'");
    std::string line;
    while (std::getline(docs, line)) c.documents.push_back(unescape_doc(line));

    if (c.documents.size() != manifest.at("n_docs").get<size_t>())
        throw InputError("corpora: document count does not match manifest");
    if (corpus_sha256(c) != manifest.at("sha256").get<std::string>())
        throw InputError("corpora: content hash does not match manifest");
    return c;
}

} // namespace flexmerge
