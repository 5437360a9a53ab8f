#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "flexmerge/corpora.hpp"
#include "flexmerge/errors.hpp"

using namespace flexmerge;

namespace {

// Bag-of-bytes nearest-centroid classifier (the separability oracle).
std::array<double, 256> byte_hist(const std::string& doc) {
    std::array<double, 256> h{};
    for (unsigned char c : doc) h[c] += 1.0;
    for (auto& x : h) x /= static_cast<double>(doc.size());
    return h;
}

std::array<double, 256> centroid(const std::vector<std::string>& docs) {
    std::array<double, 256> c{};
    for (const auto& d : docs) {
        auto h = byte_hist(d);
        for (int i = 0; i < 256; ++i) c[i] += h[i];
    }
    for (auto& x : c) x /= static_cast<double>(docs.size());
    return c;
}

double dist2(const std::array<double, 256>& a, const std::array<double, 256>& b) {
    double s = 0.0;
    for (int i = 0; i < 256; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

} // namespace

TEST_CASE("registry lists the five domains with the public mix first") {
    const auto& r = corpus_registry();
    REQUIRE(r.size() == 5);
    CHECK(r[0] == "public_mix");
    CHECK(std::count(r.begin(), r.end(), "math_arith") == 1);
    CHECK(std::count(r.begin(), r.end(), "code_brackets") == 1);
    CHECK(std::count(r.begin(), r.end(), "news_templates") == 1);
    CHECK(std::count(r.begin(), r.end(), "verse_lines") == 1);
}

TEST_CASE("generation is deterministic in (spec, seed, n)") {
    for (const auto& spec : corpus_registry()) {
        CAPTURE(spec);
        auto a = make_corpus(spec, 101, 40);
        auto b = make_corpus(spec, 101, 40);
        auto c = make_corpus(spec, 102, 40);
        CHECK(corpus_sha256(a) == corpus_sha256(b));
        CHECK(corpus_sha256(a) != corpus_sha256(c));
    }
    CHECK_THROWS_AS(make_corpus("unknown_domain", 1, 10), ConfigError);
    CHECK_THROWS_AS(make_corpus("public_mix", 1, 0), ConfigError);
}

TEST_CASE("documents stay inside the 64..512 byte envelope") {
    for (const auto& spec : corpus_registry()) {
        auto c = make_corpus(spec, 7, 100);
        for (const auto& d : c.documents) {
            CAPTURE(spec);
            CHECK(d.size() >= 64);
            CHECK(d.size() <= 512);
        }
    }
}

TEST_CASE("every arithmetic statement evaluates correctly") {
    auto c = make_corpus("math_arith", 31, 60);
    int statements = 0;
    for (const auto& d : c.documents) {
        std::istringstream in(d);
        std::string tok;
        std::vector<std::string> toks;
        while (in >> tok) toks.push_back(tok);
        REQUIRE(toks.size() % 6 == 0);
        for (size_t i = 0; i < toks.size(); i += 6) {
            long a = std::stol(toks[i]);
            const std::string& op = toks[i + 1];
            long b = std::stol(toks[i + 2]);
            REQUIRE(toks[i + 3] == "=");
            long r = std::stol(toks[i + 4]);
            REQUIRE(toks[i + 5] == ";");
            long want = op == "+" ? a + b : op == "-" ? a - b : a * b;
            REQUIRE((op == "+" || op == "-" || op == "*"));
            CHECK(r == want);
            ++statements;
        }
    }
    CHECK(statements > 100);
}

TEST_CASE("code documents are bracket-balanced (stack oracle)") {
    auto c = make_corpus("code_brackets", 33, 60);
    for (const auto& d : c.documents) {
        std::vector<char> stack;
        bool ok = true;
        for (char ch : d) {
            if (ch == '(' || ch == '{' || ch == '[') stack.push_back(ch);
            else if (ch == ')' || ch == '}' || ch == ']') {
                char open = ch == ')' ? '(' : ch == '}' ? '{' : '[';
                if (stack.empty() || stack.back() != open) {
                    ok = false;
                    break;
                }
                stack.pop_back();
            }
        }
        CHECK(ok);
        CHECK(stack.empty());
    }
}

TEST_CASE("domain texture: case and line-shape signatures hold") {
    auto pub = make_corpus("public_mix", 41, 30);
    for (const auto& d : pub.documents)
        CHECK(std::none_of(d.begin(), d.end(), [](unsigned char c) { return std::isupper(c); }));

    auto news = make_corpus("news_templates", 41, 30);
    for (const auto& d : news.documents) {
        int upper = static_cast<int>(
            std::count_if(d.begin(), d.end(), [](unsigned char c) { return std::isupper(c); }));
        CHECK(upper > 10);
    }

    auto verse = make_corpus("verse_lines", 41, 30);
    for (const auto& d : verse.documents) {
        auto newlines = std::count(d.begin(), d.end(), '\n');
        CHECK(newlines >= static_cast<long>(d.size() / 50));
    }
}

TEST_CASE("split: exact sizes, partition property, seed independence of sizes") {
    auto c = make_corpus("public_mix", 51, 100);
    CHECK(c.train.size() == 90);
    CHECK(c.validation.size() == 5);
    CHECK(c.heldout.size() == 5);

    std::set<int> all;
    for (int i : c.train) all.insert(i);
    for (int i : c.validation) all.insert(i);
    for (int i : c.heldout) all.insert(i);
    CHECK(all.size() == 100);
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == 99);

    auto before = c.validation;
    split_corpus(c, {0.9, 0.05, 0.05}, 999);
    CHECK(c.validation.size() == 5);
    CHECK(c.validation != before); // membership moves with the seed

    CHECK_THROWS_AS(split_corpus(c, {0.5, 0.3, 0.3}, 1), ConfigError);
    auto small = make_corpus("public_mix", 52, 100);
    small.documents.resize(10);
    CHECK_THROWS_AS(split_corpus(small, {0.9, 0.05, 0.05}, 1), ConfigError);
}

TEST_CASE("escape round-trip covers newlines and backslashes") {
    std::string doc = "line one\nline \\two\\\nthree\r\n";
    CHECK(unescape_doc(escape_doc(doc)) == doc);
    CHECK(escape_doc(doc).find('\n') == std::string::npos);
    CHECK_THROWS_AS(unescape_doc("bad\\"), InputError);
    CHECK_THROWS_AS(unescape_doc("bad\\q"), InputError);
}

TEST_CASE("save/load round-trips documents, splits, and the content hash") {
    auto dir = std::filesystem::temp_directory_path() / "flexmerge_corpora_test";
    std::filesystem::remove_all(dir);
    auto c = make_corpus("verse_lines", 61, 40);
    save_corpus(c, dir);
    auto back = load_corpus(dir, "verse_lines");
    CHECK(back.documents == c.documents);
    CHECK(back.train == c.train);
    CHECK(back.validation == c.validation);
    CHECK(back.heldout == c.heldout);
    CHECK(back.seed == c.seed);

    // corrupting the docs file must be caught by the manifest hash
    {
        std::ofstream f(dir / "verse_lines.docs.txt", std::ios::binary | std::ios::app);
        f << "tampered line\n";
    }
    CHECK_THROWS_AS(load_corpus(dir, "verse_lines"), InputError);
    CHECK_THROWS_AS(load_corpus(dir, "missing_domain"), InputError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("any two domains separate at 95%+ held-out accuracy (bag of bytes)") {
    const auto& specs = corpus_registry();
    std::vector<DomainCorpus> corpora;
    for (const auto& s : specs) corpora.push_back(make_corpus(s, 77, 200));

    for (size_t a = 0; a < corpora.size(); ++a) {
        for (size_t b = a + 1; b < corpora.size(); ++b) {
            auto train_a = corpora[a].docs_at(corpora[a].train);
            auto train_b = corpora[b].docs_at(corpora[b].train);
            train_a.resize(100);
            train_b.resize(100);
            auto ca = centroid(train_a), cb = centroid(train_b);

            int correct = 0, total = 0;
            for (const auto& d : corpora[a].docs_at(corpora[a].heldout)) {
                auto h = byte_hist(d);
                correct += dist2(h, ca) < dist2(h, cb) ? 1 : 0;
                ++total;
            }
            for (const auto& d : corpora[b].docs_at(corpora[b].heldout)) {
                auto h = byte_hist(d);
                correct += dist2(h, cb) < dist2(h, ca) ? 1 : 0;
                ++total;
            }
            double acc = static_cast<double>(correct) / total;
            CAPTURE(specs[a]);
            CAPTURE(specs[b]);
            CHECK(acc >= 0.95);
        }
    }
}
