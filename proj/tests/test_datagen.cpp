#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "doctest.h"
#include "qsum/datagen.hpp"

using namespace qsum;

namespace fs = std::filesystem;

namespace {

CorpusSpec small_spec(uint64_t seed = 7) {
    CorpusSpec s;
    s.docs = 40;
    s.seed = seed;
    return s;
}

bool same_records(const std::vector<DatasetRecord>& a, const std::vector<DatasetRecord>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].id != b[i].id || a[i].segments != b[i].segments || a[i].summary != b[i].summary)
            return false;
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("qsum_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("corpus generation is reproducible for a seed and moves with it") {
    auto a = make_corpus(small_spec(7));
    auto b = make_corpus(small_spec(7));
    CHECK(same_records(a.train, b.train));
    CHECK(same_records(a.dev, b.dev));
    CHECK(same_records(a.test, b.test));

    auto c = make_corpus(small_spec(8));
    CHECK_FALSE(same_records(a.train, c.train));
}

TEST_CASE("splits carve the document list by index in order") {
    SUBCASE("an even thousand") {
        auto spec = small_spec();
        spec.docs = 1000;
        auto corpus = make_corpus(spec);
        REQUIRE(corpus.train.size() == 800);
        REQUIRE(corpus.dev.size() == 100);
        REQUIRE(corpus.test.size() == 100);
        CHECK(corpus.train.front().id == 0);
        CHECK(corpus.train.back().id == 799);
        CHECK(corpus.dev.front().id == 800);
        CHECK(corpus.dev.back().id == 899);
        CHECK(corpus.test.front().id == 900);
        CHECK(corpus.test.back().id == 999);
    }
    SUBCASE("tiny corpora still give every split a document") {
        auto spec = small_spec();
        spec.docs = 3;
        auto corpus = make_corpus(spec);
        CHECK(corpus.train.size() == 1);
        CHECK(corpus.dev.size() == 1);
        CHECK(corpus.test.size() == 1);
    }
    SUBCASE("fewer than three documents is an error") {
        auto spec = small_spec();
        spec.docs = 2;
        CHECK_THROWS(make_corpus(spec));
    }
}

TEST_CASE("the reference summary keeps first content occurrences in order") {
    const int f0 = CorpusSpec::n_content;  // first filler id
    CHECK(summarize_reference({f0 + 2, 3, 1, f0 + 7, 3, 7}, 10) ==
          std::vector<int>{3, 1, 7, CorpusSpec::eos});
    CHECK(summarize_reference({f0, f0 + 1, f0 + 9}, 10) == std::vector<int>{CorpusSpec::eos});
    CHECK(summarize_reference({}, 10) == std::vector<int>{CorpusSpec::eos});
    CHECK(summarize_reference({5, 5, 5, 5}, 10) == std::vector<int>{5, CorpusSpec::eos});

    // the cap truncates after the first `cap` distinct content tokens
    std::vector<int> many;
    for (int t = 20; t > 5; --t) many.push_back(t);
    auto s = summarize_reference(many, 10);
    REQUIRE(s.size() == 11);
    for (int i = 0; i < 10; ++i) CHECK(s[static_cast<size_t>(i)] == 20 - i);
    CHECK(s.back() == CorpusSpec::eos);

    // specials never leak into summaries
    CHECK(summarize_reference({CorpusSpec::bos, CorpusSpec::pad, 4, CorpusSpec::mask}, 10) ==
          std::vector<int>{4, CorpusSpec::eos});
}

TEST_CASE("every generated record obeys the size and summary contracts") {
    auto spec = small_spec(21);
    auto corpus = make_corpus(spec);
    int content = 0, filler = 0;
    for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test}) {
        for (const auto& rec : *split) {
            CHECK(rec.segments.size() >= size_t(spec.seg_min));
            CHECK(rec.segments.size() <= size_t(spec.seg_max));
            std::vector<int> flat;
            for (const auto& seg : rec.segments) {
                CHECK(seg.size() >= size_t(spec.tok_min));
                CHECK(seg.size() <= size_t(spec.tok_max));
                for (int tok : seg) {
                    CHECK(tok >= 0);
                    CHECK(tok < CorpusSpec::n_content + CorpusSpec::n_filler);
                    (tok < CorpusSpec::n_content ? content : filler) += 1;
                }
                flat.insert(flat.end(), seg.begin(), seg.end());
            }
            CHECK(rec.summary == summarize_reference(flat, spec.summary_cap));
            CHECK(rec.summary.size() <= size_t(spec.summary_cap) + 1);
            CHECK(rec.summary.back() == CorpusSpec::eos);
        }
    }
    // the content/filler mix should sit near the configured probability
    const double frac = double(content) / double(content + filler);
    CHECK(frac > spec.content_prob - 0.05);
    CHECK(frac < spec.content_prob + 0.05);
}

TEST_CASE("token prototypes are fixed by the corpus seed alone") {
    auto spec = small_spec(5);
    auto a = token_prototypes<double>(spec);
    auto b = token_prototypes<double>(spec);
    REQUIRE(a.rows() == CorpusSpec::vocab);
    REQUIRE(a.cols() == spec.frame_dim);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);

    spec.seed = 6;
    auto c = token_prototypes<double>(spec);
    double diff = 0;
    for (int64_t i = 0; i < a.size(); ++i) diff += std::abs(a.data()[i] - c.data()[i]);
    CHECK(diff > 1.0);
}

TEST_CASE("noiseless frames tile the prototypes exactly") {
    auto spec = small_spec();
    auto protos = token_prototypes<double>(spec);
    std::vector<int> toks{3, 11, 3, 49};
    auto frames = tokens_to_frames(toks, protos, spec.frames_per_token, 0.0, 123);
    REQUIRE(frames.rows() == int64_t(toks.size()) * spec.frames_per_token);
    REQUIRE(frames.cols() == spec.frame_dim);
    for (size_t i = 0; i < toks.size(); ++i)
        for (int c = 0; c < spec.frames_per_token; ++c)
            for (int64_t j = 0; j < spec.frame_dim; ++j)
                CHECK(frames.at(int64_t(i) * spec.frames_per_token + c, j) ==
                      protos.at(toks[i], j));
}

TEST_CASE("frame noise is seed-deterministic and segment-specific") {
    auto spec = small_spec();
    auto protos = token_prototypes<double>(spec);
    std::vector<int> toks{1, 2, 3};
    auto a = tokens_to_frames(toks, protos, 4, spec.sigma, frame_seed(spec, 0, 0));
    auto b = tokens_to_frames(toks, protos, 4, spec.sigma, frame_seed(spec, 0, 0));
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);

    auto c = tokens_to_frames(toks, protos, 4, spec.sigma, frame_seed(spec, 0, 1));
    double diff = 0;
    for (int64_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - c.data()[i]));
    CHECK(diff > 1e-4);

    // the noise scale actually is sigma: rough second-moment check
    double sq = 0;
    for (size_t i = 0; i < toks.size(); ++i)
        for (int cpy = 0; cpy < 4; ++cpy)
            for (int64_t j = 0; j < spec.frame_dim; ++j) {
                const double e = a.at(int64_t(i) * 4 + cpy, j) - protos.at(toks[i], j);
                sq += e * e;
            }
    const double rms = std::sqrt(sq / double(a.size()));
    CHECK(rms > 0.5 * spec.sigma);
    CHECK(rms < 2.0 * spec.sigma);
}

TEST_CASE("nearest-prototype classification recovers every token") {
    auto spec = small_spec(3);
    auto protos = token_prototypes<double>(spec);
    Rng pick(99);
    std::vector<int> toks;
    for (int i = 0; i < 30; ++i)
        toks.push_back(int(pick.uniform_int(0, CorpusSpec::n_content - 1)));
    auto frames = tokens_to_frames(toks, protos, spec.frames_per_token, spec.sigma,
                                   frame_seed(spec, 4, 1));
    std::vector<int> decoded;
    for (int64_t r = 0; r < frames.rows(); r += spec.frames_per_token) {
        int best = -1;
        double best_d = 1e300;
        for (int64_t p = 0; p < protos.rows(); ++p) {
            double d = 0;
            for (int64_t j = 0; j < spec.frame_dim; ++j) {
                const double e = frames.at(r, j) - protos.at(p, j);
                d += e * e;
            }
            if (d < best_d) {
                best_d = d;
                best = int(p);
            }
        }
        decoded.push_back(best);
    }
    CHECK(decoded == toks);
}

TEST_CASE("tokens_to_frames rejects bad arguments") {
    auto spec = small_spec();
    auto protos = token_prototypes<double>(spec);
    CHECK_THROWS(tokens_to_frames<double>({}, protos, 4, 0.1, 1));
    CHECK_THROWS(tokens_to_frames<double>({1}, protos, 0, 0.1, 1));
    CHECK_THROWS(tokens_to_frames<double>({1}, protos, 4, -0.1, 1));
    CHECK_THROWS(tokens_to_frames<double>({CorpusSpec::vocab}, protos, 4, 0.1, 1));
    CHECK_THROWS(tokens_to_frames<double>({-1}, protos, 4, 0.1, 1));
}

TEST_CASE("saving and reloading a corpus round-trips byte-identically") {
    auto spec = small_spec(13);
    auto corpus = make_corpus(spec);
    TempDir dir_a("corpus_a");
    save_corpus(corpus, spec, dir_a.path.string());

    CorpusSpec loaded_spec;
    auto loaded = load_corpus(dir_a.path.string(), loaded_spec);
    CHECK(same_records(corpus.train, loaded.train));
    CHECK(same_records(corpus.dev, loaded.dev));
    CHECK(same_records(corpus.test, loaded.test));
    CHECK(loaded_spec.seed == spec.seed);
    CHECK(loaded_spec.docs == spec.docs);
    CHECK(loaded_spec.sigma == spec.sigma);

    // a second save of the reloaded corpus produces identical bytes
    TempDir dir_b("corpus_b");
    save_corpus(loaded, loaded_spec, dir_b.path.string());
    for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "corpus_meta.json"})
        CHECK(slurp(dir_a.path / f) == slurp(dir_b.path / f));
}

TEST_CASE("loading rejects records whose summary breaks the rule") {
    auto spec = small_spec(17);
    spec.docs = 6;
    auto corpus = make_corpus(spec);
    corpus.train[0].summary.insert(corpus.train[0].summary.begin(), 42);
    TempDir dir("corpus_bad");
    save_corpus(corpus, spec, dir.path.string());
    CorpusSpec out;
    CHECK_THROWS_WITH(load_corpus(dir.path.string(), out), doctest::Contains("summary"));
}

TEST_CASE("loading a directory without metadata fails loudly") {
    TempDir dir("corpus_missing");
    CorpusSpec out;
    CHECK_THROWS_WITH(load_corpus(dir.path.string(), out), doctest::Contains("corpus_meta"));
}

TEST_CASE("frame seeds separate documents and segments") {
    auto spec = small_spec();
    std::set<uint64_t> seen;
    for (int64_t d = 0; d < 50; ++d)
        for (int s = 0; s < 4; ++s) seen.insert(frame_seed(spec, d, s));
    CHECK(seen.size() == 200);
}
