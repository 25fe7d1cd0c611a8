#include "qsum/datagen.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace qsum {

using nlohmann::json;
namespace fs = std::filesystem;

void CorpusSpec::validate() const {
    if (docs < 3) throw std::invalid_argument("corpus: need at least 3 documents (one per split)");
    if (seg_min < 1 || seg_max < seg_min)
        throw std::invalid_argument("corpus: invalid segments-per-doc range");
    if (tok_min < 1 || tok_max < tok_min)
        throw std::invalid_argument("corpus: invalid tokens-per-segment range");
    if (frames_per_token < 1) throw std::invalid_argument("corpus: frames_per_token must be >= 1");
    if (sigma < 0.0) throw std::invalid_argument("corpus: sigma must be >= 0");
    if (summary_cap < 0) throw std::invalid_argument("corpus: summary_cap must be >= 0");
    if (frame_dim < 1) throw std::invalid_argument("corpus: frame_dim must be >= 1");
    if (content_prob < 0.0 || content_prob > 1.0)
        throw std::invalid_argument("corpus: content_prob must lie in [0, 1]");
}

const std::vector<DatasetRecord>& Corpus::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "dev") return dev;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<int> summarize_reference(const std::vector<int>& doc_tokens, int cap) {
    std::vector<int> out;
    std::vector<bool> seen(CorpusSpec::n_content, false);
    for (int tok : doc_tokens) {
        if (tok < 0 || tok >= CorpusSpec::n_content) continue;  // filler and specials drop out
        if (seen[static_cast<size_t>(tok)]) continue;
        seen[static_cast<size_t>(tok)] = true;
        if (static_cast<int>(out.size()) < cap) out.push_back(tok);
    }
    out.push_back(CorpusSpec::eos);
    return out;
}

uint64_t frame_seed(const CorpusSpec& spec, int64_t doc_id, int seg_idx) {
    return mix_seed(spec.seed, static_cast<uint64_t>(doc_id), static_cast<uint64_t>(seg_idx));
}

static DatasetRecord make_record(const CorpusSpec& spec, int64_t doc_id) {
    DatasetRecord rec;
    rec.id = doc_id;
    Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(doc_id), 0xd0c5ULL));
    const int64_t n_seg = rng.uniform_int(spec.seg_min, spec.seg_max);
    std::vector<int> flat;
    for (int64_t s = 0; s < n_seg; ++s) {
        const int64_t n_tok = rng.uniform_int(spec.tok_min, spec.tok_max);
        std::vector<int> seg;
        seg.reserve(static_cast<size_t>(n_tok));
        for (int64_t t = 0; t < n_tok; ++t) {
            const bool content = rng.uniform() < spec.content_prob;
            const int tok = content
                                ? static_cast<int>(rng.uniform_int(0, CorpusSpec::n_content - 1))
                                : CorpusSpec::n_content +
                                      static_cast<int>(rng.uniform_int(0, CorpusSpec::n_filler - 1));
            seg.push_back(tok);
            flat.push_back(tok);
        }
        rec.segments.push_back(std::move(seg));
    }
    rec.summary = summarize_reference(flat, spec.summary_cap);
    return rec;
}

Corpus make_corpus(const CorpusSpec& spec) {
    spec.validate();
    const int64_t n = spec.docs;
    const int64_t n_test = std::max<int64_t>(1, n / 10);
    const int64_t n_dev = std::max<int64_t>(1, n / 10);
    const int64_t n_train = n - n_dev - n_test;
    Corpus c;
    c.spec = spec;
    for (int64_t i = 0; i < n; ++i) {
        DatasetRecord rec = make_record(spec, i);
        if (i < n_train)
            c.train.push_back(std::move(rec));
        else if (i < n_train + n_dev)
            c.dev.push_back(std::move(rec));
        else
            c.test.push_back(std::move(rec));
    }
    return c;
}

static json spec_to_json(const CorpusSpec& s) {
    return json{{"docs", s.docs},
                {"seg_min", s.seg_min},
                {"seg_max", s.seg_max},
                {"tok_min", s.tok_min},
                {"tok_max", s.tok_max},
                {"frames_per_token", s.frames_per_token},
                {"sigma", s.sigma},
                {"summary_cap", s.summary_cap},
                {"frame_dim", s.frame_dim},
                {"content_prob", s.content_prob},
                {"seed", s.seed}};
}

static void write_records(const fs::path& path, const std::vector<DatasetRecord>& recs) {
    std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& r : recs) {
        json j{{"id", r.id}, {"segments", r.segments}, {"summary", r.summary}};
        out << j.dump() << "\n";
    }
}

void save_corpus(const Corpus& corpus, const CorpusSpec& spec, const std::string& dir) {
    fs::create_directories(dir);
    write_records(fs::path(dir) / "train.jsonl", corpus.train);
    write_records(fs::path(dir) / "dev.jsonl", corpus.dev);
    write_records(fs::path(dir) / "test.jsonl", corpus.test);
    std::ofstream meta(fs::path(dir) / "corpus_meta.json", std::ios::binary);
    if (!meta) throw std::runtime_error("cannot write corpus_meta.json in " + dir);
    meta << spec_to_json(spec).dump(2) << "\n";
}

static std::vector<DatasetRecord> read_records(const fs::path& path, const CorpusSpec& spec) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<DatasetRecord> recs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " +
                                     e.what());
        }
        DatasetRecord r;
        r.id = j.at("id").get<int64_t>();
        r.segments = j.at("segments").get<std::vector<std::vector<int>>>();
        r.summary = j.at("summary").get<std::vector<int>>();
        std::vector<int> flat;
        for (const auto& s : r.segments) flat.insert(flat.end(), s.begin(), s.end());
        if (r.summary != summarize_reference(flat, spec.summary_cap))
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                     ": summary does not satisfy the reference rule");
        recs.push_back(std::move(r));
    }
    return recs;
}

Corpus load_corpus(const std::string& dir, CorpusSpec& spec_out) {
    std::ifstream meta(fs::path(dir) / "corpus_meta.json", std::ios::binary);
    if (!meta) throw std::runtime_error("missing corpus_meta.json in " + dir);
    json j = json::parse(meta);
    CorpusSpec s;
    s.docs = j.at("docs").get<int>();
    s.seg_min = j.at("seg_min").get<int>();
    s.seg_max = j.at("seg_max").get<int>();
    s.tok_min = j.at("tok_min").get<int>();
    s.tok_max = j.at("tok_max").get<int>();
    s.frames_per_token = j.at("frames_per_token").get<int>();
    s.sigma = j.at("sigma").get<double>();
    s.summary_cap = j.at("summary_cap").get<int>();
    s.frame_dim = j.at("frame_dim").get<int>();
    s.content_prob = j.at("content_prob").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    s.validate();
    Corpus c;
    c.spec = s;
    c.train = read_records(fs::path(dir) / "train.jsonl", s);
    c.dev = read_records(fs::path(dir) / "dev.jsonl", s);
    c.test = read_records(fs::path(dir) / "test.jsonl", s);
    spec_out = s;
    return c;
}

}  // namespace qsum
