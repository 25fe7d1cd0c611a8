#include "qsum/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace qsum {

using nlohmann::json;

void StageConfig::validate(int stage) const {
    const std::string tag = "stage" + std::to_string(stage);
    if (steps < 1) throw std::invalid_argument(tag + ".steps must be >= 1");
    if (peak_lr <= 0) throw std::invalid_argument(tag + ".peak_lr must be > 0");
    if (warmup_frac <= 0.0 || warmup_frac >= 1.0)
        throw std::invalid_argument(tag + ".warmup_frac must lie in (0, 1)");
    if (batch_docs < 1) throw std::invalid_argument(tag + ".batch_docs must be >= 1");
    if (accum < 1) throw std::invalid_argument(tag + ".accum must be >= 1");
    if (eval_interval < 1) throw std::invalid_argument(tag + ".eval_interval must be >= 1");
    if (patience < 1) throw std::invalid_argument(tag + ".patience must be >= 1");
    if (min_delta < 0) throw std::invalid_argument(tag + ".min_delta must be >= 0");
    if (eval_docs < 1) throw std::invalid_argument(tag + ".eval_docs must be >= 1");
    if (ctc_weight < 0.0 || ctc_weight > 1.0)
        throw std::invalid_argument(tag + ".ctc_weight must lie in [0, 1]");
    if (mask_p < 0.0 || mask_p > 1.0)
        throw std::invalid_argument(tag + ".mask_p must lie in [0, 1]");
    if (fr_joint < 0 || fr_cl < 0 || fr_final < 0 ||
        std::abs(fr_joint + fr_cl + fr_final - 1.0) > 1e-9)
        throw std::invalid_argument(tag + ": curriculum fractions must be >= 0 and sum to 1");
}

namespace {

// tracks which keys a section consumed so unknown keys can be rejected and
// every defaulted field reported
struct Section {
    const json* obj;  // null when the section is absent entirely
    std::string name;
    std::vector<std::string>& prov;
    std::set<std::string> seen;

    template <class V>
    void get(const char* key, V& out) {
        seen.insert(key);
        const std::string full = name.empty() ? key : name + "." + key;
        if (obj != nullptr && obj->contains(key)) {
            try {
                out = obj->at(key).get<V>();
            } catch (const std::exception&) {
                throw std::invalid_argument("config key '" + full + "' has the wrong type");
            }
            prov.push_back(full + " = " + json(out).dump() + "  (file)");
        } else {
            prov.push_back(full + " = " + json(out).dump() + "  (default)");
        }
    }

    void finish() const {
        if (obj == nullptr) return;
        for (auto it = obj->begin(); it != obj->end(); ++it)
            if (!seen.count(it.key()))
                throw std::invalid_argument("unknown config key '" +
                                            (name.empty() ? it.key() : name + "." + it.key()) +
                                            "'");
    }
};

const json* subobject(const json& root, const char* key) {
    if (!root.contains(key)) return nullptr;
    if (!root.at(key).is_object())
        throw std::invalid_argument("config section '" + std::string(key) +
                                    "' must be an object");
    return &root.at(key);
}

void read_stage(const json& root, const char* key, StageConfig& s,
                std::vector<std::string>& prov) {
    Section sec{subobject(root, key), key, prov};
    sec.get("steps", s.steps);
    sec.get("peak_lr", s.peak_lr);
    sec.get("warmup_frac", s.warmup_frac);
    sec.get("batch_docs", s.batch_docs);
    sec.get("accum", s.accum);
    sec.get("eval_interval", s.eval_interval);
    sec.get("patience", s.patience);
    sec.get("min_delta", s.min_delta);
    sec.get("eval_docs", s.eval_docs);
    sec.get("ctc_weight", s.ctc_weight);
    sec.get("mask_p", s.mask_p);
    sec.get("fr_joint", s.fr_joint);
    sec.get("fr_cl", s.fr_cl);
    sec.get("fr_final", s.fr_final);
    sec.finish();
}

}  // namespace

std::string config_to_json(const Config& c) {
    json j;
    j["seed"] = c.seed;
    j["data"] = {{"docs", c.data.docs},
                 {"seg_min", c.data.seg_min},
                 {"seg_max", c.data.seg_max},
                 {"tok_min", c.data.tok_min},
                 {"tok_max", c.data.tok_max},
                 {"frames_per_token", c.data.frames_per_token},
                 {"sigma", c.data.sigma},
                 {"summary_cap", c.data.summary_cap},
                 {"frame_dim", c.data.frame_dim},
                 {"content_prob", c.data.content_prob}};
    j["encoder"] = {{"layers", c.encoder.layers}, {"d_x", c.encoder.d_x},
                    {"heads", c.encoder.heads},   {"ffn", c.encoder.ffn},
                    {"max_frames", c.encoder.max_frames}};
    j["connector"] = {{"n_q", c.connector.n_q},
                      {"d_q", c.connector.d_q},
                      {"layers", c.connector.layers},
                      {"g", c.connector.g},
                      {"n_max", c.connector.n_max},
                      {"heads", c.connector.heads}};
    j["lm"] = {{"layers", c.lm.layers},       {"d_lm", c.lm.d_lm},
               {"heads", c.lm.heads},         {"max_seq", c.lm.max_seq},
               {"lora_rank", c.lm.lora_rank}, {"lora_alpha", c.lm.lora_alpha}};
    auto stage = [](const StageConfig& s) {
        return json{{"steps", s.steps},
                    {"peak_lr", s.peak_lr},
                    {"warmup_frac", s.warmup_frac},
                    {"batch_docs", s.batch_docs},
                    {"accum", s.accum},
                    {"eval_interval", s.eval_interval},
                    {"patience", s.patience},
                    {"min_delta", s.min_delta},
                    {"eval_docs", s.eval_docs},
                    {"ctc_weight", s.ctc_weight},
                    {"mask_p", s.mask_p},
                    {"fr_joint", s.fr_joint},
                    {"fr_cl", s.fr_cl},
                    {"fr_final", s.fr_final}};
    };
    j["stage0"] = stage(c.stage0);
    j["stage1"] = stage(c.stage1);
    j["stage2"] = stage(c.stage2);
    j["stage3"] = stage(c.stage3);
    return j.dump(2);  // nlohmann sorts keys, so this dump is canonical
}

uint64_t config_hash(const Config& c) { return fnv1a(config_to_json(c)); }

void validate_config(const Config& c) {
    c.data.validate();
    c.encoder.validate();
    c.connector.validate();
    c.lm.validate();
    c.stage0.validate(0);
    c.stage1.validate(1);
    c.stage2.validate(2);
    c.stage3.validate(3);
    if (static_cast<int64_t>(c.connector.g) * c.connector.d_q != c.lm.d_lm)
        throw std::invalid_argument(
            "config: connector.g * connector.d_q must equal lm.d_lm (got " +
            std::to_string(c.connector.g) + " * " + std::to_string(c.connector.d_q) + " != " +
            std::to_string(c.lm.d_lm) + ")");
    if (c.encoder.vocab != CorpusSpec::vocab || c.lm.vocab != CorpusSpec::vocab)
        throw std::invalid_argument("config: encoder.vocab and lm.vocab must match the corpus");
    if (c.encoder.frame_dim != c.data.frame_dim)
        throw std::invalid_argument("config: encoder.frame_dim must equal data.frame_dim");
    if (c.connector.n_max < c.data.seg_max)
        throw std::invalid_argument("config: connector.n_max is below data.seg_max");
    if (c.encoder.max_frames < c.data.tok_max * c.data.frames_per_token)
        throw std::invalid_argument(
            "config: encoder.max_frames cannot hold the longest segment (tok_max * "
            "frames_per_token)");
    // worst-case stage-2/3 sequence must fit the LM window
    const int64_t per_seg = c.connector.tokens_per_segment() + 1 + c.data.tok_max;
    const int64_t worst =
        static_cast<int64_t>(c.data.seg_max) * per_seg + 1 + c.data.summary_cap + 1;
    if (worst > c.lm.max_seq)
        throw std::invalid_argument("config: lm.max_seq " + std::to_string(c.lm.max_seq) +
                                    " cannot hold the worst-case document of " +
                                    std::to_string(worst) + " positions");
}

LoadedConfig parse_config(const std::string& text, const std::string& origin) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        // nlohmann reports byte offsets; convert to a line number for the message
        size_t line = 1;
        for (size_t i = 0; i < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw std::invalid_argument(origin + ":" + std::to_string(line) + ": " + e.what());
    }
    if (!root.is_object()) throw std::invalid_argument(origin + ": config root must be an object");

    LoadedConfig out;
    Config& c = out.cfg;

    Section top{&root, "", out.provenance};
    top.get("seed", c.seed);
    top.seen.insert({"data", "encoder", "connector", "lm", "stage0", "stage1", "stage2",
                     "stage3"});

    {
        Section s{subobject(root, "data"), "data", out.provenance};
        s.get("docs", c.data.docs);
        s.get("seg_min", c.data.seg_min);
        s.get("seg_max", c.data.seg_max);
        s.get("tok_min", c.data.tok_min);
        s.get("tok_max", c.data.tok_max);
        s.get("frames_per_token", c.data.frames_per_token);
        s.get("sigma", c.data.sigma);
        s.get("summary_cap", c.data.summary_cap);
        s.get("frame_dim", c.data.frame_dim);
        s.get("content_prob", c.data.content_prob);
        s.finish();
    }
    {
        Section s{subobject(root, "encoder"), "encoder", out.provenance};
        s.get("layers", c.encoder.layers);
        s.get("d_x", c.encoder.d_x);
        s.get("heads", c.encoder.heads);
        s.get("ffn", c.encoder.ffn);
        s.get("max_frames", c.encoder.max_frames);
        s.finish();
    }
    {
        Section s{subobject(root, "connector"), "connector", out.provenance};
        s.get("n_q", c.connector.n_q);
        s.get("d_q", c.connector.d_q);
        s.get("layers", c.connector.layers);
        s.get("g", c.connector.g);
        s.get("n_max", c.connector.n_max);
        s.get("heads", c.connector.heads);
        s.finish();
    }
    {
        Section s{subobject(root, "lm"), "lm", out.provenance};
        s.get("layers", c.lm.layers);
        s.get("d_lm", c.lm.d_lm);
        s.get("heads", c.lm.heads);
        s.get("max_seq", c.lm.max_seq);
        s.get("lora_rank", c.lm.lora_rank);
        s.get("lora_alpha", c.lm.lora_alpha);
        s.finish();
    }
    read_stage(root, "stage0", c.stage0, out.provenance);
    read_stage(root, "stage1", c.stage1, out.provenance);
    read_stage(root, "stage2", c.stage2, out.provenance);
    read_stage(root, "stage3", c.stage3, out.provenance);
    top.finish();

    // corpus seed follows the run seed; vocab geometry is fixed by the corpus
    c.data.seed = c.seed;
    c.encoder.vocab = CorpusSpec::vocab;
    c.encoder.frame_dim = c.data.frame_dim;
    c.encoder.bos = CorpusSpec::bos;
    c.encoder.eos = CorpusSpec::eos;
    c.lm.vocab = CorpusSpec::vocab;
    c.lm.bos = CorpusSpec::bos;
    c.lm.eos = CorpusSpec::eos;
    c.lm.mask_id = CorpusSpec::mask;

    validate_config(c);
    out.hash = config_hash(c);
    return out;
}

LoadedConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

}  // namespace qsum
