#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qsum/gradsuite.hpp"
#include "qsum/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qsum;

// prints to stdout and mirrors into --log when given
class Emitter {
public:
    void open(const std::string& path) {
        if (path.empty()) return;
        file_.open(path, std::ios::binary);
        if (!file_) throw std::runtime_error("cannot open log file " + path);
    }
    void line(const std::string& s) {
        std::cout << s << "\n";
        if (file_.is_open()) file_ << s << "\n";
    }

private:
    std::ofstream file_;
};

struct CommonFlags {
    std::string config_path;
    std::string log_path;
    uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_seed_and_log(CLI::App* cmd, CommonFlags& f) {
    f.seed_opt = cmd->add_option("--seed", f.seed, "run seed (overrides the config file)")
                     ->capture_default_str();
    cmd->add_option("--log", f.log_path, "mirror command output into this file");
}

Config load_run_config(const std::string& path, const CommonFlags& f) {
    Config cfg = load_config(path).cfg;
    if (f.seed_opt->count() > 0) {
        cfg.seed = f.seed;
        cfg.data.seed = f.seed;
    }
    return cfg;
}

// evaluation reads the config the checkpoint was trained with
Config sidecar_config(const std::string& ckpt_path) {
    const fs::path side = fs::path(ckpt_path).parent_path() / "config.json";
    if (!fs::exists(side))
        throw std::runtime_error("missing " + side.string() +
                                 " (expected next to the checkpoint)");
    return load_config(side.string()).cfg;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

int cmd_gen_data(const CommonFlags& f, const std::string& out_dir) {
    Emitter out;
    out.open(f.log_path);
    const Config cfg = load_run_config(f.config_path, f);
    Corpus corpus = make_corpus(cfg.data);
    save_corpus(corpus, cfg.data, out_dir);
    out.line("wrote " + std::to_string(cfg.data.docs) + " documents (train " +
             std::to_string(corpus.train.size()) + ", dev " + std::to_string(corpus.dev.size()) +
             ", test " + std::to_string(corpus.test.size()) + ") to " + out_dir);
    return 0;
}

int cmd_pretrain(const CommonFlags& f, const std::string& data_dir, const std::string& out_dir) {
    Emitter out;
    out.open(f.log_path);
    const Config cfg = load_run_config(f.config_path, f);
    CorpusSpec spec;
    Corpus corpus = load_corpus(data_dir, spec);
    const StageOutcome r = run_pretrain(cfg, corpus, out_dir);
    out.line("stage 0 done: steps " + std::to_string(r.steps_run) + ", loss " +
             fmt(r.first_loss) + " -> " + fmt(r.last_loss) + ", dev ter " + fmt(r.final_dev) +
             (r.stopped_early ? " (stopped early)" : ""));
    out.line("checkpoint " + r.ckpt_path);
    return 0;
}

int cmd_train(const CommonFlags& f, int stage, const std::string& data_dir,
              const std::string& from_ckpt, const std::string& out_dir) {
    Emitter out;
    out.open(f.log_path);
    const Config cfg = load_run_config(f.config_path, f);
    CorpusSpec spec;
    Corpus corpus = load_corpus(data_dir, spec);
    const StageOutcome r = run_stage(stage, cfg, corpus, from_ckpt, out_dir);
    const char* metric = stage == 1 ? "dev wer " : stage == 2 ? "dev ppl " : "dev rouge-l ";
    out.line("stage " + std::to_string(stage) + " done: steps " + std::to_string(r.steps_run) +
             ", loss " + fmt(r.first_loss) + " -> " + fmt(r.last_loss) + ", " + metric +
             fmt(r.final_dev) + (r.stopped_early ? " (stopped early)" : ""));
    out.line("checkpoint " + r.ckpt_path);
    return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& metric, const std::string& ckpt,
             const std::string& data_dir, const std::string& split) {
    Emitter out;
    out.open(f.log_path);
    const Config cfg = sidecar_config(ckpt);
    CorpusSpec spec;
    Corpus corpus = load_corpus(data_dir, spec);
    const std::vector<DatasetRecord>& docs = corpus.split(split);

    EvalSession sess(cfg, ckpt, corpus.spec);
    json base{{"metric", metric}, {"split", split}, {"stage", sess.stage_id}};
    if (metric == "wer") {
        json j = base;
        j["sentence_wer"] = sentence_wer_metric(sess.model, sess.states, docs, false);
        j["document_wer"] =
            document_wer_metric(sess.model, sess.states, docs, sess.use_segment_pos);
        out.line(j.dump());
    } else if (metric == "ppl") {
        const PplResult r = perplexity_metric(sess.model, sess.states, docs, sess.use_segment_pos);
        json j = base;
        j["doc_ppl"] = r.ppl;
        j["mean_nll"] = r.mean_nll;
        j["capped"] = r.capped;
        out.line(j.dump());
    } else {
        const RougeSummary r = rouge_metric(sess.model, sess.states, docs, sess.use_segment_pos);
        for (auto [name, v] : {std::pair{"rouge_1", &r.r1}, std::pair{"rouge_2", &r.r2},
                               std::pair{"rouge_l", &r.rl}}) {
            json j = base;
            j["name"] = name;
            j["p"] = v->p;
            j["r"] = v->r;
            j["f1"] = v->f1;
            out.line(j.dump());
        }
    }
    return 0;
}

int cmd_analyze_weights(const CommonFlags& f, const std::string& ckpt, const std::string& ckpt2) {
    Emitter out;
    out.open(f.log_path);
    const std::vector<double> a = checkpoint_layer_weights(load_checkpoint(ckpt));
    std::string report;
    if (ckpt2.empty()) {
        report = format_weight_report(a);
    } else {
        const std::vector<double> b = checkpoint_layer_weights(load_checkpoint(ckpt2));
        report = format_weight_report(a, b);
    }
    // the report ends with a newline of its own
    std::istringstream lines(report);
    std::string line;
    while (std::getline(lines, line)) out.line(line);
    return 0;
}

int cmd_grad_check(const CommonFlags& f, int size_mult) {
    Emitter out;
    out.open(f.log_path);
    bool all_pass = true;
    auto report = [&](const GradCase& c) {
        all_pass = all_pass && c.result.pass;
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-24s worst_rel %.3e at %s[%lld] over %lld coords: %s",
                      c.name.c_str(), c.result.worst_rel, c.result.worst_param.c_str(),
                      static_cast<long long>(c.result.worst_index),
                      static_cast<long long>(c.result.coords_checked),
                      c.result.pass ? "pass" : "FAIL");
        out.line(buf);
    };
    for (const auto& c : run_grad_suite_ops()) report(c);
    for (const auto& c : run_grad_suite_model(size_mult)) report(c);
    out.line(all_pass ? "all gradients verified" : "gradient check FAILED");
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"segment-level speech summarization pipeline"};
    app.require_subcommand(1);

    CommonFlags gen_f, pre_f, train_f, eval_f, aw_f, gc_f;
    std::string gen_out, pre_data, pre_out, train_data, train_from, train_out;
    std::string eval_metric, eval_ckpt, eval_data, eval_split = "dev";
    std::string aw_ckpt, aw_ckpt2;
    int train_stage = 0, gc_size = 1;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
    gen->add_option("--config", gen_f.config_path, "config file")->required();
    gen->add_option("--out", gen_out, "output directory")->required();
    add_seed_and_log(gen, gen_f);

    CLI::App* pre = app.add_subcommand("pretrain", "pretrain the encoder (stage 0)");
    pre->add_option("--config", pre_f.config_path, "config file")->required();
    pre->add_option("--data", pre_data, "corpus directory")->required();
    pre->add_option("--out", pre_out, "output directory")->required();
    add_seed_and_log(pre, pre_f);

    CLI::App* train = app.add_subcommand("train", "run one adaptation stage");
    train->add_option("--stage", train_stage, "training stage")
        ->required()
        ->check(CLI::Range(1, 3));
    train->add_option("--config", train_f.config_path, "config file")->required();
    train->add_option("--data", train_data, "corpus directory")->required();
    train->add_option("--from", train_from, "checkpoint of the previous stage")->required();
    train->add_option("--out", train_out, "output directory")->required();
    add_seed_and_log(train, train_f);

    CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a corpus split");
    ev->add_option("--metric", eval_metric, "wer, ppl or rouge")
        ->required()
        ->check(CLI::IsMember({"wer", "ppl", "rouge"}));
    ev->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    ev->add_option("--data", eval_data, "corpus directory")->required();
    ev->add_option("--split", eval_split, "dev or test")
        ->check(CLI::IsMember({"dev", "test"}));
    add_seed_and_log(ev, eval_f);

    CLI::App* aw = app.add_subcommand("analyze-weights", "report encoder-layer fusion weights");
    aw->add_option("--ckpt", aw_ckpt, "checkpoint file")->required();
    aw->add_option("--ckpt2", aw_ckpt2, "second checkpoint for comparison");
    add_seed_and_log(aw, aw_f);

    CLI::App* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
    gc->add_option("--size", gc_size, "model width multiplier")->check(CLI::Range(1, 16));
    add_seed_and_log(gc, gc_f);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_data(gen_f, gen_out);
        if (*pre) return cmd_pretrain(pre_f, pre_data, pre_out);
        if (*train) return cmd_train(train_f, train_stage, train_data, train_from, train_out);
        if (*ev) return cmd_eval(eval_f, eval_metric, eval_ckpt, eval_data, eval_split);
        if (*aw) return cmd_analyze_weights(aw_f, aw_ckpt, aw_ckpt2);
        if (*gc) return cmd_grad_check(gc_f, gc_size);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
