#include "qsum/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace qsum {

double lr_schedule(int step, int total_steps, double peak, double warmup_frac) {
    if (total_steps < 1) throw std::invalid_argument("lr_schedule: total_steps must be >= 1");
    if (step < 1 || step > total_steps)
        throw std::invalid_argument("lr_schedule: step " + std::to_string(step) +
                                    " outside [1, " + std::to_string(total_steps) + "]");
    if (peak <= 0.0) throw std::invalid_argument("lr_schedule: peak must be positive");
    if (warmup_frac <= 0.0 || warmup_frac >= 1.0)
        throw std::invalid_argument("lr_schedule: warmup_frac must lie in (0, 1)");
    const double warmup = std::max(1.0, std::floor(warmup_frac * total_steps));
    if (step <= warmup) return peak * static_cast<double>(step) / warmup;
    return peak * std::sqrt(warmup / static_cast<double>(step));
}

const char* phase_name(Phase p) {
    switch (p) {
        case Phase::joint: return "joint";
        case Phase::cl: return "cl";
        case Phase::ssum: return "ssum";
    }
    throw std::logic_error("phase_name: unknown phase");
}

CurriculumPoint curriculum_state(int step, int total_steps, double fr_joint, double fr_cl,
                                 double fr_final) {
    if (total_steps < 1)
        throw std::invalid_argument("curriculum_state: total_steps must be >= 1");
    if (step < 1 || step > total_steps)
        throw std::invalid_argument("curriculum_state: step " + std::to_string(step) +
                                    " outside [1, " + std::to_string(total_steps) + "]");
    if (fr_joint < 0.0 || fr_cl < 0.0 || fr_final < 0.0 ||
        std::abs(fr_joint + fr_cl + fr_final - 1.0) > 1e-9)
        throw std::invalid_argument("curriculum_state: phase fractions must sum to 1");

    // integer boundaries so the schedule is exact at the phase edges
    const auto joint_end = static_cast<int>(std::llround(fr_joint * total_steps));
    const auto cl_end = static_cast<int>(std::llround((fr_joint + fr_cl) * total_steps));
    if (step <= joint_end) return {Phase::joint, 1.0};
    if (step <= cl_end && cl_end > joint_end) {
        const double frac =
            static_cast<double>(step - joint_end) / static_cast<double>(cl_end - joint_end);
        return {Phase::cl, 1.0 - frac};
    }
    return {Phase::ssum, 0.0};
}

bool keep_transcript(int64_t doc_id, int seg_idx, uint64_t seed, double kappa) {
    if (kappa >= 1.0) return true;
    if (kappa <= 0.0) return false;
    // fixed per-segment hash ratio: the kept set shrinks monotonically with kappa
    const uint64_t h = splitmix64(
        mix_seed(static_cast<uint64_t>(doc_id), static_cast<uint64_t>(seg_idx), seed));
    return static_cast<double>(h) * 0x1p-64 < kappa;
}

MaskChoice sample_mask(Rng& rng, double p) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("sample_mask: p must lie in [0, 1]");
    if (rng.uniform() >= p) return MaskChoice::none;
    return rng.uniform() < 0.5 ? MaskChoice::speech : MaskChoice::text;
}

bool early_stop(const std::vector<double>& history, int patience, double min_delta) {
    if (patience < 1) throw std::invalid_argument("early_stop: patience must be >= 1");
    if (min_delta < 0.0) throw std::invalid_argument("early_stop: min_delta must be >= 0");
    double best = std::numeric_limits<double>::infinity();
    int since_improvement = 0;
    for (double h : history) {
        if (h < best && best - h >= min_delta) {
            best = h;
            since_improvement = 0;
        } else {
            ++since_improvement;
        }
    }
    return since_improvement >= patience;
}

bool frozen_in_stages(const std::string& name) {
    return name.rfind("encoder/", 0) == 0 || name.rfind("lm/block", 0) == 0 ||
           name.rfind("lm/final_ln/", 0) == 0;
}

SpeechModel::SpeechModel(const Config& cfg)
    : init_rng(mix_seed(cfg.seed, 0x6d6f64656cULL)),
      encoder(cfg.encoder, ps, init_rng),
      connector(cfg.connector, cfg.encoder, ps, init_rng),
      lm(cfg.lm, ps, init_rng) {}

SegmentStates::SegmentStates(const Encoder<float>& enc, const CorpusSpec& spec)
    : enc_(enc), spec_(spec), protos_(token_prototypes<float>(spec)) {}

Tensor<float> SegmentStates::frames(const DatasetRecord& rec, int seg_idx) const {
    return tokens_to_frames(rec.segments.at(static_cast<size_t>(seg_idx)), protos_,
                            spec_.frames_per_token, spec_.sigma,
                            frame_seed(spec_, rec.id, seg_idx));
}

const std::vector<Tensor<float>>& SegmentStates::get(const DatasetRecord& rec, int seg_idx) {
    const uint64_t key =
        (static_cast<uint64_t>(rec.id) << 8) | static_cast<uint64_t>(seg_idx & 0xff);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto states = enc_.encode(frames(rec, seg_idx));
    for (const auto& s : states)
        if (s.requires_grad())
            throw std::logic_error("SegmentStates: encoder must be frozen before caching");
    return cache_.emplace(key, std::move(states)).first->second;
}

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class JsonlLog {
public:
    explicit JsonlLog(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open log for writing: " + path);
    }
    void write(const json& j) { out_ << j.dump() << "\n"; }

private:
    std::ofstream out_;
};

void write_config_sidecar(const Config& cfg, const std::string& out_dir) {
    std::ofstream out(out_dir + "/config.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + out_dir + "/config.json");
    out << config_to_json(cfg);
}

std::vector<DatasetRecord> head(const std::vector<DatasetRecord>& docs, int n) {
    const auto k = std::min<size_t>(docs.size(), static_cast<size_t>(std::max(n, 0)));
    return {docs.begin(), docs.begin() + static_cast<ptrdiff_t>(k)};
}

Tensor<float> batch_mean(const std::vector<Tensor<float>>& losses) {
    if (losses.empty()) throw std::logic_error("batch_mean: empty batch");
    Tensor<float> total = losses.front();
    for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return scale(total, static_cast<float>(1.0 / static_cast<double>(losses.size())));
}

const DatasetRecord& sample_doc(const std::vector<DatasetRecord>& docs, Rng& rng) {
    return docs[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(docs.size()) - 1))];
}

// hypotheses never include EOS (generation strips it), references must not either
double pooled_wer(int64_t errors, int64_t ref_tokens) {
    if (ref_tokens <= 0) throw std::runtime_error("pooled wer: no reference tokens");
    return static_cast<double>(errors) / static_cast<double>(ref_tokens);
}

double stage_dev_metric(int stage, SpeechModel& m, SegmentStates& st,
                        const std::vector<DatasetRecord>& docs) {
    switch (stage) {
        case 1: return sentence_wer_metric(m, st, docs, false);
        case 2: return perplexity_metric(m, st, docs, true).ppl;
        case 3: return rouge_metric(m, st, docs, true).rl.f1;
        default: throw std::logic_error("stage_dev_metric: bad stage");
    }
}

const char* stage_metric_key(int stage) {
    switch (stage) {
        case 1: return "dev_wer";
        case 2: return "dev_ppl";
        case 3: return "dev_rouge_l";
        default: throw std::logic_error("stage_metric_key: bad stage");
    }
}

// ROUGE-L improves upward; the early-stop history wants lower-is-better
double stop_orientation(int stage, double metric) { return stage == 3 ? -metric : metric; }

void check_fusion_weights(const Connector<float>& conn) {
    Tensor<float> w = conn.layer_weights();
    double s = 0.0;
    for (int64_t i = 0; i < w.size(); ++i) s += static_cast<double>(w.data()[i]);
    if (std::abs(s - 1.0) > 1e-5)
        throw std::runtime_error("connector fusion weights no longer sum to 1");
}

// loss over one document in the stage's sequence layout
Tensor<float> doc_loss(int stage, SpeechModel& m, SegmentStates& st, const DatasetRecord& rec,
                       const Config& cfg, const StageConfig& sc, Rng& mask_rng, int step,
                       bool direct_ssum) {
    const int n_seg = static_cast<int>(rec.segments.size());
    if (stage == 1) {
        // isolated segments: [speech; BOS transcript], no segment positions
        std::vector<Tensor<float>> losses;
        for (int si = 0; si < n_seg; ++si) {
            SegmentInput<float> seg;
            seg.speech = m.connector.encode_segment(st.get(rec, si), si, false);
            seg.text = &rec.segments[static_cast<size_t>(si)];
            losses.push_back(m.lm.lm_loss(m.lm.build_prefix({seg}, nullptr, true)));
        }
        return batch_mean(losses);
    }

    std::vector<SegmentInput<float>> segs(static_cast<size_t>(n_seg));
    for (int si = 0; si < n_seg; ++si) {
        auto& seg = segs[static_cast<size_t>(si)];
        seg.speech = m.connector.encode_segment(st.get(rec, si), si, true);
        if (stage == 2) {
            seg.text = &rec.segments[static_cast<size_t>(si)];
            seg.mask = sample_mask(mask_rng, sc.mask_p);
        } else {
            const CurriculumPoint cur =
                direct_ssum ? CurriculumPoint{Phase::ssum, 0.0}
                            : curriculum_state(step, sc.steps, sc.fr_joint, sc.fr_cl, sc.fr_final);
            if (keep_transcript(rec.id, si, cfg.seed, cur.kappa))
                seg.text = &rec.segments[static_cast<size_t>(si)];
        }
    }
    if (stage == 2) return m.lm.lm_loss(m.lm.build_prefix(segs, nullptr, true));
    return m.lm.lm_loss(m.lm.build_prefix(segs, &rec.summary, false));
}

std::vector<int> strip_eos(std::vector<int> toks, int eos) {
    while (!toks.empty() && toks.back() == eos) toks.pop_back();
    return toks;
}

// the model dimensions must fit the corpus actually on disk, whatever the
// config's own data section claims (its seed, for one, may legitimately differ)
void check_against_corpus(const Config& cfg, const Corpus& corpus) {
    Config eff = cfg;
    eff.data = corpus.spec;
    validate_config(eff);
}

double pretrain_ter(const PretrainModel<float>& model, const CorpusSpec& spec,
                    const Tensor<float>& protos, const std::vector<DatasetRecord>& docs) {
    int64_t errors = 0, total = 0;
    for (const auto& rec : docs) {
        for (size_t si = 0; si < rec.segments.size(); ++si) {
            Tensor<float> fr =
                tokens_to_frames(rec.segments[si], protos, spec.frames_per_token, spec.sigma,
                                 frame_seed(spec, rec.id, static_cast<int>(si)));
            errors += levenshtein(model.decode_ctc(fr), rec.segments[si]);
            total += static_cast<int64_t>(rec.segments[si].size());
        }
    }
    return pooled_wer(errors, total);
}

}  // namespace

StageOutcome run_pretrain(const Config& cfg, const Corpus& corpus, const std::string& out_dir) {
    validate_config(cfg);
    check_against_corpus(cfg, corpus);
    const StageConfig& sc = cfg.stage0;
    const auto& train = corpus.split("train");
    const auto& dev = corpus.split("dev");
    if (train.empty() || dev.empty()) throw std::runtime_error("pretrain: empty train or dev split");

    fs::create_directories(out_dir);
    JsonlLog log(out_dir + "/metrics.jsonl");
    write_config_sidecar(cfg, out_dir);

    ParamStore<float> ps;
    Rng init_rng(mix_seed(cfg.seed, 0x6d6f64656cULL));
    PretrainModel<float> model(cfg.encoder, ps, init_rng);
    const Tensor<float> protos = token_prototypes<float>(corpus.spec);

    Adam<float> opt;
    for (auto& [name, t] : ps.items()) opt.add_param(name, t);

    Rng batch_rng(mix_seed(cfg.seed, 0xba7c4ULL, 0));
    StageOutcome out;
    out.stage = 0;
    std::vector<double> stop_history;

    for (int step = 1; step <= sc.steps; ++step) {
        const double lr = lr_schedule(step, sc.steps, sc.peak_lr, sc.warmup_frac);
        opt.zero_grad();
        // one backward per document keeps the live graph small; leaf gradients
        // accumulate across documents, so scaling each loss by 1/batch yields
        // exactly the batch-mean gradient
        double lval = 0.0;
        for (int b = 0; b < sc.batch_docs; ++b) {
            const DatasetRecord& rec = sample_doc(train, batch_rng);
            std::vector<Tensor<float>> seg_losses;
            for (size_t si = 0; si < rec.segments.size(); ++si) {
                Tensor<float> fr = tokens_to_frames(
                    rec.segments[si], protos, corpus.spec.frames_per_token, corpus.spec.sigma,
                    frame_seed(corpus.spec, rec.id, static_cast<int>(si)));
                seg_losses.push_back(model.loss(fr, rec.segments[si], sc.ctc_weight));
            }
            Tensor<float> doc = scale(batch_mean(seg_losses),
                                      static_cast<float>(1.0 / sc.batch_docs));
            lval += static_cast<double>(doc.data()[0]);
            doc.backward();
        }
        if (!std::isfinite(lval))
            throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
        opt.step(static_cast<float>(lr));

        if (step == 1) out.first_loss = lval;
        out.last_loss = lval;
        out.steps_run = step;

        if (step % sc.eval_interval == 0 || step == sc.steps) {
            const double ter = pretrain_ter(model, corpus.spec, protos, head(dev, sc.eval_docs));
            out.dev_history.push_back(ter);
            stop_history.push_back(ter);
            log.write({{"step", step}, {"lr", lr}, {"loss", lval}, {"dev_ter", ter}});
            if (early_stop(stop_history, sc.patience, sc.min_delta)) {
                out.stopped_early = true;
                break;
            }
        } else {
            log.write({{"step", step}, {"lr", lr}, {"loss", lval}});
        }
    }

    out.final_dev = pretrain_ter(model, corpus.spec, protos, dev);
    log.write({{"final", true}, {"dev_ter", out.final_dev}, {"steps", out.steps_run}});

    Checkpoint ck = snapshot(
        ps, [](const std::string& n) { return n.rfind("encoder/", 0) == 0; }, config_hash(cfg), 0);
    out.ckpt_path = out_dir + "/stage0.ckpt";
    save_checkpoint(out.ckpt_path, ck);
    return out;
}

StageOutcome run_stage(int stage, const Config& cfg, const Corpus& corpus,
                       const std::string& from_ckpt, const std::string& out_dir,
                       const StageVariant& variant) {
    if (stage < 1 || stage > 3)
        throw std::invalid_argument("run_stage: stage must be 1, 2 or 3");
    if (variant.direct_ssum && stage != 3)
        throw std::invalid_argument("run_stage: direct_ssum applies to stage 3 only");
    validate_config(cfg);
    check_against_corpus(cfg, corpus);
    const StageConfig& sc = stage == 1 ? cfg.stage1 : stage == 2 ? cfg.stage2 : cfg.stage3;
    const auto& train = corpus.split("train");
    const auto& dev = corpus.split("dev");
    if (train.empty() || dev.empty())
        throw std::runtime_error("run_stage: empty train or dev split");

    Checkpoint ck = load_checkpoint(from_ckpt);
    const int expect_from = variant.accept_from >= 0 ? variant.accept_from : stage - 1;
    if (ck.stage_id != expect_from)
        throw std::runtime_error("run_stage: checkpoint comes from stage " +
                                 std::to_string(ck.stage_id) + ", stage " + std::to_string(stage) +
                                 " continues from stage " + std::to_string(expect_from));
    if (ck.config_hash != config_hash(cfg))
        std::cerr << "warning: checkpoint config hash differs from the active config\n";

    fs::create_directories(out_dir);
    JsonlLog log(out_dir + "/metrics.jsonl");
    write_config_sidecar(cfg, out_dir);

    SpeechModel m(cfg);
    restore(m.ps, ck);

    // freeze the pretrained encoder and the LM base before any activation is cached
    for (auto& [name, t] : m.ps.items())
        if (frozen_in_stages(name)) t.node()->requires_grad = false;
    const uint64_t frozen_before = m.ps.hash_subset(frozen_in_stages);

    Adam<float> opt;
    for (auto& [name, t] : m.ps.items()) {
        if (frozen_in_stages(name)) continue;
        if (stage == 1 && name == "connector/seg_pos") continue;  // enters play in stage 2
        opt.add_param(name, t);
    }

    SegmentStates st(m.encoder, corpus.spec);
    Rng batch_rng(mix_seed(cfg.seed, 0xba7c4ULL, static_cast<uint64_t>(stage)));
    Rng mask_rng(mix_seed(cfg.seed, 0x3a53ULL, static_cast<uint64_t>(stage)));
    const bool use_seg_pos = stage >= 2;

    StageOutcome out;
    out.stage = stage;
    std::vector<double> stop_history;

    for (int step = 1; step <= sc.steps; ++step) {
        const double lr = lr_schedule(step, sc.steps, sc.peak_lr, sc.warmup_frac);
        opt.zero_grad();
        // backward per document so only one document's graph is live at a time;
        // pre-scaling by 1/batch makes the accumulated gradient the batch mean
        double lval = 0.0;
        for (int b = 0; b < sc.batch_docs; ++b) {
            Tensor<float> doc = scale(
                doc_loss(stage, m, st, sample_doc(train, batch_rng), cfg, sc, mask_rng, step,
                         variant.direct_ssum),
                static_cast<float>(1.0 / sc.batch_docs));
            lval += static_cast<double>(doc.data()[0]);
            doc.backward();
        }
        if (!std::isfinite(lval))
            throw std::runtime_error("stage " + std::to_string(stage) +
                                     ": non-finite loss at step " + std::to_string(step));
        opt.step(static_cast<float>(lr));
        check_fusion_weights(m.connector);

        if (step == 1) out.first_loss = lval;
        out.last_loss = lval;
        out.steps_run = step;

        if (step % sc.eval_interval == 0 || step == sc.steps) {
            const double metric = stage_dev_metric(stage, m, st, head(dev, sc.eval_docs));
            out.dev_history.push_back(metric);
            stop_history.push_back(stop_orientation(stage, metric));
            log.write({{"step", step},
                       {"lr", lr},
                       {"loss", lval},
                       {stage_metric_key(stage), metric}});
            if (early_stop(stop_history, sc.patience, sc.min_delta)) {
                out.stopped_early = true;
                break;
            }
        } else {
            log.write({{"step", step}, {"lr", lr}, {"loss", lval}});
        }
    }

    out.frozen_hash = m.ps.hash_subset(frozen_in_stages);
    if (out.frozen_hash != frozen_before)
        throw std::runtime_error("stage " + std::to_string(stage) +
                                 ": frozen parameters changed during training");

    out.final_dev = stage_dev_metric(stage, m, st, dev);
    log.write({{"final", true}, {stage_metric_key(stage), out.final_dev},
               {"steps", out.steps_run}});

    Checkpoint full = snapshot(
        m.ps, [](const std::string&) { return true; }, config_hash(cfg), stage);
    out.ckpt_path = out_dir + "/stage" + std::to_string(stage) + ".ckpt";
    save_checkpoint(out.ckpt_path, full);
    return out;
}

double sentence_wer_metric(SpeechModel& m, SegmentStates& st,
                           const std::vector<DatasetRecord>& docs, bool use_segment_pos) {
    const int max_new = m.lm.config().max_seq;  // generation stops at EOS or the budget below
    int64_t errors = 0, total = 0;
    for (const auto& rec : docs) {
        for (int si = 0; si < static_cast<int>(rec.segments.size()); ++si) {
            SegmentInput<float> seg;
            seg.speech = m.connector.encode_segment(st.get(rec, si), si, use_segment_pos);
            Tensor<float> prefix = m.lm.generation_prefix({seg});
            const int budget = std::min<int>(
                max_new - static_cast<int>(prefix.rows()),
                static_cast<int>(rec.segments[static_cast<size_t>(si)].size()) + 8);
            std::vector<int> hyp =
                strip_eos(m.lm.generate_greedy(prefix, budget), m.lm.config().eos);
            errors += levenshtein(hyp, rec.segments[static_cast<size_t>(si)]);
            total += static_cast<int64_t>(rec.segments[static_cast<size_t>(si)].size());
        }
    }
    return pooled_wer(errors, total);
}

double document_wer_metric(SpeechModel& m, SegmentStates& st,
                           const std::vector<DatasetRecord>& docs, bool use_segment_pos) {
    int64_t errors = 0, total = 0;
    for (const auto& rec : docs) {
        for (int si = 0; si < static_cast<int>(rec.segments.size()); ++si) {
            // earlier segments are teacher-forced with their reference transcripts
            std::vector<SegmentInput<float>> segs(static_cast<size_t>(si) + 1);
            for (int j = 0; j <= si; ++j) {
                segs[static_cast<size_t>(j)].speech =
                    m.connector.encode_segment(st.get(rec, j), j, use_segment_pos);
                if (j < si) segs[static_cast<size_t>(j)].text = &rec.segments[static_cast<size_t>(j)];
            }
            Tensor<float> prefix = m.lm.generation_prefix(segs);
            const int budget = std::min<int>(
                m.lm.config().max_seq - static_cast<int>(prefix.rows()),
                static_cast<int>(rec.segments[static_cast<size_t>(si)].size()) + 8);
            std::vector<int> hyp =
                strip_eos(m.lm.generate_greedy(prefix, budget), m.lm.config().eos);
            errors += levenshtein(hyp, rec.segments[static_cast<size_t>(si)]);
            total += static_cast<int64_t>(rec.segments[static_cast<size_t>(si)].size());
        }
    }
    return pooled_wer(errors, total);
}

PplResult perplexity_metric(SpeechModel& m, SegmentStates& st,
                            const std::vector<DatasetRecord>& docs, bool use_segment_pos) {
    if (docs.empty()) throw std::invalid_argument("perplexity_metric: no documents");
    double total_nll = 0.0;
    int64_t total_targets = 0;
    for (const auto& rec : docs) {
        std::vector<SegmentInput<float>> segs(rec.segments.size());
        for (int si = 0; si < static_cast<int>(rec.segments.size()); ++si) {
            segs[static_cast<size_t>(si)].speech =
                m.connector.encode_segment(st.get(rec, si), si, use_segment_pos);
            segs[static_cast<size_t>(si)].text = &rec.segments[static_cast<size_t>(si)];
        }
        BuiltPrefix<float> prefix = m.lm.build_prefix(segs, nullptr, true);
        const auto targets = static_cast<int64_t>(
            std::count_if(prefix.targets.begin(), prefix.targets.end(),
                          [](int t) { return t >= 0; }));
        const double mean_nll = static_cast<double>(m.lm.lm_loss(prefix).data()[0]);
        total_nll += mean_nll * static_cast<double>(targets);
        total_targets += targets;
    }
    PplResult out;
    out.mean_nll = total_nll / static_cast<double>(total_targets);
    constexpr double nll_cap = 50.0;  // exp(50) is already far beyond any usable perplexity
    if (out.mean_nll > nll_cap) {
        out.mean_nll = nll_cap;
        out.capped = true;
    }
    out.ppl = std::exp(out.mean_nll);
    return out;
}

RougeSummary rouge_metric(SpeechModel& m, SegmentStates& st,
                          const std::vector<DatasetRecord>& docs, bool use_segment_pos) {
    if (docs.empty()) throw std::invalid_argument("rouge_metric: no documents");
    RougeSummary acc;
    for (const auto& rec : docs) {
        std::vector<SegmentInput<float>> segs(rec.segments.size());
        for (int si = 0; si < static_cast<int>(rec.segments.size()); ++si)
            segs[static_cast<size_t>(si)].speech =
                m.connector.encode_segment(st.get(rec, si), si, use_segment_pos);
        Tensor<float> prefix = m.lm.generation_prefix(segs);
        const int budget = std::min<int>(m.lm.config().max_seq - static_cast<int>(prefix.rows()),
                                         static_cast<int>(rec.summary.size()) + 8);
        std::vector<int> hyp = strip_eos(m.lm.generate_greedy(prefix, budget), m.lm.config().eos);
        std::vector<int> ref = strip_eos(rec.summary, m.lm.config().eos);
        for (auto [slot, r] : {std::pair{&acc.r1, rouge_n(hyp, ref, 1)},
                               std::pair{&acc.r2, rouge_n(hyp, ref, 2)},
                               std::pair{&acc.rl, rouge_l(hyp, ref)}}) {
            slot->p += r.p;
            slot->r += r.r;
            slot->f1 += r.f1;
        }
    }
    const auto n = static_cast<double>(docs.size());
    for (Rouge* r : {&acc.r1, &acc.r2, &acc.rl}) {
        r->p /= n;
        r->r /= n;
        r->f1 /= n;
    }
    return acc;
}

EvalSession::EvalSession(const Config& cfg_in, const std::string& ckpt_path)
    : EvalSession(cfg_in, ckpt_path, cfg_in.data) {}

EvalSession::EvalSession(const Config& cfg_in, const std::string& ckpt_path,
                         const CorpusSpec& data_spec)
    : cfg(cfg_in), model(cfg_in), states(model.encoder, data_spec) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (ck.config_hash != config_hash(cfg))
        std::cerr << "warning: checkpoint config hash differs from the active config\n";
    restore(model.ps, ck);
    stage_id = ck.stage_id;
    use_segment_pos = stage_id >= 2;
    // evaluation never trains; freezing lets the encoder cache safely
    for (auto& [name, t] : model.ps.items()) t.node()->requires_grad = false;
}

std::vector<double> checkpoint_layer_weights(const Checkpoint& ckpt) {
    const CkptTensor* t = ckpt.find("connector/layer_logits");
    if (t == nullptr)
        throw std::runtime_error("checkpoint holds no connector fusion logits");
    if (t->dtype != DType::f32)
        throw std::runtime_error("connector fusion logits have an unexpected dtype");
    const int64_t n = t->count();
    if (n < 1) throw std::runtime_error("connector fusion logits are empty");
    std::vector<double> logits(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        float v = 0.0f;
        std::memcpy(&v, t->raw.data() + static_cast<size_t>(i) * sizeof(float), sizeof(float));
        logits[static_cast<size_t>(i)] = static_cast<double>(v);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        z += v;
    }
    for (double& v : logits) v /= z;
    return logits;
}

std::string format_weight_report(const std::vector<double>& w) {
    std::string out = "layer  weight\n";
    char buf[64];
    for (size_t i = 0; i < w.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%5zu  %.6f\n", i, w[i]);
        out += buf;
    }
    return out;
}

std::string format_weight_report(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("weight report: checkpoints fuse different layer counts");
    std::string out = "layer  weight_a  weight_b\n";
    char buf[96];
    for (size_t i = 0; i < a.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%5zu  %.6f  %.6f\n", i, a[i], b[i]);
        out += buf;
    }
    return out;
}

}  // namespace qsum
