#pragma once

#include <string>
#include <vector>

#include "qsum/connector.hpp"
#include "qsum/datagen.hpp"
#include "qsum/lm.hpp"

namespace qsum {

// one training stage's knobs; fields irrelevant to a stage keep their defaults
struct StageConfig {
    int steps = 500;
    double peak_lr = 1e-3;
    double warmup_frac = 0.05;
    int batch_docs = 16;
    int accum = 1;  // optional gradient accumulation
    int eval_interval = 50;
    int patience = 5;
    double min_delta = 0.0;
    int eval_docs = 24;      // dev subsample used for in-training evals
    double ctc_weight = 0.3; // stage 0 hybrid loss
    double mask_p = 0.2;     // stage 2 modality masking
    double fr_joint = 0.2, fr_cl = 0.5, fr_final = 0.3;  // stage 3 curriculum

    void validate(int stage) const;
};

struct Config {
    uint64_t seed = 0;
    CorpusSpec data;
    EncoderConfig encoder;
    ConnectorConfig connector;
    LmConfig lm;
    StageConfig stage0, stage1, stage2, stage3;
};

struct LoadedConfig {
    Config cfg;
    std::vector<std::string> provenance;  // "<key> = <value>  (file|default)"
    uint64_t hash = 0;
};

// canonical dump with sorted keys; the config hash is FNV-1a over these bytes
std::string config_to_json(const Config& cfg);
uint64_t config_hash(const Config& cfg);

// cross-module constraints (g·d_q == d_lm, vocab layout agreement, ...)
void validate_config(const Config& cfg);

LoadedConfig parse_config(const std::string& text, const std::string& origin);
LoadedConfig load_config(const std::string& path);

}  // namespace qsum
