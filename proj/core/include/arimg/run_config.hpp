#pragma once

#include <cstdint>
#include <string>

#include "arimg/contrastive.hpp"
#include "arimg/image_tokenizer.hpp"
#include "arimg/inference.hpp"
#include "arimg/parallel_sim.hpp"
#include "arimg/seq2seq.hpp"

namespace arimg {

// One JSON document with sections data, tokenizer, model, optimizer,
// sampler, reranker and sim. Every section and key is optional; unknown keys
// anywhere are rejected.
struct RunConfig {
  struct Data {
    int n = 2000;  // synthetic pairs
    std::uint64_t seed = 1;
    int vocab_size = 512;  // BPE target
    int holdout_mod = 8;  // canonical specs with hash % holdout_mod == 0 are never trained on; 0 = none
  } data;
  struct Tokenizer {
    TokenizerConfig config;
    TokenizerTrainConfig train;
    std::uint64_t init_seed = 7;
    SuperResConfig sr;
    SuperResTrainConfig sr_train;
  } tokenizer;
  struct Model {
    std::string preset = "desk";  // keys below override the preset
    ModelConfig config = ModelConfig::preset("desk");
    std::uint64_t init_seed = 3;
  } model;
  Seq2SeqTrainConfig optimizer;
  SamplerConfig sampler;
  struct Reranker {
    DualEncoderConfig config;
    ContrastiveTrainConfig train;
    std::uint64_t init_seed = 5;
  } reranker;
  struct Sim {
    PipelineSpec pipeline;
    ShardSpec shard;
  } sim;
};

// DataError on malformed JSON, unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const std::string& json_text);
// Full document with every key; parse_run_config(run_config_json(c)) == c.
std::string run_config_json(const RunConfig& cfg);
// Throws ContractError naming the first invalid value.
void validate_run_config(const RunConfig& cfg);

}  // namespace arimg
