#pragma once

// One field list per config struct, used for both JSON directions.

#include "arimg/contrastive.hpp"
#include "arimg/image_tokenizer.hpp"
#include "arimg/inference.hpp"
#include "arimg/parallel_sim.hpp"
#include "arimg/seq2seq.hpp"
#include "json_fields.hpp"

namespace arimg::detail {

template <typename V>
void visit(V& v, ModelConfig& c) {
  v("enc_layers", c.enc_layers);
  v("dec_layers", c.dec_layers);
  v("d_model", c.d_model);
  v("d_mlp", c.d_mlp);
  v("heads", c.heads);
  v("text_vocab", c.text_vocab);
  v("image_vocab", c.image_vocab);
  v("text_len", c.text_len);
  v("grid_h", c.grid_h);
  v("grid_w", c.grid_w);
  v("cond_dropout_rate", c.cond_dropout_rate);
  v("conv_kernel", c.conv_kernel);
  v("dropout", c.dropout);
}

template <typename V>
void visit(V& v, TokenizerConfig& c) {
  v("image_size", c.image_size);
  v("patch", c.patch);
  v("d_model", c.d_model);
  v("heads", c.heads);
  v("d_mlp", c.d_mlp);
  v("enc_layers", c.enc_layers);
  v("dec_layers", c.dec_layers);
  v("codebook_size", c.codebook_size);
  v("code_dim", c.code_dim);
  v("dec_d_model", c.dec_d_model);
  v("dec_d_mlp", c.dec_d_mlp);
}

template <typename V>
void visit(V& v, TokenizerTrainConfig& c) {
  v("steps", c.steps);
  v("batch", c.batch);
  v("lr", c.lr);
  v("beta_commit", c.beta_commit);
  v("seed", c.seed);
  v("restart_every", c.restart_every);
  v("decoder_only", c.decoder_only);
}

template <typename V>
void visit(V& v, SuperResConfig& c) {
  v("blocks", c.blocks);
  v("channels", c.channels);
}

template <typename V>
void visit(V& v, SuperResTrainConfig& c) {
  v("steps", c.steps);
  v("batch", c.batch);
  v("lr", c.lr);
  v("seed", c.seed);
}

template <typename V>
void visit(V& v, DualEncoderConfig& c) {
  v("image_size", c.image_size);
  v("patch", c.patch);
  v("d_model", c.d_model);
  v("heads", c.heads);
  v("d_mlp", c.d_mlp);
  v("layers", c.layers);
  v("embed_dim", c.embed_dim);
  v("text_len", c.text_len);
  v("tau_init", c.tau_init);
}

template <typename V>
void visit(V& v, ContrastiveTrainConfig& c) {
  v("steps", c.steps);
  v("batch", c.batch);
  v("lr", c.lr);
  v("seed", c.seed);
}

template <typename V>
void visit(V& v, Seq2SeqTrainConfig& c) {
  v("steps", c.steps);
  v("batch", c.batch);
  v("lr", c.lr);
  v("seed", c.seed);
  v("cond_dropout_rate", c.cond_dropout_rate);
  v("dropout", c.dropout);
}

template <typename V>
void visit(V& v, SamplerConfig& c) {
  v("lambda", c.lambda);
  v("temperature", c.temperature);
  v("top_k", c.top_k);
  v("n_samples", c.n_samples);
  v("seed", c.seed);
}

template <typename V>
void visit(V& v, PipelineSpec& c) {
  v("stages", c.stages);
  v("microbatches", c.microbatches);
  v("rounds", c.rounds);
  v("t_f", c.t_f);
  v("t_b", c.t_b);
  v("latency", c.latency);
  v("prologue", c.prologue);
  v("epilogue", c.epilogue);
  v("data_parallel", c.data_parallel);
}

template <typename V>
void visit(V& v, ShardSpec& c) {
  v("n_way", c.n_way);
  v("batch", c.batch);
  v("seq", c.seq);
  v("d_model", c.d_model);
  v("d_mlp", c.d_mlp);
  v("heads", c.heads);
  std::string s = strategy_name(c.strategy);
  v("strategy", s);
  try {
    c.strategy = strategy_from_name(s);
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  v("element_size", c.element_size);
}

struct Reader {
  Fields& f;
  template <typename T>
  void operator()(const char* key, T& out) {
    f.get(key, out);
  }
};

struct Writer {
  nlohmann::ordered_json& j;
  template <typename T>
  void operator()(const char* key, T& v) {
    j[key] = v;
  }
};

template <typename C>
void read_into(Fields& f, C& c) {
  Reader r{f};
  visit(r, c);
}

template <typename C>
void write_from(nlohmann::ordered_json& j, C c) {
  Writer w{j};
  visit(w, c);
}

}  // namespace arimg::detail
