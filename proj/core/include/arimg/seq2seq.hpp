#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "arimg/nn.hpp"
#include "arimg/optim.hpp"

namespace arimg {

class SubwordVocab;

struct ModelConfig {
  int enc_layers = 2;
  int dec_layers = 4;
  int d_model = 64;
  int d_mlp = 256;
  int heads = 4;
  int text_vocab = 512;
  int image_vocab = 64;
  int text_len = 32;
  int grid_h = 8;
  int grid_w = 8;
  double cond_dropout_rate = 0.1;
  int conv_kernel = 3;
  double dropout = 0.1;

  int image_len() const { return grid_h * grid_w; }
  // Throws ContractError on invalid dimensions.
  void validate() const;

  // "350M", "750M", "3B", "20B" (full-size shapes) or "desk".
  static ModelConfig preset(const std::string& name);
};

// Parameter count of build_model(cfg) without instantiating it. Embeddings
// are the text/image token and position tables plus the output projection.
std::int64_t parameter_count(const ModelConfig& cfg, bool include_embeddings);

// Row-major image_len x image_len; 1 where raster position i may attend to j:
// j <= i and Chebyshev distance of their grid cells <= (k-1)/2.
std::vector<std::uint8_t> conv_sparse_mask(int grid_h, int grid_w, int k);

struct Seq2SeqLayout {
  int text_embed = -1, text_pos = -1, image_embed = -1, image_pos = -1;
  std::vector<nn::BlockIds> enc, dec;
  nn::NormIds enc_norm, dec_norm;
  nn::LinearIds head;
};

struct Seq2SeqModel {
  ModelConfig cfg;
  Seq2SeqLayout ids;
  ParamSet<float> params;
  // Decoder self-attention: 1 = blocked (complement of conv_sparse_mask).
  std::vector<std::uint8_t> dec_blocked;
};

// Truncated-normal(0.02) weights, unit LN gains, zero biases; deterministic in seed.
Seq2SeqModel build_model(const ModelConfig& cfg, std::uint64_t seed);

// Image embedding row used as the decoder start token.
inline int image_bos(const ModelConfig& cfg) { return cfg.image_vocab; }

// text_ids: batch * text_len; returns the normalized encoder output [B, text_len, D].
template <typename T>
Tensor<T> encode_text_batch(const Seq2SeqModel& m, const nn::Params<T>& p, std::span<const std::int32_t> text_ids,
                            int batch, const nn::Dropout& drop = {});

// Teacher-forced logits [B, image_len, K]; position t sees image tokens < t.
template <typename T>
Tensor<T> decoder_logits(const Seq2SeqModel& m, const nn::Params<T>& p, const Tensor<T>& memory,
                         std::span<const std::int32_t> image_ids, int batch, const nn::Dropout& drop = {});

// Mean next-token cross-entropy over image positions and batch. Each example's
// text is replaced by all-PAD with probability cond_dropout_rate; dropout is
// applied when `dropout_rate` > 0. All randomness comes from `rng`.
template <typename T>
Tensor<T> forward_loss(const Seq2SeqModel& m, const nn::Params<T>& p, std::span<const std::int32_t> text_ids,
                       std::span<const std::int32_t> image_ids, int batch, Rng& rng, double cond_dropout_rate,
                       double dropout_rate = 0.0);

// Copies every row, replacing dropped rows with PAD, as forward_loss does.
std::vector<std::int32_t> apply_cond_dropout(std::span<const std::int32_t> text_ids, int batch, int text_len,
                                             Rng& rng, double rate);

struct TextPretrainConfig {
  int steps = 1000;
  int batch = 16;
  double mask_rate = 0.15;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Masked-token pretraining of the encoder through a temporary prediction
// head (discarded afterwards). Masked positions are replaced by UNK, which
// byte-level text never produces. Decoder parameters are not touched.
// Returns the per-step loss history.
std::vector<double> pretrain_text_encoder(Seq2SeqModel& m, const SubwordVocab& vocab,
                                          const std::vector<std::string>& corpus, const TextPretrainConfig& cfg);

struct Seq2SeqTrainConfig {
  int steps = 20000;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  // Negative: take the model config's rates.
  double cond_dropout_rate = -1.0;
  double dropout = -1.0;
};

// Trains on n (text, image-token) pairs, batches drawn with replacement.
// Returns the per-step loss; throws NumericError on a non-finite loss.
// `on_step(step, loss)` is called after every step when set.
std::vector<double> train_seq2seq(Seq2SeqModel& m, std::span<const std::int32_t> text_ids,
                                  std::span<const std::int32_t> image_ids, int n, const Seq2SeqTrainConfig& cfg,
                                  const std::function<void(int, double)>& on_step = {});

}  // namespace arimg
