#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arimg/image.hpp"
#include "arimg/image_tokenizer.hpp"
#include "arimg/seq2seq.hpp"

namespace arimg {

class SubwordVocab;

struct SamplerConfig {
  double lambda = 1.2;  // guidance weight
  double temperature = 1.0;
  int top_k = 0;  // 0 = off
  int n_samples = 16;
  std::uint64_t seed = 0;
  void validate(int image_vocab) const;
};

// u + lambda * (c - u), evaluated as (1 - lambda) * u + lambda * c in double
// so that lambda = 0 and lambda = 1 return u and c bit-exactly.
std::vector<float> guided_logits(std::span<const float> u, std::span<const float> c, double lambda);

// Incremental decoder with per-layer key/value caches. Memory rows are the
// encoder outputs of each condition; every decoded row names its condition.
class DecoderCache {
 public:
  DecoderCache(const Seq2SeqModel& m, const Tensor<float>& memory, std::vector<int> row_condition);

  int rows() const noexcept { return static_cast<int>(cond_.size()); }
  int position() const noexcept { return pos_; }
  // Feeds the previous token of every row (BOS at position 0) and returns
  // next-token logits, [rows, image_vocab] row-major.
  std::vector<float> step(std::span<const std::int32_t> prev_tokens);

 private:
  const Seq2SeqModel& m_;
  std::vector<int> cond_;
  int pos_ = 0;
  std::vector<std::vector<float>> k_self_, v_self_;  // [rows, len, D] per layer
  std::vector<std::vector<float>> k_mem_, v_mem_;  // [conditions, text_len, D] per layer
};

// Draws one token from guided logits: temperature, then top-k (ties at the
// cut keep lower ids), then a categorical draw. Throws NumericError if no
// finite logit remains.
std::int32_t draw_token(std::span<const float> logits, const SamplerConfig& cfg, Rng& rng);

// cfg.n_samples grids (image_len ids each, flattened) for one encoded text
// row. Sample i draws from Rng(derive_seed(cfg.seed, i)).
std::vector<std::int32_t> sample_grids(const Seq2SeqModel& m, std::span<const std::int32_t> text_ids,
                                       const SamplerConfig& cfg);
// A single grid: sample 0 of sample_grids.
std::vector<std::int32_t> sample_tokens(const Seq2SeqModel& m, std::span<const std::int32_t> text_ids,
                                        const SamplerConfig& cfg);

struct SampleBatch {
  std::string prompt;
  std::vector<std::vector<std::int32_t>> grids;
  std::vector<Image> images;
  std::optional<std::vector<double>> scores;  // set by rerank
  std::uint64_t seed = 0;
};

SampleBatch generate(const Seq2SeqModel& m, const SubwordVocab& vocab, const ImageTokenizer& tok,
                     const SuperResNet* sr, const std::string& prompt, const SamplerConfig& cfg);

using AlignmentScorer = std::function<double(const Image&, const std::string&)>;

// Scores every image against the prompt and sorts descending (stable).
SampleBatch rerank(SampleBatch batch, const AlignmentScorer& scorer);

}  // namespace arimg
