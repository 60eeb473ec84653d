#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "arimg/image.hpp"
#include "arimg/nn.hpp"

namespace arimg {

struct TokenizerConfig {
  int image_size = 32;
  int patch = 4;
  int d_model = 64;
  int heads = 4;
  int d_mlp = 128;
  int enc_layers = 1;
  int dec_layers = 1;
  int codebook_size = 64;
  int code_dim = 8;
  // Decoder width overrides for a finetuned larger decoder; 0 = encoder's.
  int dec_d_model = 0;
  int dec_d_mlp = 0;

  int dec_width() const { return dec_d_model > 0 ? dec_d_model : d_model; }
  int dec_mlp() const { return dec_d_mlp > 0 ? dec_d_mlp : d_mlp; }
  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch * 3; }
  void validate() const;
};

struct TokenizerLayout {
  nn::LinearIds patch_in, enc_proj, dec_in, dec_out;
  int enc_pos = -1, dec_pos = -1, codebook = -1;
  std::vector<nn::BlockIds> enc, dec;
  nn::NormIds enc_norm, dec_norm;
};

struct ImageTokenizer {
  TokenizerConfig cfg;
  TokenizerLayout ids;
  ParamSet<float> params;
};

// Codebook rows start unit-norm. Deterministic in seed.
ImageTokenizer build_tokenizer(const TokenizerConfig& cfg, std::uint64_t seed);

template <typename T>
struct QuantizeResult {
  std::vector<std::int32_t> indices;
  Tensor<T> z_q;  // selected codebook rows; gradient passes straight through to z
  Tensor<T> codebook_loss;  // mean over rows of |sg(zhat) - e|^2
  Tensor<T> commitment_loss;  // mean over rows of |zhat - sg(e)|^2
};

// z: [n, d_c]. Rows are l2-normalized and matched to the nearest codebook
// row (lowest index on ties). Throws NumericError on zero-norm or
// non-finite rows.
template <typename T>
QuantizeResult<T> quantize(const Tensor<T>& codebook, const Tensor<T>& z);

// [B, H, W, 3] images to [B, tokens, patch_dim] patch rows, raster order.
Tensor<float> patchify(const TokenizerConfig& cfg, const std::vector<Image>& images);
std::vector<Image> unpatchify(const TokenizerConfig& cfg, std::span<const float> patches, int batch);

// Encoder up to the factorized code space: [B * tokens, code_dim].
template <typename T>
Tensor<T> encode_codes(const ImageTokenizer& tok, const nn::Params<T>& p, const Tensor<T>& patches);
// Decoder from code vectors [B * tokens, code_dim] to raw patch values.
template <typename T>
Tensor<T> decode_codes(const ImageTokenizer& tok, const nn::Params<T>& p, const Tensor<T>& codes, int batch);

std::vector<std::int32_t> tokenize(const ImageTokenizer& tok, const Image& image);
// Flattened grids, tokens() ids per image.
std::vector<std::int32_t> tokenize_batch(const ImageTokenizer& tok, const std::vector<Image>& images);
Image detokenize(const ImageTokenizer& tok, std::span<const std::int32_t> tokens);
std::vector<Image> detokenize_batch(const ImageTokenizer& tok, std::span<const std::int32_t> tokens, int batch);

struct TokenizerTrainConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 2e-3;
  double beta_commit = 0.25;
  std::uint64_t seed = 0;
  // Every this many steps, codes unused since the last check are moved onto
  // random encoder outputs from the current batch. 0 disables.
  int restart_every = 200;
  // Freeze encoder and codebook; only decoder parameters move.
  bool decoder_only = false;
};

struct TokenizerTrainResult {
  std::vector<double> loss;
  std::vector<double> recon;
  int restarted_codes = 0;
};

// Loss: mean squared pixel error + codebook loss + beta_commit * commitment.
// Codebook rows are renormalized after every step. Throws NumericError on a
// non-finite loss.
// on_step, if set, sees the tokenizer after each finished step.
TokenizerTrainResult train_tokenizer(ImageTokenizer& tok, const std::vector<Image>& images,
                                     const TokenizerTrainConfig& cfg,
                                     const std::function<void(int, const ImageTokenizer&)>& on_step = {});

// Larger decoder trained against a frozen encoder and codebook. The returned
// tokenizer shares no storage with `tok`.
ImageTokenizer widen_decoder(const ImageTokenizer& tok, int d_model, int d_mlp, int layers, std::uint64_t seed);

struct CodebookStats {
  double usage_fraction = 0.0;
  double perplexity = 0.0;
};
CodebookStats codebook_stats(std::span<const std::int32_t> ids, int codebook_size);

// Residual conv super-resolution: nearest 2x upsample, then conv stem, R
// residual blocks (conv-relu-conv plus skip), conv to RGB added to the
// upsampled input.
struct SuperResConfig {
  int blocks = 4;
  int channels = 32;
  void validate() const;
};

struct ConvIds {
  int w = -1;
  int b = -1;
};

struct SuperResNet {
  SuperResConfig cfg;
  ParamSet<float> params;
  ConvIds stem, head;
  std::vector<std::pair<ConvIds, ConvIds>> blocks;
};

SuperResNet build_superres(const SuperResConfig& cfg, std::uint64_t seed);

template <typename T>
Tensor<T> superres_forward(const SuperResNet& sr, const nn::Params<T>& p, const Tensor<T>& upsampled);

Image upsample(const SuperResNet& sr, const Image& image);

struct SuperResTrainConfig {
  int steps = 300;
  int batch = 4;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};
// Pairs of (low, high) images, high at twice the side. Returns loss history.
std::vector<double> train_superres(SuperResNet& sr, const std::vector<Image>& low, const std::vector<Image>& high,
                                   const SuperResTrainConfig& cfg);

}  // namespace arimg
