#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arimg/image.hpp"
#include "arimg/nn.hpp"
#include "arimg/textproc.hpp"

namespace arimg {

struct DualEncoderConfig {
  int image_size = 32;
  int patch = 8;
  int d_model = 64;
  int heads = 4;
  int d_mlp = 128;
  int layers = 2;  // per tower
  int embed_dim = 32;
  int text_len = 32;
  double tau_init = 1.0 / 0.07;
  void validate() const;
};

struct DualEncoderLayout {
  nn::LinearIds patch_in, image_proj, text_proj;
  int image_pos = -1, text_embed = -1, text_pos = -1, tau = -1;
  std::vector<nn::BlockIds> image_blocks, text_blocks;
  nn::NormIds image_norm, text_norm;
};

// Image tower: patch embedding, transformer blocks, mean pool, projection.
// Text tower: token embedding, blocks, mean pool over non-PAD tokens,
// projection. Both outputs are l2-normalized. tau is the learned inverse
// temperature, kept in [1, 100].
struct DualEncoder {
  DualEncoderConfig cfg;
  SubwordVocab vocab;
  DualEncoderLayout ids;
  ParamSet<float> params;

  double tau() const { return params[static_cast<std::size_t>(ids.tau)].data()[0]; }
};

DualEncoder build_dual_encoder(const DualEncoderConfig& cfg, SubwordVocab vocab, std::uint64_t seed);

// Batched tower forwards, [B, embed_dim] unit rows.
template <typename T>
Tensor<T> embed_image_batch(const DualEncoder& enc, const nn::Params<T>& p, const std::vector<Image>& images);
template <typename T>
Tensor<T> embed_text_batch(const DualEncoder& enc, const nn::Params<T>& p, std::span<const std::int32_t> text_ids,
                           int batch);

// Symmetric in-batch cross-entropy of the tau-scaled similarity matrix.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& image_emb, const Tensor<T>& text_emb, const Tensor<T>& tau);

// Inference embeddings are computed one item at a time, so a row never
// depends on what else was embedded with it.
std::vector<float> embed_image(const DualEncoder& enc, const Image& image);
std::vector<float> embed_text(const DualEncoder& enc, const std::string& text);

// Cosine of the two embeddings, in [-1, 1].
double alignment_score(const DualEncoder& enc, const Image& image, const std::string& text);
double cosine(std::span<const float> a, std::span<const float> b);

struct ContrastiveTrainConfig {
  int steps = 2000;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Batches are drawn with replacement. Returns per-step loss; ContractError
// for batch < 2.
std::vector<double> train_contrastive(DualEncoder& enc, const std::vector<Image>& images,
                                      const std::vector<std::string>& captions, const ContrastiveTrainConfig& cfg);

struct RetrievalIndex {
  int dim = 0;
  std::vector<float> rows;  // n x dim, unit rows
  std::vector<std::int64_t> ids;
  std::size_t size() const noexcept { return ids.size(); }
};

// Identifiers default to 0..n-1.
RetrievalIndex build_index(const DualEncoder& enc, const std::vector<Image>& images,
                           std::vector<std::int64_t> ids = {});

struct Retrieved {
  std::int64_t id = 0;
  double score = 0.0;
};

// Exact top-k by cosine, descending, ties to the lower identifier.
std::vector<Retrieved> retrieve_nearest(const RetrievalIndex& index, std::span<const float> query, int k);
std::vector<Retrieved> retrieve_nearest(const DualEncoder& enc, const RetrievalIndex& index, const std::string& text,
                                        int k);

}  // namespace arimg
