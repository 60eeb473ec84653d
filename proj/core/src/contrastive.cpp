#include "arimg/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "arimg/image_tokenizer.hpp"
#include "arimg/optim.hpp"

namespace arimg {

void DualEncoderConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ContractError("dual encoder config: " + what);
  };
  need(image_size > 0 && patch > 0 && image_size % patch == 0, "patch must divide image_size");
  need(d_model > 0 && heads > 0 && d_model % heads == 0, "heads must divide d_model");
  need(d_mlp > 0 && layers >= 1 && embed_dim > 0, "d_mlp, layers and embed_dim must be positive");
  need(text_len >= 2, "text_len must be >= 2");
  need(tau_init > 0.0, "tau_init must be > 0");
}

namespace {

constexpr double kTauMin = 1.0;
constexpr double kTauMax = 100.0;

template <typename T>
const Tensor<T>& at(const nn::Params<T>& p, int i) {
  return p[static_cast<std::size_t>(i)];
}

TokenizerConfig patch_config(const DualEncoderConfig& c) {
  TokenizerConfig t;
  t.image_size = c.image_size;
  t.patch = c.patch;
  return t;
}

}  // namespace

DualEncoder build_dual_encoder(const DualEncoderConfig& cfg, SubwordVocab vocab, std::uint64_t seed) {
  cfg.validate();
  DualEncoder enc;
  enc.cfg = cfg;
  enc.vocab = std::move(vocab);
  Rng rng(seed);
  auto& ps = enc.params;
  auto& ids = enc.ids;
  const auto pc = patch_config(cfg);
  const std::int64_t D = cfg.d_model;
  ids.patch_in = nn::add_linear(ps, "img.patch_in", pc.patch_dim(), D, rng);
  ids.image_pos = ps.add_normal("img.pos", {pc.tokens(), D}, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    ids.image_blocks.push_back(nn::add_block(ps, "img.block" + std::to_string(l), D, cfg.d_mlp, false, rng));
  }
  ids.image_norm = nn::add_norm(ps, "img.norm", D);
  ids.image_proj = nn::add_linear(ps, "img.proj", D, cfg.embed_dim, rng);
  ids.text_embed = ps.add_normal("txt.embed", {enc.vocab.vocab_size(), D}, rng);
  ids.text_pos = ps.add_normal("txt.pos", {cfg.text_len, D}, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    ids.text_blocks.push_back(nn::add_block(ps, "txt.block" + std::to_string(l), D, cfg.d_mlp, false, rng));
  }
  ids.text_norm = nn::add_norm(ps, "txt.norm", D);
  ids.text_proj = nn::add_linear(ps, "txt.proj", D, cfg.embed_dim, rng);
  ids.tau = ps.add("tau", Tensor<float>({1}, {static_cast<float>(cfg.tau_init)}));
  return enc;
}

template <typename T>
Tensor<T> embed_image_batch(const DualEncoder& enc, const nn::Params<T>& p, const std::vector<Image>& images) {
  const auto pc = patch_config(enc.cfg);
  const auto patches32 = patchify(pc, images);
  Tensor<T> patches;
  if constexpr (std::is_same_v<T, float>) {
    patches = patches32;
  } else {
    patches = Tensor<T>(patches32.shape(), std::vector<T>(patches32.data().begin(), patches32.data().end()));
  }
  auto x = ops::add(nn::linear(patches, p, enc.ids.patch_in), at(p, enc.ids.image_pos));
  for (const auto& b : enc.ids.image_blocks) x = nn::block<T>(x, nullptr, p, b, enc.cfg.heads, {}, {});
  auto pooled = ops::reduce_mean(nn::norm(x, p, enc.ids.image_norm), 1);
  return ops::l2_normalize(nn::linear(pooled, p, enc.ids.image_proj), -1);
}

template <typename T>
Tensor<T> embed_text_batch(const DualEncoder& enc, const nn::Params<T>& p, std::span<const std::int32_t> text_ids,
                           int batch) {
  const int L = enc.cfg.text_len;
  if (batch < 1 || text_ids.size() != static_cast<std::size_t>(batch) * L) {
    throw ShapeError("embed_text_batch: expected " + std::to_string(batch) + " x " + std::to_string(L) + " ids, got " +
                     std::to_string(text_ids.size()));
  }
  auto x = ops::add(ops::embedding_gather(at(p, enc.ids.text_embed), text_ids, {batch, L}), at(p, enc.ids.text_pos));
  for (const auto& b : enc.ids.text_blocks) x = nn::block<T>(x, nullptr, p, b, enc.cfg.heads, {}, {});
  x = nn::norm(x, p, enc.ids.text_norm);
  // Mean over non-PAD positions (all positions for an all-PAD row).
  std::vector<T> w(static_cast<std::size_t>(batch) * L, T(0));
  for (int b = 0; b < batch; ++b) {
    int n = 0;
    for (int t = 0; t < L; ++t) n += text_ids[static_cast<std::size_t>(b) * L + t] != kPad;
    for (int t = 0; t < L; ++t) {
      const bool use = n == 0 || text_ids[static_cast<std::size_t>(b) * L + t] != kPad;
      if (use) w[static_cast<std::size_t>(b) * L + t] = T(1) / static_cast<T>(n == 0 ? L : n);
    }
  }
  auto pooled = ops::matmul(Tensor<T>({batch, 1, L}, std::move(w)), x);
  pooled = ops::reshape(pooled, {batch, enc.cfg.d_model});
  return ops::l2_normalize(nn::linear(pooled, p, enc.ids.text_proj), -1);
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& image_emb, const Tensor<T>& text_emb, const Tensor<T>& tau) {
  if (image_emb.rank() != 2 || image_emb.shape() != text_emb.shape()) {
    throw ShapeError("contrastive_loss: embeddings " + shape_str(image_emb.shape()) + " vs " +
                     shape_str(text_emb.shape()));
  }
  const auto B = image_emb.dim(0);
  if (B < 2) throw ContractError("contrastive_loss: batch of 1 has no negatives");
  if (tau.numel() != 1) throw ShapeError("contrastive_loss: tau must hold one value");
  // Broadcasting is trailing-only, so scale through a [B*B,1] x [1,1] product.
  auto sim = ops::reshape(ops::matmul(image_emb, ops::transpose(text_emb, {1, 0})), {B * B, 1});
  auto logits = ops::reshape(ops::matmul(sim, ops::reshape(tau, {1, 1})), {B, B});
  std::vector<std::int32_t> targets(static_cast<std::size_t>(B));
  std::iota(targets.begin(), targets.end(), 0);
  auto i2t = ops::cross_entropy_with_logits(logits, std::span<const std::int32_t>(targets));
  auto t2i = ops::cross_entropy_with_logits(ops::transpose(logits, {1, 0}), std::span<const std::int32_t>(targets));
  return ops::scale(ops::add(i2t, t2i), 0.5);
}

std::vector<float> embed_image(const DualEncoder& enc, const Image& image) {
  const auto e = embed_image_batch<float>(enc, enc.params.values(), {image});
  return {e.data().begin(), e.data().end()};
}

std::vector<float> embed_text(const DualEncoder& enc, const std::string& text) {
  const auto ids = encode_padded(enc.vocab, text, enc.cfg.text_len);
  const auto e = embed_text_batch<float>(enc, enc.params.values(), ids, 1);
  return {e.data().begin(), e.data().end()};
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double alignment_score(const DualEncoder& enc, const Image& image, const std::string& text) {
  return cosine(embed_image(enc, image), embed_text(enc, text));
}

std::vector<double> train_contrastive(DualEncoder& enc, const std::vector<Image>& images,
                                      const std::vector<std::string>& captions, const ContrastiveTrainConfig& cfg) {
  if (images.size() != captions.size()) throw ShapeError("train_contrastive: images and captions differ in count");
  if (images.empty()) throw ContractError("train_contrastive: no pairs");
  if (cfg.batch < 2) throw ContractError("train_contrastive: batch must be >= 2 (in-batch negatives)");
  std::vector<std::vector<std::int32_t>> rows;
  rows.reserve(captions.size());
  for (const auto& c : captions) rows.push_back(encode_padded(enc.vocab, c, enc.cfg.text_len));

  AdafactorConfig ocfg;
  ocfg.schedule = LrSchedule::scaled(std::max(cfg.steps, 1), cfg.lr);
  Adafactor opt(enc.params.values(), ocfg);
  Rng rng(cfg.seed);
  const int B = cfg.batch;
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(cfg.steps));
  std::vector<Image> bi(static_cast<std::size_t>(B));
  std::vector<std::int32_t> bt;
  for (int step = 0; step < cfg.steps; ++step) {
    bt.clear();
    for (int b = 0; b < B; ++b) {
      const auto k = rng.below(images.size());
      bi[static_cast<std::size_t>(b)] = images[k];
      bt.insert(bt.end(), rows[k].begin(), rows[k].end());
    }
    Tape<float> tape;
    auto p = enc.params.bind(tape);
    auto loss = contrastive_loss(embed_image_batch<float>(enc, p, bi), embed_text_batch<float>(enc, p, bt, B),
                                 p[static_cast<std::size_t>(enc.ids.tau)]);
    const double v = loss.item();
    if (!std::isfinite(v)) throw NumericError("train_contrastive: non-finite loss at step " + std::to_string(step));
    history.push_back(v);
    opt.step(collect_grads(backward(loss), p));
    auto& tau = enc.params[static_cast<std::size_t>(enc.ids.tau)].mutable_data()[0];
    tau = static_cast<float>(std::clamp(static_cast<double>(tau), kTauMin, kTauMax));
  }
  return history;
}

RetrievalIndex build_index(const DualEncoder& enc, const std::vector<Image>& images, std::vector<std::int64_t> ids) {
  if (images.empty()) throw ContractError("build_index: no images");
  if (ids.empty()) {
    ids.resize(images.size());
    std::iota(ids.begin(), ids.end(), 0);
  }
  if (ids.size() != images.size()) throw ShapeError("build_index: identifiers and images differ in count");
  RetrievalIndex index;
  index.dim = enc.cfg.embed_dim;
  index.ids = std::move(ids);
  index.rows.reserve(images.size() * static_cast<std::size_t>(index.dim));
  for (const auto& im : images) {
    const auto e = embed_image(enc, im);
    index.rows.insert(index.rows.end(), e.begin(), e.end());
  }
  return index;
}

std::vector<Retrieved> retrieve_nearest(const RetrievalIndex& index, std::span<const float> query, int k) {
  const auto n = index.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) {
    throw ContractError("retrieve_nearest: k " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  if (query.size() != static_cast<std::size_t>(index.dim)) throw ShapeError("retrieve_nearest: query dimension mismatch");
  std::vector<Retrieved> all(n);
  for (std::size_t i = 0; i < n; ++i) {
    all[i] = {index.ids[i], cosine(std::span<const float>(index.rows).subspan(i * index.dim, index.dim), query)};
  }
  const auto better = [](const Retrieved& a, const Retrieved& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  };
  std::partial_sort(all.begin(), all.begin() + k, all.end(), better);
  all.resize(static_cast<std::size_t>(k));
  return all;
}

std::vector<Retrieved> retrieve_nearest(const DualEncoder& enc, const RetrievalIndex& index, const std::string& text,
                                        int k) {
  return retrieve_nearest(index, embed_text(enc, text), k);
}

#define ARIMG_INSTANTIATE_CONTRASTIVE(T)                                                                       \
  template Tensor<T> embed_image_batch<T>(const DualEncoder&, const nn::Params<T>&, const std::vector<Image>&); \
  template Tensor<T> embed_text_batch<T>(const DualEncoder&, const nn::Params<T>&, std::span<const std::int32_t>, \
                                         int);                                                                 \
  template Tensor<T> contrastive_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);
ARIMG_INSTANTIATE_CONTRASTIVE(float)
ARIMG_INSTANTIATE_CONTRASTIVE(double)

}  // namespace arimg
