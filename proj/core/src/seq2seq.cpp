#include "arimg/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "arimg/textproc.hpp"

namespace arimg {

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ContractError("model config: " + what);
  };
  need(enc_layers >= 1 && dec_layers >= 1, "layer counts must be >= 1");
  need(d_model >= 1 && d_mlp >= 1 && heads >= 1, "widths and heads must be >= 1");
  need(d_model % heads == 0, "heads (" + std::to_string(heads) + ") must divide d_model (" +
                                 std::to_string(d_model) + ")");
  need(text_vocab > kFirstByte, "text_vocab must exceed the special and byte ids");
  need(image_vocab >= 2, "image_vocab must be >= 2");
  need(text_len >= 2 && text_len <= 128, "text_len must be in [2, 128]");
  need(grid_h >= 1 && grid_w >= 1, "grid dims must be >= 1");
  need(conv_kernel >= 1 && conv_kernel % 2 == 1, "conv_kernel must be odd and >= 1");
  need(cond_dropout_rate >= 0.0 && cond_dropout_rate <= 1.0, "cond_dropout_rate must be in [0, 1]");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "desk") return c;
  auto big = [&](int enc, int dec, int d, int f, int h) {
    c.enc_layers = enc;
    c.dec_layers = dec;
    c.d_model = d;
    c.d_mlp = f;
    c.heads = h;
    c.text_vocab = 16000;
    c.image_vocab = 8192;
    c.text_len = 128;
    c.grid_h = 32;
    c.grid_w = 32;
    return c;
  };
  if (name == "350M") return big(12, 12, 1024, 4096, 16);
  if (name == "750M") return big(12, 36, 1024, 4096, 16);
  if (name == "3B") return big(12, 36, 2048, 8192, 32);
  if (name == "20B") return big(16, 64, 4096, 16384, 64);
  throw ContractError("model config: unknown preset '" + name + "'");
}

std::int64_t parameter_count(const ModelConfig& cfg, bool include_embeddings) {
  cfg.validate();
  const std::int64_t d = cfg.d_model, f = cfg.d_mlp;
  const std::int64_t norm = 2 * d;
  const std::int64_t attn = 4 * (d * d + d);
  const std::int64_t mlp = d * f + f + f * d + d;
  const std::int64_t enc_block = 2 * norm + attn + mlp;
  const std::int64_t dec_block = 3 * norm + 2 * attn + mlp;
  std::int64_t n = cfg.enc_layers * enc_block + cfg.dec_layers * dec_block + 2 * norm;
  if (include_embeddings) {
    n += static_cast<std::int64_t>(cfg.text_vocab) * d + static_cast<std::int64_t>(cfg.text_len) * d;
    n += static_cast<std::int64_t>(cfg.image_vocab + 1) * d + static_cast<std::int64_t>(cfg.image_len()) * d;
    n += d * cfg.image_vocab + cfg.image_vocab;
  }
  return n;
}

std::vector<std::uint8_t> conv_sparse_mask(int grid_h, int grid_w, int k) {
  if (k < 1 || k % 2 == 0) throw ContractError("conv_sparse_mask: kernel " + std::to_string(k) + " must be odd and >= 1");
  if (grid_h < 1 || grid_w < 1) throw ContractError("conv_sparse_mask: grid dims must be >= 1");
  const int n = grid_h * grid_w;
  const int r = (k - 1) / 2;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const int dy = std::abs(i / grid_w - j / grid_w);
      const int dx = std::abs(i % grid_w - j % grid_w);
      if (std::max(dy, dx) <= r) mask[static_cast<std::size_t>(i) * n + j] = 1;
    }
  }
  return mask;
}

Seq2SeqModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Seq2SeqModel m;
  m.cfg = cfg;
  Rng rng(seed);
  auto& ps = m.params;
  const std::int64_t d = cfg.d_model;
  m.ids.text_embed = ps.add_normal("text_embed", {cfg.text_vocab, d}, rng);
  m.ids.text_pos = ps.add_normal("text_pos", {cfg.text_len, d}, rng);
  m.ids.image_embed = ps.add_normal("image_embed", {cfg.image_vocab + 1, d}, rng);
  m.ids.image_pos = ps.add_normal("image_pos", {cfg.image_len(), d}, rng);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    m.ids.enc.push_back(nn::add_block(ps, "enc" + std::to_string(l), d, cfg.d_mlp, false, rng));
  }
  m.ids.enc_norm = nn::add_norm(ps, "enc_norm", d);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    m.ids.dec.push_back(nn::add_block(ps, "dec" + std::to_string(l), d, cfg.d_mlp, true, rng));
  }
  m.ids.dec_norm = nn::add_norm(ps, "dec_norm", d);
  m.ids.head = nn::add_linear(ps, "head", d, cfg.image_vocab, rng);
  const auto allowed = conv_sparse_mask(cfg.grid_h, cfg.grid_w, cfg.conv_kernel);
  m.dec_blocked.resize(allowed.size());
  std::transform(allowed.begin(), allowed.end(), m.dec_blocked.begin(), [](std::uint8_t a) { return !a; });
  return m;
}

namespace {

template <typename T>
const Tensor<T>& at(const nn::Params<T>& p, int i) {
  return p[static_cast<std::size_t>(i)];
}

void check_ids(std::span<const std::int32_t> ids, std::size_t expect, int vocab, const char* what) {
  if (ids.size() != expect) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(expect) + " ids, got " +
                     std::to_string(ids.size()));
  }
  for (auto id : ids) {
    if (id < 0 || id >= vocab) {
      throw ContractError(std::string(what) + ": id " + std::to_string(id) + " outside [0, " +
                          std::to_string(vocab) + ")");
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> encode_text_batch(const Seq2SeqModel& m, const nn::Params<T>& p, std::span<const std::int32_t> text_ids,
                            int batch, const nn::Dropout& drop) {
  const auto& c = m.cfg;
  check_ids(text_ids, static_cast<std::size_t>(batch) * c.text_len, c.text_vocab, "encode_text_batch");
  auto x = ops::add(ops::embedding_gather(at(p, m.ids.text_embed), text_ids, {batch, c.text_len}),
                    at(p, m.ids.text_pos));
  x = nn::dropout(x, drop);
  for (const auto& b : m.ids.enc) x = nn::block<T>(x, nullptr, p, b, c.heads, {}, drop);
  return nn::norm(x, p, m.ids.enc_norm);
}

template <typename T>
Tensor<T> decoder_logits(const Seq2SeqModel& m, const nn::Params<T>& p, const Tensor<T>& memory,
                         std::span<const std::int32_t> image_ids, int batch, const nn::Dropout& drop) {
  const auto& c = m.cfg;
  const int len = c.image_len();
  check_ids(image_ids, static_cast<std::size_t>(batch) * len, c.image_vocab, "decoder_logits");
  std::vector<std::int32_t> shifted(image_ids.size());
  for (int b = 0; b < batch; ++b) {
    shifted[static_cast<std::size_t>(b) * len] = image_bos(c);
    for (int t = 1; t < len; ++t) {
      shifted[static_cast<std::size_t>(b) * len + t] = image_ids[static_cast<std::size_t>(b) * len + t - 1];
    }
  }
  auto x = ops::add(ops::embedding_gather(at(p, m.ids.image_embed), std::span<const std::int32_t>(shifted),
                                          {batch, len}),
                    at(p, m.ids.image_pos));
  x = nn::dropout(x, drop);
  for (const auto& b : m.ids.dec) {
    x = nn::block<T>(x, &memory, p, b, c.heads, std::span<const std::uint8_t>(m.dec_blocked), drop);
  }
  return nn::linear(nn::norm(x, p, m.ids.dec_norm), p, m.ids.head);
}

std::vector<std::int32_t> apply_cond_dropout(std::span<const std::int32_t> text_ids, int batch, int text_len,
                                             Rng& rng, double rate) {
  std::vector<std::int32_t> out(text_ids.begin(), text_ids.end());
  for (int b = 0; b < batch; ++b) {
    if (rate > 0.0 && rng.bernoulli(rate)) {
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(b) * text_len, text_len, kPad);
    }
  }
  return out;
}

template <typename T>
Tensor<T> forward_loss(const Seq2SeqModel& m, const nn::Params<T>& p, std::span<const std::int32_t> text_ids,
                       std::span<const std::int32_t> image_ids, int batch, Rng& rng, double cond_dropout_rate,
                       double dropout_rate) {
  const auto& c = m.cfg;
  if (text_ids.size() != static_cast<std::size_t>(batch) * c.text_len) {
    throw ShapeError("forward_loss: expected " + std::to_string(batch * c.text_len) + " text ids, got " +
                     std::to_string(text_ids.size()));
  }
  const auto text = apply_cond_dropout(text_ids, batch, c.text_len, rng, cond_dropout_rate);
  const nn::Dropout drop{dropout_rate > 0.0 ? &rng : nullptr, dropout_rate};
  auto memory = encode_text_batch<T>(m, p, text, batch, drop);
  auto logits = decoder_logits<T>(m, p, memory, image_ids, batch, drop);
  return ops::cross_entropy_with_logits(
      ops::reshape(logits, {static_cast<std::int64_t>(batch) * c.image_len(), c.image_vocab}), image_ids);
}

std::vector<double> pretrain_text_encoder(Seq2SeqModel& m, const SubwordVocab& vocab,
                                          const std::vector<std::string>& corpus, const TextPretrainConfig& cfg) {
  if (corpus.empty()) throw ContractError("pretrain_text_encoder: empty corpus");
  if (cfg.mask_rate < 0.0 || cfg.mask_rate > 1.0) throw ContractError("pretrain_text_encoder: mask_rate outside [0, 1]");
  const auto& c = m.cfg;
  std::vector<std::vector<std::int32_t>> rows;
  rows.reserve(corpus.size());
  for (const auto& s : corpus) rows.push_back(encode_padded(vocab, s, c.text_len));

  // Encoder parameters are those reached by encode_text_batch.
  std::vector<int> enc_idx{m.ids.text_embed, m.ids.text_pos, m.ids.enc_norm.g, m.ids.enc_norm.b};
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (m.params.name(i).rfind("enc", 0) == 0 && m.params.name(i).rfind("enc_norm", 0) != 0) {
      enc_idx.push_back(static_cast<int>(i));
    }
  }
  Rng rng(cfg.seed);
  ParamSet<float> head;
  const auto head_ids = nn::add_linear(head, "mlm_head", c.d_model, c.text_vocab, rng);

  std::vector<Tensor<float>> opt_params;
  for (int i : enc_idx) opt_params.push_back(m.params[static_cast<std::size_t>(i)]);
  for (const auto& v : head.values()) opt_params.push_back(v);
  AdafactorConfig ocfg;
  ocfg.schedule = LrSchedule::scaled(cfg.steps, cfg.lr);
  Adafactor opt(opt_params, ocfg);

  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(cfg.steps));
  const int B = cfg.batch;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::int32_t> input, target;
    input.reserve(static_cast<std::size_t>(B) * c.text_len);
    for (int b = 0; b < B; ++b) {
      const auto& row = rows[rng.below(rows.size())];
      for (auto id : row) {
        const bool maskable = id != kPad && id != kBos && id != kEos;
        if (maskable && cfg.mask_rate > 0.0 && rng.bernoulli(cfg.mask_rate)) {
          input.push_back(kUnk);
          target.push_back(id);
        } else {
          input.push_back(id);
          target.push_back(ops::kIgnoreTarget);
        }
      }
    }
    const bool any = std::any_of(target.begin(), target.end(), [](auto t) { return t != ops::kIgnoreTarget; });
    if (!any) {
      history.push_back(0.0);
      continue;
    }
    Tape<float> tape;
    auto p = m.params.bind(tape);
    auto hp = head.bind(tape);
    auto enc = encode_text_batch<float>(m, p, input, B);
    auto logits = nn::linear(ops::reshape(enc, {static_cast<std::int64_t>(B) * c.text_len, c.d_model}), hp, head_ids);
    auto loss = ops::cross_entropy_with_logits(logits, std::span<const std::int32_t>(target));
    if (!std::isfinite(loss.item())) throw NumericError("pretrain_text_encoder: non-finite loss at step " + std::to_string(step));
    history.push_back(loss.item());
    auto grads = backward(loss);
    std::vector<Tensor<float>> g;
    for (int i : enc_idx) {
      const auto& t = p[static_cast<std::size_t>(i)];
      g.push_back(grads.contains(t) ? grads.at(t) : Tensor<float>());
    }
    for (const auto& t : hp) g.push_back(grads.contains(t) ? grads.at(t) : Tensor<float>());
    opt.step(g);
  }
  return history;
}

std::vector<double> train_seq2seq(Seq2SeqModel& m, std::span<const std::int32_t> text_ids,
                                  std::span<const std::int32_t> image_ids, int n, const Seq2SeqTrainConfig& cfg,
                                  const std::function<void(int, double)>& on_step) {
  const auto& c = m.cfg;
  if (n < 1) throw ContractError("train_seq2seq: no training pairs");
  if (cfg.batch < 1 || cfg.steps < 0) throw ContractError("train_seq2seq: batch must be >= 1 and steps >= 0");
  check_ids(text_ids, static_cast<std::size_t>(n) * c.text_len, c.text_vocab, "train_seq2seq");
  check_ids(image_ids, static_cast<std::size_t>(n) * c.image_len(), c.image_vocab, "train_seq2seq");
  const double cond_rate = cfg.cond_dropout_rate >= 0.0 ? cfg.cond_dropout_rate : c.cond_dropout_rate;
  const double drop_rate = cfg.dropout >= 0.0 ? cfg.dropout : c.dropout;

  AdafactorConfig ocfg;
  ocfg.schedule = LrSchedule::scaled(std::max(cfg.steps, 1), cfg.lr);
  Adafactor opt(m.params.values(), ocfg);
  Rng rng(cfg.seed);
  const int B = cfg.batch, Tt = c.text_len, L = c.image_len();
  std::vector<std::int32_t> tb(static_cast<std::size_t>(B) * Tt), ib(static_cast<std::size_t>(B) * L);
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const auto k = static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(n)));
      std::copy_n(text_ids.begin() + k * Tt, Tt, tb.begin() + static_cast<std::ptrdiff_t>(b) * Tt);
      std::copy_n(image_ids.begin() + k * L, L, ib.begin() + static_cast<std::ptrdiff_t>(b) * L);
    }
    Tape<float> tape;
    auto p = m.params.bind(tape);
    auto loss = forward_loss<float>(m, p, tb, ib, B, rng, cond_rate, drop_rate);
    const double v = loss.item();
    if (!std::isfinite(v)) throw NumericError("train_seq2seq: non-finite loss at step " + std::to_string(step));
    history.push_back(v);
    opt.step(collect_grads(backward(loss), p));
    if (on_step) on_step(step, v);
  }
  return history;
}

#define ARIMG_INSTANTIATE_S2S(T)                                                                             \
  template Tensor<T> encode_text_batch<T>(const Seq2SeqModel&, const nn::Params<T>&,                         \
                                          std::span<const std::int32_t>, int, const nn::Dropout&);           \
  template Tensor<T> decoder_logits<T>(const Seq2SeqModel&, const nn::Params<T>&, const Tensor<T>&,          \
                                       std::span<const std::int32_t>, int, const nn::Dropout&);              \
  template Tensor<T> forward_loss<T>(const Seq2SeqModel&, const nn::Params<T>&, std::span<const std::int32_t>, \
                                     std::span<const std::int32_t>, int, Rng&, double, double);
ARIMG_INSTANTIATE_S2S(float)
ARIMG_INSTANTIATE_S2S(double)

}  // namespace arimg
