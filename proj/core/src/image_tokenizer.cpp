#include "arimg/image_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "arimg/optim.hpp"

namespace arimg {

namespace {

bool is_decoder_param(const std::string& name) { return name.rfind("dec", 0) == 0; }

template <typename T>
Tensor<T> squared_error_mean(const Tensor<T>& a, const Tensor<T>& b) {
  auto d = ops::sub(a, b);
  return ops::reduce_mean(ops::mul(d, d));
}

void normalize_row(float* row, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += static_cast<double>(row[i]) * row[i];
  const double inv = 1.0 / std::sqrt(s);
  for (std::int64_t i = 0; i < n; ++i) row[i] = static_cast<float>(row[i] * inv);
}

// Runs `fn(begin, count)` over [0, n) in chunks, to bound activation memory.
template <typename Fn>
void in_chunks(std::size_t n, std::size_t chunk, Fn fn) {
  for (std::size_t b = 0; b < n; b += chunk) fn(b, std::min(chunk, n - b));
}

constexpr std::size_t kInferChunk = 64;

}  // namespace

void TokenizerConfig::validate() const {
  if (image_size < 1 || patch < 1 || image_size % patch != 0) {
    throw ContractError("tokenizer config: image_size must be a positive multiple of patch");
  }
  if (d_model < 1 || heads < 1 || d_model % heads != 0) throw ContractError("tokenizer config: heads must divide d_model");
  if (dec_width() % heads != 0) throw ContractError("tokenizer config: heads must divide the decoder width");
  if (d_mlp < 1 || dec_mlp() < 1) throw ContractError("tokenizer config: d_mlp must be positive");
  if (enc_layers < 0 || dec_layers < 0) throw ContractError("tokenizer config: negative layer count");
  if (codebook_size < 2) throw ContractError("tokenizer config: codebook_size must be >= 2");
  if (code_dim < 1) throw ContractError("tokenizer config: code_dim must be positive");
}

ImageTokenizer build_tokenizer(const TokenizerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ImageTokenizer t;
  t.cfg = cfg;
  auto& ps = t.params;
  auto& ids = t.ids;
  Rng rng(seed);
  const int d = cfg.d_model, dd = cfg.dec_width();
  ids.patch_in = nn::add_linear(ps, "patch_in", cfg.patch_dim(), d, rng);
  ids.enc_pos = ps.add_normal("enc_pos", {cfg.tokens(), d}, rng);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    ids.enc.push_back(nn::add_block(ps, "enc" + std::to_string(l), d, cfg.d_mlp, false, rng));
  }
  ids.enc_norm = nn::add_norm(ps, "enc_norm", d);
  ids.enc_proj = nn::add_linear(ps, "enc_proj", d, cfg.code_dim, rng);
  ids.codebook = ps.add_normal("codebook", {cfg.codebook_size, cfg.code_dim}, rng, 1.0);
  auto cb = ps[static_cast<std::size_t>(ids.codebook)].mutable_data();
  for (int k = 0; k < cfg.codebook_size; ++k) normalize_row(cb.data() + static_cast<std::size_t>(k) * cfg.code_dim, cfg.code_dim);
  ids.dec_in = nn::add_linear(ps, "dec_in", cfg.code_dim, dd, rng);
  ids.dec_pos = ps.add_normal("dec_pos", {cfg.tokens(), dd}, rng);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    ids.dec.push_back(nn::add_block(ps, "dec" + std::to_string(l), dd, cfg.dec_mlp(), false, rng));
  }
  ids.dec_norm = nn::add_norm(ps, "dec_norm", dd);
  ids.dec_out = nn::add_linear(ps, "dec_out", dd, cfg.patch_dim(), rng);
  return t;
}

template <typename T>
QuantizeResult<T> quantize(const Tensor<T>& codebook, const Tensor<T>& z) {
  if (codebook.rank() != 2 || z.rank() != 2 || codebook.dim(1) != z.dim(1)) {
    throw ShapeError("quantize: codebook " + shape_str(codebook.shape()) + " vs z " + shape_str(z.shape()));
  }
  const std::int64_t n = z.dim(0), dc = z.dim(1), k = codebook.dim(0);
  for (T v : z.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("quantize: non-finite code vector");
  }
  // eps = 0 makes a zero-norm row an error rather than a silent zero.
  const auto zhat = ops::l2_normalize(z, -1, 0.0);
  QuantizeResult<T> r;
  r.indices.resize(static_cast<std::size_t>(n));
  const T* zh = zhat.ptr();
  const T* cb = codebook.ptr();
  for (std::int64_t i = 0; i < n; ++i) {
    double best = 0.0;
    std::int32_t arg = -1;
    for (std::int64_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::int64_t c = 0; c < dc; ++c) {
        const double diff = static_cast<double>(zh[i * dc + c]) - cb[j * dc + c];
        dist += diff * diff;
      }
      if (arg < 0 || dist < best) {
        best = dist;
        arg = static_cast<std::int32_t>(j);
      }
    }
    r.indices[static_cast<std::size_t>(i)] = arg;
  }
  const auto e = ops::embedding_gather(codebook, std::span<const std::int32_t>(r.indices), Shape{n});
  const double inv_n = 1.0 / static_cast<double>(n);
  auto sq_rows = [&](const Tensor<T>& a, const Tensor<T>& b) {
    auto d = ops::sub(a, b);
    return ops::scale(ops::reduce_sum(ops::mul(d, d)), inv_n);
  };
  r.codebook_loss = sq_rows(zhat.detach(), e);
  r.commitment_loss = sq_rows(zhat, e.detach());
  // Straight-through: forward value is exactly the codebook row, backward
  // hands the output gradient to z unchanged (as z + sg(e - z) would).
  Tensor<T> value = e.detach().clone();
  if (z.requires_grad()) {
    r.z_q = z.tape()->record(OpKind::kAdd, {&z}, std::move(value), [](std::span<const T> g, GradSink<T>& sink) {
      if (T* gz = sink.grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
      }
    });
  } else {
    r.z_q = std::move(value);
  }
  return r;
}

Tensor<float> patchify(const TokenizerConfig& cfg, const std::vector<Image>& images) {
  const int P = cfg.patch, G = cfg.grid(), S = cfg.image_size;
  const auto B = static_cast<std::int64_t>(images.size());
  if (B == 0) throw ContractError("patchify: no images");
  std::vector<float> out(static_cast<std::size_t>(B) * cfg.tokens() * cfg.patch_dim());
  float* dst = out.data();
  for (const auto& img : images) {
    if (img.height != S || img.width != S) {
      throw ShapeError("tokenizer: expected " + std::to_string(S) + "x" + std::to_string(S) + " image, got " +
                       std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    for (int gy = 0; gy < G; ++gy) {
      for (int gx = 0; gx < G; ++gx) {
        for (int y = 0; y < P; ++y) {
          std::memcpy(dst, img.at(gy * P + y, gx * P), sizeof(float) * 3 * static_cast<std::size_t>(P));
          dst += 3 * P;
        }
      }
    }
  }
  return Tensor<float>({B, cfg.tokens(), cfg.patch_dim()}, std::move(out));
}

std::vector<Image> unpatchify(const TokenizerConfig& cfg, std::span<const float> patches, int batch) {
  const int P = cfg.patch, G = cfg.grid(), S = cfg.image_size;
  if (patches.size() != static_cast<std::size_t>(batch) * cfg.tokens() * cfg.patch_dim()) {
    throw ShapeError("unpatchify: wrong number of values");
  }
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(batch));
  const float* src = patches.data();
  for (int b = 0; b < batch; ++b) {
    Image img(S, S);
    for (int gy = 0; gy < G; ++gy) {
      for (int gx = 0; gx < G; ++gx) {
        for (int y = 0; y < P; ++y) {
          std::memcpy(img.at(gy * P + y, gx * P), src, sizeof(float) * 3 * static_cast<std::size_t>(P));
          src += 3 * P;
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

template <typename T>
Tensor<T> encode_codes(const ImageTokenizer& tok, const nn::Params<T>& p, const Tensor<T>& patches) {
  const auto& c = tok.cfg;
  const auto& ids = tok.ids;
  const std::int64_t B = patches.dim(0);
  auto h = ops::add(nn::linear(patches, p, ids.patch_in), p[static_cast<std::size_t>(ids.enc_pos)]);
  for (const auto& blk : ids.enc) h = nn::block<T>(h, nullptr, p, blk, c.heads, {}, {});
  auto z = nn::linear(nn::norm(h, p, ids.enc_norm), p, ids.enc_proj);
  return ops::reshape(z, {B * c.tokens(), c.code_dim});
}

template <typename T>
Tensor<T> decode_codes(const ImageTokenizer& tok, const nn::Params<T>& p, const Tensor<T>& codes, int batch) {
  const auto& c = tok.cfg;
  const auto& ids = tok.ids;
  auto h = nn::linear(ops::reshape(codes, {batch, c.tokens(), c.code_dim}), p, ids.dec_in);
  h = ops::add(h, p[static_cast<std::size_t>(ids.dec_pos)]);
  for (const auto& blk : ids.dec) h = nn::block<T>(h, nullptr, p, blk, c.heads, {}, {});
  return nn::linear(nn::norm(h, p, ids.dec_norm), p, ids.dec_out);
}

std::vector<std::int32_t> tokenize_batch(const ImageTokenizer& tok, const std::vector<Image>& images) {
  std::vector<std::int32_t> out;
  out.reserve(images.size() * static_cast<std::size_t>(tok.cfg.tokens()));
  const auto& p = tok.params.values();
  in_chunks(images.size(), kInferChunk, [&](std::size_t b, std::size_t n) {
    std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(b),
                             images.begin() + static_cast<std::ptrdiff_t>(b + n));
    auto z = encode_codes<float>(tok, p, patchify(tok.cfg, chunk));
    auto q = quantize(p[static_cast<std::size_t>(tok.ids.codebook)], z);
    out.insert(out.end(), q.indices.begin(), q.indices.end());
  });
  return out;
}

std::vector<std::int32_t> tokenize(const ImageTokenizer& tok, const Image& image) {
  return tokenize_batch(tok, {image});
}

std::vector<Image> detokenize_batch(const ImageTokenizer& tok, std::span<const std::int32_t> tokens, int batch) {
  const auto& c = tok.cfg;
  if (batch < 1 || tokens.size() != static_cast<std::size_t>(batch) * c.tokens()) {
    throw ShapeError("detokenize: expected " + std::to_string(c.tokens()) + " ids per image");
  }
  for (auto id : tokens) {
    if (id < 0 || id >= c.codebook_size) {
      throw ContractError("detokenize: token id " + std::to_string(id) + " outside codebook of " +
                          std::to_string(c.codebook_size));
    }
  }
  const auto& p = tok.params.values();
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(batch));
  in_chunks(static_cast<std::size_t>(batch), kInferChunk, [&](std::size_t b, std::size_t n) {
    const auto ids = tokens.subspan(b * c.tokens(), n * c.tokens());
    auto codes = ops::embedding_gather(p[static_cast<std::size_t>(tok.ids.codebook)], ids,
                                       Shape{static_cast<std::int64_t>(ids.size())});
    auto raw = decode_codes<float>(tok, p, codes, static_cast<int>(n));
    for (auto& img : unpatchify(c, raw.data(), static_cast<int>(n))) out.push_back(clamp01(std::move(img)));
  });
  return out;
}

Image detokenize(const ImageTokenizer& tok, std::span<const std::int32_t> tokens) {
  return std::move(detokenize_batch(tok, tokens, 1).front());
}

TokenizerTrainResult train_tokenizer(ImageTokenizer& tok, const std::vector<Image>& images,
                                     const TokenizerTrainConfig& cfg,
                                     const std::function<void(int, const ImageTokenizer&)>& on_step) {
  if (images.empty()) throw ContractError("train_tokenizer: no images");
  if (cfg.steps < 0 || cfg.batch < 1) throw ContractError("train_tokenizer: steps >= 0 and batch >= 1 required");
  if (cfg.lr < 0.0) throw ContractError("train_tokenizer: negative learning rate");
  const auto& c = tok.cfg;
  const auto cb_idx = static_cast<std::size_t>(tok.ids.codebook);

  std::vector<std::size_t> trained;
  for (std::size_t i = 0; i < tok.params.size(); ++i) {
    if (!cfg.decoder_only || is_decoder_param(tok.params.name(i))) trained.push_back(i);
  }
  std::vector<Tensor<float>> opt_params;
  for (auto i : trained) opt_params.push_back(tok.params[i]);
  AdafactorConfig ocfg;
  ocfg.schedule = LrSchedule::scaled(cfg.steps, cfg.lr);
  ocfg.weight_decay = 0.0;
  Adafactor opt(opt_params, ocfg);

  Rng rng(cfg.seed);
  TokenizerTrainResult res;
  res.loss.reserve(static_cast<std::size_t>(cfg.steps));
  res.recon.reserve(static_cast<std::size_t>(cfg.steps));
  std::vector<std::int64_t> usage(static_cast<std::size_t>(c.codebook_size), 0);
  const bool restarts = cfg.restart_every > 0 && !cfg.decoder_only && cfg.lr > 0.0;
  auto& codebook = tok.params[cb_idx];
  std::vector<float> cb_before;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Image> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) batch.push_back(images[rng.below(images.size())]);
    const auto patches = patchify(c, batch);

    Tape<float> tape;
    nn::Params<float> p;
    if (cfg.decoder_only) {
      p = tok.params.values();
      for (auto i : trained) p[i] = tape.watch(tok.params[i]);
    } else {
      p = tok.params.bind(tape);
    }
    auto z = encode_codes<float>(tok, p, patches);
    auto q = quantize(p[cb_idx], z);
    auto recon = squared_error_mean(decode_codes<float>(tok, p, q.z_q, cfg.batch), patches);
    auto loss = ops::add(recon, ops::add(q.codebook_loss, ops::scale(q.commitment_loss, cfg.beta_commit)));
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw NumericError("train_tokenizer: non-finite loss at step " + std::to_string(step));
    res.loss.push_back(lv);
    res.recon.push_back(recon.item());
    for (auto id : q.indices) ++usage[static_cast<std::size_t>(id)];

    auto grads = backward(loss);
    std::vector<Tensor<float>> g;
    g.reserve(trained.size());
    for (auto i : trained) g.push_back(grads.contains(p[i]) ? grads.at(p[i]) : Tensor<float>());
    if (!cfg.decoder_only) cb_before.assign(codebook.data().begin(), codebook.data().end());
    opt.step(g);

    if (cfg.decoder_only) {
      if (on_step) on_step(step, tok);
      continue;
    }
    auto cb = codebook.mutable_data();
    for (int k = 0; k < c.codebook_size; ++k) {
      float* row = cb.data() + static_cast<std::size_t>(k) * c.code_dim;
      // rows the step left bit-identical are already unit norm
      if (std::memcmp(row, cb_before.data() + static_cast<std::size_t>(k) * c.code_dim,
                      sizeof(float) * static_cast<std::size_t>(c.code_dim)) != 0) {
        normalize_row(row, c.code_dim);
      }
    }
    if (restarts && (step + 1) % cfg.restart_every == 0) {
      const auto zh = ops::l2_normalize(z.detach(), -1, 0.0);
      for (int k = 0; k < c.codebook_size; ++k) {
        if (usage[static_cast<std::size_t>(k)] != 0) continue;
        const auto src = rng.below(static_cast<std::uint64_t>(zh.dim(0)));
        float* row = cb.data() + static_cast<std::size_t>(k) * c.code_dim;
        for (int j = 0; j < c.code_dim; ++j) {
          row[j] = zh.ptr()[src * static_cast<std::uint64_t>(c.code_dim) + static_cast<std::uint64_t>(j)] +
                   static_cast<float>(0.01 * rng.normal());
        }
        normalize_row(row, c.code_dim);
        ++res.restarted_codes;
      }
      std::fill(usage.begin(), usage.end(), 0);
    }
    if (on_step) on_step(step, tok);
  }
  return res;
}

ImageTokenizer widen_decoder(const ImageTokenizer& tok, int d_model, int d_mlp, int layers, std::uint64_t seed) {
  TokenizerConfig cfg = tok.cfg;
  cfg.dec_d_model = d_model;
  cfg.dec_d_mlp = d_mlp;
  cfg.dec_layers = layers;
  ImageTokenizer out = build_tokenizer(cfg, seed);
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    const auto& name = out.params.name(i);
    if (is_decoder_param(name)) continue;
    out.params[i] = tok.params[static_cast<std::size_t>(tok.params.index_of(name))].clone();
  }
  return out;
}

CodebookStats codebook_stats(std::span<const std::int32_t> ids, int codebook_size) {
  if (ids.empty()) throw ContractError("codebook_stats: empty id stream");
  if (codebook_size < 1) throw ContractError("codebook_stats: codebook_size must be positive");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(codebook_size), 0);
  for (auto id : ids) {
    if (id < 0 || id >= codebook_size) throw ContractError("codebook_stats: id " + std::to_string(id) + " out of range");
    ++counts[static_cast<std::size_t>(id)];
  }
  int used = 0;
  double entropy = 0.0;
  const double n = static_cast<double>(ids.size());
  for (auto cnt : counts) {
    if (cnt == 0) continue;
    ++used;
    const double pr = static_cast<double>(cnt) / n;
    entropy -= pr * std::log(pr);
  }
  return {static_cast<double>(used) / codebook_size, std::exp(entropy)};
}

// ---------------------------------------------------------------- super-resolution

void SuperResConfig::validate() const {
  if (blocks < 0 || channels < 1) throw ContractError("superres config: blocks >= 0 and channels >= 1 required");
}

SuperResNet build_superres(const SuperResConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SuperResNet sr;
  sr.cfg = cfg;
  Rng rng(seed);
  const std::int64_t C = cfg.channels;
  auto conv = [&](const std::string& name, std::int64_t cin, std::int64_t cout, double std) {
    ConvIds ids;
    ids.w = sr.params.add_normal(name + ".w", {3, 3, cin, cout}, rng, std);
    ids.b = sr.params.add_zeros(name + ".b", {cout});
    return ids;
  };
  sr.stem = conv("stem", 3, C, std::sqrt(2.0 / 27.0));
  for (int i = 0; i < cfg.blocks; ++i) {
    const auto n = "block" + std::to_string(i);
    const double he = std::sqrt(2.0 / (9.0 * static_cast<double>(C)));
    // second conv starts small so each block begins near identity
    sr.blocks.emplace_back(conv(n + ".a", C, C, he), conv(n + ".b", C, C, 0.1 * he));
  }
  // zero head: the untrained net reproduces nearest-neighbour upsampling
  sr.head = conv("head", C, 3, 0.0);
  return sr;
}

template <typename T>
Tensor<T> superres_forward(const SuperResNet& sr, const nn::Params<T>& p, const Tensor<T>& upsampled) {
  auto conv = [&](const Tensor<T>& x, const ConvIds& c) {
    return ops::add(ops::conv2d(x, p[static_cast<std::size_t>(c.w)], 1, 1), p[static_cast<std::size_t>(c.b)]);
  };
  auto h = ops::relu(conv(upsampled, sr.stem));
  for (const auto& [a, b] : sr.blocks) h = ops::add(h, conv(ops::relu(conv(h, a)), b));
  return ops::add(upsampled, conv(h, sr.head));
}

namespace {

Tensor<float> stack_images(const std::vector<const Image*>& imgs) {
  const auto& f = *imgs.front();
  std::vector<float> data;
  data.reserve(imgs.size() * f.pixels.size());
  for (const Image* im : imgs) {
    if (im->height != f.height || im->width != f.width) throw ShapeError("superres: mixed image sizes in a batch");
    data.insert(data.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor<float>({static_cast<std::int64_t>(imgs.size()), f.height, f.width, 3}, std::move(data));
}

}  // namespace

Image upsample(const SuperResNet& sr, const Image& image) {
  const Image up = upsample_nearest(image);
  auto out = superres_forward<float>(sr, sr.params.values(), stack_images({&up}));
  Image img(up.height, up.width);
  img.pixels.assign(out.data().begin(), out.data().end());
  return clamp01(std::move(img));
}

std::vector<double> train_superres(SuperResNet& sr, const std::vector<Image>& low, const std::vector<Image>& high,
                                   const SuperResTrainConfig& cfg) {
  if (low.empty() || low.size() != high.size()) throw ContractError("train_superres: need equal, nonempty pair lists");
  for (std::size_t i = 0; i < low.size(); ++i) {
    if (high[i].height != 2 * low[i].height || high[i].width != 2 * low[i].width) {
      throw ShapeError("train_superres: high-resolution image must be twice the low-resolution side");
    }
  }
  std::vector<Image> up;
  up.reserve(low.size());
  for (const auto& im : low) up.push_back(upsample_nearest(im));

  AdafactorConfig ocfg;
  ocfg.schedule = LrSchedule::scaled(cfg.steps, cfg.lr);
  ocfg.weight_decay = 0.0;
  Adafactor opt(sr.params.values(), ocfg);
  Rng rng(cfg.seed);
  std::vector<double> history;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Image*> xb, yb;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto i = rng.below(low.size());
      xb.push_back(&up[i]);
      yb.push_back(&high[i]);
    }
    Tape<float> tape;
    auto p = sr.params.bind(tape);
    auto loss = squared_error_mean(superres_forward<float>(sr, p, stack_images(xb)), stack_images(yb));
    if (!std::isfinite(loss.item())) throw NumericError("train_superres: non-finite loss at step " + std::to_string(step));
    history.push_back(loss.item());
    auto grads = backward(loss);
    opt.step(collect_grads(grads, p));
  }
  return history;
}

#define ARIMG_INSTANTIATE_TOK(T)                                                                             \
  template QuantizeResult<T> quantize<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> encode_codes<T>(const ImageTokenizer&, const nn::Params<T>&, const Tensor<T>&);         \
  template Tensor<T> decode_codes<T>(const ImageTokenizer&, const nn::Params<T>&, const Tensor<T>&, int);    \
  template Tensor<T> superres_forward<T>(const SuperResNet&, const nn::Params<T>&, const Tensor<T>&);
ARIMG_INSTANTIATE_TOK(float)
ARIMG_INSTANTIATE_TOK(double)

}  // namespace arimg
