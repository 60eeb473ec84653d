#include "arimg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "arimg/textproc.hpp"

namespace arimg {

void SamplerConfig::validate(int image_vocab) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ContractError("sampler: lambda must be finite and >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ContractError("sampler: temperature must be > 0");
  if (top_k < 0 || top_k > image_vocab) {
    throw ContractError("sampler: top_k " + std::to_string(top_k) + " outside [0, " + std::to_string(image_vocab) + "]");
  }
  if (n_samples < 1) throw ContractError("sampler: n_samples must be >= 1");
}

std::vector<float> guided_logits(std::span<const float> u, std::span<const float> c, double lambda) {
  if (u.size() != c.size()) {
    throw ShapeError("guided_logits: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(c.size()));
  }
  std::vector<float> out(u.size());
  const double wu = 1.0 - lambda;
  for (std::size_t i = 0; i < u.size(); ++i) {
    out[i] = static_cast<float>(wu * static_cast<double>(u[i]) + lambda * static_cast<double>(c[i]));
  }
  return out;
}

// ---------------------------------------------------------------- cache

namespace {

const Tensor<float>& at(const nn::Params<float>& p, int i) { return p[static_cast<std::size_t>(i)]; }

// Single-query attention of `q` ([D]) against rows of k/v ([n, D] with row
// stride D) for positions where allowed(j); writes [D] into out.
template <typename Allowed>
void attend(const float* q, const float* k, const float* v, int n, int d, int heads, Allowed allowed, float* out,
            std::vector<float>& scratch) {
  const int dh = d / heads;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  scratch.resize(static_cast<std::size_t>(n));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < n; ++j) {
      if (!allowed(j)) {
        scratch[static_cast<std::size_t>(j)] = -std::numeric_limits<float>::infinity();
        continue;
      }
      float s = 0.0f;
      for (int e = 0; e < dh; ++e) s += q[off + e] * k[static_cast<std::size_t>(j) * d + off + e];
      s *= scale;
      scratch[static_cast<std::size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      auto& s = scratch[static_cast<std::size_t>(j)];
      s = std::isinf(s) ? 0.0f : std::exp(s - mx);
      z += s;
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int e = 0; e < dh; ++e) out[off + e] = 0.0f;
    for (int j = 0; j < n; ++j) {
      const float w = scratch[static_cast<std::size_t>(j)] * inv;
      if (w == 0.0f) continue;
      for (int e = 0; e < dh; ++e) out[off + e] += w * v[static_cast<std::size_t>(j) * d + off + e];
    }
  }
}

}  // namespace

DecoderCache::DecoderCache(const Seq2SeqModel& m, const Tensor<float>& memory, std::vector<int> row_condition)
    : m_(m), cond_(std::move(row_condition)) {
  const auto& c = m.cfg;
  if (memory.rank() != 3 || memory.dim(1) != c.text_len || memory.dim(2) != c.d_model) {
    throw ShapeError("decoder cache: memory must be [conditions, " + std::to_string(c.text_len) + ", " +
                     std::to_string(c.d_model) + "], got " + shape_str(memory.shape()));
  }
  if (cond_.empty()) throw ContractError("decoder cache: no rows");
  const auto n_cond = static_cast<int>(memory.dim(0));
  for (int ci : cond_) {
    if (ci < 0 || ci >= n_cond) throw ContractError("decoder cache: row condition out of range");
  }
  const auto& p = m.params.values();
  const auto rows = static_cast<std::size_t>(cond_.size());
  const auto len = static_cast<std::size_t>(c.image_len());
  for (const auto& b : m.ids.dec) {
    k_self_.emplace_back(rows * len * static_cast<std::size_t>(c.d_model));
    v_self_.emplace_back(rows * len * static_cast<std::size_t>(c.d_model));
    auto km = nn::linear(memory, p, b.cross.k);
    auto vm = nn::linear(memory, p, b.cross.v);
    k_mem_.emplace_back(km.data().begin(), km.data().end());
    v_mem_.emplace_back(vm.data().begin(), vm.data().end());
  }
}

std::vector<float> DecoderCache::step(std::span<const std::int32_t> prev_tokens) {
  const auto& c = m_.cfg;
  const int R = rows(), D = c.d_model, L = c.image_len(), Tt = c.text_len;
  if (pos_ >= L) throw ContractError("decoder cache: all " + std::to_string(L) + " positions already decoded");
  if (prev_tokens.size() != static_cast<std::size_t>(R)) {
    throw ShapeError("decoder cache: expected " + std::to_string(R) + " tokens, got " +
                     std::to_string(prev_tokens.size()));
  }
  const auto& p = m_.params.values();
  const auto& emb = at(p, m_.ids.image_embed).data();
  const auto& pos = at(p, m_.ids.image_pos).data();
  std::vector<float> xv(static_cast<std::size_t>(R) * D);
  for (int r = 0; r < R; ++r) {
    const auto id = prev_tokens[static_cast<std::size_t>(r)];
    if (id < 0 || id > c.image_vocab) throw ContractError("decoder cache: token id " + std::to_string(id) + " out of range");
    for (int e = 0; e < D; ++e) {
      xv[static_cast<std::size_t>(r) * D + e] =
          emb[static_cast<std::size_t>(id) * D + e] + pos[static_cast<std::size_t>(pos_) * D + e];
    }
  }
  Tensor<float> x({R, D}, std::move(xv));
  std::vector<float> scratch, o(static_cast<std::size_t>(R) * D);
  const std::uint8_t* blocked = m_.dec_blocked.data() + static_cast<std::size_t>(pos_) * L;

  for (std::size_t l = 0; l < m_.ids.dec.size(); ++l) {
    const auto& b = m_.ids.dec[l];
    auto h = nn::norm(x, p, b.ln1);
    auto q = nn::linear(h, p, b.self.q);
    auto k = nn::linear(h, p, b.self.k);
    auto v = nn::linear(h, p, b.self.v);
    auto& kc = k_self_[l];
    auto& vc = v_self_[l];
    for (int r = 0; r < R; ++r) {
      const auto dst = (static_cast<std::size_t>(r) * L + pos_) * D;
      std::copy_n(k.data().begin() + static_cast<std::ptrdiff_t>(r) * D, D, kc.begin() + static_cast<std::ptrdiff_t>(dst));
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(r) * D, D, vc.begin() + static_cast<std::ptrdiff_t>(dst));
    }
    for (int r = 0; r < R; ++r) {
      const auto base = static_cast<std::size_t>(r) * L * D;
      attend(q.ptr() + static_cast<std::size_t>(r) * D, kc.data() + base, vc.data() + base, pos_ + 1, D, c.heads,
             [&](int j) { return blocked[j] == 0; }, o.data() + static_cast<std::size_t>(r) * D, scratch);
    }
    x = ops::add(x, nn::linear(Tensor<float>({R, D}, o), p, b.self.o));

    if (b.has_cross) {
      auto hc = nn::norm(x, p, b.ln_cross);
      auto qc = nn::linear(hc, p, b.cross.q);
      for (int r = 0; r < R; ++r) {
        const auto base = static_cast<std::size_t>(cond_[static_cast<std::size_t>(r)]) * Tt * D;
        attend(qc.ptr() + static_cast<std::size_t>(r) * D, k_mem_[l].data() + base, v_mem_[l].data() + base, Tt, D,
               c.heads, [](int) { return true; }, o.data() + static_cast<std::size_t>(r) * D, scratch);
      }
      x = ops::add(x, nn::linear(Tensor<float>({R, D}, o), p, b.cross.o));
    }
    auto mlp = nn::linear(ops::gelu(nn::linear(nn::norm(x, p, b.ln2), p, b.fc1)), p, b.fc2);
    x = ops::add(x, mlp);
  }
  auto logits = nn::linear(nn::norm(x, p, m_.ids.dec_norm), p, m_.ids.head);
  ++pos_;
  return {logits.data().begin(), logits.data().end()};
}

// ---------------------------------------------------------------- sampling

std::int32_t draw_token(std::span<const float> logits, const SamplerConfig& cfg, Rng& rng) {
  const auto n = logits.size();
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (std::isnan(logits[i])) throw NumericError("sampler: NaN logit");
    z[i] = static_cast<double>(logits[i]) / cfg.temperature;
  }
  if (cfg.top_k > 0 && static_cast<std::size_t>(cfg.top_k) < n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    for (std::size_t r = static_cast<std::size_t>(cfg.top_k); r < n; ++r) {
      z[order[r]] = -std::numeric_limits<double>::infinity();
    }
  }
  const double mx = *std::max_element(z.begin(), z.end());
  if (!std::isfinite(mx)) throw NumericError("sampler: no finite logit in row");
  double total = 0.0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    total += v;
  }
  const double u = rng.uniform() * total;
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (z[i] <= 0.0) continue;
    cum += z[i];
    last = i;
    if (u < cum) return static_cast<std::int32_t>(i);
  }
  return static_cast<std::int32_t>(last);
}

std::vector<std::int32_t> sample_grids(const Seq2SeqModel& m, std::span<const std::int32_t> text_ids,
                                       const SamplerConfig& cfg) {
  const auto& c = m.cfg;
  cfg.validate(c.image_vocab);
  if (text_ids.size() != static_cast<std::size_t>(c.text_len)) {
    throw ShapeError("sample: expected " + std::to_string(c.text_len) + " text ids, got " +
                     std::to_string(text_ids.size()));
  }
  const int n = cfg.n_samples, L = c.image_len(), K = c.image_vocab;
  // Guidance endpoints need only one branch; the result is identical.
  const bool need_cond = cfg.lambda != 0.0;
  const bool need_uncond = cfg.lambda != 1.0;

  std::vector<std::int32_t> texts;
  if (need_cond) texts.insert(texts.end(), text_ids.begin(), text_ids.end());
  if (need_uncond) texts.insert(texts.end(), static_cast<std::size_t>(c.text_len), kPad);
  const int n_cond = static_cast<int>(texts.size()) / c.text_len;
  auto memory = encode_text_batch<float>(m, m.params.values(), texts, n_cond);

  std::vector<int> row_cond;
  int cond_row0 = -1, uncond_row0 = -1;
  if (need_cond) {
    cond_row0 = 0;
    row_cond.insert(row_cond.end(), static_cast<std::size_t>(n), 0);
  }
  if (need_uncond) {
    uncond_row0 = static_cast<int>(row_cond.size());
    row_cond.insert(row_cond.end(), static_cast<std::size_t>(n), n_cond - 1);
  }
  DecoderCache cache(m, memory, row_cond);

  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rngs.emplace_back(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));

  std::vector<std::int32_t> grids(static_cast<std::size_t>(n) * L);
  std::vector<std::int32_t> prev(row_cond.size(), image_bos(c));
  for (int t = 0; t < L; ++t) {
    const auto logits = cache.step(prev);
    for (int i = 0; i < n; ++i) {
      std::span<const float> u, cl;
      if (need_uncond) u = std::span<const float>(logits).subspan(static_cast<std::size_t>(uncond_row0 + i) * K, K);
      if (need_cond) cl = std::span<const float>(logits).subspan(static_cast<std::size_t>(cond_row0 + i) * K, K);
      std::int32_t tok;
      if (!need_cond) {
        tok = draw_token(u, cfg, rngs[static_cast<std::size_t>(i)]);
      } else if (!need_uncond) {
        tok = draw_token(cl, cfg, rngs[static_cast<std::size_t>(i)]);
      } else {
        tok = draw_token(guided_logits(u, cl, cfg.lambda), cfg, rngs[static_cast<std::size_t>(i)]);
      }
      grids[static_cast<std::size_t>(i) * L + t] = tok;
      if (need_cond) prev[static_cast<std::size_t>(cond_row0 + i)] = tok;
      if (need_uncond) prev[static_cast<std::size_t>(uncond_row0 + i)] = tok;
    }
  }
  return grids;
}

std::vector<std::int32_t> sample_tokens(const Seq2SeqModel& m, std::span<const std::int32_t> text_ids,
                                        const SamplerConfig& cfg) {
  SamplerConfig one = cfg;
  one.n_samples = 1;
  return sample_grids(m, text_ids, one);
}

SampleBatch generate(const Seq2SeqModel& m, const SubwordVocab& vocab, const ImageTokenizer& tok,
                     const SuperResNet* sr, const std::string& prompt, const SamplerConfig& cfg) {
  if (tok.cfg.codebook_size != m.cfg.image_vocab || tok.cfg.tokens() != m.cfg.image_len()) {
    throw ContractError("generate: tokenizer (" + std::to_string(tok.cfg.codebook_size) + " codes, " +
                        std::to_string(tok.cfg.tokens()) + " tokens) does not match model (" +
                        std::to_string(m.cfg.image_vocab) + ", " + std::to_string(m.cfg.image_len()) + ")");
  }
  const auto text = encode_padded(vocab, prompt, m.cfg.text_len);
  const auto flat = sample_grids(m, text, cfg);
  SampleBatch out;
  out.prompt = prompt;
  out.seed = cfg.seed;
  const auto L = static_cast<std::size_t>(m.cfg.image_len());
  for (int i = 0; i < cfg.n_samples; ++i) {
    out.grids.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(i * L),
                           flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
  }
  out.images = detokenize_batch(tok, flat, cfg.n_samples);
  if (sr != nullptr) {
    for (auto& im : out.images) im = upsample(*sr, im);
  }
  return out;
}

SampleBatch rerank(SampleBatch batch, const AlignmentScorer& scorer) {
  if (batch.images.empty()) throw ContractError("rerank: empty batch");
  const auto n = batch.images.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = scorer(batch.images[i], batch.prompt);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  SampleBatch out;
  out.prompt = std::move(batch.prompt);
  out.seed = batch.seed;
  out.scores.emplace();
  for (auto i : order) {
    out.images.push_back(std::move(batch.images[i]));
    if (i < batch.grids.size()) out.grids.push_back(std::move(batch.grids[i]));
    out.scores->push_back(scores[i]);
  }
  return out;
}

}  // namespace arimg
