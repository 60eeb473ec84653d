#include <gtest/gtest.h>

#include <cmath>

#include "arimg/autodiff.hpp"
#include "arimg/optim.hpp"
#include "arimg/seq2seq.hpp"
#include "arimg/textproc.hpp"

using namespace arimg;

namespace {

ModelConfig micro() {
  ModelConfig c;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_model = 8;
  c.d_mlp = 16;
  c.heads = 2;
  c.text_vocab = 20;
  c.image_vocab = 5;
  c.text_len = 4;
  c.grid_h = 2;
  c.grid_w = 3;
  return c;
}

std::vector<std::int32_t> random_ids(Rng& rng, std::size_t n, int vocab) {
  std::vector<std::int32_t> v(n);
  for (auto& x : v) x = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
  return v;
}

bool bit_equal(const ParamSet<float>& a, const ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].data(), y = b[i].data();
    if (x.size() != y.size() || !std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------- model

TEST(BuildModel, SameSeedBitIdentical) {
  const auto a = build_model(micro(), 3), b = build_model(micro(), 3), c = build_model(micro(), 4);
  EXPECT_TRUE(bit_equal(a.params, b.params));
  EXPECT_FALSE(bit_equal(a.params, c.params));
}

TEST(BuildModel, InitStatistics) {
  const auto m = build_model(ModelConfig::preset("desk"), 1);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& n = m.params.name(i);
    const auto d = m.params[i].data();
    if (n.size() > 2 && n.compare(n.size() - 2, 2, ".g") == 0) {
      for (float v : d) ASSERT_EQ(v, 1.0f) << n;
    } else if (n.size() > 2 && n.compare(n.size() - 2, 2, ".b") == 0) {
      for (float v : d) ASSERT_EQ(v, 0.0f) << n;
    } else {
      for (float v : d) ASSERT_LE(std::abs(v), 0.04f) << n;  // truncated at two std
    }
  }
}

TEST(BuildModel, PresetParameterCounts) {
  const std::vector<std::pair<std::string, double>> table{{"350M", 350e6}, {"750M", 750e6}, {"3B", 3e9}, {"20B", 20e9}};
  for (const auto& [name, target] : table) {
    const auto n = static_cast<double>(parameter_count(ModelConfig::preset(name), false));
    EXPECT_NEAR(n / target, 1.0, 0.05) << name;
  }
  const auto p = ModelConfig::preset("350M");
  EXPECT_EQ(p.enc_layers, 12);
  EXPECT_EQ(p.dec_layers, 12);
  EXPECT_EQ(p.d_model, 1024);
  EXPECT_EQ(p.d_mlp, 4096);
  EXPECT_EQ(p.heads, 16);
  const auto q = ModelConfig::preset("20B");
  EXPECT_EQ(q.enc_layers, 16);
  EXPECT_EQ(q.dec_layers, 64);
  EXPECT_EQ(q.d_model, 4096);
  EXPECT_EQ(q.heads, 64);
}

TEST(BuildModel, CountMatchesInstantiatedDesk) {
  const auto c = ModelConfig::preset("desk");
  EXPECT_EQ(parameter_count(c, true), build_model(c, 0).params.numel());
}

TEST(BuildModel, InvalidConfigs) {
  auto c = micro();
  c.heads = 3;
  EXPECT_THROW(build_model(c, 0), ContractError);
  c = micro();
  c.text_len = 129;
  EXPECT_THROW(build_model(c, 0), ContractError);
  EXPECT_THROW(ModelConfig::preset("1T"), ContractError);
}

// ---------------------------------------------------------------- mask

TEST(ConvMask, KernelOneIsIdentity) {
  const auto m = conv_sparse_mask(3, 4, 1);
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 12; ++j) EXPECT_EQ(m[static_cast<std::size_t>(i * 12 + j)], i == j ? 1 : 0);
  }
}

TEST(ConvMask, CenterOfThreeByThree) {
  const auto m = conv_sparse_mask(3, 3, 3);
  std::vector<int> row;
  for (int j = 0; j < 9; ++j) {
    if (m[static_cast<std::size_t>(4 * 9 + j)]) row.push_back(j);
  }
  EXPECT_EQ(row, (std::vector<int>{0, 1, 2, 3, 4}));
}

TEST(ConvMask, MatchesEnumerationAndIsCausal) {
  for (int h = 1; h <= 5; ++h) {
    for (int w = 1; w <= 5; ++w) {
      for (int k : {1, 3, 5, 7}) {
        const auto m = conv_sparse_mask(h, w, k);
        const int n = h * w;
        for (int i = 0; i < n; ++i) {
          int count = 0;
          for (int j = 0; j < n; ++j) {
            const int dy = std::abs(i / w - j / w), dx = std::abs(i % w - j % w);
            const bool expect = j <= i && std::max(dy, dx) <= (k - 1) / 2;
            ASSERT_EQ(m[static_cast<std::size_t>(i * n + j)] != 0, expect) << h << "x" << w << " k" << k;
            count += expect;
          }
          EXPECT_GE(count, 1);
        }
      }
    }
  }
}

TEST(ConvMask, EvenKernelThrows) { EXPECT_THROW(conv_sparse_mask(3, 3, 2), ContractError); }

// ---------------------------------------------------------------- loss

TEST(ForwardLoss, UntrainedNearChance) {
  const auto c = ModelConfig::preset("desk");
  const auto m = build_model(c, 2);
  Rng data(1), rng(2);
  const int B = 4;
  const auto text = random_ids(data, static_cast<std::size_t>(B) * c.text_len, c.text_vocab);
  const auto img = random_ids(data, static_cast<std::size_t>(B) * c.image_len(), c.image_vocab);
  const double loss = forward_loss<float>(m, m.params.values(), text, img, B, rng, 0.1).item();
  EXPECT_NEAR(loss, std::log(64.0), 0.3);
}

TEST(ForwardLoss, FullConditionDropoutIgnoresText) {
  const auto c = micro();
  const auto m = build_model(c, 5);
  Rng data(3);
  const auto t1 = random_ids(data, 2u * c.text_len, c.text_vocab);
  const auto t2 = random_ids(data, 2u * c.text_len, c.text_vocab);
  const auto img = random_ids(data, 2u * c.image_len(), c.image_vocab);
  Rng r1(9), r2(9);
  EXPECT_EQ(forward_loss<float>(m, m.params.values(), t1, img, 2, r1, 1.0).item(),
            forward_loss<float>(m, m.params.values(), t2, img, 2, r2, 1.0).item());
}

TEST(ForwardLoss, DeterministicGivenRngAndNonNegative) {
  const auto c = micro();
  const auto m = build_model(c, 6);
  Rng data(4);
  const auto t = random_ids(data, 3u * c.text_len, c.text_vocab);
  const auto img = random_ids(data, 3u * c.image_len(), c.image_vocab);
  Rng r1(1), r2(1);
  const auto a = forward_loss<float>(m, m.params.values(), t, img, 3, r1, 0.5, 0.1).item();
  const auto b = forward_loss<float>(m, m.params.values(), t, img, 3, r2, 0.5, 0.1).item();
  EXPECT_EQ(a, b);
  EXPECT_GE(a, 0.0f);
}

TEST(ForwardLoss, OutOfRangeIdsThrow) {
  const auto c = micro();
  const auto m = build_model(c, 6);
  Rng rng(1);
  std::vector<std::int32_t> t(static_cast<std::size_t>(c.text_len), 0), img(static_cast<std::size_t>(c.image_len()), 0);
  img[2] = c.image_vocab;
  EXPECT_THROW(forward_loss<float>(m, m.params.values(), t, img, 1, rng, 0.0), ContractError);
  img[2] = 0;
  t[1] = c.text_vocab;
  EXPECT_THROW(forward_loss<float>(m, m.params.values(), t, img, 1, rng, 0.0), ContractError);
  EXPECT_THROW(forward_loss<float>(m, m.params.values(), std::vector<std::int32_t>(3, 0), img, 1, rng, 0.0), ShapeError);
}

TEST(ForwardLoss, GradCheckTinyModel) {
  auto c = micro();
  c.text_vocab = 7;
  const auto m = build_model(c, 8);
  // Larger weights than the init so every path carries signal.
  auto p64 = m.params.cast<double>();
  Rng wr(2);
  for (auto& t : p64.values()) {
    for (auto& v : t.mutable_data()) v += 0.3 * wr.normal();
  }
  Rng data(5);
  const auto text = random_ids(data, 2u * c.text_len, c.text_vocab);
  const auto img = random_ids(data, 2u * c.image_len(), c.image_vocab);
  const auto f = [&](const std::vector<Tensor<double>>& xs) {
    Rng rng(0);
    return forward_loss<double>(m, xs, text, img, 2, rng, 0.0);
  };
  EXPECT_LT(grad_check(f, p64.values(), 1e-6), 1e-4);
}

TEST(Causality, PerturbingATokenOnlyMovesLaterLogits) {
  auto c = micro();
  c.grid_h = c.grid_w = 3;
  c.conv_kernel = 5;  // window covers the whole 3x3 grid
  auto m = build_model(c, 10);
  for (auto& t : m.params.values()) {
    for (auto& v : t.mutable_data()) v *= 20.0f;
  }
  Rng data(6);
  const auto text = random_ids(data, static_cast<std::size_t>(c.text_len), c.text_vocab);
  const auto img = random_ids(data, static_cast<std::size_t>(c.image_len()), c.image_vocab);
  const auto& p = m.params.values();
  const auto mem = encode_text_batch<float>(m, p, text, 1);
  const auto base = decoder_logits<float>(m, p, mem, img, 1);
  const int K = c.image_vocab, L = c.image_len();
  for (int pos = 0; pos < L; ++pos) {
    auto pert = img;
    pert[static_cast<std::size_t>(pos)] = (pert[static_cast<std::size_t>(pos)] + 1) % K;
    const auto out = decoder_logits<float>(m, p, mem, pert, 1);
    bool later_changed = false;
    for (int t = 0; t < L; ++t) {
      for (int k = 0; k < K; ++k) {
        const auto i = static_cast<std::size_t>(t * K + k);
        if (t <= pos) {
          ASSERT_EQ(out.data()[i], base.data()[i]) << "perturb " << pos << " moved position " << t;
        } else if (out.data()[i] != base.data()[i]) {
          later_changed = true;
        }
      }
    }
    if (pos + 1 < L) {
      EXPECT_TRUE(later_changed) << pos;
    }
  }
}

// ---------------------------------------------------------------- optimizer

TEST(Schedule, Endpoints) {
  const auto s = LrSchedule::full_scale();
  EXPECT_EQ(s.at(0), 0.0);
  EXPECT_EQ(s.at(5000), 4.5e-5);
  EXPECT_EQ(s.at(s.decay_start), 4.5e-5);
  EXPECT_NEAR(s.at(s.total_steps), 4.5e-5 * 0.025, 1e-18);
  EXPECT_LT(s.at(200000), s.at(100000));
  const auto d = LrSchedule::scaled(4500, 1e-3);
  EXPECT_EQ(d.warmup_steps, 50);
  EXPECT_EQ(d.decay_start, 850);
  EXPECT_EQ(d.at(50), 1e-3);
}

TEST(Adafactor, ZeroGradsZeroDecayLeaveWeights) {
  Tensor<float> w({3, 4}, std::vector<float>(12, 0.5f)), b({4}, std::vector<float>(4, -1.0f));
  AdafactorConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.schedule = LrSchedule::scaled(100, 1e-2);
  Adafactor opt({w, b}, cfg);
  const std::vector<Tensor<float>> g{Tensor<float>::zeros({3, 4}), Tensor<float>::zeros({4})};
  for (int i = 0; i < 10; ++i) opt.step(g);
  for (float v : w.data()) EXPECT_EQ(v, 0.5f);
  for (float v : b.data()) EXPECT_EQ(v, -1.0f);
}

TEST(Adafactor, GlobalNormClipMatchesPrescaledGradients) {
  Rng rng(3);
  std::vector<float> gv(12);
  for (auto& v : gv) v = static_cast<float>(rng.normal());
  double sq = 0.0;
  for (float v : gv) sq += double(v) * v;
  const double k = 8.0 / std::sqrt(sq);
  std::vector<float> g8(gv), g4(gv);
  for (std::size_t i = 0; i < 12; ++i) {
    g8[i] = static_cast<float>(gv[i] * k);
    g4[i] = static_cast<float>(gv[i] * k * 0.5);
  }
  AdafactorConfig cfg;
  cfg.schedule = LrSchedule::scaled(100, 1e-2);
  cfg.schedule.warmup_steps = 0;
  Tensor<float> w1({3, 4}, std::vector<float>(12, 0.3f)), w2 = w1.clone();
  Adafactor a({w1}, cfg);
  const auto st = a.step(std::vector<Tensor<float>>{Tensor<float>({3, 4}, g8)});
  EXPECT_NEAR(st.grad_norm, 8.0, 1e-5);
  EXPECT_NEAR(st.clip_scale, 0.5, 1e-6);
  auto cfg2 = cfg;
  cfg2.clip_norm = 0.0;
  Adafactor b({w2}, cfg2);
  b.step(std::vector<Tensor<float>>{Tensor<float>({3, 4}, g4)});
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(w1.data()[i], w2.data()[i], 1e-7);
}

TEST(Adafactor, SecondMomentIsFactored) {
  Tensor<float> w = Tensor<float>::zeros({30, 20}), b = Tensor<float>::zeros({20});
  Adafactor opt({w, b}, AdafactorConfig{});
  EXPECT_EQ(opt.second_moment_floats(), 30 + 20 + 20);
}

TEST(Adafactor, Int8MomentWithinHalfStep) {
  Rng rng(4);
  Tensor<float> w = Tensor<float>::zeros({8, 8});
  AdafactorConfig cfg;
  cfg.track_float_moment = true;
  Adafactor opt({w}, cfg);
  for (int s = 0; s < 20; ++s) {
    std::vector<float> g(64);
    for (auto& v : g) v = static_cast<float>(rng.normal() * (1 + s));
    opt.step(std::vector<Tensor<float>>{Tensor<float>({8, 8}, g)});
    const auto& slot = opt.slot(0);
    const auto deq = opt.dequantized_moment(0);
    for (std::size_t i = 0; i < deq.size(); ++i) {
      ASSERT_LE(std::abs(deq[i] - slot.m_shadow[i]), 0.5 * slot.m_scale + 1e-9) << s;
    }
  }
}

TEST(Adafactor, WeightDecayOnlyOnMatrices) {
  Tensor<float> w({2, 2}, std::vector<float>(4, 1.0f)), b({2}, std::vector<float>(2, 1.0f));
  AdafactorConfig cfg;
  cfg.schedule = LrSchedule::scaled(100, 0.1);
  cfg.schedule.warmup_steps = 0;
  Adafactor opt({w, b}, cfg);
  opt.step(std::vector<Tensor<float>>{Tensor<float>::zeros({2, 2}), Tensor<float>::zeros({2})});
  EXPECT_NEAR(w.data()[0], 1.0 - 0.1 * 4.5e-2, 1e-7);
  EXPECT_EQ(b.data()[0], 1.0f);
}

TEST(Adafactor, NanGradientThrows) {
  Tensor<float> w = Tensor<float>::zeros({2, 2});
  Adafactor opt({w}, AdafactorConfig{});
  EXPECT_THROW(opt.step(std::vector<Tensor<float>>{Tensor<float>({2, 2}, {0, std::nanf(""), 0, 0})}), NumericError);
}

// ---------------------------------------------------------------- training

namespace {

std::vector<std::string> toy_corpus() {
  return {"a red circle", "a blue square", "a green triangle above a red circle", "a black square left of a cyan circle"};
}

}  // namespace

TEST(PretrainText, ZeroMaskRateIsNoOp) {
  auto c = micro();
  c.text_len = 16;
  const auto vocab = train_subword(toy_corpus(), 300);
  c.text_vocab = vocab.vocab_size();
  auto m = build_model(c, 1);
  const auto before = m.params.clone();
  TextPretrainConfig cfg;
  cfg.mask_rate = 0.0;
  cfg.steps = 5;
  const auto hist = pretrain_text_encoder(m, vocab, toy_corpus(), cfg);
  for (double v : hist) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(bit_equal(before, m.params));
}

TEST(PretrainText, DecoderUntouchedAndLossFalls) {
  auto c = micro();
  c.text_len = 16;
  c.d_model = 16;
  const auto vocab = train_subword(toy_corpus(), 300);
  c.text_vocab = vocab.vocab_size();
  auto m = build_model(c, 1);
  const auto before = m.params.clone();
  TextPretrainConfig cfg;
  cfg.steps = 300;
  cfg.lr = 1e-2;
  cfg.mask_rate = 0.3;
  const auto hist = pretrain_text_encoder(m, vocab, toy_corpus(), cfg);
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) {
    head += hist[static_cast<std::size_t>(i)];
    tail += hist[hist.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.8 * head);
  bool enc_moved = false;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& n = m.params.name(i);
    const bool same = std::equal(before[i].data().begin(), before[i].data().end(), m.params[i].data().begin());
    if (n.rfind("dec", 0) == 0 || n.rfind("image", 0) == 0 || n.rfind("head", 0) == 0) {
      EXPECT_TRUE(same) << n;
    } else if (!same) {
      enc_moved = true;
    }
  }
  EXPECT_TRUE(enc_moved);
}

TEST(TrainSeq2Seq, LearnsTextConditionedGrids) {
  // Two prompts, each mapped to its own constant grid.
  auto c = micro();
  c.d_model = 16;
  c.d_mlp = 32;
  auto m = build_model(c, 2);
  std::vector<std::int32_t> text, img;
  for (int k = 0; k < 2; ++k) {
    for (int t = 0; t < c.text_len; ++t) text.push_back(t == 1 ? 5 + k : kPad);
    for (int t = 0; t < c.image_len(); ++t) img.push_back((k * 2 + t) % c.image_vocab);
  }
  Seq2SeqTrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 4;
  cfg.lr = 1e-2;
  cfg.cond_dropout_rate = 0.0;
  cfg.dropout = 0.0;
  int calls = 0;
  const auto hist = train_seq2seq(m, text, img, 2, cfg, [&](int, double) { ++calls; });
  EXPECT_EQ(calls, 400);
  EXPECT_NEAR(hist.front(), std::log(5.0), 0.3);
  EXPECT_LT(hist.back(), 0.2);

  auto m2 = build_model(c, 2);
  EXPECT_EQ(train_seq2seq(m2, text, img, 2, cfg), hist);
  EXPECT_THROW(train_seq2seq(m2, text, img, 0, cfg), ContractError);
}
