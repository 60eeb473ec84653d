#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "arimg/contrastive.hpp"
#include "arimg/data.hpp"
#include "arimg/errors.hpp"
#include "arimg/image_tokenizer.hpp"
#include "arimg/inference.hpp"
#include "arimg/io.hpp"
#include "arimg/metrics.hpp"
#include "arimg/parallel_sim.hpp"
#include "arimg/run_config.hpp"
#include "arimg/seq2seq.hpp"

namespace arimg::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Flags shared by the subcommands. Only the ones a subcommand registers are
// ever set.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::string out;
  std::optional<double> lambda;
  std::optional<int> n_samples;
};

enum Flag : unsigned { kSeed = 1, kSteps = 2, kOut = 4, kOutRequired = 8, kSampling = 16 };

void add_common(CLI::App* sub, Common& c, unsigned flags) {
  sub->add_option("--config", c.config, "RunConfig JSON file")->check(CLI::ExistingFile);
  if (flags & kSeed) sub->add_option("--seed", c.seed, "seed override");
  if (flags & kSteps) sub->add_option("--steps", c.steps, "training steps override")->check(CLI::NonNegativeNumber);
  if (flags & (kOut | kOutRequired)) {
    auto* o = sub->add_option("--out", c.out, "output path");
    if (flags & kOutRequired) o->required();
  }
  if (flags & kSampling) {
    sub->add_option("--lambda", c.lambda, "guidance weight override");
    sub->add_option("--n-samples", c.n_samples, "samples per prompt override");
  }
}

RunConfig load_config(const Common& c) {
  return c.config.empty() ? parse_run_config("{}") : parse_run_config(read_text_file(c.config));
}

// ---- dataset / image directories ----------------------------------------

struct Listed {
  std::string file;  // relative to the directory
  std::string caption;
};

std::vector<Listed> read_index(const fs::path& dir) {
  const auto path = dir / "index.tsv";
  std::istringstream is(read_text_file(path));
  std::vector<Listed> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos || tab == 0) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected file<TAB>caption");
    }
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

void write_index(const fs::path& dir, const std::vector<Listed>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.file + "\t" + r.caption + "\n";
  write_text_file(dir / "index.tsv", text);
}

// PNGs listed in index.tsv, or every *.png in name order when there is none.
std::vector<Listed> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  if (fs::exists(dir / "index.tsv")) return read_index(dir);
  std::vector<Listed> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back({e.path().filename().string(), ""});
  }
  std::sort(out.begin(), out.end(), [](const Listed& a, const Listed& b) { return a.file < b.file; });
  if (out.empty()) throw DataError("no PNG images in " + dir.string());
  return out;
}

struct Dataset {
  std::vector<Image> images;
  std::vector<std::string> captions;
};

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  for (const auto& r : list_images(dir)) {
    if (r.caption.empty()) throw DataError(dir.string() + ": training data needs captions in index.tsv");
    d.images.push_back(read_png(dir / r.file));
    d.captions.push_back(r.caption);
  }
  return d;
}

std::string padded(int v, int width) {
  auto s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  to = std::min(to, v.size());
  if (from >= to) return 0.0;
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

double head_mean(const std::vector<double>& v) { return mean_of(v, 0, 200); }
double tail_mean(const std::vector<double>& v) { return mean_of(v, v.size() > 200 ? v.size() - 200 : 0, v.size()); }

void emit_metric(std::ostream& out, const std::string& name, double value, std::int64_t n_a, std::int64_t n_b,
                 const std::string& feature_fn, std::uint64_t seed) {
  if (!std::isfinite(value)) throw NumericError(name + " is not finite");
  out << metric_json_line(name, value, n_a, n_b, feature_fn, seed) << "\n";
}

std::vector<std::string> gather_prompts(const std::vector<std::string>& inline_prompts, const std::string& tsv) {
  std::vector<std::string> out = inline_prompts;
  if (!tsv.empty()) {
    for (auto& r : load_prompts(tsv)) out.push_back(std::move(r.prompt));
  }
  if (out.empty()) throw ContractError("no prompts: pass --prompt or --prompts");
  return out;
}

// ---- subcommands ---------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
};

int make_data(RunConfig cfg, const Common& c, Context ctx) {
  if (c.seed) cfg.data.seed = *c.seed;
  const fs::path out = c.out;
  const auto ex = gen_dataset(cfg.data.n, cfg.data.seed, cfg.data.holdout_mod);
  fs::create_directories(out / "images");
  std::vector<Listed> rows;
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const std::string name = "images/" + padded(static_cast<int>(i), 6) + ".png";
    write_png(out / name, ex[i].image);
    rows.push_back({name, ex[i].caption});
  }
  write_index(out, rows);
  std::string held;
  const auto hs = heldout_specs(cfg.data.holdout_mod);
  for (const auto& s : hs) held += caption(s) + "\n";
  write_text_file(out / "heldout.txt", held);
  ordered_json m{{"format_version", 1},      {"seed", cfg.data.seed},      {"count", ex.size()},
                 {"holdout_mod", cfg.data.holdout_mod}, {"heldout_count", hs.size()}, {"image_size", kRenderSize}};
  write_text_file(out / "manifest.json", m.dump(2) + "\n");
  ctx.out << m.dump() << "\n";
  return kOk;
}

int train_tokenizer_cmd(RunConfig cfg, const Common& c, const std::string& data, Context ctx) {
  if (c.seed) cfg.tokenizer.train.seed = cfg.tokenizer.init_seed = *c.seed;
  if (c.steps) cfg.tokenizer.train.steps = *c.steps;
  const auto ds = load_dataset(data);
  auto tok = build_tokenizer(cfg.tokenizer.config, cfg.tokenizer.init_seed);
  const auto res = train_tokenizer(tok, ds.images, cfg.tokenizer.train);
  save_tokenizer(c.out, tok);
  const auto seed = cfg.tokenizer.train.seed;
  const auto n = static_cast<std::int64_t>(ds.images.size());
  emit_metric(ctx.out, "train_recon_mse", tail_mean(res.recon), n, 0, "pixels", seed);
  const auto stats = codebook_stats(tokenize_batch(tok, ds.images), tok.cfg.codebook_size);
  emit_metric(ctx.out, "codebook_usage_fraction", stats.usage_fraction, n, 0, "codes", seed);
  emit_metric(ctx.out, "codebook_perplexity", stats.perplexity, n, 0, "codes", seed);
  // Renders of held-out specs, never part of the training data.
  std::vector<Image> held;
  for (const auto& s : heldout_specs(cfg.data.holdout_mod > 0 ? cfg.data.holdout_mod : 8)) {
    if (held.size() >= 256) break;
    held.push_back(render(s, tok.cfg.image_size));
  }
  double mse_sum = 0.0;
  for (const auto& im : held) mse_sum += mse(im, detokenize(tok, tokenize(tok, im)));
  emit_metric(ctx.out, "heldout_recon_mse", mse_sum / static_cast<double>(held.size()),
              static_cast<std::int64_t>(held.size()), 0, "pixels", seed);
  return kOk;
}

int train_model_cmd(RunConfig cfg, const Common& c, const std::string& data, const std::string& tok_dir,
                    Context ctx) {
  if (c.seed) cfg.optimizer.seed = cfg.model.init_seed = *c.seed;
  if (c.steps) cfg.optimizer.steps = *c.steps;
  const auto ds = load_dataset(data);
  const auto tok = load_tokenizer(tok_dir);
  const auto vocab = train_subword(ds.captions, cfg.data.vocab_size);
  auto mc = cfg.model.config;
  // The data decide these three.
  mc.text_vocab = vocab.vocab_size();
  mc.image_vocab = tok.cfg.codebook_size;
  mc.grid_h = mc.grid_w = tok.cfg.grid();
  mc.validate();
  const auto grids = tokenize_batch(tok, ds.images);
  std::vector<std::int32_t> text;
  for (const auto& cap : ds.captions) {
    const auto ids = encode_padded(vocab, cap, mc.text_len);
    text.insert(text.end(), ids.begin(), ids.end());
  }
  auto m = build_model(mc, cfg.model.init_seed);
  const int total = cfg.optimizer.steps;
  const auto hist = train_seq2seq(m, text, grids, static_cast<int>(ds.captions.size()), cfg.optimizer,
                                  [&](int step, double loss) {
                                    if ((step + 1) % 1000 == 0 || step + 1 == total) {
                                      ctx.err << "train-model: step " << step + 1 << "/" << total << " loss " << loss
                                              << "\n";
                                    }
                                  });
  save_model(c.out, m, vocab);
  const auto n = static_cast<std::int64_t>(ds.captions.size());
  emit_metric(ctx.out, "initial_loss", head_mean(hist), n, 0, "cross_entropy", cfg.optimizer.seed);
  emit_metric(ctx.out, "final_loss", tail_mean(hist), n, 0, "cross_entropy", cfg.optimizer.seed);
  return kOk;
}

double retrieval_top1(const DualEncoder& enc, const RetrievalIndex& idx, const std::vector<std::string>& captions) {
  int ok = 0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const auto r = retrieve_nearest(enc, idx, captions[i], 1);
    ok += captions[static_cast<std::size_t>(r.at(0).id)] == captions[i];
  }
  return static_cast<double>(ok) / static_cast<double>(captions.size());
}

int train_reranker_cmd(RunConfig cfg, const Common& c, const std::string& data, Context ctx) {
  if (c.seed) cfg.reranker.train.seed = cfg.reranker.init_seed = *c.seed;
  if (c.steps) cfg.reranker.train.steps = *c.steps;
  const auto ds = load_dataset(data);
  auto enc = build_dual_encoder(cfg.reranker.config, train_subword(ds.captions, cfg.data.vocab_size),
                                cfg.reranker.init_seed);
  const auto hist = train_contrastive(enc, ds.images, ds.captions, cfg.reranker.train);
  save_dual_encoder(c.out, enc);
  const auto n = static_cast<std::int64_t>(ds.captions.size());
  const auto seed = cfg.reranker.train.seed;
  emit_metric(ctx.out, "final_loss", tail_mean(hist), n, 0, "contrastive", seed);
  emit_metric(ctx.out, "retrieval_top1", retrieval_top1(enc, build_index(enc, ds.images), ds.captions), n, n,
              "dual_encoder", seed);
  return kOk;
}

int train_sr_cmd(RunConfig cfg, const Common& c, const std::string& data, const std::string& tok_dir,
                 Context ctx) {
  if (c.seed) cfg.tokenizer.sr_train.seed = *c.seed;
  if (c.steps) cfg.tokenizer.sr_train.steps = *c.steps;
  const auto ds = load_dataset(data);
  std::vector<Image> low, high;
  std::optional<ImageTokenizer> tok;
  if (!tok_dir.empty()) tok = load_tokenizer(tok_dir);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto spec = parse_caption(ds.captions[i]);
    // Inputs are tokenizer reconstructions when a tokenizer is given, so the
    // network learns to clean up decoder output as well as to upsample.
    low.push_back(tok ? detokenize(*tok, tokenize(*tok, ds.images[i])) : ds.images[i]);
    high.push_back(render(spec, 2 * ds.images[i].height));
  }
  auto sr = build_superres(cfg.tokenizer.sr, cfg.tokenizer.sr_train.seed);
  const auto hist = train_superres(sr, low, high, cfg.tokenizer.sr_train);
  save_superres(c.out, sr);
  emit_metric(ctx.out, "final_loss", tail_mean(hist), static_cast<std::int64_t>(low.size()), 0, "pixels",
              cfg.tokenizer.sr_train.seed);
  return kOk;
}

void apply_sampling(RunConfig& cfg, const Common& c) {
  if (c.seed) cfg.sampler.seed = *c.seed;
  if (c.lambda) cfg.sampler.lambda = *c.lambda;
  if (c.n_samples) cfg.sampler.n_samples = *c.n_samples;
}

struct Generator {
  SubwordVocab vocab;
  Seq2SeqModel model;
  ImageTokenizer tok;
  std::optional<SuperResNet> sr;
};

Generator load_generator(const std::string& model_dir, const std::string& tok_dir, const std::string& sr_dir) {
  Generator g;
  g.model = load_model(model_dir, &g.vocab);
  g.tok = load_tokenizer(tok_dir);
  if (!sr_dir.empty()) g.sr = load_superres(sr_dir);
  return g;
}

int sample_cmd(RunConfig cfg, const Common& c, const Generator& g, const std::vector<std::string>& prompts,
               Context ctx) {
  apply_sampling(cfg, c);
  cfg.sampler.validate(g.model.cfg.image_vocab);
  const fs::path out = c.out;
  fs::create_directories(out);
  std::vector<Listed> rows;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto sc = cfg.sampler;
    sc.seed = derive_seed(cfg.sampler.seed, i);
    const auto batch = generate(g.model, g.vocab, g.tok, g.sr ? &*g.sr : nullptr, prompts[i], sc);
    for (std::size_t j = 0; j < batch.images.size(); ++j) {
      const auto name = "p" + padded(static_cast<int>(i), 3) + "_s" + padded(static_cast<int>(j), 2) + ".png";
      write_png(out / name, batch.images[j]);
      rows.push_back({name, prompts[i]});
    }
  }
  write_index(out, rows);
  ctx.out << ordered_json{{"prompts", prompts.size()}, {"images", rows.size()}, {"seed", cfg.sampler.seed}}.dump()
          << "\n";
  return kOk;
}

int rerank_cmd(RunConfig cfg, const Common& c, const Generator& g, const DualEncoder& enc,
               const std::vector<std::string>& prompts, Context ctx) {
  apply_sampling(cfg, c);
  cfg.sampler.validate(g.model.cfg.image_vocab);
  const fs::path out = c.out;
  fs::create_directories(out);
  std::vector<Listed> rows;
  const AlignmentScorer scorer = [&](const Image& im, const std::string& text) {
    return alignment_score(enc, im, text);
  };
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto sc = cfg.sampler;
    sc.seed = derive_seed(cfg.sampler.seed, i);
    const auto batch = rerank(generate(g.model, g.vocab, g.tok, nullptr, prompts[i], sc), scorer);
    for (std::size_t j = 0; j < batch.images.size(); ++j) {
      const auto name = "p" + padded(static_cast<int>(i), 3) + "_r" + padded(static_cast<int>(j), 2) + ".png";
      write_png(out / name, batch.images[j]);
      rows.push_back({name, prompts[i]});
      ctx.out << ordered_json{{"prompt", prompts[i]}, {"rank", j}, {"file", name}, {"score", (*batch.scores)[j]}}.dump()
              << "\n";
    }
  }
  write_index(out, rows);
  return kOk;
}

std::vector<Image> read_all(const fs::path& dir) {
  std::vector<Image> out;
  for (const auto& r : list_images(dir)) out.push_back(read_png(dir / r.file));
  return out;
}

int eval_fid_cmd(RunConfig cfg, const Common& c, const std::string& a, const std::string& b, const std::string& enc_dir,
                 Context ctx) {
  const auto seed = c.seed.value_or(cfg.data.seed);
  const auto ia = read_all(a), ib = read_all(b);
  FeatureFn fn = pooled_pixel_features;
  std::string name = "pooled_rgb_4x4";
  std::optional<DualEncoder> enc;
  if (!enc_dir.empty()) {
    enc = load_dual_encoder(enc_dir);
    fn = [&](const Image& im) {
      const auto e = embed_image(*enc, im);
      return std::vector<double>(e.begin(), e.end());
    };
    name = "dual_encoder_image";
  }
  emit_metric(ctx.out, "fid", fid(ia, ib, fn), static_cast<std::int64_t>(ia.size()),
              static_cast<std::int64_t>(ib.size()), name, seed);
  return kOk;
}

int eval_alignment_cmd(RunConfig cfg, const Common& c, const std::string& dir, const std::string& prompt,
                       Context ctx) {
  const auto rows = list_images(dir);
  double total = 0.0;
  for (const auto& r : rows) {
    const std::string& text = prompt.empty() ? r.caption : prompt;
    if (text.empty()) throw DataError(dir + ": no caption for " + r.file + " (pass --prompt)");
    total += alignment_oracle(read_png(fs::path(dir) / r.file), parse_caption(text));
  }
  emit_metric(ctx.out, "alignment_oracle", total / static_cast<double>(rows.size()),
              static_cast<std::int64_t>(rows.size()), 0, "oracle", c.seed.value_or(cfg.data.seed));
  return kOk;
}

int retrieve_cmd(const Common& c, const std::string& enc_dir, const std::string& data, const std::string& index_dir,
                 const std::vector<std::string>& queries, int k, bool eval, Context ctx) {
  const auto enc = load_dual_encoder(enc_dir);
  RetrievalIndex idx;
  std::vector<std::string> captions;
  if (!data.empty()) {
    const auto ds = load_dataset(data);
    idx = build_index(enc, ds.images);
    captions = ds.captions;
  } else if (!index_dir.empty()) {
    idx = load_index(index_dir);
  } else {
    throw ContractError("retrieve: pass --data or --index");
  }
  if (!c.out.empty()) save_index(c.out, idx);
  for (const auto& q : queries) {
    const auto hits = retrieve_nearest(enc, idx, q, k);
    for (std::size_t r = 0; r < hits.size(); ++r) {
      ordered_json j{{"query", q}, {"rank", r}, {"id", hits[r].id}, {"score", hits[r].score}};
      if (!captions.empty()) j["caption"] = captions[static_cast<std::size_t>(hits[r].id)];
      ctx.out << j.dump() << "\n";
    }
  }
  if (eval) {
    if (captions.empty()) throw ContractError("retrieve --eval needs --data");
    const auto n = static_cast<std::int64_t>(captions.size());
    emit_metric(ctx.out, "retrieval_top1", retrieval_top1(enc, idx, captions), n, n, "dual_encoder",
                c.seed.value_or(0));
  }
  return kOk;
}

int simulate_cmd(RunConfig cfg, const Common& c, std::optional<int> stages, std::optional<int> micro,
                 std::optional<int> rounds, std::optional<double> latency, const std::string& csv, Context ctx) {
  auto& p = cfg.sim.pipeline;
  if (stages) p.stages = *stages;
  if (micro) p.microbatches = *micro;
  if (rounds) p.rounds = *rounds;
  if (latency) p.latency = *latency;
  const auto tr = simulate_pipeline(p);
  check_trace(p, tr);
  if (!c.out.empty()) write_text_file(c.out, trace_json(tr) + "\n");
  if (!csv.empty()) {
    std::vector<int> rs{1};
    if (p.rounds != 1) rs.push_back(p.rounds);
    std::vector<PipelineSpec> sweep;
    for (int r : rs) {
      for (int m = 1; m <= 4 * p.microbatches; ++m) {
        auto s = p;
        s.rounds = r;
        s.microbatches = m;
        sweep.push_back(s);
      }
    }
    write_text_file(csv, sweep_csv(sweep));
  }
  ctx.out << ordered_json{{"stages", p.stages},
                          {"microbatches", p.microbatches},
                          {"rounds", p.rounds},
                          {"makespan", tr.makespan},
                          {"bubble_ratio", bubble_ratio(tr)},
                          {"throughput", throughput(tr, p.microbatches)}}
                 .dump()
          << "\n";
  return kOk;
}

int shard_cmd(RunConfig cfg, std::optional<int> n_way, Context ctx) {
  if (n_way) cfg.sim.shard.n_way = *n_way;
  for (auto st : {ShardStrategy::kAllReduce, ShardStrategy::kReduceScatterAllGather}) {
    auto s = cfg.sim.shard;
    s.strategy = st;
    const auto cost = shard_cost(s);
    ctx.out << ordered_json{{"strategy", strategy_name(st)},
                            {"n_way", s.n_way},
                            {"comm_bytes_per_layer", cost.comm_bytes_per_layer},
                            {"peak_output_elems", cost.peak_output_elems},
                            {"peak_activation_elems", cost.peak_activation_elems}}
                   .dump()
            << "\n";
  }
  return kOk;
}

int inspect_cmd(const std::string& dir, Context ctx) {
  const auto ck = load_checkpoint(dir);
  ordered_json params = ordered_json::array();
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    params.push_back({{"name", ck.params.name(i)}, {"shape", ck.params[i].shape()}});
  }
  ctx.out << ordered_json{{"kind", ck.kind},
                          {"format_version", kCheckpointFormatVersion},
                          {"config", ordered_json::parse(ck.config_json)},
                          {"numel", ck.params.numel()},
                          {"parameters", params}}
                 .dump()
          << "\n";
  return kOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"arimg: desk-scale text-to-image pipeline", "arimg"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);
  Context ctx{out, err};

  Common c;
  std::string data, tok_dir, model_dir, sr_dir, enc_dir, index_dir, a_dir, b_dir, prompts_tsv, images_dir, prompt,
      csv, ckpt;
  std::vector<std::string> prompt_list, queries;
  int k = 5;
  bool eval = false;
  std::optional<int> stages, micro, rounds, n_way;
  std::optional<double> latency;

  std::map<std::string, std::function<int(const RunConfig&)>> handlers;

  auto* s = app.add_subcommand("make-data", "render a synthetic caption/image dataset");
  add_common(s, c, kSeed | kOutRequired);
  handlers["make-data"] = [&](const RunConfig& r) { return make_data(r, c, ctx); };

  s = app.add_subcommand("train-tokenizer", "train the image tokenizer");
  add_common(s, c, kSeed | kSteps | kOutRequired);
  s->add_option("--data", data, "dataset directory")->required();
  handlers["train-tokenizer"] = [&](const RunConfig& r) { return train_tokenizer_cmd(r, c, data, ctx); };

  s = app.add_subcommand("train-model", "train the text-to-image-token model");
  add_common(s, c, kSeed | kSteps | kOutRequired);
  s->add_option("--data", data, "dataset directory")->required();
  s->add_option("--tokenizer", tok_dir, "tokenizer checkpoint")->required();
  handlers["train-model"] = [&](const RunConfig& r) { return train_model_cmd(r, c, data, tok_dir, ctx); };

  s = app.add_subcommand("train-reranker", "train the contrastive dual encoder");
  add_common(s, c, kSeed | kSteps | kOutRequired);
  s->add_option("--data", data, "dataset directory")->required();
  handlers["train-reranker"] = [&](const RunConfig& r) { return train_reranker_cmd(r, c, data, ctx); };

  s = app.add_subcommand("train-sr", "train the 2x super-resolution network");
  add_common(s, c, kSeed | kSteps | kOutRequired);
  s->add_option("--data", data, "dataset directory")->required();
  s->add_option("--tokenizer", tok_dir, "use tokenizer reconstructions as inputs");
  handlers["train-sr"] = [&](const RunConfig& r) { return train_sr_cmd(r, c, data, tok_dir, ctx); };

  auto add_prompts = [&](CLI::App* sub) {
    sub->add_option("--prompt", prompt_list, "prompt text (repeatable)");
    sub->add_option("--prompts", prompts_tsv, "prompt TSV file")->check(CLI::ExistingFile);
    sub->add_option("--model", model_dir, "model checkpoint")->required();
    sub->add_option("--tokenizer", tok_dir, "tokenizer checkpoint")->required();
  };
  s = app.add_subcommand("sample", "sample images for prompts");
  add_common(s, c, kSeed | kOutRequired | kSampling);
  add_prompts(s);
  s->add_option("--sr", sr_dir, "super-resolution checkpoint");
  handlers["sample"] = [&](const RunConfig& r) {
    const auto ps = gather_prompts(prompt_list, prompts_tsv);
    return sample_cmd(r, c, load_generator(model_dir, tok_dir, sr_dir), ps, ctx);
  };

  s = app.add_subcommand("rerank", "sample, then order each batch by alignment score");
  add_common(s, c, kSeed | kOutRequired | kSampling);
  add_prompts(s);
  s->add_option("--reranker", enc_dir, "dual encoder checkpoint")->required();
  handlers["rerank"] = [&](const RunConfig& r) {
    const auto ps = gather_prompts(prompt_list, prompts_tsv);
    return rerank_cmd(r, c, load_generator(model_dir, tok_dir, ""), load_dual_encoder(enc_dir), ps, ctx);
  };

  s = app.add_subcommand("eval-fid", "Frechet distance between two image sets");
  add_common(s, c, kSeed);
  s->add_option("--a", a_dir, "first image directory")->required();
  s->add_option("--b", b_dir, "second image directory")->required();
  s->add_option("--reranker", enc_dir, "use dual-encoder image embeddings as features");
  handlers["eval-fid"] = [&](const RunConfig& r) { return eval_fid_cmd(r, c, a_dir, b_dir, enc_dir, ctx); };

  s = app.add_subcommand("eval-alignment", "mean alignment-oracle score of images against captions");
  add_common(s, c, kSeed);
  s->add_option("--images", images_dir, "image directory (index.tsv supplies captions)")->required();
  s->add_option("--prompt", prompt, "score every image against this caption");
  handlers["eval-alignment"] = [&](const RunConfig& r) { return eval_alignment_cmd(r, c, images_dir, prompt, ctx); };

  s = app.add_subcommand("retrieve", "nearest images for text queries");
  add_common(s, c, kSeed | kOut);
  s->add_option("--reranker", enc_dir, "dual encoder checkpoint")->required();
  s->add_option("--data", data, "dataset directory to index");
  s->add_option("--index", index_dir, "saved index directory");
  s->add_option("--query", queries, "query text (repeatable)");
  s->add_option("--k", k, "results per query")->check(CLI::PositiveNumber);
  s->add_flag("--eval", eval, "report top-1 accuracy over the dataset captions");
  handlers["retrieve"] = [&](const RunConfig&) {
    return retrieve_cmd(c, enc_dir, data, index_dir, queries, k, eval, ctx);
  };

  s = app.add_subcommand("simulate-pipeline", "pipeline schedule simulation");
  add_common(s, c, kOut);
  s->add_option("--stages", stages);
  s->add_option("--microbatches", micro);
  s->add_option("--rounds", rounds);
  s->add_option("--latency", latency);
  s->add_option("--csv", csv, "write a microbatch sweep as CSV");
  handlers["simulate-pipeline"] = [&](const RunConfig& r) {
    return simulate_cmd(r, c, stages, micro, rounds, latency, csv, ctx);
  };

  s = app.add_subcommand("shard-cost", "per-device cost of a sharded feed-forward layer");
  add_common(s, c, 0);
  s->add_option("--n-way", n_way);
  handlers["shard-cost"] = [&](const RunConfig& r) { return shard_cmd(r, n_way, ctx); };

  s = app.add_subcommand("inspect-checkpoint", "print a checkpoint manifest summary");
  s->add_option("checkpoint", ckpt, "checkpoint directory")->required();
  handlers["inspect-checkpoint"] = [&](const RunConfig&) { return inspect_cmd(ckpt, ctx); };

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "arimg: " << one_line(e.what()) << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = load_config(c);
    const int rc = handlers.at(name)(cfg);
    return rc;
  } catch (const NumericError& e) {
    err << "arimg " << name << ": numeric failure: " << one_line(e.what()) << "\n";
    return kNumericError;
  } catch (const DataError& e) {
    err << "arimg " << name << ": " << one_line(e.what()) << "\n";
    return kDataError;
  } catch (const ContractError& e) {
    err << "arimg " << name << ": " << one_line(e.what()) << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "arimg " << name << ": " << one_line(e.what()) << "\n";
    return kDataError;
  }
}

}  // namespace arimg::cli
