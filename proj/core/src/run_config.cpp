#include "arimg/run_config.hpp"

#include "config_fields.hpp"

namespace arimg {

using detail::Fields;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

void need(bool ok, const std::string& what) {
  if (!ok) throw ContractError("run config: " + what);
}

void check_train(const std::string& where, int steps, int batch, double lr) {
  need(steps >= 0, where + ".steps must be >= 0");
  need(batch >= 1, where + ".batch must be >= 1");
  need(std::isfinite(lr) && lr >= 0.0, where + ".lr must be finite and >= 0");
}

// Reads an optional nested object section.
template <typename F>
void section(Fields& parent, const char* key, const std::string& where, F&& body) {
  if (!parent.has(key)) return;
  Fields f(parent.raw(key), where + "." + key);
  body(f);
  f.finish();
}

}  // namespace

void validate_run_config(const RunConfig& c) {
  need(c.data.n >= 1, "data.n must be >= 1");
  need(c.data.vocab_size >= kFirstMerge, "data.vocab_size must be >= " + std::to_string(kFirstMerge));
  need(c.data.holdout_mod >= 0, "data.holdout_mod must be >= 0");
  c.tokenizer.config.validate();
  check_train("tokenizer", c.tokenizer.train.steps, c.tokenizer.train.batch, c.tokenizer.train.lr);
  need(c.tokenizer.train.restart_every >= 0, "tokenizer.restart_every must be >= 0");
  c.tokenizer.sr.validate();
  check_train("tokenizer.superres", c.tokenizer.sr_train.steps, c.tokenizer.sr_train.batch, c.tokenizer.sr_train.lr);
  c.model.config.validate();
  check_train("optimizer", c.optimizer.steps, c.optimizer.batch, c.optimizer.lr);
  need(c.optimizer.cond_dropout_rate <= 1.0, "optimizer.cond_dropout_rate must be <= 1");
  need(c.optimizer.dropout < 1.0, "optimizer.dropout must be < 1");
  c.sampler.validate(c.model.config.image_vocab);
  c.reranker.config.validate();
  check_train("reranker", c.reranker.train.steps, c.reranker.train.batch, c.reranker.train.lr);
  need(c.reranker.train.batch >= 2, "reranker.batch must be >= 2");
  c.sim.pipeline.validate();
  c.sim.shard.validate();
}

RunConfig parse_run_config(const std::string& text) {
  const json j = detail::parse_json(text, "run config");
  Fields top(j, "run config");
  RunConfig c;
  const std::string w = "run config";
  section(top, "data", w, [&](Fields& f) {
    f.get("n", c.data.n);
    f.get("seed", c.data.seed);
    f.get("vocab_size", c.data.vocab_size);
    f.get("holdout_mod", c.data.holdout_mod);
  });
  section(top, "tokenizer", w, [&](Fields& f) {
    detail::read_into(f, c.tokenizer.config);
    detail::read_into(f, c.tokenizer.train);
    f.get("init_seed", c.tokenizer.init_seed);
    section(f, "superres", f.where(), [&](Fields& g) {
      detail::read_into(g, c.tokenizer.sr);
      detail::read_into(g, c.tokenizer.sr_train);
    });
  });
  section(top, "model", w, [&](Fields& f) {
    f.get("preset", c.model.preset);
    try {
      c.model.config = ModelConfig::preset(c.model.preset);
    } catch (const ContractError& e) {
      throw DataError(std::string("run config.model.preset: ") + e.what());
    }
    detail::read_into(f, c.model.config);
    f.get("init_seed", c.model.init_seed);
  });
  section(top, "optimizer", w, [&](Fields& f) { detail::read_into(f, c.optimizer); });
  section(top, "sampler", w, [&](Fields& f) { detail::read_into(f, c.sampler); });
  section(top, "reranker", w, [&](Fields& f) {
    detail::read_into(f, c.reranker.config);
    detail::read_into(f, c.reranker.train);
    f.get("init_seed", c.reranker.init_seed);
  });
  section(top, "sim", w, [&](Fields& f) {
    detail::read_into(f, c.sim.pipeline);
    section(f, "shard", f.where(), [&](Fields& g) { detail::read_into(g, c.sim.shard); });
  });
  top.finish();
  try {
    validate_run_config(c);
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  return c;
}

std::string run_config_json(const RunConfig& c) {
  ojson data{{"n", c.data.n}, {"seed", c.data.seed}, {"vocab_size", c.data.vocab_size},
             {"holdout_mod", c.data.holdout_mod}};
  ojson tok = ojson::object();
  detail::write_from(tok, c.tokenizer.config);
  detail::write_from(tok, c.tokenizer.train);
  tok["init_seed"] = c.tokenizer.init_seed;
  ojson sr = ojson::object();
  detail::write_from(sr, c.tokenizer.sr);
  detail::write_from(sr, c.tokenizer.sr_train);
  tok["superres"] = sr;
  ojson model{{"preset", c.model.preset}};
  detail::write_from(model, c.model.config);
  model["init_seed"] = c.model.init_seed;
  ojson opt = ojson::object();
  detail::write_from(opt, c.optimizer);
  ojson samp = ojson::object();
  detail::write_from(samp, c.sampler);
  ojson rr = ojson::object();
  detail::write_from(rr, c.reranker.config);
  detail::write_from(rr, c.reranker.train);
  rr["init_seed"] = c.reranker.init_seed;
  ojson sim = ojson::object();
  detail::write_from(sim, c.sim.pipeline);
  ojson shard = ojson::object();
  detail::write_from(shard, c.sim.shard);
  sim["shard"] = shard;
  ojson doc{{"data", data},      {"tokenizer", tok}, {"model", model},   {"optimizer", opt},
            {"sampler", samp},   {"reranker", rr},   {"sim", sim}};
  return doc.dump(2) + "\n";
}

}  // namespace arimg
