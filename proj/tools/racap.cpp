// Command-line front end for the captioning pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "racap/pipeline.hpp"

namespace fs = std::filesystem;
using namespace racap;

namespace {

struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required = true) {
  auto* c = cmd->add_option("--config", f.config, "key=value configuration file");
  if (config_required) c->required();
  cmd->add_option("--seed", f.seed, "random seed")->capture_default_str();
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--set", f.overrides, "extra key=value applied after the config file");
}

std::string join_overrides(const std::vector<std::string>& kv) {
  std::string out;
  for (const auto& s : kv) out += s + "\n";
  return out;
}

void log_resolved(const std::string& what, const std::string& text, const std::string& hash) {
  log().info("resolved {} (hash {}):", what, hash);
  std::size_t start = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    log().info("  {}", text.substr(start, nl - start));
    start = nl == std::string::npos ? text.size() : nl + 1;
  }
}

PipelineConfig resolve_config(const CommonFlags& f, const fs::path& out) {
  PipelineConfig cfg = f.config.empty() ? PipelineConfig{} : PipelineConfig::load(f.config);
  cfg.fields().apply(parse_key_values(join_overrides(f.overrides)));
  cfg.validate();
  log_resolved("pipeline config", cfg.to_text(), cfg.hash());
  write_file_atomic(out / "config.resolved", cfg.to_text());
  return cfg;
}

fs::path ensure_out(const CommonFlags& f) {
  const fs::path out(f.out);
  fs::create_directories(out);
  return out;
}

int make_dataset(const CommonFlags& f, bool seed_given) {
  const fs::path out = ensure_out(f);
  SyntheticDatasetSpec spec = SyntheticDatasetSpec::load(f.config);
  spec.fields().apply(parse_key_values(join_overrides(f.overrides)));
  if (seed_given) spec.seed = f.seed;
  spec.validate();
  const std::string text = spec.to_text();
  log_resolved("dataset spec", text, fmt::format("{:016x}", detail::fnv1a(text)));
  const auto ds = generate_synthetic_dataset(spec);
  const auto manifest = write_synthetic_dataset(ds, out);
  write_file_atomic(out / "dataset.resolved", text);
  log().info("wrote {} items to {}", manifest.rows.size(), DatasetLayout{out}.manifest().string());
  return 0;
}

int prepare_similarity_cmd(const CommonFlags& f, const std::string& manifest) {
  const fs::path out = ensure_out(f);
  const auto cfg = resolve_config(f, out);
  const auto ws = Workspace::load(manifest, cfg);
  const auto sim = prepare_similarity(ws, cfg);
  save_similarity(out, sim, ws, cfg);
  log().info("{} similar ordered pairs among {} items at threshold {}", sim.labels.count(), sim.labels.n,
             sim.labels.threshold);
  return 0;
}

int train_retrieval_cmd(const CommonFlags& f, const std::string& manifest, const std::string& labels) {
  const fs::path out = ensure_out(f);
  const auto cfg = resolve_config(f, out);
  const auto ws = Workspace::load(manifest, cfg);
  const auto sim = load_similarity(labels, ws);
  const auto run = run_train_retrieval(ws, sim, cfg, f.seed);
  save_retrieval_run(out, run, cfg, f.seed);
  const auto& m = run.train.mining;
  log().info("best epoch {} valid loss {:.6f}; negatives: {} semi-hard, {} nearest fallback, {} farthest fallback",
             run.train.best_epoch, run.train.best_valid_loss, m.semi_hard, m.fallback_nearest, m.fallback_farthest);
  if (run.train.skipped_anchors > 0)
    log().warn("{} anchors had no similar or no dissimilar items and were skipped", run.train.skipped_anchors);
  return 0;
}

int retrieve_cmd(const CommonFlags& f, const std::string& index_dir, const std::string& query,
                 std::optional<std::size_t> k_flag, const std::string& exclude) {
  const fs::path out = ensure_out(f);
  const auto cfg = resolve_config(f, out);
  const auto ret = load_retrieval(index_dir);
  const auto phi = ingest_precomputed_features(query, ret.embedder.feature_dim, ret.embedder.frames);
  const std::size_t k = k_flag.value_or(cfg.retrieval_k);
  const auto hits = retrieve_topk(ret.index, embed(ret.embedder, phi).values(), k,
                                  exclude.empty() ? std::nullopt : std::optional(exclude));
  std::string jsonl;
  for (std::size_t r = 0; r < hits.size(); ++r) {
    const auto& h = hits[r];
    jsonl += nlohmann::json{{"rank", r + 1}, {"id", h.id}, {"distance", h.distance},
                            {"caption", ret.index.captions[h.row].front()}}
                 .dump() +
             "\n";
    std::cout << fmt::format("{}\t{}\t{:.6f}\t{}\n", r + 1, h.id, h.distance, ret.index.captions[h.row].front());
  }
  write_file_atomic(out / "retrieved.jsonl", jsonl);
  return 0;
}

int train_decoder_cmd(const CommonFlags& f, const std::string& manifest, const std::string& labels) {
  const fs::path out = ensure_out(f);
  const auto cfg = resolve_config(f, out);
  const auto ws = Workspace::load(manifest, cfg);
  const auto sim = load_similarity(labels, ws);
  const auto r = run_train_decoder(ws, sim, cfg, f.seed);
  save_decoder(out, r, ws, cfg, f.seed);
  log().info("best epoch {} valid loss {:.6f}", r.best_epoch, r.best_valid_loss);
  if (r.skipped_items > 0) log().warn("{} examples had no similar items and were skipped", r.skipped_items);
  if (r.resampled_items > 0)
    log().info("{} examples had fewer than K similar items; guidance drawn with replacement", r.resampled_items);
  return 0;
}

struct GenerateFlags {
  std::string manifest, checkpoint, index, labels, split = "test", features;
  bool oracle = false;
  std::optional<std::size_t> beam;
};

int generate_cmd(const CommonFlags& f, const GenerateFlags& g) {
  const fs::path out = ensure_out(f);
  auto cfg = resolve_config(f, out);
  if (g.beam) cfg.generate_beam = *g.beam;
  const auto ws = Workspace::load(g.manifest, cfg);
  const auto decoder = load_decoder(g.checkpoint, ws, cfg);
  std::optional<LoadedRetrieval> ret;
  if (!g.index.empty()) ret = load_retrieval(g.index);

  if (!g.features.empty()) {
    if (!ret) throw ConfigError("--features needs --index for guidance");
    const auto phi = ingest_precomputed_features(g.features, cfg.audio_dim, cfg.audio_frames);
    GuidanceCaptions guide;
    std::vector<std::string> texts;
    for (const auto& h : retrieve_topk(ret->index, embed(ret->embedder, phi).values(), cfg.retrieval_k)) {
      texts.push_back(ret->index.captions[h.row].front());
      guide.captions.push_back(ws.encode(texts.back()));
    }
    const auto caption = ws.tokenizer.decode(
        generate_caption(ws.lm, decoder, phi, guide, decoder_generation(ws.lm, cfg.generate_beam, cfg.generate_max_len)));
    write_file_atomic(out / "generated.jsonl", predictions_jsonl({{fs::path(g.features).stem().string(), caption, texts}}));
    std::cout << caption << "\n";
    return 0;
  }

  const auto split = parse_split(g.split);
  if (!split) throw ConfigError("unknown split '" + g.split + "'");
  std::optional<SimilarityArtifacts> sim;
  if (g.oracle) {
    if (g.labels.empty()) throw ConfigError("--oracle-guidance needs --labels");
    sim = load_similarity(g.labels, ws);
  } else if (!ret) {
    throw ConfigError("generate needs --index (or --oracle-guidance with --labels)");
  }
  ScopeInputs in{ret ? &*ret : nullptr, &decoder, sim ? &*sim : nullptr};
  const auto rows = ws.rows(*split);
  if (rows.empty()) throw DataError("split " + g.split + " is empty");
  const auto preds = predict(ws, cfg, g.oracle ? Scope::kOracleGuidance : Scope::kRetrievedGuidance, rows, in);
  write_file_atomic(out / "generated.jsonl", predictions_jsonl(preds));
  write_file_atomic(out / "references.jsonl", references_jsonl(ws, rows));
  log().info("generated {} captions for split {}", preds.size(), g.split);
  return 0;
}

struct EvaluateFlags {
  std::string candidates, references, scope, manifest, checkpoint, index, labels, split = "test";
};

int evaluate_cmd(const CommonFlags& f, const EvaluateFlags& e) {
  const fs::path out = ensure_out(f);
  const auto cfg = resolve_config(f, out);
  EvalReport report;
  if (!e.candidates.empty() || !e.references.empty()) {
    if (e.candidates.empty() || e.references.empty())
      throw ConfigError("--candidates and --references go together");
    report = evaluate_files(e.candidates, e.references);
  } else {
    const auto scope = parse_scope(e.scope);
    if (!scope) throw ConfigError("give --candidates/--references or --scope i|ii|iii");
    const auto split = parse_split(e.split);
    if (!split) throw ConfigError("unknown split '" + e.split + "'");
    if (e.manifest.empty()) throw ConfigError("--scope needs --manifest");
    const auto ws = Workspace::load(e.manifest, cfg);
    std::optional<LoadedRetrieval> ret;
    std::optional<DecoderParams> dec;
    std::optional<SimilarityArtifacts> sim;
    if (*scope != Scope::kOracleGuidance) {
      if (e.index.empty()) throw ConfigError("this scope needs --index");
      ret = load_retrieval(e.index);
    }
    if (*scope != Scope::kRetrievalOnly) {
      if (e.checkpoint.empty()) throw ConfigError("this scope needs --checkpoint");
      dec = load_decoder(e.checkpoint, ws, cfg);
    }
    if (*scope == Scope::kOracleGuidance) {
      if (e.labels.empty()) throw ConfigError("scope iii needs --labels");
      sim = load_similarity(e.labels, ws);
    }
    const auto rows = ws.rows(*split);
    if (rows.empty()) throw DataError("split " + e.split + " is empty");
    const auto preds = predict(ws, cfg, *scope, rows, {ret ? &*ret : nullptr, dec ? &*dec : nullptr, sim ? &*sim : nullptr});
    write_file_atomic(out / "predictions.jsonl", predictions_jsonl(preds));
    report = evaluate_predictions(ws, preds);
  }
  save_report(out, report);
  std::cout << report.table();
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    if (dynamic_cast<const ShapeError*>(err) || dynamic_cast<const ContractError*>(err))
      return static_cast<int>(ExitCode::kData);
    return static_cast<int>(err->exit_code());
  }
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return static_cast<int>(ExitCode::kData);
  return static_cast<int>(ExitCode::kFailure);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-guided audio captioning pipeline"};
  app.require_subcommand(1);

  CommonFlags common;
  std::string manifest, labels, index, query, exclude;
  std::optional<std::size_t> k;
  GenerateFlags gen;
  EvaluateFlags ev;

  auto* mk = app.add_subcommand("make-dataset", "generate the synthetic corpus");
  add_common(mk, common);

  auto* ps = app.add_subcommand("prepare-similarity", "score caption pairs and derive similar labels");
  add_common(ps, common);
  ps->add_option("--manifest", manifest, "dataset manifest")->required();

  auto* tr = app.add_subcommand("train-retrieval", "train the audio embedder and build the index");
  add_common(tr, common);
  tr->add_option("--manifest", manifest, "dataset manifest")->required();
  tr->add_option("--labels", labels, "prepare-similarity output directory")->required();

  auto* rt = app.add_subcommand("retrieve", "nearest training items for one feature file");
  add_common(rt, common, false);
  rt->add_option("--index", index, "train-retrieval output directory")->required();
  rt->add_option("--query-features", query, "feature archive of the query")->required();
  rt->add_option("-K,--top-k", k, "number of neighbours");
  rt->add_option("--exclude", exclude, "item id to leave out");

  auto* td = app.add_subcommand("train-decoder", "train the guided caption decoder");
  add_common(td, common);
  td->add_option("--manifest", manifest, "dataset manifest")->required();
  td->add_option("--labels", labels, "prepare-similarity output directory")->required();

  auto* gn = app.add_subcommand("generate", "caption a split or a single feature file");
  add_common(gn, common);
  gn->add_option("--manifest", gen.manifest, "dataset manifest")->required();
  gn->add_option("--checkpoint", gen.checkpoint, "train-decoder output directory")->required();
  gn->add_option("--index", gen.index, "train-retrieval output directory");
  gn->add_option("--labels", gen.labels, "prepare-similarity output directory");
  gn->add_option("--split", gen.split, "train, valid or test")->capture_default_str();
  gn->add_option("--features", gen.features, "caption this feature file instead of a split");
  gn->add_flag("--oracle-guidance", gen.oracle, "guide with the most similar captions instead of retrieval");
  gn->add_option("--beam", gen.beam, "beam width override");

  auto* evc = app.add_subcommand("evaluate", "score captions");
  add_common(evc, common);
  evc->add_option("--candidates", ev.candidates, "JSON lines {id, text}");
  evc->add_option("--references", ev.references, "JSON lines {id, texts}");
  evc->add_option("--scope", ev.scope, "i: retrieval+decoder, ii: retrieval only, iii: oracle guidance");
  evc->add_option("--manifest", ev.manifest, "dataset manifest");
  evc->add_option("--checkpoint", ev.checkpoint, "train-decoder output directory");
  evc->add_option("--index", ev.index, "train-retrieval output directory");
  evc->add_option("--labels", ev.labels, "prepare-similarity output directory");
  evc->add_option("--split", ev.split, "split to evaluate")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (mk->parsed()) return make_dataset(common, mk->count("--seed") > 0);
    if (ps->parsed()) return prepare_similarity_cmd(common, manifest);
    if (tr->parsed()) return train_retrieval_cmd(common, manifest, labels);
    if (rt->parsed()) return retrieve_cmd(common, index, query, k, exclude);
    if (td->parsed()) return train_decoder_cmd(common, manifest, labels);
    if (gn->parsed()) return generate_cmd(common, gen);
    if (evc->parsed()) return evaluate_cmd(common, ev);
  } catch (const std::exception& e) {
    log().error("{}", e.what());
    return exit_code_for(e);
  }
  return static_cast<int>(ExitCode::kFailure);
}
