// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "racap/pipeline.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace racap;
namespace fs = std::filesystem;
using racap::testing::check_gradients;
using racap::testing::probe;
using racap::testing::TempDir;
using racap::testing::worst;

namespace {

const fs::path kCli = RACAP_CLI_PATH;
const fs::path kConfigs = RACAP_CONFIG_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) { return Tensor::randn({r, c}, 1.0, rng); }

// ------------------------------------------------------------------ AC1

Outcome gradient_suite() {
  Rng rng(1);
  std::map<std::string, double> worst_by_block;
  std::map<std::string, int> shapes;
  auto record = [&](const std::string& block, double err) {
    worst_by_block[block] = std::max(worst_by_block[block], err);
    ++shapes[block];
  };

  for (std::size_t s = 1; s <= 5; ++s) {
    auto lin = Linear::init(s + 1, s + 2, 0.5, rng);
    lin.bias = trainable(Tensor::randn({s + 2}, 0.5, rng));
    const Tensor x = random_matrix(s, s + 1, rng);
    NamedTensors named;
    lin.collect(named, "linear");
    record("linear", worst(check_gradients([&] { return probe(lin(x)); }, named)));
  }
  for (std::size_t s = 1; s <= 5; ++s) {
    Tensor x = trainable(random_matrix(s, s + 1, rng));
    Tensor gain = trainable(Tensor::randn({s + 1}, 1.0, rng));
    Tensor bias = trainable(Tensor::randn({s + 1}, 1.0, rng));
    record("layer_norm", worst(check_gradients([&] { return probe(layer_norm(x, gain, bias)); },
                                               {{"x", x}, {"gain", gain}, {"bias", bias}})));
  }
  const std::size_t mha_shapes[][5] = {{1, 1, 2, 2, 1}, {3, 2, 4, 3, 2}, {2, 5, 6, 4, 3}, {4, 4, 8, 8, 4}, {5, 1, 3, 2, 1}};
  for (const auto& s : mha_shapes) {
    auto p = MhaParams::init(s[2], s[3], s[4] * 2, s[4], 0.5, rng);
    Tensor q = trainable(random_matrix(s[0], s[2], rng));
    Tensor kv = trainable(random_matrix(s[1], s[3], rng));
    NamedTensors named{{"q", q}, {"kv", kv}};
    p.collect(named, "mha");
    record("attention", worst(check_gradients([&] { return probe(multi_head_attention(p, q, kv)); }, named)));
  }
  for (std::size_t s = 0; s < 5; ++s) {
    // Width 2 is excluded: LayerNorm over two features is constant up to sign.
    const std::size_t dim = 2 * (s + 2), heads = s % 2 + 1;
    auto p = EncoderLayerParams::init(dim, heads, dim + 3, 0.5, rng);
    Tensor x = trainable(random_matrix(s + 1, dim, rng));
    NamedTensors named{{"x", x}};
    p.collect(named, "layer");
    record("encoder_layer",
           worst(check_gradients([&] { return probe(transformer_encoder_layer(p, x, s % 2 == 1)); }, named)));
  }
  for (std::size_t s = 0; s < 5; ++s) {
    auto p = EmbedderParams::init(4 + 2 * (s % 2), 2 + s % 3, 2, 6, 0.0, 0.5, rng);
    const NamedTensors named = p.parameters();
    set_trainable(named, true);
    const AudioFeatureSequence a{random_matrix(p.frames, p.feature_dim, rng)};
    const AudioFeatureSequence b{random_matrix(p.frames, p.feature_dim, rng)};
    const AudioFeatureSequence c{random_matrix(p.frames, p.feature_dim, rng)};
    record("audio_embedder", worst(check_gradients([&] { return probe(embed(p, a)); }, named)));
    record("triplet_loss",
           worst(check_gradients([&] { return triplet_loss(embed(p, a), embed(p, b), embed(p, c), 5.0); }, named)));
  }
  for (std::size_t s = 1; s <= 5; ++s) {
    Tensor logits = trainable(random_matrix(s, s + 2, rng));
    std::vector<std::size_t> targets(s);
    for (auto& t : targets) t = rng() % (s + 2);
    record("smoothed_cross_entropy",
           worst(check_gradients([&] { return smoothed_cross_entropy(logits, targets, 0.1); }, {{"logits", logits}})));
  }
  for (std::size_t s = 0; s < 5; ++s) {
    TinyLmConfig lc;
    lc.vocab = 7 + s;
    lc.dim = 4 + 2 * (s % 2);
    lc.layers = 1;
    lc.heads = 1 + s % 2;
    lc.ffn_dim = 8;
    const TinyCausalLm lm(lc, 10 + s);
    auto p = DecoderParams::init(lm, 2 + s, 2 * (1 + s % 2), 1 + s % 2, 0.0, 0.5, rng);
    const Tensor hyps = random_matrix(2 + s % 3, lc.dim, rng);
    const Tensor refs = random_matrix(1 + s, lc.dim, rng);
    const AudioFeatureSequence phi{random_matrix(3, 2 + s, rng)};
    std::vector<std::size_t> targets(hyps.rows());
    for (auto& t : targets) t = rng() % lc.vocab;
    const NamedTensors named = p.parameters();
    set_trainable(named, true);
    record("decoder_fusion", worst(check_gradients(
                                 [&] {
                                   return smoothed_cross_entropy(decoder_logits_from_features(p, hyps, refs, phi),
                                                                 targets, 0.1);
                                 },
                                 named)));

    const NamedTensors lm_named = lm.parameters();
    set_trainable(lm_named, true);
    std::vector<TokenId> tokens{1};
    for (std::size_t i = 0; i < 3 + s; ++i) tokens.push_back(5 + rng() % (lc.vocab - 5));
    record("language_model", worst(check_gradients([&] { return probe(lm.logits(tokens)); }, lm_named)));
    set_trainable(lm_named, false);
  }

  bool pass = true;
  std::string detail;
  for (const auto& [block, err] : worst_by_block) {
    pass = pass && err < 1e-4 && shapes[block] >= 5;
    detail += fmt::format(" {}={:.1e}", block, err);
  }
  return {pass, "worst relative error per block (5 shapes each):" + detail};
}

// ------------------------------------------------------------------ AC2

// Random next-token tables keyed by prefix.
struct TableModel {
  std::size_t vocab;
  std::uint64_t seed;
  mutable std::map<std::vector<TokenId>, std::vector<double>> table;

  std::vector<double> operator()(const std::vector<TokenId>& prefix) const {
    if (auto it = table.find(prefix); it != table.end()) return it->second;
    std::uint64_t h = seed;
    for (auto t : prefix) h = h * 1000003u + t + 1;
    Rng rng(h);
    std::vector<double> p(vocab);
    double s = 0;
    for (auto& v : p) s += (v = std::exp(2.0 * std::normal_distribution<double>()(rng)));
    for (auto& v : p) v /= s;
    return table[prefix] = p;
  }
};

Outcome oracle_equivalences() {
  Rng rng(2);
  RetrievalIndex idx;
  const std::size_t n = 50, dim = 6;
  idx.embeddings = Tensor({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    idx.ids.push_back(fmt::format("item{:02}", i));
    idx.captions.push_back({"c"});
    const auto e = l2_normalize(Tensor::randn({1, dim}, 1.0, rng)).values();
    for (std::size_t c = 0; c < dim; ++c) idx.embeddings(i, c) = e[c];
  }
  std::size_t retrieval_ok = 0;
  for (std::size_t q = 0; q < 100; ++q) {
    const auto query = l2_normalize(Tensor::randn({1, dim}, 1.0, rng)).values();
    const std::size_t k = 1 + q % n;
    std::vector<std::pair<double, std::string>> all;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0;
      for (std::size_t c = 0; c < dim; ++c) d += (query[c] - idx.embeddings(i, c)) * (query[c] - idx.embeddings(i, c));
      all.emplace_back(d, idx.ids[i]);
    }
    std::sort(all.begin(), all.end());
    const auto hits = retrieve_topk(idx, query, k);
    bool same = hits.size() == k;
    for (std::size_t i = 0; same && i < k; ++i) same = hits[i].id == all[i].second;
    retrieval_ok += same;
  }
  std::size_t beam_ok = 0;
  for (std::uint64_t m = 0; m < 20; ++m) {
    const TableModel model{3, m, {}};
    const GenerationConfig g{9, 3, 2, {}};
    const auto best = exhaustive_best(std::ref(model), g);
    const auto got = beam_search_hypothesis(std::ref(model), g);
    beam_ok += got.tokens == best.tokens && got.score() == best.score();
  }
  return {retrieval_ok == 100 && beam_ok == 20,
          fmt::format("top-k vs brute-force sort {}/100 exact; beam 9 vs exhaustive {}/20 exact", retrieval_ok, beam_ok)};
}

// ------------------------------------------------------------------ AC3

Outcome unit_vectors() {
  std::vector<std::string> failed;
  auto expect = [&](const char* what, double got, double want) {
    if (!(std::abs(got - want) <= 1e-9)) failed.push_back(fmt::format("{} ({} vs {})", what, got, want));
  };
  // Triplet loss with D(a,p)=0.2, D(a,n)=0.4, margin 0.3. Unit vectors at
  // squared distances d satisfy cos = 1 - d/2.
  auto unit_at = [](double d) {
    const double c = 1.0 - d / 2.0;
    return Tensor::matrix(1, 2, {c, std::sqrt(1.0 - c * c)});
  };
  const Tensor a = Tensor::matrix(1, 2, {1.0, 0.0});
  Tensor neg = unit_at(0.4);
  neg(0, 1) = -neg(0, 1);
  expect("triplet loss", triplet_loss(a, unit_at(0.2), neg, 0.3).item(), 0.1);
  expect("triplet loss e_p = e_n", triplet_loss(a, unit_at(0.7), unit_at(0.7), 0.3).item(), 0.3);

  Rng rng(3);
  const std::vector<NegativeCandidate> pool{{0, 0.4}, {1, 0.6}, {2, 0.9}};
  const auto pick = select_semi_hard_negative(0.5, pool, 0.3, rng);
  expect("semi-hard pick", static_cast<double>(pick.id), 1.0);
  const std::vector<NegativeCandidate> edge{{0, 0.25}, {1, 0.1}};
  expect("window admits d_ap", static_cast<double>(select_semi_hard_negative(0.25, edge, 0.5, rng).id), 0.0);
  const std::vector<NegativeCandidate> beyond{{0, 0.75}, {1, 0.1}};
  expect("window excludes d_ap+margin",
         select_semi_hard_negative(0.25, beyond, 0.5, rng).kind == NegativeKind::kSemiHard ? 1.0 : 0.0, 0.0);

  Tensor m({3, 3});
  m(0, 0) = m(1, 1) = m(2, 2) = 1.0;
  m(0, 1) = m(1, 0) = 0.2;
  m(0, 2) = m(2, 0) = 0.5;
  m(1, 2) = m(2, 1) = 0.8;
  const auto norm = normalize_minmax({m});
  expect("minmax 0.2", norm(0, 1), 0.0);
  expect("minmax 0.5", norm(0, 2), 0.5);
  expect("minmax 0.8", norm(1, 2), 1.0);

  Tensor t({3, 3});
  t(0, 1) = t(1, 0) = 0.7;
  t(0, 2) = t(2, 0) = 0.71;
  const auto labels = label_similar({t}, 0.7);
  expect("0.70 not similar", labels.similar(0, 1), 0.0);
  expect("0.71 similar", labels.similar(0, 2), 1.0);
  expect("diagonal", labels.similar(1, 1), 0.0);

  // Probabilities (1/4, 3/4), target 1, smoothing 0.1 over 2 classes.
  const Tensor logits = Tensor::matrix(1, 2, {0.0, std::log(3.0)});
  const std::vector<std::size_t> target{1};
  expect("smoothed cross-entropy", smoothed_cross_entropy(logits, target, 0.1).item(),
         -(0.95 * std::log(0.75) + 0.05 * std::log(0.25)));
  const Tensor flat({2, 5}, 0.0);
  const std::vector<std::size_t> targets{0, 3};
  expect("uniform posterior gives ln V", smoothed_cross_entropy(flat, targets, 0.4).item(), std::log(5.0));

  const auto s = bertscore(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(2, 2, {1, 0, 0, 1}));
  expect("bertscore precision", s.precision, 1.0);
  expect("bertscore recall", s.recall, 0.5);
  expect("bertscore f1", s.f1, 2.0 / 3.0);

  std::string detail = failed.empty() ? "20 hand-computed values within 1e-9" : "mismatch:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

// ------------------------------------------------------------------ AC4

Outcome metric_vectors() {
  auto w = [](const std::string& s) { return normalize_words(s); };
  const std::vector<std::string> cands{"a dog barks outside", "rain falls on the roof", "a woman speaks quietly",
                                       "a bird sings in the trees", "water splashes into a sink"};
  const std::vector<std::vector<std::string>> refs{
      {"a dog barks loudly outside", "the dog is barking"},
      {"rain falls on a roof", "heavy rain pours on the window", "rain patters"},
      {"a man speaks to a crowd"},
      {"birds sing in the trees at dawn", "a bird chirps"},
      {"water flows over rocks", "a stream trickles steadily"}};
  std::vector<Words> cw;
  std::vector<std::vector<Words>> rw;
  for (const auto& c : cands) cw.push_back(w(c));
  for (const auto& set : refs) {
    rw.emplace_back();
    for (const auto& r : set) rw.back().push_back(w(r));
  }
  std::vector<std::string> failed;
  auto expect = [&](const std::string& what, double got, double want) {
    if (!(std::abs(got - want) <= 1e-6)) failed.push_back(fmt::format("{} ({} vs {})", what, got, want));
  };
  expect("BLEU-1", bleu_n(cw, rw, 1), 0.6900333109144896);
  expect("BLEU-2", bleu_n(cw, rw, 2), 0.517020326814166);
  expect("BLEU-3", bleu_n(cw, rw, 3), 0.37492040942977184);
  expect("BLEU-4", bleu_n(cw, rw, 4), 0.0);
  expect("ROUGE-L", rouge_l(cw, rw), 0.5741617563181254);
  expect("CIDEr", cider(cw, rw), 1.5992888387137776);
  expect("clipped unigram", bleu_n({w("a b c")}, {{w("a b d")}}, 1), 2.0 / 3.0);
  expect("brevity penalty", bleu_n({w("a b")}, {{w("a b c d")}}, 1), std::exp(-1.0));
  expect("LCS transposition", rouge_l({w("a b c d")}, {{w("a c b d")}}), 0.75);
  const auto self = cider_d_items({w("a b c d e"), w("f g h")}, {{w("a b c d e")}, {w("f g h")}});
  expect("CIDEr self 5 words", self[0], 10.0);
  expect("CIDEr self 3 words", self[1], 7.5);
  std::vector<std::vector<Words>> identity;
  for (const auto& c : cw) identity.push_back({c});
  for (std::size_t n = 1; n <= 4; ++n) expect(fmt::format("identity BLEU-{}", n), bleu_n(cw, identity, n), 1.0);
  expect("identity ROUGE-L", rouge_l(cw, identity), 1.0);
  std::string detail = failed.empty() ? "16 reference values within 1e-6" : "mismatch:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

// ------------------------------------------------------------- AC5 / AC6

/// The shipped synthetic corpus and config at seed 0.
struct Shipped {
  TempDir dir;
  PipelineConfig cfg = PipelineConfig::load(kConfigs / "synthetic.cfg");
  std::optional<Workspace> ws;
  std::optional<SimilarityArtifacts> sim;

  Shipped() {
    const auto spec = SyntheticDatasetSpec::load(kConfigs / "synthetic_dataset.cfg");
    write_synthetic_dataset(generate_synthetic_dataset(spec), dir / "data");
    ws = Workspace::load(DatasetLayout{dir / "data"}.manifest(), cfg);
    sim = prepare_similarity(*ws, cfg);
  }

  double bleu1(Scope scope, const LoadedRetrieval* ret, const DecoderParams* dec) const {
    const auto preds = predict(*ws, cfg, scope, ws->rows(Split::kTest), {ret, dec, &*sim});
    return evaluate_predictions(*ws, preds).bleu[0];
  }
};

Shipped& shipped() {
  static Shipped s;
  return s;
}

Outcome retrieval_direction() {
  auto& s = shipped();
  auto untrained_cfg = s.cfg;
  untrained_cfg.triplet_epochs = 0;
  const auto untrained = run_train_retrieval(*s.ws, *s.sim, untrained_cfg, 0);
  const auto trained = run_train_retrieval(*s.ws, *s.sim, s.cfg, 0);
  const LoadedRetrieval u{untrained.train.params, untrained.index};
  const LoadedRetrieval t{trained.train.params, trained.index};
  const double bu = s.bleu1(Scope::kRetrievalOnly, &u, nullptr);
  const double bt = s.bleu1(Scope::kRetrievalOnly, &t, nullptr);
  return {bt > bu, fmt::format("top-1 retrieved caption BLEU-1: triplet-trained {:.4f} vs untrained {:.4f}", bt, bu)};
}

Outcome oracle_guidance_direction() {
  auto& s = shipped();
  const auto run = run_train_retrieval(*s.ws, *s.sim, s.cfg, 0);
  const LoadedRetrieval ret{run.train.params, run.index};
  const auto dec = run_train_decoder(*s.ws, *s.sim, s.cfg, 0);
  const double retrieved = s.bleu1(Scope::kRetrievedGuidance, &ret, &dec.params);
  const double oracle = s.bleu1(Scope::kOracleGuidance, nullptr, &dec.params);
  return {oracle >= retrieved,
          fmt::format("generation BLEU-1, one checkpoint: oracle guidance {:.4f} vs retrieved guidance {:.4f}", oracle,
                      retrieved)};
}

// ------------------------------------------------------------------ AC7

Outcome decoder_overfit() {
  const auto spec = SyntheticDatasetSpec::load(kConfigs / "synthetic_dataset.cfg");
  const auto ds = generate_synthetic_dataset(spec);
  const LmTextEncoder enc(ds.lm);
  std::vector<TokenizedCaption> caps;
  for (const auto& it : ds.items) caps.push_back(ds.tokenizer.tokenize(it.captions.front()));
  const auto sim = compute_similarity(caps, enc, 0.7);
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < ds.items.size(); ++i)
    if (ds.items[i].split == Split::kTrain) train.push_back(i);

  DecoderData data;
  for (auto i : train) {
    std::vector<std::vector<TokenId>> c;
    for (const auto& s : ds.items[i].captions) c.push_back(ds.tokenizer.encode(s));
    data.guidance_pool.push_back(std::move(c));
  }
  // Two items per cluster.
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    std::size_t taken = 0;
    for (auto i : train)
      if (ds.items[i].cluster == c && taken < 2) {
        chosen.push_back(i);
        ++taken;
      }
  }
  for (auto i : chosen) {
    std::vector<std::size_t> similar;
    for (std::size_t j = 0; j < train.size(); ++j)
      if (sim.labels.similar(i, train[j])) similar.push_back(j);
    data.train.push_back({ds.items[i].features, ds.tokenizer.encode(ds.items[i].captions.front()), similar});
  }

  Rng rng(3);
  const auto init = DecoderParams::init(ds.lm, spec.audio_dim, 8, 2, 0.0, 0.02, rng);
  DecoderTrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch = 8;
  cfg.schedule = LrSchedule::cosine(1e-2, 1e-4, 20);
  const auto r = train_decoder(ds.lm, init, data, cfg, 5);

  const auto guide = fixed_guidance(data, data.train, cfg.guidance_k, 11);
  const double nll = mean_teacher_forcing_loss(ds.lm, r.params, data.train, guide, 0.0);
  const double smoothed = mean_teacher_forcing_loss(ds.lm, r.params, data.train, guide, cfg.smoothing);
  const auto gen = decoder_generation(ds.lm, 4, 12);
  std::size_t exact = 0;
  for (std::size_t k = 0; k < data.train.size(); ++k)
    exact += generate_caption(ds.lm, r.params, data.train[k].audio, *guide[k], gen) == data.train[k].caption;
  return {nll < 0.5 && exact >= 6 && data.train.size() == 8,
          fmt::format("8 items, 200 epochs: teacher-forcing NLL {:.4f} (smoothed objective {:.4f}); beam-4 exact {}/8",
                      nll, smoothed, exact)};
}

// ------------------------------------------------------------------ AC8

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool run_cli(const std::string& args, const fs::path& log) {
  const int status = std::system((kCli.string() + " " + args + " > '" + log.string() + "' 2>&1").c_str());
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

/// Every CLI command once, on the shipped configs. Returns the first
/// failing command line, or empty.
std::string cli_chain(const fs::path& dir, std::uint64_t seed) {
  const std::string s = " --seed " + std::to_string(seed);
  const std::string cfg = " --config " + (kConfigs / "synthetic.cfg").string() + s;
  const auto d = dir.string();
  const auto m = " --manifest " + d + "/data/manifest.jsonl";
  const std::vector<std::string> commands{
      "make-dataset --config " + (kConfigs / "synthetic_dataset.cfg").string() + s + " --out " + d + "/data",
      "prepare-similarity" + cfg + m + " --out " + d + "/sim",
      "train-retrieval" + cfg + m + " --labels " + d + "/sim --out " + d + "/ret",
      "retrieve" + cfg + " --index " + d + "/ret --query-features " + d + "/data/features/c0_000.ract --out " + d + "/q",
      "train-decoder" + cfg + m + " --labels " + d + "/sim --out " + d + "/dec",
      "generate" + cfg + m + " --checkpoint " + d + "/dec --index " + d + "/ret --out " + d + "/gen",
      "evaluate" + cfg + " --candidates " + d + "/gen/generated.jsonl --references " + d + "/gen/references.jsonl --out " +
          d + "/evf",
      "evaluate" + cfg + m + " --scope iii --checkpoint " + d + "/dec --labels " + d + "/sim --out " + d + "/ev3"};
  fs::create_directories(dir);
  for (const auto& c : commands)
    if (!run_cli(c, dir.parent_path() / (dir.filename().string() + ".log"))) return c;
  return {};
}

Outcome cli_determinism() {
  TempDir t;
  for (const char* run : {"a", "b"})
    if (auto bad = cli_chain(t / run, 0); !bad.empty()) return {false, "command failed: " + bad};
  std::size_t files = 0, differing = 0;
  std::string first;
  for (const auto& e : fs::recursive_directory_iterator(t / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), t / "a");
    ++files;
    if (!fs::exists(t / "b" / rel) || slurp(e.path()) != slurp(t / "b" / rel)) {
      ++differing;
      if (first.empty()) first = rel.string();
    }
  }
  return {differing == 0 && files > 0,
          fmt::format("8 commands run twice at seed 0: {} artifacts, {} differ{}", files, differing,
                      first.empty() ? "" : " (first: " + first + ")")};
}

// ------------------------------------------------------------------ AC9

Outcome semi_hard_contract() {
  auto& s = shipped();
  const auto run = run_train_retrieval(*s.ws, *s.sim, s.cfg, 0);
  const auto& m = run.train.mining;
  const double margin = s.cfg.triplet_margin;
  std::size_t bad = 0;
  for (const auto& r : m.records) {
    switch (r.kind) {
      case NegativeKind::kSemiHard: bad += !(r.d_an >= r.d_ap && r.d_an < r.d_ap + margin); break;
      // Fallbacks are legitimate only when the window was empty: the
      // nearest negative at or beyond d_ap lies past the window, or no
      // negative reaches d_ap at all.
      case NegativeKind::kNearestBeyondPositive: bad += !(r.d_an >= r.d_ap + margin); break;
      case NegativeKind::kFarthest: bad += !(r.d_an < r.d_ap); break;
    }
  }
  return {bad == 0 && m.records.size() == m.total() && m.total() > 0,
          fmt::format("{} selections over {} epochs: {} semi-hard, {} nearest-beyond fallback, {} farthest fallback; "
                      "{} contract violations",
                      m.total(), s.cfg.triplet_epochs, m.semi_hard, m.fallback_nearest, m.fallback_farthest, bad)};
}

// ----------------------------------------------------------------- AC10

Outcome posterior_contract() {
  TinyLmConfig lc;
  lc.vocab = 12;
  lc.dim = 8;
  lc.layers = 1;
  lc.heads = 2;
  lc.ffn_dim = 16;
  const TinyCausalLm lm(lc, 4);
  Rng rng(10);
  double worst_sum = 0.0;
  std::size_t causal_bad = 0, rows = 0;
  const std::size_t draws = 10000;
  for (std::size_t d = 0; d < draws; ++d) {
    const auto p = DecoderParams::init(lm, 4, 4, 2, 0.2, 0.5, rng);
    const AudioFeatureSequence phi{Tensor::randn({1 + d % 4, 4}, 1.0, rng)};
    std::vector<TokenId> guide(1 + d % 3);
    for (auto& t : guide) t = 5 + rng() % 7;
    const Tensor refs = encode_refs(lm, {{guide}});
    std::vector<TokenId> prefix{1};
    const std::size_t len = 1 + d % 6;
    for (std::size_t i = 0; i < len; ++i) prefix.push_back(rng() % 12);

    Rng mode_rng(d);
    const bool train = d % 2 == 1;
    const Tensor logits = train ? decoder_logits(lm, p, phi, refs, prefix, ForwardMode::train(mode_rng))
                                : decoder_logits(lm, p, phi, refs, prefix);
    const Tensor probs = softmax(logits, 1);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < probs.cols(); ++c) sum += probs(r, c);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      ++rows;
    }
    if (!train) {
      // Change one token at position `cut` or later: rows before it must not move.
      const std::size_t cut = 1 + rng() % len;
      std::vector<TokenId> mutated = prefix;
      for (std::size_t i = cut; i < mutated.size(); ++i) mutated[i] = (mutated[i] + 1 + rng() % 11) % 12;
      const Tensor other = decoder_logits(lm, p, phi, refs, mutated);
      for (std::size_t r = 0; r < cut; ++r)
        for (std::size_t c = 0; c < logits.cols(); ++c) causal_bad += logits(r, c) != other(r, c);
    }
  }
  return {worst_sum <= 1e-9 && causal_bad == 0,
          fmt::format("{} draws, {} posterior rows: max |sum - 1| = {:.1e}; {} causality mismatches", draws, rows,
                      worst_sum, causal_bad)};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double limit_s;  // 0: no runtime bound
  };
  const std::vector<Criterion> criteria{
      {"AC1 gradient suite", gradient_suite, 60},
      {"AC2 oracle equivalences", oracle_equivalences, 0},
      {"AC3 hand-computed unit vectors", unit_vectors, 0},
      {"AC4 metric unit tests", metric_vectors, 0},
      {"AC5 trained vs untrained retrieval", retrieval_direction, 300},
      {"AC6 oracle vs retrieved guidance", oracle_guidance_direction, 0},
      {"AC7 decoder overfit", decoder_overfit, 180},
      {"AC8 CLI determinism", cli_determinism, 0},
      {"AC9 semi-hard contract", semi_hard_contract, 0},
      {"AC10 posterior contract", posterior_contract, 0},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.limit_s > 0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += fmt::format("; over the {:.0f} s budget", c.limit_s);
    }
    failures += !o.pass;
    std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
