#pragma once
// Command-line front end. Every command resolves a RunConfig (defaults, then
// --config, then flags), echoes it into --out, and writes JSON-lines logs and
// CSV metrics next to it. Exit codes: 0 ok, 1 invalid input, 2 runtime
// failure, 64 unknown flag.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "nasforge/checkpoint.hpp"

namespace nasforge::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitUsage = 64;

/// Bad input or a missing upstream artifact; maps to exit 1.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fixed seed streams, one per stage, so changing one stage's settings never
/// shifts another stage's randomness.
enum class Stage : std::uint64_t {
  kData = 1,
  kSplit,
  kSupernetInit,
  kSupernetTrain,
  kSearch,
  kRetrain,
  kRanking,
  kPrune,
  kPruneTrain,
  kCosim,
  kModelInit,
};

inline std::uint64_t stage_seed(const RunConfig& c, Stage s) { return derive_seed(c.seed, std::uint64_t(s)); }

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& p) : os_(p, std::ios::app) {
    if (!os_) throw std::runtime_error("cannot open log " + p.string());
  }
  void event(const std::string& name, nlohmann::json fields = nlohmann::json::object()) {
    nlohmann::json line{{"event", name}};
    line.update(fields);
    os_ << line.dump() << '\n' << std::flush;
  }

 private:
  std::ofstream os_;
};

// ---------------------------------------------------------------- helpers

inline void write_text(const fs::path& p, const std::string& text) { write_file_atomic(p, text); }

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

/// Config identity for stage reuse; the worker count never changes results.
inline std::string config_digest(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("workers");
  return sha256_hex(j.dump());
}

inline void echo_config(const fs::path& dir, const RunConfig& c) { write_json(dir / "config.json", to_json(c)); }

inline void require_file(const fs::path& p, const std::string& what, const std::string& producer) {
  if (!fs::exists(p)) throw InputError("missing upstream artifact: " + what + " " + p.string() + " (produced by " + producer + ")");
}

inline Genotype read_genotype_file(const fs::path& p) {
  require_file(p, "genotype", "evolve or select-top");
  return deserialize(read_file(p));
}

inline Dataset head_rows(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.rows()) return ds;
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return subset(ds, rows);
}

struct Splits {
  Dataset train, val, test;
};

inline Splits load_splits(const fs::path& data, const RunConfig& c) {
  require_file(data, "dataset", "synth-data or ingest");
  const Dataset all = read_dataset(data.string());
  const Split s = split_indices(all.rows(), stage_seed(c, Stage::kSplit), c.data.train_fraction, c.data.val_fraction);
  if (s.train.empty() || s.val.empty() || s.test.empty()) throw InputError("dataset " + data.string() + " is too small to split");
  return {subset(all, s.train), subset(all, s.val), subset(all, s.test)};
}

inline Supernet read_supernet(const fs::path& stem) {
  require_file(stem.string() + ".json", "supernet checkpoint", "train-supernet");
  return load_supernet(stem);
}

inline SynthSpec synth_spec(const RunConfig& c) {
  SynthSpec s;
  s.rows = c.data.rows;
  s.num_dense = c.data.dense;
  s.num_sparse = c.data.sparse;
  s.vocab = std::min(c.data.vocab, c.data.embedding_cap);
  s.teacher_scale = c.data.teacher_scale;
  s.seed = stage_seed(c, Stage::kData);
  return s;
}

/// Generates the synthetic dataset, or reuses a verified copy from the
/// directory named by NASFORGE_CACHE.
inline Dataset synth_cached(const RunConfig& c, JsonlLog& log) {
  const SynthSpec s = synth_spec(c);
  const nlohmann::json key{{"rows", s.rows},   {"dense", s.num_dense}, {"sparse", s.num_sparse},
                           {"vocab", s.vocab}, {"seed", s.seed},       {"teacher_scale", s.teacher_scale},
                           {"teacher_rank", s.teacher_rank}};
  const char* env = std::getenv("NASFORGE_CACHE");
  if (!env || !*env) return synth_generate(s);
  const fs::path dir(env);
  const std::string stem = "synth-" + sha256_hex(key.dump()).substr(0, 16);
  const fs::path file = dir / (stem + ".nfds"), sum = dir / (stem + ".sha256");
  if (fs::exists(file) && fs::exists(sum)) {
    Dataset ds = read_dataset(file.string());
    std::string want = read_file(sum);
    while (!want.empty() && std::isspace(static_cast<unsigned char>(want.back()))) want.pop_back();
    if (dataset_checksum(ds) == want) {
      log.event("cache_hit", {{"path", file.string()}});
      return ds;
    }
    log.event("cache_corrupt", {{"path", file.string()}});
  }
  Dataset ds = synth_generate(s);
  write_file_atomic(file, encode_dataset(ds));
  write_text(sum, dataset_checksum(ds) + "\n");
  log.event("cache_store", {{"path", file.string()}});
  return ds;
}

inline void store_dataset(const fs::path& dir, const Dataset& ds, const std::string& source) {
  write_file_atomic(dir / "dataset.nfds", encode_dataset(ds));
  const std::string sum = dataset_checksum(ds);
  write_text(dir / "dataset.sha256", sum + "\n");
  double positives = 0;
  for (double y : ds.labels) positives += y;
  write_json(dir / "dataset.json", {{"source", source},
                                    {"rows", ds.rows()},
                                    {"features", to_json(ds.spec)},
                                    {"positive_rate", positives / double(ds.rows())},
                                    {"sha256", sum}});
}

inline std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

inline void validate_config(const RunConfig& c) {
  if (const auto e = c.check(); !e.empty()) throw ConfigError("invalid configuration:\n  " + join(e, "\n  "));
}

// ---------------------------------------------------------------- stages

inline void run_synth(const RunConfig& c, const fs::path& out, JsonlLog& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = synth_cached(c, log);
  store_dataset(out, ds, "synthetic");
  log.event("dataset", {{"rows", ds.rows()},
                        {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
}

inline void run_ingest(const RunConfig& c, const fs::path& out, const fs::path& tsv, JsonlLog& log) {
  require_file(tsv, "TSV file", "the user");
  TsvOptions o;
  o.num_dense = c.data.dense;
  o.num_sparse = c.data.sparse;
  o.vocab = c.data.vocab;
  o.embedding_cap = c.data.embedding_cap;
  Dataset ds;
  try {
    ds = load_criteo_tsv(tsv.string(), o);
  } catch (const DataError& e) {
    throw InputError(tsv.string() + ": " + e.what());
  }
  if (ds.rows() == 0) throw InputError(tsv.string() + ": no rows");
  store_dataset(out, ds, tsv.filename().string());
  log.event("dataset", {{"rows", ds.rows()}, {"source", tsv.string()}});
}

inline void run_train_supernet(const RunConfig& c, const fs::path& out, const fs::path& data, JsonlLog& log) {
  const Splits s = load_splits(data, c);
  Supernet net(c.space, s.train.spec, stage_seed(c, Stage::kSupernetInit));
  TrainConfig t = c.train;
  t.seed = stage_seed(c, Stage::kSupernetTrain);
  log.event("train_start", {{"rows", s.train.rows()}, {"steps", t.total_steps(s.train.rows())}});
  const TrainHistory h = train_supernet(net, s.train, &s.val, t);
  for (const auto& r : h.rows) log.event("step", {{"step", r.step}, {"lr", r.lr}, {"train_loss", r.train_loss}});
  write_text(out / "metrics.csv", metrics_csv(h));
  save_supernet(out / "supernet", net, {{"seed", c.seed}});
  const nlohmann::json summary{{"steps", h.steps},
                               {"full_path_val_log_loss", h.val_loss ? nlohmann::json(*h.val_loss) : nlohmann::json()},
                               {"full_path_val_auc", h.val_auc ? nlohmann::json(*h.val_auc) : nlohmann::json()},
                               {"params_sha256", net.checksum()}};
  write_json(out / "summary.json", summary);
  log.event("train_done", summary);
}

/// Best-so-far and population statistics after each iteration, rebuilt from
/// the history: the living population is always the newest P records.
inline std::string evolution_csv(const std::vector<SearchRecord>& history, const EvolutionConfig& cfg) {
  std::ostringstream os;
  os << "iteration,records,best_so_far,population_best,population_median\n";
  double best = std::numeric_limits<double>::infinity();
  std::size_t i = 0;
  const std::size_t last_iter = history.empty() ? 0 : history.back().iteration;
  for (std::size_t it = 0; it <= last_iter && !history.empty(); ++it) {
    for (; i < history.size() && history[i].iteration <= it; ++i) best = std::min(best, detail::ranking_key(history[i]));
    const std::size_t lo = i > cfg.population_size ? i - cfg.population_size : 0;
    std::vector<double> pop;
    for (std::size_t k = lo; k < i; ++k) pop.push_back(detail::ranking_key(history[k]));
    std::sort(pop.begin(), pop.end());
    const double median = pop.size() % 2 ? pop[pop.size() / 2] : 0.5 * (pop[pop.size() / 2 - 1] + pop[pop.size() / 2]);
    os << it << ',' << i << ',' << format_double(best) << ',' << format_double(pop.front()) << ',' << format_double(median)
       << '\n';
  }
  return os.str();
}

/// Reads an interrupted history for `--resume`; an absent file starts fresh.
inline std::vector<SearchRecord> resume_history(const fs::path& p) {
  if (!fs::exists(p)) return {};
  std::ifstream in(p);
  try {
    return read_history(in);
  } catch (const ParseError& e) {
    throw InputError(p.string() + ": " + e.what());
  }
}

/// Streams new records to `history.jsonl` (appending after a resumed prefix).
struct HistoryStream {
  HistoryStream(const fs::path& p, std::size_t keep) : keep_(keep) {
    if (keep == 0) std::ofstream(p, std::ios::trunc);
    os_.open(p, std::ios::app);
    if (!os_) throw std::runtime_error("cannot write " + p.string());
  }
  void operator()(const SearchRecord& r) {
    if (r.id >= keep_) write_history_line(os_, r);
  }

 private:
  std::size_t keep_;
  std::ofstream os_;
};

inline std::vector<SearchRecord> run_evolve(const RunConfig& c, const fs::path& out, const FitnessFn& fitness, const SpaceConfig& space,
                                            bool resume, JsonlLog& log) {
  EvolutionConfig e = c.search.evolution;
  e.seed = stage_seed(c, Stage::kSearch);
  e.workers = c.workers;
  const fs::path hist = out / "history.jsonl";
  std::vector<SearchRecord> prior = resume ? resume_history(hist) : std::vector<SearchRecord>{};
  if (!prior.empty()) {
    // Rewrite the verified prefix so a dropped partial line cannot linger.
    std::ostringstream os;
    for (const auto& r : prior) write_history_line(os, r);
    write_text(hist, os.str());
  }
  log.event("search_start", {{"resumed_records", prior.size()}});
  auto stream = std::make_shared<HistoryStream>(hist, prior.size());
  SearchOptions opt;
  if (!prior.empty()) opt.resume = &prior;
  opt.on_record = [stream](const SearchRecord& r) { (*stream)(r); };
  opt.on_iteration = [&log](std::size_t it, const std::vector<std::size_t>&, const std::deque<std::size_t>&) {
    if (it % 20 == 0) log.event("iteration", {{"iteration", it}});
  };
  std::vector<SearchRecord> history;
  try {
    history = evolve(fitness, e, space, opt);
  } catch (const std::runtime_error& err) {
    if (std::string(err.what()).find("resume history diverges") != std::string::npos) throw InputError(err.what());
    throw;
  }
  stream.reset();
  write_text(out / "evolution.csv", evolution_csv(history, e));
  const SearchRecord& best = best_record(history);
  write_text(out / "best.json", serialize(best.genotype));
  log.event("search_done", {{"records", history.size()}, {"best_id", best.id}, {"best_fitness", best.fitness}});
  return history;
}

inline FitnessFn make_supernet_fitness(const RunConfig& c, const Supernet& net, const Dataset& val, const Dataset& tune) {
  FitnessOptions fo;
  fo.finetune = c.search.finetune;
  fo.finetune_cfg = c.finetune;
  fo.finetune_data = &tune;
  return supernet_fitness(net, val, fo);
}

inline std::string top_csv(const std::vector<SearchRecord>& top) {
  std::ostringstream os;
  os << "rank,id,fitness,iteration\n";
  for (std::size_t i = 0; i < top.size(); ++i)
    os << i + 1 << ',' << top[i].id << ',' << format_double(top[i].fitness) << ',' << top[i].iteration << '\n';
  return os.str();
}

inline std::vector<SearchRecord> run_select_top(const RunConfig& c, const fs::path& out, const fs::path& history_path, JsonlLog& log) {
  require_file(history_path, "search history", "evolve");
  std::ifstream in(history_path);
  std::vector<SearchRecord> history;
  try {
    history = read_history(in);
  } catch (const ParseError& e) {
    throw InputError(history_path.string() + ": " + e.what());
  }
  if (history.empty()) throw InputError(history_path.string() + ": no records");
  const auto top = select_top_k(history, c.search.top_k);
  std::ostringstream os;
  for (const auto& r : top) write_history_line(os, r);
  write_text(out / "top.jsonl", os.str());
  write_text(out / "top.csv", top_csv(top));
  write_text(out / "best.json", serialize(top.front().genotype));
  log.event("selected", {{"k", top.size()}, {"best_id", top.front().id}});
  return top;
}

/// Ranked records, one JSON object per line; unlike a history, ids need not ascend.
inline std::vector<SearchRecord> read_top(const fs::path& p) {
  require_file(p, "top-k list", "select-top");
  std::ifstream in(p);
  std::vector<SearchRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw InputError(p.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (out.empty()) throw InputError(p.string() + ": no records");
  return out;
}

struct Report {
  nlohmann::json summary;
  std::string csv;
};

/// Retrains the leading candidates from scratch over the lr grid and scores
/// each on the held-out test split.
inline Report run_report(const RunConfig& c, const fs::path& out, const std::vector<SearchRecord>& top, const Splits& s,
                         JsonlLog& log) {
  RetrainConfig rc;
  rc.train = c.search.retrain_train;
  rc.lr_grid = c.search.lr_grid;
  rc.seed = stage_seed(c, Stage::kRetrain);
  rc.workers = c.workers;
  const std::vector<SearchRecord> cands(top.begin(), top.begin() + long(std::min(c.search.retrain, top.size())));
  log.event("retrain_start", {{"candidates", cands.size()}, {"lr_grid", rc.lr_grid}});
  const auto models = retrain_candidates(cands, c.space, s.train, s.val, rc);
  std::ostringstream os;
  os << "rank,id,search_fitness,lr,val_log_loss,test_log_loss,test_auc,mflops,params\n";
  std::vector<EvalResult> tests(models.size());
  parallel_for(models.size(), c.workers, [&](std::size_t i) { tests[i] = evaluate(models[i].model, s.test); });
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& m = models[i];
    os << i + 1 << ',' << m.record.id << ',' << format_double(m.record.fitness) << ',' << format_double(m.lr) << ','
       << format_double(m.val_log_loss) << ',' << format_double(tests[i].log_loss) << ',' << format_double(tests[i].auc) << ','
       << format_double(mflops(m.model.genotype, c.space, s.train.spec)) << ','
       << model_param_count(m.model.genotype, c.space, s.train.spec) << '\n';
  }
  const auto& best = models.front();
  save_model(out / "model", best.model, {{"lr", best.lr}, {"record_id", best.record.id}});
  write_text(out / "best.json", serialize(best.model.genotype));
  double pos = 0;
  for (double y : s.train.labels) pos += y;
  const double p = pos / double(s.train.rows());
  const double prior_loss = -(p * std::log(p) + (1 - p) * std::log(1 - p));
  Report r;
  r.csv = os.str();
  r.summary = {{"record_id", best.record.id},
               {"lr", best.lr},
               {"val_log_loss", best.val_log_loss},
               {"test_log_loss", tests.front().log_loss},
               {"test_auc", tests.front().auc},
               {"test_rows", s.test.rows()},
               {"constant_prior_log_loss", prior_loss},
               {"chance_log_loss", std::numbers::ln2},
               {"mflops", mflops(best.model.genotype, c.space, s.train.spec)}};
  write_text(out / "report.csv", r.csv);
  write_json(out / "report.json", r.summary);
  log.event("report", r.summary);
  return r;
}

inline std::string rank_pairs_csv(const RankResult& r) {
  std::ostringstream os;
  os << "index,supernet_log_loss,scratch_log_loss" << (r.with_finetune ? ",finetuned_log_loss" : "") << '\n';
  for (std::size_t i = 0; i < r.without_finetune.pairs.size(); ++i) {
    os << i << ',' << format_double(r.without_finetune.pairs[i].supernet) << ',' << format_double(r.without_finetune.pairs[i].scratch);
    if (r.with_finetune) os << ',' << format_double(r.with_finetune->pairs[i].supernet);
    os << '\n';
  }
  return os.str();
}

inline void run_rank_eval(const RunConfig& c, const fs::path& out, const fs::path& data, const fs::path& supernet, JsonlLog& log) {
  const Splits s = load_splits(data, c);
  const Supernet net = read_supernet(supernet);
  if (!(net.features() == s.train.spec)) throw InputError("supernet and dataset disagree on features");
  RankConfig rc = c.ranking;
  rc.finetune_cfg = c.finetune;
  rc.seed = stage_seed(c, Stage::kRanking);
  rc.workers = c.workers;
  log.event("rank_start", {{"subnets", rc.n_subnets}, {"budget", budget_label(rc.scratch)}});
  const RankResult r = rank_experiment(net, s.train, s.val, rc);
  nlohmann::json report{{"without_finetune", to_json(r.without_finetune)}};
  if (r.with_finetune) report["with_finetune"] = to_json(*r.with_finetune);
  write_json(out / "rank_report.json", report);
  write_text(out / "rank_pairs.csv", rank_pairs_csv(r));
  write_text(out / "cdf.csv", cdf_csv(r.cdf));
  std::ostringstream os;
  for (const auto& g : r.genotypes) os << to_json(g).dump() << '\n';
  write_text(out / "subnets.jsonl", os.str());
  log.event("rank_done", {{"tau", r.primary().tau}, {"rho", r.primary().rho}});
}

inline void run_prune(const RunConfig& c, const fs::path& out, const fs::path& data, const fs::path& genotype,
                      const std::vector<PruneVariant>& variants, JsonlLog& log) {
  const Splits s = load_splits(data, c);
  const Genotype g = read_genotype_file(genotype);
  if (const auto e = validate(g, c.space); !e.empty()) throw InputError(genotype.string() + ": " + e.front());
  const Model init = init_model(g, c.space, s.train.spec, stage_seed(c, Stage::kModelInit));
  PruneConfig pc = c.pruning;
  pc.seed = stage_seed(c, Stage::kPrune);
  pc.train.seed = stage_seed(c, Stage::kPruneTrain);
  std::vector<std::pair<std::string, PruneRow>> rows;
  const std::string label = data.parent_path().filename().string().empty() ? data.stem().string() : data.parent_path().filename().string();
  for (PruneVariant v : variants) {
    log.event("prune_start", {{"variant", name_of(v)}, {"iterations", pc.iterations}});
    const PruneResult r = prune_schedule(init, s.train, s.test, v, pc);
    for (const auto& row : r.rows) {
      rows.push_back({name_of(v), row});
      log.event("prune_round", {{"variant", name_of(v)}, {"t", row.t}, {"log_loss", row.log_loss}, {"surviving", row.surviving}});
    }
    save_model(out / (std::string("pruned-") + name_of(v)), r.model, {{"variant", name_of(v)}, {"iterations", pc.iterations}});
  }
  write_text(out / "prune.csv", prune_report_csv(label, rows));
}

inline void write_cost_report(const fs::path& out, const Genotype& g, const SpaceConfig& space, const FeatureSpec& fs_,
                              const HwConfig& hw, const QuantOverride& q) {
  const NetPlan p = plan(g, space, fs_);
  const CostReport total = cost(p, hw, q);
  std::ostringstream os;
  os << "op,kind,crossbars,crossbar_ns,digital_ns,energy_pj\n";
  for (const auto& op : p.used_ops()) {
    const OpSpec& spec = op.spec;
    const OpCost oc = op_cost(spec, hw, q);
    os << op.prefix.substr(0, op.prefix.empty() ? 0 : op.prefix.size() - 1) << ',' << name_of(spec.kind) << ',' << oc.crossbars
       << ',' << format_double(oc.crossbar_ns) << ',' << format_double(oc.digital_ns) << ',' << format_double(oc.energy_pj()) << '\n';
  }
  write_text(out / "cost_ops.csv", os.str());
  write_json(out / "cost.json", {{"cost", to_json(total)}, {"hw", to_json(hw)}});
}

inline std::string cosim_records_csv(const CosearchResult& r) {
  std::ostringstream os;
  os << "id,fitness,loss,latency_ns,energy_pj,area_units,crossbars\n";
  for (const auto& rec : r.history)
    os << rec.id << ',' << format_double(rec.fitness) << ',' << format_double(r.loss[rec.id]) << ','
       << format_double(r.costs[rec.id].latency_ns) << ',' << format_double(r.costs[rec.id].energy_pj) << ','
       << format_double(r.costs[rec.id].area_units) << ',' << r.costs[rec.id].crossbar_count << '\n';
  return os.str();
}

inline void run_cosearch(const RunConfig& c, const fs::path& out, const fs::path& data, const fs::path& supernet, JsonlLog& log) {
  const Splits s = load_splits(data, c);
  const Supernet net = read_supernet(supernet);
  if (!(net.features() == s.train.spec)) throw InputError("supernet and dataset disagree on features");
  SpaceConfig space = net.config();
  space.codesign = true;
  const Dataset val = head_rows(s.val, c.search.val_rows);
  CosearchConfig cc;
  cc.alpha = c.search.alpha;
  cc.beta = c.search.beta;
  cc.hw = c.hw;
  cc.evolution = c.search.evolution;
  cc.evolution.seed = stage_seed(c, Stage::kCosim);
  cc.evolution.workers = c.workers;
  log.event("cosearch_start", {{"alpha", cc.alpha}, {"beta", cc.beta}});
  auto stream = std::make_shared<HistoryStream>(out / "history.jsonl", 0);
  SearchOptions opt;
  opt.on_record = [stream](const SearchRecord& r) { (*stream)(r); };
  const CosearchResult r = cosearch([&](const Genotype& g) { return quantized_log_loss(net, g, val); }, space, net.features(), cc, opt);
  stream.reset();
  write_text(out / "pareto.csv", pareto_csv(r));
  write_text(out / "cosim.csv", cosim_records_csv(r));
  const SearchRecord& best = best_record(r.history);
  write_text(out / "best.json", serialize(best.genotype));
  write_json(out / "cost.json", {{"cost", to_json(r.costs[best.id])},
                                 {"hw", to_json(cc.hw)},
                                 {"latency_reference_ns", r.latency_reference_ns},
                                 {"record_id", best.id}});
  log.event("cosearch_done", {{"pareto", r.pareto.size()}, {"best_id", best.id}});
}

inline std::string flops_csv(const Genotype& g, const SpaceConfig& space, const FeatureSpec& fs_) {
  std::ostringstream os;
  os << "op,kind,mac_flops,other_flops,total_flops,params\n";
  OpFlops total;
  std::size_t params_total = fs_.total_vocab() * space.dim_s;
  for (const auto& op : plan(g, space, fs_).used_ops()) {
    const OpFlops f = flops(op.spec);
    const std::size_t pc = param_count(op.spec) + norm_param_count(op.spec);
    total += f;
    params_total += pc;
    os << op.prefix.substr(0, op.prefix.empty() ? 0 : op.prefix.size() - 1) << ',' << name_of(op.spec.kind) << ',' << f.mac << ','
       << f.other << ',' << f.total() << ',' << pc << '\n';
  }
  os << "total,,"
     << total.mac << ',' << total.other << ',' << total.total() << ',' << params_total << '\n';
  return os.str();
}

inline FeatureSpec features_from(const RunConfig& c, const std::string& data) {
  if (!data.empty()) {
    require_file(data, "dataset", "synth-data or ingest");
    return read_dataset(data).spec;
  }
  FeatureSpec f;
  f.num_dense = c.data.dense;
  f.vocab.assign(c.data.sparse, std::min(c.data.vocab, c.data.embedding_cap));
  return f;
}

// ---------------------------------------------------------------- pipeline

inline const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> s{"data", "supernet", "search", "select", "report"};
  return s;
}

/// A stage is complete once its marker exists; the marker pins the config.
inline bool stage_done(const fs::path& dir, const std::string& stage, const std::string& digest) {
  const fs::path marker = dir / "done.json";
  if (!fs::exists(marker)) return false;
  const auto j = nlohmann::json::parse(read_file(marker));
  if (j.value("config_sha256", "") != digest)
    throw InputError("stage '" + stage + "' in " + dir.string() + " was produced by a different configuration; use a fresh --out");
  return true;
}

inline void mark_done(const fs::path& dir, const std::string& stage, const std::string& digest) {
  write_json(dir / "done.json", {{"stage", stage}, {"config_sha256", digest}});
}

inline void run_pipeline(const RunConfig& c, const fs::path& out, const std::string& tsv, std::ostream& msg) {
  const std::string digest = config_digest(c);
  echo_config(out, c);
  JsonlLog top_log(out / "log.jsonl");
  auto stage_dir = [&](const std::string& s) {
    const fs::path d = out / s;
    fs::create_directories(d);
    return d;
  };
  auto need = [&](const std::string& stage) {
    if (!fs::exists(out / stage / "done.json")) throw InputError("missing upstream artifact: stage '" + stage + "' is incomplete");
  };
  // Once a stage reruns, later stages are stale even if their markers exist.
  bool upstream_ran = false;
  auto begin = [&](const std::string& stage, const fs::path& d) {
    if (!upstream_ran && stage_done(d, stage, digest)) {
      msg << "[skip] " << stage << " (complete)\n";
      top_log.event("stage_skip", {{"stage", stage}});
      return false;
    }
    upstream_ran = true;
    fs::remove(d / "done.json");
    msg << "[run]  " << stage << "\n" << std::flush;
    top_log.event("stage_start", {{"stage", stage}});
    echo_config(d, c);
    return true;
  };

  const fs::path data = stage_dir("data");
  if (begin("data", data)) {
    JsonlLog log(data / "log.jsonl");
    if (tsv.empty())
      run_synth(c, data, log);
    else
      run_ingest(c, data, tsv, log);
    mark_done(data, "data", digest);
  }

  const fs::path sup = stage_dir("supernet");
  if (begin("supernet", sup)) {
    need("data");
    JsonlLog log(sup / "log.jsonl");
    run_train_supernet(c, sup, data / "dataset.nfds", log);
    mark_done(sup, "supernet", digest);
  }

  const fs::path search = stage_dir("search");
  if (begin("search", search)) {
    need("supernet");
    JsonlLog log(search / "log.jsonl");
    const Splits s = load_splits(data / "dataset.nfds", c);
    const Supernet net = read_supernet(sup / "supernet");
    const Dataset val = head_rows(s.val, c.search.val_rows);
    const Dataset tune = head_rows(s.train, c.ranking.finetune_rows);
    // An interrupted search resumes from its streamed history.
    run_evolve(c, search, make_supernet_fitness(c, net, val, tune), net.config(), true, log);
    mark_done(search, "search", digest);
  }

  const fs::path select = stage_dir("select");
  if (begin("select", select)) {
    need("search");
    JsonlLog log(select / "log.jsonl");
    run_select_top(c, select, search / "history.jsonl", log);
    mark_done(select, "select", digest);
  }

  const fs::path report = stage_dir("report");
  if (begin("report", report)) {
    need("select");
    JsonlLog log(report / "log.jsonl");
    const Splits s = load_splits(data / "dataset.nfds", c);
    run_report(c, report, read_top(select / "top.jsonl"), s, log);
    mark_done(report, "report", digest);
  }
  const auto summary = nlohmann::json::parse(read_file(report / "report.json"));
  msg << "test log loss " << format_double(summary.at("test_log_loss").get<double>()) << " (chance "
      << format_double(summary.at("chance_log_loss").get<double>()) << ")\n";
  top_log.event("pipeline_done", summary);
}

// ---------------------------------------------------------------- front door

struct Common {
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> space;
};

inline void add_common(CLI::App* app, Common& o, bool workers) {
  app->add_option("--out", o.out, "Output directory (created if absent)")->required();
  app->add_option("--config", o.config, "JSON run configuration; flags override it");
  app->add_option("--seed", o.seed, "Master seed; every stage derives its own stream from it");
  app->add_option("--space", o.space, "Search-space preset: full or small");
  if (workers) app->add_option("--workers", o.workers, "Parallel candidate evaluations");
}

inline RunConfig resolve(const Common& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  if (o.space) {
    const auto s = detail::space_preset(*o.space);
    if (!s) throw ConfigError("--space: unknown preset '" + *o.space + "' (full or small)");
    c.space = *s;
    c.space_preset = *o.space;
  }
  return c;
}

template <class T>
void override(std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"nasforge: weight-sharing architecture search for click-through-rate models"};
  app.name("nasforge");
  app.require_subcommand(1);
  app.fallthrough(false);

  // synth-data
  Common synth_o;
  std::optional<std::size_t> rows, dense, sparse, vocab;
  auto* synth = app.add_subcommand("synth-data", "Generate a planted-teacher dataset");
  add_common(synth, synth_o, false);
  synth->add_option("--rows", rows, "Rows to generate");
  synth->add_option("--dense", dense, "Dense features");
  synth->add_option("--sparse", sparse, "Sparse features");
  synth->add_option("--vocab", vocab, "Ids per sparse feature, including the missing id");

  // ingest
  Common ingest_o;
  std::string tsv;
  auto* ingest = app.add_subcommand("ingest", "Read a label/dense/sparse TSV file into the dataset cache format");
  add_common(ingest, ingest_o, false);
  ingest->add_option("--tsv", tsv, "Input TSV path")->required();
  ingest->add_option("--dense", dense, "Dense columns");
  ingest->add_option("--sparse", sparse, "Sparse columns");
  ingest->add_option("--vocab", vocab, "Hash buckets per sparse feature");

  // train-supernet
  Common train_o;
  std::string data;
  std::optional<std::size_t> epochs, max_steps, batch;
  std::optional<double> lr;
  auto* train = app.add_subcommand("train-supernet", "Train the weight-sharing supernet");
  add_common(train, train_o, false);
  train->add_option("--data", data, "dataset.nfds from synth-data or ingest")->required();
  train->add_option("--epochs", epochs, "Training epochs");
  train->add_option("--max-steps", max_steps, "Step cap (0: none)");
  train->add_option("--batch-size", batch, "Minibatch size");
  train->add_option("--lr", lr, "Initial Adagrad learning rate");

  // evolve
  Common evo_o;
  std::string supernet, fitness_kind = "supernet";
  std::optional<std::size_t> population, iters, tournament, children, val_rows;
  bool resume = false, finetune = false;
  auto* evo = app.add_subcommand("evolve", "Regularized evolution over the search space");
  add_common(evo, evo_o, true);
  evo->add_option("--data", data, "dataset.nfds");
  evo->add_option("--supernet", supernet, "Supernet checkpoint stem (without .json)");
  evo->add_option("--fitness", fitness_kind, "supernet (validation log loss) or fc-count (white-box check)")
      ->check(CLI::IsMember({"supernet", "fc-count"}));
  evo->add_option("--population", population, "Population size");
  evo->add_option("--iters", iters, "Iterations");
  evo->add_option("--tournament", tournament, "Tournament size");
  evo->add_option("--children", children, "Children per iteration");
  evo->add_option("--val-rows", val_rows, "Validation rows used for fitness (0: all)");
  evo->add_flag("--finetune", finetune, "Fine-tune the head before scoring each candidate");
  evo->add_flag("--resume", resume, "Continue from history.jsonl in --out");

  // select-top
  Common sel_o;
  std::string history;
  std::optional<std::size_t> k;
  auto* sel = app.add_subcommand("select-top", "Best distinct candidates of a search history");
  add_common(sel, sel_o, false);
  sel->add_option("--history", history, "history.jsonl from evolve")->required();
  sel->add_option("--k", k, "Candidates to keep");

  // rank-eval
  Common rank_o;
  std::optional<std::size_t> subnets;
  std::optional<double> top_fraction;
  auto* rank = app.add_subcommand("rank-eval", "Supernet vs from-scratch ranking correlation");
  add_common(rank, rank_o, true);
  rank->add_option("--data", data, "dataset.nfds")->required();
  rank->add_option("--supernet", supernet, "Supernet checkpoint stem")->required();
  rank->add_option("--subnets", subnets, "Sampled subnets");
  rank->add_option("--top-fraction", top_fraction, "Also report correlations on the best fraction");
  rank->add_flag("--finetune", finetune, "Also score after head fine-tuning");

  // prune
  Common prune_o;
  std::string genotype, variant;
  std::optional<std::size_t> prune_iters;
  auto* prune = app.add_subcommand("prune", "Iterative mask-based or magnitude pruning of one model");
  add_common(prune, prune_o, false);
  prune->add_option("--data", data, "dataset.nfds")->required();
  prune->add_option("--genotype", genotype, "Genotype JSON")->required();
  prune->add_option("--variant", variant, "mask, magnitude or both")->check(CLI::IsMember({"mask", "magnitude", "both"}));
  prune->add_option("--iterations", prune_iters, "Pruning iterations T");

  // cosim
  Common cosim_o;
  std::optional<int> weight_bits, activation_bits;
  std::string hw_path;
  std::optional<double> beta;
  auto* cosim = app.add_subcommand("cosim", "In-memory-computing cost of a genotype, or a cost-aware search");
  add_common(cosim, cosim_o, true);
  cosim->add_option("--genotype", genotype, "Cost one genotype");
  cosim->add_option("--data", data, "dataset.nfds (features; required for search)");
  cosim->add_option("--supernet", supernet, "Supernet checkpoint stem (search mode)");
  cosim->add_option("--hw", hw_path, "Hardware constants JSON");
  cosim->add_option("--beta", beta, "Latency weight of the search fitness");
  cosim->add_option("--weight-bits", weight_bits, "Override every operator's weight bits");
  cosim->add_option("--activation-bits", activation_bits, "Override every operator's activation bits");
  cosim->add_option("--population", population, "Population size");
  cosim->add_option("--iters", iters, "Iterations");
  cosim->add_option("--val-rows", val_rows, "Validation rows used for the loss (0: all)");

  // flops
  Common flops_o;
  auto* flops_cmd = app.add_subcommand("flops", "Per-sample FLOPs and parameters per operator");
  add_common(flops_cmd, flops_o, false);
  flops_cmd->add_option("--genotype", genotype, "Genotype JSON")->required();
  flops_cmd->add_option("--data", data, "dataset.nfds (features; otherwise from the config)");

  // export-dot
  Common dot_o;
  auto* dot = app.add_subcommand("export-dot", "Render a genotype as a Graphviz DOT file");
  add_common(dot, dot_o, false);
  dot->add_option("--genotype", genotype, "Genotype JSON")->required();

  // pipeline
  Common pipe_o;
  auto* pipe = app.add_subcommand("pipeline", "data, supernet, search, select and report; completed stages are skipped");
  add_common(pipe, pipe_o, true);
  pipe->add_option("--tsv", tsv, "Ingest this TSV instead of generating data");
  pipe->add_option("--rows", rows, "Synthetic rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ExtrasError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (app.get_subcommands().empty()) err << app.help();
    return kExitInvalid;
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    const Common& o = cmd == synth ? synth_o
                      : cmd == ingest ? ingest_o
                      : cmd == train  ? train_o
                      : cmd == evo    ? evo_o
                      : cmd == sel    ? sel_o
                      : cmd == rank   ? rank_o
                      : cmd == prune  ? prune_o
                      : cmd == cosim  ? cosim_o
                      : cmd == flops_cmd ? flops_o
                      : cmd == dot    ? dot_o
                                      : pipe_o;
    RunConfig c = resolve(o);
    override(rows, c.data.rows);
    override(dense, c.data.dense);
    override(sparse, c.data.sparse);
    override(vocab, c.data.vocab);
    override(epochs, c.train.epochs);
    override(max_steps, c.train.max_steps);
    override(batch, c.train.batch_size);
    override(lr, c.train.lr0);
    override(population, c.search.evolution.population_size);
    override(iters, c.search.evolution.iterations);
    override(tournament, c.search.evolution.tournament);
    override(children, c.search.evolution.children_per_iter);
    override(val_rows, c.search.val_rows);
    override(k, c.search.top_k);
    override(subnets, c.ranking.n_subnets);
    override(prune_iters, c.pruning.iterations);
    override(beta, c.search.beta);
    if (finetune) (cmd == evo ? c.search.finetune : c.ranking.finetune) = true;
    if (top_fraction) c.ranking.top_fraction = *top_fraction;
    if (!variant.empty() && variant != "both") c.prune_variant = *detail::parse_prune_variant(variant);
    if (!hw_path.empty()) {
      require_file(hw_path, "hardware config", "the user");
      c.hw = hw_from_json(nlohmann::json::parse(read_file(hw_path)));
    }
    if (k && c.search.retrain > c.search.top_k) c.search.retrain = c.search.top_k;
    validate_config(c);

    const fs::path outdir(o.out);
    fs::create_directories(outdir);
    if (cmd == pipe) {
      run_pipeline(c, outdir, tsv, out);
      return kExitOk;
    }
    echo_config(outdir, c);
    JsonlLog log(outdir / "log.jsonl");
    log.event("command", {{"name", cmd->get_name()}});

    if (cmd == synth) {
      run_synth(c, outdir, log);
      out << "wrote " << (outdir / "dataset.nfds").string() << "\n";
    } else if (cmd == ingest) {
      run_ingest(c, outdir, tsv, log);
      out << "wrote " << (outdir / "dataset.nfds").string() << "\n";
    } else if (cmd == train) {
      run_train_supernet(c, outdir, data, log);
      out << "wrote " << (outdir / "supernet.json").string() << "\n";
    } else if (cmd == evo) {
      if (fitness_kind == "fc-count") {
        run_evolve(c, outdir, fc_count_fitness, c.space, resume, log);
      } else {
        if (data.empty() || supernet.empty()) throw InputError("evolve --fitness supernet needs --data and --supernet");
        const Splits s = load_splits(data, c);
        const Supernet net = read_supernet(supernet);
        if (!(net.features() == s.train.spec)) throw InputError("supernet and dataset disagree on features");
        const Dataset val = head_rows(s.val, c.search.val_rows);
        const Dataset tune = head_rows(s.train, c.ranking.finetune_rows);
        run_evolve(c, outdir, make_supernet_fitness(c, net, val, tune), net.config(), resume, log);
      }
      out << "wrote " << (outdir / "history.jsonl").string() << "\n";
    } else if (cmd == sel) {
      run_select_top(c, outdir, history, log);
      out << "wrote " << (outdir / "top.jsonl").string() << "\n";
    } else if (cmd == rank) {
      run_rank_eval(c, outdir, data, supernet, log);
      out << "wrote " << (outdir / "rank_report.json").string() << "\n";
    } else if (cmd == prune) {
      const std::vector<PruneVariant> vs = variant == "both" ? std::vector<PruneVariant>{PruneVariant::kMask, PruneVariant::kMagnitude}
                                                             : std::vector<PruneVariant>{c.prune_variant};
      run_prune(c, outdir, data, genotype, vs, log);
      out << "wrote " << (outdir / "prune.csv").string() << "\n";
    } else if (cmd == cosim) {
      if (!genotype.empty()) {
        const Genotype g = read_genotype_file(genotype);
        SpaceConfig space = c.space;
        space.codesign = true;
        if (const auto e = validate(g, space); !e.empty()) throw InputError(genotype + ": " + e.front());
        write_cost_report(outdir, g, space, features_from(c, data), c.hw, QuantOverride{weight_bits, activation_bits});
        out << "wrote " << (outdir / "cost.json").string() << "\n";
      } else {
        if (data.empty() || supernet.empty()) throw InputError("cosim needs --genotype, or --data and --supernet for a search");
        run_cosearch(c, outdir, data, supernet, log);
        out << "wrote " << (outdir / "pareto.csv").string() << "\n";
      }
    } else if (cmd == flops_cmd) {
      const Genotype g = read_genotype_file(genotype);
      if (const auto e = validate(g, c.space); !e.empty()) throw InputError(genotype + ": " + e.front());
      const FeatureSpec f = features_from(c, data);
      write_text(outdir / "flops.csv", flops_csv(g, c.space, f));
      out << format_double(mflops(g, c.space, f)) << " MFLOPs per sample\n";
    } else if (cmd == dot) {
      const Genotype g = read_genotype_file(genotype);
      const fs::path file = outdir / (fs::path(genotype).stem().string() + ".dot");
      write_text(file, to_dot(g));
      out << "wrote " << file.string() << "\n";
    }
    log.event("done");
    return kExitOk;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const GenotypeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace nasforge::cli
