// mesograph command-line tool: synth, build-graph, train, crossval, predict,
// export-overlay, survival, explain, eval.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mesograph/all.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mesograph;

namespace {

constexpr const char* kToolVersion = "mesograph 1.0.0";

// ---------------------------------------------------------------------------
// Small helpers

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << text;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json load_json_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    json j = json::parse(read_file(path));
    if (!j.is_object()) throw UsageError("config '" + path + "' must be a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known, const std::string& what) {
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw UsageError(what + ": unknown config key '" + k + "'");
  }
}

template <class T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError(std::string("config key '") + key + "' has the wrong type");
  }
}

/// Output directory with one manifest describing how it was produced.
class RunDir {
 public:
  RunDir(std::string command, const std::string& out) : command_(std::move(command)), dir_(out) {
    fs::create_directories(dir_);
  }
  const fs::path& path() const { return dir_; }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

  void input(const std::string& path) {
    if (path.empty()) return;
    inputs_[path] = fnv1a_hex(read_file(path));
  }
  void config(json c) { config_ = std::move(c); }
  void seed(std::uint64_t s) { seed_ = s; }
  void output(const std::string& name) { outputs_.push_back(name); }

  void write_manifest() const {
    json m;
    m["command"] = command_;
    m["tool_version"] = kToolVersion;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    m["timestamp"] = ts;
    m["seed"] = seed_;
    m["config"] = config_;
    json in = json::object();
    for (const auto& [p, h] : inputs_) in[p] = {{"fnv1a64", h}};
    m["inputs"] = in;
    m["outputs"] = outputs_;
    write_file(dir_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string command_;
  fs::path dir_;
  std::map<std::string, std::string> inputs_;
  json config_ = json::object();
  std::uint64_t seed_ = 0;
  std::vector<std::string> outputs_;
};

struct DataPaths {
  std::string cells, bags;
};

DataPaths data_paths(const std::string& dir) {
  DataPaths p{(fs::path(dir) / "cells.csv").string(), (fs::path(dir) / "bags.csv").string()};
  if (!fs::exists(p.cells) || !fs::exists(p.bags)) {
    throw DataError("data directory '" + dir + "' must contain cells.csv and bags.csv");
  }
  return p;
}

std::string fmt(double v) { return csv::format_double(v); }

// ---------------------------------------------------------------------------
// Configs

SynthConfig synth_config_from(const json& j) {
  reject_unknown_keys(j,
                      {"n_bags", "n_slides", "cells_per_bag", "d0", "subtype_mix", "biphasic_frac_range", "blob_count",
                       "noise_sd", "signal", "blob_sd_um", "disc_radius_um", "base_survival_days",
                       "sarcomatoid_hazard_ratio", "censor_days_range", "seed"},
                      "synth");
  SynthConfig c;
  take(j, "n_bags", c.n_bags);
  take(j, "n_slides", c.n_slides);
  take(j, "d0", c.d0);
  take(j, "noise_sd", c.noise_sd);
  take(j, "signal", c.signal);
  take(j, "blob_sd_um", c.blob_sd_um);
  take(j, "disc_radius_um", c.disc_radius_um);
  take(j, "base_survival_days", c.base_survival_days);
  take(j, "sarcomatoid_hazard_ratio", c.sarcomatoid_hazard_ratio);
  take(j, "seed", c.seed);
  std::array<std::size_t, 2> cells{c.cells_min, c.cells_max}, blobs{c.blobs_min, c.blobs_max};
  std::array<double, 2> frac{c.biphasic_frac_lo, c.biphasic_frac_hi}, censor{c.censor_min_days, c.censor_max_days};
  take(j, "cells_per_bag", cells);
  take(j, "blob_count", blobs);
  take(j, "biphasic_frac_range", frac);
  take(j, "censor_days_range", censor);
  take(j, "subtype_mix", c.subtype_mix);
  std::tie(c.cells_min, c.cells_max) = std::pair(cells[0], cells[1]);
  std::tie(c.blobs_min, c.blobs_max) = std::pair(blobs[0], blobs[1]);
  std::tie(c.biphasic_frac_lo, c.biphasic_frac_hi) = std::pair(frac[0], frac[1]);
  std::tie(c.censor_min_days, c.censor_max_days) = std::pair(censor[0], censor[1]);
  c.validate();
  return c;
}

json synth_config_json(const SynthConfig& c) {
  return {{"n_bags", c.n_bags},
          {"n_slides", c.n_slides},
          {"cells_per_bag", {c.cells_min, c.cells_max}},
          {"d0", c.d0},
          {"subtype_mix", c.subtype_mix},
          {"biphasic_frac_range", {c.biphasic_frac_lo, c.biphasic_frac_hi}},
          {"blob_count", {c.blobs_min, c.blobs_max}},
          {"noise_sd", c.noise_sd},
          {"signal", c.signal},
          {"blob_sd_um", c.blob_sd_um},
          {"disc_radius_um", c.disc_radius_um},
          {"base_survival_days", c.base_survival_days},
          {"sarcomatoid_hazard_ratio", c.sarcomatoid_hazard_ratio},
          {"censor_days_range", {c.censor_min_days, c.censor_max_days}},
          {"seed", c.seed}};
}

TrainConfig train_config_from(const json& j) {
  reject_unknown_keys(j,
                      {"max_epochs", "cycle_len_epochs", "lr_min", "lr_max0", "lr_decay", "batch_bags",
                       "patience_epochs", "seed", "val_fraction", "radius_um", "width", "num_layers", "hidden"},
                      "train");
  TrainConfig c;
  take(j, "max_epochs", c.max_epochs);
  take(j, "cycle_len_epochs", c.cycle_len_epochs);
  take(j, "lr_min", c.lr_min);
  take(j, "lr_max0", c.lr_max0);
  take(j, "lr_decay", c.lr_decay);
  take(j, "batch_bags", c.batch_bags);
  take(j, "patience_epochs", c.patience_epochs);
  take(j, "seed", c.seed);
  take(j, "val_fraction", c.val_fraction);
  take(j, "radius_um", c.radius_um);
  take(j, "width", c.arch.width);
  take(j, "num_layers", c.arch.num_layers);
  take(j, "hidden", c.arch.hidden);
  c.validate();
  if (!(c.radius_um > 0.0)) throw UsageError("train: radius_um must be positive");
  return c;
}

// ---------------------------------------------------------------------------
// Tables

void write_history(const std::vector<HistoryRow>& h, const fs::path& path) {
  csv::Writer w({"epoch", "lr", "train_loss", "val_loss"});
  for (const auto& r : h) w.add_row({std::to_string(r.epoch), fmt(r.lr), fmt(r.train_loss), fmt(r.val_loss)});
  w.save(path.string());
}

void check_unit_interval(const ScoreSet& s, const std::string& bag_id) {
  for (std::size_t i = 0; i < s.z_s.size(); ++i) {
    if (!(s.z_s[i] > 0.0 && s.z_s[i] < 1.0) || !(s.z_e[i] > 0.0 && s.z_e[i] < 1.0)) {
      throw NumericalError("bag '" + bag_id + "': cell score outside (0,1) at node " + std::to_string(i));
    }
  }
}

void write_cell_scores(const Dataset& ds, std::span<const ScoreSet> scores, std::span<const std::size_t> bag_index,
                       const fs::path& path) {
  csv::Writer w({"bag_id", "cell_id", "x_um", "y_um", "z_s", "z_e", "score"});
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const Bag& b = ds.bags[bag_index[k]];
    check_unit_interval(scores[k], b.meta.bag_id);
    for (std::size_t i = 0; i < b.cells.size(); ++i) {
      const auto& c = b.cells[i];
      w.add_row({b.meta.bag_id, std::to_string(c.cell_id), fmt(c.x_um), fmt(c.y_um), fmt(scores[k].z_s[i]),
                 fmt(scores[k].z_e[i]), fmt(scores[k].z_s[i] - scores[k].z_e[i])});
    }
  }
  w.save(path.string());
}

void write_bag_scores(const Dataset& ds, std::span<const ScoreSet> scores, std::span<const std::size_t> bag_index,
                      const fs::path& path, const std::vector<std::string>* folds = nullptr) {
  std::vector<std::string> header{"bag_id", "subtype", "Z_s", "Z_e", "Z"};
  if (folds) header.push_back("fold_slide");
  csv::Writer w(header);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const Bag& b = ds.bags[bag_index[k]];
    std::vector<std::string> row{b.meta.bag_id, subtype_code(b.meta.subtype), fmt(scores[k].Z_s), fmt(scores[k].Z_e),
                                 fmt(scores[k].Z)};
    if (folds) row.push_back((*folds)[k]);
    w.add_row(row);
  }
  w.save(path.string());
}

struct BagScoreTable {
  std::vector<std::string> bag_ids;
  std::vector<double> Z;
};

BagScoreTable read_bag_scores(const std::string& path) {
  const csv::Table t = csv::read(path);
  const auto id = t.column("bag_id");
  const auto z = t.column("Z");
  if (!id || !z) throw DataError(path + ": needs bag_id and Z columns");
  BagScoreTable out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out.bag_ids.push_back(t.rows[r][*id]);
    out.Z.push_back(csv::parse_double(t.rows[r][*z], path + " line " + std::to_string(t.line_numbers[r])));
  }
  return out;
}

// Bag metadata aligned to a score table; every scored bag must be known.
std::vector<BagMeta> align_meta(const BagScoreTable& scores, const std::string& bags_path) {
  const auto metas = read_bag_table(bags_path);
  std::map<std::string, const BagMeta*> by_id;
  for (const auto& m : metas) by_id[m.bag_id] = &m;
  std::vector<BagMeta> out;
  for (const auto& id : scores.bag_ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("scored bag '" + id + "' is missing from " + bags_path);
    out.push_back(*it->second);
  }
  return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Graphs for a dataset normalised with the checkpoint's statistics.
std::vector<PreparedBag> prepare_for_model(const Dataset& raw, const Checkpoint& ck, std::size_t threads) {
  if (raw.d0 != ck.params.arch.d0) {
    throw DataError("data has " + std::to_string(raw.d0) + " features, model expects " +
                    std::to_string(ck.params.arch.d0));
  }
  const Dataset ds = ck.norm ? zscore_apply(raw, *ck.norm) : raw;
  std::vector<PreparedBag> out(ds.bags.size());
  parallel_for(ds.bags.size(), threads, [&](std::size_t i) { out[i] = prepare(build_radius_graph(ds.bags[i], ck.radius_um)); });
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Common {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t threads = 0;
};

void cmd_synth(const std::string& config_path, const std::string& out, const Common& common) {
  json cfg_json = load_json_config(config_path);
  SynthConfig cfg = synth_config_from(cfg_json);
  if (common.seed_set) cfg.seed = common.seed;
  RunDir run("synth", out);
  run.input(config_path);
  run.config(synth_config_json(cfg));
  run.seed(cfg.seed);
  const Dataset ds = generate(cfg);
  write_cell_table(ds, (run / "cells.csv").string());
  write_bag_table(ds.bags, (run / "bags.csv").string());
  run.output("cells.csv");
  run.output("bags.csv");
  run.write_manifest();
  std::cout << "synth: " << ds.bags.size() << " bags, " << ds.cell_count() << " cells -> " << out << "\n";
}

void cmd_build_graph(const std::string& cells, const std::string& bags, double radius, const std::string& out,
                     const Common& common) {
  if (!(radius > 0.0)) throw UsageError("build-graph: --radius must be positive");
  const Dataset ds = ingest(cells, bags);
  RunDir run("build-graph", out);
  run.input(cells);
  run.input(bags);
  run.config({{"radius_um", radius}});
  const auto graphs = build_graphs(ds, radius, common.threads);
  csv::Writer summary({"bag_id", "nodes", "edges", "degree_min", "degree_mean", "degree_max"});
  std::ofstream edges(run / "edges.csv", std::ios::binary);
  if (!edges) throw DataError("cannot write edges.csv");
  edges << "bag_id,i,j\n";
  for (const auto& g : graphs) {
    const auto d = degree_stats(g);
    summary.add_row({g.bag.bag_id, std::to_string(g.n), std::to_string(g.edges.size()), fmt(d.min), fmt(d.mean),
                     fmt(d.max)});
    for (const auto& [i, j] : g.edges) edges << csv::quote(g.bag.bag_id) << ',' << i << ',' << j << '\n';
    std::cout << g.bag.bag_id << ": " << g.n << " nodes, " << g.edges.size() << " edges\n";
  }
  summary.save((run / "graph_summary.csv").string());
  run.output("graph_summary.csv");
  run.output("edges.csv");
  run.write_manifest();
}

void cmd_train(const std::string& data, const std::string& config_path, const std::string& out,
               const std::string& resume, std::size_t stop_after, const Common& common) {
  const DataPaths dp = data_paths(data);
  RunDir run("train", out);
  run.input(dp.cells);
  run.input(dp.bags);
  run.input(config_path);
  run.input(resume);

  const Dataset raw = ingest(dp.cells, dp.bags);
  TrainConfig cfg;
  std::optional<Checkpoint> resumed;
  if (!resume.empty()) {
    resumed = load_checkpoint(resume);
    if (!resumed->state) throw DataError("checkpoint '" + resume + "' has no training state to resume");
    cfg = resumed->config;
    if (!config_path.empty()) {
      // Allow extending the epoch budget; everything else must come from the checkpoint.
      const json j = load_json_config(config_path);
      const TrainConfig given = train_config_from(j);
      cfg.max_epochs = given.max_epochs;
    }
  } else {
    cfg = train_config_from(load_json_config(config_path));
    if (common.seed_set) cfg.seed = common.seed;
  }
  cfg.threads = common.threads;
  cfg.arch.d0 = raw.d0;
  run.config(detail::config_json(cfg));
  run.seed(cfg.seed);

  const auto [tr, va] = split_by_patient(raw, iota_n(raw.bags.size()), cfg.val_fraction, cfg.seed + 1000003ULL);
  std::vector<Bag> train_only;
  for (std::size_t i : tr) train_only.push_back(raw.bags[i]);
  const NormStats norm = zscore_fit(train_only);
  if (resumed && resumed->norm && !(*resumed->norm == norm)) {
    throw DataError("resume: training data differs from the data the checkpoint was trained on");
  }
  const Dataset ds = zscore_apply(raw, norm);
  const auto graphs = build_graphs(ds, cfg.radius_um, cfg.threads);
  std::vector<PreparedBag> train_set, val_set;
  for (std::size_t i : tr) train_set.push_back(prepare(graphs[i]));
  for (std::size_t i : va) val_set.push_back(prepare(graphs[i]));

  TrainState state = resumed ? *resumed->state : initial_state(cfg, raw.d0);
  if (resumed && cfg.max_epochs > state.next_epoch && state.finished &&
      state.next_epoch - state.best_epoch < cfg.patience_epochs) {
    state.finished = false;  // stopped by the epoch budget only
  }
  train_from(state, train_set, val_set, cfg, stop_after);

  Checkpoint best{state.best_params, norm, cfg.radius_um, cfg, std::nullopt};
  save_checkpoint(best, (run / "model.json").string());
  Checkpoint resumable{state.params, norm, cfg.radius_um, cfg, state};
  save_checkpoint(resumable, (run / "state.json").string());
  write_history(state.history, run / "history.csv");
  {
    csv::Writer w({"bag_id", "role"});
    for (std::size_t i : tr) w.add_row({raw.bags[i].meta.bag_id, "train"});
    for (std::size_t i : va) w.add_row({raw.bags[i].meta.bag_id, "val"});
    w.save((run / "split.csv").string());
  }
  for (const auto& w : state.warnings) std::cerr << "warning: " << w << "\n";
  run.output("model.json");
  run.output("state.json");
  run.output("history.csv");
  run.output("split.csv");
  run.write_manifest();
  std::cout << "train: " << state.history.size() << " epochs, best epoch " << state.best_epoch << ", best val loss "
            << fmt(state.best_monitor) << (state.finished ? "" : " (paused)") << "\n";
}

void cmd_crossval(const std::string& data, const std::string& config_path, const std::string& out,
                  const Common& common) {
  const DataPaths dp = data_paths(data);
  RunDir run("crossval", out);
  run.input(dp.cells);
  run.input(dp.bags);
  run.input(config_path);
  const Dataset raw = ingest(dp.cells, dp.bags);
  TrainConfig cfg = train_config_from(load_json_config(config_path));
  if (common.seed_set) cfg.seed = common.seed;
  cfg.threads = common.threads;
  run.config(detail::config_json(cfg));
  run.seed(cfg.seed);

  const CrossValResult cv = cross_validate(raw, cfg);
  csv::Writer folds({"test_slide", "skipped", "train_bags", "val_bags", "test_bags", "best_epoch", "epochs_run",
                     "auroc", "ap", "threshold", "sensitivity", "specificity", "train_checksum"});
  for (const auto& f : cv.folds) {
    char ck[17];
    std::snprintf(ck, sizeof ck, "%016llx", static_cast<unsigned long long>(f.train_checksum));
    folds.add_row({f.test_slide, f.skipped ? "1" : "0", std::to_string(f.train_bags.size()),
                   std::to_string(f.val_bags.size()), std::to_string(f.test_bags.size()), std::to_string(f.best_epoch),
                   std::to_string(f.epochs_run), fmt(f.auroc), fmt(f.ap), fmt(f.op.threshold), fmt(f.op.sensitivity),
                   fmt(f.op.specificity), ck});
    if (f.skipped) std::cerr << "warning: fold " << f.test_slide << " skipped: " << f.skip_reason << "\n";
    for (const auto& w : f.warnings) std::cerr << "warning: fold " << f.test_slide << ": " << w << "\n";
  }
  folds.save((run / "folds.csv").string());

  std::vector<ScoreSet> scores;
  std::vector<std::size_t> idx;
  std::vector<std::string> fold_of;
  for (const auto& p : cv.predictions) {
    scores.push_back(p.scores);
    idx.push_back(p.bag_index);
    fold_of.push_back(p.fold_slide);
  }
  write_bag_scores(raw, scores, idx, run / "bag_scores.csv", &fold_of);
  write_cell_scores(raw, scores, idx, run / "cell_scores.csv");
  auto ms = [](const MeanStd& m) { return json{{"mean", detail::num(m.mean)}, {"std", detail::num(m.std)}, {"folds", m.count}}; };
  json summary = {{"auroc", ms(cv.auroc)}, {"ap", ms(cv.ap)}, {"sensitivity", ms(cv.sensitivity)},
                  {"specificity", ms(cv.specificity)}};
  write_file(run / "summary.json", summary.dump(2) + "\n");
  for (const char* o : {"folds.csv", "bag_scores.csv", "cell_scores.csv", "summary.json"}) run.output(o);
  run.write_manifest();
  std::cout << "crossval: AUROC " << fmt(cv.auroc.mean) << " ± " << fmt(cv.auroc.std) << ", AP " << fmt(cv.ap.mean)
            << " ± " << fmt(cv.ap.std) << "\n";
}

void cmd_predict(const std::string& model, const std::string& data, const std::string& out, const Common& common) {
  const DataPaths dp = data_paths(data);
  RunDir run("predict", out);
  run.input(model);
  run.input(dp.cells);
  run.input(dp.bags);
  const Checkpoint ck = load_checkpoint(model);
  const Dataset raw = ingest(dp.cells, dp.bags);
  run.config({{"radius_um", ck.radius_um}});
  run.seed(ck.config.seed);
  const auto bags = prepare_for_model(raw, ck, common.threads);
  const auto scores = score_all(ck.params, bags, common.threads);
  const auto idx = iota_n(raw.bags.size());
  write_cell_scores(raw, scores, idx, run / "cell_scores.csv");
  write_bag_scores(raw, scores, idx, run / "bag_scores.csv");
  run.output("cell_scores.csv");
  run.output("bag_scores.csv");
  run.write_manifest();
  std::cout << "predict: scored " << raw.bags.size() << " bags, " << raw.cell_count() << " cells\n";
}

void cmd_export_overlay(const std::string& scores_path, const std::string& out) {
  RunDir run("export-overlay", out);
  run.input(scores_path);
  const csv::Table t = csv::read(scores_path);
  std::vector<std::optional<std::size_t>> cols;
  for (const char* name : {"bag_id", "cell_id", "x_um", "y_um", "z_s", "z_e"}) {
    cols.push_back(t.column(name));
    if (!cols.back()) throw DataError(scores_path + ": missing column '" + name + "'");
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<CellScoreRow>> by_bag;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = scores_path + " line " + std::to_string(t.line_numbers[r]);
    CellScoreRow c;
    c.bag_id = row[*cols[0]];
    c.cell_id = csv::parse_int(row[*cols[1]], where);
    c.x_um = csv::parse_double(row[*cols[2]], where);
    c.y_um = csv::parse_double(row[*cols[3]], where);
    c.z_s = csv::parse_double(row[*cols[4]], where);
    c.z_e = csv::parse_double(row[*cols[5]], where);
    if (!by_bag.count(c.bag_id)) order.push_back(c.bag_id);
    by_bag[c.bag_id].push_back(std::move(c));
  }
  fs::create_directories(run / "geojson");
  fs::create_directories(run / "mesogram");
  csv::Writer summary({"bag_id", "cells", "local_maxima"});
  for (const auto& id : order) {
    const auto& cells = by_bag[id];
    write_file(run / "geojson" / (id + ".geojson"), geojson_overlay(cells).dump() + "\n");
    std::vector<double> s;
    for (const auto& c : cells) s.push_back(c.score());
    const MesoGram m = mesogram(id, s);
    write_file(run / "mesogram" / (id + ".json"), to_json(m).dump(1) + "\n");
    summary.add_row({id, std::to_string(m.cells), std::to_string(m.peaks)});
  }
  summary.save((run / "mesogram_summary.csv").string());
  run.output("geojson/");
  run.output("mesogram/");
  run.output("mesogram_summary.csv");
  run.write_manifest();
  std::cout << "export-overlay: " << order.size() << " bags\n";
}

void cmd_survival(const std::string& scores_path, const std::string& bags_path, double censor_days,
                  const std::string& out) {
  RunDir run("survival", out);
  run.input(scores_path);
  run.input(bags_path);
  run.config({{"censor_days", censor_days > 0 ? json(censor_days) : json(nullptr)}});
  const BagScoreTable scores = read_bag_scores(scores_path);
  const auto metas = align_meta(scores, bags_path);
  auto records = survival_records(metas, scores.Z);
  if (records.size() < 2) throw DataError("survival: fewer than 2 patients with survival data");
  if (censor_days > 0) records = censor_at(std::move(records), censor_days);

  {
    csv::Writer w({"patient_id", "score", "group", "time_days", "event", "sex", "age"});
    for (const auto& r : records)
      w.add_row({r.patient_id, fmt(r.score), risk_group_name(r.group), fmt(r.time_days), r.event ? "1" : "0",
                 fmt(r.sex), fmt(r.age)});
    w.save((run / "groups.csv").string());
  }
  csv::Writer km({"group", "time", "survival", "at_risk", "events", "censored"});
  json result;
  for (RiskGroup g : {RiskGroup::High, RiskGroup::Low}) {
    std::vector<SurvivalRecord> sub;
    for (const auto& r : records)
      if (r.group == g) sub.push_back(r);
    if (sub.empty()) continue;
    const KMCurve c = kaplan_meier(sub);
    for (const auto& s : c.steps)
      km.add_row({risk_group_name(g), fmt(s.time), fmt(s.survival), std::to_string(s.at_risk),
                  std::to_string(s.events), std::to_string(s.censored)});
    result["median_survival_days"][risk_group_name(g)] = c.median ? json(*c.median) : json(nullptr);
  }
  km.save((run / "km.csv").string());

  const LogRankResult lr = log_rank(records);
  result["log_rank"] = {{"chi2", lr.chi2},
                        {"p_value", lr.p_value},
                        {"observed_high", lr.observed_high},
                        {"expected_high", lr.expected_high},
                        {"observed_low", lr.observed_low},
                        {"expected_low", lr.expected_low}};

  bool have_age = true;
  for (const auto& r : records) have_age = have_age && std::isfinite(r.age);
  std::vector<std::string> names{"group_high", "sex_male", "age"};
  Eigen::MatrixXd X = group_sex_age(records);
  if (!have_age) {
    names.pop_back();
    X.conservativeResize(Eigen::NoChange, 2);
  }
  try {
    const CoxFit fit = cox_ph(records, X, names);
    json cov = json::array();
    for (std::size_t k = 0; k < fit.names.size(); ++k) {
      cov.push_back({{"name", fit.names[k]},
                     {"beta", fit.beta[k]},
                     {"se", fit.se[k]},
                     {"hr", fit.hr[k]},
                     {"ci95", {fit.ci_low[k], fit.ci_high[k]}},
                     {"p_value", fit.p_value[k]}});
    }
    result["cox"] = {{"covariates", cov},
                     {"loglik", fit.loglik},
                     {"loglik_null", fit.loglik_null},
                     {"iterations", fit.iterations},
                     {"ties", "efron"}};
  } catch (const NumericalError& e) {
    result["cox"] = {{"error", e.what()}};
    std::cerr << "warning: " << e.what() << "\n";
  } catch (const UsageError& e) {  // constant or collinear covariates in this cohort
    result["cox"] = {{"error", e.what()}};
    std::cerr << "warning: " << e.what() << "\n";
  }
  result["patients"] = records.size();
  write_file(run / "survival.json", result.dump(2) + "\n");
  for (const char* o : {"groups.csv", "km.csv", "survival.json"}) run.output(o);
  run.write_manifest();
  std::cout << "survival: log-rank chi2 " << fmt(lr.chi2) << ", p " << fmt(lr.p_value) << "\n";
}

void cmd_explain(const std::string& model, const std::string& data, const std::string& out, ExplainConfig cfg,
                 const Common& common) {
  const DataPaths dp = data_paths(data);
  RunDir run("explain", out);
  run.input(model);
  run.input(dp.cells);
  run.input(dp.bags);
  if (common.seed_set) cfg.seed = common.seed;
  cfg.validate();
  run.config({{"lambda_size", cfg.lambda_size}, {"lambda_ent", cfg.lambda_ent}, {"steps", cfg.steps}, {"lr", cfg.lr}});
  run.seed(cfg.seed);
  const Checkpoint ck = load_checkpoint(model);
  const Dataset raw = ingest(dp.cells, dp.bags);
  const auto bags = prepare_for_model(raw, ck, common.threads);
  std::vector<CellGraph> graphs;
  for (const auto& b : bags) graphs.push_back(b.graph);
  const auto items = learn_feature_masks(graphs, ck.params, cfg, common.threads);

  std::vector<std::string> header{"bag_id", "subtype"};
  for (std::size_t j = 0; j < raw.d0; ++j) header.push_back("f" + std::to_string(j));
  header.push_back("fidelity_gap");
  header.push_back("zero_mask_gap");
  csv::Writer masks(header);
  for (const auto& it : items) {
    std::vector<std::string> row{it.bag_id, subtype_code(it.subtype)};
    for (double m : it.mask) row.push_back(fmt(m));
    row.push_back(fmt(it.fidelity_gap));
    row.push_back(fmt(it.zero_mask_gap));
    masks.add_row(row);
  }
  masks.save((run / "masks.csv").string());

  const ImportanceSummary s = aggregate_importance(items);
  csv::Writer q({"subtype", "feature", "count", "whisker_low", "q25", "median", "q75", "whisker_high", "mean"});
  for (const auto& [subtype, stats] : s.by_subtype)
    for (std::size_t j = 0; j < stats.size(); ++j) {
      const auto& b = stats[j];
      q.add_row({subtype_code(subtype), "f" + std::to_string(j), std::to_string(b.count), fmt(b.whisker_low),
                 fmt(b.q25), fmt(b.median), fmt(b.q75), fmt(b.whisker_high), fmt(b.mean)});
    }
  q.save((run / "quartiles.csv").string());
  csv::Writer top({"rank", "feature", "mean_mask"});
  for (std::size_t r = 0; r < s.top.size(); ++r)
    top.add_row({std::to_string(r + 1), "f" + std::to_string(s.top[r]), fmt(s.overall_mean[s.top[r]])});
  top.save((run / "top_features.csv").string());
  for (const char* o : {"masks.csv", "quartiles.csv", "top_features.csv"}) run.output(o);
  run.write_manifest();
  std::cout << "explain: " << items.size() << " bags; top feature f" << s.top.front() << "\n";
}

void cmd_eval(const std::string& scores_path, const std::string& bags_path, std::optional<double> threshold,
              const std::string& out) {
  RunDir run("eval", out);
  run.input(scores_path);
  run.input(bags_path);
  const BagScoreTable scores = read_bag_scores(scores_path);
  const auto metas = align_meta(scores, bags_path);
  std::vector<EvalRecord> recs;
  for (std::size_t i = 0; i < metas.size(); ++i) recs.push_back({metas[i].bag_id, scores.Z[i], is_positive(metas[i].subtype)});
  if (!both_classes(recs)) throw DataError("eval: scores cover a single class; metrics undefined");
  const OperatingPoint op = threshold ? sens_spec_at(recs, *threshold) : operating_point(recs);
  json m = {{"bags", recs.size()},
            {"auroc", auroc(recs)},
            {"ap", average_precision(recs)},
            {"threshold", detail::num(op.threshold)},
            {"threshold_source", threshold ? "given" : "youden"},
            {"sensitivity", op.sensitivity},
            {"specificity", op.specificity}};
  run.config({{"threshold", threshold ? json(*threshold) : json(nullptr)}});
  write_file(run / "metrics.json", m.dump(2) + "\n");
  run.output("metrics.json");
  run.write_manifest();
  std::cout << "eval: AUROC " << fmt(m["auroc"].get<double>()) << ", AP " << fmt(m["ap"].get<double>()) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell-graph subtype scoring for tissue micro-array cores"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--threads", common.threads, "Worker threads (0 = all cores)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s; common.seed_set = true; }, "Random seed");
  };

  std::string config, out, data, cells, bags, model, scores, resume;
  double radius = kDefaultRadiusUm;
  double censor_days = 0.0;
  std::size_t stop_after = std::numeric_limits<std::size_t>::max();
  std::optional<double> threshold;
  ExplainConfig ecfg;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", config, "JSON config (defaults if omitted)");
  synth->add_option("--out", out, "Output directory")->required();
  add_common(synth);

  auto* graph = app.add_subcommand("build-graph", "Build radius graphs and report edge counts");
  graph->add_option("--cells", cells, "Cell table")->required();
  graph->add_option("--bags", bags, "Bag table")->required();
  graph->add_option("--radius", radius, "Neighbour radius in µm")->capture_default_str();
  graph->add_option("--out", out, "Output directory")->required();
  add_common(graph);

  auto* train = app.add_subcommand("train", "Train on a data directory (75/25 patient split)");
  train->add_option("--data", data, "Directory with cells.csv and bags.csv")->required();
  train->add_option("--config", config, "JSON training config");
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--resume", resume, "Resume from a state.json checkpoint");
  train->add_option("--stop-after-epoch", stop_after, "Pause before this epoch (resumable)");
  add_common(train);

  auto* crossval = app.add_subcommand("crossval", "Hold-one-slide-out cross-validation");
  crossval->add_option("--data", data, "Directory with cells.csv and bags.csv")->required();
  crossval->add_option("--config", config, "JSON training config");
  crossval->add_option("--out", out, "Output directory")->required();
  add_common(crossval);

  auto* predict = app.add_subcommand("predict", "Score every cell and bag");
  predict->add_option("--model", model, "Model checkpoint")->required();
  predict->add_option("--data", data, "Directory with cells.csv and bags.csv")->required();
  predict->add_option("--out", out, "Output directory")->required();
  add_common(predict);

  auto* overlay = app.add_subcommand("export-overlay", "GeoJSON overlays and MesoGrams from cell scores");
  overlay->add_option("--scores", scores, "cell_scores.csv")->required();
  overlay->add_option("--out", out, "Output directory")->required();
  add_common(overlay);

  auto* surv = app.add_subcommand("survival", "Kaplan-Meier, log-rank and Cox by score group");
  surv->add_option("--scores", scores, "bag_scores.csv")->required();
  surv->add_option("--bags", bags, "Bag table with survival columns")->required();
  surv->add_option("--censor-days", censor_days, "Administrative censoring horizon");
  surv->add_option("--out", out, "Output directory")->required();
  add_common(surv);

  auto* expl = app.add_subcommand("explain", "Learn per-bag feature masks");
  expl->add_option("--model", model, "Model checkpoint")->required();
  expl->add_option("--data", data, "Directory with cells.csv and bags.csv")->required();
  expl->add_option("--out", out, "Output directory")->required();
  expl->add_option("--lambda-size", ecfg.lambda_size, "Mask size penalty")->capture_default_str();
  expl->add_option("--lambda-ent", ecfg.lambda_ent, "Mask entropy penalty")->capture_default_str();
  expl->add_option("--steps", ecfg.steps, "Optimisation steps")->capture_default_str();
  expl->add_option("--lr", ecfg.lr, "Adam learning rate")->capture_default_str();
  add_common(expl);

  auto* ev = app.add_subcommand("eval", "Bag-level AUROC, AP, sensitivity and specificity");
  ev->add_option("--scores", scores, "bag_scores.csv")->required();
  ev->add_option("--bags", bags, "Bag table")->required();
  ev->add_option("--threshold", threshold, "Fixed threshold (default: Youden-optimal)");
  ev->add_option("--out", out, "Output directory")->required();
  add_common(ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*synth) cmd_synth(config, out, common);
    else if (*graph) cmd_build_graph(cells, bags, radius, out, common);
    else if (*train) cmd_train(data, config, out, resume, stop_after, common);
    else if (*crossval) cmd_crossval(data, config, out, common);
    else if (*predict) cmd_predict(model, data, out, common);
    else if (*overlay) cmd_export_overlay(scores, out);
    else if (*surv) cmd_survival(scores, bags, censor_days, out);
    else if (*expl) cmd_explain(model, data, out, ecfg, common);
    else if (*ev) cmd_eval(scores, bags, threshold, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
