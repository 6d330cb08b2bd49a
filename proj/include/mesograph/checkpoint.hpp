#pragma once

// Versioned JSON checkpoints: model weights, the feature normalisation the
// model expects, the graph radius, the training config, and optionally the
// full optimiser state so a run can be resumed.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mesograph/data_model.hpp"
#include "mesograph/errors.hpp"
#include "mesograph/mesograph_net.hpp"
#include "mesograph/training.hpp"

namespace mesograph {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "mesograph-checkpoint";

struct Checkpoint {
  MesoGraphParams params;
  std::optional<NormStats> norm;
  double radius_um = kDefaultRadiusUm;
  TrainConfig config;
  std::optional<TrainState> state;  // present for resumable training checkpoints
};

namespace detail {

using json = nlohmann::ordered_json;

// JSON has no infinities; they travel as strings.
inline json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline double num(const json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  throw DataError("checkpoint: bad number '" + s + "'");
}

inline json arch_json(const Architecture& a) {
  return {{"d0", a.d0}, {"width", a.width}, {"num_layers", a.num_layers}, {"hidden", a.hidden}};
}

inline Architecture arch_from(const json& j) {
  Architecture a;
  a.d0 = j.at("d0").get<std::size_t>();
  a.width = j.at("width").get<std::size_t>();
  a.num_layers = j.at("num_layers").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::size_t>();
  return a;
}

inline json params_json(const MesoGraphParams& p) {
  json j = json::object();
  for_each_array(p, [&](const std::string& name, const Matrix& m) {
    j[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
  });
  return j;
}

inline MesoGraphParams params_from(const json& j, const Architecture& a) {
  MesoGraphParams p = zero_params(a);
  for_each_array(p, [&](const std::string& name, Matrix& m) {
    if (!j.contains(name)) throw DataError("checkpoint: missing array '" + name + "'");
    const json& e = j.at(name);
    if (e.at("rows").get<std::size_t>() != m.rows() || e.at("cols").get<std::size_t>() != m.cols()) {
      throw DataError("checkpoint: array '" + name + "' has the wrong shape");
    }
    std::vector<double> data = e.at("data").get<std::vector<double>>();
    if (data.size() != m.size()) throw DataError("checkpoint: array '" + name + "' has the wrong length");
    m.values() = std::move(data);
  });
  return p;
}

inline json config_json(const TrainConfig& c) {
  return {{"max_epochs", c.max_epochs},       {"cycle_len_epochs", c.cycle_len_epochs},
          {"lr_min", c.lr_min},               {"lr_max0", c.lr_max0},
          {"lr_decay", c.lr_decay},           {"batch_bags", c.batch_bags},
          {"patience_epochs", c.patience_epochs}, {"seed", c.seed},
          {"val_fraction", c.val_fraction},   {"radius_um", c.radius_um},
          {"arch", arch_json(c.arch)}};
}

inline TrainConfig config_from(const json& j) {
  TrainConfig c;
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.cycle_len_epochs = j.at("cycle_len_epochs").get<std::size_t>();
  c.lr_min = j.at("lr_min").get<double>();
  c.lr_max0 = j.at("lr_max0").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.batch_bags = j.at("batch_bags").get<std::size_t>();
  c.patience_epochs = j.at("patience_epochs").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.radius_um = j.at("radius_um").get<double>();
  c.arch = arch_from(j.at("arch"));
  return c;
}

inline json state_json(const TrainState& s) {
  json hist = json::array();
  for (const auto& h : s.history)
    hist.push_back({{"epoch", h.epoch}, {"lr", h.lr}, {"train_loss", num(h.train_loss)}, {"val_loss", num(h.val_loss)}});
  return {{"adam",
           {{"t", s.adam.t}, {"beta1", s.adam.beta1}, {"beta2", s.adam.beta2}, {"eps", s.adam.eps},
            {"m", s.adam.m}, {"v", s.adam.v}}},
          {"next_epoch", s.next_epoch},
          {"best_monitor", num(s.best_monitor)},
          {"best_epoch", s.best_epoch},
          {"finished", s.finished},
          {"best_params", params_json(s.best_params)},
          {"history", hist},
          {"warnings", s.warnings}};
}

inline TrainState state_from(const json& j, const MesoGraphParams& current) {
  TrainState s;
  s.params = current;
  const json& a = j.at("adam");
  s.adam.t = a.at("t").get<std::uint64_t>();
  s.adam.beta1 = a.at("beta1").get<double>();
  s.adam.beta2 = a.at("beta2").get<double>();
  s.adam.eps = a.at("eps").get<double>();
  s.adam.m = a.at("m").get<std::vector<double>>();
  s.adam.v = a.at("v").get<std::vector<double>>();
  s.next_epoch = j.at("next_epoch").get<std::size_t>();
  s.best_monitor = num(j.at("best_monitor"));
  s.best_epoch = j.at("best_epoch").get<std::size_t>();
  s.finished = j.at("finished").get<bool>();
  s.best_params = params_from(j.at("best_params"), current.arch);
  for (const auto& h : j.at("history")) {
    s.history.push_back({h.at("epoch").get<std::size_t>(), h.at("lr").get<double>(), num(h.at("train_loss")),
                         num(h.at("val_loss"))});
  }
  s.warnings = j.at("warnings").get<std::vector<std::string>>();
  return s;
}

}  // namespace detail

inline std::string to_json_string(const Checkpoint& c) {
  detail::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["arch"] = detail::arch_json(c.params.arch);
  j["radius_um"] = c.radius_um;
  if (c.norm) j["norm_stats"] = {{"mean", c.norm->mean}, {"std", c.norm->std}};
  else j["norm_stats"] = nullptr;
  j["config"] = detail::config_json(c.config);
  j["params"] = detail::params_json(c.params);
  if (c.state) j["train_state"] = detail::state_json(*c.state);
  return j.dump(1) + "\n";
}

inline Checkpoint from_json_string(const std::string& text) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", "") != kCheckpointFormat) throw DataError("checkpoint: unrecognised format");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint c;
    const Architecture arch = detail::arch_from(j.at("arch"));
    c.params = detail::params_from(j.at("params"), arch);
    c.radius_um = j.at("radius_um").get<double>();
    if (!j.at("norm_stats").is_null()) {
      NormStats n;
      n.mean = j["norm_stats"].at("mean").get<std::vector<double>>();
      n.std = j["norm_stats"].at("std").get<std::vector<double>>();
      if (n.mean.size() != arch.d0 || n.std.size() != arch.d0) throw DataError("checkpoint: norm_stats width mismatch");
      c.norm = std::move(n);
    }
    c.config = detail::config_from(j.at("config"));
    if (j.contains("train_state")) c.state = detail::state_from(j.at("train_state"), c.params);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed field: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << to_json_string(c);
  if (!f) throw DataError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json_string(ss.str());
}

}  // namespace mesograph
