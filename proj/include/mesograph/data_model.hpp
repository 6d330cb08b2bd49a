#pragma once

// Cell tables, bag metadata, dual rank labels and feature normalisation.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mesograph/csv.hpp"
#include "mesograph/errors.hpp"

namespace mesograph {

enum class Subtype { Epithelioid, Biphasic, Sarcomatoid };
enum class InstanceLabel { E, S };
enum class Sex { Female, Male };

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::optional<Subtype> parse_subtype(std::string_view s) {
  const std::string v = lower(s);
  if (v == "e" || v == "epithelioid") return Subtype::Epithelioid;
  if (v == "b" || v == "biphasic") return Subtype::Biphasic;
  if (v == "s" || v == "sarcomatoid") return Subtype::Sarcomatoid;
  return std::nullopt;
}

inline const char* subtype_code(Subtype s) {
  switch (s) {
    case Subtype::Epithelioid: return "E";
    case Subtype::Biphasic: return "B";
    case Subtype::Sarcomatoid: return "S";
  }
  return "?";
}

inline const char* subtype_name(Subtype s) {
  switch (s) {
    case Subtype::Epithelioid: return "Epithelioid";
    case Subtype::Biphasic: return "Biphasic";
    case Subtype::Sarcomatoid: return "Sarcomatoid";
  }
  return "?";
}

inline std::optional<InstanceLabel> parse_instance_label(std::string_view s) {
  const std::string v = lower(s);
  if (v == "e" || v == "epithelioid") return InstanceLabel::E;
  if (v == "s" || v == "sarcomatoid") return InstanceLabel::S;
  return std::nullopt;
}

inline std::optional<Sex> parse_sex(std::string_view s) {
  const std::string v = lower(s);
  if (v == "f" || v == "female" || v == "0") return Sex::Female;
  if (v == "m" || v == "male" || v == "1") return Sex::Male;
  return std::nullopt;
}

struct CellRecord {
  std::int64_t cell_id = 0;
  double x_um = 0.0;
  double y_um = 0.0;
  std::vector<double> features;
  std::optional<InstanceLabel> instance_label;

  bool operator==(const CellRecord&) const = default;
};

struct BagMeta {
  std::string bag_id;
  std::string slide_id;
  std::string patient_id;
  Subtype subtype = Subtype::Epithelioid;
  std::optional<double> survival_days;
  std::optional<bool> event_observed;
  std::optional<Sex> sex;
  std::optional<double> age;

  bool has_survival() const { return survival_days.has_value() && event_observed.has_value(); }
  bool operator==(const BagMeta&) const = default;
};

/// Rank labels for the two heads: S-head ranks S>B>E, E-head ranks E>B>S.
struct DualLabel {
  int y_s = 0;
  int y_e = 0;
  bool operator==(const DualLabel&) const = default;
};

constexpr DualLabel dual_label(Subtype s) {
  switch (s) {
    case Subtype::Epithelioid: return {0, 2};
    case Subtype::Biphasic: return {1, 1};
    case Subtype::Sarcomatoid: return {2, 0};
  }
  return {0, 2};
}

/// Positive class for bag-level evaluation: biphasic or sarcomatoid.
constexpr bool is_positive(Subtype s) { return s != Subtype::Epithelioid; }

struct Bag {
  BagMeta meta;
  std::vector<CellRecord> cells;
  bool operator==(const Bag&) const = default;
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  bool operator==(const NormStats&) const = default;
};

struct Dataset {
  std::vector<Bag> bags;
  std::size_t d0 = 0;
  std::optional<NormStats> norm_stats;

  std::size_t cell_count() const {
    std::size_t n = 0;
    for (const auto& b : bags) n += b.cells.size();
    return n;
  }
  const Bag* find(std::string_view bag_id) const {
    for (const auto& b : bags)
      if (b.meta.bag_id == bag_id) return &b;
    return nullptr;
  }
  bool operator==(const Dataset&) const = default;
};

inline constexpr double kStdFloor = 1e-8;

// ---------------------------------------------------------------------------
// Ingestion

inline std::vector<BagMeta> read_bag_table(const std::string& path) {
  const csv::Table t = csv::read(path);
  auto need = [&](const char* name) {
    auto c = t.column(name);
    if (!c) throw DataError(path + ": missing column '" + name + "'");
    return *c;
  };
  const std::size_t c_bag = need("bag_id"), c_slide = need("slide_id"), c_patient = need("patient_id"),
                    c_sub = need("subtype");
  const auto c_surv = t.column("survival_days");
  const auto c_event = t.column("event_observed");
  const auto c_sex = t.column("sex");
  const auto c_age = t.column("age");

  std::vector<BagMeta> out;
  std::set<std::string> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = path + ": row " + std::to_string(t.line_numbers[r]);
    BagMeta m;
    m.bag_id = row[c_bag];
    m.slide_id = row[c_slide];
    m.patient_id = row[c_patient];
    if (m.bag_id.empty()) throw DataError(where + ": empty bag_id");
    if (!seen.insert(m.bag_id).second) throw DataError(where + ": duplicate bag_id '" + m.bag_id + "'");
    const auto st = parse_subtype(row[c_sub]);
    if (!st) throw DataError(where + ": unknown subtype '" + row[c_sub] + "'");
    m.subtype = *st;
    if (c_surv && !row[*c_surv].empty()) {
      m.survival_days = csv::parse_double(row[*c_surv], where);
      if (!(*m.survival_days >= 0.0) || !std::isfinite(*m.survival_days))
        throw DataError(where + ": survival_days must be non-negative");
    }
    if (c_event && !row[*c_event].empty()) {
      const std::string v = lower(row[*c_event]);
      if (v == "1" || v == "true") m.event_observed = true;
      else if (v == "0" || v == "false") m.event_observed = false;
      else throw DataError(where + ": cannot parse event_observed '" + row[*c_event] + "'");
    }
    if (m.survival_days.has_value() != m.event_observed.has_value()) {
      throw DataError(where + ": survival_days and event_observed must be given together");
    }
    if (c_sex && !row[*c_sex].empty()) {
      m.sex = parse_sex(row[*c_sex]);
      if (!m.sex) throw DataError(where + ": unknown sex '" + row[*c_sex] + "'");
    }
    if (c_age && !row[*c_age].empty()) {
      m.age = csv::parse_double(row[*c_age], where);
      if (!(*m.age >= 0.0)) throw DataError(where + ": age must be non-negative");
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Reads a cell table and a bag table into a Dataset. d0 is the number of
/// f<k> columns, which must be f0..f{d0-1}.
inline Dataset ingest(const std::string& cell_table_path, const std::string& bag_table_path) {
  Dataset ds;
  for (auto& m : read_bag_table(bag_table_path)) ds.bags.push_back(Bag{std::move(m), {}});
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) index.emplace(ds.bags[i].meta.bag_id, i);

  const csv::Table t = csv::read(cell_table_path);
  const std::string& path = cell_table_path;
  auto need = [&](const char* name) {
    auto c = t.column(name);
    if (!c) throw DataError(path + ": missing column '" + name + "'");
    return *c;
  };
  const std::size_t c_bag = need("bag_id"), c_cell = need("cell_id"), c_x = need("x_um"), c_y = need("y_um");
  const auto c_inst = t.column("instance_label");
  std::vector<std::size_t> feature_cols;
  for (std::size_t k = 0;; ++k) {
    auto c = t.column("f" + std::to_string(k));
    if (!c) break;
    feature_cols.push_back(*c);
  }
  for (const auto& h : t.header) {
    if (h.size() > 1 && h[0] == 'f' && std::all_of(h.begin() + 1, h.end(), ::isdigit)) {
      const auto k = static_cast<std::size_t>(std::stoul(h.substr(1)));
      if (k >= feature_cols.size()) throw DataError(path + ": feature columns must be f0..f{d0-1}, found '" + h + "'");
    }
  }
  if (feature_cols.empty()) throw DataError(path + ": no feature columns f0..");
  ds.d0 = feature_cols.size();

  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = path + ": row " + std::to_string(t.line_numbers[r]);
    const auto it = index.find(row[c_bag]);
    if (it == index.end()) throw DataError(where + ": unknown bag_id '" + row[c_bag] + "'");
    CellRecord c;
    c.cell_id = csv::parse_int(row[c_cell], where);
    c.x_um = csv::parse_double(row[c_x], where);
    c.y_um = csv::parse_double(row[c_y], where);
    if (!std::isfinite(c.x_um) || !std::isfinite(c.y_um)) throw DataError(where + ": non-finite coordinates");
    c.features.reserve(ds.d0);
    for (std::size_t col : feature_cols) c.features.push_back(csv::parse_double(row[col], where));
    if (c_inst && !row[*c_inst].empty()) {
      c.instance_label = parse_instance_label(row[*c_inst]);
      if (!c.instance_label) throw DataError(where + ": unknown instance_label '" + row[*c_inst] + "'");
    }
    ds.bags[it->second].cells.push_back(std::move(c));
  }
  for (const auto& b : ds.bags) {
    if (b.cells.empty()) throw DataError(bag_table_path + ": bag '" + b.meta.bag_id + "' has no cells");
  }
  return ds;
}

inline void write_bag_table(const std::vector<Bag>& bags, const std::string& path) {
  csv::Writer w({"bag_id", "slide_id", "patient_id", "subtype", "survival_days", "event_observed", "sex", "age"});
  for (const auto& b : bags) {
    const auto& m = b.meta;
    w.add_row({m.bag_id, m.slide_id, m.patient_id, subtype_code(m.subtype),
               m.survival_days ? csv::format_double(*m.survival_days) : "",
               m.event_observed ? (*m.event_observed ? "1" : "0") : "",
               m.sex ? (*m.sex == Sex::Male ? "M" : "F") : "", m.age ? csv::format_double(*m.age) : ""});
  }
  w.save(path);
}

inline void write_cell_table(const Dataset& ds, const std::string& path) {
  std::vector<std::string> header = {"bag_id", "cell_id", "x_um", "y_um"};
  for (std::size_t k = 0; k < ds.d0; ++k) header.push_back("f" + std::to_string(k));
  header.push_back("instance_label");
  csv::Writer w(header);
  std::vector<std::string> row;
  for (const auto& b : ds.bags) {
    for (const auto& c : b.cells) {
      row.clear();
      row.push_back(b.meta.bag_id);
      row.push_back(std::to_string(c.cell_id));
      row.push_back(csv::format_double(c.x_um));
      row.push_back(csv::format_double(c.y_um));
      for (double f : c.features) row.push_back(csv::format_double(f));
      row.push_back(c.instance_label ? (*c.instance_label == InstanceLabel::S ? "S" : "E") : "");
      w.add_row(row);
    }
  }
  w.save(path);
}

// ---------------------------------------------------------------------------
// Normalisation

/// Per-feature mean and population standard deviation over every cell of the
/// given bags; std floored at 1e-8.
inline NormStats zscore_fit(std::span<const Bag> train_bags) {
  std::size_t n = 0;
  std::size_t d0 = 0;
  for (const auto& b : train_bags) {
    for (const auto& c : b.cells) {
      if (n == 0) d0 = c.features.size();
      else if (c.features.size() != d0) throw UsageError("zscore_fit: ragged feature vectors");
      ++n;
    }
  }
  if (n < 2) throw UsageError("zscore_fit: need at least 2 training cells, got " + std::to_string(n));
  NormStats s{std::vector<double>(d0, 0.0), std::vector<double>(d0, 0.0)};
  for (const auto& b : train_bags)
    for (const auto& c : b.cells)
      for (std::size_t k = 0; k < d0; ++k) s.mean[k] += c.features[k];
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (const auto& b : train_bags)
    for (const auto& c : b.cells)
      for (std::size_t k = 0; k < d0; ++k) {
        const double d = c.features[k] - s.mean[k];
        s.std[k] += d * d;
      }
  for (double& v : s.std) v = std::max(std::sqrt(v / static_cast<double>(n)), kStdFloor);
  return s;
}

inline Dataset zscore_apply(const Dataset& ds, const NormStats& stats) {
  if (stats.mean.size() != ds.d0 || stats.std.size() != ds.d0) {
    throw UsageError("zscore_apply: stats have " + std::to_string(stats.mean.size()) + " features, dataset has " +
                     std::to_string(ds.d0));
  }
  Dataset out = ds;
  for (auto& b : out.bags)
    for (auto& c : b.cells)
      for (std::size_t k = 0; k < ds.d0; ++k) c.features[k] = (c.features[k] - stats.mean[k]) / stats.std[k];
  out.norm_stats = stats;
  return out;
}

}  // namespace mesograph
