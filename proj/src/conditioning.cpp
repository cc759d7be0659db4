#include "blockflow/conditioning.hpp"

#include <cmath>
#include <numbers>
#include <set>

#include "blockflow/io.hpp"
#include "blockflow/preprocess.hpp"

namespace blockflow {

using nlohmann::json;

ConditionSchema::ConditionSchema(std::vector<ConditionType> types) : types_(std::move(types)) {
  std::set<std::string> names;
  for (const auto& t : types_) {
    if (t.name.empty() || !names.insert(t.name).second) {
      throw ValidationError("condition schema: type names must be unique and non-empty");
    }
    std::set<std::string> seen;
    for (const auto& l : t.labels) {
      if (l == kMaskLabel) throw ValidationError("condition schema: label collides with MASK in '" + t.name + "'");
      if (!seen.insert(l).second) throw ValidationError("condition schema: duplicate label '" + l + "' in '" + t.name + "'");
    }
  }
}

std::size_t ConditionSchema::type_index(const std::string& name) const {
  for (std::size_t i = 0; i < types_.size(); ++i) {
    if (types_[i].name == name) return i;
  }
  throw ValidationError("unknown condition type '" + name + "'");
}

std::uint32_t ConditionSchema::index_of(std::size_t t, const std::string& label) const {
  if (label == kMaskLabel) return kMaskIndex;
  const auto& labels = types_.at(t).labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return static_cast<std::uint32_t>(i + 1);
  }
  throw ValidationError("label '" + label + "' not in vocabulary of '" + types_.at(t).name + "'");
}

const std::string& ConditionSchema::label_of(std::size_t t, std::uint32_t index) const {
  static const std::string mask = kMaskLabel;
  if (index == kMaskIndex) return mask;
  const auto& labels = types_.at(t).labels;
  if (index > labels.size()) throw ValidationError("condition index out of vocabulary");
  return labels[index - 1];
}

json ConditionSchema::to_json() const {
  json types = json::array();
  for (const auto& t : types_) types.push_back({{"name", t.name}, {"labels", t.labels}});
  return {{"schema_version", 1}, {"types", types}};
}

ConditionSchema ConditionSchema::from_json(const json& j) {
  std::vector<ConditionType> types;
  try {
    for (const auto& t : j.at("types")) {
      types.push_back({t.at("name").get<std::string>(), t.at("labels").get<std::vector<std::string>>()});
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("condition schema json: ") + e.what());
  }
  return ConditionSchema(std::move(types));
}

bool ConditionSchema::operator==(const ConditionSchema& other) const {
  if (types_.size() != other.types_.size()) return false;
  for (std::size_t i = 0; i < types_.size(); ++i) {
    if (types_[i].name != other.types_[i].name || types_[i].labels != other.types_[i].labels) return false;
  }
  return true;
}

ConditionTable::ConditionTable(std::size_t rows, std::size_t types, std::vector<std::uint32_t> idx)
    : n_rows(rows), n_types(types), indices(std::move(idx)) {
  if (indices.size() != rows * types) throw DimensionError("condition table: index count != rows x types");
}

ConditionTable ConditionTable::all_mask(std::size_t rows, std::size_t types) {
  return ConditionTable(rows, types, std::vector<std::uint32_t>(rows * types, kMaskIndex));
}

ConditionTable ConditionTable::select_rows(std::span<const std::size_t> rows) const {
  std::vector<std::uint32_t> idx;
  idx.reserve(rows.size() * n_types);
  for (std::size_t r : rows) {
    if (r >= n_rows) throw DimensionError("condition table: row out of range");
    for (std::size_t t = 0; t < n_types; ++t) idx.push_back(at(r, t));
  }
  return ConditionTable(rows.size(), n_types, std::move(idx));
}

void ConditionTable::validate(const ConditionSchema& schema) const {
  if (n_types != schema.n_types()) {
    throw DimensionError("condition table has " + std::to_string(n_types) + " types, schema has " +
                         std::to_string(schema.n_types()));
  }
  for (std::size_t r = 0; r < n_rows; ++r) {
    for (std::size_t t = 0; t < n_types; ++t) {
      if (at(r, t) >= schema.vocab_size(t)) {
        throw DimensionError("condition index " + std::to_string(at(r, t)) + " out of vocabulary for '" +
                             schema.type(t).name + "'");
      }
    }
  }
}

ConditionTable mask_conditions(const ConditionTable& table, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("mask probability must lie in [0,1]");
  ConditionTable out = table;
  for (auto& idx : out.indices) {
    if (rng.bernoulli(p)) idx = kMaskIndex;
  }
  return out;
}

LabeledConditions read_conditions_csv(const std::filesystem::path& path, ConditionSchema& schema) {
  CsvTable csv = read_csv(path);
  if (csv.header.size() < 2) throw ValidationError(path.string() + ": need cell_id and at least one condition column");
  std::vector<std::string> names(csv.header.begin() + 1, csv.header.end());
  if (schema.n_types() == 0) {
    std::vector<ConditionType> types;
    for (std::size_t t = 0; t < names.size(); ++t) {
      ConditionType ct{names[t], {}};
      std::set<std::string> seen;
      for (const auto& row : csv.rows) {
        const std::string& l = row[t + 1];
        if (l != kMaskLabel && seen.insert(l).second) ct.labels.push_back(l);
      }
      types.push_back(std::move(ct));
    }
    schema = ConditionSchema(std::move(types));
  }
  std::vector<std::size_t> type_of_col;
  for (const auto& n : names) type_of_col.push_back(schema.type_index(n));
  if (type_of_col.size() != schema.n_types()) throw ValidationError(path.string() + ": condition columns do not match schema");
  LabeledConditions out;
  out.table = ConditionTable(csv.rows.size(), schema.n_types(), std::vector<std::uint32_t>(csv.rows.size() * schema.n_types()));
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    out.cell_ids.push_back(csv.rows[r][0]);
    for (std::size_t c = 0; c < names.size(); ++c) {
      out.table.at(r, type_of_col[c]) = schema.index_of(type_of_col[c], csv.rows[r][c + 1]);
    }
  }
  return out;
}

void write_conditions_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids,
                          const ConditionTable& table, const ConditionSchema& schema) {
  if (cell_ids.size() != table.n_rows) throw DimensionError("write_conditions_csv: id count != rows");
  std::string out = "cell_id";
  for (const auto& t : schema.types()) out += "," + t.name;
  out += '\n';
  for (std::size_t r = 0; r < table.n_rows; ++r) {
    out += cell_ids[r];
    for (std::size_t t = 0; t < table.n_types; ++t) out += "," + schema.label_of(t, table.at(r, t));
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<std::string> condition_keys(const ConditionTable& table, const ConditionSchema& schema) {
  std::vector<std::string> keys(table.n_rows);
  for (std::size_t r = 0; r < table.n_rows; ++r) {
    for (std::size_t t = 0; t < table.n_types; ++t) {
      if (t) keys[r] += '|';
      keys[r] += schema.label_of(t, table.at(r, t));
    }
  }
  return keys;
}

Tensor time_features(std::span<const double> t) {
  const std::size_t n = t.size(), f = kTimeFrequencies;
  std::vector<double> out(n * 2 * f);
  for (std::size_t k = 0; k < f; ++k) {
    double period = std::pow(1e4, static_cast<double>(k) / static_cast<double>(f - 1));
    double w = 2.0 * std::numbers::pi / period;
    for (std::size_t i = 0; i < n; ++i) {
      out[i * 2 * f + k] = std::sin(w * t[i]);
      out[i * 2 * f + f + k] = std::cos(w * t[i]);
    }
  }
  return Tensor::from({n, 2 * f}, std::move(out));
}

ConditionEmbedder::ConditionEmbedder(const ConditionSchema& schema, std::size_t width, bool with_time, Rng& rng,
                                     ParamSet& params, const std::string& prefix)
    : width_(width), with_time_(with_time) {
  for (std::size_t t = 0; t < schema.n_types(); ++t) {
    std::vector<double> v(schema.vocab_size(t) * width);
    for (double& x : v) x = rng.normal();
    tables_.push_back(params.add(prefix + ".table." + schema.type(t).name, Tensor::parameter({schema.vocab_size(t), width}, std::move(v))));
  }
  if (with_time) {
    time_w_ = params.add(prefix + ".time.w", init_xavier(rng, 2 * kTimeFrequencies, width));
    time_b_ = params.add(prefix + ".time.b", init_zeros({width}));
  }
}

Tensor ConditionEmbedder::embed(const ConditionTable& table, std::optional<std::span<const double>> t) const {
  if (table.n_types != tables_.size()) {
    throw DimensionError("embed_conditions: table has " + std::to_string(table.n_types) + " types, embedder has " +
                         std::to_string(tables_.size()));
  }
  if (t.has_value() != with_time_) throw ContractError("embed_conditions: time must be supplied iff the embedder uses it");
  Tensor out;
  std::vector<std::size_t> idx(table.n_rows);
  for (std::size_t k = 0; k < tables_.size(); ++k) {
    for (std::size_t r = 0; r < table.n_rows; ++r) idx[r] = table.at(r, k);
    Tensor e = gather_rows(tables_[k], idx);
    out = out.defined() ? add(out, e) : e;
  }
  if (with_time_) {
    if (t->size() != table.n_rows) throw DimensionError("embed_conditions: one time value per row required");
    Tensor te = add(matmul(time_features(*t), time_w_), time_b_);
    out = out.defined() ? add(out, te) : te;
  }
  if (!out.defined()) out = Tensor::zeros({table.n_rows, width_});
  return out;
}

}  // namespace blockflow
