#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/optim.hpp"
#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"

namespace blockflow {

// Index 0 of every vocabulary is the MASK token; real labels start at 1.
inline constexpr std::uint32_t kMaskIndex = 0;
inline constexpr const char* kMaskLabel = "[MASK]";

struct ConditionType {
  std::string name;
  std::vector<std::string> labels;  // real labels only
};

class ConditionSchema {
 public:
  ConditionSchema() = default;
  explicit ConditionSchema(std::vector<ConditionType> types);

  std::size_t n_types() const { return types_.size(); }
  const std::vector<ConditionType>& types() const { return types_; }
  const ConditionType& type(std::size_t t) const { return types_.at(t); }
  std::size_t type_index(const std::string& name) const;
  // Labels plus the MASK row.
  std::size_t vocab_size(std::size_t t) const { return types_.at(t).labels.size() + 1; }
  std::uint32_t index_of(std::size_t t, const std::string& label) const;
  const std::string& label_of(std::size_t t, std::uint32_t index) const;

  nlohmann::json to_json() const;
  static ConditionSchema from_json(const nlohmann::json& j);
  bool operator==(const ConditionSchema& other) const;

 private:
  std::vector<ConditionType> types_;
};

// N x d_s indices into the schema's vocabularies.
struct ConditionTable {
  std::size_t n_rows = 0;
  std::size_t n_types = 0;
  std::vector<std::uint32_t> indices;

  ConditionTable() = default;
  ConditionTable(std::size_t rows, std::size_t types, std::vector<std::uint32_t> idx);
  static ConditionTable all_mask(std::size_t rows, std::size_t types);

  std::uint32_t at(std::size_t row, std::size_t type) const { return indices[row * n_types + type]; }
  std::uint32_t& at(std::size_t row, std::size_t type) { return indices[row * n_types + type]; }
  ConditionTable select_rows(std::span<const std::size_t> rows) const;
  void validate(const ConditionSchema& schema) const;
  bool operator==(const ConditionTable&) const = default;
};

// Each entry independently replaced by MASK with probability p. Returns a copy.
ConditionTable mask_conditions(const ConditionTable& table, double p, Rng& rng);

// Condition CSV: cell_id column, then one label column per condition type.
struct LabeledConditions {
  std::vector<std::string> cell_ids;
  ConditionTable table;
};
// Builds the schema from the file (labels in order of first appearance)
// when `schema` is empty.
LabeledConditions read_conditions_csv(const std::filesystem::path& path, ConditionSchema& schema);
void write_conditions_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids,
                          const ConditionTable& table, const ConditionSchema& schema);
// "label_a|label_b" key of every row, MASK rendered as [MASK].
std::vector<std::string> condition_keys(const ConditionTable& table, const ConditionSchema& schema);

inline constexpr std::size_t kTimeFrequencies = 64;

// Sinusoidal features of t in [0,1]: periods geometric from 1 to 1e4,
// [sin..., cos...], shape [N, 2 * kTimeFrequencies].
Tensor time_features(std::span<const double> t);

// Learnable per-type embedding tables (MASK rows included) summed into one
// condition vector per cell; optionally adds a projected time embedding.
class ConditionEmbedder {
 public:
  ConditionEmbedder() = default;
  ConditionEmbedder(const ConditionSchema& schema, std::size_t width, bool with_time, Rng& rng, ParamSet& params,
                    const std::string& prefix);

  // [N, width]. `t` must be given iff the embedder was built with time.
  Tensor embed(const ConditionTable& table, std::optional<std::span<const double>> t = std::nullopt) const;

  std::size_t width() const { return width_; }
  bool with_time() const { return with_time_; }
  const std::vector<Tensor>& tables() const { return tables_; }

 private:
  std::size_t width_ = 0;
  bool with_time_ = false;
  std::vector<Tensor> tables_;
  Tensor time_w_, time_b_;
};

}  // namespace blockflow
