#include "blockflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "blockflow/io.hpp"
#include "blockflow/rng.hpp"

namespace blockflow {

using nlohmann::json;

namespace {

std::string padded_id(const char* prefix, std::size_t i, std::size_t n) {
  std::string digits = std::to_string(n > 0 ? n - 1 : 0);
  std::string s = std::to_string(i);
  return prefix + std::string(digits.size() - std::min(digits.size(), s.size()), '0') + s;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_cells == 0 || n_genes == 0) throw ValidationError("synth: n_cells and n_genes must be positive");
  if (embedding_dim == 0 || background_cluster == 0) throw ValidationError("synth: embedding extents must be positive");
  if (!(base_sd >= 0.0 && size_sd >= 0.0 && noise_sd >= 0.0) || !std::isfinite(base_mean)) {
    throw ValidationError("synth: noise scales must be finite and >= 0");
  }
  if (sparsity && !(*sparsity > 0.0 && *sparsity < 1.0)) throw ValidationError("synth: sparsity must lie in (0,1)");
  if (!sparsity && !(mean_depth > 0.0 && std::isfinite(mean_depth))) throw ValidationError("synth: mean_depth must be positive");
  std::set<std::string> names;
  std::size_t auto_genes = 0;
  std::set<std::size_t> explicit_genes;
  for (const auto& t : types) {
    if (t.levels.empty()) throw ValidationError("synth: condition type '" + t.name + "' has no levels");
    if (!names.insert(t.name).second) throw ValidationError("synth: duplicate condition type '" + t.name + "'");
    std::set<std::string> labels;
    for (const auto& l : t.levels) {
      if (!labels.insert(l.label).second) throw ValidationError("synth: duplicate level '" + l.label + "'");
      if (!std::isfinite(l.effect)) throw ValidationError("synth: effect of '" + l.label + "' is not finite");
      for (std::size_t g : l.genes) {
        if (g >= n_genes) {
          throw ValidationError("synth: signature gene " + std::to_string(g) + " of '" + l.label + "' is >= G");
        }
        explicit_genes.insert(g);
      }
      if (l.genes.empty()) auto_genes += l.n_genes;
    }
  }
  if (auto_genes + explicit_genes.size() > n_genes) {
    throw ValidationError("synth: signatures need " + std::to_string(auto_genes + explicit_genes.size()) +
                          " distinct genes, only " + std::to_string(n_genes) + " available");
  }
  ConditionSchema check([&] {
    std::vector<ConditionType> ts;
    for (const auto& t : types) {
      ConditionType ct{t.name, {}};
      for (const auto& l : t.levels) ct.labels.push_back(l.label);
      ts.push_back(std::move(ct));
    }
    return ts;
  }());
}

json SyntheticSpec::to_json() const {
  json jt = json::array();
  for (const auto& t : types) {
    json levels = json::array();
    for (const auto& l : t.levels) {
      json jl = {{"label", l.label}, {"effect", l.effect}};
      if (l.genes.empty()) {
        jl["n_genes"] = l.n_genes;
      } else {
        jl["genes"] = l.genes;
      }
      levels.push_back(std::move(jl));
    }
    jt.push_back({{"name", t.name}, {"levels", std::move(levels)}});
  }
  json j = {{"n_cells", n_cells},   {"n_genes", n_genes},       {"types", std::move(jt)},
            {"base_mean", base_mean}, {"base_sd", base_sd},     {"size_sd", size_sd},
            {"noise_sd", noise_sd},   {"mean_depth", mean_depth}, {"random_sign", random_sign},
            {"embedding_dim", embedding_dim}, {"background_cluster", background_cluster}};
  j["sparsity"] = sparsity ? json(*sparsity) : json(nullptr);
  return j;
}

SyntheticSpec SyntheticSpec::from_json(const json& j) {
  SyntheticSpec s;
  try {
    s.n_cells = j.value("n_cells", s.n_cells);
    s.n_genes = j.value("n_genes", s.n_genes);
    s.base_mean = j.value("base_mean", s.base_mean);
    s.base_sd = j.value("base_sd", s.base_sd);
    s.size_sd = j.value("size_sd", s.size_sd);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    s.mean_depth = j.value("mean_depth", s.mean_depth);
    s.random_sign = j.value("random_sign", s.random_sign);
    s.embedding_dim = j.value("embedding_dim", s.embedding_dim);
    s.background_cluster = j.value("background_cluster", s.background_cluster);
    if (j.contains("sparsity") && !j["sparsity"].is_null()) s.sparsity = j["sparsity"].get<double>();
    if (j.contains("types")) {
      for (const auto& jt : j.at("types")) {
        TypeSpec t;
        t.name = jt.at("name").get<std::string>();
        for (const auto& jl : jt.at("levels")) {
          LevelSpec l;
          l.label = jl.at("label").get<std::string>();
          l.effect = jl.value("effect", 0.0);
          if (jl.contains("genes")) l.genes = jl["genes"].get<std::vector<std::size_t>>();
          l.n_genes = jl.value("n_genes", std::size_t{0});
          t.levels.push_back(std::move(l));
        }
        s.types.push_back(std::move(t));
      }
    } else {
      s.types = standard().types;
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

SyntheticSpec SyntheticSpec::standard() {
  SyntheticSpec s;
  s.types = {{"cell_type", {{"A", {}, 20, 1.5}, {"B", {}, 20, 1.5}, {"C", {}, 20, 1.5}}},
             {"batch", {{"b1", {}, 20, 1.5}, {"b2", {}, 20, 1.5}}}};
  return s;
}

SyntheticSpec SyntheticSpec::perturbation(double effect) {
  SyntheticSpec s;
  s.types = {{"cell_type", {{"A", {}, 20, 1.5}, {"B", {}, 20, 1.5}, {"C", {}, 20, 1.5}}},
             {"perturbation", {{"control", {}, 0, 0.0}, {"stim", {}, 20, effect}}}};
  return s;
}

SyntheticData synthesize(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  Rng design = root.substream("synth.design");
  Rng cells = root.substream("synth.cells");
  Rng counts_rng = root.substream("synth.counts");
  Rng emb_rng = root.substream("synth.embeddings");
  const std::size_t n = spec.n_cells, g = spec.n_genes;

  std::vector<std::string> gene_ids(g), cell_ids(n);
  for (std::size_t j = 0; j < g; ++j) gene_ids[j] = padded_id("g", j, g);
  for (std::size_t i = 0; i < n; ++i) cell_ids[i] = padded_id("c", i, n);

  // Signatures: explicit genes first, then disjoint draws from the rest.
  std::vector<std::size_t> gene_order = design.permutation(g);
  std::set<std::size_t> taken;
  for (const auto& t : spec.types) {
    for (const auto& l : t.levels) taken.insert(l.genes.begin(), l.genes.end());
  }
  std::size_t cursor = 0;
  struct Sig {
    std::vector<std::size_t> genes;
    std::vector<double> signs;
    double effect;
  };
  std::vector<std::vector<Sig>> sigs;
  std::vector<long> group(g, -1);  // embedding cluster per gene
  long next_group = 0;
  for (const auto& t : spec.types) {
    std::vector<Sig> ts;
    for (const auto& l : t.levels) {
      Sig s{l.genes, {}, l.effect};
      if (s.genes.empty()) {
        while (s.genes.size() < l.n_genes) {
          std::size_t cand = gene_order[cursor++];
          if (taken.insert(cand).second) s.genes.push_back(cand);
        }
        std::sort(s.genes.begin(), s.genes.end());
      }
      for (std::size_t k = 0; k < s.genes.size(); ++k) {
        s.signs.push_back(spec.random_sign && design.bernoulli(0.5) ? -1.0 : 1.0);
      }
      if (!s.genes.empty()) {
        for (std::size_t gi : s.genes) {
          if (group[gi] < 0) group[gi] = next_group;
        }
        ++next_group;
      }
      ts.push_back(std::move(s));
    }
    sigs.push_back(std::move(ts));
  }
  {
    std::size_t in_cluster = 0;
    for (std::size_t gi : gene_order) {
      if (group[gi] >= 0) continue;
      if (in_cluster == spec.background_cluster) {
        ++next_group;
        in_cluster = 0;
      }
      group[gi] = next_group;
      ++in_cluster;
    }
    ++next_group;
  }

  std::vector<double> base(g);
  for (double& b : base) b = spec.base_mean + spec.base_sd * design.normal();

  // Conditions, uniform per type.
  std::vector<ConditionType> ctypes;
  for (const auto& t : spec.types) {
    ConditionType ct{t.name, {}};
    for (const auto& l : t.levels) ct.labels.push_back(l.label);
    ctypes.push_back(std::move(ct));
  }
  ConditionSchema schema(ctypes);
  const std::size_t nt = spec.types.size();
  std::vector<std::uint32_t> idx(n * nt);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < nt; ++k) {
      idx[i * nt + k] = static_cast<std::uint32_t>(cells.index(spec.types[k].levels.size()) + 1);
    }
  }
  ConditionTable conds(n, nt, std::move(idx));

  // Relative rates m (before the global scale).
  std::vector<double> m(n * g);
  std::vector<double> shift(g);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(shift.begin(), shift.end(), 0.0);
    for (std::size_t k = 0; k < nt; ++k) {
      const Sig& s = sigs[k][conds.at(i, k) - 1];
      for (std::size_t q = 0; q < s.genes.size(); ++q) shift[s.genes[q]] += s.signs[q] * s.effect;
    }
    double size = spec.size_sd * cells.normal();
    for (std::size_t j = 0; j < g; ++j) {
      m[i * g + j] = std::exp(base[j] + shift[j] + size + spec.noise_sd * cells.normal());
    }
  }

  // Solve for the scale in log space.
  auto zero_fraction = [&](double scale) {
    double z = 0.0;
    for (double v : m) z += std::exp(-scale * v);
    return z / static_cast<double>(m.size());
  };
  double total_m = 0.0;
  for (double v : m) total_m += v;
  double scale;
  if (spec.sparsity) {
    double lo = -40.0, hi = 40.0;
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      if (zero_fraction(std::exp(mid)) > *spec.sparsity) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    scale = std::exp(0.5 * (lo + hi));
  } else {
    scale = spec.mean_depth * static_cast<double>(n) / total_m;
  }

  std::vector<double> values(n * g);
  for (std::size_t i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      double lib = 0.0;
      for (std::size_t j = 0; j < g; ++j) {
        double c = static_cast<double>(counts_rng.poisson(scale * m[i * g + j]));
        values[i * g + j] = c;
        lib += c;
      }
      if (lib > 0.0) break;
      if (attempt == 1000) throw ValidationError("synth: cannot draw a nonzero cell; sparsity target is infeasible");
    }
  }
  std::size_t zeros = static_cast<std::size_t>(std::count(values.begin(), values.end(), 0.0));

  SyntheticData out;
  out.counts = ExpressionMatrix(cell_ids, gene_ids, std::move(values), Stage::Raw);
  out.schema = schema;
  out.conds = conds;

  // Embeddings: cluster centre plus small jitter.
  out.embeddings.gene_ids = gene_ids;
  out.embeddings.dim = spec.embedding_dim;
  std::vector<double> centres(static_cast<std::size_t>(next_group) * spec.embedding_dim);
  for (double& c : centres) c = 3.0 * emb_rng.normal();
  out.embeddings.values.resize(g * spec.embedding_dim);
  for (std::size_t j = 0; j < g; ++j) {
    for (std::size_t k = 0; k < spec.embedding_dim; ++k) {
      out.embeddings.values[j * spec.embedding_dim + k] =
          centres[static_cast<std::size_t>(group[j]) * spec.embedding_dim + k] + 0.3 * emb_rng.normal();
    }
  }

  // Ground truth.
  json gt;
  gt["seed"] = seed;
  gt["spec"] = spec.to_json();
  gt["scale"] = scale;
  gt["zero_fraction"] = static_cast<double>(zeros) / static_cast<double>(n * g);
  gt["expected_zero_fraction"] = zero_fraction(scale);
  gt["base_log_mean"] = base;
  json js = json::array();
  for (std::size_t k = 0; k < nt; ++k) {
    for (std::size_t l = 0; l < spec.types[k].levels.size(); ++l) {
      const Sig& s = sigs[k][l];
      std::vector<std::string> ids;
      for (std::size_t gi : s.genes) ids.push_back(gene_ids[gi]);
      js.push_back({{"type", spec.types[k].name},
                    {"label", spec.types[k].levels[l].label},
                    {"effect", s.effect},
                    {"genes", ids},
                    {"gene_index", s.genes},
                    {"signs", s.signs}});
    }
  }
  gt["signatures"] = std::move(js);
  std::map<std::string, std::pair<std::size_t, std::vector<double>>> sums;
  std::vector<std::string> keys = condition_keys(conds, schema);
  auto cv = out.counts.values();
  for (std::size_t i = 0; i < n; ++i) {
    auto& [count, acc] = sums[keys[i]];
    if (acc.empty()) acc.assign(g, 0.0);
    ++count;
    for (std::size_t j = 0; j < g; ++j) acc[j] += cv[i * g + j];
  }
  json means = json::object();
  for (auto& [key, entry] : sums) {
    for (double& v : entry.second) v /= static_cast<double>(entry.first);
    means[key] = {{"n_cells", entry.first}, {"mean_counts", entry.second}};
  }
  gt["condition_means"] = std::move(means);
  out.ground_truth = std::move(gt);
  return out;
}

SyntheticPaths synthetic_paths(const std::filesystem::path& dir) {
  return {dir / "counts.csv", dir / "conditions.csv", dir / "embeddings.csv", dir / "ground_truth.json"};
}

void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  SyntheticPaths p = synthetic_paths(dir);
  write_matrix_csv(p.counts, data.counts);
  write_conditions_csv(p.conditions, data.counts.cell_ids(), data.conds, data.schema);
  write_embeddings_csv(p.embeddings, data.embeddings);
  write_file_atomic(p.ground_truth, data.ground_truth.dump(1) + "\n");
}

}  // namespace blockflow
