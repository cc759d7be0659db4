#include "blockflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <unordered_map>

#include "blockflow/io.hpp"

namespace blockflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ValidationError("config: '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!ok) throw ValidationError("config: unknown key '" + key + "' in " + section);
  }
}

const char* space_name(EvalSpace s) { return s == EvalSpace::MaxAbs ? "maxabs" : "latent"; }

EvalSpace parse_space(const std::string& s) {
  if (s == "maxabs") return EvalSpace::MaxAbs;
  if (s == "latent") return EvalSpace::Latent;
  throw ValidationError("config: evaluate.space must be 'maxabs' or 'latent', got '" + s + "'");
}

const char* matrix_stage_name(MatrixStage s) {
  switch (s) {
    case MatrixStage::Raw: return "raw";
    case MatrixStage::Normalized: return "normalized";
    case MatrixStage::MaxAbs: return "maxabs";
  }
  return "?";
}

MatrixStage parse_stage(const std::string& s) {
  if (s == "raw") return MatrixStage::Raw;
  if (s == "normalized") return MatrixStage::Normalized;
  if (s == "maxabs") return MatrixStage::MaxAbs;
  throw ValidationError("config: matrix stage must be raw, normalized or maxabs, got '" + s + "'");
}

json train_json(const TrainOptions& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr},
          {"weight_decay", t.weight_decay}, {"warmup_epochs", t.warmup_epochs}};
}

template <class T>
void read_train(const json& j, T& t, const std::string& section) {
  check_keys(j, {"epochs", "batch_size", "lr", "weight_decay", "warmup_epochs"}, section);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.warmup_epochs = j.value("warmup_epochs", t.warmup_epochs);
}

fs::path or_default(const fs::path& p, const fs::path& out, const char* name) { return p.empty() ? out / name : p; }

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw ValidationError(std::string(what) + " not found: " + p.string());
}

// Condition rows reordered to follow `cell_ids`.
ConditionTable align_conditions(const LabeledConditions& lc, const std::vector<std::string>& cell_ids,
                                const fs::path& source) {
  if (lc.cell_ids == cell_ids) return lc.table;
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < lc.cell_ids.size(); ++i) pos.emplace(lc.cell_ids[i], i);
  std::vector<std::size_t> rows;
  rows.reserve(cell_ids.size());
  for (const auto& id : cell_ids) {
    auto it = pos.find(id);
    if (it == pos.end()) throw ValidationError(source.string() + ": no conditions for cell '" + id + "'");
    rows.push_back(it->second);
  }
  return lc.table.select_rows(rows);
}

std::vector<std::size_t> kept_rows(const ConditionTable& conds, const ConditionSchema& schema,
                                   const std::vector<ConditionFilter>& holdout) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < conds.n_rows; ++r) {
    bool drop = std::any_of(holdout.begin(), holdout.end(),
                            [&](const ConditionFilter& f) { return matches(conds, r, schema, f); });
    if (!drop) rows.push_back(r);
  }
  return rows;
}

void write_loss_csv(const fs::path& path, const std::string& header, const std::vector<std::vector<double>>& rows) {
  std::string out = header + "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + format_double(r[i]);
    out += '\n';
  }
  write_file_atomic(path, out);
}

// Fingerprint of a layout so checkpoints can be matched to it.
std::string layout_fingerprint(const BlockLayout& layout) {
  std::string s = layout.to_json().dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct TrainingSet {
  ExpressionMatrix scaled;  // layout genes, max-abs space
  ConditionSchema schema;
  ConditionTable conds;
  Tensor blocks;  // [N, L, K]
};

TrainingSet load_training_set(const RunConfig& cfg, const BlockLayout& layout, const std::vector<double>* factors,
                              const ConditionSchema* schema) {
  ExpressionMatrix raw = read_matrix(cfg.counts_path());
  ConditionSchema sch = schema ? *schema : ConditionSchema();
  LabeledConditions lc = read_conditions_csv(cfg.conditions_path(), sch);
  TrainingSet ts;
  ts.conds = align_conditions(lc, raw.cell_ids(), cfg.conditions_path());
  ts.schema = sch;
  ts.scaled = prepare_expression(raw, layout, factors);
  std::vector<std::size_t> keep = kept_rows(ts.conds, ts.schema, cfg.holdout);
  if (keep.empty()) throw ValidationError("holdout removes every training cell");
  if (keep.size() != ts.conds.n_rows) {
    ts.scaled = ts.scaled.select_cells(keep);
    ts.conds = ts.conds.select_rows(keep);
  }
  ts.blocks = reshape_to_blocks(ts.scaled, layout);
  return ts;
}

std::unique_ptr<VaeModel> load_vae(const RunConfig& cfg, const BlockLayout& layout, std::vector<double>* factors) {
  Checkpoint ck = load_checkpoint(cfg.vae_path(), "vae");
  if (ck.config.value("layout_fingerprint", std::string()) != layout_fingerprint(layout)) {
    throw ValidationError("VAE checkpoint " + cfg.vae_path().string() + " was trained with a different layout");
  }
  if (factors) *factors = ck.config.at("scale_factors").get<std::vector<double>>();
  return vae_from_checkpoint(ck);
}

std::unique_ptr<FlowNetwork> load_flow(const RunConfig& cfg, const BlockLayout& layout) {
  Checkpoint ck = load_checkpoint(cfg.flow_path(), "flow");
  if (ck.config.value("layout_fingerprint", std::string()) != layout_fingerprint(layout)) {
    throw ValidationError("flow checkpoint " + cfg.flow_path().string() + " was trained with a different layout");
  }
  return flow_from_checkpoint(ck);
}

std::string join_labels(const ConditionTable& t, std::size_t row, const ConditionSchema& schema,
                        const std::vector<std::size_t>& cols) {
  std::string k;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) k += '\x1f';
    k += schema.label_of(cols[i], t.at(row, cols[i]));
  }
  return k;
}

std::vector<std::string> split_labels(const std::string& key) {
  std::vector<std::string> out(1);
  for (char c : key) {
    if (c == '\x1f') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

// Brings a matrix at `stage` into max-abs space. `factors` maps gene id to
// the max-abs factor; empty means learn the factors from this matrix.
ExpressionMatrix to_maxabs(const ExpressionMatrix& m, MatrixStage stage,
                           const std::unordered_map<std::string, double>& factors) {
  if (stage == MatrixStage::MaxAbs) return m;
  ExpressionMatrix logged = stage == MatrixStage::Raw
                                ? log_transform(normalize_depth(m))
                                : log_transform(ExpressionMatrix(m.cell_ids(), m.gene_ids(),
                                                                 std::vector<double>(m.values().begin(), m.values().end()),
                                                                 Stage::DepthNormalized));
  if (factors.empty()) return maxabs_scale(logged);
  std::vector<double> f;
  for (const auto& g : logged.gene_ids()) {
    auto it = factors.find(g);
    if (it == factors.end()) throw ValidationError("evaluate: gene '" + g + "' has no reference scale");
    f.push_back(it->second);
  }
  return apply_maxabs(logged, f);
}

DenseMatrix latent_points(const VaeModel& vae, const BlockLayout& layout, const ExpressionMatrix& scaled,
                          const ConditionTable& conds) {
  ExpressionMatrix sel = select_genes(scaled, layout.gene_ids);
  LatentTargets lt = encode_corpus(vae, reshape_to_blocks(sel, layout), conds);
  DenseMatrix out(lt.mu.dim(0), lt.mu.numel() / lt.mu.dim(0));
  std::copy(lt.mu.values().begin(), lt.mu.values().end(), out.data.begin());
  return out;
}

}  // namespace

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw ValidationError("config: schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
  }
  if (out.empty()) throw ValidationError("config: out directory must be set");
  synth.validate();
  if (block_size == 0) throw ValidationError("config: blocks.block_size must be positive");
  if (!(blocks.epsilon_scale > 0.0) || blocks.outer_iters == 0) throw ValidationError("config: invalid block options");
  vae.validate();
  flow.validate();
  for (const auto* t : {&vae_train.epochs, &vae_train.batch_size, &flow_train.epochs, &flow_train.batch_size}) {
    if (*t == 0) throw ValidationError("config: epochs and batch sizes must be positive");
  }
  if (!(vae_train.lr > 0.0) || !(flow_train.lr > 0.0)) throw ValidationError("config: learning rates must be positive");
  if (!(vae_train.weight_decay >= 0.0) || !(flow_train.weight_decay >= 0.0)) {
    throw ValidationError("config: weight decay must be >= 0");
  }
  if (evaluate.max_exact == 0) throw ValidationError("config: evaluate.max_exact must be positive");
}

json RunConfig::to_json() const {
  json p = json::object();
  auto put = [&](const char* k, const fs::path& v) {
    if (!v.empty()) p[k] = v.string();
  };
  put("counts", paths.counts);
  put("conditions", paths.conditions);
  put("embeddings", paths.embeddings);
  put("layout", paths.layout);
  put("vae_checkpoint", paths.vae_checkpoint);
  put("flow_checkpoint", paths.flow_checkpoint);
  put("generated", paths.generated);
  put("generated_conditions", paths.generated_conditions);
  put("transferred", paths.transferred);
  put("transferred_conditions", paths.transferred_conditions);
  put("metrics", paths.metrics);
  put("eval_real", paths.eval_real);
  put("eval_real_conditions", paths.eval_real_conditions);
  put("eval_generated", paths.eval_generated);
  put("eval_generated_conditions", paths.eval_generated_conditions);
  json v = vae.to_json();
  v.erase("n_blocks");
  v.erase("block_size");
  json f = flow.to_json();
  f.erase("tokens");
  f.erase("token_dim");
  return {{"schema_version", schema_version},
          {"seed", seed},
          {"out", out.string()},
          {"verbose", verbose},
          {"paths", p},
          {"synth", synth.to_json()},
          {"blocks",
           {{"block_size", block_size},
            {"outer_iters", blocks.outer_iters},
            {"epsilon_scale", blocks.epsilon_scale},
            {"sinkhorn_iters", blocks.sinkhorn_iters},
            {"sinkhorn_tol", blocks.sinkhorn_tol},
            {"centroid_tol", blocks.centroid_tol}}},
          {"vae", v},
          {"vae_train", train_json(vae_train)},
          {"holdout", holdout},
          {"flow", f},
          {"flow_train",
           {{"epochs", flow_train.epochs},
            {"batch_size", flow_train.batch_size},
            {"lr", flow_train.lr},
            {"weight_decay", flow_train.weight_decay},
            {"warmup_epochs", flow_train.warmup_epochs}}},
          {"generate", {{"conditions", generate.conditions.string()}}},
          {"transfer", {{"where", transfer.where}, {"set", transfer.set}}},
          {"evaluate",
           {{"condition_columns", evaluate.condition_columns},
            {"space", space_name(evaluate.space)},
            {"real_stage", matrix_stage_name(evaluate.real_stage)},
            {"generated_stage", matrix_stage_name(evaluate.generated_stage)},
            {"max_exact", evaluate.max_exact}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    check_keys(j, {"schema_version", "seed", "out", "verbose", "paths", "synth", "blocks", "vae", "vae_train", "holdout",
                   "flow", "flow_train", "generate", "transfer", "evaluate"},
               "config");
    c.schema_version = j.value("schema_version", c.schema_version);
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out.string());
    c.verbose = j.value("verbose", c.verbose);
    if (j.contains("paths")) {
      const json& p = j["paths"];
      check_keys(p, {"counts", "conditions", "embeddings", "layout", "vae_checkpoint", "flow_checkpoint", "generated",
                     "generated_conditions", "transferred", "transferred_conditions", "metrics", "eval_real",
                     "eval_real_conditions", "eval_generated", "eval_generated_conditions"},
                 "paths");
      auto get = [&](const char* k, fs::path& dst) {
        if (p.contains(k)) dst = p[k].get<std::string>();
      };
      get("counts", c.paths.counts);
      get("conditions", c.paths.conditions);
      get("embeddings", c.paths.embeddings);
      get("layout", c.paths.layout);
      get("vae_checkpoint", c.paths.vae_checkpoint);
      get("flow_checkpoint", c.paths.flow_checkpoint);
      get("generated", c.paths.generated);
      get("generated_conditions", c.paths.generated_conditions);
      get("transferred", c.paths.transferred);
      get("transferred_conditions", c.paths.transferred_conditions);
      get("metrics", c.paths.metrics);
      get("eval_real", c.paths.eval_real);
      get("eval_real_conditions", c.paths.eval_real_conditions);
      get("eval_generated", c.paths.eval_generated);
      get("eval_generated_conditions", c.paths.eval_generated_conditions);
    }
    if (j.contains("synth")) c.synth = SyntheticSpec::from_json(j["synth"]);
    if (j.contains("blocks")) {
      const json& b = j["blocks"];
      check_keys(b, {"block_size", "outer_iters", "epsilon_scale", "sinkhorn_iters", "sinkhorn_tol", "centroid_tol"},
                 "blocks");
      c.block_size = b.value("block_size", c.block_size);
      c.blocks.outer_iters = b.value("outer_iters", c.blocks.outer_iters);
      c.blocks.epsilon_scale = b.value("epsilon_scale", c.blocks.epsilon_scale);
      c.blocks.sinkhorn_iters = b.value("sinkhorn_iters", c.blocks.sinkhorn_iters);
      c.blocks.sinkhorn_tol = b.value("sinkhorn_tol", c.blocks.sinkhorn_tol);
      c.blocks.centroid_tol = b.value("centroid_tol", c.blocks.centroid_tol);
    }
    if (j.contains("vae")) {
      check_keys(j["vae"], {"width", "latent", "enc_blocks", "dec_blocks", "heads", "ff_mult", "kl_weight", "mask_p"},
                 "vae");
      c.vae = VaeConfig::from_json(j["vae"]);
    }
    if (j.contains("vae_train")) read_train(j["vae_train"], c.vae_train, "vae_train");
    if (j.contains("holdout")) c.holdout = j["holdout"].get<std::vector<ConditionFilter>>();
    if (j.contains("flow")) {
      check_keys(j["flow"], {"n_blocks", "width", "heads", "ff_mult", "ode_steps", "cfg_weight", "uncond_p", "mask_p",
                             "integrator"},
                 "flow");
      c.flow = FlowConfig::from_json(j["flow"]);
    }
    if (j.contains("flow_train")) read_train(j["flow_train"], c.flow_train, "flow_train");
    if (j.contains("generate")) {
      check_keys(j["generate"], {"conditions"}, "generate");
      c.generate.conditions = j["generate"].value("conditions", std::string());
    }
    if (j.contains("transfer")) {
      check_keys(j["transfer"], {"where", "set"}, "transfer");
      c.transfer.where = j["transfer"].value("where", ConditionFilter{});
      c.transfer.set = j["transfer"].value("set", ConditionFilter{});
    }
    if (j.contains("evaluate")) {
      const json& e = j["evaluate"];
      check_keys(e, {"condition_columns", "space", "real_stage", "generated_stage", "max_exact"}, "evaluate");
      c.evaluate.condition_columns = e.value("condition_columns", std::vector<std::string>{});
      c.evaluate.space = parse_space(e.value("space", std::string("maxabs")));
      c.evaluate.real_stage = parse_stage(e.value("real_stage", std::string("raw")));
      c.evaluate.generated_stage = parse_stage(e.value("generated_stage", std::string("normalized")));
      c.evaluate.max_exact = e.value("max_exact", c.evaluate.max_exact);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

fs::path RunConfig::counts_path() const { return or_default(paths.counts, out, "counts.csv"); }
fs::path RunConfig::conditions_path() const { return or_default(paths.conditions, out, "conditions.csv"); }
fs::path RunConfig::embeddings_path() const { return or_default(paths.embeddings, out, "embeddings.csv"); }
fs::path RunConfig::ground_truth_path() const { return out / "ground_truth.json"; }
fs::path RunConfig::layout_path() const { return or_default(paths.layout, out, "layout.json"); }
fs::path RunConfig::vae_path() const { return or_default(paths.vae_checkpoint, out, "vae.bfck"); }
fs::path RunConfig::vae_loss_path() const { return out / "vae_loss.csv"; }
fs::path RunConfig::flow_path() const { return or_default(paths.flow_checkpoint, out, "flow.bfck"); }
fs::path RunConfig::flow_loss_path() const { return out / "flow_loss.csv"; }
fs::path RunConfig::generated_path() const { return or_default(paths.generated, out, "generated.csv"); }
fs::path RunConfig::generated_conditions_path() const {
  return or_default(paths.generated_conditions, out, "generated_conditions.csv");
}
fs::path RunConfig::transferred_path() const { return or_default(paths.transferred, out, "transferred.csv"); }
fs::path RunConfig::transferred_conditions_path() const {
  return or_default(paths.transferred_conditions, out, "transferred_conditions.csv");
}
fs::path RunConfig::metrics_path() const { return or_default(paths.metrics, out, "metrics.csv"); }

RunConfig load_config(const fs::path& path) {
  require_file(path, "config file");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("schema_version")) throw ValidationError(path.string() + ": missing schema_version");
  return RunConfig::from_json(j);
}

Rng stage_rng(const RunConfig& cfg, const char* stage) { return Rng(cfg.seed).substream(stage); }

ExpressionMatrix prepare_expression(const ExpressionMatrix& raw, const BlockLayout& layout,
                                    const std::vector<double>* scale_factors) {
  ExpressionMatrix logged = log_transform(normalize_depth(raw));
  if (!scale_factors) return select_genes(maxabs_scale(logged), layout.gene_ids);
  ExpressionMatrix sel = select_genes(logged, layout.gene_ids);
  return apply_maxabs(sel, *scale_factors);
}

bool matches(const ConditionTable& table, std::size_t row, const ConditionSchema& schema, const ConditionFilter& filter) {
  for (const auto& [type, label] : filter) {
    std::size_t t = schema.type_index(type);
    if (schema.label_of(t, table.at(row, t)) != label) return false;
  }
  return true;
}

// ---------------------------------------------------------------- verbs

void run_synth(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  SyntheticData data = synthesize(cfg.synth, cfg.seed);  // substreams are split inside
  write_synthetic(data, cfg.out);
  say(log, "synth: " + std::to_string(data.counts.n_cells()) + " cells x " + std::to_string(data.counts.n_genes()) +
               " genes, zero fraction " + format_double(data.ground_truth["zero_fraction"].get<double>()) + " -> " +
               cfg.out.string());
}

BlockLayout run_build_blocks(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  require_file(cfg.embeddings_path(), "gene embeddings");
  GeneEmbeddingTable emb = read_embeddings_csv(cfg.embeddings_path());
  BlockBuildOptions opt = cfg.blocks;
  opt.seed = stage_rng(cfg, "blocks").seed();
  BlockLayout layout = build_blocks(emb, cfg.block_size, opt);
  fs::create_directories(cfg.layout_path().parent_path().empty() ? "." : cfg.layout_path().parent_path());
  write_layout(cfg.layout_path(), layout);
  std::string trace;
  for (double v : layout.objective_trace) trace += (trace.empty() ? "" : " ") + format_double(v);
  say(log, "build-blocks: G=" + std::to_string(layout.n_genes()) + " K=" + std::to_string(layout.block_size) +
               " L=" + std::to_string(layout.n_blocks) + " padding=" + std::to_string(layout.padding()));
  say(log, "build-blocks: objective trace " + trace);
  return layout;
}

void run_train_vae(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  require_file(cfg.counts_path(), "expression matrix");
  require_file(cfg.conditions_path(), "condition file");
  require_file(cfg.layout_path(), "layout");
  BlockLayout layout = read_layout(cfg.layout_path());
  TrainingSet ts = load_training_set(cfg, layout, nullptr, nullptr);
  VaeConfig vc = cfg.vae;
  vc.n_blocks = layout.n_blocks;
  vc.block_size = layout.block_size;
  Rng rng = stage_rng(cfg, "vae");
  VaeModel model(vc, ts.schema, layout.slot_mask(), rng.substream("init").seed());
  AdamW opt(model.params(), AdamWConfig{.weight_decay = cfg.vae_train.weight_decay});
  Rng train_rng = rng.substream("train");
  say(log, "train-vae: " + std::to_string(ts.conds.n_rows) + " cells, " + std::to_string(model.params().scalar_count()) +
               " parameters");
  auto trace = train_vae(model, ts.blocks, ts.conds, cfg.vae_train, train_rng, &opt);
  std::vector<std::vector<double>> rows;
  for (const auto& e : trace) rows.push_back({static_cast<double>(e.epoch), e.total, e.recon, e.kl});
  json extra = {{"scale_factors", ts.scaled.scale_factors()}, {"layout_fingerprint", layout_fingerprint(layout)}};
  fs::create_directories(cfg.out);
  save_checkpoint(cfg.vae_path(), vae_checkpoint(model, &opt, extra));
  write_loss_csv(cfg.vae_loss_path(), "epoch,total,recon,kl", rows);
  say(log, "train-vae: final loss " + format_double(trace.back().total) + " -> " + cfg.vae_path().string());
}

void run_train_fm(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  require_file(cfg.counts_path(), "expression matrix");
  require_file(cfg.conditions_path(), "condition file");
  require_file(cfg.layout_path(), "layout");
  require_file(cfg.vae_path(), "VAE checkpoint");
  BlockLayout layout = read_layout(cfg.layout_path());
  std::vector<double> factors;
  auto vae = load_vae(cfg, layout, &factors);
  if (!vae->trained()) throw PipelineOrderError("train-fm: VAE checkpoint is untrained");
  ConditionSchema schema = vae->schema();
  TrainingSet ts = load_training_set(cfg, layout, &factors, &schema);
  LatentTargets targets = encode_corpus(*vae, ts.blocks, ts.conds);
  FlowConfig fc = cfg.flow;
  fc.tokens = vae->config().n_blocks;
  fc.token_dim = vae->config().latent;
  Rng rng = stage_rng(cfg, "flow");
  FlowNetwork net(fc, schema, rng.substream("init").seed());
  AdamW opt(net.params(), AdamWConfig{.weight_decay = cfg.flow_train.weight_decay});
  Rng train_rng = rng.substream("train");
  say(log, "train-fm: " + std::to_string(ts.conds.n_rows) + " latent codes, " +
               std::to_string(net.params().scalar_count()) + " parameters");
  auto trace = train_flow(net, targets, ts.conds, cfg.flow_train, train_rng, &opt);
  std::vector<std::vector<double>> rows;
  for (const auto& e : trace) rows.push_back({static_cast<double>(e.epoch), e.loss});
  json extra = {{"layout_fingerprint", layout_fingerprint(layout)}};
  fs::create_directories(cfg.out);
  save_checkpoint(cfg.flow_path(), flow_checkpoint(net, &opt, extra));
  write_loss_csv(cfg.flow_loss_path(), "epoch,loss", rows);
  say(log, "train-fm: final loss " + format_double(trace.back().loss) + " -> " + cfg.flow_path().string());
}

void run_generate(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  fs::path cond_path = cfg.generate.conditions.empty() ? cfg.conditions_path() : cfg.generate.conditions;
  require_file(cond_path, "condition file");
  require_file(cfg.layout_path(), "layout");
  require_file(cfg.vae_path(), "VAE checkpoint");
  require_file(cfg.flow_path(), "flow checkpoint");
  BlockLayout layout = read_layout(cfg.layout_path());
  std::vector<double> factors;
  auto vae = load_vae(cfg, layout, &factors);
  auto net = load_flow(cfg, layout);
  ConditionSchema schema = vae->schema();
  LabeledConditions lc = read_conditions_csv(cond_path, schema);
  std::vector<std::string> ids;
  for (const auto& id : lc.cell_ids) ids.push_back("gen_" + id);
  Rng rng = stage_rng(cfg, "flow").substream("sample");
  ExpressionMatrix out = generate(*vae, *net, layout, factors, lc.table, ids, rng);
  fs::create_directories(cfg.out);
  write_matrix(cfg.generated_path(), out);
  write_conditions_csv(cfg.generated_conditions_path(), ids, lc.table, schema);
  say(log, "generate: " + std::to_string(out.n_cells()) + " cells -> " + cfg.generated_path().string());
}

void run_transfer(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  if (cfg.transfer.set.empty()) throw ValidationError("transfer: transfer.set names no target labels");
  require_file(cfg.counts_path(), "expression matrix");
  require_file(cfg.conditions_path(), "condition file");
  require_file(cfg.layout_path(), "layout");
  require_file(cfg.vae_path(), "VAE checkpoint");
  BlockLayout layout = read_layout(cfg.layout_path());
  std::vector<double> factors;
  auto vae = load_vae(cfg, layout, &factors);
  ConditionSchema schema = vae->schema();
  ExpressionMatrix raw = read_matrix(cfg.counts_path());
  LabeledConditions lc = read_conditions_csv(cfg.conditions_path(), schema);
  ConditionTable conds = align_conditions(lc, raw.cell_ids(), cfg.conditions_path());
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < conds.n_rows; ++r) {
    if (matches(conds, r, schema, cfg.transfer.where)) rows.push_back(r);
  }
  if (rows.empty()) throw ValidationError("transfer: no cells match transfer.where");
  ExpressionMatrix scaled = prepare_expression(raw.select_cells(rows), layout, &factors);
  ConditionTable source = conds.select_rows(rows);
  ConditionTable target = source;
  for (const auto& [type, label] : cfg.transfer.set) {
    std::size_t t = schema.type_index(type);
    std::uint32_t idx = schema.index_of(t, label);
    for (std::size_t r = 0; r < target.n_rows; ++r) target.at(r, t) = idx;
  }
  Rng rng = stage_rng(cfg, "vae").substream("transfer");
  Tensor x_hat = transfer(*vae, reshape_to_blocks(scaled, layout), source, target, rng);
  std::vector<std::string> ids;
  for (const auto& id : scaled.cell_ids()) ids.push_back("tr_" + id);
  ExpressionMatrix out = unscale(with_scale(scatter_from_blocks(x_hat, layout, ids), factors));
  fs::create_directories(cfg.out);
  write_matrix(cfg.transferred_path(), out);
  write_conditions_csv(cfg.transferred_conditions_path(), ids, target, schema);
  say(log, "transfer: " + std::to_string(out.n_cells()) + " cells -> " + cfg.transferred_path().string());
}

std::vector<MetricsRow> evaluate_by_condition(const DenseMatrix& real, const std::vector<std::string>& real_keys,
                                              const DenseMatrix& gen, const std::vector<std::string>& gen_keys,
                                              std::size_t max_exact, std::uint64_t seed) {
  if (real.rows != real_keys.size() || gen.rows != gen_keys.size()) {
    throw DimensionError("evaluate: condition keys not aligned with matrices");
  }
  if (real.cols != gen.cols) throw DimensionError("evaluate: real and generated dimensions differ");
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < real.rows; ++i) groups[real_keys[i]].first.push_back(i);
  for (std::size_t i = 0; i < gen.rows; ++i) {
    auto it = groups.find(gen_keys[i]);
    if (it != groups.end()) it->second.second.push_back(i);
  }
  auto take = [](const DenseMatrix& m, const std::vector<std::size_t>& rows) {
    DenseMatrix out(rows.size(), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * m.cols), m.cols,
                  out.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return out;
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<MetricsRow> out;
  std::uint64_t k = 0;
  for (const auto& [key, members] : groups) {
    MetricsRow row;
    row.labels = split_labels(key);
    row.n_real = members.first.size();
    row.n_gen = members.second.size();
    DenseMatrix r = take(real, members.first), g = take(gen, members.second);
    if (row.n_gen >= 1) {
      row.wd = wasserstein2(r, g, max_exact, Rng(seed).substream(k).seed());
      row.stats = gene_mean_stats(r, g);
    } else {
      row.wd.value = nan;
      row.stats = {nan, nan, nan, false};
    }
    row.mmd = row.n_gen >= 2 && row.n_real >= 2 ? mmd_rbf(r, g) : nan;
    out.push_back(std::move(row));
    ++k;
  }
  return out;
}

std::string metrics_csv(const std::vector<std::string>& columns, const std::vector<MetricsRow>& rows) {
  auto num = [](double v) { return std::isnan(v) ? std::string("nan") : format_double(v); };
  std::string out;
  for (const auto& c : columns) out += c + ",";
  out += "n_real,n_gen,WD,WD_mode,MMD,PCC,R2,MSE\n";
  for (const auto& r : rows) {
    for (const auto& l : r.labels) out += l + ",";
    out += std::to_string(r.n_real) + "," + std::to_string(r.n_gen) + "," + num(r.wd.value) + "," +
           (r.wd.exact ? "exact" : "approx") + "," + num(r.mmd) + "," + num(r.stats.pcc) + "," + num(r.stats.r2) + "," +
           num(r.stats.mse) + "\n";
  }
  return out;
}

void run_evaluate(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  fs::path real_path = cfg.paths.eval_real.empty() ? cfg.counts_path() : cfg.paths.eval_real;
  fs::path real_cond = cfg.paths.eval_real_conditions.empty() ? cfg.conditions_path() : cfg.paths.eval_real_conditions;
  fs::path gen_path = cfg.paths.eval_generated.empty() ? cfg.generated_path() : cfg.paths.eval_generated;
  fs::path gen_cond =
      cfg.paths.eval_generated_conditions.empty() ? cfg.generated_conditions_path() : cfg.paths.eval_generated_conditions;
  for (const auto& [p, what] : {std::pair{real_path, "real matrix"}, std::pair{real_cond, "real conditions"},
                                std::pair{gen_path, "generated matrix"}, std::pair{gen_cond, "generated conditions"}}) {
    require_file(p, what);
  }
  ExpressionMatrix real = read_matrix(real_path);
  ExpressionMatrix gen = read_matrix(gen_path);

  std::unique_ptr<VaeModel> vae;
  BlockLayout layout;
  ConditionSchema schema;
  if (cfg.evaluate.space == EvalSpace::Latent) {
    require_file(cfg.layout_path(), "layout");
    require_file(cfg.vae_path(), "VAE checkpoint");
    layout = read_layout(cfg.layout_path());
    vae = load_vae(cfg, layout, nullptr);
    schema = vae->schema();
  }
  LabeledConditions rl = read_conditions_csv(real_cond, schema);
  LabeledConditions gl = read_conditions_csv(gen_cond, schema);
  ConditionTable rc = align_conditions(rl, real.cell_ids(), real_cond);
  ConditionTable gc = align_conditions(gl, gen.cell_ids(), gen_cond);

  std::vector<std::string> columns = cfg.evaluate.condition_columns;
  if (columns.empty()) {
    for (const auto& t : schema.types()) columns.push_back(t.name);
  }
  std::vector<std::size_t> col_idx;
  for (const auto& c : columns) col_idx.push_back(schema.type_index(c));

  ExpressionMatrix real_s = to_maxabs(real, cfg.evaluate.real_stage, {});
  std::unordered_map<std::string, double> ref;
  if (cfg.evaluate.real_stage != MatrixStage::MaxAbs) {
    for (std::size_t j = 0; j < real_s.n_genes(); ++j) ref.emplace(real_s.gene_ids()[j], real_s.scale_factors()[j]);
  } else {
    for (const auto& g : real_s.gene_ids()) ref.emplace(g, 1.0);
  }
  ExpressionMatrix gen_s = to_maxabs(gen, cfg.evaluate.generated_stage, ref);

  DenseMatrix rp, gp;
  if (cfg.evaluate.space == EvalSpace::Latent) {
    rp = latent_points(*vae, layout, real_s, rc);
    gp = latent_points(*vae, layout, gen_s, gc);
  } else {
    rp = points_of(select_genes(real_s, gen_s.gene_ids()));
    gp = points_of(gen_s);
  }
  std::vector<std::string> rk(rc.n_rows), gk(gc.n_rows);
  for (std::size_t r = 0; r < rc.n_rows; ++r) rk[r] = join_labels(rc, r, schema, col_idx);
  for (std::size_t r = 0; r < gc.n_rows; ++r) gk[r] = join_labels(gc, r, schema, col_idx);
  auto rows = evaluate_by_condition(rp, rk, gp, gk, cfg.evaluate.max_exact, stage_rng(cfg, "eval").seed());
  fs::create_directories(cfg.metrics_path().parent_path().empty() ? "." : cfg.metrics_path().parent_path());
  write_file_atomic(cfg.metrics_path(), metrics_csv(columns, rows));
  say(log, "evaluate: " + std::to_string(rows.size()) + " condition rows (" + space_name(cfg.evaluate.space) +
               " space) -> " + cfg.metrics_path().string());
}

}  // namespace blockflow
