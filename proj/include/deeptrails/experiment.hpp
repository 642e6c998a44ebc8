#pragma once

// Config-driven experiment pipeline: generate -> train -> evaluate -> report.
// Every random stream is derived from the single master seed.

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "deeptrails/behavior.hpp"
#include "deeptrails/dataset.hpp"
#include "deeptrails/errors.hpp"
#include "deeptrails/forest.hpp"
#include "deeptrails/markov_baseline.hpp"
#include "deeptrails/report.hpp"
#include "deeptrails/rng.hpp"
#include "deeptrails/trails_eval.hpp"
#include "deeptrails/transformer.hpp"

namespace deeptrails {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kOutputDirEnv = "DEEPTRAILS_OUTPUT_DIR";

enum class ExperimentKind { HypTrails, MixedTrails, SubTrails, BaselineAblation };
enum class ModelFamily { Transformer, Forest };

inline std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::HypTrails: return "hyptrails";
    case ExperimentKind::MixedTrails: return "mixedtrails";
    case ExperimentKind::SubTrails: return "subtrails";
    case ExperimentKind::BaselineAblation: return "baseline-ablation";
  }
  return "?";
}

inline std::string_view to_string(ModelFamily f) { return f == ModelFamily::Transformer ? "transformer" : "forest"; }

struct TrainingBehavior {
  BehaviorSpec spec;
  int walks_per_node = 1000;
};

struct ModelSection {
  ModelFamily family = ModelFamily::Transformer;
  ModelConfig transformer;
  ForestConfig forest;
  DecayConfig decay;
};

struct SubTrailsSection {
  int walks_per_behavior = 10;
  double cluster_threshold = kDefaultClusterThreshold;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::HypTrails;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  GraphConfig graph;
  int walk_length = 20;
  std::vector<TrainingBehavior> training;
  std::vector<NamedHypothesis> hypotheses;
  ModelSection model;
  TrainConfig train;
  int eval_walks_per_node = 100;
  std::size_t eval_batch_size = 256;
  bool probe = false;
  SubTrailsSection subtrails;
  std::vector<double> kappas = default_kappa_grid();
  Json source;  // the parsed config, hashed into the manifest
};

/// Sub-seed streams split from the master seed.
namespace seed_stream {
inline constexpr std::uint64_t graph = 1, init = 3, shuffle = 4, forest = 5, eval = 6, subtrails_eval = 7, probe = 8,
                               noise = 200, training = 100;
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }
  bool has(const std::string& key) const {
    seen_.insert(key);
    return j_.contains(key);
  }
  const Json& raw(const std::string& key) const {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    return convert<T>(j_.at(key), field(key));
  }

  template <class T>
  T require(const std::string& key) const {
    if (!has(key)) throw ConfigError(field(key) + ": required field is missing");
    return convert<T>(j_.at(key), field(key));
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown field");
    }
  }

  template <class T>
  static T convert(const Json& v, const std::string& name) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(name + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else {
      if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
      return v.get<T>();
    }
  }

 private:
  const Json& j_;
  std::string path_;
  mutable std::set<std::string> seen_;
};

inline BehaviorSpec parse_behavior(const ConfigReader& r) {
  const auto name = r.require<std::string>("behavior");
  const auto kind = parse_behavior_kind(name);
  if (!kind) throw ConfigError(r.field("behavior") + ": unknown behavior '" + name + "'");
  BehaviorSpec spec{*kind, r.get<double>("bias", 1.0)};
  if (!(spec.bias > 0.0 && spec.bias <= 1.0)) throw ConfigError(r.field("bias") + ": must lie in (0, 1]");
  return spec;
}

inline void wrap_config_error(const std::string& field, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(field, 0) == 0) throw;
    throw ConfigError(field + ": " + msg);
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const Json& j) {
  using detail::ConfigReader;
  ExperimentConfig c;
  c.source = j;
  const ConfigReader r(j, "");
  c.name = r.get<std::string>("name", c.name);
  const auto kind = r.require<std::string>("kind");
  if (kind == "hyptrails") c.kind = ExperimentKind::HypTrails;
  else if (kind == "mixedtrails") c.kind = ExperimentKind::MixedTrails;
  else if (kind == "subtrails") c.kind = ExperimentKind::SubTrails;
  else if (kind == "baseline-ablation") c.kind = ExperimentKind::BaselineAblation;
  else throw ConfigError("kind: unknown experiment kind '" + kind + "'");
  c.seed = r.require<std::uint64_t>("seed");
  c.output_dir = r.get<std::string>("output_dir", c.output_dir);
  c.walk_length = r.get<int>("walk_length", c.walk_length);
  if (c.walk_length < 2) throw ConfigError("walk_length: must be at least 2");

  if (r.has("graph")) {
    const ConfigReader g(r.raw("graph"), "graph");
    c.graph.n = g.get<int>("n", c.graph.n);
    c.graph.m = g.get<int>("m", c.graph.m);
    g.reject_unknown();
  }
  c.graph.seed = derive_seed(c.seed, seed_stream::graph);
  c.graph.validate();

  if (!r.has("training")) throw ConfigError("training: required field is missing");
  const auto& tr = r.raw("training");
  if (!tr.is_array() || tr.empty()) throw ConfigError("training: expected a non-empty array");
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const ConfigReader b(tr[i], "training[" + std::to_string(i) + "]");
    TrainingBehavior t{detail::parse_behavior(b), b.get<int>("walks_per_node", 1000)};
    if (t.walks_per_node < 1) throw ConfigError(b.field("walks_per_node") + ": must be positive");
    b.reject_unknown();
    if (c.kind == ExperimentKind::SubTrails) {
      const auto k = t.spec.kind;
      if (k != BehaviorKind::Even && k != BehaviorKind::Odd && k != BehaviorKind::FirstEven && k != BehaviorKind::FirstOdd) {
        throw ConfigError(b.field("behavior") + ": subtrails training behaviors must be even, odd, first-even or first-odd");
      }
    }
    c.training.push_back(t);
  }

  if (r.has("hypotheses")) {
    const auto& hs = r.raw("hypotheses");
    if (!hs.is_array()) throw ConfigError("hypotheses: expected an array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < hs.size(); ++i) {
      const ConfigReader h(hs[i], "hypotheses[" + std::to_string(i) + "]");
      NamedHypothesis nh;
      nh.spec = detail::parse_behavior(h);
      nh.name = h.get<std::string>("name", std::string(to_string(nh.spec.kind)));
      if (!names.insert(nh.name).second) throw ConfigError(h.field("name") + ": duplicate hypothesis name '" + nh.name + "'");
      h.reject_unknown();
      c.hypotheses.push_back(nh);
    }
  }
  const bool needs_hyps = c.kind != ExperimentKind::SubTrails;
  if (needs_hyps && c.hypotheses.empty()) throw ConfigError("hypotheses: at least one hypothesis is required");

  if (r.has("model")) {
    const ConfigReader m(r.raw("model"), "model");
    const auto fam = m.get<std::string>("family", "transformer");
    if (fam == "transformer") c.model.family = ModelFamily::Transformer;
    else if (fam == "forest") c.model.family = ModelFamily::Forest;
    else throw ConfigError("model.family: expected 'transformer' or 'forest'");
    auto& t = c.model.transformer;
    t.n_layers = m.get<int>("n_layers", t.n_layers);
    t.n_heads = m.get<int>("n_heads", t.n_heads);
    t.d_model = m.get<int>("d_model", t.d_model);
    t.context = m.get<int>("context", t.context);
    t.dropout = m.get<double>("dropout", t.dropout);
    auto& f = c.model.forest;
    f.n_trees = m.get<int>("n_trees", f.n_trees);
    f.max_depth = m.get<int>("max_depth", f.max_depth);
    f.min_samples_split = m.get<int>("min_samples_split", f.min_samples_split);
    f.features_per_split = m.get<double>("features_per_split", f.features_per_split);
    f.bootstrap = m.get<bool>("bootstrap", f.bootstrap);
    f.max_samples = m.get<std::size_t>("max_samples", f.max_samples);
    c.model.decay.gamma = m.get<double>("gamma", c.model.decay.gamma);
    m.reject_unknown();
  }
  c.model.transformer.vocab_size = c.graph.n + 2;
  if (c.model.transformer.context < c.walk_length + 1) {
    throw ConfigError("model.context: must be at least walk_length + 1");
  }
  detail::wrap_config_error("model", [&] {
    if (c.model.family == ModelFamily::Transformer) c.model.transformer.validate();
    else {
      c.model.forest.validate();
      c.model.decay.validate();
    }
  });

  if (r.has("train")) {
    const ConfigReader t(r.raw("train"), "train");
    c.train.learning_rate = t.get<double>("learning_rate", c.train.learning_rate);
    c.train.batch_size = t.get<int>("batch_size", c.train.batch_size);
    c.train.max_epochs = t.get<int>("max_epochs", c.train.max_epochs);
    c.train.patience = t.get<int>("patience", c.train.patience);
    c.train.validation_fraction = t.get<double>("validation_fraction", c.train.validation_fraction);
    t.reject_unknown();
  }
  c.train.seed = derive_seed(c.seed, seed_stream::shuffle);
  c.train.validate();
  c.model.forest.seed = derive_seed(c.seed, seed_stream::forest);

  if (r.has("eval")) {
    const ConfigReader e(r.raw("eval"), "eval");
    c.eval_walks_per_node = e.get<int>("walks_per_node", c.eval_walks_per_node);
    c.eval_batch_size = e.get<std::size_t>("batch_size", c.eval_batch_size);
    if (c.eval_walks_per_node < 1) throw ConfigError("eval.walks_per_node: must be positive");
    if (c.eval_batch_size < 1) throw ConfigError("eval.batch_size: must be positive");
    e.reject_unknown();
  }
  c.probe = r.get<bool>("probe", c.probe);
  if (c.probe && c.model.family != ModelFamily::Transformer) {
    throw ConfigError("probe: the embedding probe needs the transformer family");
  }
  if (r.has("subtrails")) {
    const ConfigReader s(r.raw("subtrails"), "subtrails");
    c.subtrails.walks_per_behavior = s.get<int>("walks_per_behavior", c.subtrails.walks_per_behavior);
    c.subtrails.cluster_threshold = s.get<double>("cluster_threshold", c.subtrails.cluster_threshold);
    if (c.subtrails.walks_per_behavior < 1) throw ConfigError("subtrails.walks_per_behavior: must be positive");
    if (!(c.subtrails.cluster_threshold >= 0.0)) throw ConfigError("subtrails.cluster_threshold: must be non-negative");
    s.reject_unknown();
  }
  if (r.has("baseline")) {
    const ConfigReader b(r.raw("baseline"), "baseline");
    if (b.has("kappas")) {
      const auto& ks = b.raw("kappas");
      if (!ks.is_array() || ks.empty()) throw ConfigError("baseline.kappas: expected a non-empty array");
      c.kappas.clear();
      for (std::size_t i = 0; i < ks.size(); ++i) {
        const auto k = ConfigReader::convert<double>(ks[i], "baseline.kappas[" + std::to_string(i) + "]");
        if (!(k >= 0.0)) throw ConfigError("baseline.kappas[" + std::to_string(i) + "]: must be non-negative");
        c.kappas.push_back(k);
      }
    }
    b.reject_unknown();
  }
  r.reject_unknown();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(c.source.dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Pipeline stages

inline std::string subtrails_feature_label(BehaviorKind k, int a, int b) {
  return std::string(to_string(k)) + "/" + std::to_string(a) + std::to_string(b);
}

/// Training walks for every configured behavior, in config order. SubTrails
/// walks carry behavior one-hot features plus two random noise bits.
inline SequenceDataset build_training_data(const ExperimentConfig& c, const StateGraph& graph) {
  SequenceDataset data{build_vocabulary(graph.size()), {}, {}};
  const bool features = c.kind == ExperimentKind::SubTrails;
  if (features) data.schema = subtrails_schema();
  Rng noise(derive_seed(c.seed, seed_stream::noise));
  for (std::size_t i = 0; i < c.training.size(); ++i) {
    const auto& t = c.training[i];
    const auto ws = sample_walk_set(graph, t.spec, t.walks_per_node, c.walk_length,
                                    derive_seed(c.seed, seed_stream::training + i));
    for (const auto& w : ws.walks) {
      std::optional<FeatureVector> f;
      if (features) {
        const int a = static_cast<int>(noise.below(2));
        const int b = static_cast<int>(noise.below(2));
        f = make_subtrails_features(t.spec.kind, a, b);
      }
      data.add(w, f, std::string(to_string(t.spec.kind)));
    }
  }
  return data;
}

using ProgressLog = std::function<void(const std::string&)>;

inline std::shared_ptr<SequenceModel> fit_model(const ExperimentConfig& c, const SequenceDataset& data,
                                                const ProgressLog& log = {}) {
  if (c.model.family == ModelFamily::Forest) {
    if (log) log("fitting forest on " + std::to_string(data.records.size()) + " walks");
    return std::make_shared<ForestModel>(fit_forest(data, c.model.decay, c.model.forest));
  }
  ModelConfig mc = c.model.transformer;
  mc.feature_dim = data.has_features() ? static_cast<int>(data.schema.encoded_width()) : 0;
  auto init = init_model(mc, derive_seed(c.seed, seed_stream::init), data.schema);
  if (log) log("training transformer on " + std::to_string(data.records.size()) + " walks");
  auto model = train(std::move(init), data, c.train, nullptr, [&](int epoch, double tl, double vl) {
    if (log) log("epoch " + std::to_string(epoch) + " train " + fmt_num(tl) + " validation " + fmt_num(vl));
  });
  return std::make_shared<TransformerModel>(std::move(model));
}

struct SubTrailsResult {
  LossMatrix matrix;
  std::vector<BehaviorKind> row_behavior;
  std::vector<BehaviorKind> col_behavior;
  ClusterResult feature_clusters;
  ClusterResult walk_clusters;
};

inline const std::array<BehaviorKind, 4>& subtrails_behaviors() {
  static const std::array<BehaviorKind, 4> b{BehaviorKind::Even, BehaviorKind::Odd, BehaviorKind::FirstEven,
                                             BehaviorKind::FirstOdd};
  return b;
}

/// 16 feature sets (4 behaviors x 4 noise patterns) against walks_per_behavior
/// fresh walks of each behavior from uniformly drawn start nodes.
inline SubTrailsResult run_subtrails_stage(const ExperimentConfig& c, const SequenceModel& model,
                                           const StateGraph& graph) {
  SubTrailsResult out;
  std::vector<LabeledFeatures> feats;
  for (auto k : subtrails_behaviors()) {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        feats.push_back({subtrails_feature_label(k, a, b), make_subtrails_features(k, a, b)});
        out.row_behavior.push_back(k);
      }
    }
  }
  const auto vocab = build_vocabulary(graph.size());
  const auto wpb = static_cast<std::size_t>(c.subtrails.walks_per_behavior);
  std::vector<LabeledWalk> walks;
  for (std::size_t bi = 0; bi < subtrails_behaviors().size(); ++bi) {
    const auto k = subtrails_behaviors()[bi];
    const std::uint64_t seed = derive_seed(derive_seed(c.seed, seed_stream::subtrails_eval), bi);
    Rng start_rng(derive_seed(seed, 0x5747));
    std::vector<int> starts(wpb);
    for (auto& s : starts) s = static_cast<int>(start_rng.below(static_cast<std::uint64_t>(graph.size())));
    const HypothesisKernel kernel(graph, {k, 1.0}, c.walk_length);
    const auto ws = sample_walks(kernel, starts, seed);
    for (std::size_t w = 0; w < ws.size(); ++w) {
      walks.push_back({std::string(to_string(k)) + "#" + std::to_string(w), encode_walk(vocab, ws[w])});
      out.col_behavior.push_back(k);
    }
  }
  out.matrix = run_deep_subtrails(model, feats, walks);
  const auto rows = matrix_rows(out.matrix);
  out.feature_clusters = cluster_rows(cosine_distances(rows), c.subtrails.cluster_threshold, rows);
  std::vector<std::vector<double>> cols(out.matrix.cols(), std::vector<double>(out.matrix.rows()));
  for (std::size_t r = 0; r < out.matrix.rows(); ++r)
    for (std::size_t j = 0; j < out.matrix.cols(); ++j) cols[j][r] = out.matrix.at(r, j);
  out.walk_clusters = cluster_rows(cosine_distances(cols), c.subtrails.cluster_threshold, cols);
  return out;
}

struct ProbeResult {
  double trained = 0.0;
  double untrained = 0.0;
  ClusterResult layout;  // parity groups and 2-D coordinates of the state embeddings
};

inline ProbeResult run_probe_stage(const ExperimentConfig& c, const TransformerModel& model, int n_states) {
  ProbeConfig pc;
  pc.seed = derive_seed(c.seed, seed_stream::probe);
  ProbeResult p;
  p.trained = embedding_parity_probe(model, n_states, pc);
  ModelConfig mc = model.config();
  const auto fresh = init_model(mc, derive_seed(c.seed, seed_stream::init), model.feature_schema());
  p.untrained = embedding_parity_probe(fresh, n_states, pc);
  const auto rows = state_embeddings(model, n_states);
  p.layout.coords = pca_2d(rows);
  for (int s = 0; s < n_states; ++s) p.layout.cluster.push_back(StateGraph::node_class(s) == NodeClass::Odd ? 1 : 0);
  p.layout.n_clusters = 2;
  p.layout.linkage = "parity";
  return p;
}

struct ExperimentResult {
  ExperimentConfig config;
  StateGraph graph;
  std::shared_ptr<SequenceModel> model;
  std::optional<HypTrailsReport> hyptrails;
  std::optional<ProbeResult> probe;
  std::optional<SubTrailsResult> subtrails;
  std::optional<EvidenceTable> evidence;
  std::vector<std::string> outputs;
  std::vector<std::string> warnings;
};

namespace detail {

inline void write_manifest(const ExperimentConfig& c, const std::filesystem::path& dir,
                           const std::vector<std::string>& outputs, const std::string& status,
                           const std::string& error = "") {
  Json m{{"tool", "deeptrails"},
         {"version", kToolVersion},
         {"name", c.name},
         {"kind", to_string(c.kind)},
         {"model_family", to_string(c.model.family)},
         {"seed", c.seed},
         {"config_hash", config_hash(c)},
         {"config", c.source},
         {"status", status},
         {"outputs", outputs},
         {"artifact_versions",
          {{"transformer_checkpoint", kTransformerCheckpointVersion},
           {"forest_checkpoint", kForestCheckpointVersion},
           {"dataset", kDatasetFormatVersion}}}};
  if (!error.empty()) m["error"] = error;
  write_text_file((dir / "manifest.json").string(), m.dump(2) + "\n");
}

}  // namespace detail

/// Output directory after applying the environment override.
inline std::string resolve_output_dir(const std::string& configured) {
  const char* env = std::getenv(kOutputDirEnv);
  return env && *env ? std::string(env) : configured;
}

/// Runs the full pipeline and writes the report bundle into `output_dir`.
/// On failure the manifest is marked partial and the exception propagates.
inline ExperimentResult run_experiment(const ExperimentConfig& config, const std::string& output_dir,
                                       const ProgressLog& log = {}) {
  namespace fs = std::filesystem;
  const fs::path dir(output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("output_dir: cannot create " + output_dir);

  ExperimentResult res;
  res.config = config;
  auto emit = [&](const std::string& file, const std::string& content) {
    write_text_file((dir / file).string(), content);
    res.outputs.push_back(file);
  };
  try {
    res.graph = generate_ba_graph(config.graph);
    {
      std::ostringstream g;
      write_graph(g, res.graph, config.graph);
      emit("graph.txt", g.str());
    }
    if (log) log("generating training walks");
    const auto data = build_training_data(config, res.graph);

    if (config.kind == ExperimentKind::BaselineAblation) {
      std::vector<std::vector<int>> walks;
      walks.reserve(data.records.size());
      for (const auto& r : data.records) walks.push_back(decode_walk(data.vocab, r.tokens));
      const auto counts = count_transitions(walks, res.graph.size());
      std::vector<std::pair<std::string, BehaviorSpec>> specs;
      for (const auto& h : config.hypotheses) specs.emplace_back(h.name, h.spec);
      res.evidence = kappa_sweep(counts, first_order_hypotheses(res.graph, specs, config.walk_length), config.kappas);
      emit("evidence.csv", evidence_csv(*res.evidence));
      emit("evidence.svg", render_evidence(*res.evidence));
      detail::write_manifest(config, dir, res.outputs, "complete");
      return res;
    }

    res.model = fit_model(config, data, log);
    if (auto* t = dynamic_cast<TransformerModel*>(res.model.get())) {
      emit("model.json", transformer_to_json(*t).dump() + "\n");
    } else if (auto* f = dynamic_cast<ForestModel*>(res.model.get())) {
      emit("model.json", forest_to_json(*f).dump() + "\n");
    }

    if (config.kind == ExperimentKind::SubTrails) {
      if (log) log("evaluating loss matrix");
      res.subtrails = run_subtrails_stage(config, *res.model, res.graph);
      const auto& s = *res.subtrails;
      emit("loss_matrix.csv", loss_matrix_csv(s.matrix));
      emit("loss_matrix.svg", render_heatmap(s.matrix));
      emit("feature_clusters.csv", clusters_csv(s.matrix.row_labels, s.feature_clusters));
      emit("feature_clusters.svg", render_scatter(scatter_points(s.matrix.row_labels, s.feature_clusters), "feature sets"));
      emit("walk_clusters.csv", clusters_csv(s.matrix.col_labels, s.walk_clusters));
      emit("walk_clusters.svg", render_scatter(scatter_points(s.matrix.col_labels, s.walk_clusters), "walks"));
    }

    if (!config.hypotheses.empty()) {
      if (log) log("evaluating " + std::to_string(config.hypotheses.size()) + " hypotheses");
      HypothesisEvalConfig hc{config.eval_walks_per_node, config.walk_length, derive_seed(config.seed, seed_stream::eval),
                              config.eval_batch_size};
      if (res.model->uses_features()) {
        if (log) log("skipping hypothesis curves: the model is feature-conditioned");
      } else {
        res.hyptrails = run_deep_hyptrails(*res.model, res.graph, config.hypotheses, hc);
        emit("rank_curves.csv", rank_curves_csv(res.hyptrails->results));
        emit("hypotheses.csv", hypothesis_summary_csv(*res.hyptrails));
        emit("rank_curves.svg", render_rank_curves(res.hyptrails->results, res.model->vocab_size(), &res.warnings));
      }
    }

    if (config.probe) {
      const auto* t = dynamic_cast<const TransformerModel*>(res.model.get());
      res.probe = run_probe_stage(config, *t, res.graph.size());
      emit("probe.csv", "model,accuracy\ntrained," + fmt_num(res.probe->trained) + "\nuntrained," +
                            fmt_num(res.probe->untrained) + "\n");
      std::vector<std::string> labels;
      for (int s = 0; s < res.graph.size(); ++s) labels.push_back(std::to_string(s));
      emit("embeddings.csv", clusters_csv(labels, res.probe->layout));
      emit("embeddings.svg", render_scatter(scatter_points(labels, res.probe->layout), "state embeddings by parity"));
    }
    detail::write_manifest(config, dir, res.outputs, "complete");
  } catch (const std::exception& e) {
    detail::write_manifest(config, dir, res.outputs, "partial", e.what());
    throw;
  }
  return res;
}

}  // namespace deeptrails

namespace deeptrails {

/// Loads either checkpoint family, dispatching on the format tag.
inline std::shared_ptr<SequenceModel> load_model(const std::string& path, int expected_vocab = 0) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  const std::string format = j.is_object() ? j.value("format", "") : "";
  if (format == "deeptrails-transformer") return std::make_shared<TransformerModel>(transformer_from_json(j, expected_vocab));
  if (format == "deeptrails-forest") return std::make_shared<ForestModel>(forest_from_json(j, expected_vocab));
  throw FormatError("unknown checkpoint format in " + path);
}

}  // namespace deeptrails
