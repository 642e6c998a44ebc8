// deeptrails command-line driver.
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"

#include "deeptrails/experiment.hpp"

namespace dt = deeptrails;
namespace fs = std::filesystem;

namespace {

void log_line(const std::string& msg) { std::cerr << "[deeptrails] " << msg << std::endl; }

/// "behavior", "behavior:bias", "name=behavior" or "name=behavior:bias".
dt::NamedHypothesis parse_hypothesis_arg(const std::string& arg) {
  std::string name, rest = arg;
  if (const auto eq = arg.find('='); eq != std::string::npos) {
    name = arg.substr(0, eq);
    rest = arg.substr(eq + 1);
  }
  double bias = 1.0;
  if (const auto colon = rest.find(':'); colon != std::string::npos) {
    try {
      bias = std::stod(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw dt::ConfigError("--hyp " + arg + ": bad bias");
    }
    rest = rest.substr(0, colon);
  }
  const auto kind = dt::parse_behavior_kind(rest);
  if (!kind) throw dt::ConfigError("--hyp " + arg + ": unknown behavior '" + rest + "'");
  dt::BehaviorSpec spec{*kind, bias};
  if (!(bias > 0.0 && bias <= 1.0)) throw dt::ConfigError("--hyp " + arg + ": bias must lie in (0, 1]");
  return {name.empty() ? arg : name, spec};
}

std::vector<dt::NamedHypothesis> parse_hypotheses(const std::vector<std::string>& args) {
  std::vector<dt::NamedHypothesis> out;
  for (const auto& a : args) out.push_back(parse_hypothesis_arg(a));
  return out;
}

std::string output_dir(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  return dt::resolve_output_dir(fallback);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw dt::ConfigError("cannot create output directory " + dir);
}

/// Re-renders every plot whose table is present in `dir`.
int regenerate_plots(const std::string& dir) {
  const fs::path d(dir);
  if (!fs::is_directory(d)) throw dt::ConfigError("--dir: not a directory: " + dir);
  int rendered = 0;
  if (fs::exists(d / "rank_curves.csv")) {
    const auto curves = dt::parse_rank_curves_csv(dt::read_text_file((d / "rank_curves.csv").string()));
    int vocab = 0;
    if (fs::exists(d / "graph.txt")) vocab = dt::load_graph((d / "graph.txt").string()).graph.size() + 2;
    for (const auto& c : curves)
      for (double r : c.stats.mean_rank) vocab = std::max(vocab, static_cast<int>(std::ceil(r)));
    std::vector<std::string> warnings;
    dt::write_text_file((d / "rank_curves.svg").string(), dt::render_rank_curves(curves, vocab, &warnings));
    for (const auto& w : warnings) log_line("warning: " + w);
    ++rendered;
  }
  if (fs::exists(d / "loss_matrix.csv")) {
    const auto m = dt::parse_loss_matrix_csv(dt::read_text_file((d / "loss_matrix.csv").string()));
    dt::write_text_file((d / "loss_matrix.svg").string(), dt::render_heatmap(m));
    ++rendered;
  }
  for (const char* stem : {"feature_clusters", "walk_clusters", "embeddings"}) {
    const auto csv = d / (std::string(stem) + ".csv");
    if (!fs::exists(csv)) continue;
    const auto pts = dt::parse_clusters_csv(dt::read_text_file(csv.string()));
    dt::write_text_file((d / (std::string(stem) + ".svg")).string(), dt::render_scatter(pts, stem));
    ++rendered;
  }
  if (fs::exists(d / "evidence.csv")) {
    const auto t = dt::parse_evidence_csv(dt::read_text_file((d / "evidence.csv").string()));
    dt::write_text_file((d / "evidence.svg").string(), dt::render_evidence(t));
    ++rendered;
  }
  if (rendered == 0) throw dt::ConfigError("--dir: no report tables found in " + dir);
  log_line("rendered " + std::to_string(rendered) + " plot(s) in " + dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Large tensors are allocated and freed every batch; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"deeptrails: hypothesis evaluation with frozen sequence models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dt::kToolVersion);

  // gen-graph
  dt::GraphConfig gcfg;
  std::string graph_out;
  auto* gen_graph = app.add_subcommand("gen-graph", "Generate a preferential-attachment state graph");
  gen_graph->add_option("--n", gcfg.n, "Number of states")->capture_default_str();
  gen_graph->add_option("--m", gcfg.m, "Edges per new node")->capture_default_str();
  gen_graph->add_option("--seed", gcfg.seed, "Seed")->capture_default_str();
  gen_graph->add_option("--out", graph_out, "Output edge-list file")->required();

  // gen-walks
  std::string walks_graph, walks_out;
  std::vector<std::string> walk_behaviors;
  double walk_bias = 1.0;
  int walks_per_node = 1000, walk_length = 20;
  std::uint64_t walk_seed = 0;
  bool subtrails_features = false;
  auto* gen_walks = app.add_subcommand("gen-walks", "Sample behavior walks into a dataset file");
  gen_walks->add_option("--graph", walks_graph, "Graph file")->required();
  gen_walks->add_option("--behavior", walk_behaviors, "Behavior(s); repeat for a mixed dataset")->required();
  gen_walks->add_option("--bias", walk_bias, "Behavior bias p")->capture_default_str();
  gen_walks->add_option("--walks-per-node", walks_per_node, "Walks per start node and behavior")->capture_default_str();
  gen_walks->add_option("--length", walk_length, "States per walk")->capture_default_str();
  gen_walks->add_option("--seed", walk_seed, "Seed")->capture_default_str();
  gen_walks->add_flag("--subtrails-features", subtrails_features, "Attach behavior one-hot plus two noise bits");
  gen_walks->add_option("--out", walks_out, "Output dataset (JSON lines)")->required();

  // train
  std::string train_data, train_out, family = "transformer";
  dt::TrainConfig tcfg;
  dt::ModelConfig mcfg;
  dt::ForestConfig fcfg;
  dt::DecayConfig dcfg;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "Train a transformer or forest language model");
  train->add_option("--data", train_data, "Dataset file")->required();
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--family", family, "transformer or forest")->check(CLI::IsMember({"transformer", "forest"}));
  train->add_option("--seed", train_seed, "Seed")->capture_default_str();
  train->add_option("--lr", tcfg.learning_rate, "Learning rate")->capture_default_str();
  train->add_option("--batch-size", tcfg.batch_size, "Batch size")->capture_default_str();
  train->add_option("--epochs", tcfg.max_epochs, "Maximum epochs")->capture_default_str();
  train->add_option("--patience", tcfg.patience, "Early-stopping patience")->capture_default_str();
  train->add_option("--val-frac", tcfg.validation_fraction, "Validation fraction")->capture_default_str();
  train->add_option("--layers", mcfg.n_layers, "Transformer layers")->capture_default_str();
  train->add_option("--heads", mcfg.n_heads, "Attention heads")->capture_default_str();
  train->add_option("--d-model", mcfg.d_model, "Embedding width")->capture_default_str();
  train->add_option("--context", mcfg.context, "Context length")->capture_default_str();
  train->add_option("--trees", fcfg.n_trees, "Forest size")->capture_default_str();
  train->add_option("--max-depth", fcfg.max_depth, "Tree depth limit (0 = none)")->capture_default_str();
  train->add_option("--max-samples", fcfg.max_samples, "Rows drawn per tree (0 = all)")->capture_default_str();
  train->add_option("--gamma", dcfg.gamma, "Prefix decay factor")->capture_default_str();

  // eval-hyp
  std::string eh_model, eh_graph, eh_out;
  std::vector<std::string> eh_hyps;
  int eh_wpn = 100, eh_length = 20;
  std::uint64_t eh_seed = 0;
  auto* eval_hyp = app.add_subcommand("eval-hyp", "Rank hypotheses by frozen-model loss");
  eval_hyp->add_option("--model", eh_model, "Checkpoint")->required();
  eval_hyp->add_option("--graph", eh_graph, "Graph file")->required();
  eval_hyp->add_option("--hyp", eh_hyps, "Hypotheses: [name=]behavior[:bias]")->required();
  eval_hyp->add_option("--walks-per-node", eh_wpn, "Evaluation walks per start node")->capture_default_str();
  eval_hyp->add_option("--length", eh_length, "States per walk")->capture_default_str();
  eval_hyp->add_option("--seed", eh_seed, "Walk seed shared by all hypotheses")->capture_default_str();
  eval_hyp->add_option("--out-dir", eh_out, "Output directory");

  // eval-sub
  std::string es_model, es_graph, es_out;
  int es_wpb = 10, es_length = 20;
  double es_threshold = dt::kDefaultClusterThreshold;
  std::uint64_t es_seed = 0;
  auto* eval_sub = app.add_subcommand("eval-sub", "Feature-set x walk loss matrix and clustering");
  eval_sub->add_option("--model", es_model, "Feature-conditioned checkpoint")->required();
  eval_sub->add_option("--graph", es_graph, "Graph file")->required();
  eval_sub->add_option("--walks-per-behavior", es_wpb, "Evaluation walks per behavior")->capture_default_str();
  eval_sub->add_option("--length", es_length, "States per walk")->capture_default_str();
  eval_sub->add_option("--threshold", es_threshold, "Cluster distance threshold")->capture_default_str();
  eval_sub->add_option("--seed", es_seed, "Seed")->capture_default_str();
  eval_sub->add_option("--out-dir", es_out, "Output directory");

  // baseline
  std::string bl_graph, bl_data, bl_out;
  std::vector<std::string> bl_hyps;
  std::vector<double> bl_kappas = dt::default_kappa_grid();
  int bl_length = 20;
  auto* baseline = app.add_subcommand("baseline", "First-order evidence sweep over concentration factors");
  baseline->add_option("--graph", bl_graph, "Graph file")->required();
  baseline->add_option("--data", bl_data, "Dataset file")->required();
  baseline->add_option("--hyp", bl_hyps, "Hypotheses: [name=]behavior[:bias]")->required();
  baseline->add_option("--kappas", bl_kappas, "Concentration factors");
  baseline->add_option("--length", bl_length, "Walk length used to flatten step-dependent behaviors")->capture_default_str();
  baseline->add_option("--out-dir", bl_out, "Output directory");

  // report
  std::string report_dir;
  auto* report = app.add_subcommand("report", "Regenerate plots from the tables in a report directory");
  report->add_option("--dir", report_dir, "Report directory")->required();

  // run
  std::string run_config, run_out;
  auto* run = app.add_subcommand("run", "Run a full experiment from a config file");
  run->add_option("--config", run_config, "Experiment config (JSON)")->required();
  run->add_option("--output-dir", run_out, "Output directory (overrides config and environment)");

  // sessionize
  std::string ss_events, ss_out;
  double ss_window = 900.0;
  int ss_states = 0;
  auto* sessionize = app.add_subcommand("sessionize", "Split a timestamped event log into walks");
  sessionize->add_option("--events", ss_events, "Event log: user, timestamp, state per line")->required();
  sessionize->add_option("--window", ss_window, "Inactivity gap in seconds")->capture_default_str();
  sessionize->add_option("--states", ss_states, "State count (default: max state + 1)");
  sessionize->add_option("--out", ss_out, "Output dataset (JSON lines)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_graph) {
      gcfg.validate();
      dt::save_graph(graph_out, dt::generate_ba_graph(gcfg), gcfg);
      log_line("wrote " + graph_out);
    } else if (*gen_walks) {
      const auto g = dt::load_graph(walks_graph);
      dt::SequenceDataset data{dt::build_vocabulary(g.graph.size()), {}, {}};
      if (subtrails_features) data.schema = dt::subtrails_schema();
      dt::Rng noise(dt::derive_seed(walk_seed, dt::seed_stream::noise));
      for (std::size_t i = 0; i < walk_behaviors.size(); ++i) {
        const auto kind = dt::parse_behavior_kind(walk_behaviors[i]);
        if (!kind) throw dt::ConfigError("--behavior: unknown behavior '" + walk_behaviors[i] + "'");
        const dt::BehaviorSpec spec{*kind, walk_bias};
        spec.validate();
        const auto ws = dt::sample_walk_set(g.graph, spec, walks_per_node, walk_length,
                                            dt::derive_seed(walk_seed, dt::seed_stream::training + i));
        for (const auto& w : ws.walks) {
          std::optional<dt::FeatureVector> f;
          if (subtrails_features) {
            const int a = static_cast<int>(noise.below(2));
            const int b = static_cast<int>(noise.below(2));
            f = dt::make_subtrails_features(*kind, a, b);
          }
          data.add(w, f, walk_behaviors[i]);
        }
      }
      dt::save_dataset(walks_out, data);
      log_line("wrote " + std::to_string(data.records.size()) + " walks to " + walks_out);
    } else if (*train) {
      const auto data = dt::load_dataset(train_data);
      if (family == "forest") {
        fcfg.seed = dt::derive_seed(train_seed, dt::seed_stream::forest);
        dcfg.validate();
        fcfg.validate();
        log_line("fitting forest on " + std::to_string(data.records.size()) + " walks");
        dt::save_forest(train_out, dt::fit_forest(data, dcfg, fcfg));
      } else {
        mcfg.vocab_size = data.vocab.size();
        mcfg.feature_dim = data.has_features() ? static_cast<int>(data.schema.encoded_width()) : 0;
        tcfg.seed = dt::derive_seed(train_seed, dt::seed_stream::shuffle);
        tcfg.validate();
        auto init = dt::init_model(mcfg, dt::derive_seed(train_seed, dt::seed_stream::init), data.schema);
        dt::TrainReport rep;
        auto model = dt::train(std::move(init), data, tcfg, &rep, [](int e, double tl, double vl) {
          log_line("epoch " + std::to_string(e) + " train " + dt::fmt_num(tl) + " validation " + dt::fmt_num(vl));
        });
        dt::save_checkpoint(train_out, model);
        log_line("best epoch " + std::to_string(rep.best_epoch) + " validation " + dt::fmt_num(rep.best_validation_loss));
      }
      log_line("wrote " + train_out);
    } else if (*eval_hyp) {
      const auto g = dt::load_graph(eh_graph);
      const auto model = dt::load_model(eh_model, g.graph.size() + 2);
      const auto hyps = parse_hypotheses(eh_hyps);
      const auto rep = dt::run_deep_hyptrails(*model, g.graph, hyps, {eh_wpn, eh_length, eh_seed, 256});
      const auto dir = output_dir(eh_out, ".");
      ensure_dir(dir);
      dt::write_text_file((fs::path(dir) / "rank_curves.csv").string(), dt::rank_curves_csv(rep.results));
      dt::write_text_file((fs::path(dir) / "hypotheses.csv").string(), dt::hypothesis_summary_csv(rep));
      dt::write_text_file((fs::path(dir) / "rank_curves.svg").string(),
                          dt::render_rank_curves(rep.results, model->vocab_size()));
      std::cout << dt::hypothesis_summary_csv(rep);
    } else if (*eval_sub) {
      const auto g = dt::load_graph(es_graph);
      const auto model = dt::load_model(es_model, g.graph.size() + 2);
      dt::ExperimentConfig c;
      c.seed = es_seed;
      c.walk_length = es_length;
      c.subtrails.walks_per_behavior = es_wpb;
      c.subtrails.cluster_threshold = es_threshold;
      const auto s = dt::run_subtrails_stage(c, *model, g.graph);
      const fs::path dir(output_dir(es_out, "."));
      ensure_dir(dir.string());
      dt::write_text_file((dir / "loss_matrix.csv").string(), dt::loss_matrix_csv(s.matrix));
      dt::write_text_file((dir / "loss_matrix.svg").string(), dt::render_heatmap(s.matrix));
      dt::write_text_file((dir / "feature_clusters.csv").string(),
                          dt::clusters_csv(s.matrix.row_labels, s.feature_clusters));
      dt::write_text_file((dir / "walk_clusters.csv").string(), dt::clusters_csv(s.matrix.col_labels, s.walk_clusters));
      std::cout << "feature clusters: " << s.feature_clusters.n_clusters
                << ", walk clusters: " << s.walk_clusters.n_clusters << "\n";
    } else if (*baseline) {
      const auto g = dt::load_graph(bl_graph);
      const auto data = dt::load_dataset(bl_data);
      if (data.vocab.n_states != g.graph.size()) throw dt::ConfigError("--data: state count differs from the graph");
      std::vector<std::vector<int>> walks;
      for (const auto& r : data.records) walks.push_back(dt::decode_walk(data.vocab, r.tokens));
      std::vector<std::pair<std::string, dt::BehaviorSpec>> specs;
      for (const auto& h : parse_hypotheses(bl_hyps)) specs.emplace_back(h.name, h.spec);
      const auto table = dt::kappa_sweep(dt::count_transitions(walks, g.graph.size()),
                                         dt::first_order_hypotheses(g.graph, specs, bl_length), bl_kappas);
      const fs::path dir(output_dir(bl_out, "."));
      ensure_dir(dir.string());
      dt::write_text_file((dir / "evidence.csv").string(), dt::evidence_csv(table));
      dt::write_text_file((dir / "evidence.svg").string(), dt::render_evidence(table));
      std::cout << dt::evidence_csv(table);
    } else if (*report) {
      return regenerate_plots(report_dir);
    } else if (*run) {
      const auto cfg = dt::load_experiment_config(run_config);
      const auto dir = output_dir(run_out, cfg.output_dir);
      const auto res = dt::run_experiment(cfg, dir, log_line);
      for (const auto& w : res.warnings) log_line("warning: " + w);
      log_line("wrote " + std::to_string(res.outputs.size()) + " outputs to " + dir);
    } else if (*sessionize) {
      std::ifstream in(ss_events);
      if (!in) throw dt::ConfigError("--events: cannot open " + ss_events);
      const auto log = dt::read_event_log(in);
      const auto walks = dt::sessionize(log, ss_window);
      int n = ss_states;
      if (n <= 0) {
        for (const auto& e : log) n = std::max(n, e.state + 1);
      }
      dt::save_dataset(ss_out, dt::make_dataset(n, walks));
      log_line("wrote " + std::to_string(walks.size()) + " sessions to " + ss_out);
    }
  } catch (const dt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 1;
  } catch (const dt::UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
