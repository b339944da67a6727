// Command-line front end: train, evaluate, explain, gradcheck, sweep-depth
// and ablate over .ts datasets laid out as <root>/<Name>/<Name>_{TRAIN,TEST}.ts.
// Exit codes: 0 success, 1 configuration problems, 2 data problems, 3
// numeric failures.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sttree/sttree.hpp"

namespace fs = std::filesystem;
using namespace sttree;

namespace {

std::vector<std::size_t> parse_index_list(const std::string& csv, const char* what) {
  std::vector<std::size_t> out;
  std::string cur;
  for (char c : csv + ",") {
    if (c == ',') {
      if (cur.empty()) continue;
      try {
        out.push_back(static_cast<std::size_t>(std::stoull(cur)));
      } catch (const std::exception&) {
        throw ConfigError(std::string(what) + ": bad entry '" + cur + "'");
      }
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

struct LoadedData {
  Dataset train_raw;  // parsed, unpadded, unnormalized
  Dataset train;      // normalized with train stats, padded to the patch span
  Dataset test;
  ChannelStats stats;
};

LoadedData load_dataset(const std::string& root, const std::string& name,
                        std::size_t partition_factor) {
  const std::string dir = root + "/" + name + "/" + name;
  LoadedData d;
  d.train_raw = parse_ts(dir + "_TRAIN.ts");
  Dataset test_raw = parse_ts(dir + "_TEST.ts");
  if (test_raw.num_channels != d.train_raw.num_channels)
    throw FormatError("dataset " + name + ": test split has " +
                      std::to_string(test_raw.num_channels) + " channels, train has " +
                      std::to_string(d.train_raw.num_channels));
  align_labels(test_raw, d.train_raw.class_names);
  d.stats = channel_stats(d.train_raw);
  const std::size_t span = 4 * partition_factor;
  d.train = pad_dataset(z_normalize(d.train_raw, d.stats), span);
  d.test = pad_dataset(z_normalize(test_raw, d.stats), span);
  return d;
}

nlohmann::json make_meta(const RunConfig& rc, const Model& model, const LoadedData& data) {
  nlohmann::json m;
  m["dataset"] = rc.dataset;
  m["class_names"] = data.train.class_names;
  m["in_channels"] = model.cfg.encoder.in_channels;
  m["num_classes"] = model.cfg.encoder.num_classes;
  m["partition_factor"] = model.cfg.encoder.partition_factor;
  m["embed_dim"] = model.cfg.encoder.embed_dim;
  m["window"] = model.cfg.encoder.window;
  m["mlp_hidden"] = model.cfg.encoder.mlp_hidden;
  m["attn_kernel"] = model.cfg.encoder.attn_kernel;
  m["tree_depth"] = model.cfg.tree_depth;
  m["proto_size"] = model.cfg.proto_size;
  m["use_tree"] = model.cfg.use_tree;
  m["use_attention"] = model.cfg.use_attention;
  m["seed"] = model.seed;
  m["series_length"] = data.train.series_length;
  m["norm_mean"] = data.stats.mean;
  m["norm_std"] = data.stats.stddev;
  return m;
}

// Rebuilds the evaluation pipeline a checkpoint was trained with.
Dataset load_split_for_checkpoint(const CheckpointData& cp, const std::string& root,
                                  const std::string& split) {
  std::string name;
  std::vector<std::string> class_names;
  ChannelStats stats;
  std::size_t partition_factor = 1;
  try {
    name = cp.meta.at("dataset").get<std::string>();
    class_names = cp.meta.at("class_names").get<std::vector<std::string>>();
    stats.mean = cp.meta.at("norm_mean").get<std::vector<double>>();
    stats.stddev = cp.meta.at("norm_std").get<std::vector<double>>();
    partition_factor = cp.meta.at("partition_factor").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata incomplete: ") + e.what());
  }
  const std::string upper = split == "train" ? "_TRAIN.ts" : "_TEST.ts";
  Dataset ds = parse_ts(root + "/" + name + "/" + name + upper);
  align_labels(ds, class_names);
  return pad_dataset(z_normalize(ds, stats), 4 * partition_factor);
}

void print_epoch(const EpochMetrics& em) {
  std::printf("epoch %zu lr=%.6g train_loss=%.6f train_acc=%.4f val_acc=%.4f\n", em.epoch, em.lr,
              em.train_loss, em.train_acc, em.val_acc);
  std::fflush(stdout);
}

void print_metrics(const Metrics& m, const std::vector<std::string>& class_names) {
  std::printf("accuracy=%.6f\nmean_loss=%.6f\n", m.accuracy, m.mean_loss);
  for (std::size_t c = 0; c < m.per_class.size(); ++c)
    std::printf("class %s: %.6f\n", class_names[c].c_str(), m.per_class[c]);
}

int cmd_train(RunConfig rc) {
  rc.validate();
  if (rc.dataset.empty()) throw ConfigError("train: --dataset is required");
  const std::string root = resolve_data_root(rc);
  const LoadedData data = load_dataset(root, rc.dataset, rc.partition_factor);
  Model model =
      make_model(to_model_config(rc, data.train.num_channels, data.train.num_classes()), rc.seed);
  const TrainConfig tc = to_train_config(rc);
  TrainState st;
  if (!rc.fine_tune_from.empty())
    st = fine_tune(model, rc.fine_tune_from, data.train, nullptr, tc, print_epoch);
  else
    st = train(model, data.train, nullptr, tc, print_epoch);

  fs::create_directories(rc.out_dir);
  save_checkpoint(model, make_meta(rc, model, data), rc.out_dir + "/model.ckpt");
  write_metrics_csv(st.history, rc.out_dir + "/metrics.csv");
  const Metrics test_m = evaluate(model, data.test);
  std::printf("stopped_epoch=%zu\n", st.stopped_epoch);
  std::printf("test_accuracy=%.6f\n", test_m.accuracy);
  return 0;
}

int cmd_evaluate(const RunConfig& rc, const std::string& ckpt, const std::string& split) {
  const std::string root = resolve_data_root(rc);
  const CheckpointData cp = read_checkpoint(ckpt);
  const Model model = restore_model(cp);
  const Dataset ds = load_split_for_checkpoint(cp, root, split);
  print_metrics(evaluate(model, ds), ds.class_names);
  return 0;
}

int cmd_explain(const RunConfig& rc, const std::string& ckpt, const std::string& split,
                const std::string& samples_csv) {
  const std::string root = resolve_data_root(rc);
  const CheckpointData cp = read_checkpoint(ckpt);
  const Model model = restore_model(cp);
  const Dataset ds = load_split_for_checkpoint(cp, root, split);
  const std::vector<std::size_t> ids = parse_index_list(samples_csv, "--samples");
  fs::create_directories(rc.out_dir + "/explain");
  for (std::size_t id : ids) {
    if (id >= ds.size())
      throw ValueError("explain: sample " + std::to_string(id) + " out of range, split has " +
                       std::to_string(ds.size()) + " instances");
    const Batch one = gather_batch(ds, {id});
    const DecisionPath path = explain(model, one.x, ds.instances[id].label, id);
    const std::string base = rc.out_dir + "/explain/" + std::to_string(id);
    export_json(path, base + ".json");
    render_tree_figure_file(model, one, ds.class_names, base + ".svg");
    std::printf("wrote %s.json and %s.svg (predicted=%s true=%s)\n", base.c_str(), base.c_str(),
                ds.class_names[path.predicted].c_str(),
                ds.class_names[path.true_label].c_str());
  }
  return 0;
}

int cmd_gradcheck(std::size_t channels, std::size_t length, std::size_t embed_dim,
                  std::size_t depth, std::size_t proto_size, std::size_t classes,
                  std::size_t batch, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.encoder.in_channels = channels;
  cfg.encoder.num_classes = classes;
  cfg.encoder.embed_dim = embed_dim;
  cfg.encoder.mlp_hidden = 2 * embed_dim;
  cfg.tree_depth = depth;
  cfg.proto_size = proto_size;
  Model model = make_model(cfg, seed);
  SplitMix64 rng(derive_seed(seed, "gradcheck.data"));
  Tensor x({batch, channels, length});
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  Tensor y({batch});
  for (std::size_t b = 0; b < batch; ++b)
    y.data()[b] = static_cast<double>(rng.index(classes));
  const GradCheckResult res = finite_difference_check(
      model.params(), [&] { return cross_entropy(model.forward(x).y_hat, y); });
  std::printf("checked %zu entries, max_rel_err=%.3e (%s[%zu])\n", res.checked, res.max_rel_err,
              res.worst_param.c_str(), res.worst_index);
  if (!(res.max_rel_err < 1e-4))
    throw NumericError("gradcheck: max relative error " + std::to_string(res.max_rel_err) +
                       " is not below 1e-4");
  return 0;
}

int cmd_sweep_depth(RunConfig rc, const std::string& depths_csv) {
  rc.validate();
  if (rc.dataset.empty()) throw ConfigError("sweep-depth: --dataset is required");
  const std::string root = resolve_data_root(rc);
  const LoadedData data = load_dataset(root, rc.dataset, rc.partition_factor);
  const std::vector<std::size_t> depths = parse_index_list(depths_csv, "--depths");
  fs::create_directories(rc.out_dir);
  std::ofstream csv(rc.out_dir + "/sweep.csv", std::ios::binary);
  if (!csv) throw IoError("sweep-depth: cannot open " + rc.out_dir + "/sweep.csv");
  csv << "depth,leaves,test_accuracy\n";
  for (std::size_t d : depths) {
    RunConfig cur = rc;
    cur.depth = d;
    Model model = make_model(
        to_model_config(cur, data.train.num_channels, data.train.num_classes()), cur.seed);
    train(model, data.train, nullptr, to_train_config(cur));
    const Metrics m = evaluate(model, data.test);
    csv << d << "," << model.tree.num_leaves() << "," << detail::format_double(m.accuracy)
        << "\n";
    std::printf("depth %zu: leaves=%zu test_accuracy=%.6f\n", d, model.tree.num_leaves(),
                m.accuracy);
    std::fflush(stdout);
  }
  if (!csv) throw IoError("sweep-depth: write failed");
  return 0;
}

int cmd_ablate(RunConfig rc) {
  rc.validate();
  if (rc.dataset.empty()) throw ConfigError("ablate: --dataset is required");
  const std::string root = resolve_data_root(rc);
  const LoadedData data = load_dataset(root, rc.dataset, rc.partition_factor);
  fs::create_directories(rc.out_dir);
  std::ofstream csv(rc.out_dir + "/ablation.csv", std::ios::binary);
  if (!csv) throw IoError("ablate: cannot open " + rc.out_dir + "/ablation.csv");
  csv << "variant,test_accuracy\n";
  const std::vector<std::pair<std::string, std::pair<bool, bool>>> variants = {
      {"full", {false, false}}, {"no_tree", {true, false}}, {"no_attention", {false, true}}};
  for (const auto& [label, toggles] : variants) {
    RunConfig cur = rc;
    cur.no_tree = toggles.first;
    cur.no_attention = toggles.second;
    Model model = make_model(
        to_model_config(cur, data.train.num_channels, data.train.num_classes()), cur.seed);
    train(model, data.train, nullptr, to_train_config(cur));
    const Metrics m = evaluate(model, data.test);
    csv << label << "," << detail::format_double(m.accuracy) << "\n";
    std::printf("%s: test_accuracy=%.6f\n", label.c_str(), m.accuracy);
    std::fflush(stdout);
  }
  if (!csv) throw IoError("ablate: write failed");
  return 0;
}

// Options whose presence matters: a set flag overrides the config file,
// which overrides defaults.
struct CommonOpts {
  std::string config, data_root, dataset, out, fine_tune_from;
  std::size_t depth = 0, epochs = 0, batch_size = 0, proto_size = 0;
  double lr = 0.0;
  long patience = 0;
  std::uint64_t seed = 0;
  bool no_tree = false, no_attention = false;

  CLI::Option *o_config = nullptr, *o_data_root = nullptr, *o_dataset = nullptr,
              *o_out = nullptr, *o_ft = nullptr, *o_depth = nullptr, *o_epochs = nullptr,
              *o_batch = nullptr, *o_proto = nullptr, *o_lr = nullptr, *o_patience = nullptr,
              *o_seed = nullptr, *o_no_tree = nullptr, *o_no_attention = nullptr;

  void add_to(CLI::App* s, bool training) {
    o_config = s->add_option("--config", config, "JSON config file");
    o_data_root = s->add_option("--data-root", data_root, "dataset root directory");
    o_dataset = s->add_option("--dataset", dataset, "dataset name");
    o_out = s->add_option("--out", out, "output directory");
    if (training) {
      o_ft = s->add_option("--fine-tune-from", fine_tune_from,
                           "checkpoint to transfer encoder weights from");
      o_depth = s->add_option("--depth", depth, "tree depth");
      o_epochs = s->add_option("--epochs", epochs, "training epochs");
      o_batch = s->add_option("--batch-size", batch_size, "batch size");
      o_proto = s->add_option("--proto-size", proto_size, "prototype length in patches");
      o_lr = s->add_option("--lr", lr, "base learning rate");
      o_patience = s->add_option("--patience", patience, "early-stopping patience, -1 disables");
      o_seed = s->add_option("--seed", seed, "random seed");
      o_no_tree = s->add_flag("--no-tree", no_tree, "bypass the tree, use encoder logits only");
      o_no_attention =
          s->add_flag("--no-attention", no_attention, "replace attention gates with identity");
    }
  }

  RunConfig to_run_config() const {
    RunConfig rc;
    if (o_config && o_config->count()) load_config_file(rc, config);
    if (o_data_root && o_data_root->count()) rc.data_root = data_root;
    if (o_dataset && o_dataset->count()) rc.dataset = dataset;
    if (o_out && o_out->count()) rc.out_dir = out;
    if (o_ft && o_ft->count()) rc.fine_tune_from = fine_tune_from;
    if (o_depth && o_depth->count()) rc.depth = depth;
    if (o_epochs && o_epochs->count()) rc.epochs = epochs;
    if (o_batch && o_batch->count()) rc.batch_size = batch_size;
    if (o_proto && o_proto->count()) rc.proto_size = proto_size;
    if (o_lr && o_lr->count()) rc.learning_rate = lr;
    if (o_patience && o_patience->count()) rc.patience = patience;
    if (o_seed && o_seed->count()) rc.seed = seed;
    if (o_no_tree && o_no_tree->count()) rc.no_tree = no_tree;
    if (o_no_attention && o_no_attention->count()) rc.no_attention = no_attention;
    return rc;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Windowed-attention time-series classifier with a prototype-routed soft tree"};
  app.require_subcommand(1);

  CLI::App* s_train = app.add_subcommand("train", "train a model and save a checkpoint");
  CommonOpts train_opts;
  train_opts.add_to(s_train, true);

  CLI::App* s_eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset split");
  CommonOpts eval_opts;
  eval_opts.add_to(s_eval, false);
  std::string eval_ckpt, eval_split = "test";
  s_eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  s_eval->add_option("--split", eval_split, "train or test")
      ->check(CLI::IsMember({"train", "test"}));

  CLI::App* s_explain = app.add_subcommand("explain", "export decision paths for instances");
  CommonOpts explain_opts;
  explain_opts.add_to(s_explain, false);
  std::string explain_ckpt, explain_split = "test", explain_samples = "0";
  s_explain->add_option("--ckpt", explain_ckpt, "checkpoint path")->required();
  s_explain->add_option("--split", explain_split, "train or test")
      ->check(CLI::IsMember({"train", "test"}));
  s_explain->add_option("--samples", explain_samples, "comma-separated instance indices");

  CLI::App* s_gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check on a small random model");
  std::size_t gc_channels = 2, gc_length = 16, gc_embed = 8, gc_depth = 1, gc_proto = 2,
              gc_classes = 3, gc_batch = 2;
  std::uint64_t gc_seed = 7;
  s_gradcheck->add_option("--channels", gc_channels, "input channels");
  s_gradcheck->add_option("--length", gc_length, "series length");
  s_gradcheck->add_option("--embed-dim", gc_embed, "embedding width");
  s_gradcheck->add_option("--depth", gc_depth, "tree depth");
  s_gradcheck->add_option("--proto-size", gc_proto, "prototype length");
  s_gradcheck->add_option("--classes", gc_classes, "class count");
  s_gradcheck->add_option("--batch", gc_batch, "batch size");
  s_gradcheck->add_option("--seed", gc_seed, "random seed");

  CLI::App* s_sweep = app.add_subcommand("sweep-depth", "train across tree depths");
  CommonOpts sweep_opts;
  sweep_opts.add_to(s_sweep, true);
  std::string sweep_depths = "3,4,5,6";
  s_sweep->add_option("--depths", sweep_depths, "comma-separated depths");

  CLI::App* s_ablate =
      app.add_subcommand("ablate", "train full, tree-less and attention-less variants");
  CommonOpts ablate_opts;
  ablate_opts.add_to(s_ablate, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }

  try {
    if (s_train->parsed()) return cmd_train(train_opts.to_run_config());
    if (s_eval->parsed()) return cmd_evaluate(eval_opts.to_run_config(), eval_ckpt, eval_split);
    if (s_explain->parsed())
      return cmd_explain(explain_opts.to_run_config(), explain_ckpt, explain_split,
                         explain_samples);
    if (s_gradcheck->parsed())
      return cmd_gradcheck(gc_channels, gc_length, gc_embed, gc_depth, gc_proto, gc_classes,
                           gc_batch, gc_seed);
    if (s_sweep->parsed()) return cmd_sweep_depth(sweep_opts.to_run_config(), sweep_depths);
    if (s_ablate->parsed()) return cmd_ablate(ablate_opts.to_run_config());
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
