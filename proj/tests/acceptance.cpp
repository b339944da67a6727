// End-to-end acceptance gate. Prints one [PASS]/[FAIL] line per criterion
// and exits nonzero if any fail. Tolerances are the literal constants next
// to each check. Fixture data comes from the ST_TREE_DATA directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sttree/sttree.hpp"

using namespace sttree;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return std::string(buf);
}

int g_failures = 0;

void report(int n, const std::string& what, bool ok, const std::string& detail = "") {
  std::string line = std::string(ok ? "[PASS]" : "[FAIL]") + " criterion " + std::to_string(n) +
                     ": " + what;
  if (!detail.empty()) line += " (" + detail + ")";
  std::puts(line.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

Tensor randn(Shape s, SplitMix64& rng) {
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

struct PipelineData {
  Dataset train, test;
};

// The training pipeline: labels aligned to the train split, z-normalization
// with train statistics, right-padding to whole patches.
PipelineData load_fixture(const std::string& root, const std::string& name) {
  Dataset train_raw = parse_ts(root + "/" + name + "/" + name + "_TRAIN.ts");
  Dataset test_raw = parse_ts(root + "/" + name + "/" + name + "_TEST.ts");
  align_labels(test_raw, train_raw.class_names);
  const ChannelStats st = channel_stats(train_raw);
  PipelineData d;
  d.train = pad_dataset(z_normalize(train_raw, st), 4);
  d.test = pad_dataset(z_normalize(test_raw, st), 4);
  return d;
}

ModelConfig default_model_cfg(std::size_t channels, std::size_t classes) {
  ModelConfig cfg;
  cfg.encoder.in_channels = channels;
  cfg.encoder.num_classes = classes;
  return cfg;  // embed 64, window 4, mlp 128, kernel 3, depth 3, proto 3
}

// Iterative root-to-leaf replay used as the oracle for the recursive blend.
struct Replay {
  std::vector<double> y;        // [B x M] rho-weighted sum of leaf distributions
  std::vector<double> rho_sum;  // [B]
};

Replay replay_paths(const Tree& t, const Tensor& z0, const Tensor& logits, bool use_attention) {
  const std::size_t B = z0.dim(0), P = z0.dim(1), M = logits.dim(1);
  Replay out;
  out.y.assign(B * M, 0.0);
  out.rho_sum.assign(B, 0.0);
  const std::size_t first_leaf = std::size_t{1} << t.depth;
  struct Item {
    std::size_t node;
    Tensor rho, features;
  };
  std::vector<Item> work = {{1, Tensor({B, 1}, 1.0), sigmoid(z0)}};
  while (!work.empty()) {
    Item it = work.back();
    work.pop_back();
    if (it.node >= first_leaf) {
      Tensor g = leaf_predict(it.features, logits, t.leaf(it.node));
      for (std::size_t b = 0; b < B; ++b) {
        out.rho_sum[b] += it.rho.values()[b];
        for (std::size_t m = 0; m < M; ++m)
          out.y[b * M + m] += it.rho.values()[b] * g.values()[b * M + m];
      }
      continue;
    }
    const BranchNode& node = t.branch(it.node);
    Tensor signal = linear(it.features, t.proj_w, t.proj_b).reshape({B, 1, P});
    RoutingScore sc = routing(signal, node.prototype);
    work.push_back({2 * it.node, mul(it.rho, sc.to_left),
                    edge_transform(it.features, node.edge_left, use_attention)});
    work.push_back({2 * it.node + 1, mul(it.rho, sc.to_right),
                    edge_transform(it.features, node.edge_right, use_attention)});
  }
  return out;
}

nlohmann::json meta_for(const Model& m, const std::string& dataset) {
  nlohmann::json j;
  j["dataset"] = dataset;
  j["in_channels"] = m.cfg.encoder.in_channels;
  j["num_classes"] = m.cfg.encoder.num_classes;
  j["partition_factor"] = m.cfg.encoder.partition_factor;
  j["embed_dim"] = m.cfg.encoder.embed_dim;
  j["window"] = m.cfg.encoder.window;
  j["mlp_hidden"] = m.cfg.encoder.mlp_hidden;
  j["attn_kernel"] = m.cfg.encoder.attn_kernel;
  j["tree_depth"] = m.cfg.tree_depth;
  j["proto_size"] = m.cfg.proto_size;
  j["use_tree"] = m.cfg.use_tree;
  j["use_attention"] = m.cfg.use_attention;
  j["seed"] = m.seed;
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

double train_and_score(const PipelineData& data, ModelConfig cfg, std::uint64_t seed,
                       std::size_t epochs) {
  Model model = make_model(cfg, seed);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.seed = seed;
  train(model, data.train, nullptr, tc);
  return evaluate(model, data.test).accuracy;
}

}  // namespace

int main() {
  const char* root_env = std::getenv("ST_TREE_DATA");
  if (!root_env) {
    std::fprintf(stderr, "ST_TREE_DATA is not set; fixture data is required\n");
    return 2;
  }
  const std::string root = root_env;

  // 1. Reverse-mode gradients across the full model vs central differences.
  try {
    const auto t0 = Clock::now();
    ModelConfig cfg;
    cfg.encoder.in_channels = 2;
    cfg.encoder.num_classes = 3;
    cfg.encoder.embed_dim = 8;
    cfg.encoder.window = 4;
    cfg.encoder.mlp_hidden = 16;
    cfg.tree_depth = 2;
    cfg.proto_size = 2;
    Model model = make_model(cfg, 7);
    SplitMix64 rng(derive_seed(7, "acceptance.grad"));
    Tensor x = randn({2, 2, 16}, rng);
    Tensor y({2});
    for (std::size_t b = 0; b < 2; ++b) y.data()[b] = static_cast<double>(rng.index(3));
    const GradCheckResult res = finite_difference_check(
        model.params(), [&] { return cross_entropy(model.forward(x).y_hat, y); });
    const double secs = seconds_since(t0);
    report(1, "full-model gradients match finite differences",
           res.max_rel_err < 1e-4 && secs < 60.0,
           "max rel err " + fmt(res.max_rel_err) + " over " + std::to_string(res.checked) +
               " entries in " + fmt(secs) + "s");
  } catch (const std::exception& e) {
    report(1, "full-model gradients match finite differences", false, e.what());
  }

  // 2. Windowed prototype distance vs the direct per-window sum.
  try {
    const auto t0 = Clock::now();
    SplitMix64 rng(derive_seed(7, "acceptance.dist"));
    const std::vector<std::pair<std::size_t, std::size_t>> combos = {{8, 2}, {16, 3}, {32, 5}};
    double worst = 0.0;
    std::size_t pairs = 0;
    for (std::size_t ci = 0; ci < combos.size(); ++ci) {
      const auto [P, k] = combos[ci];
      const std::size_t trials = ci == 0 ? 334 : 333;
      for (std::size_t trial = 0; trial < trials; ++trial) {
        Tensor signal = randn({1, 1, P}, rng);
        Tensor proto({1, 1, k});
        for (auto& v : proto.values()) v = rng.uniform();
        Tensor d = proto_l2_distance_map(signal, proto);
        for (std::size_t j = 0; j + k <= P; ++j) {
          double acc = 0.0;
          for (std::size_t t = 0; t < k; ++t) {
            const double diff = signal.values()[j + t] - proto.values()[t];
            acc += diff * diff;
          }
          worst = std::max(worst, std::fabs(d.values()[j] - std::sqrt(acc)));
        }
        ++pairs;
      }
    }
    const double secs = seconds_since(t0);
    report(2, "conv-form distance equals brute force on 1000 random pairs",
           worst <= 1e-9 && pairs == 1000 && secs < 10.0,
           "worst abs diff " + fmt(worst) + " in " + fmt(secs) + "s");
  } catch (const std::exception& e) {
    report(2, "conv-form distance equals brute force on 1000 random pairs", false, e.what());
  }

  // 3. Soft traversal: recursion equals path enumeration; weights normalize.
  try {
    double worst_blend = 0.0, worst_rho = 0.0, worst_row = 0.0;
    for (std::size_t trial = 0; trial < 1000; ++trial) {
      const std::size_t depth = 1 + trial % 4;
      const bool use_attention = trial % 2 == 0;
      Tree t = init_tree(depth, 3, 2, 4, 3, derive_seed(900, "t" + std::to_string(trial)));
      SplitMix64 rng(derive_seed(901, "d" + std::to_string(trial)));
      Tensor z0 = randn({2, 5, 4}, rng);
      Tensor logits = randn({2, 3}, rng);
      const TraversalResult res = traverse(t, z0, logits, use_attention);
      const Replay rep = replay_paths(t, z0, logits, use_attention);
      for (std::size_t i = 0; i < rep.y.size(); ++i)
        worst_blend = std::max(worst_blend, std::fabs(res.y_hat.values()[i] - rep.y[i]));
      for (std::size_t b = 0; b < 2; ++b) {
        worst_rho = std::max(worst_rho, std::fabs(rep.rho_sum[b] - 1.0));
        double row = 0.0;
        for (std::size_t m = 0; m < 3; ++m) row += res.y_hat.values()[b * 3 + m];
        worst_row = std::max(worst_row, std::fabs(row - 1.0));
      }
    }
    report(3, "recursive blend equals path enumeration over 1000 random trees",
           worst_blend <= 1e-10 && worst_rho <= 1e-9 && worst_row <= 1e-9,
           "blend diff " + fmt(worst_blend) + ", rho dev " + fmt(worst_rho) + ", row dev " +
               fmt(worst_row));
  } catch (const std::exception& e) {
    report(3, "recursive blend equals path enumeration over 1000 random trees", false, e.what());
  }

  // 4. Split weights complement exactly; saturated routing is a hard path.
  try {
    bool exact = true;
    SplitMix64 rng(derive_seed(902, "routing"));
    for (std::size_t trial = 0; trial < 125 && exact; ++trial) {
      Tensor signal = randn({8, 1, 9}, rng);
      Tensor proto({1, 1, 3});
      for (auto& v : proto.values()) v = rng.uniform();
      const RoutingScore r = routing(signal, proto);
      for (std::size_t b = 0; b < 8; ++b)
        if (r.to_left.values()[b] + r.to_right.values()[b] != 1.0) exact = false;
    }

    Tree t = init_tree(3, 3, 2, 4, 3, 903);
    const double b0 = 0.42;
    for (auto& v : t.proj_w.values()) v = 0.0;
    t.proj_b.values()[0] = b0;
    for (BranchNode& node : t.branches)
      for (auto& v : node.prototype.values()) v = b0;
    SplitMix64 rng2(904);
    Tensor z0 = randn({2, 5, 4}, rng2);
    Tensor logits = randn({2, 3}, rng2);
    const TraversalResult res = traverse(t, z0, logits);
    bool saturated = true;
    for (std::size_t b = 0; b < 2; ++b) {
      if (res.leaf_rho[0].values()[b] != 1.0) saturated = false;
      for (std::size_t j = 1; j < t.num_leaves(); ++j)
        if (res.leaf_rho[j].values()[b] != 0.0) saturated = false;
    }
    if (res.y_hat.values() != res.leaf_dist[0].values()) saturated = false;
    report(4, "split weights complement exactly and saturate to one leaf", exact && saturated,
           exact ? (saturated ? "1000 routed samples, hard path bit-exact" : "saturation leaked")
                 : "complement not exact");
  } catch (const std::exception& e) {
    report(4, "split weights complement exactly and saturate to one leaf", false, e.what());
  }

  // 5. Parsed fixture corpora match the published dimension table exactly.
  try {
    struct Expect {
      const char* name;
      std::size_t train_n, test_n, channels, length, classes;
    };
    const Expect table[] = {
        {"BasicMotions", 40, 40, 6, 100, 4},
        {"NATOPS", 180, 180, 24, 51, 6},
        {"AtrialFibrillation", 15, 15, 2, 640, 3},
    };
    std::string bad;
    for (const Expect& e : table) {
      const std::string base = root + "/" + e.name + "/" + e.name;
      const Dataset train = parse_ts(base + "_TRAIN.ts");
      const Dataset test = parse_ts(base + "_TEST.ts");
      if (train.size() != e.train_n || test.size() != e.test_n ||
          train.num_channels != e.channels || test.num_channels != e.channels ||
          train.series_length != e.length || test.series_length != e.length ||
          train.num_classes() != e.classes)
        bad += std::string(bad.empty() ? "" : ", ") + e.name;
    }
    report(5, "fixture datasets parse to the published dimensions", bad.empty(),
           bad.empty() ? "3 datasets, 6 splits" : ("mismatch in " + bad));
  } catch (const std::exception& e) {
    report(5, "fixture datasets parse to the published dimensions", false, e.what());
  }

  // 6. Default configuration learns the motion corpus.
  PipelineData basic;
  bool basic_loaded = false;
  try {
    const auto t0 = Clock::now();
    basic = load_fixture(root, "BasicMotions");
    basic_loaded = true;
    Model model = make_model(default_model_cfg(basic.train.num_channels,
                                               basic.train.num_classes()), 42);
    TrainConfig tc;  // 50 epochs, batch 16, 1e-3 with staircase decay, clip 5
    TrainState st = train(model, basic.train, nullptr, tc);
    const double acc = evaluate(model, basic.test).accuracy;
    const double secs = seconds_since(t0);
    report(6, "default training reaches 0.75 held-out accuracy", acc >= 0.75 && secs < 1200.0,
           "test accuracy " + fmt(acc) + " after " + std::to_string(st.stopped_epoch) +
               " epochs in " + fmt(secs) + "s");
  } catch (const std::exception& e) {
    report(6, "default training reaches 0.75 held-out accuracy", false, e.what());
  }

  // 7. A tiny subset is memorized perfectly within 200 epochs.
  try {
    if (!basic_loaded) throw IoError("fixture load failed earlier");
    Dataset sub = basic.train;
    sub.instances.clear();
    std::vector<std::size_t> taken(basic.train.num_classes(), 0);
    for (const Instance& inst : basic.train.instances)
      if (taken[inst.label] < 2) {
        sub.instances.push_back(inst);
        ++taken[inst.label];
      }
    Model model = make_model(default_model_cfg(sub.num_channels, sub.num_classes()), 11);
    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 8;
    tc.patience = 10;
    tc.seed = 11;
    TrainState st = train(model, sub, &sub, tc);
    const double acc = evaluate(model, sub).accuracy;
    std::size_t first_hit = 0;
    for (const EpochMetrics& em : st.history)
      if (em.val_acc == 1.0) {
        first_hit = em.epoch;
        break;
      }
    report(7, "eight samples are memorized within 200 epochs", acc == 1.0 && sub.size() == 8,
           "train accuracy " + fmt(acc) + (first_hit ? ", first perfect epoch " +
                                                           std::to_string(first_hit)
                                                     : ""));
  } catch (const std::exception& e) {
    report(7, "eight samples are memorized within 200 epochs", false, e.what());
  }

  // 8. The full model beats or ties each ablation on most seeds.
  try {
    if (!basic_loaded) throw IoError("fixture load failed earlier");
    int wins_tree = 0, wins_attn = 0;
    std::string detail;
    for (std::uint64_t seed : {std::uint64_t{1}, std::uint64_t{2}, std::uint64_t{3}}) {
      ModelConfig full = default_model_cfg(basic.train.num_channels, basic.train.num_classes());
      ModelConfig no_tree = full;
      no_tree.use_tree = false;
      ModelConfig no_attn = full;
      no_attn.use_attention = false;
      // Compare at the default budget; the full model needs the full schedule
      // to converge while the ablations plateau early.
      const std::size_t epochs = 50;
      const double a_full = train_and_score(basic, full, seed, epochs);
      const double a_tree = train_and_score(basic, no_tree, seed, epochs);
      const double a_attn = train_and_score(basic, no_attn, seed, epochs);
      if (a_full >= a_tree) ++wins_tree;
      if (a_full >= a_attn) ++wins_attn;
      detail += (detail.empty() ? "" : "; ") + ("seed " + std::to_string(seed) + ": full " +
                                                fmt(a_full) + ", no_tree " + fmt(a_tree) +
                                                ", no_attention " + fmt(a_attn));
    }
    report(8, "full model holds up against both ablations on 2 of 3 seeds",
           wins_tree >= 2 && wins_attn >= 2, detail);
  } catch (const std::exception& e) {
    report(8, "full model holds up against both ablations on 2 of 3 seeds", false, e.what());
  }

  // 9. Depth sweep runs to completion and reports the leaf counts.
  try {
    if (!basic_loaded) throw IoError("fixture load failed earlier");
    const fs::path csv_path = fs::temp_directory_path() / "sttree_accept_sweep.csv";
    std::ofstream csv(csv_path, std::ios::binary);
    csv << "depth,leaves,test_accuracy\n";
    bool leaves_ok = true;
    for (std::size_t depth : {std::size_t{3}, std::size_t{4}, std::size_t{5}, std::size_t{6}}) {
      ModelConfig cfg = default_model_cfg(basic.train.num_channels, basic.train.num_classes());
      cfg.tree_depth = depth;
      Model model = make_model(cfg, 21);
      TrainConfig tc;
      tc.epochs = 6;
      tc.seed = 21;
      train(model, basic.train, nullptr, tc);
      if (model.tree.num_leaves() != (std::size_t{1} << depth)) leaves_ok = false;
      const double acc = evaluate(model, basic.test).accuracy;
      csv << depth << "," << model.tree.num_leaves() << "," << detail::format_double(acc)
          << "\n";
    }
    csv.close();
    const bool written = fs::exists(csv_path) && fs::file_size(csv_path) > 25;
    report(9, "depth sweep over {3,4,5,6} completes with leaf counts", leaves_ok && written,
           "csv at " + csv_path.string());
    fs::remove(csv_path);
  } catch (const std::exception& e) {
    report(9, "depth sweep over {3,4,5,6} completes with leaf counts", false, e.what());
  }

  // 10. Exported decision paths are faithful and replayable on 100 instances.
  try {
    const PipelineData natops = load_fixture(root, "NATOPS");
    ModelConfig cfg = default_model_cfg(natops.test.num_channels, natops.test.num_classes());
    cfg.encoder.embed_dim = 16;
    cfg.encoder.mlp_hidden = 32;
    const Model model = make_model(cfg, 5);

    // Batched predictions, as evaluation computes them.
    std::vector<std::size_t> batched_pred(natops.test.size());
    for (const Batch& b : make_batches(natops.test, 32, 0, false)) {
      const std::vector<std::size_t> pred = argmax_last(model.forward(b.x).y_hat);
      for (std::size_t i = 0; i < b.indices.size(); ++i) batched_pred[b.indices[i]] = pred[i];
    }

    bool pred_ok = true, json_ok = true;
    double worst_sim = 0.0;
    const std::size_t span = model.cfg.encoder.patch_span();
    for (std::size_t i = 0; i < 100; ++i) {
      const Batch one = gather_batch(natops.test, {i});
      const DecisionPath path = explain(model, one.x, natops.test.instances[i].label, i);
      if (path.predicted != batched_pred[i]) pred_ok = false;

      const Model::Forward out = model.forward(one.x);
      for (const PathStep& s : path.steps) {
        const NodeTrace& trace = out.trav.nodes[s.node - 1];
        const std::vector<double>& sig = trace.signal.values();
        const std::vector<double>& proto = model.tree.branch(s.node).prototype.values();
        if (s.span_begin != span * s.patch_index) pred_ok = false;
        double d2 = 0.0;
        for (std::size_t t = 0; t < proto.size(); ++t) {
          const double diff = sig[s.patch_index + t] - proto[t];
          d2 += diff * diff;
        }
        const double sim = std::log(1.0 + 1.0 / (std::sqrt(d2) + 1e-4));
        worst_sim = std::max(worst_sim, std::fabs(sim - s.similarity));
      }

      const nlohmann::json j = path_to_json(path);
      if (j.dump(2) != path_to_json(path_from_json(j)).dump(2)) json_ok = false;
    }
    report(10, "decision paths are faithful and replayable on 100 instances",
           pred_ok && json_ok && worst_sim <= 1e-9,
           "worst replayed similarity diff " + fmt(worst_sim));
  } catch (const std::exception& e) {
    report(10, "decision paths are faithful and replayable on 100 instances", false, e.what());
  }

  // 11. Repeated training with one seed produces byte-identical artifacts.
  try {
    if (!basic_loaded) throw IoError("fixture load failed earlier");
    const auto run = [&](const fs::path& dir) {
      fs::create_directories(dir);
      ModelConfig cfg = default_model_cfg(basic.train.num_channels, basic.train.num_classes());
      cfg.encoder.embed_dim = 16;
      cfg.encoder.mlp_hidden = 32;
      cfg.tree_depth = 2;
      Model model = make_model(cfg, 7);
      TrainConfig tc;
      tc.epochs = 5;
      tc.seed = 7;
      const TrainState st = train(model, basic.train, nullptr, tc);
      save_checkpoint(model, meta_for(model, "BasicMotions"), (dir / "model.ckpt").string());
      write_metrics_csv(st.history, (dir / "metrics.csv").string());
    };
    const fs::path d1 = fs::temp_directory_path() / "sttree_accept_det1";
    const fs::path d2 = fs::temp_directory_path() / "sttree_accept_det2";
    run(d1);
    run(d2);
    const bool blob_eq = slurp(d1 / "model.ckpt") == slurp(d2 / "model.ckpt");
    const bool manifest_eq = slurp(d1 / "model.ckpt.json") == slurp(d2 / "model.ckpt.json");
    const bool csv_eq = slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv");
    const bool nonempty = fs::file_size(d1 / "model.ckpt") > 0;
    report(11, "seeded training is byte-deterministic across runs",
           blob_eq && manifest_eq && csv_eq && nonempty,
           std::string("blob ") + (blob_eq ? "ok" : "differs") + ", manifest " +
               (manifest_eq ? "ok" : "differs") + ", metrics " + (csv_eq ? "ok" : "differs"));
    fs::remove_all(d1);
    fs::remove_all(d2);
  } catch (const std::exception& e) {
    report(11, "seeded training is byte-deterministic across runs", false, e.what());
  }

  if (g_failures == 0)
    std::puts("all 11 criteria passed");
  else
    std::printf("%d of 11 criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
