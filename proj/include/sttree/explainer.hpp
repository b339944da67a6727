#pragma once

// Decision-path extraction and export. The hard path follows the larger of
// to_left/to_right at each branch; every step names the patch placement the
// similarity came from and maps it back to a raw timestamp span, so a claim
// like "routed left because of timestamps [16, 28)" can be replayed against
// the recorded similarity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sttree/model.hpp"
#include "sttree/ts_data.hpp"

namespace sttree {

struct PathStep {
  std::size_t node = 0;        // heap index of the branch
  double similarity = 0.0;     // best-window similarity at this branch
  double to_left = 0.0;
  std::string side;            // "left" or "right"
  std::size_t patch_index = 0; // placement of the best window
  std::size_t span_begin = 0;  // raw timestamps [begin, end)
  std::size_t span_end = 0;
};

struct DecisionPath {
  std::size_t sample_id = 0;
  std::size_t predicted = 0;
  std::size_t true_label = 0;
  std::vector<PathStep> steps;            // root first
  std::vector<double> rho;                // per leaf, leaves[] order
  std::vector<double> leaf_distribution;  // distribution of the reached leaf
};

// Extracts the decision path for one already-normalized, already-padded
// instance; x is [1 x C x T].
inline DecisionPath explain(const Model& model, const Tensor& x, std::size_t true_label,
                            std::size_t sample_id) {
  if (!model.cfg.use_tree)
    throw ValueError("explain: model was trained without the tree, no decision path exists");
  if (x.rank() != 3 || x.dim(0) != 1)
    throw ShapeError("explain: expected a [1xCxT] instance, got " + shape_str(x.shape()));
  const Model::Forward out = model.forward(x);

  DecisionPath path;
  path.sample_id = sample_id;
  path.true_label = true_label;
  path.predicted = argmax_last(out.y_hat)[0];
  path.rho.reserve(model.tree.num_leaves());
  for (const Tensor& rho : out.trav.leaf_rho) path.rho.push_back(rho.data()[0]);

  const std::size_t span = model.cfg.encoder.patch_span();
  const std::size_t k = model.cfg.proto_size;
  std::size_t i = 1;
  while (!model.tree.is_leaf_index(i)) {
    const NodeTrace& trace = out.trav.nodes[i - 1];
    PathStep step;
    step.node = i;
    step.similarity = trace.score.similarity.data()[0];
    step.to_left = trace.score.to_left.data()[0];
    step.side = step.to_left >= 0.5 ? "left" : "right";
    step.patch_index = trace.score.best_patch[0];
    step.span_begin = span * step.patch_index;
    step.span_end = span * (step.patch_index + k);
    path.steps.push_back(step);
    i = 2 * i + (step.side == "left" ? 0 : 1);
  }
  const std::size_t leaf_slot = i - (std::size_t{1} << model.tree.depth);
  const Tensor& dist = out.trav.leaf_dist[leaf_slot];
  path.leaf_distribution.assign(dist.data(), dist.data() + dist.size());
  return path;
}

inline nlohmann::json path_to_json(const DecisionPath& p) {
  nlohmann::json j;
  j["sample_id"] = p.sample_id;
  j["predicted"] = p.predicted;
  j["true"] = p.true_label;
  nlohmann::json nodes = nlohmann::json::array();
  for (const PathStep& s : p.steps) {
    nlohmann::json n;
    n["i"] = s.node;
    n["similarity"] = s.similarity;
    n["to_left"] = s.to_left;
    n["side"] = s.side;
    n["patch_index"] = s.patch_index;
    n["span"] = {s.span_begin, s.span_end};
    nodes.push_back(n);
  }
  j["nodes"] = nodes;
  j["rho"] = p.rho;
  j["leaf_distribution"] = p.leaf_distribution;
  return j;
}

inline DecisionPath path_from_json(const nlohmann::json& j) {
  DecisionPath p;
  try {
    p.sample_id = j.at("sample_id").get<std::size_t>();
    p.predicted = j.at("predicted").get<std::size_t>();
    p.true_label = j.at("true").get<std::size_t>();
    for (const nlohmann::json& n : j.at("nodes")) {
      PathStep s;
      s.node = n.at("i").get<std::size_t>();
      s.similarity = n.at("similarity").get<double>();
      s.to_left = n.at("to_left").get<double>();
      s.side = n.at("side").get<std::string>();
      s.patch_index = n.at("patch_index").get<std::size_t>();
      s.span_begin = n.at("span").at(0).get<std::size_t>();
      s.span_end = n.at("span").at(1).get<std::size_t>();
      p.steps.push_back(s);
    }
    p.rho = j.at("rho").get<std::vector<double>>();
    p.leaf_distribution = j.at("leaf_distribution").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("path_from_json: ") + e.what());
  }
  return p;
}

inline void export_json(const DecisionPath& p, const std::string& file) {
  std::ofstream f(file, std::ios::binary);
  if (!f) throw IoError("export_json: cannot open " + file);
  f << path_to_json(p).dump(2) << "\n";
  if (!f) throw IoError("export_json: write failed for " + file);
}

// Fixed figure geometry; exposed so tests can recompute every coordinate.
struct FigureLayout {
  double margin = 20.0;
  double panel_w = 120.0;
  double panel_h = 64.0;
  double panel_gap = 16.0;  // horizontal breathing room per slot
  double level_gap = 46.0;

  double inner_width(std::size_t depth) const {
    const double slots = static_cast<double>(std::size_t{1} << (depth - 1));
    return slots * (panel_w + panel_gap);
  }
  double width(std::size_t depth) const { return 2.0 * margin + inner_width(depth); }
  double node_cx(std::size_t depth, std::size_t level, std::size_t slot) const {
    const double cell = inner_width(depth) / static_cast<double>(std::size_t{1} << level);
    return margin + (static_cast<double>(slot) + 0.5) * cell;
  }
  double node_y(std::size_t level) const {
    return margin + static_cast<double>(level) * (panel_h + level_gap);
  }
  double leaf_y(std::size_t depth) const { return node_y(depth) + 12.0; }
  double height(std::size_t depth) const { return leaf_y(depth) + 2.0 * margin; }
};

namespace detail {

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return std::string(buf);
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

// Deterministic SVG of the routing tree over a batch of instances. Each
// branch panel draws the input series of the instance that matches the
// node's prototype best, highlighting the matched raw-time span; edges carry
// batch-mean routing weights; leaves are labeled with their dominant class.
inline std::string render_tree_figure(const Model& model, const Batch& batch,
                                      const std::vector<std::string>& class_names,
                                      const FigureLayout& ly = FigureLayout{}) {
  if (!model.cfg.use_tree)
    throw ValueError("render_tree_figure: model was trained without the tree");
  const Model::Forward out = model.forward(batch.x);
  const Tree& tree = model.tree;
  const std::size_t depth = tree.depth;
  const std::size_t B = batch.x.dim(0), C = batch.x.dim(1), T = batch.x.dim(2);
  const std::size_t span = model.cfg.encoder.patch_span();
  const std::size_t k = model.cfg.proto_size;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt2(ly.width(depth))
      << "\" height=\"" << detail::fmt2(ly.height(depth)) << "\" viewBox=\"0 0 "
      << detail::fmt2(ly.width(depth)) << " " << detail::fmt2(ly.height(depth)) << "\">\n";
  svg << "<style>text{font-family:sans-serif;font-size:9px}.panel-frame{fill:#fff;"
         "stroke:#444;stroke-width:1}.series{fill:none;stroke:#5b7fa6;stroke-width:0.8}"
         ".span-highlight{fill:#e8842c;fill-opacity:0.35}.edge{stroke:#888;stroke-width:1}"
         ".leaf-label{font-weight:bold}</style>\n";

  // edges first so panels draw over them
  for (std::size_t level = 0; level < depth; ++level) {
    const std::size_t count = std::size_t{1} << level;
    for (std::size_t slot = 0; slot < count; ++slot) {
      const std::size_t i = count + slot;
      const double x0 = ly.node_cx(depth, level, slot);
      const double y0 = ly.node_y(level) + ly.panel_h;
      const NodeTrace& trace = out.trav.nodes[i - 1];
      double mean_left = 0.0;
      for (std::size_t b = 0; b < B; ++b) mean_left += trace.score.to_left.data()[b];
      mean_left /= static_cast<double>(B);
      for (int child = 0; child < 2; ++child) {
        const std::size_t cslot = 2 * slot + static_cast<std::size_t>(child);
        const bool child_is_leaf = level + 1 == depth;
        const double x1 = ly.node_cx(depth, level + 1, cslot);
        const double y1 = child_is_leaf ? ly.leaf_y(depth) - 10.0 : ly.node_y(level + 1);
        svg << "<line class=\"edge\" x1=\"" << detail::fmt2(x0) << "\" y1=\"" << detail::fmt2(y0)
            << "\" x2=\"" << detail::fmt2(x1) << "\" y2=\"" << detail::fmt2(y1) << "\"/>\n";
        const double w = child == 0 ? mean_left : 1.0 - mean_left;
        svg << "<text x=\"" << detail::fmt2((x0 + x1) / 2.0 + (child ? 4.0 : -24.0)) << "\" y=\""
            << detail::fmt2((y0 + y1) / 2.0) << "\">" << detail::fmt2(w) << "</text>\n";
      }
    }
  }

  // branch panels
  for (std::size_t level = 0; level < depth; ++level) {
    const std::size_t count = std::size_t{1} << level;
    for (std::size_t slot = 0; slot < count; ++slot) {
      const std::size_t i = count + slot;
      const NodeTrace& trace = out.trav.nodes[i - 1];
      std::size_t best_b = 0;
      for (std::size_t b = 1; b < B; ++b)
        if (trace.score.similarity.data()[b] > trace.score.similarity.data()[best_b]) best_b = b;
      const std::size_t j = trace.score.best_patch[best_b];
      const std::size_t t0 = span * j, t1 = span * (j + k);

      const double px = ly.node_cx(depth, level, slot) - ly.panel_w / 2.0;
      const double py = ly.node_y(level);
      svg << "<g class=\"branch-panel\" data-node=\"" << i << "\">\n";
      svg << "<rect class=\"panel-frame\" x=\"" << detail::fmt2(px) << "\" y=\""
          << detail::fmt2(py) << "\" width=\"" << detail::fmt2(ly.panel_w) << "\" height=\""
          << detail::fmt2(ly.panel_h) << "\"/>\n";
      svg << "<rect class=\"span-highlight\" x=\""
          << detail::fmt2(px + static_cast<double>(t0) / static_cast<double>(T) * ly.panel_w)
          << "\" y=\"" << detail::fmt2(py) << "\" width=\""
          << detail::fmt2(static_cast<double>(t1 - t0) / static_cast<double>(T) * ly.panel_w)
          << "\" height=\"" << detail::fmt2(ly.panel_h) << "\"/>\n";

      // series of the best-matching instance, every channel rescaled into the panel
      const double* base = batch.x.data() + best_b * C * T;
      double lo = base[0], hi = base[0];
      for (std::size_t v = 0; v < C * T; ++v) {
        lo = std::min(lo, base[v]);
        hi = std::max(hi, base[v]);
      }
      const double range = hi - lo < 1e-12 ? 1.0 : hi - lo;
      for (std::size_t c = 0; c < C; ++c) {
        svg << "<polyline class=\"series\" points=\"";
        for (std::size_t t = 0; t < T; ++t) {
          const double vx = px + static_cast<double>(t) / static_cast<double>(T - 1) * ly.panel_w;
          const double vy = py + ly.panel_h - (base[c * T + t] - lo) / range * ly.panel_h;
          if (t) svg << " ";
          svg << detail::fmt2(vx) << "," << detail::fmt2(vy);
        }
        svg << "\"/>\n";
      }
      svg << "<text x=\"" << detail::fmt2(px) << "\" y=\"" << detail::fmt2(py - 3.0) << "\">n"
          << i << " sim=" << detail::fmt2(trace.score.similarity.data()[best_b]) << "</text>\n";
      svg << "</g>\n";
    }
  }

  // leaf labels with the dominant class of each leaf's mean distribution
  const std::size_t leaves = tree.num_leaves();
  const double cell = ly.inner_width(depth) / static_cast<double>(leaves);
  for (std::size_t j = 0; j < leaves; ++j) {
    const Tensor& dist = out.trav.leaf_dist[j];
    const std::size_t M = dist.dim(1);
    std::size_t best_c = 0;
    double best_v = -1.0;
    for (std::size_t c = 0; c < M; ++c) {
      double mean = 0.0;
      for (std::size_t b = 0; b < B; ++b) mean += dist.data()[b * M + c];
      if (mean > best_v) {
        best_v = mean;
        best_c = c;
      }
    }
    const std::string cls = best_c < class_names.size() ? class_names[best_c]
                                                        : "class" + std::to_string(best_c);
    svg << "<text class=\"leaf-label\" x=\""
        << detail::fmt2(ly.margin + (static_cast<double>(j) + 0.5) * cell - 0.4 * ly.panel_w)
        << "\" y=\"" << detail::fmt2(ly.leaf_y(depth)) << "\">leaf " << (leaves + j) << ": "
        << detail::xml_escape(cls) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void render_tree_figure_file(const Model& model, const Batch& batch,
                                    const std::vector<std::string>& class_names,
                                    const std::string& file,
                                    const FigureLayout& ly = FigureLayout{}) {
  std::ofstream f(file, std::ios::binary);
  if (!f) throw IoError("render_tree_figure: cannot open " + file);
  f << render_tree_figure(model, batch, class_names, ly);
  if (!f) throw IoError("render_tree_figure: write failed for " + file);
}

}  // namespace sttree
