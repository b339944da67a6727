#pragma once

// Multivariate time-series classification data: the .ts text format (header
// directives, ':'-separated channels, trailing class label), channel-wise
// z-normalization, edge padding, and deterministic batching.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sttree/errors.hpp"
#include "sttree/rng.hpp"
#include "sttree/tensor.hpp"

namespace sttree {

struct Instance {
  std::vector<std::vector<double>> values;  // [channel][time]
  std::size_t label = 0;
};

struct Dataset {
  std::string name;
  std::vector<std::string> class_names;  // index == integer label
  std::vector<Instance> instances;
  std::size_t num_channels = 0;
  std::size_t series_length = 0;

  std::size_t size() const { return instances.size(); }
  std::size_t num_classes() const { return class_names.size(); }
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population, not floored; floor applied at use
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (true) {
    const std::size_t next = s.find(sep, at);
    if (next == std::string::npos) {
      out.push_back(s.substr(at));
      return out;
    }
    out.push_back(s.substr(at, next - at));
    at = next + 1;
  }
}

inline double parse_value(const std::string& tok, const std::string& origin,
                          std::size_t line_no) {
  if (tok == "?") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw FormatError(origin + ":" + std::to_string(line_no) + ": bad numeric value '" +
                      tok + "'");
  return v;
}

// Shortest decimal string that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace detail

// Parses .ts text. Dimensions come from the first data line and are checked
// against header directives when those are present. '?' values are imputed
// with the instance's per-channel mean of the observed values. Labels map to
// integers in order of first appearance.
inline Dataset parse_ts_text(const std::string& text, const std::string& origin = "<memory>") {
  Dataset ds;
  bool in_data = false;
  std::size_t header_dims = 0;
  std::size_t header_len = 0;
  std::vector<std::string> declared_classes;
  std::size_t max_len = 0;
  std::size_t line_no = 0;

  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;

    if (!in_data && line[0] == '@') {
      std::istringstream hs(line);
      std::string key;
      hs >> key;
      key = detail::lower(key);
      if (key == "@problemname") {
        hs >> ds.name;
      } else if (key == "@dimensions") {
        hs >> header_dims;
      } else if (key == "@serieslength") {
        hs >> header_len;
      } else if (key == "@classlabel") {
        std::string flag, name;
        hs >> flag;
        while (hs >> name) declared_classes.push_back(name);
      } else if (key == "@data") {
        in_data = true;
      }
      // other directives (@timeStamps, @missing, ...) carry no data here
      continue;
    }
    if (!in_data)
      throw FormatError(origin + ":" + std::to_string(line_no) +
                        ": data line before @data directive");

    const std::vector<std::string> fields = detail::split(line, ':');
    if (fields.size() < 2)
      throw FormatError(origin + ":" + std::to_string(line_no) + ": missing label field");
    const std::size_t channels = fields.size() - 1;
    if (ds.instances.empty()) {
      if (header_dims != 0 && channels != header_dims)
        throw FormatError(origin + ":" + std::to_string(line_no) + ": first data line has " +
                          std::to_string(channels) + " channels, header declares " +
                          std::to_string(header_dims));
      ds.num_channels = channels;
    } else if (channels != ds.num_channels) {
      throw FormatError(origin + ":" + std::to_string(line_no) + ": ragged channel count " +
                        std::to_string(channels) + ", expected " +
                        std::to_string(ds.num_channels));
    }

    Instance inst;
    inst.values.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      for (const std::string& tok : detail::split(fields[c], ',')) {
        const std::string t = detail::trim(tok);
        if (t.empty())
          throw FormatError(origin + ":" + std::to_string(line_no) + ": empty value in channel " +
                            std::to_string(c));
        inst.values[c].push_back(detail::parse_value(t, origin, line_no));
      }
      if (header_len != 0 && inst.values[c].size() > header_len)
        throw FormatError(origin + ":" + std::to_string(line_no) + ": channel " +
                          std::to_string(c) + " longer than declared series length " +
                          std::to_string(header_len));
      max_len = std::max(max_len, inst.values[c].size());
      // impute missing values with the channel mean of this instance
      double sum = 0.0;
      std::size_t seen = 0;
      for (double v : inst.values[c])
        if (!std::isnan(v)) {
          sum += v;
          ++seen;
        }
      const double fill = seen ? sum / static_cast<double>(seen) : 0.0;
      for (double& v : inst.values[c])
        if (std::isnan(v)) v = fill;
    }

    const std::string label = detail::trim(fields.back());
    if (label.empty())
      throw FormatError(origin + ":" + std::to_string(line_no) + ": empty class label");
    if (!declared_classes.empty() &&
        std::find(declared_classes.begin(), declared_classes.end(), label) ==
            declared_classes.end())
      throw ValueError(origin + ":" + std::to_string(line_no) + ": unknown class label '" +
                       label + "'");
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label);
    if (it == ds.class_names.end()) {
      inst.label = ds.class_names.size();
      ds.class_names.push_back(label);
    } else {
      inst.label = static_cast<std::size_t>(it - ds.class_names.begin());
    }
    ds.instances.push_back(std::move(inst));
  }

  if (!in_data) throw FormatError(origin + ": missing @data directive");
  if (ds.instances.empty()) throw FormatError(origin + ": no instances");

  ds.series_length = header_len != 0 ? header_len : max_len;
  for (Instance& inst : ds.instances)
    for (auto& ch : inst.values)
      while (ch.size() < ds.series_length) ch.push_back(ch.back());
  return ds;
}

inline Dataset parse_ts(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("parse_ts: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_ts_text(buf.str(), path);
}

inline std::string serialize_ts(const Dataset& ds) {
  std::ostringstream out;
  out << "@problemName " << (ds.name.empty() ? "unnamed" : ds.name) << "\n";
  out << "@dimensions " << ds.num_channels << "\n";
  out << "@seriesLength " << ds.series_length << "\n";
  out << "@classLabel true";
  for (const std::string& c : ds.class_names) out << " " << c;
  out << "\n@data\n";
  for (const Instance& inst : ds.instances) {
    for (std::size_t c = 0; c < inst.values.size(); ++c) {
      if (c) out << ":";
      const auto& ch = inst.values[c];
      for (std::size_t t = 0; t < ch.size(); ++t) {
        if (t) out << ",";
        out << detail::format_double(ch[t]);
      }
    }
    out << ":" << ds.class_names[inst.label] << "\n";
  }
  return out.str();
}

inline void write_ts(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ts: cannot open " + path);
  f << serialize_ts(ds);
}

inline ChannelStats channel_stats(const Dataset& ds) {
  ChannelStats st;
  st.mean.assign(ds.num_channels, 0.0);
  st.stddev.assign(ds.num_channels, 0.0);
  for (std::size_t c = 0; c < ds.num_channels; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const Instance& inst : ds.instances)
      for (double v : inst.values[c]) {
        sum += v;
        ++n;
      }
    const double mu = n ? sum / static_cast<double>(n) : 0.0;
    double ss = 0.0;
    for (const Instance& inst : ds.instances)
      for (double v : inst.values[c]) ss += (v - mu) * (v - mu);
    st.mean[c] = mu;
    st.stddev[c] = n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;  // population
  }
  return st;
}

// (x - mean) / stddev per channel, stddev floored at 1e-8 so constant
// channels map to zeros instead of blowing up.
inline Dataset z_normalize(const Dataset& ds, const ChannelStats& st) {
  if (st.mean.size() != ds.num_channels)
    throw ShapeError("z_normalize: stats cover " + std::to_string(st.mean.size()) +
                     " channels, dataset has " + std::to_string(ds.num_channels));
  Dataset out = ds;
  for (Instance& inst : out.instances)
    for (std::size_t c = 0; c < inst.values.size(); ++c) {
      const double mu = st.mean[c];
      const double sd = std::max(st.stddev[c], 1e-8);
      for (double& v : inst.values[c]) v = (v - mu) / sd;
    }
  return out;
}

inline Dataset z_normalize(const Dataset& ds) { return z_normalize(ds, channel_stats(ds)); }

// Right-pads every channel with its last value until the length is a
// positive multiple of m.
inline Instance pad_to_multiple(const Instance& inst, std::size_t m) {
  if (m == 0) throw ValueError("pad_to_multiple: multiple must be positive");
  Instance out = inst;
  for (auto& ch : out.values) {
    if (ch.empty()) throw ShapeError("pad_to_multiple: empty channel");
    const std::size_t target = ((ch.size() + m - 1) / m) * m;
    while (ch.size() < target) ch.push_back(ch.back());
  }
  return out;
}

inline Dataset pad_dataset(const Dataset& ds, std::size_t m) {
  Dataset out = ds;
  for (Instance& inst : out.instances) inst = pad_to_multiple(inst, m);
  out.series_length = ((ds.series_length + m - 1) / m) * m;
  return out;
}

// Remaps integer labels onto a reference class ordering (train split owns
// the mapping, evaluation splits align to it).
inline void align_labels(Dataset& ds, const std::vector<std::string>& names) {
  for (Instance& inst : ds.instances) {
    const std::string& cls = ds.class_names[inst.label];
    auto it = std::find(names.begin(), names.end(), cls);
    if (it == names.end())
      throw ValueError("align_labels: class '" + cls + "' not present in reference mapping");
    inst.label = static_cast<std::size_t>(it - names.begin());
  }
  ds.class_names = names;
}

// Deterministic epoch batching: a seeded Fisher-Yates permutation chunked
// into batches, the last one short. Every index appears exactly once.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch,
                                                           std::uint64_t seed, bool shuffle) {
  if (batch == 0) throw ValueError("batch_indices: batch size must be positive");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (shuffle && n > 1) {
    SplitMix64 rng(seed);
    for (std::size_t i = n - 1; i > 0; --i)
      std::swap(idx[i], idx[rng.index(i + 1)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch) {
    const std::size_t take = std::min(batch, n - at);
    out.emplace_back(idx.begin() + at, idx.begin() + at + take);
  }
  return out;
}

struct Batch {
  Tensor x;  // [B x C x L]
  Tensor y;  // [B] integer labels stored as doubles
  std::vector<std::size_t> indices;
};

inline Batch gather_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ShapeError("gather_batch: empty index set");
  const std::size_t B = indices.size(), C = ds.num_channels, L = ds.series_length;
  Tensor x({B, C, L});
  Tensor y({B});
  double* px = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    const Instance& inst = ds.instances[indices[b]];
    if (inst.values.size() != C)
      throw ShapeError("gather_batch: instance has " + std::to_string(inst.values.size()) +
                       " channels, dataset declares " + std::to_string(C));
    for (std::size_t c = 0; c < C; ++c) {
      if (inst.values[c].size() != L)
        throw ShapeError("gather_batch: channel length " +
                         std::to_string(inst.values[c].size()) + " != series length " +
                         std::to_string(L));
      std::copy_n(inst.values[c].data(), L, px + (b * C + c) * L);
    }
    y.data()[b] = static_cast<double>(inst.label);
  }
  Batch out;
  out.x = x;
  out.y = y;
  out.indices = indices;
  return out;
}

inline std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch, std::uint64_t seed,
                                       bool shuffle) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(ds.size(), batch, seed, shuffle))
    out.push_back(gather_batch(ds, idx));
  return out;
}

// Splits off a stratified validation share: per class, floor(frac * count)
// but at least one when the class has two or more members.
inline std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double frac,
                                                    std::uint64_t seed) {
  if (frac <= 0.0 || frac >= 1.0) throw ValueError("stratified_split: frac must be in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.instances[i].label].push_back(i);
  std::vector<bool> to_val(ds.size(), false);
  SplitMix64 rng(seed);
  for (auto& members : by_class) {
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[rng.index(i)]);
    std::size_t take = static_cast<std::size_t>(frac * static_cast<double>(members.size()));
    if (take == 0 && members.size() >= 2) take = 1;
    for (std::size_t i = 0; i < take; ++i) to_val[members[i]] = true;
  }
  Dataset train = ds, val = ds;
  train.instances.clear();
  val.instances.clear();
  for (std::size_t i = 0; i < ds.size(); ++i)
    (to_val[i] ? val : train).instances.push_back(ds.instances[i]);
  return {train, val};
}

}  // namespace sttree
