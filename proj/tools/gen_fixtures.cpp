// Generates the synthetic .ts corpora used by tests and the acceptance gate.
// Shapes mirror three published benchmark datasets (instances, channels,
// length, classes); the signals themselves are seeded sinusoids with
// class-specific frequency, amplitude and offset patterns plus noise, so
// the classes are learnable at desk scale. Output is fully deterministic.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "sttree/rng.hpp"
#include "sttree/ts_data.hpp"

namespace {

using sttree::Dataset;
using sttree::Instance;
using sttree::SplitMix64;

Dataset make_split(const std::string& name, const std::vector<std::string>& classes,
                   std::size_t per_class, std::size_t channels, std::size_t length,
                   std::uint64_t seed) {
  Dataset ds;
  ds.name = name;
  ds.class_names = classes;
  ds.num_channels = channels;
  ds.series_length = length;
  SplitMix64 rng(seed);
  const double two_pi = 6.283185307179586;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (std::size_t r = 0; r < per_class; ++r) {
      Instance inst;
      inst.label = c;
      inst.values.resize(channels);
      const double phase = rng.uniform(-0.5, 0.5);
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double freq = 1.0 + static_cast<double>((c * 2 + ch) % 4);
        const double amp = 0.7 + 0.15 * static_cast<double>((c + 2 * ch) % 3);
        const double offset = 0.8 * (static_cast<double>((c + ch) % 3) - 1.0);
        auto& series = inst.values[ch];
        series.resize(length);
        for (std::size_t t = 0; t < length; ++t) {
          const double pos = static_cast<double>(t) / static_cast<double>(length);
          series[t] = offset + amp * std::sin(two_pi * freq * pos + phase) + 0.2 * rng.normal();
        }
      }
      ds.instances.push_back(std::move(inst));
    }
  }
  return ds;
}

void emit(const std::string& root, const std::string& name,
          const std::vector<std::string>& classes, std::size_t per_class_train,
          std::size_t per_class_test, std::size_t channels, std::size_t length,
          std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(root + "/" + name);
  const Dataset train =
      make_split(name, classes, per_class_train, channels, length, sttree::derive_seed(seed, "train"));
  const Dataset test =
      make_split(name, classes, per_class_test, channels, length, sttree::derive_seed(seed, "test"));
  sttree::write_ts(train, root + "/" + name + "/" + name + "_TRAIN.ts");
  sttree::write_ts(test, root + "/" + name + "/" + name + "_TEST.ts");
  std::printf("%s: %zu train / %zu test, %zu channels, length %zu, %zu classes\n", name.c_str(),
              train.size(), test.size(), channels, length, classes.size());
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: gen_fixtures <output-root>\n");
    return 1;
  }
  const std::string root = argv[1];
  emit(root, "BasicMotions", {"Standing", "Running", "Walking", "Badminton"}, 10, 10, 6, 100,
       0x5eedb01u);
  emit(root, "NATOPS", {"1.0", "2.0", "3.0", "4.0", "5.0", "6.0"}, 30, 30, 24, 51, 0x5eedb02u);
  emit(root, "AtrialFibrillation", {"n", "s", "t"}, 5, 5, 2, 640, 0x5eedb03u);
  return 0;
}
