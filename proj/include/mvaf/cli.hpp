#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mvaf/train.hpp"

namespace mvaf {

// Everything one command needs, resolved from a flat config plus overrides.
struct RunConfig {
  SceneConfig scene;
  ModelConfig model;
  TrainConfig train;
  SplitOptions split;
  std::size_t single_view = 0;  // compare.single_view
};

// Every accepted key with its default value.
FlatConfig default_run_config();
FlatConfig store_run_config(const RunConfig& config);
// Rejects keys that default_run_config() does not define.
RunConfig resolve_run_config(const FlatConfig& overrides);

// Attention maps of one annotated person, as recorded during a forward pass.
std::vector<AttentionRecord> sample_attention(const ParamStore<float>& params, const RunSpec& run,
                                              const Dataset& data, std::size_t sample);

// Binary P6 image of the weights from the queries of `query_view` to every
// key: height tokens_per_view, width views * tokens_per_view, gray levels
// scaled so the block maximum is white.
void write_heatmap_ppm(std::ostream& os, const AttentionRecord& record, std::size_t tokens_per_view,
                       std::size_t query_view);

// The mvaf command line; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mvaf
