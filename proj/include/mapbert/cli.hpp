#pragma once

// Command-line front end: gen-data, train-vae, train-mt, generate, eval and
// ablate, each a thin wrapper over the library driven by one config file.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mapbert/map_core.hpp"

namespace mapbert {

/// Runs one command. `args` excludes the program name. Returns the exit code:
/// 0 ok, 2 config error, 3 data error, 4 training divergence, 5 evaluation
/// error. Failures print exactly one JSON line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses a mask spec into a plan over a grid of `rows` x `cols` patches.
/// Accepted forms: "" (nothing masked), "all", "random:<ratio>",
/// "object:<ratio>" (needs `target`), or "r,c;r,c;..." patch coordinates.
MaskPlan parse_mask_spec(const std::string& spec, const SemanticMap& map, int patch_size,
                         std::optional<int> target, std::uint64_t seed);

}  // namespace mapbert
