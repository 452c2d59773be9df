#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "voxadapt/io.hpp"
#include "voxadapt/training.hpp"

namespace voxadapt {

/// Keys of a training config file. `seed` is shared with the dataset keys.
ConfigMap train_config_map(const TrainConfig& config);
/// Applies `map` over `base`; throws on unknown keys and invalid values.
TrainConfig train_config_from_map(const ConfigMap& map, TrainConfig base = {});

/// Subcommands: gen-data, train, eval, retrieve, sweep-phi2, export.
/// Returns 0 on success, 2 on usage errors and 1 on runtime errors.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, const char* const* argv);

}  // namespace voxadapt
