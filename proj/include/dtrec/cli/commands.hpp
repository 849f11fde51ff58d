#pragma once

#include "dtrec/cli/config.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dtrec::cli {

/// Creates `parent/name`, or `parent/name-1`, `-2`, ... if taken.
std::filesystem::path make_run_dir(const std::filesystem::path& parent, const std::string& name);

// Each command returns its run directory.
std::filesystem::path cmd_gen_data(const RunConfig& config);
std::filesystem::path cmd_train(const RunConfig& config);
std::filesystem::path cmd_eval(const RunConfig& config);
std::filesystem::path cmd_ablate(const RunConfig& config);
std::filesystem::path cmd_analyze(const RunConfig& config);

/// Entry point: parses arguments, dispatches, and maps failures to exit codes
/// (0 success, 1 runtime failure, 2 usage or configuration error).
int run(int argc, char** argv);

}  // namespace dtrec::cli
