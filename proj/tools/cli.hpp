#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mdf/stats.hpp"

namespace mdf::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUnknownSubcommand = 2,
    kMissingFlag = 3,
    kBadArgument = 4,
    kIoError = 5,
};

/// `args` excludes the program name. Diagnostics go to `err` as one line.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// MDF_RUNS_DIR when set, otherwise "runs".
std::filesystem::path runs_root();

/// `<root>/<stage>/<name>`, or the first free of exp, exp2, exp3, ... when name is empty.
std::filesystem::path run_dir(const std::filesystem::path& root, const std::string& stage, const std::string& name);

/// {"name": ..., "seeds": [...], "metrics": {"<metric>": [...]}}
MetricTable load_metric_table(const std::filesystem::path& path);

}  // namespace mdf::cli
