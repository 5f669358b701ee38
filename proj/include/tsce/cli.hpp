#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tsce {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kDataDirEnv = "TSCE_DATA_DIR";

/// Runs one command line; `args` excludes the program name. Diagnostics go to
/// `err`, results to `out`. Returns 0 on success, 1 on a runtime failure and 2
/// on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Run manifest (JSON object), one per command invocation:
//   schema              "tsce-run-manifest/1"
//   command             subcommand name
//   args                fully resolved argument list; replaying it reproduces the run
//   config              resolved settings (hyperparameters text, train config, ...)
//   seeds               {name: integer}
//   inputs, outputs     [{path, fnv1a64}]  (hex digests of file contents)
//   rows                [{table, classifier, dataset, accuracy}]  accuracy-table cells written
//   started_at          UTC timestamp, wall_clock_seconds: number
//   versions            {tsce, checkpoint_format, hyperparameters}
inline constexpr const char* kManifestSchema = "tsce-run-manifest/1";

}  // namespace tsce
