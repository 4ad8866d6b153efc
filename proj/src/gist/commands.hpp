#pragma once

#include <string>
#include <vector>

#include "gist/util.hpp"

namespace gist {

/// File-level operations behind the CLI subcommands. Each takes a JSON object
/// of options (paths, model ids, hyperparameters) and returns a JSON summary.
/// Relative paths are taken as given (relative to the working directory).
///
/// Names: data.validate, data.kshot, data.dedup, captions.generate,
/// captions.summarize, embed.images, embed.texts, match, finetune,
/// probe.train, probe.predict, zeroshot.build, zeroshot.predict,
/// eval.bootstrap, eval.kshot, run.
json run_command(const std::string& name, const json& options);

std::vector<std::string> command_names();

}  // namespace gist
