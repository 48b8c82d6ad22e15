#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ringmo/model.hpp"

namespace ringmo::cli {

/// 64x64 input, 16 channels, one block per stage, 4x4 windows: small enough
/// for CPU smoke runs while keeping every stage and both block types.
model::ModelConfig miniature_model();

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kInternalError = 4 };

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace ringmo::cli
