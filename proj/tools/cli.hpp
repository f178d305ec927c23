#pragma once

namespace fusereg::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericFailure = 3 };

int run(int argc, char** argv);

}  // namespace fusereg::cli
