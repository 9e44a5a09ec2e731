// The `rinv` command line, callable in-process so the acceptance binary and
// the tests drive exactly what a shell user runs.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rinv::cli {

enum Exit : int { ok = 0, failure = 1, usage = 2, numerical = 3, verification = 4 };

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

/// Parallelism cap from RINV_THREADS; 1 when unset. Throws std::invalid_argument
/// for anything but a positive integer.
unsigned thread_cap();

}  // namespace rinv::cli
