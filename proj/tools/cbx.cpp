#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cbx/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Batch matrices are large enough to hit mmap on every allocation otherwise.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
#endif
  std::vector<std::string> args(argv + 1, argv + argc);
  return cbx::run_cli(args, std::cout, std::cerr);
}
