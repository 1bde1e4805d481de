#include <string>
#include <vector>

#include "metapid/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return metapid::cli::dispatch(args);
}
