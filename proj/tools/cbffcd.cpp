#include <vector>
#include <string>

#include "cbff/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cbff::cli::run(args);
}
