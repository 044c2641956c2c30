#include <iostream>

#include "negsteer/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return negsteer::cli::run(args, std::cout, std::cerr);
}
