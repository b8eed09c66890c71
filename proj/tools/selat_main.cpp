#include <iostream>

#include "selat/cli.hpp"

int main(int argc, char** argv) {
  return selat::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
