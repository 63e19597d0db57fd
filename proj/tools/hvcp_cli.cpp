#include <iostream>

#include "hvcp/cli.hpp"

int main(int argc, char** argv) {
  return hvcp::cli::run(argc, argv, std::cout, std::cerr);
}
