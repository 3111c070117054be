#include <iostream>

#include "metaforge/cli.hpp"

int main(int argc, char** argv) {
  return metaforge::cli::run(argc, argv, std::cout, std::cerr).exit_code;
}
