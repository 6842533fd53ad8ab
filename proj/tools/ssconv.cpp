#include "ssconv/commands.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return ssconv::cli::run(argc, argv, std::cout, std::cerr);
}
