#include <iostream>

#include "commands.hpp"
#include "fsaa/tensor.hpp"

int main(int argc, char** argv) {
  fsaa::configure_allocator();
  return fsaa::cli::run(argc, argv, std::cout, std::cerr);
}
