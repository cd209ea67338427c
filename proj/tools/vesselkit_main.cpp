#include <iostream>

#include "vesselkit/cli.hpp"

int main(int argc, char** argv) { return vk::cli::dispatch(argc, argv, std::cout, std::cerr); }
