// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "geoweaver/cli.hpp"

int main(int argc, char** argv) { return geoweaver::cli_main(argc, argv, std::cout, std::cerr); }
