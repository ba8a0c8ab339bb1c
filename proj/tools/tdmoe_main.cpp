// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "tdmoe/cli.hpp"

int main(int argc, char** argv) {
  return tdmoe::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
