// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Writes the deterministic synthetic desk corpus to a file.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "tdmoe/corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the synthetic training corpus", "make_corpus"};
  std::uint64_t seed = 7;
  std::size_t bytes = 1 << 20;
  std::string path;
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--bytes", bytes, "Minimum corpus size in bytes");
  app.add_option("--out", path, "Output file")->required();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string text = tdmoe::synthesize_text(seed, bytes);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(text.data(), static_cast<std::streamsize>(text.size()))) {
    std::cerr << "error: cannot write " << path << '\n';
    return 1;
  }
  std::cout << "wrote " << text.size() << " bytes to " << path << '\n';
  return 0;
}
