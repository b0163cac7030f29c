// Generates the procedural desk-scale corpora used for demos and smoke
// training runs.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ucast/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"procedural corpus generator"};
  std::string out_dir, kind = "realistic";
  int64_t count = 32;
  int64_t resolution = 64;
  uint64_t seed = 7;
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--kind", kind, "realistic | style0 | style1 | art");
  app.add_option("--count", count, "number of images");
  app.add_option("--resolution", resolution, "square image size");
  app.add_option("--seed", seed, "RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    ucast::write_synthetic_corpus(out_dir, kind, count, resolution, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
