// Writes a synthetic demo workspace: toy model, training corpus and labeled
// init / calibration / test splits.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "prefixprobe/synthetic.hpp"

namespace pp = prefixprobe;

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic prefix-probing workspace"};
  std::string out_dir = "demo";
  std::string suite = "standard";
  std::size_t corpus_lines = 3000, n_init = 200, n_calib = 200, n_test = 400;
  std::uint32_t seed = 7;
  app.add_option("--out-dir", out_dir, "directory to write into");
  app.add_option("--suite", suite, "standard or compact")
      ->check(CLI::IsMember({"standard", "compact"}));
  app.add_option("--corpus-lines", corpus_lines, "training lines for the toy model");
  app.add_option("--seed", seed, "base seed; splits use seed+4, seed+5, seed+6");
  app.add_option("--init", n_init, "init split size");
  app.add_option("--calibration", n_calib, "calibration split size");
  app.add_option("--test", n_test, "test split size");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto spec =
        suite == "compact" ? pp::synthetic::compact_suite() : pp::synthetic::standard_suite();
    std::filesystem::create_directories(out_dir);
    const auto dir = std::filesystem::path(out_dir);
    const auto corpus = pp::synthetic::make_corpus(spec, corpus_lines, seed);
    std::string text;
    for (const auto& l : corpus) text += l + "\n";
    pp::detail::write_file((dir / "corpus.txt").string(), text);
    pp::train_toy_model(corpus, spec.order, spec.alpha).save((dir / "model.json").string());
    pp::save_dataset(pp::synthetic::make_prompts(spec, n_init, seed + 4, "init"),
                     (dir / "init.jsonl").string());
    pp::save_dataset(pp::synthetic::make_prompts(spec, n_calib, seed + 5, "calib"),
                     (dir / "calibration.jsonl").string());
    pp::save_dataset(pp::synthetic::make_prompts(spec, n_test, seed + 6, "test"),
                     (dir / "test.jsonl").string());
    std::cerr << "wrote model.json, corpus.txt and three splits to " << out_dir << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
