#pragma once

#include <algorithm>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "neurocell/pipeline.hpp"

namespace neurocell {

inline const std::vector<std::pair<std::string, std::string>>& subcommands() {
  static const std::vector<std::pair<std::string, std::string>> list = {
      {"synth", "write synthetic two-channel scenes, ground truth and a ground-truth patch set"},
      {"train-seg", "train the U-Net segmenter on <data_dir>/train"},
      {"segment", "write probability maps for every scene in the input directory"},
      {"extract", "threshold probability maps, find cells and write patches plus a manifest"},
      {"train-cls", "cross-validate and train the cell classifier on a patch manifest"},
      {"classify", "segment and classify every cell of every input scene"},
      {"evaluate", "collect cross-validation summaries into accuracy and confusion reports"},
      {"gradcheck", "run the finite-difference gradient suite"},
  };
  return list;
}

/// Runs one subcommand. `args` excludes the program name. Exit codes: 0 ok,
/// 1 failed check or unexpected error, 2 bad usage / config / missing input,
/// 3 internal contract violation.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using pipeline::json;
  CLI::App app{"Two-photon cell segmentation and classification pipeline", "neurocell"};
  app.require_subcommand(1, 1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON configuration file");
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "single-threaded, bitwise reproducible execution");

  const json defaults = pipeline::default_config();
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  for (const auto& [key, value] : defaults.items()) {
    if (key == "deterministic") continue;
    const auto help = pipeline::field_help().find(key);
    std::string text = help == pipeline::field_help().end() ? std::string() : help->second;
    if (!(value.is_string() && value.get<std::string>().empty())) text += " (default " + value.dump() + ")";
    options[key] = app.add_option("--" + key, values[key], text);
    options[key]->type_name(value.is_boolean()          ? "BOOL"
                            : value.is_number_integer() ? "INT"
                            : value.is_number()         ? "NUM"
                            : value.is_array()          ? "LIST"
                                                        : "TEXT");
  }
  for (const auto& [name, help] : subcommands()) app.add_subcommand(name, help)->fallthrough();

  std::vector<std::string> argv_store = {"neurocell"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    // The first bare word is the subcommand; name it if CLI11 did not recognise it.
    std::string message = e.what();
    for (std::size_t i = 0; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.rfind("--", 0) == 0) {
        if (a.find('=') == std::string::npos && a != "--deterministic") ++i;
        continue;
      }
      const bool known = std::any_of(subcommands().begin(), subcommands().end(),
                                     [&](const auto& s) { return s.first == a; });
      if (!known) message = "unknown subcommand '" + a + "'";
      break;
    }
    err << "neurocell: " << message << "\n\n" << app.help();
    return 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  try {
    json raw = defaults;
    if (!config_path.empty()) pipeline::merge_into(raw, pipeline::load_config_file(config_path), config_path);
    json flags = json::object();
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) flags[key] = pipeline::parse_flag_value(key, defaults[key], values[key]);
    }
    if (deterministic) flags["deterministic"] = true;
    pipeline::merge_into(raw, flags, "command-line flags");
    const pipeline::PipelineConfig cfg = pipeline::validate(std::move(raw));

    if (sub == "synth") pipeline::run_synth(cfg, out);
    if (sub == "train-seg") pipeline::run_train_seg(cfg, out);
    if (sub == "segment") pipeline::run_segment(cfg, out);
    if (sub == "extract") pipeline::run_extract(cfg, out);
    if (sub == "train-cls") pipeline::run_train_cls(cfg, out);
    if (sub == "classify") pipeline::run_classify(cfg, out);
    if (sub == "evaluate") pipeline::run_evaluate(cfg, out);
    if (sub == "gradcheck") return pipeline::run_gradcheck(cfg, out);
    return 0;
  } catch (const MissingInputError& e) {
    err << "neurocell " << sub << ": " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "neurocell " << sub << ": " << e.what() << "\n";
    return 2;
  } catch (const GenerationError& e) {
    err << "neurocell " << sub << ": " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    err << "neurocell " << sub << ": " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    err << "neurocell " << sub << ": internal error: " << e.what() << "\n";
    return 3;
  } catch (const DimensionError& e) {
    err << "neurocell " << sub << ": internal error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "neurocell " << sub << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace neurocell
