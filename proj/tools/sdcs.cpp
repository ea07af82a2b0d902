#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

#include "sdcs/error.hpp"
#include "sdcs/pipeline.hpp"

namespace pl = sdcs::pipeline;

namespace {

void common_flags(CLI::App* cmd, pl::CommandOptions& o, std::string& config, std::uint64_t& seed,
                  float& threshold, int& tile_size) {
  cmd->add_option("--config", config, "key = value configuration file");
  cmd->add_option("--seed", seed, "master seed (re-derives every component seed)");
  cmd->add_option("--threshold", threshold, "detection threshold in (0, 1)");
  cmd->add_option("--tile-size", tile_size, "tile edge in pixels")->check(CLI::PositiveNumber);
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_flag("--force", o.force, "overwrite existing outputs");
}

}  // namespace

int main(int argc, char** argv) {
  pl::init_logging();
  CLI::App app{"Ki67 cell detection, classification and scoring"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pl::kVersion);

  pl::CommandOptions o;
  std::string config;
  std::uint64_t seed = 0;
  float threshold = 0.0f;
  int tile_size = 0;

  auto add = [&](const char* name, const char* help) {
    CLI::App* cmd = app.add_subcommand(name, help);
    common_flags(cmd, o, config, seed, threshold, tile_size);
    return cmd;
  };

  CLI::App* synth = add("synth", "generate synthetic train/val/test tiles with annotations");
  CLI::App* train_sdcs = add("train-sdcs", "train the detection network");
  train_sdcs->add_option("--data", o.data, "annotated training tiles")->required();
  CLI::App* calibrate = add("calibrate", "pick the detection threshold on validation tiles");
  calibrate->add_option("--data", o.data, "annotated validation tiles")->required();
  calibrate->add_option("--model", o.model, "model directory")->required();
  CLI::App* train_center = add("train-center", "train the nucleus-centre classifier");
  train_center->add_option("--data", o.data, "annotated training tiles")->required();
  train_center->add_option("--model", o.model, "model directory holding the detection network");
  CLI::App* train_svm = add("train-svm", "train the handcrafted-feature SVM baseline");
  train_svm->add_option("--data", o.data, "annotated training tiles")->required();
  train_svm->add_option("--val-data", o.val_data, "annotated validation tiles")->required();
  CLI::App* detect = add("detect", "detect nuclei in images");
  detect->add_option("--model", o.model, "model directory");
  detect->add_option("--data", o.data, "directory of input images");
  detect->add_option("--method", o.method, "sdcs | classical");
  detect->add_option("images", o.inputs, "input images");
  CLI::App* classify = add("classify", "assign a cell class to every detection");
  classify->add_option("--model", o.model, "model directory")->required();
  classify->add_option("--detections", o.detections, "directory of detection CSVs")->required();
  classify->add_option("--data", o.data, "directory of input images");
  classify->add_option("--method", o.method, "center | svm");
  classify->add_option("images", o.inputs, "input images");
  CLI::App* evaluate = add("evaluate", "compare classified detections with annotations");
  evaluate->add_option("--detections", o.detections, "directory of classified detection CSVs")->required();
  evaluate->add_option("--annotations", o.annotations, "directory of annotation JSON files")->required();
  CLI::App* score = add("score", "Ki67 index per image");
  score->add_option("--detections", o.detections, "directory of classified detection CSVs");
  score->add_option("files", o.inputs, "classified detection CSVs");
  CLI::App* overlay = add("overlay", "draw class-coloured markers over images");
  overlay->add_option("--detections", o.detections, "directory of detection CSVs")->required();
  overlay->add_option("--data", o.data, "directory of input images");
  overlay->add_option("images", o.inputs, "input images");
  CLI::App* bench = add("benchmark", "end-to-end synthetic benchmark of the three pipelines");
  bench->add_option("--seeds", o.seeds, "seeds to run (default: the config seed)");
  bench->add_option("--variants", o.variants, "hypercolumn conv5 classical");

  CLI11_PARSE(app, argc, argv);

  for (CLI::App* cmd : app.get_subcommands()) {
    if (cmd->count("--config")) o.config_path = config;
    if (cmd->count("--seed")) o.seed = seed;
    if (cmd->count("--threshold")) o.threshold = threshold;
    if (cmd->count("--tile-size")) o.tile_size = tile_size;
  }

  try {
    if (synth->parsed()) pl::cmd_synth(o);
    else if (train_sdcs->parsed()) pl::cmd_train_sdcs(o);
    else if (calibrate->parsed()) pl::cmd_calibrate(o);
    else if (train_center->parsed()) pl::cmd_train_center(o);
    else if (train_svm->parsed()) pl::cmd_train_svm(o);
    else if (detect->parsed()) pl::cmd_detect(o);
    else if (classify->parsed()) pl::cmd_classify(o);
    else if (evaluate->parsed()) pl::cmd_evaluate(o);
    else if (score->parsed()) pl::cmd_score(o, std::cout);
    else if (overlay->parsed()) pl::cmd_overlay(o);
    else if (bench->parsed()) pl::cmd_benchmark(o, std::cout);
  } catch (const sdcs::Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("unexpected failure: {}", e.what());
    return 3;
  }
  return 0;
}
