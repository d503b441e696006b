// Command-line front end: train / eval / ablate / viz / gen-data.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "edetr/config.hpp"
#include "edetr/viz.hpp"

using namespace edetr;

namespace {

std::vector<ImageSample> make_split(const RunConfig& rc, bool eval_split) {
  ShapesConfig sc;
  sc.seed = rc.data_seed + (eval_split ? 1000003 : 0);
  sc.count = eval_split ? rc.eval_images : rc.train_images;
  sc.image_size = rc.image_size;
  sc.max_objects = rc.max_objects;
  sc.num_classes = rc.train.model.num_classes;
  return generate_shapes(sc);
}

RunConfig config_from(const std::string& path) {
  return path.empty() ? default_config() : load_config(path);
}

int cmd_train(const std::string& config_path, int seed,
              const std::string& out_dir) {
  RunConfig rc = config_from(config_path);
  if (seed >= 0) rc.train.seed = static_cast<std::uint64_t>(seed);
  std::filesystem::create_directories(out_dir);

  auto train_set = make_split(rc, false);
  auto eval_set = make_split(rc, true);
  DetrModel model(rc.train.model, rc.train.seed);
  TrainResult result =
      train(model, train_set, eval_set, rc.train, out_dir + "/metrics.jsonl");
  model.save_checkpoint(out_dir + "/model.json");
  std::cout << result.final_eval.to_json() << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& data_dir) {
  RunConfig rc = config_from(config_path);
  CocoDataset ds = load_dataset(data_dir);
  std::vector<ImageSample> samples;
  for (auto& s : ds.samples) {
    if (!s.pixels.defined())
      throw std::runtime_error("eval: missing image file for " + s.id);
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw std::runtime_error("eval: dataset is empty");

  DetrModel model(rc.train.model, rc.train.seed);
  model.load_checkpoint(checkpoint);
  std::cout << evaluate_model(model, samples, rc.train.proposals.n_end).to_json()
            << "\n";
  return 0;
}

int cmd_gen_data(const std::string& out_dir, int count, int seed,
                 int image_size, int max_objects, int classes) {
  ShapesConfig sc;
  sc.seed = static_cast<std::uint64_t>(seed);
  sc.count = count;
  sc.image_size = image_size;
  sc.max_objects = max_objects;
  sc.num_classes = classes;
  dump_dataset(generate_shapes(sc), out_dir);
  std::cout << "wrote " << count << " images to " << out_dir << "\n";
  return 0;
}

int cmd_viz(const std::string& config_path, const std::string& checkpoint,
            const std::string& data_dir, int index, const std::string& stage,
            const std::string& out_path) {
  RunConfig rc = config_from(config_path);
  DetrModel model(rc.train.model, rc.train.seed);
  if (!checkpoint.empty()) model.load_checkpoint(checkpoint);

  ImageSample sample;
  if (!data_dir.empty()) {
    CocoDataset ds = load_dataset(data_dir);
    if (index < 0 || index >= static_cast<int>(ds.samples.size()))
      throw std::runtime_error("viz: image index out of range");
    sample = std::move(ds.samples[index]);
    if (!sample.pixels.defined())
      throw std::runtime_error("viz: missing image file for " + sample.id);
  } else {
    RunConfig one = rc;
    one.eval_images = index + 1;
    sample = make_split(one, true)[index];
  }

  VizStage vs;
  if (stage == "init") vs = VizStage::kInit;
  else if (stage == "final") vs = VizStage::kFinal;
  else if (stage == "all") vs = VizStage::kAll;
  else throw std::runtime_error("viz: stage must be init|final|all");

  NoGradGuard ng;
  ForwardResult r = model.forward(sample.pixels, rc.train.proposals.n_end);
  std::string svg = emit_reference_points(r, vs, sample.truth);
  std::ofstream f(out_path);
  if (!f) throw std::runtime_error("viz: cannot open " + out_path);
  f << svg;
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axis,
               const std::string& out_path) {
  RunConfig base = config_from(config_path);
  std::vector<std::pair<std::string, RunConfig>> runs;
  auto variant = [&](const std::string& label) -> RunConfig& {
    runs.emplace_back(label, base);
    return runs.back().second;
  };

  if (axis == "init") {
    for (const char* s : {"dense", "learnable", "grid", "center", "border"})
      variant(s).train.model.init = s;
  } else if (axis == "decoder_layers") {
    for (int n : {1, 2, 3}) variant(std::to_string(n)).train.model.decoder_layers = n;
  } else if (axis == "proposals") {
    for (int n : {25, 50, 100}) {
      RunConfig& rc = variant(std::to_string(n));
      rc.train.proposals.n_end = std::min(n, rc.train.proposals.n_start);
    }
  } else if (axis == "assign") {
    for (int n : {1, 10}) variant(std::to_string(n)).train.set_loss.assign_n = n;
  } else if (axis == "ref") {
    variant("2d").train.model.ref_4d = false;
    variant("4d").train.model.ref_4d = true;
  } else if (axis == "share_head") {
    variant("true").train.model.share_head = true;
    variant("false").train.model.share_head = false;
  } else {
    throw std::runtime_error(
        "ablate: axis must be "
        "init|decoder_layers|proposals|assign|ref|share_head");
  }

  std::ofstream csv(out_path);
  if (!csv) throw std::runtime_error("ablate: cannot open " + out_path);
  csv << "axis,value,ap50,ap75,map,recall\n";
  for (auto& [label, rc] : runs) {
    auto train_set = make_split(rc, false);
    auto eval_set = make_split(rc, true);
    DetrModel model(rc.train.model, rc.train.seed);
    TrainResult res = train(model, train_set, eval_set, rc.train);
    const EvalSummary& e = res.final_eval;
    csv << axis << "," << label << "," << e.ap50 << "," << e.ap75 << ","
        << e.map << "," << e.recall << "\n";
    csv.flush();
    std::cerr << axis << "=" << label << " ap50=" << e.ap50 << "\n";
  }
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Efficient end-to-end detector: train, evaluate, ablate, "
               "visualize, and generate data"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run", checkpoint, data_dir;
  std::string stage = "all", out_path, axis;
  int seed = -1, count = 100, gen_seed = 0, image_size = 64, max_objects = 3,
      classes = 3, index = 0;

  auto* t = app.add_subcommand("train", "train a model from a config");
  t->add_option("--config", config_path, "INI config file");
  t->add_option("--seed", seed, "override the config seed");
  t->add_option("--out", out_dir, "output directory");

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  e->add_option("--config", config_path, "INI config file");
  e->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  e->add_option("--data", data_dir, "dataset directory")->required();

  auto* g = app.add_subcommand("gen-data", "write a synthetic shapes dataset");
  g->add_option("--out", out_dir, "output directory")->required();
  g->add_option("--count", count, "number of images");
  g->add_option("--seed", gen_seed, "dataset seed");
  g->add_option("--image-size", image_size, "square image size");
  g->add_option("--max-objects", max_objects, "objects per image");
  g->add_option("--classes", classes, "number of classes");

  auto* v = app.add_subcommand("viz", "emit reference points as SVG");
  v->add_option("--config", config_path, "INI config file");
  v->add_option("--checkpoint", checkpoint, "model checkpoint");
  v->add_option("--data", data_dir, "dataset directory (else synthetic)");
  v->add_option("--index", index, "image index");
  v->add_option("--stage", stage, "init|final|all");
  v->add_option("--out", out_path, "output SVG path")->required();

  auto* a = app.add_subcommand("ablate", "train a config matrix, write CSV");
  a->add_option("--config", config_path, "INI config file");
  a->add_option("--axis", axis, "ablation axis")->required();
  a->add_option("--out", out_path, "output CSV path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (t->parsed()) return cmd_train(config_path, seed, out_dir);
    if (e->parsed()) return cmd_eval(config_path, checkpoint, data_dir);
    if (g->parsed())
      return cmd_gen_data(out_dir, count, gen_seed, image_size, max_objects,
                          classes);
    if (v->parsed())
      return cmd_viz(config_path, checkpoint, data_dir, index, stage, out_path);
    if (a->parsed()) return cmd_ablate(config_path, axis, out_path);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
