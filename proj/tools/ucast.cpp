// Batch CLI over the library: training, stylization (with optional style
// interpolation), per-frame video stylization, and the temporal-consistency
// metric. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ucast/backbone.hpp"
#include "ucast/trainer.hpp"
#include "ucast/video.hpp"

namespace fs = std::filesystem;
using namespace ucast;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Inference inputs come at arbitrary sizes; the pipeline wants square
// multiples of 8 (three stride-2 stages each way). 0 = derive from input.
int64_t pick_square_size(const Tensor& img, int64_t requested) {
  if (requested > 0) return requested;
  const int64_t side = std::min(img.dim(2), img.dim(3));
  return std::max<int64_t>((side / 8) * 8, 16);
}

ImageBatch load_as_batch(const std::string& path, Domain domain, int64_t size) {
  Tensor img = load_image(path);
  const int64_t s = pick_square_size(img, size);
  if (img.dim(2) != s || img.dim(3) != s) img = resize_bilinear(img, s, s);
  ImageBatch batch;
  batch.pixels = std::move(img);
  batch.domain = domain;
  return batch;
}

std::vector<std::string> list_images(const std::string& dir, bool warn_on_other) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") {
      files.push_back(entry.path().string());
    } else if (warn_on_other) {
      std::cerr << "warning: skipping non-image file " << entry.path().string() << "\n";
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

int run_train(const std::string& config_path, const std::string& content_dir,
              const std::string& style_dir, const std::string& out_dir,
              const std::string& resume_path, std::optional<uint64_t> seed) {
  TrainConfig cfg = parse_config_file(config_path);
  if (seed) cfg.seed = *seed;
  if (!resume_path.empty()) {
    Trainer trainer = Trainer::resume(resume_path, cfg);
    trainer.run(content_dir, style_dir, out_dir);
  } else {
    Trainer trainer(cfg);
    trainer.run(content_dir, style_dir, out_dir);
  }
  return kExitOk;
}

int run_stylize(const std::string& ckpt, const std::vector<std::string>& contents,
                const std::vector<std::string>& styles, const std::vector<real>& weights,
                const std::string& out_dir, int64_t size) {
  if (styles.size() > 1 || !weights.empty()) {
    validate_convex_weights(weights, styles.size());  // invalid -> usage error
  }
  InferenceModel model = load_inference_model(ckpt);

  std::vector<ImageBatch> style_batches;
  style_batches.reserve(styles.size());
  for (const auto& p : styles) style_batches.push_back(load_as_batch(p, Domain::kArtistic, size));

  fs::create_directories(out_dir);
  for (const auto& content_path : contents) {
    ImageBatch content = load_as_batch(content_path, Domain::kRealistic, size);
    ImageBatch result =
        style_batches.size() == 1 && weights.empty()
            ? stylize(content, style_batches[0], *model.generator, *model.extractor, model.msp)
            : interpolate_styles(content, style_batches, weights, *model.generator,
                                 *model.extractor, model.msp);
    const std::string out_path =
        (fs::path(out_dir) / (fs::path(content_path).stem().string() + "_stylized.png")).string();
    save_image(out_path, result.pixels);
  }
  return kExitOk;
}

int run_video(const std::string& ckpt, const std::string& frames_dir,
              const std::string& style_path, const std::string& out_dir, int64_t size) {
  std::vector<std::string> frames = list_images(frames_dir, /*warn_on_other=*/true);
  if (frames.empty()) {
    std::cerr << "error: no frames in " << frames_dir << "\n";
    return kExitUsage;
  }
  InferenceModel model = load_inference_model(ckpt);
  ImageBatch style = load_as_batch(style_path, Domain::kArtistic, size);

  fs::create_directories(out_dir);
  for (const auto& frame_path : frames) {
    ImageBatch frame = load_as_batch(frame_path, Domain::kRealistic, size);
    ImageBatch result = stylize(frame, style, *model.generator, *model.extractor, model.msp);
    const std::string out_path =
        (fs::path(out_dir) / (fs::path(frame_path).stem().string() + ".png")).string();
    save_image(out_path, result.pixels);
  }
  return kExitOk;
}

int run_eval_temporal(const std::string& frames_dir, const std::string& flows_dir) {
  std::vector<std::string> frame_files = list_images(frames_dir, /*warn_on_other=*/false);
  std::vector<std::string> flow_files;
  for (const auto& entry : fs::directory_iterator(flows_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".uflo") {
      flow_files.push_back(entry.path().string());
    }
  }
  std::sort(flow_files.begin(), flow_files.end());
  if (frame_files.empty() || flow_files.size() + 1 != frame_files.size()) {
    std::cerr << "error: need count(flows) == count(frames) - 1, got " << flow_files.size()
              << " flows for " << frame_files.size() << " frames\n";
    return kExitUsage;
  }
  std::vector<Tensor> frames;
  frames.reserve(frame_files.size());
  for (const auto& p : frame_files) frames.push_back(load_image(p));
  std::vector<FlowField> flows;
  flows.reserve(flow_files.size());
  for (const auto& p : flow_files) flows.push_back(read_uflo(p));
  std::printf("temporal_loss: %.6f\n", temporal_loss(frames, flows));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified contrastive arbitrary style transfer"};
  app.require_subcommand(1);
  app.fallthrough();  // allow the global --seed after the subcommand too
  std::optional<uint64_t> seed;
  app.add_option("--seed", seed, "override the RNG seed for all components");

  auto* train = app.add_subcommand("train", "train a model on two image directories");
  std::string config_path, content_dir, style_dir, out_dir, resume_path;
  train->add_option("--config", config_path, "training config file")->required();
  train->add_option("--content", content_dir, "realistic-domain image directory")->required();
  train->add_option("--style", style_dir, "artistic-domain image directory")->required();
  train->add_option("--out", out_dir, "output directory for checkpoints + metrics")->required();
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* stylize_cmd = app.add_subcommand("stylize", "stylize content images with style image(s)");
  std::string ckpt;
  std::vector<std::string> content_paths, style_paths;
  std::vector<real> weights;
  int64_t size = 0;
  stylize_cmd->add_option("--ckpt", ckpt, "trained checkpoint")->required();
  stylize_cmd->add_option("--content", content_paths, "content image(s)")->required();
  stylize_cmd->add_option("--style", style_paths, "style image(s)")->required();
  stylize_cmd->add_option("--weights", weights, "per-style interpolation weights (must sum to 1)")
      ->delimiter(',');
  stylize_cmd->add_option("--out", out_dir, "output directory")->required();
  stylize_cmd->add_option("--size", size, "square working resolution (0 = from input)");

  auto* video = app.add_subcommand("video", "stylize a directory of frames");
  std::string frames_dir, style_path;
  video->add_option("--ckpt", ckpt, "trained checkpoint")->required();
  video->add_option("--frames", frames_dir, "input frame directory")->required();
  video->add_option("--style", style_path, "style image")->required();
  video->add_option("--out", out_dir, "output directory")->required();
  video->add_option("--size", size, "square working resolution (0 = from input)");

  auto* eval = app.add_subcommand("eval-temporal", "temporal consistency of stylized frames");
  std::string flows_dir;
  eval->add_option("--frames", frames_dir, "stylized frame directory")->required();
  eval->add_option("--flows", flows_dir, "matching .uflo flow directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (app.got_subcommand(train)) {
      return run_train(config_path, content_dir, style_dir, out_dir, resume_path, seed);
    }
    if (app.got_subcommand(stylize_cmd)) {
      return run_stylize(ckpt, content_paths, style_paths, weights, out_dir, size);
    }
    if (app.got_subcommand(video)) {
      return run_video(ckpt, frames_dir, style_path, out_dir, size);
    }
    if (app.got_subcommand(eval)) {
      return run_eval_temporal(frames_dir, flows_dir);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    // argument-shaped failures (bad weights, malformed values) are usage bugs
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
