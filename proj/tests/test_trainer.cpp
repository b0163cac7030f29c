#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ucast/backbone.hpp"
#include "ucast/checkpoint.hpp"
#include "ucast/image.hpp"
#include "ucast/rng.hpp"
#include "ucast/synthetic.hpp"
#include "ucast/tensor.hpp"
#include "ucast/trainer.hpp"

using namespace ucast;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("ucast_trainer_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// small-everything config so a train step costs milliseconds, not seconds
TrainConfig desk_config() {
  TrainConfig cfg;
  cfg.iterations = 8;
  cfg.batch_size = 2;
  cfg.resolution = 16;
  cfg.extractor_width = 4;
  cfg.code_dim = 8;
  cfg.msp_hidden = 8;
  cfg.gen_width = 4;
  cfg.disc_width = 4;
  cfg.bank_capacity = 8;
  cfg.patch_layer = 2;
  cfg.patch_negatives = 7;  // 16x16 input, stride-4 tap -> 16 sites
  cfg.patch_tau = 0.2;
  cfg.seed = 77;
  return cfg;
}

ImageBatch random_batch(int64_t b, int64_t res, Domain d, uint64_t seed) {
  Rng rng(seed);
  Tensor px({b, 3, res, res});
  for (int64_t i = 0; i < px.numel(); ++i) px[i] = rng.uniform();
  ImageBatch out;
  out.pixels = std::move(px);
  out.domain = d;
  return out;
}

// Variables are shared handles onto live parameters, so a usable snapshot
// has to deep-copy the tensors
using ParamShot = std::map<std::string, Tensor>;

ParamShot snapshot(Trainer& t) {
  ParamMap all;
  t.extractor().collect_params("extractor.", all);
  t.msp().collect_params("msp.", all);
  t.generator().collect_params("gen.", all);
  t.disc_r().collect_params("disc_r.", all);
  t.disc_a().collect_params("disc_a.", all);
  ParamShot out;
  for (const auto& [name, p] : all) out.emplace(name, p.value());
  return out;
}

bool params_identical(const ParamShot& a, const ParamShot& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end()) return false;
    if (!bitwise_equal(t, it->second)) return false;
  }
  return true;
}

// did any parameter under `prefix` move between the two snapshots?
bool group_moved(const ParamShot& before, const ParamShot& after, const std::string& prefix) {
  for (const auto& [name, t] : before) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!bitwise_equal(t, after.at(name))) return true;
  }
  return false;
}

void check_metrics_equal(const StepMetrics& a, const StepMetrics& b) {
  CHECK(a.iteration == b.iteration);
  CHECK(a.lr == b.lr);
  CHECK(a.loss_total == b.loss_total);
  CHECK(a.adv_value == b.adv_value);
  CHECK(a.loss_gen_adv == b.loss_gen_adv);
  CHECK(a.loss_cyc == b.loss_cyc);
  CHECK(a.loss_contra_g == b.loss_contra_g);
  CHECK(a.loss_contra_c == b.loss_contra_c);
  CHECK(a.loss_msp == b.loss_msp);
  CHECK(a.tau_pos_mean == b.tau_pos_mean);
  CHECK(a.tau_neg_mean == b.tau_neg_mean);
  CHECK(a.bank_size == b.bank_size);
  CHECK(a.warmup == b.warmup);
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  out << body;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

// a solid-color PNG decodes back to exactly k/255 everywhere, which makes
// loader batches attributable to individual files
void write_const_png(const std::string& path, int k, int64_t size) {
  Tensor img({1, 3, size, size});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<real>(k) / 255.0;
  save_image(path, img);
}

int color_of_slot(const ImageBatch& batch, int64_t b) {
  return static_cast<int>(std::lround(batch.pixels[b * 3 * batch.height() * batch.width()] * 255.0));
}

}  // namespace

TEST_CASE("config files parse comments and whitespace; unknown keys are fatal") {
  TempDir dir("config");
  write_text(dir.file("good.cfg"),
             "# desk preset\n"
             "\n"
             "iterations: 12\n"
             "  lr :  0.005  # inline comment\n"
             "no_de: true\n"
             "extractor: conv_stack\n"
             "seed: 99\n");
  TrainConfig cfg = parse_config_file(dir.file("good.cfg"));
  CHECK(cfg.iterations == 12);
  CHECK(cfg.lr == 0.005);
  CHECK(cfg.no_de);
  CHECK(cfg.seed == 99);
  // untouched keys keep their defaults
  CHECK(cfg.batch_size == 4);
  CHECK(cfg.lambda2 == 2.0);

  write_text(dir.file("unknown.cfg"), "iterations: 5\nlearning_rate: 0.1\n");
  CHECK_THROWS_WITH_AS(parse_config_file(dir.file("unknown.cfg")),
                       doctest::Contains("unknown config key 'learning_rate'"), ConfigError);

  write_text(dir.file("noline.cfg"), "iterations: 5\njust words\n");
  CHECK_THROWS_WITH_AS(parse_config_file(dir.file("noline.cfg")), doctest::Contains(":2:"),
                       ConfigError);

  CHECK_THROWS_AS(parse_config_file(dir.file("missing.cfg")), ConfigError);
}

TEST_CASE("config entries reject unparsable values, naming the key") {
  TrainConfig cfg;
  CHECK_THROWS_WITH_AS(apply_config_entry(cfg, "lr", "fast"), doctest::Contains("'lr'"),
                       ConfigError);
  CHECK_THROWS_AS(apply_config_entry(cfg, "iterations", "10x"), ConfigError);
  CHECK_THROWS_AS(apply_config_entry(cfg, "decay", "maybe"), ConfigError);
  CHECK_THROWS_AS(apply_config_entry(cfg, "seed", "-3"), ConfigError);
  CHECK_THROWS_AS(apply_config_entry(cfg, "momentum", "0.9"), ConfigError);
  // bool spellings that must work
  apply_config_entry(cfg, "decay", "0");
  CHECK(!cfg.decay);
  apply_config_entry(cfg, "decay", "true");
  CHECK(cfg.decay);
}

TEST_CASE("config validation rejects inconsistent settings") {
  auto expect_bad = [](void (*mutate)(TrainConfig&)) {
    TrainConfig cfg;
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  };
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());

  expect_bad([](TrainConfig& c) { c.lr = 0; });
  expect_bad([](TrainConfig& c) { c.lambda2 = -1; });
  expect_bad([](TrainConfig& c) { c.beta1 = 1.0; });
  expect_bad([](TrainConfig& c) { c.iterations = 0; });
  expect_bad([](TrainConfig& c) { c.batch_size = 0; });
  expect_bad([](TrainConfig& c) { c.resolution = 8; });
  expect_bad([](TrainConfig& c) { c.mix_de = c.no_de = true; });
  expect_bad([](TrainConfig& c) { c.extractor = "vgg"; });
  expect_bad([](TrainConfig& c) { c.extractor = "external"; });  // no weights given
  expect_bad([](TrainConfig& c) { c.backbone = "unet"; });
  expect_bad([](TrainConfig& c) { c.gen_width = 0; });
  expect_bad([](TrainConfig& c) { c.bank_capacity = 0; });
  expect_bad([](TrainConfig& c) { c.msp_pretrain_steps = -1; });
  expect_bad([](TrainConfig& c) { c.patch_negatives = 0; });
  expect_bad([](TrainConfig& c) { c.patch_tau = 0; });
  expect_bad([](TrainConfig& c) { c.checkpoint_every = -1; });
  expect_bad([](TrainConfig& c) { c.temperature.t_range_neg = -0.1; });
}

TEST_CASE("serialized configs reparse bit-identically and hash their contents") {
  TempDir dir("roundtrip");
  TrainConfig cfg = desk_config();
  // values without short decimal representations must survive the round trip
  cfg.lr = 1.0 / 3.0;
  cfg.lambda3 = 0.1;
  cfg.patch_tau = 0.07;
  cfg.extractor_weights = "weights with spaces.bin";
  cfg.extractor = "conv_stack";
  cfg.train_extractor = !TrainConfig{}.train_extractor;  // non-default must survive too

  write_text(dir.file("cfg.txt"), serialize_config(cfg));
  TrainConfig back = parse_config_file(dir.file("cfg.txt"));
  CHECK(back.lr == cfg.lr);
  CHECK(back.lambda3 == cfg.lambda3);
  CHECK(back.patch_tau == cfg.patch_tau);
  CHECK(back.extractor_weights == cfg.extractor_weights);
  CHECK(back.train_extractor == cfg.train_extractor);
  CHECK(back.seed == cfg.seed);
  CHECK(back.temperature.t_bound_neg == cfg.temperature.t_bound_neg);
  CHECK(config_hash(back) == config_hash(cfg));

  // any field change shows up in the hash
  TrainConfig other = cfg;
  other.lambda1 = cfg.lambda1 + 1e-9;
  CHECK(config_hash(other) != config_hash(cfg));
  other = cfg;
  other.seed += 1;
  CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("augmentation is deterministic, shape-preserving, and stays in range") {
  ImageBatch batch = random_batch(3, 24, Domain::kArtistic, 5);

  Rng r1(42), r2(42), r3(43);
  ImageBatch a = augment(batch, r1);
  ImageBatch b = augment(batch, r2);
  ImageBatch c = augment(batch, r3);

  CHECK(a.domain == Domain::kArtistic);
  CHECK_NOTHROW(validate_image_batch(a, 24));
  CHECK(bitwise_equal(a.pixels, b.pixels));
  CHECK(!bitwise_equal(a.pixels, c.pixels));
  // crops/rotations of a valid batch cannot leave [0,1]
  for (int64_t i = 0; i < a.pixels.numel(); ++i) {
    CHECK(a.pixels[i] >= 0.0);
    CHECK(a.pixels[i] <= 1.0);
  }
}

TEST_CASE("the total objective weights its parts and names non-finite offenders") {
  TrainConfig cfg;  // weights 1, 2, 0.2, 1
  CHECK(total_loss(1, 1, 1, 1, cfg) == doctest::Approx(4.2).epsilon(1e-12));
  CHECK(total_loss(0.5, 0.25, 5, 2, cfg) == doctest::Approx(0.5 + 0.5 + 1.0 + 2.0).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(total_loss(1, std::nan(""), 1, 1, cfg), doctest::Contains("'cycle'"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(total_loss(INFINITY, 1, 1, 1, cfg), doctest::Contains("'adversarial'"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(total_loss(1, 1, std::nan(""), 1, cfg),
                       doctest::Contains("'contrastive-style'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(total_loss(1, 1, 1, std::nan(""), cfg),
                       doctest::Contains("'contrastive-content'"), std::runtime_error);

  // masked parts are never inspected, so a disabled branch may be garbage
  TrainConfig no_de = cfg;
  no_de.no_de = true;
  CHECK(total_loss(std::nan(""), std::nan(""), 1, 1, no_de) ==
        doctest::Approx(1.2).epsilon(1e-12));
  TrainConfig no_con = cfg;
  no_con.no_contrastive = true;
  CHECK(total_loss(1, 1, std::nan(""), 1, no_con) == doctest::Approx(4.0).epsilon(1e-12));
  TrainConfig no_patch = cfg;
  no_patch.lambda4 = 0;
  CHECK(total_loss(1, 1, 1, std::nan(""), no_patch) == doctest::Approx(3.2).epsilon(1e-12));
}

TEST_CASE("dataset loader walks shuffled epochs that cover every image") {
  TempDir dir("epochs");
  const std::vector<int> colors = {10, 60, 110, 160, 210};
  for (size_t i = 0; i < colors.size(); ++i) {
    write_const_png(dir.file("img_" + std::to_string(i) + ".png"), colors[i], 16);
  }

  DatasetLoader loader(dir.str(), Domain::kArtistic, 16, 2, 7);
  CHECK(loader.num_images() == 5);

  // 10 batches of 2 = 4 complete epochs; the permutation refreshes mid-batch
  std::vector<int> seen;
  for (int step = 0; step < 10; ++step) {
    ImageBatch b = loader.next();
    CHECK(b.domain == Domain::kArtistic);
    CHECK_NOTHROW(validate_image_batch(b, 16));
    for (int64_t s = 0; s < 2; ++s) seen.push_back(color_of_slot(b, s));
  }
  REQUIRE(seen.size() == 20);
  for (int e = 0; e < 4; ++e) {
    std::set<int> epoch(seen.begin() + e * 5, seen.begin() + (e + 1) * 5);
    CHECK(epoch == std::set<int>(colors.begin(), colors.end()));
  }
}

TEST_CASE("dataset loader ordering is pinned by seed, not by worker count") {
  TempDir dir("workers");
  write_synthetic_corpus(dir.str(), "art", 6, 16, 11);

  DatasetLoader solo(dir.str(), Domain::kArtistic, 16, 3, 123, 0);
  DatasetLoader pooled(dir.str(), Domain::kArtistic, 16, 3, 123, 3);
  DatasetLoader reseeded(dir.str(), Domain::kArtistic, 16, 3, 124, 0);
  bool any_diff = false;
  for (int step = 0; step < 4; ++step) {
    ImageBatch a = solo.next();
    ImageBatch b = pooled.next();
    ImageBatch c = reseeded.next();
    CHECK(bitwise_equal(a.pixels, b.pixels));
    any_diff = any_diff || !bitwise_equal(a.pixels, c.pixels);
  }
  CHECK(any_diff);
}

TEST_CASE("dataset loader state serializes mid-epoch and resumes the stream") {
  TempDir dir("resume");
  write_synthetic_corpus(dir.str(), "realistic", 5, 16, 3);

  DatasetLoader loader(dir.str(), Domain::kRealistic, 16, 2, 9);
  loader.next();
  loader.next();  // cursor now mid-permutation
  const std::string state = loader.serialize_state();

  DatasetLoader replica(dir.str(), Domain::kRealistic, 16, 2, 999);
  replica.restore_state(state);
  for (int step = 0; step < 5; ++step) {
    CHECK(bitwise_equal(loader.next().pixels, replica.next().pixels));
  }

  CHECK_THROWS_AS(replica.restore_state("gibberish"), std::runtime_error);
  CHECK_THROWS_AS(replica.restore_state("cursor 1\nperm 2 0 99\nrng 1 2"), std::runtime_error);
  // cursor range is checked last, so the forged state needs a real rng stream
  const std::string rng_blob = Rng(5).serialize();
  CHECK_THROWS_WITH_AS(replica.restore_state("cursor 7\nperm 2 0 1\nrng " + rng_blob),
                       doctest::Contains("cursor out of range"), std::runtime_error);
}

TEST_CASE("dataset loader resizes on load, skips junk files, and fails on empty dirs") {
  TempDir dir("junk");
  write_const_png(dir.file("big.png"), 128, 32);  // native 32x32, loader wants 16
  write_const_png(dir.file("ok.png"), 30, 16);
  write_text(dir.file("broken.png"), "not a png at all");
  write_text(dir.file("notes.txt"), "ignored extension");

  DatasetLoader loader(dir.str(), Domain::kRealistic, 16, 1, 1);
  CHECK(loader.num_images() == 2);  // big + ok; broken skipped, txt never scanned
  ImageBatch b = loader.next();
  CHECK(b.height() == 16);
  CHECK(b.width() == 16);

  TempDir empty("empty");
  CHECK_THROWS_WITH_AS(DatasetLoader(empty.str(), Domain::kRealistic, 16, 1, 1),
                       doctest::Contains("no image files"), std::runtime_error);

  TempDir unreadable("unreadable");
  write_text(unreadable.file("only.png"), "garbage");
  CHECK_THROWS_WITH_AS(DatasetLoader(unreadable.str(), Domain::kRealistic, 16, 1, 1),
                       doctest::Contains("no readable images"), std::runtime_error);
}

TEST_CASE("worker count comes from the environment and rejects negatives") {
  unsetenv("UCAST_NUM_WORKERS");
  CHECK(num_workers_from_env() == 0);
  setenv("UCAST_NUM_WORKERS", "3", 1);
  CHECK(num_workers_from_env() == 3);
  setenv("UCAST_NUM_WORKERS", "-1", 1);
  CHECK_THROWS_AS(num_workers_from_env(), ConfigError);
  unsetenv("UCAST_NUM_WORKERS");
}

TEST_CASE("two trainers with the same seed take identical steps") {
  TrainConfig cfg = desk_config();
  Trainer a(cfg);
  Trainer b(cfg);
  CHECK(params_identical(snapshot(a), snapshot(b)));

  // step 1 exercises the warm-up path, step 2 the adaptive path
  for (uint64_t step = 0; step < 2; ++step) {
    ImageBatch bc = random_batch(2, 16, Domain::kRealistic, 100 + step);
    ImageBatch bs = random_batch(2, 16, Domain::kArtistic, 200 + step);
    StepMetrics ma = a.train_step(bc, bs);
    StepMetrics mb = b.train_step(bc, bs);
    check_metrics_equal(ma, mb);
    CHECK(ma.warmup == (step == 0));
    CHECK(params_identical(snapshot(a), snapshot(b)));
  }
  CHECK(a.iteration() == 2);

  // mismatched batch sizes are refused up front
  CHECK_THROWS_AS(a.train_step(random_batch(2, 16, Domain::kRealistic, 1),
                               random_batch(3, 16, Domain::kArtistic, 2)),
                  std::invalid_argument);
}

TEST_CASE("each schedule phase moves only its own parameter group") {
  ImageBatch bc = random_batch(2, 16, Domain::kRealistic, 31);
  ImageBatch bs = random_batch(2, 16, Domain::kArtistic, 32);

  SUBCASE("with joint extractor training every group moves") {
    TrainConfig cfg = desk_config();
    cfg.train_extractor = true;
    Trainer t(cfg);
    ParamShot before = snapshot(t);
    t.train_step(bc, bs);
    ParamShot after = snapshot(t);
    CHECK(group_moved(before, after, "gen."));
    CHECK(group_moved(before, after, "msp."));
    CHECK(group_moved(before, after, "extractor."));
    CHECK(group_moved(before, after, "disc_r."));
    CHECK(group_moved(before, after, "disc_a."));
  }

  SUBCASE("a frozen conv stack keeps its seeded weights while the projector learns") {
    TrainConfig cfg = desk_config();
    cfg.train_extractor = false;
    Trainer t(cfg);
    ParamShot before = snapshot(t);
    t.train_step(bc, bs);
    ParamShot after = snapshot(t);
    CHECK(!group_moved(before, after, "extractor."));
    CHECK(group_moved(before, after, "msp."));
    CHECK(group_moved(before, after, "gen."));
  }

  SUBCASE("domain enhancement off leaves both critics untouched") {
    TrainConfig cfg = desk_config();
    cfg.no_de = true;
    Trainer t(cfg);
    ParamShot before = snapshot(t);
    StepMetrics m = t.train_step(bc, bs);
    ParamShot after = snapshot(t);
    CHECK(!group_moved(before, after, "disc_r."));
    CHECK(!group_moved(before, after, "disc_a."));
    CHECK(group_moved(before, after, "gen."));  // patch + style terms remain
    CHECK(m.adv_value == 0.0);
    CHECK(m.loss_gen_adv == 0.0);
    CHECK(m.loss_cyc == 0.0);
  }

  SUBCASE("projector pretraining defers the adversarial phases") {
    TrainConfig cfg = desk_config();
    cfg.msp_pretrain_steps = 1;
    Trainer t(cfg);
    ParamShot before = snapshot(t);
    StepMetrics m1 = t.train_step(bc, bs);
    ParamShot mid = snapshot(t);
    CHECK(!group_moved(before, mid, "gen."));
    CHECK(!group_moved(before, mid, "disc_r."));
    CHECK(group_moved(before, mid, "msp."));
    CHECK(m1.loss_total == 0.0);
    CHECK(m1.bank_size == 2);  // the bank still fills during pretraining

    t.train_step(bc, bs);
    ParamShot after = snapshot(t);
    CHECK(group_moved(mid, after, "gen."));
    CHECK(group_moved(mid, after, "disc_r."));
  }

  SUBCASE("a frozen external extractor never moves") {
    // export a conv-stack init, then train against it as fixed weights
    TempDir dir("frozen");
    TrainConfig cfg = desk_config();
    Trainer donor(cfg);
    const std::string wpath = dir.file("extractor.bin");
    {
      Archive a;
      ParamMap p;
      donor.extractor().collect_params("extractor.", p);
      for (const auto& [name, v] : p) a.put_tensor(name, v.value());
      a.save(wpath);
    }
    cfg.extractor = "external";
    cfg.extractor_weights = wpath;
    Trainer t(cfg);
    ParamShot before = snapshot(t);
    t.train_step(bc, bs);
    ParamShot after = snapshot(t);
    CHECK(!group_moved(before, after, "extractor."));
    CHECK(group_moved(before, after, "msp."));
  }
}

TEST_CASE("learning rate decays linearly and lands in the metrics") {
  TrainConfig cfg = desk_config();
  cfg.iterations = 4;
  cfg.lr = 1e-3;
  Trainer t(cfg);
  for (int step = 0; step < 4; ++step) {
    CHECK(t.current_lr() == doctest::Approx(1e-3 * (1.0 - step / 4.0)).epsilon(1e-12));
    StepMetrics m = t.train_step(random_batch(2, 16, Domain::kRealistic, 40 + step),
                                 random_batch(2, 16, Domain::kArtistic, 50 + step));
    CHECK(m.lr == doctest::Approx(1e-3 * (1.0 - step / 4.0)).epsilon(1e-12));
    CHECK(m.iteration == step + 1);
  }
  CHECK(t.finished());
  CHECK(t.current_lr() == 0.0);

  TrainConfig flat = desk_config();
  flat.decay = false;
  Trainer u(flat);
  u.train_step(random_batch(2, 16, Domain::kRealistic, 1),
               random_batch(2, 16, Domain::kArtistic, 2));
  CHECK(u.current_lr() == flat.lr);
}

TEST_CASE("warm-up uses the fixed temperature until the bank can serve a batch") {
  TrainConfig cfg = desk_config();
  Trainer t(cfg);

  StepMetrics m1 = t.train_step(random_batch(2, 16, Domain::kRealistic, 61),
                                random_batch(2, 16, Domain::kArtistic, 62));
  CHECK(m1.warmup);
  CHECK(m1.tau_pos_mean == cfg.temperature.fixed_tau);
  CHECK(m1.tau_neg_mean == cfg.temperature.fixed_tau);
  CHECK(m1.bank_size == 2);

  StepMetrics m2 = t.train_step(random_batch(2, 16, Domain::kRealistic, 63),
                                random_batch(2, 16, Domain::kArtistic, 64));
  CHECK(!m2.warmup);
  CHECK(m2.bank_size == 4);
  // adaptive temperatures live inside their configured bands
  const TemperatureConfig& tc = cfg.temperature;
  CHECK(m2.tau_neg_mean >= tc.t_bound_neg);
  CHECK(m2.tau_neg_mean <= tc.t_bound_neg + tc.t_range_neg);
  CHECK(m2.tau_pos_mean >= m2.tau_neg_mean * tc.t_bound_pos);
  CHECK(m2.tau_pos_mean <= m2.tau_neg_mean * (tc.t_bound_pos + tc.t_range_pos));

  // pinning the temperature reports the fixed value even past warm-up
  TrainConfig pinned = desk_config();
  pinned.fixed_temperature = true;
  Trainer p(pinned);
  for (int step = 0; step < 3; ++step) {
    StepMetrics m = p.train_step(random_batch(2, 16, Domain::kRealistic, 70 + step),
                                 random_batch(2, 16, Domain::kArtistic, 80 + step));
    CHECK(m.tau_pos_mean == pinned.temperature.fixed_tau);
    CHECK(m.tau_neg_mean == pinned.temperature.fixed_tau);
  }
}

TEST_CASE("checkpoints capture the full training state bit-for-bit") {
  TempDir dir("ckpt");
  TrainConfig cfg = desk_config();
  Trainer a(cfg);
  for (int step = 0; step < 2; ++step) {
    a.train_step(random_batch(2, 16, Domain::kRealistic, 300 + step),
                 random_batch(2, 16, Domain::kArtistic, 400 + step));
  }
  const std::string path = dir.file("ckpt_2.bin");
  a.save_checkpoint(path);

  Trainer b = Trainer::resume(path, cfg);
  CHECK(b.iteration() == 2);
  CHECK(params_identical(snapshot(a), snapshot(b)));
  CHECK(b.bank().size(0) == a.bank().size(0));
  CHECK(b.temperature_state().update_count == a.temperature_state().update_count);
  CHECK(b.temperature_state().mu_neg == a.temperature_state().mu_neg);

  // the next step (optimizer moments, bank negatives, augmentation RNG and
  // all) must be indistinguishable between the original and the resumption
  ImageBatch bc = random_batch(2, 16, Domain::kRealistic, 555);
  ImageBatch bs = random_batch(2, 16, Domain::kArtistic, 556);
  StepMetrics ma = a.train_step(bc, bs);
  StepMetrics mb = b.train_step(bc, bs);
  check_metrics_equal(ma, mb);
  CHECK(params_identical(snapshot(a), snapshot(b)));

  // a config that hashes differently is refused
  TrainConfig other = cfg;
  other.lambda1 += 0.5;
  CHECK_THROWS_AS(Trainer::resume(path, other), ConfigError);
  CHECK_THROWS_AS(Trainer::resume(dir.file("absent.bin"), cfg), std::runtime_error);
}

TEST_CASE("run() writes metrics and checkpoints; a resumed run is byte-identical") {
  TempDir data("rundata");
  const std::string content_dir = data.file("content");
  const std::string style_dir = data.file("style");
  write_synthetic_corpus(content_dir, "realistic", 5, 16, 21);
  write_synthetic_corpus(style_dir, "art", 5, 16, 22);

  TrainConfig cfg = desk_config();
  cfg.iterations = 4;
  cfg.checkpoint_every = 2;

  TempDir out_a("run_straight");
  {
    Trainer t(cfg);
    t.run(content_dir, style_dir, out_a.str());
    CHECK(t.finished());
  }
  std::vector<std::string> lines_a = read_lines(out_a.file("metrics.jsonl"));
  REQUIRE(lines_a.size() == 4);
  for (size_t i = 0; i < lines_a.size(); ++i) {
    nlohmann::json j = nlohmann::json::parse(lines_a[i]);
    CHECK(j["iteration"].get<int64_t>() == static_cast<int64_t>(i) + 1);
    CHECK(std::isfinite(j["loss_total"].get<double>()));
    CHECK(j["warmup"].get<bool>() == (i == 0));
  }
  CHECK(fs::exists(out_a.file("ckpt_2.bin")));  // periodic
  CHECK(fs::exists(out_a.file("ckpt_4.bin")));  // final

  // restart from the mid-run checkpoint in a clean directory: the remaining
  // metrics lines and the final checkpoint must match byte for byte
  TempDir out_b("run_resumed");
  {
    Trainer t = Trainer::resume(out_a.file("ckpt_2.bin"), cfg);
    CHECK(t.iteration() == 2);
    t.run(content_dir, style_dir, out_b.str());
  }
  std::vector<std::string> lines_b = read_lines(out_b.file("metrics.jsonl"));
  REQUIRE(lines_b.size() == 2);
  CHECK(lines_b[0] == lines_a[2]);
  CHECK(lines_b[1] == lines_a[3]);
  CHECK(read_bytes(out_b.file("ckpt_4.bin")) == read_bytes(out_a.file("ckpt_4.bin")));

  // the finished checkpoint loads for inference and reproduces the trainer's
  // own generator exactly
  InferenceModel model = load_inference_model(out_a.file("ckpt_4.bin"));
  CHECK(model.cfg.iterations == 4);
  Trainer back = Trainer::resume(out_a.file("ckpt_4.bin"), cfg);
  ImageBatch probe_c = random_batch(1, 16, Domain::kRealistic, 77);
  ImageBatch probe_s = random_batch(1, 16, Domain::kArtistic, 78);
  ImageBatch via_model = stylize(probe_c, probe_s, *model.generator, *model.extractor, model.msp);
  ImageBatch via_trainer =
      stylize(probe_c, probe_s, back.generator(), back.extractor(), back.msp());
  CHECK(via_model.domain == Domain::kGenerated);
  CHECK(bitwise_equal(via_model.pixels, via_trainer.pixels));

  // resuming the final checkpoint and running again is a no-op plus a save
  TempDir out_c("run_noop");
  {
    Trainer t = Trainer::resume(out_a.file("ckpt_4.bin"), cfg);
    CHECK(t.finished());
    t.run(content_dir, style_dir, out_c.str());
  }
  CHECK(read_lines(out_c.file("metrics.jsonl")).empty());
  CHECK(fs::exists(out_c.file("ckpt_4.bin")));
}
