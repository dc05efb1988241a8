#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "spotkit/backbone/trainer.hpp"

using namespace spotkit;
using namespace spotkit::backbone;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("spotkit_backbone_" + name);
  fs::remove_all(p);
  return p;
}

std::shared_ptr<const Dataset> tiny_dataset() {
  static std::shared_ptr<const Dataset> ds = [] {
    const corpus::CorpusConfig cc;
    auto d = std::make_shared<Dataset>();
    const auto styles = corpus::default_styles();
    for (int st = 0; st < 4; ++st) {
      for (int sent = 0; sent < 3; ++sent) {
        const auto plan = corpus::make_plan(cc, sent, st, 100 + 10 * st + sent);
        auto s = make_sample(corpus::render_utterance(plan, styles[st], cc), cc.pitch,
                             "u" + std::to_string(st) + std::to_string(sent), sent);
        s.split = sent == 2 ? "test" : "train";
        (sent == 2 ? d->test : d->train).push_back(std::move(s));
      }
    }
    return d;
  }();
  return ds;
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.model.dim = 16;
  c.model.content_blocks = 1;
  c.model.decoder_blocks = 1;
  c.model.codebook_size = 8;
  c.model.rvq_depth = 2;
  c.model.style.wavenet_dilations = {1, 2};
  c.model.style.prenet_blocks = 1;
  c.model.style.uf_blocks = 1;
  c.batch_size = 3;
  c.max_steps = 4;
  c.checkpoint_every = 2;
  c.kmeans_utterances = 4;
  c.optim.warmup_steps = 0;
  c.optim.lr = 1e-3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST_CASE("forward shapes and determinism") {
  const auto ds = tiny_dataset();
  const auto cfg = small_config();
  Trainer a(cfg, ds), b(cfg, ds);
  a.initialize();
  b.initialize();
  const auto& s = ds->train[0];
  const auto teacher = a.model().pitch_target(s.pitch);
  ForwardInput in{&s.content, &s.mel, &s.style_voicing, &teacher};
  const auto rvq = rvq_options(cfg.flags, cfg.commitment);
  Tape<float> ta, tb;
  auto oa = a.model().forward(ta, in, cfg.flags, rvq);
  auto ob = b.model().forward(tb, in, cfg.flags, rvq);
  CHECK(oa.mel.value().shape() == s.mel.shape());
  CHECK(oa.logf0_z.value().rows() == s.length());
  CHECK(oa.aligned.value().rows() == s.length());
  CHECK(bit_equal(oa.mel.value(), ob.mel.value()));
  CHECK(bit_equal(oa.logf0_z.value(), ob.logf0_z.value()));
  for (float p : oa.periodicity.value().values()) CHECK((p > 0 && p < 1));
}

TEST_CASE("voiced extraction ablation routes every frame to the quantizer") {
  const auto ds = tiny_dataset();
  auto cfg = small_config();
  Trainer tr(cfg, ds);
  tr.initialize();
  const auto& s = ds->train[1];
  const auto n_voiced = static_cast<std::size_t>(std::count(s.style_voicing.begin(), s.style_voicing.end(), true));
  REQUIRE(n_voiced < s.length());
  for (bool ve : {true, false}) {
    AblationFlags f = cfg.flags;
    f.use_ve = ve;
    Tape<float> tape;
    ForwardInput in{&s.content, &s.mel, &s.style_voicing, nullptr};
    auto out = tr.model().forward(tape, in, f, rvq_options(f, cfg.commitment));
    const std::size_t expect = ve ? n_voiced : s.length();
    CHECK(out.style.quant.quantized.value().rows() == expect);
    CHECK(out.style.quant.codes.size() == expect * cfg.model.rvq_depth);
  }
}

TEST_CASE("parameter count does not depend on ablation flags") {
  const auto ds = tiny_dataset();
  auto cfg = small_config();
  Trainer full(cfg, ds);
  const auto n = full.params().parameter_count();
  cfg.flags = AblationFlags{false, false, false, false, false, 1.0};
  Trainer ablated(cfg, ds);
  CHECK(ablated.params().parameter_count() == n);
}

TEST_CASE("content encoder receives no gradient through the disentanglement loss") {
  const auto ds = tiny_dataset();
  const auto cfg = small_config();
  Trainer tr(cfg, ds);
  tr.initialize();
  const auto& s = ds->train[2];
  ForwardInput in{&s.content, &s.mel, &s.style_voicing, nullptr};
  Tape<float> tape;
  auto out = tr.model().forward(tape, in, cfg.flags, rvq_options(cfg.flags, cfg.commitment));
  auto l_sd = obj::style_disentanglement_loss(out.content, out.aligned, cfg.sd);
  REQUIRE(l_sd.value()[0] > 0);
  tr.params().zero_grad();
  tape.backward(l_sd);
  std::size_t content_params = 0;
  double style_grad = 0;
  for (auto& e : tr.params()) {
    if (!e.tensor.requires_grad()) continue;
    double ss = 0;
    for (float g : e.tensor.grad()) ss += double(g) * g;
    if (e.name.rfind("content.", 0) == 0) {
      ++content_params;
      CHECK_MESSAGE(ss == 0.0, e.name);
    } else if (e.name.rfind("stylenc.", 0) == 0) {
      style_grad += ss;
    }
  }
  CHECK(content_params > 0);
  CHECK(style_grad > 0);
}

TEST_CASE("loss weights in effect") {
  TrainerConfig cfg;
  auto w = effective_weights(cfg);
  CHECK(w.rvq == 1.0);
  CHECK(w.adv == 0.05);
  CHECK(w.sd == 0.02);
  CHECK(w.sp == 0.02);
  cfg.flags.use_sd = false;
  cfg.flags.use_sp = false;
  w = effective_weights(cfg);
  CHECK(w.sd == 0.0);
  CHECK(w.sp == 0.0);
}

TEST_CASE("one small step lowers the loss on the same batch") {
  const auto ds = tiny_dataset();
  int decreased = 0;
  const int trials = 10;
  for (int seed = 1; seed <= trials; ++seed) {
    auto cfg = small_config();
    cfg.optim.lr = 1e-4;
    cfg.seed = static_cast<std::uint64_t>(seed);
    Trainer tr(cfg, ds);
    tr.initialize();
    const auto batch = tr.next_batch();
    const double before = tr.evaluate(batch).total;
    tr.train_step();
    const double after = tr.evaluate(batch).total;
    if (after < before) ++decreased;
  }
  CHECK(decreased >= 9);
}

TEST_CASE("training is reproducible and resumes bit-exactly") {
  const auto ds = tiny_dataset();
  const auto cfg = small_config();
  const auto dir_a = temp_dir("run_a"), dir_b = temp_dir("run_b"), dir_c = temp_dir("run_c");
  {
    Trainer a(cfg, ds);
    a.run(dir_a);
    Trainer b(cfg, ds);
    b.run(dir_b);
  }
  CHECK(slurp(dir_a / "loss.csv") == slurp(dir_b / "loss.csv"));
  CHECK(slurp(dir_a / "final" / "model.spk") == slurp(dir_b / "final" / "model.spk"));
  const auto rows = obj::LossCsv::read(dir_a / "loss.csv");
  REQUIRE(rows.size() == cfg.max_steps);

  // Resume from the mid-run checkpoint with a copy of the log.
  fs::create_directories(dir_c);
  fs::copy_file(dir_a / "loss.csv", dir_c / "loss.csv");
  {
    Trainer c(cfg, ds);
    c.run(dir_c, dir_a / "checkpoints" / "step_000002");
    CHECK(c.step() == cfg.max_steps);
  }
  CHECK(slurp(dir_c / "loss.csv") == slurp(dir_a / "loss.csv"));
  CHECK(slurp(dir_c / "final" / "model.spk") == slurp(dir_a / "final" / "model.spk"));
  CHECK(slurp(dir_c / "final" / "optim.spk") == slurp(dir_a / "final" / "optim.spk"));

  auto other = cfg;
  other.seed = 99;
  Trainer d(other, ds);
  CHECK_THROWS_WITH(d.load(dir_a / "final"), doctest::Contains("different configuration"));
}

TEST_CASE("max_steps zero writes the initial checkpoint and an empty log") {
  const auto ds = tiny_dataset();
  auto cfg = small_config();
  cfg.max_steps = 0;
  const auto dir = temp_dir("zero");
  Trainer tr(cfg, ds);
  tr.run(dir);
  CHECK(fs::exists(dir / "checkpoints" / "step_000000" / "model.spk"));
  CHECK(fs::exists(dir / "final" / "state.json"));
  CHECK(obj::LossCsv::read(dir / "loss.csv").empty());
  const auto loaded = load_checkpoint(dir / "final");
  CHECK(loaded.step == 0);
  CHECK(loaded.store->parameter_count() == tr.params().parameter_count());
}

TEST_CASE("inference from a loaded checkpoint") {
  const auto ds = tiny_dataset();
  const auto cfg = small_config();
  const auto dir = temp_dir("infer");
  {
    Trainer tr(cfg, ds);
    tr.run(dir);
  }
  const auto m = load_checkpoint(dir / "final");
  CHECK(m.step == cfg.max_steps);
  const auto& content = ds->test[0].content;
  const auto& ref = ds->train[3];  // non-parallel reference
  const auto p = infer(m.model, cfg.flags, content, ref.mel, ref.style_voicing);
  CHECK(p.mel.rows() == content.size());
  CHECK(p.mel.cols() == cfg.model.mel_dim);
  CHECK(p.pitch.size() == content.size());
  CHECK(p.aligned_style.rows() == content.size());
  const auto again = infer(m.model, cfg.flags, content, ref.mel, ref.style_voicing);
  CHECK(bit_equal(p.mel, again.mel));

  const std::vector<bool> silent(ref.length(), false);
  CHECK_THROWS_WITH(infer(m.model, cfg.flags, content, ref.mel, silent), doctest::Contains("no voiced frames"));
  auto no_ve = cfg.flags;
  no_ve.use_ve = false;
  CHECK(infer(m.model, no_ve, content, ref.mel, silent).mel.rows() == content.size());
}

TEST_CASE("config files") {
  const auto dir = temp_dir("config");
  fs::create_directories(dir);
  auto cfg = small_config();
  cfg.flags.use_uf = false;
  cfg.flags.beta_mask = 0.0;
  cfg.sp_reduction = obj::SpReduction::mean;
  {
    std::ofstream out(dir / "c.json");
    out << nlohmann::json(cfg).dump(2);
  }
  const auto back = load_config(dir / "c.json");
  CHECK(nlohmann::json(back) == nlohmann::json(cfg));

  {
    std::ofstream out(dir / "partial.json");
    out << R"({"max_steps": 7, "flags": {"use_sd": false}})";
  }
  const auto partial = load_config(dir / "partial.json");
  CHECK(partial.max_steps == 7);
  CHECK_FALSE(partial.flags.use_sd);
  CHECK(partial.model.dim == 256);

  CHECK_THROWS_WITH(load_config(dir / "c.toml"), doctest::Contains("TOML"));
  {
    std::ofstream out(dir / "bad.json");
    out << R"({"sp_reduction": "max"})";
  }
  CHECK_THROWS_AS(load_config(dir / "bad.json"), std::invalid_argument);
  {
    std::ofstream out(dir / "beta.json");
    out << R"({"flags": {"beta_mask": 1.5}})";
  }
  CHECK_THROWS_AS(load_config(dir / "beta.json"), std::invalid_argument);
}
