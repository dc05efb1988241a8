// spotkit command-line interface.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "spotkit/backbone/trainer.hpp"
#include "spotkit/eval/experiment.hpp"
#include "spotkit/eval/gradcheck_suite.hpp"
#include "spotkit/eval/metrics.hpp"
#include "spotkit/eval/plot.hpp"
#include "spotkit/eval/probe.hpp"

namespace fs = std::filesystem;
using namespace spotkit;

namespace {

struct AblationArgs {
  bool no_rt = false, no_uf = false, no_ve = false, no_sd = false, no_sp = false;
  std::optional<double> beta_mask;

  void add_to(CLI::App* app) {
    app->add_flag("--no-rt", no_rt, "Straight-through quantizer gradient instead of the rotation trick");
    app->add_flag("--no-uf", no_uf, "Bypass the unvoiced filler");
    app->add_flag("--no-ve", no_ve, "Quantize every frame, not just voiced ones");
    app->add_flag("--no-sd", no_sd, "Disable the style disentanglement loss");
    app->add_flag("--no-sp", no_sp, "Disable the style preserving loss");
    app->add_option("--beta-mask", beta_mask, "Attention coefficient on mask-code columns")->check(CLI::Range(0.0, 1.0));
  }
  void apply(backbone::AblationFlags& f) const {
    if (no_rt) f.use_rt = false;
    if (no_uf) f.use_uf = false;
    if (no_ve) f.use_ve = false;
    if (no_sd) f.use_sd = false;
    if (no_sp) f.use_sp = false;
    if (beta_mask) f.beta_mask = *beta_mask;
  }
};

fs::path manifest_path(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.json" : p; }

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  if (path.extension() == ".toml") throw std::invalid_argument(path.string() + ": TOML configs are not supported, use JSON");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

void save_matrix_csv(const fs::path& path, const diff::Tensor<float>& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(9);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(t, c);
    out << '\n';
  }
}

std::map<std::string, fs::path> csv_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") out[e.path().stem().string()] = e.path();
  return out;
}

// ---------------------------------------------------------------------------

int corpus_gen(std::uint64_t seed, const fs::path& out, const std::optional<fs::path>& config) {
  corpus::CorpusConfig cfg;
  if (config) read_json(*config).get_to(cfg);
  const auto m = corpus::generate_corpus(cfg, seed, out);
  std::printf("%zu train, %zu test utterances in %s (hash %016llx)\n", m.count("train"), m.count("test"),
              out.string().c_str(), static_cast<unsigned long long>(corpus::manifest_hash(m)));
  return 0;
}

int train(const fs::path& manifest, const fs::path& out, const std::optional<fs::path>& config,
          std::optional<std::uint64_t> seed, std::optional<std::size_t> max_steps, const std::optional<fs::path>& resume,
          const AblationArgs& abl) {
  backbone::TrainerConfig cfg;
  if (config) cfg = backbone::load_config(*config);
  if (seed) cfg.seed = *seed;
  if (max_steps) cfg.max_steps = *max_steps;
  abl.apply(cfg.flags);
  cfg.validate();
  const auto m = corpus::load_manifest(manifest_path(manifest));
  auto data = std::make_shared<backbone::Dataset>(backbone::load_dataset(m));
  backbone::Trainer tr(cfg, data);
  tr.set_progress([](std::size_t step, const backbone::StepReport& r) {
    if (step % 50 == 0) {
      std::fprintf(stderr, "step %zu  total %.4f  fs2 %.4f  rvq %.4f  sd %.4f  sp %.4f  |g| %.3g\n", step, r.bundle.total,
                   r.bundle.l_fs2, r.bundle.l_rvq, r.bundle.l_sd, r.bundle.l_sp, r.grad_norm);
    }
  });
  tr.run(out, resume);
  std::printf("trained %zu steps, final checkpoint %s\n", tr.step(), (out / "final").string().c_str());
  return 0;
}

int infer(const fs::path& ckpt, const fs::path& content_csv, const fs::path& reference, const fs::path& out,
          const AblationArgs& abl) {
  const auto m = backbone::load_checkpoint(ckpt);
  auto flags = m.cfg.flags;
  abl.apply(flags);
  const auto content = corpus::load_content_csv(content_csv);
  const corpus::CorpusConfig cc;
  const auto p = backbone::infer(m.model, flags, content, signal::load_wav(reference), cc.mel, cc.pitch);
  fs::create_directories(out);
  save_matrix_csv(out / "mel.csv", p.mel);
  signal::save_pitch_csv(out / "pitch.csv", p.pitch);
  std::printf("%zu frames written to %s\n", p.mel.rows(), out.string().c_str());
  return 0;
}

int extract_style(const fs::path& ckpt, const fs::path& manifest, const std::optional<fs::path>& out,
                  const AblationArgs& abl) {
  const auto m = backbone::load_checkpoint(ckpt);
  auto flags = m.cfg.flags;
  abl.apply(flags);
  const auto data = backbone::load_dataset(corpus::load_manifest(manifest_path(manifest)));
  const auto ex = eval::probe_examples(m.model, flags, data);
  if (out) {
    nlohmann::json rows = nlohmann::json::array();
    std::size_t i = 0;
    for (const auto* split : {&data.train, &data.test})
      for (const auto& s : *split) {
        rows.push_back({{"id", s.id}, {"split", s.split}, {"style_id", s.style_id}, {"sentence_id", s.sentence_id},
                        {"embedding", ex[i++].x}});
      }
    write_json(*out, rows);
  }
  std::cout << nlohmann::json(eval::style_probe(ex)).dump(2) << '\n';
  return 0;
}

int evaluate(const std::optional<fs::path>& pred, const std::optional<fs::path>& gt, const std::optional<fs::path>& ckpt,
             const std::optional<fs::path>& manifest, const std::optional<fs::path>& out, const AblationArgs& abl) {
  std::vector<eval::TrackPair> pairs;
  if (pred && gt) {
    const auto pf = csv_files(*pred);
    const auto gf = csv_files(*gt);
    for (const auto& [id, path] : gf) {
      auto it = pf.find(id);
      if (it == pf.end()) continue;
      pairs.push_back({id, signal::load_pitch_csv(it->second), signal::load_pitch_csv(path)});
    }
    if (pairs.empty()) throw std::runtime_error("no pitch CSV names in common between " + pred->string() + " and " + gt->string());
  } else if (ckpt && manifest) {
    const auto m = backbone::load_checkpoint(*ckpt);
    auto flags = m.cfg.flags;
    abl.apply(flags);
    const auto data = backbone::load_dataset(corpus::load_manifest(manifest_path(*manifest)));
    pairs = eval::predict_tracks(m.model, flags, data.test);
    if (out) {
      fs::create_directories(*out / "pred");
      for (const auto& p : pairs) signal::save_pitch_csv(*out / "pred" / (p.id + ".csv"), p.pred);
    }
  } else {
    throw std::invalid_argument("eval needs --pred and --gt, or --checkpoint and --manifest");
  }
  const auto report = eval::evaluate(pairs);
  const auto text = nlohmann::json(report).dump(2);
  if (out) write_json(*out / "report.json", report);
  std::cout << text << '\n';
  return 0;
}

int gradcheck(int bits, std::uint64_t seed) {
  eval::FdSuiteOptions o;
  o.bits = bits;
  o.seed = seed;
  bool ok = true;
  for (const auto& r : eval::run_fd_suite(o)) {
    std::printf("%-30s max rel err %.3e  (tol %.0e, %zu checks)  %s\n", r.name.c_str(), r.max_rel_error, r.tolerance,
                r.checks, r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

int plot(const fs::path& out, const std::optional<fs::path>& loss, const std::optional<fs::path>& pred,
         const std::optional<fs::path>& gt, const std::optional<fs::path>& ckpt) {
  if (!loss && !(pred && gt) && !ckpt) throw std::invalid_argument("plot needs --loss, --pred with --gt, or --checkpoint");
  fs::create_directories(out);
  if (loss) {
    const auto rows = obj::LossCsv::read(*loss);
    std::vector<eval::Series> s(6);
    const char* names[] = {"total", "l_fs2", "l_rvq", "l_sd", "l_sp", "l_adv"};
    for (int k = 0; k < 6; ++k) s[std::size_t(k)].name = names[k];
    for (const auto& r : rows) {
      const double v[] = {r.bundle.total, r.bundle.l_fs2, r.bundle.l_rvq, r.bundle.l_sd, r.bundle.l_sp, r.bundle.l_adv};
      for (int k = 0; k < 6; ++k) {
        s[std::size_t(k)].x.push_back(double(r.step));
        s[std::size_t(k)].y.push_back(v[k]);
      }
    }
    eval::write_line_plot(out / "loss", {"Training losses", "step", "loss"}, s);
  }
  if (pred && gt) {
    auto series = [](const std::string& name, const signal::PitchTrack& t) {
      eval::Series s{name, {}, {}};
      for (std::size_t i = 0; i < t.size(); ++i) {
        s.x.push_back(double(i));
        s.y.push_back(t.vuv[i] ? t.f0_hz[i] : std::nan(""));
      }
      return s;
    };
    const auto p = signal::load_pitch_csv(*pred), g = signal::load_pitch_csv(*gt);
    eval::write_scatter_plot(out / "f0", {"F0 overlay", "frame", "Hz"}, {series("ground truth", g), series("predicted", p)});
  }
  if (ckpt) {
    const auto m = backbone::load_checkpoint(*ckpt);
    const auto& cb = m.model.codebook;
    std::vector<double> counts;
    std::vector<std::string> labels;
    for (std::size_t d = 0; d < cb.depth; ++d)
      for (std::size_t k = 0; k < cb.size; ++k) {
        counts.push_back(cb.ema_counts[d * cb.size + k]);
        labels.push_back("d" + std::to_string(d) + "k" + std::to_string(k));
      }
    eval::write_histogram(out / "codebook_usage", {"Codebook usage (EMA counts)", "code", "count"}, counts, labels);
  }
  std::printf("plots written to %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spotkit: voiced-aware style extraction toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 7;
  std::optional<std::uint64_t> train_seed;
  fs::path out;
  std::optional<fs::path> config, resume, opt_out, pred, gt, ckpt_opt, manifest_opt, loss;
  fs::path manifest, ckpt, content, reference;
  std::optional<std::size_t> max_steps;
  int bits = 64;
  AblationArgs abl;

  auto* cg = app.add_subcommand("corpus-gen", "Render the synthetic corpus");
  cg->add_option("--seed", seed, "Corpus seed")->capture_default_str();
  cg->add_option("--out", out, "Output directory")->required();
  cg->add_option("--config", config, "Corpus config (JSON)");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--manifest", manifest, "Corpus manifest or directory")->required();
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_option("--config", config, "Trainer config (JSON)");
  tr->add_option("--seed", train_seed, "Overrides the config seed");
  tr->add_option("--max-steps", max_steps, "Overrides the config step count");
  tr->add_option("--resume", resume, "Checkpoint directory to resume from");
  tr->add_option("--bits", bits, "Training precision")->check(CLI::IsMember({32}));
  abl.add_to(tr);

  auto* inf = app.add_subcommand("infer", "Synthesize features in the style of a reference");
  inf->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  inf->add_option("--content", content, "Content CSV (one symbol per frame)")->required();
  inf->add_option("--reference", reference, "Reference WAV")->required();
  inf->add_option("--out", out, "Output directory")->required();
  inf->add_option("--seed", seed, "Unused; inference is deterministic");
  abl.add_to(inf);

  auto* ex = app.add_subcommand("extract-style", "Style embeddings and probe report for a corpus");
  ex->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  ex->add_option("--manifest", manifest, "Corpus manifest or directory")->required();
  ex->add_option("--out", opt_out, "Write embeddings JSON here");
  ex->add_option("--seed", seed, "Unused; extraction is deterministic");
  abl.add_to(ex);

  auto* ev = app.add_subcommand("eval", "Prosody metrics as JSON");
  ev->add_option("--pred", pred, "Directory of predicted pitch CSVs");
  ev->add_option("--gt", gt, "Directory of ground-truth pitch CSVs");
  ev->add_option("--checkpoint", ckpt_opt, "Evaluate a checkpoint on the test split");
  ev->add_option("--manifest", manifest_opt, "Corpus manifest or directory");
  ev->add_option("--out", opt_out, "Write report.json and predicted tracks here");
  ev->add_option("--seed", seed, "Unused; evaluation is deterministic");
  abl.add_to(ev);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--bits", bits, "Precision of the analytic gradients")->check(CLI::IsMember({32, 64}))->capture_default_str();
  gc->add_option("--seed", seed, "Sampling seed")->capture_default_str();

  auto* pl = app.add_subcommand("plot", "SVG plots with backing CSV");
  pl->add_option("--out", out, "Output directory")->required();
  pl->add_option("--loss", loss, "loss.csv of a run");
  pl->add_option("--pred", pred, "Predicted pitch CSV");
  pl->add_option("--gt", gt, "Ground-truth pitch CSV");
  pl->add_option("--checkpoint", ckpt_opt, "Checkpoint for the codebook usage histogram");
  pl->add_option("--seed", seed, "Unused; plots are deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (*cg) return corpus_gen(seed, out, config);
    if (*tr) return train(manifest, out, config, train_seed, max_steps, resume, abl);
    if (*inf) return infer(ckpt, content, reference, out, abl);
    if (*ex) return extract_style(ckpt, manifest, opt_out, abl);
    if (*ev) return evaluate(pred, gt, ckpt_opt, manifest_opt, opt_out, abl);
    if (*gc) return gradcheck(bits, seed);
    if (*pl) return plot(out, loss, pred, gt, ckpt_opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
