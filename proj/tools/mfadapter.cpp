// mfadapter: command-line front end for the few-shot engine.
//
//   mfadapter synth        write a synthetic feature bundle and its split manifest
//   mfadapter build-cache  sample a K-shot episode and freeze its MF-Unit cache
//   mfadapter train        fit the adapter against a frozen cache
//   mfadapter eval         score the test split, per branch and fused
//   mfadapter ablate       scale and layer ablation tables
//
// Options may also come from a TOML/INI file given with --config; flags on
// the command line win. Every output gets a sibling "<output>.config.toml"
// holding the resolved options of the subcommand that wrote it.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "mfadapter/mfadapter.hpp"

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string out_dir = ".";
};

fs::path output_path(const Globals& g, const std::string& name) { return fs::path(g.out_dir) / name; }

void ensure_parent(const fs::path& p) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  if (ec) throw mfa::IoError("cannot create directory: " + ec.message(), p.parent_path().string());
}

void write_resolved_config(const CLI::App& sub, const fs::path& output) {
  mfa::io::write_text_file(output.string() + ".config.toml", "# mfadapter " + sub.get_name() + "\n" +
                                                                 sub.config_to_str(true, false));
}

std::vector<int> parse_layers(const std::string& s) {
  std::vector<int> layers;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const int l = std::stoi(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      layers.push_back(l);
    } catch (const std::logic_error&) {
      throw mfa::ValidationError("bad layer list \"" + s + "\"");
    }
  }
  if (layers.empty()) throw mfa::ValidationError("empty layer list");
  return layers;
}

/// "CxHxW" → geometry.
mfa::LayerGeometry parse_geometry(const std::string& s) {
  std::size_t c = 0, h = 0, w = 0;
  char x1 = 0, x2 = 0;
  std::istringstream is(s);
  if (!(is >> c >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x' || is.peek() != EOF) {
    throw mfa::ValidationError("bad map geometry \"" + s + "\" (expected CxHxW)");
  }
  return {c, h, w};
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string default_manifest(const std::string& bundle) { return bundle + ".manifest.json"; }

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out = "synthetic.mffb";
  std::string manifest;
  std::string profile;
  std::string layer3 = "4x8x8";
  std::string layer4 = "8x7x7";
  std::size_t classes = 5;
  std::size_t shots = 16;
  std::size_t test_per_class = 20;
  std::size_t embed_dim = 32;
  double separation = 10.0;
  std::uint64_t seed = 1;
  std::size_t views = 0;
  double augment_noise = 0.5;
};

void run_synth(const Globals& g, const CLI::App& sub, const SynthArgs& a) {
  mfa::SyntheticSpec spec;
  spec.n_classes = a.classes;
  spec.shots = a.shots;
  spec.test_per_class = a.test_per_class;
  spec.separation = a.separation;
  spec.seed = a.seed;
  spec.augmented_views = a.views;
  spec.augment_noise = a.augment_noise;
  if (!a.profile.empty()) {
    const auto profile = mfa::geometry_profile(a.profile);
    if (!profile) throw mfa::ValidationError("unknown geometry profile \"" + a.profile + "\" (expected RN50 or RN101)");
    spec.geometry = profile->layers;
    spec.embed_dim = profile->embed_dim;
  } else {
    spec.geometry = {{3, parse_geometry(a.layer3)}, {4, parse_geometry(a.layer4)}};
    spec.embed_dim = a.embed_dim;
  }
  const auto data = mfa::generate_synthetic(spec);
  const fs::path bundle_path = output_path(g, a.out);
  const fs::path manifest_path = a.manifest.empty() ? fs::path(default_manifest(bundle_path.string()))
                                                    : output_path(g, a.manifest);
  ensure_parent(bundle_path);
  ensure_parent(manifest_path);
  mfa::write_bundle(data.bundle, bundle_path);
  mfa::write_manifest(data.manifest, manifest_path);
  write_resolved_config(sub, bundle_path);
  std::cout << "wrote " << bundle_path.string() << " (" << data.bundle.items.size() << " items, "
            << data.bundle.n_classes() << " classes)\n";
}

// ---------------------------------------------------------------- build-cache

struct CacheArgs {
  std::string bundle;
  std::string manifest;
  std::string out = "cache.mfuc";
  std::size_t shots = 16;
  int scale = 2;
  std::string layers = "3,4";
  std::uint64_t seed = 1;
};

void run_build_cache(const Globals& g, const CLI::App& sub, const CacheArgs& a) {
  const auto bundle = mfa::read_bundle(a.bundle);
  const auto manifest = mfa::read_manifest(a.manifest.empty() ? default_manifest(a.bundle) : a.manifest);
  const auto episode = mfa::sample_episode(bundle, manifest, {a.shots, a.seed});
  const auto layers = parse_layers(a.layers);
  const auto cache = mfa::build_cache<float>(bundle, episode.support, a.scale, layers);
  const fs::path out = output_path(g, a.out);
  ensure_parent(out);
  mfa::write_cache(cache, out);
  write_resolved_config(sub, out);
  std::cout << "NK=" << cache.local.rows() << " N=" << cache.local.n_classes << " K=" << cache.local.n_shots
            << " scale=" << cache.local.scale << "\n";
  for (int l : cache.local.layers()) {
    std::cout << "layer" << l << " c=" << cache.local.channels.at(l) << " ms=" << cache.local.width(l) << "\n";
  }
  std::cout << "checksum=" << std::hex << std::setw(16) << std::setfill('0') << mfa::cache_checksum(cache) << std::dec
            << "\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string bundle;
  std::string cache;
  std::string out = "adapter.mfad";
  double lr = 1e-4;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  std::uint64_t seed = 1;
  std::string init = "uniform";
  std::string affinity = "exp";
  double beta = 1.0;
  std::string branches = "all";
};

mfa::TrainConfig train_config(const TrainArgs& a, const mfa::CacheSet<float>& cache) {
  mfa::TrainConfig c;
  c.lr = a.lr;
  c.batch_size = a.batch_size;
  c.epochs = a.epochs;
  c.seed = a.seed;
  c.scale = cache.local.scale;
  c.layers = cache.local.layers();
  c.init = mfa::parse_init_mode(a.init);
  c.affinity = mfa::Affinity::parse(a.affinity, a.beta);
  c.weights = mfa::BranchWeights::from_selection(a.branches);
  c.validate();
  return c;
}

void run_train(const Globals& g, const CLI::App& sub, const TrainArgs& a) {
  const auto bundle = mfa::read_bundle(a.bundle);
  const auto cache = mfa::read_cache(a.cache);
  const auto config = train_config(a, cache);
  std::cout << "lr=" << a.lr << " batch=" << config.batch_size << " epochs=" << config.epochs << "\n";
  const auto result = mfa::train<float>(bundle, cache, config);

  const fs::path out = output_path(g, a.out);
  ensure_parent(out);
  mfa::write_checkpoint({result.params, mfa::to_json(config)}, out);
  std::ostringstream curve;
  curve << "epoch\tloss\n";
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    curve << e + 1 << '\t' << std::setprecision(9) << result.epoch_loss[e] << '\n';
  }
  mfa::io::write_text_file(out.string() + ".loss.tsv", curve.str());
  write_resolved_config(sub, out);
  if (!result.epoch_loss.empty()) std::cout << "final loss " << fmt(result.epoch_loss.back(), 6) << "\n";
  std::cout << "wrote " << out.string() << "\n";
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string bundle;
  std::string manifest;
  std::string cache;
  std::string checkpoint;
  std::string out;
  std::string format = "text";
  std::string branches = "all";
  std::string local_path = "adapter";
  std::string split = "test";
  std::string affinity;
  double beta = 1.0;
  std::size_t batch_size = 256;
};

std::string text_report(const mfa::EvalResult<float>& r) {
  std::ostringstream os;
  os << "items\t" << r.items.size() << "\n";
  os << "accuracy\t" << fmt(100.0 * r.accuracy, 2) << "\n";
  for (const auto& [branch, acc] : r.branch_accuracy) os << "branch\t" << branch << "\t" << fmt(100.0 * acc, 2) << "\n";
  return os.str();
}

void run_eval(const Globals& g, const CLI::App& sub, const EvalArgs& a) {
  if (a.format != "text" && a.format != "jsonl") throw mfa::ValidationError("format must be text or jsonl");
  if (a.split != "test" && a.split != "support") throw mfa::ValidationError("split must be test or support");
  const auto bundle = mfa::read_bundle(a.bundle);
  const auto manifest = mfa::read_manifest(a.manifest.empty() ? default_manifest(a.bundle) : a.manifest);
  const auto cache = mfa::read_cache(a.cache);
  const auto splits = mfa::resolve_splits(bundle, manifest);
  const mfa::Split wanted = a.split == "test" ? mfa::Split::test : mfa::Split::support;
  std::vector<std::size_t> items;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == wanted) items.push_back(i);
  }

  mfa::EvalOptions opt;
  opt.scale = cache.local.scale;
  opt.batch_size = a.batch_size;
  opt.pipeline.weights = mfa::BranchWeights::from_selection(a.branches);
  std::optional<mfa::AdapterParams<float>> params;
  if (a.local_path == "adapter") {
    if (a.checkpoint.empty()) throw mfa::ValidationError("--checkpoint is required with --local-path adapter");
    auto ck = mfa::read_checkpoint(a.checkpoint);
    const auto cfg = mfa::train_config_from_json(ck.train_config);
    opt.pipeline.affinity = cfg.affinity;
    if (ck.train_config.contains("scale") && cfg.scale != cache.local.scale) {
      throw mfa::ValidationError("checkpoint was trained at scale " + std::to_string(cfg.scale) + ", cache is scale " +
                                 std::to_string(cache.local.scale));
    }
    opt.layers.clear();
    for (const auto& [layer, p] : ck.params.per_layer) opt.layers.push_back(layer);
    params = std::move(ck.params);
  } else if (a.local_path == "induction") {
    opt.path = mfa::LocalPath::induction;
    opt.layers = cache.local.layers();
  } else {
    throw mfa::ValidationError("local path must be adapter or induction");
  }
  if (!a.affinity.empty()) opt.pipeline.affinity = mfa::Affinity::parse(a.affinity, a.beta);

  const auto result = mfa::evaluate<float>(bundle, items, cache, params ? &*params : nullptr, opt);
  const std::string body = a.format == "text" ? text_report(result) : mfa::logits_records(bundle, result);
  const fs::path out = output_path(g, a.out.empty() ? (a.format == "text" ? "report.txt" : "report.jsonl") : a.out);
  ensure_parent(out);
  mfa::io::write_text_file(out, body);
  write_resolved_config(sub, out);
  std::cout << text_report(result);
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string bundle;
  std::string manifest;
  std::string out = "ablation.tsv";
  std::size_t shots = 16;
  std::uint64_t seed = 1;
  double lr = 1e-4;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  std::size_t threads = 1;
};

struct Cell {
  int scale;
  std::vector<int> layers;
  double accuracy = 0.0;
};

double run_cell(const mfa::FeatureBundle& bundle, const mfa::Episode& ep, const AblateArgs& a, const Cell& cell) {
  const auto cache = mfa::build_cache<float>(bundle, ep.support, cell.scale, cell.layers);
  mfa::TrainConfig cfg;
  cfg.lr = a.lr;
  cfg.batch_size = a.batch_size;
  cfg.epochs = a.epochs;
  cfg.seed = a.seed;
  cfg.scale = cell.scale;
  cfg.layers = cell.layers;
  const auto trained = mfa::train<float>(bundle, cache, cfg);
  mfa::EvalOptions opt;
  opt.scale = cell.scale;
  opt.layers = cell.layers;
  return mfa::evaluate<float>(bundle, ep.test, cache, &trained.params, opt).accuracy;
}

void run_ablate(const Globals& g, const CLI::App& sub, const AblateArgs& a) {
  const auto bundle = mfa::read_bundle(a.bundle);
  const auto manifest = mfa::read_manifest(a.manifest.empty() ? default_manifest(a.bundle) : a.manifest);
  const auto ep = mfa::sample_episode(bundle, manifest, {a.shots, a.seed});
  if (ep.test.empty()) throw mfa::ValidationError("the manifest has no test items");

  std::vector<Cell> cells;
  for (int s = 1; s <= mfa::kMaxScale; ++s) cells.push_back({s, {3, 4}});
  for (const auto& layers : std::vector<std::vector<int>>{{3}, {4}, {3, 4}}) cells.push_back({2, layers});

  const std::size_t workers = std::max<std::size_t>(1, std::min(a.threads, cells.size()));
  std::vector<std::exception_ptr> errors(cells.size());
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < cells.size(); i += workers) {
      try {
        cells[i].accuracy = run_cell(bundle, ep, a, cells[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
  work(0);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::ostringstream os;
  os << "scale";
  for (int s = 1; s <= mfa::kMaxScale; ++s) os << '\t' << s;
  os << "\naccuracy";
  for (int s = 0; s < mfa::kMaxScale; ++s) os << '\t' << fmt(100.0 * cells[s].accuracy, 2);
  os << "\n\nlayers\taccuracy\n";
  for (std::size_t i = mfa::kMaxScale; i < cells.size(); ++i) {
    std::string name;
    for (int l : cells[i].layers) name += (name.empty() ? "" : ",") + std::to_string(l);
    os << name << '\t' << fmt(100.0 * cells[i].accuracy, 2) << '\n';
  }
  const fs::path out = output_path(g, a.out);
  ensure_parent(out);
  mfa::io::write_text_file(out, os.str());
  write_resolved_config(sub, out);
  std::cout << os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MF-Adapter few-shot engine"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML/INI file of option defaults; command-line flags take precedence");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--out-dir", g.out_dir, "Directory for relative output paths")->envname("MFADAPTER_OUT_DIR");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic feature bundle and split manifest");
  synth->add_option("--out", sa.out, "Bundle path");
  synth->add_option("--manifest", sa.manifest, "Manifest path (default <out>.manifest.json)");
  synth->add_option("--profile", sa.profile, "Backbone geometry profile (RN50, RN101); overrides --layer3/--layer4");
  synth->add_option("--layer3", sa.layer3, "layer3 map geometry CxHxW");
  synth->add_option("--layer4", sa.layer4, "layer4 map geometry CxHxW");
  synth->add_option("--classes", sa.classes);
  synth->add_option("--shots", sa.shots, "Support items per class");
  synth->add_option("--test-per-class", sa.test_per_class);
  synth->add_option("--embed-dim", sa.embed_dim);
  synth->add_option("--separation", sa.separation, "Class center distance in noise units");
  synth->add_option("--seed", sa.seed);
  synth->add_option("--views", sa.views, "Augmented views per support item");
  synth->add_option("--augment-noise", sa.augment_noise);

  CacheArgs ca;
  auto* build = app.add_subcommand("build-cache", "Sample a K-shot episode and build its frozen cache");
  build->add_option("--bundle", ca.bundle)->required();
  build->add_option("--manifest", ca.manifest, "Split manifest (default <bundle>.manifest.json)");
  build->add_option("--out", ca.out, "Cache path");
  build->add_option("--shots", ca.shots, "K, one of 1, 2, 4, 8, 16");
  build->add_option("--scale", ca.scale, "Largest window dilation, 1-5");
  build->add_option("--layers", ca.layers, "Comma list of layers");
  build->add_option("--seed", ca.seed);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the adapter against a frozen cache");
  train->add_option("--bundle", ta.bundle)->required();
  train->add_option("--cache", ta.cache)->required();
  train->add_option("--out", ta.out, "Checkpoint path; the loss curve goes to <out>.loss.tsv");
  train->add_option("--lr", ta.lr);
  train->add_option("--batch-size", ta.batch_size);
  train->add_option("--epochs", ta.epochs);
  train->add_option("--seed", ta.seed);
  train->add_option("--init", ta.init, "uniform or mean");
  train->add_option("--affinity", ta.affinity, "exp or sharpened");
  train->add_option("--beta", ta.beta, "Sharpness of the sharpened affinity");
  train->add_option("--branches", ta.branches, "all, or a comma list of local, local3, local4, high, text");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score a split, per branch and fused");
  eval->add_option("--bundle", ea.bundle)->required();
  eval->add_option("--manifest", ea.manifest, "Split manifest (default <bundle>.manifest.json)");
  eval->add_option("--cache", ea.cache)->required();
  eval->add_option("--checkpoint", ea.checkpoint, "Adapter checkpoint (adapter path)");
  eval->add_option("--out", ea.out, "Report path (default report.txt or report.jsonl)");
  eval->add_option("--format", ea.format, "text or jsonl");
  eval->add_option("--branches", ea.branches, "all, or a comma list of local, local3, local4, high, text");
  eval->add_option("--local-path", ea.local_path, "adapter or induction");
  eval->add_option("--split", ea.split, "test or support");
  eval->add_option("--affinity", ea.affinity, "Override the checkpoint's affinity (exp or sharpened)");
  eval->add_option("--beta", ea.beta);
  eval->add_option("--batch-size", ea.batch_size);

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Scale and layer ablation tables");
  ablate->add_option("--bundle", aa.bundle)->required();
  ablate->add_option("--manifest", aa.manifest, "Split manifest (default <bundle>.manifest.json)");
  ablate->add_option("--out", aa.out, "Table path");
  ablate->add_option("--shots", aa.shots);
  ablate->add_option("--seed", aa.seed);
  ablate->add_option("--lr", aa.lr);
  ablate->add_option("--batch-size", aa.batch_size);
  ablate->add_option("--epochs", aa.epochs);
  ablate->add_option("--threads", aa.threads, "Worker threads for grid cells");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*synth) run_synth(g, *synth, sa);
    if (*build) run_build_cache(g, *build, ca);
    if (*train) run_train(g, *train, ta);
    if (*eval) run_eval(g, *eval, ea);
    if (*ablate) run_ablate(g, *ablate, aa);
  } catch (const mfa::FormatError& e) {
    std::cerr << "format error at byte " << e.offset() << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const mfa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
