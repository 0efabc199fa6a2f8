// vampvae command-line tool: train, evaluate, generate, reconstruct,
// inspect-prior.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>

#include "vampvae/vampvae.hpp"

namespace fs = std::filesystem;
using namespace vampvae;

namespace {

// Flag-value problems detected after parsing; mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataOptions {
  std::string dataset = "synth";
  std::string data_dir = ".";
  std::string train_file;
  std::string test_file;
  std::size_t raw_dim = 0;
  double raw_scale = 1.0;
  std::string raw_binarization = "dynamic";
  double raw_val_fraction = 0.1;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::size_t synth_n = 10000;
  std::size_t synth_dim = 64;
  std::size_t synth_k = 8;
  std::uint64_t data_seed = 1;
};

struct Options {
  DataOptions data;
  int levels = 2;
  std::string prior = "vamp";
  std::optional<std::size_t> k;
  std::size_t latent1 = 40;
  std::size_t latent2 = 40;
  std::size_t hidden = 300;
  std::size_t hidden_layers = 2;
  std::string likelihood = "bernoulli";
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string outdir;
  std::string checkpoint;
  std::size_t is_samples = 5000;
  std::size_t n = 25;
  std::optional<std::size_t> component;
  bool verbose = false;
};

void add_data_flags(CLI::App& cmd, DataOptions& d) {
  cmd.add_option("--dataset", d.dataset, "synth | dynamic-mnist | static-mnist | omniglot | raw")
      ->check(CLI::IsMember({"synth", "dynamic-mnist", "static-mnist", "omniglot", "raw"}))
      ->capture_default_str();
  cmd.add_option("--data-dir", d.data_dir,
                 "Directory with train-images-idx3-ubyte / t10k-images-idx3-ubyte (mnist) or "
                 "omniglot_train.raw / omniglot_test.raw (omniglot)")
      ->capture_default_str();
  cmd.add_option("--train-file", d.train_file, "Raw-matrix training file (--dataset raw)");
  cmd.add_option("--test-file", d.test_file, "Raw-matrix test file (--dataset raw)");
  cmd.add_option("--raw-dim", d.raw_dim, "Row width D of raw-matrix files");
  cmd.add_option("--raw-scale", d.raw_scale, "Multiplier applied to raw values before clamping to [0,1]")
      ->capture_default_str();
  cmd.add_option("--raw-binarization", d.raw_binarization, "none | static | dynamic")
      ->check(CLI::IsMember({"none", "static", "dynamic"}))
      ->capture_default_str();
  cmd.add_option("--raw-val-fraction", d.raw_val_fraction, "Share of raw training rows held out for validation")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  cmd.add_option("--image-height", d.image_height, "Image height for rendering raw data");
  cmd.add_option("--image-width", d.image_width, "Image width for rendering raw data");
  cmd.add_option("--synth-n", d.synth_n, "Rows generated for --dataset synth")->capture_default_str();
  cmd.add_option("--synth-dim", d.synth_dim, "Row width of --dataset synth")->capture_default_str();
  cmd.add_option("--synth-k", d.synth_k, "Prototype count of --dataset synth")->capture_default_str();
  cmd.add_option("--data-seed", d.data_seed, "Seed of the synthetic generator")->capture_default_str();
}

void add_common_flags(CLI::App& cmd, Options& o) {
  cmd.add_option("--outdir", o.outdir, "Output directory")->required();
  cmd.add_option("--seed", o.seed, "Random seed")->capture_default_str();
}

void add_checkpoint_flag(CLI::App& cmd, Options& o) {
  cmd.add_option("--checkpoint", o.checkpoint, "Checkpoint to load (default: <outdir>/best.ckpt)");
}

std::size_t perfect_square_root(std::size_t n) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || r * r != n) throw UsageError("--n must be a positive perfect square, got " + std::to_string(n));
  return r;
}

void image_shape_for(std::size_t dim, std::size_t& h, std::size_t& w) {
  if (h * w == dim && h != 0) return;
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (r * r == dim) {
    h = w = r;
  } else {
    h = 1;
    w = dim;
  }
}

Dataset load_dataset(const DataOptions& d) {
  Dataset ds;
  if (d.dataset == "synth") {
    ds = synth_clusters(d.synth_n, d.synth_dim, d.synth_k, d.data_seed);
  } else if (d.dataset == "dynamic-mnist" || d.dataset == "static-mnist") {
    const fs::path dir(d.data_dir);
    std::size_t h = 0, w = 0;
    const Matrix train = parse_idx_images(detail::read_file((dir / "train-images-idx3-ubyte").string()), &h, &w);
    const Matrix test = parse_idx_images(detail::read_file((dir / "t10k-images-idx3-ubyte").string()));
    ds = canonical_split("mnist", train, test,
                         d.dataset == "static-mnist" ? Binarization::Static : Binarization::Dynamic);
    ds.name = d.dataset;
    ds.image_height = h;
    ds.image_width = w;
  } else if (d.dataset == "omniglot") {
    const fs::path dir(d.data_dir);
    const Matrix train = load_raw_matrix((dir / "omniglot_train.raw").string(), 784);
    const Matrix test = load_raw_matrix((dir / "omniglot_test.raw").string(), 784);
    ds = canonical_split("omniglot", train, test, Binarization::Dynamic);
  } else {
    if (d.train_file.empty() || d.test_file.empty() || d.raw_dim == 0) {
      throw UsageError("--dataset raw needs --train-file, --test-file and --raw-dim");
    }
    const Matrix full = load_raw_matrix(d.train_file, d.raw_dim, d.raw_scale);
    ds.name = "raw";
    ds.dim = d.raw_dim;
    ds.binarization = d.raw_binarization == "none"     ? Binarization::None
                      : d.raw_binarization == "static" ? Binarization::Static
                                                       : Binarization::Dynamic;
    const auto n_val = static_cast<std::size_t>(std::llround(d.raw_val_fraction * static_cast<double>(full.rows)));
    split_validation(full, std::max<std::size_t>(1, n_val), kSplitSeed, ds.train, ds.val);
    ds.test = load_raw_matrix(d.test_file, d.raw_dim, d.raw_scale);
    ds.image_height = d.image_height;
    ds.image_width = d.image_width;
    ds.validate();
  }
  image_shape_for(ds.dim, ds.image_height, ds.image_width);
  return ds;
}

ModelSpec model_spec(const Options& o, const Dataset& ds) {
  ModelSpec s;
  s.levels = o.levels;
  s.data_dim = ds.dim;
  s.latent1 = o.latent1;
  s.latent2 = o.latent2;
  s.hidden = o.hidden;
  s.hidden_layers = o.hidden_layers;
  s.likelihood = *parse_likelihood(o.likelihood);
  s.prior = *parse_prior_kind(o.prior);
  s.components = o.k.value_or(ds.name == "omniglot" ? 1000 : 500);
  s.image_height = ds.image_height;
  s.image_width = ds.image_width;
  if (s.likelihood == Likelihood::DiscretizedLogistic && ds.binarization != Binarization::None) {
    throw UsageError("--likelihood logistic needs gray-level data (--dataset raw --raw-binarization none)");
  }
  return s;
}

std::string checkpoint_path(const Options& o) {
  return o.checkpoint.empty() ? (fs::path(o.outdir) / "best.ckpt").string() : o.checkpoint;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

int cmd_train(const Options& o) {
  const Dataset ds = load_dataset(o.data);
  const ModelSpec spec = model_spec(o, ds);
  TrainConfig cfg = o.train;
  cfg.seed = o.seed;
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(o.outdir);
  Rng init = Rng(o.seed).derive(1);
  Model model = Model::create(spec, ds.train, init);
  FitOptions fo;
  if (o.verbose) {
    fo.on_epoch = [](const EpochRecord& r) {
      std::cerr << "epoch " << r.epoch << " beta " << r.beta << " loss " << r.train_loss << " val_elbo " << r.val_elbo
                << "\n";
    };
  }
  FitResult res = fit(ds.train, ds.val, model, cfg, ds.binarization, fo);
  const fs::path out(o.outdir);
  save_checkpoint(res.best, (out / "best.ckpt").string());
  save_checkpoint(model, (out / "final.ckpt").string());
  write_text(out / "trainlog.jsonl", res.log.to_jsonl());
  write_text(out / "timing.jsonl", res.log.timing_jsonl());
  std::cout.precision(10);
  std::cout << "final val ELBO " << res.log.epochs.back().val_elbo << " (best " << res.log.best_val_elbo << " at epoch "
            << res.log.best_epoch << ", " << res.log.stop_reason << ")\n";
  return 0;
}

int cmd_evaluate(const Options& o) {
  const Model model = load_checkpoint(checkpoint_path(o));
  const Dataset ds = load_dataset(o.data);
  if (ds.dim != model.spec.data_dim) throw UsageError("dataset width does not match the checkpoint");
  EvalOptions eo;
  eo.is_samples = o.is_samples;
  eo.seed = o.seed;
  eo.workers = worker_count();
  EvalReport report = evaluate(model, ds.test, ds.binarization, eo);
  nlohmann::json j = report.to_json();
  j["val_elbo"] = mean_elbo(model, ds.val, o.train.val_seed, ds.binarization, o.train.batch_size);
  fs::create_directories(o.outdir);
  const fs::path out(o.outdir);
  write_text(out / "report.json", j.dump(2) + "\n");
  write_text(out / "histogram.csv", report.histogram.to_csv());
  std::cout.precision(10);
  std::cout << "mean test LL " << report.mean_test_ll << " over " << report.per_example_ll.size() << " rows (S="
            << report.is_samples << ")\n";
  return 0;
}

std::size_t grid_side(const Options& o) { return perfect_square_root(o.n); }

void check_component(const Model& m, const Options& o) {
  if (!o.component) return;
  const std::size_t k = component_count(m.prior);
  if (*o.component >= k) {
    throw std::out_of_range("--component " + std::to_string(*o.component) + " out of range for K=" + std::to_string(k));
  }
}

int cmd_generate(const Options& o) {
  const std::size_t side = grid_side(o);
  const Model model = load_checkpoint(checkpoint_path(o));
  check_component(model, o);
  Rng rng(o.seed);
  const Generation g = generate(model, o.n, rng, o.component);
  fs::create_directories(o.outdir);
  const std::string name = o.component ? "generate_component_" + std::to_string(*o.component) + ".pgm" : "generate.pgm";
  write_pgm(render_grid(g.images, model.spec.image_height, model.spec.image_width, side),
            (fs::path(o.outdir) / name).string());
  return 0;
}

int cmd_reconstruct(const Options& o) {
  const std::size_t side = grid_side(o);
  const Model model = load_checkpoint(checkpoint_path(o));
  const Dataset ds = load_dataset(o.data);
  if (ds.dim != model.spec.data_dim) throw UsageError("dataset width does not match the checkpoint");
  Rng rng(o.seed);
  Matrix x = ds.test.slice_rows(0, std::min(o.n, ds.test.rows));
  if (ds.binarization == Binarization::Dynamic) x = dynamic_binarize(x, rng);
  const Matrix r = reconstruct(model, x, rng);
  fs::create_directories(o.outdir);
  const std::size_t h = model.spec.image_height, w = model.spec.image_width;
  write_pgm(hconcat({render_grid(x, h, w, side), render_grid(r, h, w, side)}),
            (fs::path(o.outdir) / "reconstruct.pgm").string());
  return 0;
}

int cmd_inspect_prior(const Options& o) {
  const std::size_t side = grid_side(o);
  const Model model = load_checkpoint(checkpoint_path(o));
  const PriorKind kind = prior_kind(model.prior);
  if (kind == PriorKind::Standard) throw std::runtime_error("no inspectable prior parameters (standard Gaussian prior)");
  check_component(model, o);
  const std::size_t h = model.spec.image_height, w = model.spec.image_width;
  const std::size_t shown = std::min(o.n, component_count(model.prior));
  fs::create_directories(o.outdir);
  const fs::path out(o.outdir);
  NoGradGuard no_grad;
  if (uses_encoder(kind)) {
    const Matrix u = pseudo_input_values(model.prior).to_matrix();
    write_pgm(render_grid(u.slice_rows(0, shown), h, w, side), (out / "pseudo_inputs.pgm").string());
  } else {
    const auto& mog = std::get<MogPrior>(model.prior);
    const Tensor top = Tensor::from_matrix(mog.means.to_matrix().slice_rows(0, shown));
    const Tensor images = model.spec.levels == 1 ? likelihood_mean(model.decoder(top))
                                                 : likelihood_mean(model.decoder(model.conditional_z1(top).mean, top));
    write_pgm(render_grid(images.to_matrix(), h, w, side), (out / "mog_means.pgm").string());
  }
  if (o.component) {
    Rng rng(o.seed);
    const Generation g = generate(model, o.n, rng, o.component);
    write_pgm(render_grid(g.images, h, w, side), (out / ("component_" + std::to_string(*o.component) + ".pgm")).string());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational auto-encoders with mixture and pseudo-input priors"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::Throw);
  Options o;

  auto* train = app.add_subcommand("train", "Train a model; writes best.ckpt, final.ckpt, trainlog.jsonl and timing.jsonl");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Importance-sampled test log-likelihood; writes report.json and histogram.csv");
  auto* generate_cmd = app.add_subcommand("generate", "Decode prior samples into generate.pgm");
  auto* reconstruct_cmd = app.add_subcommand("reconstruct", "First n test rows beside their reconstructions in reconstruct.pgm");
  auto* inspect = app.add_subcommand("inspect-prior", "Render pseudo-inputs or decoded mixture means");

  for (auto* cmd : {train, evaluate_cmd, generate_cmd, reconstruct_cmd, inspect}) add_common_flags(*cmd, o);
  for (auto* cmd : {train, evaluate_cmd, reconstruct_cmd}) add_data_flags(*cmd, o.data);
  for (auto* cmd : {evaluate_cmd, generate_cmd, reconstruct_cmd, inspect}) add_checkpoint_flag(*cmd, o);

  train->add_option("--levels", o.levels, "Stochastic layers (1 or 2)")->check(CLI::IsMember({1, 2}))->capture_default_str();
  train->add_option("--prior", o.prior, "sg | mog | vamp | vamp-data | weighted-vamp")
      ->check(CLI::IsMember({"sg", "mog", "vamp", "vamp-data", "weighted-vamp"}))
      ->capture_default_str();
  train->add_option("--k", o.k, "Mixture components / pseudo-inputs (default 500; 1000 for omniglot)");
  train->add_option("--latent1", o.latent1, "Size of z1 (or z for one level)")->capture_default_str();
  train->add_option("--latent2", o.latent2, "Size of z2")->capture_default_str();
  train->add_option("--hidden", o.hidden, "Hidden width")->capture_default_str();
  train->add_option("--hidden-layers", o.hidden_layers, "Gated layers per network")->capture_default_str();
  train->add_option("--likelihood", o.likelihood, "bernoulli | logistic")
      ->check(CLI::IsMember({"bernoulli", "logistic"}))
      ->capture_default_str();
  train->add_option("--lr", o.train.learning_rate, "Learning rate")->capture_default_str();
  train->add_option("--batch-size", o.train.batch_size, "Mini-batch size")->capture_default_str();
  train->add_option("--warmup", o.train.warmup_epochs, "Warm-up epochs (0 disables)")->capture_default_str();
  train->add_option("--patience", o.train.early_stop_patience, "Early-stopping look-ahead in epochs")->capture_default_str();
  train->add_option("--max-epochs", o.train.max_epochs, "Epoch limit")->capture_default_str();
  train->add_option("--mc-samples", o.train.mc_samples, "Posterior samples per data point")->capture_default_str();
  train->add_flag("--verbose", o.verbose, "Print one line per epoch to stderr");

  evaluate_cmd->add_option("--is-samples", o.is_samples, "Importance samples per test point")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  evaluate_cmd->add_option("--batch-size", o.train.batch_size, "Batch size of the validation ELBO")->capture_default_str();

  for (auto* cmd : {generate_cmd, reconstruct_cmd, inspect}) {
    cmd->add_option("--n", o.n, "Images in the grid (perfect square)")->capture_default_str();
  }
  generate_cmd->add_option("--component", o.component, "Sample from this mixture component only");
  inspect->add_option("--component", o.component, "Also render n generations from this component");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*evaluate_cmd) return cmd_evaluate(o);
    if (*generate_cmd) return cmd_generate(o);
    if (*reconstruct_cmd) return cmd_reconstruct(o);
    return cmd_inspect_prior(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "range error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
