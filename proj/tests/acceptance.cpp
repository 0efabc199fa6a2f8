// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "linear_gaussian.hpp"
#include "vampvae/vampvae.hpp"

using namespace vampvae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double standard_error(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

ModelSpec tiny(int levels, PriorKind prior) {
  ModelSpec s;
  s.levels = levels;
  s.data_dim = 6;
  s.latent1 = 2;
  s.latent2 = 2;
  s.hidden = 8;
  s.prior = prior;
  s.components = 3;
  return s;
}

Matrix binary_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(n, d);
  for (double& v : x.data) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return x;
}

std::vector<Tensor> trainable(const Model& m) {
  std::vector<Tensor> out;
  for (auto& p : m.parameters())
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

// ---- 1 ----------------------------------------------------------------------

Outcome gradient_suite() {
  struct Case {
    const char* name;
    int levels;
    PriorKind prior;
  };
  const Case cases[] = {{"VAE+SG", 1, PriorKind::Standard}, {"VAE+Vamp", 1, PriorKind::Vamp}, {"HVAE+Vamp", 2, PriorKind::Vamp}};
  Outcome o{true, ""};
  for (const Case& c : cases) {
    const Matrix x = binary_rows(3, 6, 11);
    Rng init(12);
    Model m = Model::create(tiny(c.levels, c.prior), x, init);
    const Tensor xt = Tensor::from_matrix(x);
    auto f = [&] {
      Rng noise(99);
      return sum(elbo_terms(m, xt, noise).elbo());
    };
    auto params = trainable(m);
    const double err = grad_check(f, params, 1e-5);
    o.pass = o.pass && err < 1e-5;
    o.detail += std::string(c.name) + " max rel err " + fmt(err) + "; ";
  }
  o.detail += "tolerance 1e-5";
  return o;
}

// ---- 2 ----------------------------------------------------------------------

Outcome vamp_coupling() {
  Outcome o{true, ""};
  for (int levels : {1, 2}) {
    ModelSpec s = tiny(levels, PriorKind::Vamp);
    const std::vector<double> row{0.3, 0.7, 0.55, 0.1, 0.9, 0.45};
    Matrix x(4, 6);
    for (std::size_t i = 0; i < x.rows; ++i) std::copy(row.begin(), row.end(), x.row(i).begin());
    Rng init(13);
    Model m = Model::create(s, x, init);
    // Every pseudo-input maps to the data row, so q(z|u_k) = q(z|x) for all k.
    auto& vp = std::get<VampPrior>(m.prior);
    auto u = vp.pseudo_inputs.mutable_data();
    for (std::size_t k = 0; k < s.components; ++k)
      for (std::size_t j = 0; j < 6; ++j) u[k * 6 + j] = logit(row[j]);

    Rng rng(14);
    const Tensor xt = Tensor::from_matrix(x);
    DiagGaussian q = m.encoder(xt);
    Tensor z = sample_reparam(q, rng);
    Tensor kl = log_normal_diag(z, q) - m.log_prior_top(z);
    backward(mean(kl));
    double linf = 0.0;
    ParameterList enc;
    m.encoder.collect("encoder", enc);
    for (auto& p : enc)
      for (double g : p.tensor.grad()) linf = std::max(linf, std::abs(g));
    o.pass = o.pass && linf < 1e-8;
    o.detail += (levels == 1 ? "VAE" : "HVAE top level") + std::string(" encoder-gradient Linf ") + fmt(linf) + "; ";
  }
  o.detail += "tolerance 1e-8";
  return o;
}

// ---- 3 ----------------------------------------------------------------------

Outcome aggregated_posterior() {
  const std::size_t n = 5, per_x = 2000;  // 10^4 samples
  const Matrix data = binary_rows(n, 6, 15);
  Rng init(16);
  Model m = Model::create(tiny(1, PriorKind::Standard), data, init);
  for (double& v : m.encoder.head.mean.weight.mutable_data()) v *= 3.0;

  auto samples = [&](const PriorSpec& spec) {
    Rng rng(17);  // common random numbers: every prior sees the same z draws
    return cross_entropy_samples(data, m.encoder, spec, m.encoder, per_x, rng);
  };
  const auto best = samples(VampDataPrior{Tensor::from_matrix(data)});

  std::vector<std::pair<std::string, PriorSpec>> rivals;
  rivals.emplace_back("SG", StandardPrior{2});
  Rng mix(18);
  for (int r = 0; r < 5; ++r) {
    const std::size_t k = 2 + static_cast<std::size_t>(r);
    std::vector<double> means(k * 2), log_vars(k * 2);
    for (double& v : means) v = 1.5 * mix.normal();
    for (double& v : log_vars) v = 0.5 * mix.normal();
    rivals.emplace_back("MoG" + std::to_string(r + 1), MogPrior{Tensor::constant({k, 2}, means), Tensor::constant({k, 2}, log_vars)});
  }

  Outcome o{true, ""};
  o.detail = "aggregate CE " + fmt(mean_of(best)) + "; ";
  for (const auto& [name, spec] : rivals) {
    const auto other = samples(spec);
    std::vector<double> diff(other.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = other[i] - best[i];
    const double gap = mean_of(diff), se = standard_error(diff);
    o.pass = o.pass && gap > 3.0 * se;
    o.detail += name + " gap " + fmt(gap) + " (" + fmt(gap / se) + " SE); ";
  }
  o.detail += "needs > 3 SE each, " + std::to_string(best.size()) + " samples";
  return o;
}

// ---- 4 ----------------------------------------------------------------------

Outcome is_oracle() {
  using testing_support::LinearGaussian;
  const LinearGaussian lg = LinearGaussian::random(6, 3, 19);
  Rng data(20);
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const Eigen::VectorXd x = lg.sample_x(data);
    const double truth = lg.log_marginal(x);
    for (std::size_t s : {1u, 10u, 100u}) {
      Rng rng(21 + s);
      const double est = is_log_likelihood([&](std::size_t c, Rng& r) { return lg.weights(x, c, r); }, s, rng);
      worst = std::max(worst, std::abs(est - truth));
    }
  }
  return {worst < 1e-8, "max |IS - closed form| " + fmt(worst) + " over 5 points, S in {1,10,100}; tolerance 1e-8"};
}

// ---- 5 ----------------------------------------------------------------------

Outcome decomposition_identity() {
  double worst = 0.0;
  int models = 0;
  for (int levels : {1, 2}) {
    for (PriorKind prior : {PriorKind::Standard, PriorKind::Mog, PriorKind::Vamp, PriorKind::VampData, PriorKind::WeightedVamp}) {
      for (std::uint64_t seed : {1u, 2u}) {
        const Matrix x = binary_rows(10, 6, 30 + seed);
        Rng init(seed * 7 + static_cast<std::uint64_t>(levels));
        Model m = Model::create(tiny(levels, prior), x, init);
        Rng a(40 + seed), b(40 + seed);
        const double sampled = elbo_decomposition(m, x, 1, a).elbo_sum_sampled;
        NoGradGuard no_grad;
        const Tensor e = elbo_terms(m, Tensor::from_matrix(x), b).elbo();
        const double direct = std::accumulate(e.data().begin(), e.data().end(), 0.0) / static_cast<double>(e.numel());
        worst = std::max(worst, std::abs(sampled - direct));
        ++models;
      }
    }
  }
  return {worst < 1e-9, "max |decomposition - direct ELBO| " + fmt(worst) + " over " + std::to_string(models) +
                            " random models; tolerance 1e-9"};
}

// ---- 6 and 7 ----------------------------------------------------------------

struct PairedRun {
  double test_elbo = 0.0;
  std::size_t top_active = 0;
};

Dataset directional_data(std::string& source) {
  if (const char* dir = std::getenv("VAMPVAE_MNIST_DIR")) {
    const fs::path p(dir);
    if (fs::exists(p / "train-images-idx3-ubyte")) {
      source = "MNIST (first 10,000 training rows, dynamic binarization)";
      const Matrix all = load_idx((p / "train-images-idx3-ubyte").string()).images;
      Dataset ds;
      ds.name = "mnist-10k";
      ds.dim = all.cols;
      ds.binarization = Binarization::Dynamic;
      ds.train = all.slice_rows(0, 7000);
      ds.val = all.slice_rows(7000, 8500);
      ds.test = all.slice_rows(8500, 10000);
      return ds;
    }
  }
  source = "synth_clusters(10000, D=64, k=8, seed 1)";
  return synth_clusters(10000, 64, 8, 1);
}

PairedRun directional_run(const Dataset& ds, PriorKind prior, std::uint64_t seed) {
  ModelSpec s;
  s.levels = 2;
  s.data_dim = ds.dim;
  s.latent1 = 16;
  s.latent2 = 16;
  s.hidden = 100;
  s.prior = prior;
  s.components = 50;
  TrainConfig cfg;
  cfg.max_epochs = 30;
  cfg.warmup_epochs = 10;
  cfg.seed = seed;
  Rng init = Rng(seed).derive(1);
  Model model = Model::create(s, ds.train, init);
  FitResult r = fit(ds.train, ds.val, model, cfg, ds.binarization);
  PairedRun out;
  out.test_elbo = mean_elbo(r.best, ds.test, cfg.val_seed, ds.binarization, cfg.batch_size);
  Matrix test = ds.test;
  if (ds.binarization == Binarization::Dynamic) {
    Rng bin(cfg.val_seed);
    test = dynamic_binarize(test, bin);
  }
  out.top_active = active_units(r.best, test).counts.back();
  return out;
}

// ---- 8 ----------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VAMPVAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "vampvae_acceptance_determinism";
  fs::remove_all(root);
  const std::string data = "--dataset synth --synth-n 800 --synth-dim 16 --synth-k 8 --data-seed 2";
  const std::vector<std::string> commands = {
      "train " + data + " --levels 2 --prior weighted-vamp --k 8 --hidden 16 --latent1 4 --latent2 4 --max-epochs 4 --seed 5",
      "evaluate " + data + " --is-samples 20 --seed 5",
      "generate --seed 5",
      "generate --component 2 --seed 5",
      "reconstruct " + data + " --seed 5",
      "inspect-prior --component 1 --seed 5",
  };
  for (const char* run : {"a", "b"}) {
    for (const auto& c : commands) {
      if (run_cli(c + " --outdir " + (root / run).string()) != 0) {
        return {false, "command failed: " + c};
      }
    }
  }
  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const std::string name = entry.path().filename().string();
    if (name == "timing.jsonl") continue;  // wall-clock seconds
    ++compared;
    if (slurp(entry.path()) != slurp(root / "b" / name)) differing.push_back(name);
  }
  fs::remove_all(root);
  std::string detail = std::to_string(compared) + " artifacts compared byte for byte across two runs";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {differing.empty() && compared >= 10, detail};
}

// ---- 9 ----------------------------------------------------------------------

Outcome formats() {
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  auto throws_format = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const FormatError&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };

  // IDX
  const IdxData idx = load_idx(std::string(VAMPVAE_FIXTURE_DIR) + "/two_images_2x2.idx");
  const std::vector<double> expected{0.0, 1.0, 51.0 / 255.0, 102.0 / 255.0, 1.0 / 255.0, 128.0 / 255.0, 254.0 / 255.0, 17.0 / 255.0};
  check(idx.images.rows == 2 && idx.images.cols == 4 && idx.images.data == expected, "IDX fixture values");
  std::string bad_magic("\x00\x00\x08\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00", 17);
  check(throws_format([&] { parse_idx_images(bad_magic); }), "IDX wrong magic");
  std::string short_payload("\x00\x00\x08\x03\x00\x00\x00\x05\x00\x00\x00\x02\x00\x00\x00\x02\x01\x02\x03\x04", 20);
  check(throws_format([&] { parse_idx_images(short_payload); }), "IDX declared N too large");

  // Raw matrix
  const Matrix raw(3, 2, {0.0, 1.0, 0.25, 1.0 / 3.0, 0.999, 1e-300});
  const fs::path raw_path = fs::temp_directory_path() / "vampvae_acceptance.raw";
  save_raw_matrix(raw, raw_path.string());
  const Matrix raw_back = load_raw_matrix(raw_path.string(), 2);
  fs::remove(raw_path);
  check(raw_back.rows == 3 && std::memcmp(raw_back.data.data(), raw.data.data(), 6 * sizeof(double)) == 0, "raw-matrix round trip");
  check(throws_format([] { parse_raw_matrix("", 2); }), "raw-matrix empty file");

  // Checkpoint
  const Matrix x = binary_rows(4, 6, 50);
  for (PriorKind prior : {PriorKind::Standard, PriorKind::Mog, PriorKind::Vamp, PriorKind::VampData, PriorKind::WeightedVamp}) {
    Rng init(51);
    Model m = Model::create(tiny(2, prior), x, init);
    const std::string bytes = serialize_checkpoint(m);
    check(serialize_checkpoint(deserialize_checkpoint(bytes)) == bytes, "checkpoint round trip " + prior_name(prior));
    check(throws_format([&] { deserialize_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 1)); }), "checkpoint truncation");
    std::string bumped = bytes;
    bumped[4] = 2;
    check(throws_format([&] { deserialize_checkpoint(bumped); }), "checkpoint version bump");
  }

  // PGM
  Matrix tiles(25, 28 * 28);
  const std::string pgm = encode_pgm(render_grid(tiles, 28, 28, 5));
  const std::string header = "P5\n" + std::to_string(5 * 28 + 6) + " " + std::to_string(5 * 28 + 6) + "\n255\n";
  check(pgm.substr(0, header.size()) == header && pgm.size() == header.size() + 146u * 146u, "PGM header");

  std::string detail = "IDX, raw-matrix, checkpoint and PGM checks";
  for (const auto& f : failures) detail += "; failed: " + f;
  return {failures.empty(), detail};
}

template <class F>
bool report(int id, F&& criterion) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = criterion();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << " [" << fmt(secs) << " s]"
            << std::endl;
  return o.pass;
}

}  // namespace

int main() {
  bool all = true;
  all &= report(1, gradient_suite);
  all &= report(2, vamp_coupling);
  all &= report(3, aggregated_posterior);
  all &= report(4, is_oracle);
  all &= report(5, decomposition_identity);

  // Criteria 6 and 7 share six training runs.
  std::string source;
  std::vector<PairedRun> sg(3), vamp(3);
  std::string failure;
  const auto start = std::chrono::steady_clock::now();
  try {
    const Dataset ds = directional_data(source);
    std::vector<std::function<void()>> jobs;
    for (std::size_t seed = 0; seed < 3; ++seed) {
      jobs.emplace_back([&, seed] { sg[seed] = directional_run(ds, PriorKind::Standard, seed); });
      jobs.emplace_back([&, seed] { vamp[seed] = directional_run(ds, PriorKind::Vamp, seed); });
    }
    parallel_for(jobs.size(), std::min<std::size_t>(jobs.size(), worker_count()), [&](std::size_t i) { jobs[i](); });
  } catch (const std::exception& e) {
    failure = e.what();
  }
  const double train_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  all &= report(6, [&] {
    if (!failure.empty()) return Outcome{false, "training failed: " + failure};
    int wins = 0;
    std::string detail = source + ", HVAE K=50 hidden=100 M1=M2=16, 30 epochs, warm-up 10, training " + fmt(train_secs) + " s;";
    for (std::size_t s = 0; s < 3; ++s) {
      wins += vamp[s].test_elbo > sg[s].test_elbo;
      detail += " seed " + std::to_string(s) + ": Vamp " + fmt(vamp[s].test_elbo) + " vs SG " + fmt(sg[s].test_elbo) + ";";
    }
    return Outcome{wins >= 2 && train_secs <= 1800.0, detail + " Vamp ahead in " + std::to_string(wins) + "/3 (needs 2)"};
  });
  all &= report(7, [&] {
    if (!failure.empty()) return Outcome{false, "training failed: " + failure};
    int wins = 0;
    std::string detail = "level-2 active units (threshold 0.01);";
    for (std::size_t s = 0; s < 3; ++s) {
      wins += vamp[s].top_active >= sg[s].top_active;
      detail += " seed " + std::to_string(s) + ": Vamp " + std::to_string(vamp[s].top_active) + " vs SG " +
                std::to_string(sg[s].top_active) + ";";
    }
    return Outcome{wins >= 2, detail + " Vamp >= SG in " + std::to_string(wins) + "/3 (needs 2)"};
  });

  all &= report(8, determinism);
  all &= report(9, formats);
  std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
