// End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
// Exits 0 once every check has run; with --strict, only if all passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xldg/cli.hpp"
#include "xldg/numcore/grad_check.hpp"
#include "xldg/numcore/ops.hpp"

namespace fs = std::filesystem;
using namespace xldg;
using num::Rng;
using num::Tensor;
using num::Var;

namespace {

// Settings shared by the desk-scale runs.
constexpr std::size_t kTaskTokens = 8;
constexpr double kLr = 1e-3;
constexpr double kSigma = 1.0;
constexpr std::size_t kPretrainSteps = 3000;
constexpr double kPretrainLr = 2e-3;
constexpr std::size_t kEpochs = 10;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) {
    const fs::path marker = root_ / ".xldg-acceptance";
    if (fs::exists(root_) && !fs::is_empty(root_) && !fs::exists(marker)) {
      throw std::runtime_error(root_.string() + " is not empty and was not made by this tool");
    }
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(marker) << "\n";
    log_.open(root_ / "cli.log");
  }

  const fs::path& root() const { return root_; }
  fs::path operator/(const std::string& rel) const { return root_ / rel; }

  /// Runs the command-line tool; its output goes to cli.log.
  void xldg(std::vector<std::string> args) {
    log_ << "$ xldg";
    for (const auto& a : args) log_ << " " << a;
    log_ << "\n" << std::flush;
    const int code = cli::run(args, log_, log_);
    log_ << std::flush;
    if (code != 0) throw std::runtime_error("xldg " + args.front() + " exited with " + std::to_string(code));
  }

 private:
  fs::path root_;
  std::ofstream log_;
};

std::vector<std::string> model_flags() {
  return {"--task-tokens", std::to_string(kTaskTokens), "--lr", fmt("%g", kLr), "--sigma", fmt("%g", kSigma),
          "--epochs", std::to_string(kEpochs)};
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

bool bytes_equal(const num::ParamSet& a, const num::ParamSet& b, std::size_t i) {
  return a[i].shape() == b[i].shape() && std::memcmp(a[i].raw(), b[i].raw(), a[i].size() * sizeof(double)) == 0;
}

Tensor random_tensor(num::Shape shape, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (auto& x : t.data()) x = num::standard_normal(rng);
  return t;
}

Var weighted_sum(Var out, std::uint64_t seed) {
  Rng rng(seed);
  if (out.shape().empty()) return num::scale(out, num::standard_normal(rng));
  Tensor w = random_tensor(out.shape(), rng);
  return num::sum(num::mul(out, out.graph().constant(std::move(w))));
}

toy::ToyCorpus corpus_for(const std::string& preset) {
  return toy::generate_corpus(toy::preset_config(preset, 3, 200, 7));
}

model::ModelConfig desk_model(const toy::ToyCorpus& corpus) {
  model::ModelConfig m;
  m.n_task_tokens = kTaskTokens;
  m.vocab_size = corpus.vocab.size();
  m.n_languages = corpus.splits.size();
  return m;
}

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  Rng rng(21);
  const Tensor w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng), other = random_tensor({4, 5}, rng);
  const Tensor gain = random_tensor({5}, rng);
  const std::size_t ids[] = {3, 0, 3, 1};
  const std::size_t targets[] = {2, 4, 0, 1};
  using Op = std::function<Var(Var)>;
  auto c = [](Var x, const Tensor& t) { return x.graph().constant(t); };
  const std::vector<std::pair<Op, num::Shape>> unary = {
      {[&](Var x) { return num::matmul(x, c(x, w)); }, {4, 5}},
      {[&](Var x) { return num::matmul(c(x, other), x); }, {5, 3}},
      {[&](Var x) { return num::linear(x, c(x, w), c(x, b)); }, {4, 5}},
      {[&](Var x) { return num::linear(c(x, other), c(x, w), x); }, {3}},
      {[&](Var x) { return num::add(x, c(x, other)); }, {4, 5}},
      {[&](Var x) { return num::sub(c(x, other), x); }, {4, 5}},
      {[&](Var x) { return num::mul(x, x); }, {4, 5}},
      {[&](Var x) { return num::scale(x, -1.7); }, {4, 5}},
      {[&](Var x) { return num::add_scalar(x, 0.3); }, {4, 5}},
      {[&](Var x) { return num::sum(x); }, {4, 5}},
      {[&](Var x) { return num::mean(x); }, {4, 5}},
      {[&](Var x) { return num::relu(x); }, {4, 5}},
      {[&](Var x) { return num::gelu(x); }, {4, 5}},
      {[&](Var x) { return num::softmax(x); }, {4, 5}},
      {[&](Var x) { return num::log_softmax(x); }, {4, 5}},
      {[&](Var x) { return num::layer_norm(x, c(x, gain), c(x, gain)); }, {4, 5}},
      {[&](Var x) { return num::layer_norm(c(x, other), x, c(x, gain)); }, {5}},
      {[&](Var x) { return num::layer_norm(c(x, other), c(x, gain), x); }, {5}},
      {[&](Var x) { return num::cross_entropy(x, targets, 99); }, {4, 5}},
      {[&](Var x) { return num::gather_rows(x, ids); }, {4, 5}},
      {[&](Var x) { Var p[] = {x, c(x, other)}; return num::concat_rows(p); }, {4, 5}},
      {[&](Var x) { return num::slice_rows(x, 1, 3); }, {4, 5}},
      {[&](Var x) { return num::row(x, 2); }, {4, 5}},
      {[&](Var x) { return num::reshape(x, num::Shape{2, 10}); }, {4, 5}},
      {[&](Var x) { return num::mean_rows(x); }, {4, 5}},
      {[&](Var x) { return num::max_rows(x); }, {4, 5}},
      {[&](Var x) { return num::l2_norm(x); }, {4, 5}},
      {[&](Var x) { Rng r(77); return num::dropout(x, 0.3, r); }, {4, 5}},
  };
  double worst = 0.0;
  std::size_t checks = 0;
  auto record = [&](const num::GradCheckReport& r) {
    worst = std::max(worst, r.max_rel_error);
    ++checks;
  };
  for (const auto& [op, shape] : unary) {
    Tensor p[] = {random_tensor(shape, rng)};
    record(num::grad_check([&](num::Graph&, std::span<const Var> v) { return weighted_sum(op(v[0]), 99); }, p, 1e-5));
  }
  for (bool causal : {false, true}) {
    const std::vector<num::AttentionSegment> segs =
        causal ? std::vector<num::AttentionSegment>{{0, 3, 0, 3}, {3, 4, 3, 4}}
               : std::vector<num::AttentionSegment>{{0, 3, 0, 5}, {3, 4, 5, 2}};
    Tensor p[] = {random_tensor({7, 8}, rng), random_tensor({7, 8}, rng), random_tensor({7, 8}, rng)};
    record(num::grad_check(
        [&](num::Graph&, std::span<const Var> v) {
          return weighted_sum(num::attention(v[0], v[1], v[2], 2, segs, causal), 5);
        },
        p, 1e-5));
  }
  for (auto pooling : {prompt::Pooling::attention, prompt::Pooling::mean, prompt::Pooling::max}) {
    Tensor p[] = {random_tensor({3, 4}, rng), random_tensor({4}, rng)};
    record(num::grad_check(
        [&](num::Graph&, std::span<const Var> v) { return weighted_sum(prompt::pool(v[0], v[1], pooling), 3); }, p,
        1e-5));
  }

  // Full contrastive training step on a small model, every parameter sampled.
  toy::CorpusConfig cc;
  cc.n_concepts = 50;
  cc.train = 70;
  cc.valid = 10;
  cc.test = 10;
  cc.seed = 11;
  const auto corpus = toy::generate_corpus(cc);
  model::ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.n_enc_layers = 1;
  mc.n_dec_layers = 1;
  mc.ffn_dim = 12;
  mc.max_len = 40;
  mc.vocab_size = corpus.vocab.size();
  mc.n_languages = 3;
  mc.n_task_tokens = 3;
  const auto params = model::init_params(mc, 4);
  train::Batch batch;
  batch.paired = true;
  batch.lang_i = 0;
  batch.lang_j = 2;
  for (std::size_t k = 0; k < 2; ++k) {
    batch.group_i.push_back(&corpus.splits[0].train[k]);
    batch.group_j.push_back(&corpus.splits[2].train[k + 5]);
  }
  std::size_t kinks = 0;
  for (auto pooling : {prompt::Pooling::attention, prompt::Pooling::mean, prompt::Pooling::max}) {
    for (double margin : {1.0, 20.0}) {
      train::TrainConfig tc;
      tc.mode = train::Mode::contrastive;
      tc.contrastive.pooling = pooling;
      tc.contrastive.margin = margin;
      num::GradCheckOptions opts;
      opts.names = params.names();
      opts.max_entries_per_param = 8;
      opts.seed = 9;
      double hinge = 0.0;
      auto report = num::grad_check(
          [&](num::Graph& g, std::span<const Var> vars) {
            model::ModelGraph m(g, mc, params, std::vector<Var>(vars.begin(), vars.end()));
            auto bl = train::batch_loss(m, batch, tc);
            hinge = bl.values.d_p - bl.values.d_n + margin;
            return bl.total;
          },
          params.values(), 1e-5, opts);
      if (std::fabs(hinge) < 1e-3) {
        ++kinks;  // finite differences straddle the hinge
        continue;
      }
      record(report);
    }
  }
  return {worst <= 1e-5, "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(checks) +
                             " checks (tolerance 1e-5" + (kinks ? ", " + std::to_string(kinks) + " at kink" : "") +
                             ")"};
}

Verdict loss_oracles() {
  prompt::ContrastiveConfig cfg;  // σ 1, τ 0.16
  const auto hand = prompt::contrastive_loss(Tensor::vector({0, 0}), Tensor::vector({3, 4}), Tensor::vector({1, 0}),
                                             Tensor::vector({0, 1}), cfg);
  bool ok = hand.d_p == 5.0 && hand.d_n == 1.0 && std::fabs(hand.loss - 31.25) <= 1e-12;
  std::string detail = "hand " + fmt("%.10g", hand.loss);

  Rng rng(5);
  std::size_t homog_bad = 0, hinge_bad = 0, active = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + num::uniform_index(rng, 16);
    Tensor v[4];
    for (auto& t : v) t = random_tensor({d}, rng);
    prompt::ContrastiveConfig a;
    a.margin = 3.0 * num::uniform01(rng);
    a.temperature = 1.0;
    prompt::ContrastiveConfig b = a;
    b.temperature = 0.01 + 2.0 * num::uniform01(rng);
    const auto la = prompt::contrastive_loss(v[0], v[1], v[2], v[3], a);
    const auto lb = prompt::contrastive_loss(v[0], v[1], v[2], v[3], b);
    if (std::fabs(lb.loss * b.temperature - la.loss) > 1e-12 * std::max(1.0, la.loss)) ++homog_bad;
    const double gap = la.d_p - la.d_n + a.margin;
    const bool zero = la.loss == 0.0;
    if (la.loss < 0.0 || zero != (gap <= 0.0)) ++hinge_bad;
    active += !zero;
  }
  ok = ok && homog_bad == 0 && hinge_bad == 0;
  detail += ", tau-homogeneity " + std::to_string(1000 - homog_bad) + "/1000, hinge-zero " +
            std::to_string(1000 - hinge_bad) + "/1000 (" + std::to_string(active) + " active)";

  std::size_t endpoint_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double mle = 10.0 * num::uniform01(rng), lc = 50.0 * num::uniform01(rng);
    if (prompt::combined_loss(mle, lc, 0.0) != mle || prompt::combined_loss(mle, lc, 1.0) != lc) ++endpoint_bad;
    num::Graph g;
    const Var m = g.constant(Tensor::scalar(mle)), c = g.constant(Tensor::scalar(lc));
    if (prompt::combined_loss(m, c, 0.0).value().item() != mle ||
        prompt::combined_loss(m, c, 1.0).value().item() != lc) {
      ++endpoint_bad;
    }
  }
  ok = ok && endpoint_bad == 0;
  detail += ", exact endpoints " + std::string(endpoint_bad ? "no" : "yes");
  return {ok, detail};
}

Verdict equivalence() {
  const auto corpus = corpus_for("rich");
  const auto mc = desk_model(corpus);
  const auto init = model::init_params(mc, 1);
  train::TrainConfig base;
  base.learning_rate = kLr;
  base.seed = 1;
  base.sampler = train::SamplerKind::paired;
  base.contrastive.lambda = 0.0;
  auto con = base;
  con.mode = train::Mode::contrastive;
  auto combo = base;
  combo.mode = train::Mode::prompt_combo;
  train::Trainer a(mc, init, con), b(mc, init, combo);
  train::BatchSampler sampler(corpus, train::SamplerKind::paired, base.batch_size, base.seed);
  const auto batches = sampler.epoch();
  std::size_t identical = 0;
  bool moved = false;
  for (std::size_t s = 0; s < 50; ++s) {
    const auto la = a.step(batches[s]);
    const auto lb = b.step(batches[s]);
    bool same = la.l_final == lb.l_final;
    for (std::size_t i = 0; same && i < init.size(); ++i) same = bytes_equal(a.params(), b.params(), i);
    identical += same;
  }
  for (std::size_t i = 0; i < init.size(); ++i) moved = moved || !bytes_equal(a.params(), init, i);
  return {identical == 50 && moved,
          std::to_string(identical) + "/50 steps with bit-identical parameters and losses"};
}

Verdict freeze_contract() {
  const auto corpus = corpus_for("low");
  const auto mc = desk_model(corpus);
  const auto init = model::init_params(mc, 1);
  train::TrainConfig tc;
  tc.mode = train::Mode::contrastive;
  tc.tuning = train::Tuning::prompt_only;
  tc.learning_rate = 1e-2;
  tc.epochs = 30;
  tc.val_examples = 20;
  tc.seed = 1;
  const auto result = train::train(corpus, mc, tc, &init);
  std::size_t frozen = 0, changed_frozen = 0;
  bool prompt_moved = false;
  for (const auto* p : {&result.best, &result.last}) {
    for (std::size_t i = 0; i < init.size(); ++i) {
      if (init.name(i) == model::kTaskPrompt) {
        prompt_moved = prompt_moved || !bytes_equal(*p, init, i);
        continue;
      }
      ++frozen;
      changed_frozen += !bytes_equal(*p, init, i);
    }
  }
  return {changed_frozen == 0 && prompt_moved,
          std::to_string(frozen - changed_frozen) + "/" + std::to_string(frozen) +
              " frozen tensors byte-identical after " + std::to_string(result.log.steps.size()) +
              " steps, task prompt " + (prompt_moved ? "updated" : "unchanged")};
}

// ---------------------------------------------------------------------------
// Main runs: three modes x three seeds on the rich preset.

double best_val_f1(const fs::path& run) {
  const auto rows = read_csv(run / "train_log.csv");
  double best = -1.0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() == 6 && !rows[r][5].empty()) best = std::max(best, std::stod(rows[r][5]));
  }
  return best;
}

struct MainRuns {
  std::map<std::string, std::vector<double>> val_f1;  // by mode, per seed
  std::map<std::string, std::vector<eval::PairResult>> cross;
  double seed1_seconds = 0.0;
};

const std::vector<std::string> kModes{"direct", "prompt-combo", "contrastive"};

MainRuns main_runs(Workspace& ws, const toy::ToyCorpus& corpus) {
  MainRuns out;
  const std::string data = (ws / "data-rich").string();
  for (auto seed : kSeeds) {
    const auto t0 = Clock::now();
    const std::string s = std::to_string(seed);
    for (const auto& mode : kModes) {
      const fs::path dir = ws / ("main/" + mode + "-s" + s);
      std::vector<std::string> args = {"train", "--data", data, "--mode", mode, "--seed", s, "-o", dir.string()};
      if (mode == "direct") {
        args = args + std::vector<std::string>{"--pretrain-steps", std::to_string(kPretrainSteps), "--pretrain-lr",
                                               fmt("%g", kPretrainLr)};
      } else {
        args = args + std::vector<std::string>{"--init", (ws / ("main/direct-s" + s + "/pretrained-s" + s)).string()};
      }
      std::cerr << "  train " << mode << " seed " << seed << "\n";
      ws.xldg(args + model_flags());
      out.val_f1[mode].push_back(best_val_f1(dir));

      const auto card = cli::parse_model_card(slurp(dir / "model.json"));
      const auto params = num::load_params(dir / "model");
      eval::EvalOptions eo;
      eo.generator = mode == "direct" ? eval::Generator::direct : eval::Generator::prompted;
      const auto pairs = eval::cross_pairs(corpus.splits.size());
      out.cross[mode].push_back(eval::cross_summary(eval::evaluate(card.model, params, corpus, pairs, eo)));
    }
    if (seed == kSeeds.front()) out.seed1_seconds = seconds_since(t0);
  }
  return out;
}

std::vector<double> field(const std::vector<eval::PairResult>& rs, double eval::PairResult::*f) {
  std::vector<double> v;
  for (const auto& r : rs) v.push_back(r.*f);
  return v;
}

double med(const MainRuns& m, const std::string& mode, double eval::PairResult::*f) {
  return eval::median(field(m.cross.at(mode), f));
}

Verdict mono_sanity(const MainRuns& m) {
  bool ok = m.seed1_seconds < 30 * 60;
  std::string detail = "min val token-F1:";
  for (const auto& mode : kModes) {
    const double lo = *std::min_element(m.val_f1.at(mode).begin(), m.val_f1.at(mode).end());
    ok = ok && lo >= 0.90;
    detail += " " + mode + " " + fmt("%.3f", lo);
  }
  detail += " (pipeline-mono uses the direct model), seed-1 runtime " + fmt("%.0f", m.seed1_seconds) + " s";
  return {ok, detail};
}

Verdict table3(const MainRuns& m) {
  const double mix_d = med(m, "direct", &eval::PairResult::language_mix_rate);
  const double mix_p = med(m, "prompt-combo", &eval::PairResult::language_mix_rate);
  const double mix_c = med(m, "contrastive", &eval::PairResult::language_mix_rate);
  const double ign_d = med(m, "direct", &eval::PairResult::ignore_task_rate);
  const double ign_p = med(m, "prompt-combo", &eval::PairResult::ignore_task_rate);
  const bool ok = mix_c <= mix_p && ign_p <= ign_d && mix_c <= 0.5 * mix_d;
  return {ok, "median lang-mix direct " + fmt("%.3f", mix_d) + " prompt-combo " + fmt("%.3f", mix_p) +
                  " contrastive " + fmt("%.3f", mix_c) + " (" + eval::relative_change(mix_c, mix_d) +
                  " vs direct); ignore-task direct " + fmt("%.3f", ign_d) + " prompt-combo " + fmt("%.3f", ign_p)};
}

Verdict table2(const MainRuns& m) {
  const double d = med(m, "direct", &eval::PairResult::concept_f1);
  const double p = med(m, "prompt-combo", &eval::PairResult::concept_f1);
  const double c = med(m, "contrastive", &eval::PairResult::concept_f1);
  const bool ok = c >= p && p >= d && c - d >= 0.02;
  return {ok, "median cross concept-F1 contrastive " + fmt("%.4f", c) + " prompt-combo " + fmt("%.4f", p) +
                  " direct " + fmt("%.4f", d) + " (contrastive - direct " + fmt("%+.4f", c - d) + ")"};
}

// ---------------------------------------------------------------------------

std::vector<std::string> ablate_flags(Workspace& ws) {
  return model_flags() + std::vector<std::string>{"--data", (ws / "data-low").string(), "--seeds", "1,2,3",
                                                  "--val-examples", "50", "--limit", "50"};
}

std::string pretrained_stem(Workspace& ws) { return (ws / "main/direct-s{seed}/pretrained-s{seed}").string(); }

Verdict ablation_shape(Workspace& ws, const toy::ToyCorpus& low) {
  const fs::path dir = ws / "ablate";
  ws.xldg(std::vector<std::string>{"ablate", "--init", pretrained_stem(ws), "--endpoints", "true", "-o",
                                   dir.string()} +
          ablate_flags(ws));
  const auto rows = read_csv(dir / "ablation.csv");
  std::map<double, std::vector<double>> f1;          // lambda -> values over poolings and seeds
  std::map<std::string, std::string> zero_row_by_pool;
  std::size_t cells = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r][2] != "concept_f1") continue;
    const double lambda = std::stod(rows[r][1]);
    if (lambda == 0.0) {
      std::string vals;
      for (std::size_t k = 3; k < rows[r].size(); ++k) vals += rows[r][k] + ",";
      zero_row_by_pool[rows[r][0]] = vals;
    }
    if (lambda > 0.0 && lambda < 1.0) ++cells;
    for (std::size_t k = 3; k + 1 < rows[r].size(); ++k) f1[lambda].push_back(std::stod(rows[r][k]));
  }
  bool ok = cells == 15;

  // Endpoints: lambda 0 rows agree across poolings and with prompt-combination
  // training; every step of the lambda 0 / 1 cells logs l_final = l_mle / l_c.
  std::set<std::string> zero_rows;
  for (const auto& [p, v] : zero_row_by_pool) zero_rows.insert(v);
  ok = ok && zero_rows.size() == 1;
  std::size_t endpoint_steps = 0, endpoint_bad = 0;
  for (const auto& entry : fs::directory_iterator(dir / "cells")) {
    const std::string name = entry.path().filename().string();
    const bool zero = name.find("-l0-") != std::string::npos, one = name.find("-l1-") != std::string::npos;
    if (!zero && !one) continue;
    const auto log = read_csv(entry.path() / "train_log.csv");
    for (std::size_t r = 1; r < log.size(); ++r) {
      ++endpoint_steps;
      endpoint_bad += log[r][4] != (zero ? log[r][2] : log[r][3]);
    }
  }
  ok = ok && endpoint_steps > 0 && endpoint_bad == 0;

  const auto mc = desk_model(low);
  const auto init = num::load_params(ws / "main/direct-s1/pretrained-s1");
  cli::RunConfig rc;
  rc.model = mc;
  rc.mode = "prompt-combo";
  rc.lr = kLr;
  rc.sigma = kSigma;
  rc.seed = 1;
  rc.val_examples = 50;
  auto tc = rc.train_config();
  tc.sampler = train::SamplerKind::paired;
  const auto combo = train::train(low, mc, tc, &init);
  eval::EvalOptions eo;
  eo.limit = 50;
  const auto combo_f1 =
      eval::cross_summary(eval::evaluate(mc, combo.best, low, eval::cross_pairs(3), eo)).concept_f1;
  const std::string combo_cell = fmt("%.6f", combo_f1);
  const bool combo_match = !zero_rows.empty() && zero_rows.begin()->rfind(combo_cell + ",", 0) == 0;
  ok = ok && combo_match;

  double best_lambda = 0.0, best = -1.0;
  for (const auto& [lambda, v] : f1) {
    if (lambda <= 0.0 || lambda >= 1.0) continue;
    if (eval::median(v) > best) {
      best = eval::median(v);
      best_lambda = lambda;
    }
  }
  const double at_half = f1.count(0.5) ? eval::median(f1.at(0.5)) : -1.0;
  ok = ok && at_half < best;
  return {ok, std::to_string(cells) + " grid cells; lambda=0 rows " +
                  (zero_rows.size() == 1 && combo_match ? "match prompt-combination" : "DIFFER") +
                  "; endpoint losses exact on " + std::to_string(endpoint_steps - endpoint_bad) + "/" +
                  std::to_string(endpoint_steps) + " steps; median concept-F1 at 0.5 " + fmt("%.4f", at_half) +
                  " vs best lambda " + fmt("%g", best_lambda) + " " + fmt("%.4f", best)};
}

double median_cell(const fs::path& csv, const std::string& pooling, const std::string& lambda) {
  for (const auto& row : read_csv(csv)) {
    if (row.size() > 3 && row[0] == pooling && row[1] == lambda && row[2] == "concept_f1") return std::stod(row.back());
  }
  throw std::runtime_error("no " + pooling + " " + lambda + " row in " + csv.string());
}

Verdict translation_ablation(Workspace& ws) {
  const fs::path dir = ws / "no-pretraining";
  ws.xldg(std::vector<std::string>{"ablate", "--pretrain-steps", "0", "--poolings", "attention", "--lambdas", "0.2",
                                   "-o", dir.string()} +
          ablate_flags(ws));
  const double zero = median_cell(dir / "ablation.csv", "attention", "0.2");
  const double pre = median_cell(ws / "ablate/ablation.csv", "attention", "0.2");
  return {zero < pre, "median cross concept-F1 without pretraining " + fmt("%.4f", zero) + " vs pretrained " +
                          fmt("%.4f", pre) + " (contrastive, attention, lambda 0.2)"};
}

Verdict determinism(Workspace& ws) {
  const std::vector<std::string> tiny{"--d-model", "16", "--heads", "2", "--enc-layers", "1", "--dec-layers", "1",
                                      "--ffn-dim", "32", "--task-tokens", "3", "--epochs", "2", "--val-examples", "10",
                                      "--pretrain-steps", "40", "--lr", "1e-3"};
  for (const char* tag : {"a", "b"}) {
    const std::string root = (ws / (std::string("determinism/") + tag)).string();
    ws.xldg({"gen-data", "--langs", "3", "--concepts", "50", "--preset", "low", "--seed", "3", "-o", root + "/data"});
    for (const char* mode : {"direct", "contrastive"}) {
      ws.xldg(std::vector<std::string>{"train", "--data", root + "/data", "--mode", mode, "-o",
                                       root + "/" + mode} + tiny);
    }
    ws.xldg({"eval", "--run", root + "/direct", "--run", root + "/contrastive", "--limit", "20", "-o",
             root + "/eval"});
    ws.xldg(std::vector<std::string>{"ablate", "--data", root + "/data", "--poolings", "mean", "--lambdas", "0.5",
                                     "--seeds", "1,2", "--limit", "5", "-o", root + "/ablate"} + tiny);
  }
  std::size_t files = 0, equal = 0;
  const fs::path a = ws / "determinism/a", b = ws / "determinism/b";
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    const auto ext = entry.path().extension();
    if (ext != ".csv" && ext != ".jsonl") continue;
    ++files;
    const fs::path other = b / fs::relative(entry.path(), a);
    equal += fs::exists(other) && slurp(entry.path()) == slurp(other);
  }
  return {files > 0 && equal == files,
          std::to_string(equal) + "/" + std::to_string(files) + " CSV/JSONL metric files byte-equal"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the xldg toolkit"};
  std::string workdir = "acceptance-work";
  bool strict = false;
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory (replaced)");
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  app.add_option("--only", only, "run just these criteria (others print SKIP)");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  Workspace ws(fs::absolute(workdir));

  struct Line {
    std::string status, detail;
    double seconds = 0.0;
  };
  std::map<int, Line> lines;
  const std::map<int, std::string> names{{1, "gradient suite"},       {2, "loss oracles"},
                                         {3, "lambda=0 equivalence"},  {4, "freeze contract"},
                                         {5, "mono-lingual sanity"},   {6, "directional table 3"},
                                         {7, "directional table 2"},   {8, "ablation shape"},
                                         {9, "translation ablation"},  {10, "determinism"}};

  auto check = [&](int id, double budget_s, const std::function<Verdict()>& fn) {
    if (!wanted(id)) {
      lines[id] = {"SKIP", "not requested"};
      return;
    }
    std::cerr << "criterion " << id << ": " << names.at(id) << "\n";
    const auto t0 = Clock::now();
    Line line;
    try {
      const Verdict v = fn();
      line.seconds = seconds_since(t0);
      const bool in_time = budget_s <= 0.0 || line.seconds < budget_s;
      line.status = v.pass && in_time ? "PASS" : "FAIL";
      line.detail = v.detail + (in_time ? "" : "; over the " + fmt("%.0f", budget_s) + " s budget");
    } catch (const std::exception& e) {
      line.seconds = seconds_since(t0);
      line.status = "FAIL";
      line.detail = std::string("error: ") + e.what();
    }
    std::cerr << "  " << line.status << " " << line.detail << "\n";
    lines[id] = line;
  };

  check(1, 120, gradient_suite);
  check(2, 60, loss_oracles);
  check(3, 120, equivalence);
  check(4, 600, freeze_contract);
  check(10, 0, [&] { return determinism(ws); });

  const bool need_main = wanted(5) || wanted(6) || wanted(7) || wanted(8) || wanted(9);
  MainRuns main;
  std::string main_error;
  if (need_main) {
    std::cerr << "main runs: 3 modes x 3 seeds on the rich preset\n";
    try {
      ws.xldg({"gen-data", "--langs", "3", "--concepts", "200", "--preset", "rich", "--seed", "7", "-o",
               (ws / "data-rich").string()});
      ws.xldg({"gen-data", "--langs", "3", "--concepts", "200", "--preset", "low", "--seed", "7", "-o",
               (ws / "data-low").string()});
      main = main_runs(ws, corpus_for("rich"));
    } catch (const std::exception& e) {
      main_error = e.what();
    }
  }
  auto with_main = [&](const std::function<Verdict()>& fn) {
    return [&, fn] {
      if (!main_error.empty()) throw std::runtime_error("main runs failed: " + main_error);
      return fn();
    };
  };
  check(5, 0, with_main([&] { return mono_sanity(main); }));
  check(6, 0, with_main([&] { return table3(main); }));
  check(7, 0, with_main([&] { return table2(main); }));
  const auto low = corpus_for("low");
  check(8, 0, with_main([&] { return ablation_shape(ws, low); }));
  check(9, 0, with_main([&] { return translation_ablation(ws); }));

  std::ostringstream report;
  bool all_pass = true;
  for (const auto& [id, line] : lines) {
    char head[96];
    std::snprintf(head, sizeof head, "%s  %2d  %-22s", line.status.c_str(), id, names.at(id).c_str());
    report << head << line.detail << "  [" << fmt("%.1f", line.seconds) << " s]\n";
    all_pass = all_pass && line.status != "FAIL";
  }
  std::cout << report.str() << std::flush;
  std::ofstream(ws / "acceptance.txt") << report.str();
  return strict && !all_pass ? 1 : 0;
}
