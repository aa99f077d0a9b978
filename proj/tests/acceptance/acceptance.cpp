// Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
// any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <modeldiff/diff_llm.hpp>
#include <modeldiff/diff_sae.hpp>
#include <modeldiff/hdbscan.hpp>
#include <modeldiff/judge.hpp>
#include <modeldiff/kl_fork.hpp>
#include <modeldiff/metrics.hpp>
#include <modeldiff/pca.hpp>
#include <modeldiff/runner.hpp>

#include "oracles.hpp"
#include "scenario.hpp"
#include "test_util.hpp"

using namespace modeldiff;
namespace sc = modeldiff::scenario;

namespace {

struct Check {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Check()> run;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<int> verdicts(std::size_t n, std::size_t correct, std::size_t wrong) {
  std::vector<int> v(n, 0);
  std::fill_n(v.begin(), correct, 1);
  std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(correct), wrong, -1);
  return v;
}

Check vfd_conflation() {
  auto h1 = verdicts(100, 10, 0);   // f = 0.1, acc = 1.0
  auto h2 = verdicts(100, 55, 45);  // f = 1.0, acc = 0.55
  const bool ok = frequency(h1) == 0.1 && *accuracy(h1) == 1.0 && frequency(h2) == 1.0 && *accuracy(h2) == 0.55 &&
                  vfd(h1) == 0.1 && vfd(h2) == 0.1;
  return {ok, "vfd(h1)=" + fmt("%.17g", vfd(h1)) + " vfd(h2)=" + fmt("%.17g", vfd(h2))};
}

Check vfd_identity() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> len(1, 200);
  std::uniform_int_distribution<int> val(-1, 1);
  double worst = 0.0;
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> v(static_cast<std::size_t>(len(rng)));
    for (auto& x : v) x = val(rng);
    const double f = frequency(v);
    if (f == 0.0) continue;
    worst = std::max(worst, std::abs(vfd(v) - f * (2.0 * *accuracy(v) - 1.0)));
    ++checked;
  }
  return {worst <= 1e-12, fmt("max |diff| = %.3g", worst) + " over " + std::to_string(checked) + " vectors"};
}

Check judge_debiasing() {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("judge", [](const ChatRequest&) { return testutil::text_completion(R"({"H1": 1})"); });
  auto g = testutil::gateway_for(backend, {"judge"}, 8);
  std::vector<Triplet> ts;
  for (int i = 0; i < 2000; ++i) ts.push_back({"t" + std::to_string(i), "prompt", "ra", "rb", "ma", "mb"});
  auto vs = judge_all(*g, "judge", {{"h", "Does something", Side::A}}, ts, 17, {}, 8);
  auto acc = accuracy(values_for("h", vs));
  const bool ok = vs.size() == 2000 && acc && *acc >= 0.45 && *acc <= 0.55;
  return {ok, fmt("resolved accuracy = %.4f", acc.value_or(-1.0))};
}

Check direction_threshold() {
  auto decide = [](std::size_t a_count) {
    Cluster c;
    std::vector<DifferenceRecord> recs;
    for (std::size_t i = 0; i < 100; ++i) {
      c.member_ids.push_back(i);
      recs.push_back({"t", "", i < a_count ? Side::A : Side::B, ""});
    }
    return assign_direction(c, recs, 0.65).has_value();
  };
  const bool e70 = decide(70);
  const bool e60 = decide(60);
  const bool e50 = decide(50);
  std::string d = std::string("0.70 ") + (e70 ? "emit" : "discard") + ", 0.60 " + (e60 ? "emit" : "discard") +
                  ", 0.50 " + (e50 ? "emit" : "discard");
  return {e70 && !e60 && !e50, d};
}

Check clustering_oracle() {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd c0 = Eigen::VectorXd::Zero(8);
  Eigen::VectorXd c1 = Eigen::VectorXd::Constant(8, 10.0);
  Eigen::MatrixXd pts(203, 8);
  std::vector<int> truth;
  for (int i = 0; i < 200; ++i) {
    const auto& c = i < 100 ? c0 : c1;
    for (int d = 0; d < 8; ++d) pts(i, d) = c[d] + g(rng);
    truth.push_back(i < 100 ? 0 : 1);
  }
  for (int i = 0; i < 3; ++i) {
    for (int d = 0; d < 8; ++d) pts(200 + i, d) = (d == i ? 1.0 : 0.0) * 200.0 + 100.0 * (i + 1);
  }
  auto res = hdbscan(pts, {8, 8, false});
  std::vector<int> blob_labels(res.labels.begin(), res.labels.begin() + 200);
  auto oracle_labels = oracle::nearest_center(pts.topRows(200), {c0, c1});
  const double agree_truth = oracle::label_agreement(blob_labels, truth);
  const double agree_oracle = oracle::label_agreement(blob_labels, oracle_labels);
  bool noise = true;
  for (int i = 200; i < 203; ++i) noise = noise && res.labels[static_cast<std::size_t>(i)] == -1;
  const bool ok = res.n_clusters == 2 && agree_truth >= 0.95 && agree_oracle >= 0.95 && noise;
  return {ok, std::to_string(res.n_clusters) + " clusters, agreement " + fmt("%.3f", agree_truth) + " (oracle " +
                  fmt("%.3f", agree_oracle) + "), outliers noise: " + (noise ? "yes" : "no")};
}

Check pca_oracle() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd basis(3, 20);
  Eigen::MatrixXd scores(200, 3);
  for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < scores.size(); ++i) scores.data()[i] = g(rng);
  Eigen::MatrixXd x = scores * basis;
  x.rowwise() += Eigen::RowVectorXd::LinSpaced(20, -1.0, 1.0);
  auto p3 = reduce_dimensions(x, 3);
  const double ratio = p3.explained_ratio(3);
  auto p5 = reduce_dimensions(x, 5);
  auto [values, vectors] = oracle::jacobi_eigen(oracle::covariance(x));
  const double err = reconstruction_error(x, p5);
  const double want = oracle::tail_variance(values, 5);
  const bool ok = ratio >= 1.0 - 1e-9 && std::abs(err - want) <= 1e-8;
  return {ok, fmt("explained %.12f", ratio) + fmt(", k=5 error %.3g", err) + fmt(" vs oracle %.3g", want)};
}

ActivationDump sparse_from_dense(const oracle::DenseDump& d) {
  ActivationDump out;
  for (std::size_t t = 0; t < d.values.size(); ++t) {
    out.texts.push_back({"t" + std::to_string(t), d.completion_start[t], d.values[t].size()});
    for (std::size_t tok = 0; tok < d.values[t].size(); ++tok) {
      for (std::size_t f = 0; f < d.values[t][tok].size(); ++f) {
        if (d.values[t][tok][f] != 0.0) out.entries.push_back({t, tok, static_cast<FeatureId>(f), d.values[t][tok][f]});
      }
    }
  }
  return out;
}

Check sae_oracle() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto make = [&] {
    oracle::DenseDump d;
    for (int t = 0; t < 50; ++t) {
      const auto n = static_cast<std::size_t>(4 + rng() % 10);
      d.completion_start.push_back(rng() % n);
      d.values.emplace_back(n, std::vector<double>(200, 0.0));
      for (auto& tok : d.values.back()) {
        for (auto& v : tok) {
          if (u(rng) < 0.015) v = u(rng) + 0.01;
        }
      }
    }
    return d;
  };
  int mismatches = 0;
  for (int fixture = 0; fixture < 20; ++fixture) {
    auto da = make();
    auto db = make();
    auto stats = feature_frequency_diff(pool_completion(sparse_from_dense(da)), pool_completion(sparse_from_dense(db)));
    auto want = oracle::dense_diff(da, db, 200);
    if (stats.size() != want.size()) {
      ++mismatches;
      continue;
    }
    for (std::size_t i = 0; i < stats.size(); ++i) {
      if (stats[i].feature_id != want[i].feature || stats[i].diff != want[i].diff) ++mismatches;
    }
    auto top = select_candidates(stats, 10);
    auto top_want = oracle::dense_top_k(want, 10);
    if (top.size() != top_want.size()) ++mismatches;
    for (std::size_t i = 0; i < std::min(top.size(), top_want.size()); ++i) {
      if (top[i].feature_id != top_want[i].feature) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 20 fixtures"};
}

Check pooling_rule() {
  ActivationDump d;
  d.texts = {{"x", 4, 8}};
  d.entries = {{0, 1, 42, 2.0}, {0, 3, 42, 1.5}};
  const bool absent = !pool_completion(d).get(0, 42).has_value();
  d.entries.push_back({0, 6, 42, 0.3});
  auto after = pool_completion(d).get(0, 42);
  const bool present = after && *after == 0.3;
  return {absent && present, std::string("prompt-only: ") + (absent ? "absent" : "present") +
                                 ", with completion token: " + (present ? "present" : "absent")};
}

Check kl_oracle() {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  const std::vector<std::string> vocab{"a", "b", "c", "d", "e", "f", "g"};
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto draw = [&] {
      auto pool = vocab;
      std::shuffle(pool.begin(), pool.end(), rng);
      const auto k = 2 + rng() % 4;
      std::map<std::string, double> p;
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) z += (p[pool[i]] = u(rng));
      for (auto& [t, x] : p) x /= z;
      return p;
    };
    auto to_top = [](const std::map<std::string, double>& p) {
      std::vector<TokenLogprob> out;
      for (const auto& [t, x] : p) out.push_back({t, std::log(x)});
      std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
      return out;
    };
    auto p1 = draw();
    auto p2 = draw();
    auto got = positional_score(to_top(p1), to_top(p2));
    auto want = oracle::kl_direct(p1, p2, kMissingTokenFloor);
    worst = std::max({worst, std::abs(got.kl - want.kl), std::abs(got.score - want.score)});
  }
  auto same = positional_score({{"x", std::log(0.7)}, {"y", std::log(0.3)}}, {{"x", std::log(0.7)}, {"y", std::log(0.3)}});
  auto hand = positional_score({{"a", std::log(0.9)}, {"b", std::log(0.1)}}, {{"a", std::log(0.5)}, {"b", std::log(0.5)}});
  // KL = 0.9 ln 1.8 + 0.1 ln 0.2, H1 = 0.325083, H2 = ln 2.
  const double hand_kl = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  const double hand_score = hand_kl / (-(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) + std::log(2.0));
  const bool ok = worst <= 1e-9 && same.score == 0.0 && std::abs(hand.score - hand_score) <= 1e-12;
  return {ok, fmt("max |diff| = %.3g", worst) + fmt(", identical = %.3g", same.score) +
                  fmt(", hand score = %.6f", hand.score) + fmt(" (oracle %.6f)", hand_score)};
}

Check ci_check() {
  std::vector<double> v{0.0, 1.0};
  auto ci = mean_ci(v, 0.95);
  const double hw = ci.half_width.value_or(-1.0);
  return {std::abs(hw - 6.353) <= 1e-3, fmt("half-width = %.5f", hw)};
}

// ---- end-to-end scenario ------------------------------------------------------------

struct ScenarioRun {
  std::vector<ReportRow> rows;
  RunManifest manifest;
  json lengths;
};

ScenarioRun run_scenario(const sc::Options& opt, const std::filesystem::path& inputs, const std::filesystem::path& run,
                         std::size_t parallelism) {
  auto config = load_config(inputs / "config.ini");
  Runner r(config, run, sc::make_gateway(sc::make_backend(opt), parallelism));
  r.run_all();
  return {r.report_rows(), r.manifest(), json::parse(read_text(run / "response_lengths.json"))};
}

bool contains_ci(std::string s, const std::string& needle) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s.find(needle) != std::string::npos;
}

Check table_frequency() {
  sc::Options opt;
  testutil::TempDir dir;
  sc::write_inputs(dir.path(), opt);
  auto res = run_scenario(opt, dir.path(), dir / "run", 8);
  const ReportRow* table = nullptr;
  for (const auto& r : res.rows) {
    if (r.method == Method::Llm && r.direction == Side::B && contains_ci(r.text, "table")) {
      table = &r;
      break;
    }
  }
  if (!table) return {false, "no table hypothesis in the report"};
  auto heldout = read_jsonl_as<Triplet>(dir / "run/heldout.jsonl");
  std::size_t with_table = 0;
  for (const auto& t : heldout) with_table += sc::has_table(t.response_b) ? 1 : 0;
  const double realized = static_cast<double>(with_table) / static_cast<double>(heldout.size());
  const bool ok = std::abs(table->f - opt.table_rate) <= 0.03;
  return {ok, "\"" + table->text + "\"" + fmt(" held-out f = %.3f", table->f) + fmt(" vs injected %.2f", opt.table_rate) +
                  fmt(" (realized on held-out %.3f)", realized)};
}

Check length_diff() {
  sc::Options opt;
  testutil::TempDir dir;
  sc::write_inputs(dir.path(), opt);
  auto res = run_scenario(opt, dir.path(), dir / "run", 8);
  const ReportRow* shorter = nullptr;
  for (const auto& r : res.rows) {
    if (r.method == Method::Llm && r.direction == Side::A &&
        (contains_ci(r.text, "short") || contains_ci(r.text, "concise") || contains_ci(r.text, "brief"))) {
      shorter = &r;
      break;
    }
  }
  const auto& all = res.lengths.at("all");
  const double a = all.at("mean_tokens_a").get<double>();
  const double b = all.at("mean_tokens_b").get<double>();
  const bool lengths_ok = std::abs(a - 70.0) <= 10.0 && std::abs(b - 500.0) <= 30.0 && b / a > 5.0;
  std::string d = shorter ? "\"" + shorter->text + "\" (A)" : std::string("no shorter-responses hypothesis");
  d += fmt(", mean tokens %.1f", a) + fmt(" vs %.1f", b) + fmt(" (ratio %.2f)", b / a);
  return {shorter != nullptr && shorter->accepted && lengths_ok, d};
}

Check determinism() {
  sc::Options opt;
  testutil::TempDir dir;
  sc::write_inputs(dir.path(), opt);
  auto r1 = run_scenario(opt, dir.path(), dir / "run1", 8);
  auto r2 = run_scenario(opt, dir.path(), dir / "run2", 3);
  std::size_t artifacts = 0;
  std::size_t differing = 0;
  for (const auto& [stage, rec] : r1.manifest.stages) {
    auto it = r2.manifest.stages.find(stage);
    for (const auto& [name, hash] : rec.artifacts) {
      ++artifacts;
      if (it == r2.manifest.stages.end() || it->second.artifacts.count(name) == 0 ||
          it->second.artifacts.at(name) != hash) {
        ++differing;
      }
    }
  }
  const bool ok = artifacts > 0 && differing == 0 && r1.manifest.run_id == r2.manifest.run_id &&
                  r1.manifest.stages.size() == r2.manifest.stages.size();
  return {ok, std::to_string(artifacts) + " artifacts compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "vfd conflation example", 1, vfd_conflation},
      {2, "vfd identity property", 1, vfd_identity},
      {3, "judge debiasing", 5, judge_debiasing},
      {4, "direction threshold", 1, direction_threshold},
      {5, "clustering oracle", 10, clustering_oracle},
      {6, "PCA oracle", 2, pca_oracle},
      {7, "SAE diff oracle", 5, sae_oracle},
      {8, "pooling rule", 1, pooling_rule},
      {9, "KL score oracle", 1, kl_oracle},
      {10, "CI check", 1, ci_check},
      {11, "end-to-end table frequency", 60, table_frequency},
      {12, "end-to-end length diff", 60, length_diff},
      {13, "determinism", 120, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Check o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s  %2d  %-28s %s [%.3fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs,
                in_time ? "" : ", over time limit");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
