// Property and oracle suites shared by the acceptance runner and `lbm selftest`.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "lbm/tensor.hpp"
#include "lbm/rng.hpp"

namespace lbm::checks {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id = 0;
  std::string title;
  std::vector<Check> checks;
  double seconds = 0;
  std::string summary;  // headline numbers for the report line

  bool passed() const;
  void add(std::string name, bool ok, std::string detail = {});
  std::size_t failures() const;
};

// Finite-difference harness: analytic gradients of `loss` w.r.t. `inputs`
// against central differences. max_entries > 0 checks a random subset that
// still touches every input at least once.
struct GradReport {
  double max_rel = 0;
  double max_abs = 0;
  std::size_t entries = 0;
  std::size_t bad = 0;
  std::size_t nonzero = 0;  // probes with |numeric| > abs_tol
  bool ok() const { return bad == 0; }
};
GradReport grad_check(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs, double rel_tol,
                      Rng& rng, std::size_t max_entries = 0, double h = 1e-5, double abs_tol = 1e-7);

Criterion gradient_suite(std::uint64_t seed = 1);
Criterion oracle_suite(std::uint64_t seed = 2);
Criterion online_contract(std::uint64_t seed = 3, std::size_t clips = 10);
Criterion loss_semantics(std::uint64_t seed = 4);
Criterion metric_suite(std::uint64_t seed = 5);

struct LearnOptions {
  std::uint64_t seed = 0;
  std::size_t heldout = 20;
  std::size_t threads = 0;
  std::size_t max_steps = 0;  // 0: the full default schedule
  std::ostream* log = nullptr;  // per-step loss log
  std::ostream* progress = nullptr;
};
Criterion learnability(const LearnOptions& options);

Criterion schedule_conformance(std::uint64_t seed = 7);
Criterion association_suite(std::uint64_t seed = 8);
Criterion reproducibility(std::uint64_t seed = 9);

struct RunOptions {
  std::vector<int> only;       // empty: every criterion
  std::vector<int> known_red;  // printed, but excluded from the exit status
  std::uint64_t seed = 0;      // criterion k uses seed + k; learnability trains with seed
  LearnOptions learn;
  bool verbose = false;
};
/// Runs the selected criteria in order, printing one report line each and a
/// summary. Returns 0 iff no criterion outside known_red failed.
int run_criteria(const RunOptions& options, std::ostream& out);

std::string report_line(const Criterion& c);
void print_details(std::ostream& out, const Criterion& c, bool failures_only);

}  // namespace lbm::checks
