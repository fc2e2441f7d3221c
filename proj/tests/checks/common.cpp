#include <algorithm>
#include <cmath>
#include <ostream>

#include "support.hpp"

namespace lbm::checks {

bool Criterion::passed() const {
  return !checks.empty() && failures() == 0;
}

std::size_t Criterion::failures() const {
  return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const Check& c) { return !c.passed; }));
}

void Criterion::add(std::string name, bool ok, std::string detail) {
  checks.push_back({std::move(name), ok, std::move(detail)});
}

std::string report_line(const Criterion& c) {
  std::string line = fmt("%s criterion %d: %s (%zu/%zu checks, %.1fs)", c.passed() ? "PASS" : "FAIL", c.id, c.title.c_str(),
                         c.checks.size() - c.failures(), c.checks.size(), c.seconds);
  if (!c.summary.empty()) line += " | " + c.summary;
  return line;
}

void print_details(std::ostream& out, const Criterion& c, bool failures_only) {
  for (const Check& k : c.checks) {
    if (failures_only && k.passed) continue;
    out << "    " << (k.passed ? "ok   " : "FAIL ") << k.name;
    if (!k.detail.empty()) out << "  [" << k.detail << "]";
    out << '\n';
  }
}

GradReport grad_check(const std::function<TD()>& loss, std::vector<TD> inputs, double rel_tol, Rng& rng,
                      std::size_t max_entries, double h, double abs_tol) {
  for (TD& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss());
  }
  std::vector<std::vector<double>> analytic;
  for (const TD& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }

  // (input, entry) pairs to probe
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  std::size_t total = 0;
  for (const TD& t : inputs) total += t.numel();
  if (max_entries == 0 || max_entries >= total) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t j = 0; j < inputs[i].numel(); ++j) probes.emplace_back(i, j);
  } else {
    for (std::size_t i = 0; i < inputs.size(); ++i) probes.emplace_back(i, rng.index(inputs[i].numel()));
    while (probes.size() < max_entries) {
      std::size_t k = rng.index(total);
      std::size_t i = 0;
      while (k >= inputs[i].numel()) k -= inputs[i++].numel();
      probes.emplace_back(i, k);
    }
  }

  GradReport r;
  for (const auto& [i, j] : probes) {
    auto data = inputs[i].mutable_data();
    const double x0 = data[j];
    data[j] = x0 + h;
    const double fp = loss().item();
    data[j] = x0 - h;
    const double fm = loss().item();
    data[j] = x0;
    const double numeric = (fp - fm) / (2 * h);
    const double a = analytic[i][j];
    const double err = std::abs(a - numeric);
    ++r.entries;
    r.max_abs = std::max(r.max_abs, err);
    if (std::abs(numeric) > abs_tol) ++r.nonzero;
    if (err <= abs_tol) continue;
    const double rel = err / std::max(std::abs(a), std::abs(numeric));
    r.max_rel = std::max(r.max_rel, rel);
    if (rel >= rel_tol) ++r.bad;
  }
  for (TD& t : inputs) t.zero_grad();
  return r;
}

}  // namespace lbm::checks
