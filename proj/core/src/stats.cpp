#include "moemui/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "moemui/errors.hpp"

namespace moemui {

namespace {

// log(k!) for k in [0, n], by summing log(k).
std::vector<double> log_factorials(std::uint64_t n) {
  std::vector<double> lf(static_cast<std::size_t>(n) + 1, 0.0);
  for (std::uint64_t k = 2; k <= n; ++k) lf[k] = lf[k - 1] + std::log(static_cast<double>(k));
  return lf;
}

}  // namespace

FisherResult fisher_exact_two_sided(const ContingencyTable& t) {
  const std::uint64_t n = t.total();
  if (n == 0) throw ValidationError("fisher: table total must be >= 1");
  FisherResult out;
  if (t.degenerate()) {
    out.degenerate = true;
    return out;
  }
  const std::uint64_t row1 = t.a + t.b;
  const std::uint64_t row2 = t.c + t.d;
  const std::uint64_t col1 = t.a + t.c;
  const auto lf = log_factorials(n);
  // log P(a = x) up to the constant log C(n, col1), which cancels in the ratio test
  // but is needed for the final value.
  const double log_norm = lf[n] - lf[col1] - lf[n - col1];
  auto log_point = [&](std::uint64_t x) {
    return lf[row1] - lf[x] - lf[row1 - x] + lf[row2] - lf[col1 - x] - lf[row2 - (col1 - x)] - log_norm;
  };

  const std::uint64_t lo = col1 > row2 ? col1 - row2 : 0;
  const std::uint64_t hi = std::min(row1, col1);
  const double observed = log_point(t.a);
  const double cutoff = observed + std::log1p(kFisherTieTolerance);

  // log-sum-exp over the included tables
  double top = -std::numeric_limits<double>::infinity();
  std::vector<double> included;
  for (std::uint64_t x = lo; x <= hi; ++x) {
    const double lp = log_point(x);
    if (lp <= cutoff) {
      included.push_back(lp);
      top = std::max(top, lp);
    }
  }
  double sum = 0.0;
  for (double lp : included) sum += std::exp(lp - top);
  const double log_p = std::min(0.0, top + std::log(sum));
  out.p = std::max(std::exp(log_p), std::numeric_limits<double>::denorm_min());
  out.log10_p = log_p / std::log(10.0);
  return out;
}

std::optional<double> odds_ratio(const ContingencyTable& t) noexcept {
  const double ad = static_cast<double>(t.a) * static_cast<double>(t.d);
  const double bc = static_cast<double>(t.b) * static_cast<double>(t.c);
  if (bc == 0.0 && ad == 0.0) return std::nullopt;
  if (bc == 0.0) return std::numeric_limits<double>::infinity();
  return ad / bc;
}

EnrichmentResult enrichment(std::span<const TaskKeySet> key_sets, const std::set<ExpertRef>& shared,
                            const std::set<ExpertRef>& universe) {
  if (universe.empty()) throw ValidationError("enrichment: empty expert universe");
  if (key_sets.empty()) throw ValidationError("enrichment: no task key-expert sets");
  for (const auto& s : shared) {
    if (!universe.contains(s)) throw ValidationError("enrichment: shared expert outside the universe");
  }

  std::set<ExpertRef> intersection = key_sets.front().experts;
  for (std::size_t i = 1; i < key_sets.size(); ++i) {
    std::set<ExpertRef> next;
    std::set_intersection(intersection.begin(), intersection.end(), key_sets[i].experts.begin(),
                          key_sets[i].experts.end(), std::inserter(next, next.end()));
    intersection = std::move(next);
  }

  EnrichmentResult r;
  for (const auto& e : universe) {
    const bool in_i = intersection.contains(e);
    if (shared.contains(e)) {
      (in_i ? r.table.a : r.table.b) += 1;
    } else {
      (in_i ? r.table.c : r.table.d) += 1;
    }
  }
  r.odds_ratio = odds_ratio(r.table);
  r.fisher = fisher_exact_two_sided(r.table);
  for (const auto& k : key_sets) r.tasks.push_back(k.task);
  return r;
}

std::set<ExpertRef> expert_universe(const ModelSpec& spec) {
  std::set<ExpertRef> out;
  for (int l = 0; l < spec.n_layers; ++l) {
    for (int e = 0; e < spec.experts_per_layer(); ++e) out.insert({l, e});
  }
  return out;
}

std::set<ExpertRef> shared_experts(const ModelSpec& spec) {
  std::set<ExpertRef> out;
  for (int l = 0; l < spec.n_layers; ++l) {
    for (int e = 0; e < spec.n_shared; ++e) out.insert({l, e});
  }
  return out;
}

}  // namespace moemui
