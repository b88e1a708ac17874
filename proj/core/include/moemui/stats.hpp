#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "moemui/model.hpp"

namespace moemui {

/// 2x2 table. Rows: shared / routed; columns: in key-expert intersection / not.
///   [[a, b],
///    [c, d]]
struct ContingencyTable {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::uint64_t c = 0;
  std::uint64_t d = 0;

  std::uint64_t total() const noexcept { return a + b + c + d; }
  /// A zero row or column total leaves a single admissible table.
  bool degenerate() const noexcept { return a + b == 0 || c + d == 0 || a + c == 0 || b + d == 0; }

  friend bool operator==(const ContingencyTable&, const ContingencyTable&) = default;
};

struct FisherResult {
  double p = 1.0;        // two-sided p-value in (0, 1]
  double log10_p = 0.0;  // exact in log space even when p underflows
  bool degenerate = false;
};

/// Relative slack used when comparing point probabilities against the observed table.
inline constexpr double kFisherTieTolerance = 1e-12;

/// Two-sided Fisher exact test: sum of hypergeometric point probabilities of all
/// tables with the observed margins whose probability is <= the observed one
/// (times 1 + kFisherTieTolerance). Degenerate margins give p = 1 with the flag set.
FisherResult fisher_exact_two_sided(const ContingencyTable& t);

/// (a d) / (b c): +inf when only b c is zero, 0 when only a d is zero,
/// nullopt (undefined) when both are zero.
std::optional<double> odds_ratio(const ContingencyTable& t) noexcept;

struct TaskKeySet {
  std::string task;
  std::set<ExpertRef> experts;
};

struct EnrichmentResult {
  ContingencyTable table;
  std::optional<double> odds_ratio;
  FisherResult fisher;
  std::vector<std::string> tasks;
};

/// Tests whether `shared` experts are over-represented in the intersection of
/// the per-task key-expert sets, against the routed experts of `universe`.
EnrichmentResult enrichment(std::span<const TaskKeySet> key_sets, const std::set<ExpertRef>& shared,
                            const std::set<ExpertRef>& universe);

/// Every (layer, expert) of the model.
std::set<ExpertRef> expert_universe(const ModelSpec& spec);
/// Shared experts of every layer.
std::set<ExpertRef> shared_experts(const ModelSpec& spec);

}  // namespace moemui
