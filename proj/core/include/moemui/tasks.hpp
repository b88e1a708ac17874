#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace moemui {

// Toy vocabulary layout shared by every synthetic task:
//   0                          EOS
//   1 .. kSentinelSlots        domain sentinels (domain-tagged-grammar)
//   kFirstContentToken .. V-1  content tokens
inline constexpr int kSentinelSlots = 8;
inline constexpr int kFirstContentToken = 1 + kSentinelSlots;

enum class TaskKind { CopyLast, ModularAdd, DomainGrammar };

std::string_view to_string(TaskKind kind) noexcept;
/// Accepts "copy-last", "modular-add", "domain-tagged-grammar"; throws ValidationError otherwise.
TaskKind parse_task_kind(std::string_view name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::CopyLast;
  std::string domain = "default";
  int samples = 1;
  int seq_len = 2;  // prompt length in tokens
  std::uint64_t seed = 0;
};

struct Example {
  std::vector<int> prompt;
  std::vector<int> target;

  friend bool operator==(const Example&, const Example&) = default;
};

struct TaskDataset {
  std::string name;
  std::vector<Example> examples;
};

/// Sentinel token of a grammar domain (FNV-1a of the label onto the sentinel slots).
int domain_sentinel(std::string_view domain) noexcept;

/// Deterministic dataset for `spec` over a vocabulary of `vocab_size` tokens.
///  copy-last:  random content prompt, target = last prompt token.
///  modular-add: the last two prompt tokens are operands a, b over the
///               m = vocab_size - kFirstContentToken content residues;
///               target = content token (a + b) mod m.
///  domain-tagged-grammar: [sentinel(domain), x1 .. x(seq_len-1)] with x drawn
///               from a domain-specific sub-alphabet; target = content token
///               (index(x_last) + shift(domain)) mod m.
std::vector<Example> generate_task(const SyntheticTaskSpec& spec, int vocab_size);

}  // namespace moemui
