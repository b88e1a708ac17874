#include "moemui/tasks.hpp"

#include <algorithm>
#include <numeric>

#include "moemui/errors.hpp"
#include "moemui/rng.hpp"

namespace moemui {

namespace {

std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string_view to_string(TaskKind kind) noexcept {
  switch (kind) {
    case TaskKind::CopyLast:
      return "copy-last";
    case TaskKind::ModularAdd:
      return "modular-add";
    case TaskKind::DomainGrammar:
      return "domain-tagged-grammar";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy-last") return TaskKind::CopyLast;
  if (name == "modular-add") return TaskKind::ModularAdd;
  if (name == "domain-tagged-grammar") return TaskKind::DomainGrammar;
  throw ValidationError("unknown task kind '" + std::string(name) + "'");
}

int domain_sentinel(std::string_view domain) noexcept {
  return 1 + static_cast<int>(fnv1a(domain) % kSentinelSlots);
}

std::vector<Example> generate_task(const SyntheticTaskSpec& spec, int vocab_size) {
  if (spec.samples < 1) throw ValidationError("task: sample count must be >= 1");
  if (spec.seq_len < 2) throw ValidationError("task: sequence length must be >= 2");
  if (spec.domain.empty()) throw ValidationError("task: domain label must be non-empty");
  const int m = vocab_size - kFirstContentToken;
  if (m < 2) {
    throw ValidationError("task: vocabulary of " + std::to_string(vocab_size) + " leaves fewer than 2 content tokens");
  }

  Rng rng(mix_seed(spec.seed, fnv1a(spec.domain) ^ static_cast<std::uint64_t>(spec.kind)));
  auto content = [&](std::uint64_t idx) { return kFirstContentToken + static_cast<int>(idx); };
  auto random_content = [&] { return content(uniform_below(rng, static_cast<std::uint64_t>(m))); };

  // Grammar domains: sub-alphabet and target shift depend only on the label.
  std::vector<int> alphabet;
  int shift = 0;
  if (spec.kind == TaskKind::DomainGrammar) {
    Rng domain_rng(fnv1a(spec.domain));
    std::vector<int> all(static_cast<std::size_t>(m));
    std::iota(all.begin(), all.end(), 0);
    shuffle(all.begin(), all.end(), domain_rng);
    alphabet.assign(all.begin(), all.begin() + std::max(2, m / 2));
    std::sort(alphabet.begin(), alphabet.end());
    shift = 1 + static_cast<int>(uniform_below(domain_rng, static_cast<std::uint64_t>(m - 1)));
  }

  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(spec.samples));
  for (int s = 0; s < spec.samples; ++s) {
    Example ex;
    ex.prompt.resize(static_cast<std::size_t>(spec.seq_len));
    switch (spec.kind) {
      case TaskKind::CopyLast:
        for (auto& t : ex.prompt) t = random_content();
        ex.target = {ex.prompt.back()};
        break;
      case TaskKind::ModularAdd: {
        for (auto& t : ex.prompt) t = random_content();
        const int a = ex.prompt[ex.prompt.size() - 2] - kFirstContentToken;
        const int b = ex.prompt.back() - kFirstContentToken;
        ex.target = {content(static_cast<std::uint64_t>((a + b) % m))};
        break;
      }
      case TaskKind::DomainGrammar: {
        ex.prompt[0] = domain_sentinel(spec.domain);
        for (std::size_t i = 1; i < ex.prompt.size(); ++i) {
          ex.prompt[i] = content(static_cast<std::uint64_t>(alphabet[uniform_below(rng, alphabet.size())]));
        }
        const int last = ex.prompt.back() - kFirstContentToken;
        ex.target = {content(static_cast<std::uint64_t>((last + shift) % m))};
        break;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace moemui
