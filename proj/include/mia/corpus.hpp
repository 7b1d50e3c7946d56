#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mia::corpus {

// One text with an optional membership label (1 = member, 0 = non-member).
// `text` is stored verbatim; construction rejects texts that are empty
// after whitespace trimming.
struct Sample {
  std::string id;
  std::string text;
  std::optional<int> label;
};

// Validates invariants. An empty id defaults to a content hash of the
// text so downstream splits are reproducible across runs.
Sample make_sample(std::string text, std::optional<int> label = std::nullopt,
                   std::string id = "");

struct LabeledDataset {
  std::string name;
  std::vector<Sample> samples;
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return samples.size(); }
};

// Recomputes metadata (member/non-member counts, average token count) and
// checks id uniqueness.
void finalize_dataset(LabeledDataset& ds);

// JSONL ingestion: one object per line with required `text`, optional
// `label` (0/1) and `id`. Whitespace-only lines are skipped. Parse
// failures carry the 1-based line number.
LabeledDataset load_jsonl(const std::filesystem::path& path);
void save_jsonl(const LabeledDataset& ds, const std::filesystem::path& path);

// Labels a uniformly random floor(n/2)-subset as members and the rest as
// non-members. Requires a fully unlabeled dataset. The id -> label
// assignment depends only on the sample ids and the seed, not on sample
// order.
LabeledDataset split_half(const LabeledDataset& ds, std::uint64_t seed);

// Label-stratified split into (validation, test) with |val| close to
// n * r1 / (r1 + r2); per-class allotments by largest remainder. Requires
// at least 2 samples per class, all labeled.
std::pair<LabeledDataset, LabeledDataset> split_val_test(
    const LabeledDataset& ds, int ratio_val, int ratio_test,
    std::uint64_t seed);

}  // namespace mia::corpus
