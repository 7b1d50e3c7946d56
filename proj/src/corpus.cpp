#include "mia/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mia/util.hpp"

namespace mia::corpus {

using nlohmann::json;

Sample make_sample(std::string text, std::optional<int> label,
                   std::string id) {
  if (trim_copy(text).empty())
    throw PreconditionError("sample text is empty after trimming");
  if (label.has_value() && *label != 0 && *label != 1)
    throw SchemaError("sample label must be 0 or 1");
  if (id.empty()) id = hex64(fnv1a64(text));
  return Sample{std::move(id), std::move(text), label};
}

void finalize_dataset(LabeledDataset& ds) {
  std::set<std::string> seen;
  std::size_t members = 0, nonmembers = 0, bytes = 0;
  for (const auto& s : ds.samples) {
    if (!seen.insert(s.id).second)
      throw SchemaError("duplicate sample id: " + s.id);
    if (s.label.has_value()) (*s.label == 1 ? members : nonmembers)++;
    bytes += s.text.size();
  }
  ds.metadata["member_count"] = std::to_string(members);
  ds.metadata["nonmember_count"] = std::to_string(nonmembers);
  // Byte-level tokens: BOS + bytes + EOS.
  double avg = ds.samples.empty()
                   ? 0.0
                   : (static_cast<double>(bytes) / ds.samples.size()) + 2.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", avg);
  ds.metadata["avg_token_count"] = buf;
}

LabeledDataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset file: " + path.string());

  LabeledDataset ds;
  ds.name = path.stem().string();

  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> used_ids;
  std::size_t dup_counter = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim_copy(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": malformed JSON: " + e.what());
    }
    if (!obj.is_object())
      throw SchemaError("line " + std::to_string(line_no) +
                        ": expected a JSON object");
    if (!obj.contains("text") || !obj["text"].is_string())
      throw SchemaError("line " + std::to_string(line_no) +
                        ": missing string field 'text'");
    std::optional<int> label;
    if (obj.contains("label") && !obj["label"].is_null()) {
      if (!obj["label"].is_number_integer())
        throw SchemaError("line " + std::to_string(line_no) +
                          ": label must be integer 0 or 1");
      int l = obj["label"].get<int>();
      if (l != 0 && l != 1)
        throw SchemaError("line " + std::to_string(line_no) +
                          ": label must be 0 or 1, got " + std::to_string(l));
      label = l;
    }
    std::string id;
    if (obj.contains("id")) {
      if (!obj["id"].is_string())
        throw SchemaError("line " + std::to_string(line_no) +
                          ": id must be a string");
      id = obj["id"].get<std::string>();
    }
    Sample s;
    try {
      s = make_sample(obj["text"].get<std::string>(), label, id);
    } catch (const Error& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
    // Repeated texts without explicit ids would collide on the content
    // hash; disambiguate by occurrence so file order stays reproducible.
    if (id.empty()) {
      while (used_ids.count(s.id)) {
        s.id = hex64(fnv1a64(s.text)) + "-" + std::to_string(++dup_counter);
      }
    }
    used_ids.insert(s.id);
    ds.samples.push_back(std::move(s));
  }
  finalize_dataset(ds);
  return ds;
}

void save_jsonl(const LabeledDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write dataset file: " + path.string());
  for (const auto& s : ds.samples) {
    json obj;
    obj["id"] = s.id;
    obj["text"] = s.text;
    if (s.label.has_value()) obj["label"] = *s.label;
    out << obj.dump() << "\n";
  }
  if (!out) throw ConfigError("write failed: " + path.string());
}

LabeledDataset split_half(const LabeledDataset& ds, std::uint64_t seed) {
  for (const auto& s : ds.samples) {
    if (s.label.has_value())
      throw PreconditionError("split_half requires unlabeled samples; '" +
                              s.id + "' already has a label");
  }
  // Shuffle over id-sorted order so the assignment depends only on
  // (ids, seed), not on the order samples arrived in.
  std::vector<std::string> ids;
  ids.reserve(ds.samples.size());
  for (const auto& s : ds.samples) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(ids);

  const std::size_t member_count = ds.samples.size() / 2;
  std::set<std::string> members(ids.begin(), ids.begin() + member_count);

  LabeledDataset out = ds;
  for (auto& s : out.samples) s.label = members.count(s.id) ? 1 : 0;
  finalize_dataset(out);
  return out;
}

std::pair<LabeledDataset, LabeledDataset> split_val_test(
    const LabeledDataset& ds, int ratio_val, int ratio_test,
    std::uint64_t seed) {
  if (ds.samples.empty())
    throw PreconditionError("split_val_test: dataset is empty");
  if (ratio_val <= 0 || ratio_test <= 0)
    throw PreconditionError("split_val_test: ratio components must be positive");

  std::vector<std::string> class_ids[2];
  for (const auto& s : ds.samples) {
    if (!s.label.has_value())
      throw PreconditionError("split_val_test: sample '" + s.id +
                              "' is unlabeled");
    class_ids[*s.label].push_back(s.id);
  }
  for (int c = 0; c < 2; ++c) {
    if (class_ids[c].size() < 2)
      throw PreconditionError(
          "split_val_test: label class " + std::to_string(c) + " has " +
          std::to_string(class_ids[c].size()) + " samples; need at least 2");
  }

  const double frac =
      static_cast<double>(ratio_val) / (ratio_val + ratio_test);
  const auto n = static_cast<double>(ds.samples.size());
  auto val_total = static_cast<std::size_t>(std::llround(n * frac));

  // Largest-remainder apportionment across the two classes.
  std::size_t take[2];
  double quota[2], rem[2];
  std::size_t floored = 0;
  for (int c = 0; c < 2; ++c) {
    quota[c] = static_cast<double>(class_ids[c].size()) * frac;
    take[c] = static_cast<std::size_t>(std::floor(quota[c]));
    rem[c] = quota[c] - static_cast<double>(take[c]);
    floored += take[c];
  }
  std::size_t leftover = val_total > floored ? val_total - floored : 0;
  // Ties broken toward class 0 for determinism.
  if (leftover >= 2) {
    take[0]++;
    take[1]++;
  } else if (leftover == 1) {
    (rem[1] > rem[0] ? take[1] : take[0])++;
  }

  std::set<std::string> val_ids;
  for (int c = 0; c < 2; ++c) {
    auto ids = class_ids[c];
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "class" + std::to_string(c)));
    rng.shuffle(ids);
    take[c] = std::min(take[c], ids.size());
    val_ids.insert(ids.begin(), ids.begin() + take[c]);
  }

  LabeledDataset val, test;
  val.name = ds.name + "-val";
  test.name = ds.name + "-test";
  for (const auto& s : ds.samples) {
    (val_ids.count(s.id) ? val : test).samples.push_back(s);
  }
  finalize_dataset(val);
  finalize_dataset(test);
  return {std::move(val), std::move(test)};
}

}  // namespace mia::corpus
