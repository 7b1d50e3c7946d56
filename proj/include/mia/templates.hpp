#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mia/corpus.hpp"

namespace mia::corpus {

// Prompt template with exactly one [SAMPLE] placeholder.
struct PromptTemplate {
  std::string id;
  std::string body;
};

inline constexpr const char* kPlaceholder = "[SAMPLE]";

// Validates the single-placeholder invariant.
PromptTemplate make_template(std::string id, std::string body);

// Replaces the placeholder with the text verbatim.
std::string render_template_text(const PromptTemplate& tmpl,
                                 std::string_view text);
std::string render_template(const PromptTemplate& tmpl, const Sample& sample);

// Built-in registry: the default statement template (with embedded
// newline), its single-line variant, six more question templates, a
// yes/no template and the bare "[SAMPLE]" baseline — ten in total.
const std::vector<PromptTemplate>& template_registry();
const PromptTemplate& default_template();
const PromptTemplate& bare_template();
const PromptTemplate& find_template(const std::string& id);

// Few-shot data-synthesis prompt: exactly five example texts, asking for
// `count` new numbered data points continuing from 6.
std::string render_synthesis_prompt(const std::vector<Sample>& examples,
                                    int count);

// Extracts "<number>. <text>" lines from a completion, ordered by number.
struct ParsedSynthesis {
  std::vector<Sample> samples;
  std::size_t total_lines = 0;
  std::size_t matched_lines = 0;
};
ParsedSynthesis parse_synthesis_response(const std::string& response);

}  // namespace mia::corpus
