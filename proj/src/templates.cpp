#include "mia/templates.hpp"

#include <algorithm>
#include <regex>
#include <sstream>

#include "mia/util.hpp"

namespace mia::corpus {

PromptTemplate make_template(std::string id, std::string body) {
  const std::string ph = kPlaceholder;
  auto first = body.find(ph);
  if (first == std::string::npos)
    throw PreconditionError("template '" + id + "' has no " + ph +
                            " placeholder");
  if (body.find(ph, first + ph.size()) != std::string::npos)
    throw PreconditionError("template '" + id + "' has more than one " + ph +
                            " placeholder");
  return PromptTemplate{std::move(id), std::move(body)};
}

std::string render_template_text(const PromptTemplate& tmpl,
                                 std::string_view text) {
  const std::string ph = kPlaceholder;
  auto pos = tmpl.body.find(ph);
  if (pos == std::string::npos)
    throw PreconditionError("template '" + tmpl.id + "' has no placeholder");
  std::string out = tmpl.body;
  out.replace(pos, ph.size(), text);
  return out;
}

std::string render_template(const PromptTemplate& tmpl, const Sample& sample) {
  return render_template_text(tmpl, sample.text);
}

const std::vector<PromptTemplate>& template_registry() {
  static const std::vector<PromptTemplate> registry = {
      make_template("default",
                    "Here is a statement: [SAMPLE] \n Is the above statement "
                    "correct? Answer:"),
      make_template("statement-correct",
                    "Here is a statement: [SAMPLE] Is the above statement "
                    "correct? Answer:"),
      make_template("text-real-bare",
                    "[SAMPLE] Is the above text real? Answer:"),
      make_template("text-real",
                    "Here is a text: [SAMPLE] Is the above text real? Answer:"),
      make_template("text-correct",
                    "Here is a text: [SAMPLE] Is the above text correct? "
                    "Answer:"),
      make_template("statement-true-false",
                    "Consider the following statement: [SAMPLE]  Is the "
                    "statement above true or false? Your answer:"),
      make_template("text-true-false",
                    "Consider the following text: [SAMPLE]  Is the text above "
                    "true or false? Your answer:"),
      make_template("statement-true-false-bare",
                    "[SAMPLE] Is the statement above true or false? Your "
                    "answer:"),
      make_template("yes-no", "[SAMPLE] Is this correct? Indicate 'Yes' or "
                              "'No': "),
      make_template("bare", "[SAMPLE]"),
  };
  return registry;
}

const PromptTemplate& default_template() { return template_registry()[0]; }

const PromptTemplate& bare_template() { return template_registry().back(); }

const PromptTemplate& find_template(const std::string& id) {
  const auto& reg = template_registry();
  auto it = std::find_if(reg.begin(), reg.end(),
                         [&](const PromptTemplate& t) { return t.id == id; });
  if (it == reg.end()) throw ConfigError("unknown template id: " + id);
  return *it;
}

std::string render_synthesis_prompt(const std::vector<Sample>& examples,
                                    int count) {
  if (examples.size() != 5)
    throw PreconditionError("synthesis prompt requires exactly 5 examples, got " +
                            std::to_string(examples.size()));
  if (count <= 0)
    throw PreconditionError("synthesis count must be positive, got " +
                            std::to_string(count));
  std::ostringstream out;
  out << "I am creating a dataset and need to generate data that is similar "
         "but not identical to the following examples. Here are 5 examples "
         "from my dataset:\n";
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out << (i + 1) << ". " << examples[i].text << "\n";
  }
  out << "\n";
  out << "Please generate " << count
      << " new data points that are similar in style and structure to these "
         "examples but are unique in content. Format the responses as a "
         "numbered list, starting from 6 onwards. Each data point should "
         "start on a new line and be prefixed with its corresponding number "
         "followed by a period and a space.\n";
  out << "For example:\n";
  out << "6. [New Data Point 1]\n";
  out << "7. [New Data Point 2]\n";
  out << "...\n";
  return out.str();
}

ParsedSynthesis parse_synthesis_response(const std::string& response) {
  ParsedSynthesis result;
  static const std::regex line_re(R"(^\s*(\d+)\.\s+(.*\S)\s*$)");
  std::istringstream in(response);
  std::string line;
  std::vector<std::pair<long, std::string>> numbered;
  while (std::getline(in, line)) {
    ++result.total_lines;
    std::smatch m;
    if (!std::regex_match(line, m, line_re)) continue;
    ++result.matched_lines;
    numbered.emplace_back(std::stol(m[1].str()), m[2].str());
  }
  std::stable_sort(numbered.begin(), numbered.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [num, text] : numbered) {
    result.samples.push_back(make_sample(text));
  }
  return result;
}

}  // namespace mia::corpus
