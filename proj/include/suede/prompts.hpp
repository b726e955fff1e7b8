#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "suede/errors.hpp"
#include "suede/tensor.hpp"

namespace suede {

// Character-level tokenizer over a fixed 64-symbol vocabulary. Prompts are
// short fixed templates, so a subword vocabulary buys nothing here.
class Tokenizer {
 public:
  static constexpr Index kVocabSize = 64;
  static constexpr Index kUnk = 0;
  static constexpr Index kBos = 1;
  static constexpr Index kEos = 2;

  static Index char_id(char c) {
    unsigned char u = static_cast<unsigned char>(c);
    if (u >= 'A' && u <= 'Z') u = static_cast<unsigned char>(u - 'A' + 'a');
    if (u >= 'a' && u <= 'z') return 3 + (u - 'a');
    if (u == ' ') return 29;
    if (u >= '0' && u <= '9') return 30 + (u - '0');
    if (u == '-') return 40;
    if (u == '.') return 41;
    if (u == ',') return 42;
    if (u == '\'') return 43;
    return kUnk;
  }

  // BOS + characters + EOS, truncated to max_len tokens total.
  static std::vector<Index> encode(const std::string& text, Index max_len) {
    require(max_len >= 2, ErrorCode::kConfig, "max_len must be at least 2");
    std::vector<Index> ids;
    ids.reserve(static_cast<std::size_t>(max_len));
    ids.push_back(kBos);
    for (char c : text) {
      if (static_cast<Index>(ids.size()) >= max_len - 1) break;
      ids.push_back(char_id(c));
    }
    ids.push_back(kEos);
    return ids;
  }
};

// Prompt bank: the text side of the detector. The file format is one prompt
// per line, `<tag>: <text>`, with tags real, fake, fake-physical and
// fake-digital; the last two are fake-class prompts that prompt pairing may
// prefer for the matching attack family.
struct PromptBank {
  std::vector<std::string> real;
  std::vector<std::string> fake;           // generic fake prompts
  std::vector<std::string> fake_physical;  // family-specific, optional
  std::vector<std::string> fake_digital;

  static PromptBank defaults() {
    PromptBank b;
    b.real = {"a photo of a real face"};
    b.fake = {"a photo of a fake face"};
    b.fake_physical = {"a printed photo attack of a face"};
    b.fake_digital = {"a digitally manipulated face"};
    return b;
  }

  // All prompts belonging to the fake class, for classification.
  std::vector<std::string> fake_class() const {
    std::vector<std::string> all = fake;
    all.insert(all.end(), fake_physical.begin(), fake_physical.end());
    all.insert(all.end(), fake_digital.begin(), fake_digital.end());
    return all;
  }

  void validate() const {
    require(!real.empty(), ErrorCode::kConfig,
            "prompt bank has no real-class prompt");
    require(!fake_class().empty(), ErrorCode::kConfig,
            "prompt bank has no fake-class prompt");
  }

  static PromptBank load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::kIo, "cannot open prompt bank " + path);
    PromptBank b;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t start = line.find_first_not_of(" \t");
      if (start == std::string::npos || line[start] == '#') continue;
      std::size_t colon = line.find(':', start);
      require(colon != std::string::npos, ErrorCode::kConfig,
              path + ":" + std::to_string(lineno) + ": missing prompt tag");
      std::string tag = line.substr(start, colon - start);
      std::string text = line.substr(colon + 1);
      std::size_t t0 = text.find_first_not_of(" \t");
      text = t0 == std::string::npos ? "" : text.substr(t0);
      if (tag == "real") b.real.push_back(text);
      else if (tag == "fake") b.fake.push_back(text);
      else if (tag == "fake-physical") b.fake_physical.push_back(text);
      else if (tag == "fake-digital") b.fake_digital.push_back(text);
      else
        fail(ErrorCode::kConfig, path + ":" + std::to_string(lineno) +
                                     ": unknown prompt tag '" + tag + "'");
    }
    b.validate();
    return b;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), ErrorCode::kIo, "cannot write prompt bank " + path);
    for (const auto& p : real) out << "real: " << p << "\n";
    for (const auto& p : fake) out << "fake: " << p << "\n";
    for (const auto& p : fake_physical) out << "fake-physical: " << p << "\n";
    for (const auto& p : fake_digital) out << "fake-digital: " << p << "\n";
  }
};

}  // namespace suede
