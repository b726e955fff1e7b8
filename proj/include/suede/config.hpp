#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "suede/data.hpp"
#include "suede/errors.hpp"
#include "suede/tensor.hpp"

namespace suede {

enum class ModelKind { kDualEncoder, kVitClassifier };

inline const char* model_kind_name(ModelKind k) {
  return k == ModelKind::kDualEncoder ? "dual" : "vit_classifier";
}

enum class ThresholdRule { kFixed, kDevEer };

// Flat key=value experiment configuration. Unknown keys are rejected.
struct ExperimentConfig {
  // model dims
  Index image_size = 32, channels = 1, patch = 8;
  Index d_model = 64, n_heads = 4;
  Index vision_blocks = 6, text_blocks = 2;
  Index ffn_hidden = 128, d_embed = 32, max_len = 32;
  ModelKind model_kind = ModelKind::kDualEncoder;

  // SUE placement and expert settings
  std::vector<Index> sue_layers_vision = {0, 1, 2, 3, 4, 5};
  std::vector<Index> sue_layers_text = {};
  Index n_experts = 4, top_k = 2;
  bool shared_expert = true;

  // loss (alpha, beta, gamma of the combined objective)
  double alpha = 1.0, beta = 1e-3, gamma = 1e-2;
  bool symmetric_ce = false;

  // optimizer; lr 1e-3 suits training from scratch at this scale (the source
  // setting 1e-6 presumes a pretrained full-size backbone)
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  // schedule
  Index epochs = 8, warmup_epochs = 2, batch_size = 32;

  // diagnostics knobs for equivalence experiments
  bool freeze_gates = false, freeze_routed = false, zero_routed_init = false;

  // data
  std::string protocol = "p1";
  Index train_count = 1200, dev_count = 300, test_count = 600;
  double bonafide_fraction = 0.5;
  Index subjects_train = 60, subjects_dev = 15, subjects_test = 30;
  std::string held_out;  // e.g. "1,2"; empty = protocol default

  // evaluation
  std::string threshold_rule = "fixed";  // fixed | dev_eer
  double fixed_threshold = 0.5;

  // run
  std::uint64_t seed = 1;
  Index ablation_seeds = 5;
  std::string prompt_bank_path;  // empty = built-in default bank
  std::string out_dir = "out";

  Protocol parsed_protocol() const { return parse_protocol(protocol); }

  std::set<int> parsed_held_out() const {
    if (held_out.empty()) return default_held_out(parsed_protocol());
    std::set<int> out;
    std::stringstream ss(held_out);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      out.insert(std::stoi(tok));
    }
    return out;
  }

  ThresholdRule parsed_threshold_rule() const {
    if (threshold_rule == "fixed") return ThresholdRule::kFixed;
    if (threshold_rule == "dev_eer") return ThresholdRule::kDevEer;
    fail(ErrorCode::kConfig, "unknown threshold_rule '" + threshold_rule + "'");
  }

  DataCounts data_counts() const {
    DataCounts c;
    c.train = train_count;
    c.dev = dev_count;
    c.test = test_count;
    c.bonafide_fraction = bonafide_fraction;
    c.subjects_train = subjects_train;
    c.subjects_dev = subjects_dev;
    c.subjects_test = subjects_test;
    return c;
  }

  void validate() const {
    require(image_size % patch == 0, ErrorCode::kConfig,
            "image_size must be divisible by patch");
    require(d_model % n_heads == 0, ErrorCode::kConfig,
            "d_model must be divisible by n_heads");
    require(top_k >= 1 && top_k <= n_experts, ErrorCode::kConfig,
            "top_k must satisfy 1 <= k <= n_experts");
    require(alpha >= 0 && beta >= 0 && gamma >= 0, ErrorCode::kConfig,
            "loss coefficients must be nonnegative");
    require(batch_size >= 2, ErrorCode::kConfig, "batch_size must be >= 2");
    for (Index i : sue_layers_vision)
      require(i >= 0 && i < vision_blocks, ErrorCode::kConfig,
              "sue_layers_vision index out of range");
    for (Index i : sue_layers_text)
      require(i >= 0 && i < text_blocks, ErrorCode::kConfig,
              "sue_layers_text index out of range");
    parsed_protocol();
    parsed_threshold_rule();
  }
};

namespace cfg_detail {

inline std::vector<Index> parse_layer_list(const std::string& text) {
  std::vector<Index> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t dash = tok.find('-');
    if (dash != std::string::npos && dash > 0) {
      Index lo = std::stoll(tok.substr(0, dash));
      Index hi = std::stoll(tok.substr(dash + 1));
      require(lo <= hi, ErrorCode::kConfig, "bad layer range '" + tok + "'");
      for (Index i = lo; i <= hi; ++i) out.push_back(i);
    } else {
      out.push_back(std::stoll(tok));
    }
  }
  return out;
}

inline std::string layer_list_str(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out += (i ? "," : "") + std::to_string(v[i]);
  return out.empty() ? "none" : out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::kConfig, "bad boolean for " + key + ": '" + v + "'");
}

}  // namespace cfg_detail

// Applies one key=value pair; throws a config error on unknown keys or
// malformed values.
inline void config_set(ExperimentConfig& c, const std::string& key,
                       const std::string& value) {
  try {
    if (key == "image_size") c.image_size = std::stoll(value);
    else if (key == "channels") c.channels = std::stoll(value);
    else if (key == "patch") c.patch = std::stoll(value);
    else if (key == "d_model") c.d_model = std::stoll(value);
    else if (key == "n_heads") c.n_heads = std::stoll(value);
    else if (key == "vision_blocks") c.vision_blocks = std::stoll(value);
    else if (key == "text_blocks") c.text_blocks = std::stoll(value);
    else if (key == "ffn_hidden") c.ffn_hidden = std::stoll(value);
    else if (key == "d_embed") c.d_embed = std::stoll(value);
    else if (key == "max_len") c.max_len = std::stoll(value);
    else if (key == "model_kind") {
      if (value == "dual") c.model_kind = ModelKind::kDualEncoder;
      else if (value == "vit_classifier") c.model_kind = ModelKind::kVitClassifier;
      else fail(ErrorCode::kConfig, "unknown model_kind '" + value + "'");
    } else if (key == "sue_layers_vision")
      c.sue_layers_vision = cfg_detail::parse_layer_list(value);
    else if (key == "sue_layers_text")
      c.sue_layers_text = cfg_detail::parse_layer_list(value);
    else if (key == "n_experts") c.n_experts = std::stoll(value);
    else if (key == "top_k") c.top_k = std::stoll(value);
    else if (key == "shared_expert")
      c.shared_expert = cfg_detail::parse_bool(value, key);
    else if (key == "alpha") c.alpha = std::stod(value);
    else if (key == "beta") c.beta = std::stod(value);
    else if (key == "gamma") c.gamma = std::stod(value);
    else if (key == "symmetric_ce")
      c.symmetric_ce = cfg_detail::parse_bool(value, key);
    else if (key == "lr") c.lr = std::stod(value);
    else if (key == "beta1") c.beta1 = std::stod(value);
    else if (key == "beta2") c.beta2 = std::stod(value);
    else if (key == "adam_eps") c.adam_eps = std::stod(value);
    else if (key == "epochs") c.epochs = std::stoll(value);
    else if (key == "warmup_epochs") c.warmup_epochs = std::stoll(value);
    else if (key == "batch_size") c.batch_size = std::stoll(value);
    else if (key == "freeze_gates")
      c.freeze_gates = cfg_detail::parse_bool(value, key);
    else if (key == "freeze_routed")
      c.freeze_routed = cfg_detail::parse_bool(value, key);
    else if (key == "zero_routed_init")
      c.zero_routed_init = cfg_detail::parse_bool(value, key);
    else if (key == "protocol") c.protocol = value;
    else if (key == "train_count") c.train_count = std::stoll(value);
    else if (key == "dev_count") c.dev_count = std::stoll(value);
    else if (key == "test_count") c.test_count = std::stoll(value);
    else if (key == "bonafide_fraction") c.bonafide_fraction = std::stod(value);
    else if (key == "subjects_train") c.subjects_train = std::stoll(value);
    else if (key == "subjects_dev") c.subjects_dev = std::stoll(value);
    else if (key == "subjects_test") c.subjects_test = std::stoll(value);
    else if (key == "held_out") c.held_out = value;
    else if (key == "threshold_rule") c.threshold_rule = value;
    else if (key == "fixed_threshold") c.fixed_threshold = std::stod(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "ablation_seeds") c.ablation_seeds = std::stoll(value);
    else if (key == "prompt_bank_path") c.prompt_bank_path = value;
    else if (key == "out_dir") c.out_dir = value;
    else
      fail(ErrorCode::kConfig, "unknown config key '" + key + "'");
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(ErrorCode::kConfig, "bad value for " + key + ": '" + value + "'");
  }
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    std::size_t eq = line.find('=', start);
    require(eq != std::string::npos, ErrorCode::kConfig,
            "line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(start, eq - start);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      std::size_t a = s.find_first_not_of(" \t\r");
      std::size_t b = s.find_last_not_of(" \t\r");
      s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
    };
    trim(key);
    trim(value);
    config_set(c, key, value);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig c = parse_config_text(buf.str());
  c.validate();
  return c;
}

// Canonical serialization; parse_config_text(config_text(c)) reproduces c.
inline std::string config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "image_size=" << c.image_size << "\n";
  os << "channels=" << c.channels << "\n";
  os << "patch=" << c.patch << "\n";
  os << "d_model=" << c.d_model << "\n";
  os << "n_heads=" << c.n_heads << "\n";
  os << "vision_blocks=" << c.vision_blocks << "\n";
  os << "text_blocks=" << c.text_blocks << "\n";
  os << "ffn_hidden=" << c.ffn_hidden << "\n";
  os << "d_embed=" << c.d_embed << "\n";
  os << "max_len=" << c.max_len << "\n";
  os << "model_kind=" << model_kind_name(c.model_kind) << "\n";
  os << "sue_layers_vision=" << cfg_detail::layer_list_str(c.sue_layers_vision)
     << "\n";
  os << "sue_layers_text=" << cfg_detail::layer_list_str(c.sue_layers_text)
     << "\n";
  os << "n_experts=" << c.n_experts << "\n";
  os << "top_k=" << c.top_k << "\n";
  os << "shared_expert=" << (c.shared_expert ? "true" : "false") << "\n";
  os << "alpha=" << c.alpha << "\n";
  os << "beta=" << c.beta << "\n";
  os << "gamma=" << c.gamma << "\n";
  os << "symmetric_ce=" << (c.symmetric_ce ? "true" : "false") << "\n";
  os << "lr=" << c.lr << "\n";
  os << "beta1=" << c.beta1 << "\n";
  os << "beta2=" << c.beta2 << "\n";
  os << "adam_eps=" << c.adam_eps << "\n";
  os << "epochs=" << c.epochs << "\n";
  os << "warmup_epochs=" << c.warmup_epochs << "\n";
  os << "batch_size=" << c.batch_size << "\n";
  os << "freeze_gates=" << (c.freeze_gates ? "true" : "false") << "\n";
  os << "freeze_routed=" << (c.freeze_routed ? "true" : "false") << "\n";
  os << "zero_routed_init=" << (c.zero_routed_init ? "true" : "false") << "\n";
  os << "protocol=" << c.protocol << "\n";
  os << "train_count=" << c.train_count << "\n";
  os << "dev_count=" << c.dev_count << "\n";
  os << "test_count=" << c.test_count << "\n";
  os << "bonafide_fraction=" << c.bonafide_fraction << "\n";
  os << "subjects_train=" << c.subjects_train << "\n";
  os << "subjects_dev=" << c.subjects_dev << "\n";
  os << "subjects_test=" << c.subjects_test << "\n";
  if (!c.held_out.empty()) os << "held_out=" << c.held_out << "\n";
  os << "threshold_rule=" << c.threshold_rule << "\n";
  os << "fixed_threshold=" << c.fixed_threshold << "\n";
  os << "seed=" << c.seed << "\n";
  os << "ablation_seeds=" << c.ablation_seeds << "\n";
  if (!c.prompt_bank_path.empty())
    os << "prompt_bank_path=" << c.prompt_bank_path << "\n";
  os << "out_dir=" << c.out_dir << "\n";
  return os.str();
}

}  // namespace suede
