#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "suede/checkpoint.hpp"
#include "suede/config.hpp"
#include "suede/data.hpp"
#include "suede/encoder.hpp"
#include "suede/metrics.hpp"
#include "suede/moe.hpp"

namespace suede {

// ---------------------------------------------------------------------------
// Model: dual encoder, or vision encoder + linear head for the ViT-vs-MoE
// comparison
// ---------------------------------------------------------------------------

struct Model {
  ExperimentConfig config;
  DualEncoder dual;
  Tensor head_w, head_b;  // classifier head on the image embedding
  bool converted = false;

  static Model init(const ExperimentConfig& cfg) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng = Rng(cfg.seed).split("init");
    Index text_blocks =
        cfg.model_kind == ModelKind::kDualEncoder ? cfg.text_blocks : 0;
    m.dual = DualEncoder::init(cfg.image_size, cfg.channels, cfg.patch,
                               cfg.d_model, cfg.n_heads, cfg.vision_blocks,
                               text_blocks, cfg.ffn_hidden, cfg.d_embed,
                               cfg.max_len, rng);
    if (cfg.model_kind == ModelKind::kVitClassifier) {
      Rng hr = rng.split("head");
      m.head_w = Tensor::randn_trunc({cfg.d_embed, 2}, 0.02, hr);
      m.head_b = Tensor::zeros({2}, true);
    }
    return m;
  }

  // Applies the configured SUE placements; shared experts inherit the
  // current (warmed-up) FFN parameters.
  void convert() {
    require(!converted, ErrorCode::kConfig, "model already converted");
    Rng rng = Rng(config.seed).split("convert");
    if (!config.sue_layers_vision.empty())
      convert_vision_blocks(dual, config.sue_layers_vision, config.n_experts,
                            config.top_k, config.shared_expert,
                            /*inherit_shared=*/true, rng);
    if (!config.sue_layers_text.empty())
      convert_text_blocks(dual, config.sue_layers_text, config.n_experts,
                          config.top_k, config.shared_expert,
                          /*inherit_shared=*/true, rng);
    if (config.zero_routed_init) zero_routed_experts(dual);
    converted = true;
  }

  bool wants_conversion() const {
    return !config.sue_layers_vision.empty() ||
           !config.sue_layers_text.empty();
  }

  NamedParams parameters() const {
    NamedParams out;
    dual.vision.collect("vision", out);
    if (config.model_kind == ModelKind::kDualEncoder) {
      dual.text.collect("text", out);
      out.emplace_back("logit_scale", dual.logit_scale);
    } else {
      out.emplace_back("head_w", head_w);
      out.emplace_back("head_b", head_b);
    }
    return out;
  }
};

// Assembles a [N, L, P*P*C] patch tensor from samples.
inline Tensor batch_patches(const std::vector<const LabeledSample*>& batch,
                            Index patch) {
  require(!batch.empty(), ErrorCode::kContract, "empty batch");
  Tensor first = patchify(batch[0]->image, patch);
  Index L = first.dim(0), row = first.dim(1);
  Shape shape{static_cast<Index>(batch.size()), L, row};
  std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor p = i == 0 ? first : patchify(batch[i]->image, patch);
    std::copy(p.data().begin(), p.data().end(),
              data.begin() + static_cast<std::ptrdiff_t>(i) * L * row);
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

// Loss of one batch under the configured objective; router outputs from all
// SUE layers are returned for diagnostics.
inline LossBundle batch_loss(const Model& model,
                             const std::vector<const LabeledSample*>& batch,
                             const PromptBank& bank,
                             std::vector<RouterOutput>* routers_out = nullptr) {
  const ExperimentConfig& cfg = model.config;
  Tensor patches = batch_patches(batch, cfg.patch);
  std::vector<RouterOutput> routers;
  Tensor l_ce;
  if (cfg.model_kind == ModelKind::kDualEncoder) {
    Tensor img = model.dual.vision.encode(patches, &routers);
    std::vector<std::string> prompts;
    prompts.reserve(batch.size());
    for (const LabeledSample* s : batch) prompts.push_back(prompt_for(*s, bank));
    Tensor txt = model.dual.text.encode(prompts, &routers);
    Tensor s = similarity_matrix(img, txt, model.dual.logit_scale).s;
    l_ce = contrastive_ce_loss(s, cfg.symmetric_ce);
  } else {
    Tensor img = model.dual.vision.encode(patches, &routers);
    Tensor logits = add(matmul(img, model.head_w), model.head_b);  // [N,2]
    Index n = logits.dim(0);
    std::vector<double> onehot(static_cast<std::size_t>(n * 2), 0.0);
    for (Index i = 0; i < n; ++i) {
      int cls = batch[static_cast<std::size_t>(i)]->label == Label::kAttack
                    ? 1
                    : 0;
      onehot[static_cast<std::size_t>(i * 2 + cls)] = 1.0;
    }
    Tensor mask = Tensor::from_data({n, 2}, std::move(onehot));
    Tensor nll = sub(logsumexp(logits, 1), sum(mul(logits, mask), 1));
    l_ce = scale(sum_all(nll), 1.0 / static_cast<double>(n));
  }
  auto [l_z, l_b] = aux_losses(routers);
  if (routers_out) *routers_out = std::move(routers);
  return total_loss(l_ce, l_z, l_b, cfg.alpha, cfg.beta, cfg.gamma);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // (Re)binds the optimizer to the model's parameters. Existing moments are
  // carried over by name; a shared expert picks up the moments of the FFN it
  // inherited from, continuing its training trajectory.
  void attach(const NamedParams& params, bool freeze_gates = false,
              bool freeze_routed = false) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>
        old;
    for (Slot& s : slots_)
      old[s.name] = {std::move(s.m), std::move(s.v)};
    slots_.clear();
    for (const auto& [name, tensor] : params) {
      Slot s;
      s.name = name;
      s.param = tensor;
      s.trainable = true;
      if (freeze_gates && name.find(".gate.") != std::string::npos)
        s.trainable = false;
      if (freeze_routed && name.find(".routed") != std::string::npos)
        s.trainable = false;
      std::size_t n = tensor.data().size();
      auto it = old.find(name);
      if (it == old.end()) {
        // inherited-parameter rename: block FFN became the shared expert
        std::string alias = name;
        std::size_t pos = alias.find(".sue.shared.");
        if (pos != std::string::npos) alias.replace(pos, 12, ".ffn.");
        it = old.find(alias);
      }
      if (it != old.end() && it->second.first.size() == n) {
        s.m = std::move(it->second.first);
        s.v = std::move(it->second.second);
      } else {
        s.m.assign(n, 0.0);
        s.v.assign(n, 0.0);
      }
      slots_.push_back(std::move(s));
    }
  }

  void zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
  }

  void step() {
    ++step_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
    for (Slot& s : slots_) {
      if (!s.trainable || !s.param.has_grad()) continue;
      const std::vector<double>& g = s.param.grad();
      std::vector<double>& x = s.param.mutable_data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * g[i];
        s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * g[i] * g[i];
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        x[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

  void save_state(Checkpoint& c) const {
    c.adam_step = step_;
    for (const Slot& s : slots_) {
      c.put_raw("adam.m." + s.name, s.param.shape(), s.m);
      c.put_raw("adam.v." + s.name, s.param.shape(), s.v);
    }
  }

  void load_state(const Checkpoint& c) {
    step_ = c.adam_step;
    for (Slot& s : slots_) {
      auto m = c.tensors.find("adam.m." + s.name);
      auto v = c.tensors.find("adam.v." + s.name);
      if (m == c.tensors.end() || v == c.tensors.end()) continue;
      for (std::size_t i = 0; i < s.m.size(); ++i) {
        s.m[i] = m->second.second[i];
        s.v[i] = v->second.second[i];
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m, v;
    bool trainable = true;
  };
  double lr_, b1_, b2_, eps_;
  std::uint64_t step_ = 0;
  std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------
// Scoring and evaluation
// ---------------------------------------------------------------------------

// Fake-scores over a list of samples, in order, batched. Collects router
// outputs per SUE layer when requested (layer-major accumulation).
inline std::vector<double> score_samples(
    const Model& model, const std::vector<LabeledSample>& samples,
    const PromptBank& bank, Index batch_size = 64,
    std::vector<std::vector<RouterOutput>>* routers_per_layer = nullptr) {
  NoGradGuard guard;
  std::vector<double> scores;
  scores.reserve(samples.size());
  const ExperimentConfig& cfg = model.config;

  Tensor real_emb, fake_emb;
  if (cfg.model_kind == ModelKind::kDualEncoder) {
    bank.validate();
    real_emb = model.dual.text.encode(bank.real);
    fake_emb = model.dual.text.encode(bank.fake_class());
  }

  for (std::size_t start = 0; start < samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::vector<const LabeledSample*> batch;
    for (std::size_t i = start;
         i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
         ++i)
      batch.push_back(&samples[i]);
    Tensor patches = batch_patches(batch, cfg.patch);
    std::vector<RouterOutput> routers;
    Tensor img = model.dual.vision.encode(patches, &routers);
    if (routers_per_layer) {
      if (routers_per_layer->empty()) routers_per_layer->resize(routers.size());
      require(routers_per_layer->size() == routers.size(),
              ErrorCode::kContract, "inconsistent SUE layer count");
      for (std::size_t l = 0; l < routers.size(); ++l)
        (*routers_per_layer)[l].push_back(routers[l]);
    }
    Index n = img.dim(0), de = img.dim(1);
    if (cfg.model_kind == ModelKind::kDualEncoder) {
      double ls = std::exp(model.dual.logit_scale.item());
      auto max_sim = [&](const Tensor& emb, Index row) {
        double best = -1e300;
        for (Index j = 0; j < emb.dim(0); ++j) {
          double dot = 0.0;
          for (Index d = 0; d < de; ++d)
            dot += img.data()[static_cast<std::size_t>(row * de + d)] *
                   emb.data()[static_cast<std::size_t>(j * de + d)];
          best = std::max(best, ls * dot);
        }
        return best;
      };
      for (Index i = 0; i < n; ++i)
        scores.push_back(fake_score(max_sim(real_emb, i), max_sim(fake_emb, i)));
    } else {
      Tensor logits = add(matmul(img, model.head_w), model.head_b);
      for (Index i = 0; i < n; ++i) {
        double l0 = logits.data()[static_cast<std::size_t>(i * 2)];
        double l1 = logits.data()[static_cast<std::size_t>(i * 2 + 1)];
        scores.push_back(fake_score(l0, l1));
      }
    }
  }
  return scores;
}

struct EvalOutput {
  ScoredSet scored;
  MetricReport report;
  std::map<std::string, double> apcer_by_family;  // "physical", "digital"
};

inline EvalOutput evaluate_samples(const Model& model,
                                   const std::vector<LabeledSample>& samples,
                                   const PromptBank& bank, double threshold) {
  EvalOutput out;
  out.scored.scores = score_samples(model, samples, bank);
  out.scored.is_attack.reserve(samples.size());
  for (const LabeledSample& s : samples)
    out.scored.is_attack.push_back(s.label == Label::kAttack);
  out.report = make_report(out.scored, threshold);
  for (Family fam : {Family::kPhysical, Family::kDigital}) {
    double n = 0, missed = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].family != fam) continue;
      ++n;
      if (out.scored.scores[i] < threshold) ++missed;
    }
    if (n > 0) out.apcer_by_family[family_name(fam)] = missed / n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
  Index epoch = 0;             // 1-based, warm-up epochs included
  bool sue_phase = false;
  double l_ce = 0, l_z = 0, l_b = 0, total = 0;
  MetricReport dev;
  std::vector<double> layer_entropy;  // one entry per SUE layer
};

struct RunHistory {
  std::vector<EpochRecord> records;
};

struct TrainResult {
  Model model;        // final state
  Checkpoint best;    // best dev-AUC checkpoint
  RunHistory history;
  double best_dev_auc = -1.0;
  Index best_epoch = 0;
};

namespace train_detail {

inline Checkpoint snapshot(const Model& model, const AdamOptimizer& opt,
                           Index epoch, std::uint64_t rng_state) {
  Checkpoint c;
  c.config_echo = config_text(model.config);
  c.epoch = static_cast<std::uint64_t>(epoch);
  c.rng_state = rng_state;
  for (const auto& [name, tensor] : model.parameters()) c.put(name, tensor);
  opt.save_state(c);
  return c;
}

inline std::vector<double> layer_entropies(
    const std::vector<std::vector<RouterOutput>>& per_layer) {
  std::vector<double> out;
  out.reserve(per_layer.size());
  for (const auto& layer_routers : per_layer)
    out.push_back(expert_utilization(layer_routers).entropy);
  return out;
}

}  // namespace train_detail

// Two-phase training: warm up the plain model, convert the configured
// blocks (shared experts inherit the warmed-up FFNs), then train with the
// full objective. Returns the final model, the best-dev checkpoint, and the
// per-epoch history.
inline TrainResult train(const ExperimentConfig& cfg,
                         const ProtocolSplit* data_override = nullptr) {
  cfg.validate();
  PromptBank bank = cfg.prompt_bank_path.empty()
                        ? PromptBank::defaults()
                        : PromptBank::load(cfg.prompt_bank_path);
  bank.validate();

  ProtocolSplit local;
  const ProtocolSplit* data = data_override;
  if (!data) {
    local = build_protocol(cfg.parsed_protocol(), cfg.data_counts(),
                           cfg.parsed_held_out(), cfg.seed);
    data = &local;
  }

  TrainResult result;
  result.model = Model::init(cfg);
  Model& model = result.model;
  AdamOptimizer opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  opt.attach(model.parameters(), cfg.freeze_gates, cfg.freeze_routed);

  Rng batch_rng = Rng(cfg.seed).split("batches");
  const double ls_max = std::log(100.0);

  Index epoch_counter = 0;
  auto run_epoch = [&](bool sue_phase) {
    ++epoch_counter;
    std::vector<std::size_t> order(data->train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::size_t j = batch_rng.below(i + 1);
      std::swap(order[i], order[j]);
    }
    double sum_ce = 0, sum_z = 0, sum_b = 0, sum_total = 0;
    Index batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const LabeledSample*> batch;
      for (std::size_t i = start;
           i < std::min(order.size(),
                        start + static_cast<std::size_t>(cfg.batch_size));
           ++i)
        batch.push_back(&data->train[order[i]]);
      if (batch.size() < 2) continue;  // contrastive loss needs pairs
      opt.zero_grad();
      LossBundle loss = batch_loss(model, batch, bank);
      double total = loss.total.item();
      if (!std::isfinite(total)) {
        std::string seeds;
        for (const LabeledSample* s : batch) {
          if (!seeds.empty()) seeds += ",";
          seeds += std::to_string(s->seed);
          if (seeds.size() > 160) break;
        }
        fail(ErrorCode::kDomain,
             "non-finite loss at epoch " + std::to_string(epoch_counter) +
                 ", batch " + std::to_string(batches) + "; batch sample seeds " +
                 seeds);
      }
      loss.total.backward();
      opt.step();
      if (cfg.model_kind == ModelKind::kDualEncoder) {
        std::vector<double>& ls = model.dual.logit_scale.mutable_data();
        ls[0] = std::min(ls[0], ls_max);
      }
      sum_ce += loss.l_ce.item();
      sum_z += loss.l_z.item();
      sum_b += loss.l_b.item();
      sum_total += total;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch_counter;
    rec.sue_phase = sue_phase;
    rec.l_ce = sum_ce / std::max<Index>(1, batches);
    rec.l_z = sum_z / std::max<Index>(1, batches);
    rec.l_b = sum_b / std::max<Index>(1, batches);
    rec.total = sum_total / std::max<Index>(1, batches);

    std::vector<std::vector<RouterOutput>> per_layer;
    ScoredSet dev_scored;
    dev_scored.scores = score_samples(model, data->dev, bank, 64, &per_layer);
    for (const LabeledSample& s : data->dev)
      dev_scored.is_attack.push_back(s.label == Label::kAttack);
    rec.dev = make_report(dev_scored, cfg.fixed_threshold);
    rec.layer_entropy = train_detail::layer_entropies(per_layer);
    result.history.records.push_back(rec);

    if (rec.dev.auc > result.best_dev_auc) {
      result.best_dev_auc = rec.dev.auc;
      result.best_epoch = epoch_counter;
      result.best = train_detail::snapshot(model, opt, epoch_counter,
                                           batch_rng.state());
    }
  };

  for (Index e = 0; e < cfg.warmup_epochs; ++e) run_epoch(false);

  if (model.wants_conversion()) {
    model.convert();
    opt.attach(model.parameters(), cfg.freeze_gates, cfg.freeze_routed);
  }

  for (Index e = 0; e < cfg.epochs; ++e) run_epoch(true);

  if (result.best_dev_auc < 0.0)
    result.best = train_detail::snapshot(model, opt, 0, batch_rng.state());
  return result;
}

inline void load_into_model(Model& model, const Checkpoint& c) {
  for (auto& [name, tensor] : model.parameters()) {
    Tensor t = tensor;
    c.restore_into(name, t);
  }
}

// Rebuilds a model from a checkpoint: the config echo drives construction
// (including SUE placement), then stored tensors overwrite every parameter.
inline Model model_from_checkpoint(const Checkpoint& c) {
  ExperimentConfig cfg = parse_config_text(c.config_echo);
  cfg.validate();
  Model model = Model::init(cfg);
  if (model.wants_conversion()) {
    // conversion happened iff any SUE tensor is present
    bool has_sue = false;
    for (const auto& [name, entry] : c.tensors)
      has_sue |= name.find(".sue.") != std::string::npos;
    if (has_sue) model.convert();
  }
  load_into_model(model, c);
  return model;
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

// One line per sample: the embedding at f32 storage precision, then label,
// family and attack type. Re-export is byte-identical.
inline void export_embeddings(const Model& model,
                              const std::vector<LabeledSample>& samples,
                              const std::string& path) {
  NoGradGuard guard;
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write embeddings to " + path);
  char buf[64];
  for (std::size_t start = 0; start < samples.size(); start += 64) {
    std::vector<const LabeledSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + 64); ++i)
      batch.push_back(&samples[i]);
    Tensor patches = batch_patches(batch, model.config.patch);
    Tensor emb = model.dual.vision.encode(patches);
    Index de = emb.dim(1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (Index d = 0; d < de; ++d) {
        float v = static_cast<float>(
            emb.data()[static_cast<std::size_t>(i) * de + d]);
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
        out << (d ? " " : "") << buf;
      }
      out << "\t" << label_name(batch[i]->label) << "\t"
          << family_name(batch[i]->family) << "\t" << batch[i]->attack_type
          << "\n";
    }
  }
  require(out.good(), ErrorCode::kIo, "short write to " + path);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

enum class AblationKind {
  kExpertCount,
  kLayerPlacement,
  kModalityPlacement,
  kVitVsMoe,
};

inline AblationKind parse_ablation_kind(const std::string& s) {
  if (s == "expert_count") return AblationKind::kExpertCount;
  if (s == "layer_placement") return AblationKind::kLayerPlacement;
  if (s == "modality_placement") return AblationKind::kModalityPlacement;
  if (s == "vit_vs_moe") return AblationKind::kVitVsMoe;
  fail(ErrorCode::kConfig, "unknown ablation kind '" + s + "'");
}

inline const char* ablation_kind_name(AblationKind k) {
  switch (k) {
    case AblationKind::kExpertCount: return "expert_count";
    case AblationKind::kLayerPlacement: return "layer_placement";
    case AblationKind::kModalityPlacement: return "modality_placement";
    case AblationKind::kVitVsMoe: return "vit_vs_moe";
  }
  return "?";
}

struct AblationVariant {
  std::string name;
  ExperimentConfig config;
};

// The variant sets mirror the studied comparisons: expert counts 2..8 with
// k=2, early/middle/late/all layer ranges scaled to the configured depth,
// SUE placement by modality (including the shared-expert-free "visual MoE"
// row), and plain ViT vs routed-only MoE vs full SUE classifier heads.
inline std::vector<AblationVariant> ablation_variants(
    AblationKind kind, const ExperimentConfig& base) {
  std::vector<AblationVariant> variants;
  auto all_vision = [&](ExperimentConfig& c) {
    c.sue_layers_vision.clear();
    for (Index i = 0; i < c.vision_blocks; ++i) c.sue_layers_vision.push_back(i);
  };
  auto all_text = [&](ExperimentConfig& c) {
    c.sue_layers_text.clear();
    for (Index i = 0; i < c.text_blocks; ++i) c.sue_layers_text.push_back(i);
  };
  switch (kind) {
    case AblationKind::kExpertCount: {
      for (Index n : {2, 4, 6, 8}) {
        ExperimentConfig c = base;
        c.n_experts = n;
        c.top_k = 2;
        variants.push_back({"experts_" + std::to_string(n), c});
      }
      break;
    }
    case AblationKind::kLayerPlacement: {
      Index depth = base.vision_blocks;
      Index third = std::max<Index>(1, depth / 3);
      struct Range {
        const char* name;
        Index lo, hi;
      };
      std::vector<Range> ranges{{"early", 0, third - 1},
                                {"middle", third, 2 * third - 1},
                                {"late", 2 * third, depth - 1},
                                {"all", 0, depth - 1}};
      for (const Range& r : ranges) {
        ExperimentConfig c = base;
        c.sue_layers_vision.clear();
        for (Index i = r.lo; i <= std::min(r.hi, depth - 1); ++i)
          c.sue_layers_vision.push_back(i);
        variants.push_back({std::string(r.name) + "_" + std::to_string(r.lo) +
                                "-" + std::to_string(r.hi),
                            c});
      }
      break;
    }
    case AblationKind::kModalityPlacement: {
      {
        ExperimentConfig c = base;  // routed-only, no shared expert
        all_vision(c);
        c.sue_layers_text.clear();
        c.shared_expert = false;
        variants.push_back({"visual_moe", c});
      }
      {
        ExperimentConfig c = base;
        c.sue_layers_vision.clear();
        all_text(c);
        c.shared_expert = true;
        variants.push_back({"text_sue", c});
      }
      {
        ExperimentConfig c = base;
        all_vision(c);
        all_text(c);
        c.shared_expert = true;
        variants.push_back({"text_visual_sue", c});
      }
      {
        ExperimentConfig c = base;
        all_vision(c);
        c.sue_layers_text.clear();
        c.shared_expert = true;
        variants.push_back({"visual_sue", c});
      }
      break;
    }
    case AblationKind::kVitVsMoe: {
      {
        ExperimentConfig c = base;
        c.model_kind = ModelKind::kVitClassifier;
        c.sue_layers_vision.clear();
        c.sue_layers_text.clear();
        variants.push_back({"vit_plain", c});
      }
      {
        ExperimentConfig c = base;
        c.model_kind = ModelKind::kVitClassifier;
        all_vision(c);
        c.sue_layers_text.clear();
        c.shared_expert = false;
        variants.push_back({"vit_routed_moe", c});
      }
      {
        ExperimentConfig c = base;
        c.model_kind = ModelKind::kVitClassifier;
        all_vision(c);
        c.sue_layers_text.clear();
        c.shared_expert = true;
        variants.push_back({"vit_sue", c});
      }
      break;
    }
  }
  return variants;
}

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  MetricReport test;
  double dev_auc = 0;
  double mean_layer_entropy = 0;  // mean dispatch entropy over SUE layers
};

struct AblationTable {
  AblationKind kind = AblationKind::kExpertCount;
  Index seeds = 0;
  std::vector<AblationRun> runs;  // variant-major, seed-minor
  std::map<std::string, AggregateReport> aggregated;
};

// Trains one (variant, seed) cell and evaluates on its protocol test split.
inline AblationRun run_ablation_cell(const AblationVariant& variant,
                                     std::uint64_t seed) {
  ExperimentConfig cfg = variant.config;
  cfg.seed = seed;
  TrainResult tr = train(cfg);
  PromptBank bank = cfg.prompt_bank_path.empty()
                        ? PromptBank::defaults()
                        : PromptBank::load(cfg.prompt_bank_path);
  ProtocolSplit data = build_protocol(cfg.parsed_protocol(), cfg.data_counts(),
                                      cfg.parsed_held_out(), cfg.seed);
  double threshold = cfg.fixed_threshold;
  if (cfg.parsed_threshold_rule() == ThresholdRule::kDevEer) {
    EvalOutput dev = evaluate_samples(tr.model, data.dev, bank, 0.5);
    threshold = std::clamp(eer(dev.scored).threshold, 0.0, 1.0);
  }
  EvalOutput test = evaluate_samples(tr.model, data.test, bank, threshold);

  AblationRun run;
  run.variant = variant.name;
  run.seed = seed;
  run.test = test.report;
  run.dev_auc = tr.best_dev_auc;
  if (!tr.history.records.empty()) {
    const auto& ent = tr.history.records.back().layer_entropy;
    if (!ent.empty())
      run.mean_layer_entropy =
          std::accumulate(ent.begin(), ent.end(), 0.0) /
          static_cast<double>(ent.size());
  }
  return run;
}

// Runs every variant over `ablation_seeds` seeds. Cells are independent, so
// they execute on a small thread pool; results are ordered deterministically.
inline AblationTable run_ablation(AblationKind kind,
                                  const ExperimentConfig& base,
                                  unsigned n_threads = 0) {
  std::vector<AblationVariant> variants = ablation_variants(kind, base);
  Index n_seeds = std::max<Index>(1, base.ablation_seeds);

  struct Job {
    std::size_t slot;
    const AblationVariant* variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (Index s = 0; s < n_seeds; ++s)
      jobs.push_back({v * static_cast<std::size_t>(n_seeds) +
                          static_cast<std::size_t>(s),
                      &variants[v], base.seed + static_cast<std::uint64_t>(s)});

  AblationTable table;
  table.kind = kind;
  table.seeds = n_seeds;
  table.runs.resize(jobs.size());

  if (n_threads == 0)
    n_threads = std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<unsigned>(n_threads, jobs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      table.runs[jobs[j].slot] =
          run_ablation_cell(*jobs[j].variant, jobs[j].seed);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();

  for (std::size_t v = 0; v < variants.size(); ++v) {
    std::vector<MetricReport> reports;
    for (Index s = 0; s < n_seeds; ++s)
      reports.push_back(
          table.runs[v * static_cast<std::size_t>(n_seeds) +
                     static_cast<std::size_t>(s)]
              .test);
    table.aggregated[variants[v].name] = aggregate(reports);
  }
  return table;
}

}  // namespace suede
