#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "suede/moe.hpp"
#include "suede/prompts.hpp"
#include "suede/tensor.hpp"

namespace suede {

// ---------------------------------------------------------------------------
// Transformer block: pre-norm attention + FFN slot (plain FFN or SUE layer)
// ---------------------------------------------------------------------------

struct TransformerBlock {
  Index n_heads = 1;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  bool is_sue = false;
  ExpertFfn ffn;  // occupied when !is_sue
  SueLayer sue;   // occupied when is_sue

  static TransformerBlock init(Index d, Index heads, Index ffn_hidden,
                               Rng& rng) {
    require(d % heads == 0, ErrorCode::kConfig,
            "d_model must be divisible by the head count");
    TransformerBlock b;
    b.n_heads = heads;
    b.ln1_g = Tensor::full({d}, 1.0, true);
    b.ln1_b = Tensor::zeros({d}, true);
    b.ln2_g = Tensor::full({d}, 1.0, true);
    b.ln2_b = Tensor::zeros({d}, true);
    b.wq = Tensor::randn_trunc({d, d}, 0.02, rng);
    b.bq = Tensor::zeros({d}, true);
    b.wk = Tensor::randn_trunc({d, d}, 0.02, rng);
    b.bk = Tensor::zeros({d}, true);
    b.wv = Tensor::randn_trunc({d, d}, 0.02, rng);
    b.bv = Tensor::zeros({d}, true);
    b.wo = Tensor::randn_trunc({d, d}, 0.02, rng);
    b.bo = Tensor::zeros({d}, true);
    b.ffn = ExpertFfn::init(d, ffn_hidden, rng);
    return b;
  }

  // Replaces the FFN slot by a SUE layer; with inherit_shared the shared
  // expert deep-copies the block's trained FFN, otherwise it starts fresh.
  void convert_to_sue(Index n_experts, Index k, bool with_shared,
                      bool inherit_shared, Rng& rng) {
    require(!is_sue, ErrorCode::kConfig, "block already converted");
    if (with_shared && inherit_shared) {
      sue = SueLayer::from_base_ffn(ffn, n_experts, k, true, rng);
    } else {
      sue = SueLayer::init(ffn.d_model(), ffn.hidden(), n_experts, k,
                           with_shared, rng);
    }
    is_sue = true;
  }

  Tensor attention(const Tensor& x) const {
    Index B = x.dim(0), L = x.dim(1), D = x.dim(2);
    Index dh = D / n_heads;
    auto heads = [&](const Tensor& t) {
      return transpose(reshape(t, {B, L, n_heads, dh}), 1, 2);  // [B,H,L,dh]
    };
    Tensor q = heads(add(matmul(x, wq), bq));
    Tensor kk = heads(add(matmul(x, wk), bk));
    Tensor v = heads(add(matmul(x, wv), bv));
    Tensor scores =
        scale(matmul(q, transpose(kk, 2, 3)), 1.0 / std::sqrt(double(dh)));
    Tensor att = softmax(scores, -1);
    Tensor ctx = transpose(matmul(att, v), 1, 2);  // [B,L,H,dh]
    return add(matmul(reshape(ctx, {B, L, D}), wo), bo);
  }

  Tensor forward(const Tensor& x, std::vector<RouterOutput>* routers) const {
    Tensor h = add(x, attention(layer_norm(x, ln1_g, ln1_b)));
    Tensor normed = layer_norm(h, ln2_g, ln2_b);
    if (is_sue) {
      auto [y, r] = sue_forward(sue, normed);
      if (routers) routers->push_back(std::move(r));
      return add(h, y);
    }
    return add(h, ffn.forward(normed));
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".ln1_g", ln1_g);
    out.emplace_back(prefix + ".ln1_b", ln1_b);
    out.emplace_back(prefix + ".ln2_g", ln2_g);
    out.emplace_back(prefix + ".ln2_b", ln2_b);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
    if (is_sue) sue.collect(prefix + ".sue", out);
    else ffn.collect(prefix + ".ffn", out);
  }
};

// Unit normalization over the last axis.
inline Tensor l2_normalize(const Tensor& x) {
  Tensor n2 = sum(square(x), -1, /*keepdims=*/true);
  return div(x, sqrt(add_scalar(n2, 1e-30)));
}

// ---------------------------------------------------------------------------
// Patchify
// ---------------------------------------------------------------------------

// Splits a [C, H, W] image into [L, P*P*C] rows, patches in row-major order,
// pixels row-major within each patch.
inline Tensor patchify(const Tensor& image, Index patch) {
  require(image.ndim() == 3, ErrorCode::kDimension,
          "patchify expects a [C,H,W] image");
  Index C = image.dim(0), H = image.dim(1), W = image.dim(2);
  require(H % patch == 0 && W % patch == 0, ErrorCode::kDimension,
          "image dims must be divisible by the patch size");
  Index gh = H / patch, gw = W / patch;
  std::vector<double> out(static_cast<std::size_t>(gh * gw * patch * patch * C));
  Index row_len = patch * patch * C;
  for (Index py = 0; py < gh; ++py)
    for (Index px = 0; px < gw; ++px) {
      double* dst = out.data() + (py * gw + px) * row_len;
      for (Index c = 0; c < C; ++c)
        for (Index y = 0; y < patch; ++y)
          for (Index x = 0; x < patch; ++x)
            dst[c * patch * patch + y * patch + x] =
                image.data()[static_cast<std::size_t>(
                    c * H * W + (py * patch + y) * W + (px * patch + x))];
    }
  return Tensor::from_data({gh * gw, row_len}, std::move(out));
}

// Inverse of patchify; used by tests and sanity tooling.
inline Tensor unpatchify(const Tensor& patches, Index patch, Index C, Index H,
                         Index W) {
  Index gh = H / patch, gw = W / patch;
  require(patches.shape() == Shape{gh * gw, patch * patch * C},
          ErrorCode::kDimension, "patch grid does not match image dims");
  std::vector<double> out(static_cast<std::size_t>(C * H * W));
  Index row_len = patch * patch * C;
  for (Index py = 0; py < gh; ++py)
    for (Index px = 0; px < gw; ++px) {
      const double* src = patches.data().data() + (py * gw + px) * row_len;
      for (Index c = 0; c < C; ++c)
        for (Index y = 0; y < patch; ++y)
          for (Index x = 0; x < patch; ++x)
            out[static_cast<std::size_t>(c * H * W + (py * patch + y) * W +
                                         (px * patch + x))] =
                src[c * patch * patch + y * patch + x];
    }
  return Tensor::from_data({C, H, W}, std::move(out));
}

// ---------------------------------------------------------------------------
// Vision encoder (ViT-style, reduced scale)
// ---------------------------------------------------------------------------

struct VisionEncoder {
  Index image_size = 32, channels = 1, patch = 8;
  Index d_model = 64, n_heads = 4, d_embed = 32;
  Tensor patch_w, patch_b;  // [P*P*C, D], [D]
  Tensor cls_token;         // [1, 1, D]
  Tensor pos_embed;         // [1, L+1, D]
  std::vector<TransformerBlock> blocks;
  Tensor final_ln_g, final_ln_b;
  Tensor proj;  // [D, d_embed]

  Index seq_len() const {
    Index g = image_size / patch;
    return g * g + 1;
  }

  static VisionEncoder init(Index image_size, Index channels, Index patch,
                            Index d_model, Index n_heads, Index n_blocks,
                            Index ffn_hidden, Index d_embed, Rng& rng) {
    require(image_size % patch == 0, ErrorCode::kConfig,
            "image size must be divisible by the patch size");
    VisionEncoder v;
    v.image_size = image_size;
    v.channels = channels;
    v.patch = patch;
    v.d_model = d_model;
    v.n_heads = n_heads;
    v.d_embed = d_embed;
    v.patch_w = Tensor::randn_trunc({patch * patch * channels, d_model}, 0.02,
                                    rng);
    v.patch_b = Tensor::zeros({d_model}, true);
    v.cls_token = Tensor::randn_trunc({1, 1, d_model}, 0.02, rng);
    v.pos_embed = Tensor::randn_trunc({1, v.seq_len(), d_model}, 0.02, rng);
    v.blocks.reserve(static_cast<std::size_t>(n_blocks));
    for (Index i = 0; i < n_blocks; ++i)
      v.blocks.push_back(TransformerBlock::init(d_model, n_heads, ffn_hidden,
                                                rng));
    v.final_ln_g = Tensor::full({d_model}, 1.0, true);
    v.final_ln_b = Tensor::zeros({d_model}, true);
    v.proj = Tensor::randn_trunc({d_model, d_embed}, 0.02, rng);
    return v;
  }

  // patches: [N, L, P*P*C]; returns unit-norm embeddings [N, d_embed].
  Tensor encode(const Tensor& patches,
                std::vector<RouterOutput>* routers = nullptr) const {
    Index N = patches.dim(0);
    Tensor x = add(matmul(patches, patch_w), patch_b);      // [N, L, D]
    Tensor cls = broadcast_to(cls_token, {N, 1, d_model});
    x = concat(cls, x, 1);                                  // [N, L+1, D]
    x = add(x, pos_embed);
    for (const TransformerBlock& b : blocks) x = b.forward(x, routers);
    x = layer_norm(x, final_ln_g, final_ln_b);
    Tensor cls_out = reshape(slice(x, 1, 0, 1), {N, d_model});
    return l2_normalize(matmul(cls_out, proj));
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".patch_w", patch_w);
    out.emplace_back(prefix + ".patch_b", patch_b);
    out.emplace_back(prefix + ".cls_token", cls_token);
    out.emplace_back(prefix + ".pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    out.emplace_back(prefix + ".final_ln_g", final_ln_g);
    out.emplace_back(prefix + ".final_ln_b", final_ln_b);
    out.emplace_back(prefix + ".proj", proj);
  }
};

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

struct TextEncoder {
  Index vocab_size = Tokenizer::kVocabSize;
  Index max_len = 32, d_model = 64, n_heads = 4, d_embed = 32;
  Tensor tok_embed;  // [V, D]
  Tensor pos_embed;  // [1, max_len, D]
  std::vector<TransformerBlock> blocks;
  Tensor final_ln_g, final_ln_b;
  Tensor proj;

  static TextEncoder init(Index max_len, Index d_model, Index n_heads,
                          Index n_blocks, Index ffn_hidden, Index d_embed,
                          Rng& rng) {
    TextEncoder t;
    t.max_len = max_len;
    t.d_model = d_model;
    t.n_heads = n_heads;
    t.d_embed = d_embed;
    t.tok_embed = Tensor::randn_trunc({t.vocab_size, d_model}, 0.02, rng);
    t.pos_embed = Tensor::randn_trunc({1, max_len, d_model}, 0.02, rng);
    t.blocks.reserve(static_cast<std::size_t>(n_blocks));
    for (Index i = 0; i < n_blocks; ++i)
      t.blocks.push_back(TransformerBlock::init(d_model, n_heads, ffn_hidden,
                                                rng));
    t.final_ln_g = Tensor::full({d_model}, 1.0, true);
    t.final_ln_b = Tensor::zeros({d_model}, true);
    t.proj = Tensor::randn_trunc({d_model, d_embed}, 0.02, rng);
    return t;
  }

  // Encodes one prompt; sequences keep their exact length (no padding)
  // and pooling takes the end-of-sequence position.
  Tensor encode_one(const std::string& prompt,
                    std::vector<RouterOutput>* routers = nullptr) const {
    std::vector<Index> ids = Tokenizer::encode(prompt, max_len);
    Index L = static_cast<Index>(ids.size());
    Tensor x = reshape(index_select(tok_embed, ids), {1, L, d_model});
    x = add(x, slice(pos_embed, 1, 0, L));
    for (const TransformerBlock& b : blocks) x = b.forward(x, routers);
    x = layer_norm(x, final_ln_g, final_ln_b);
    Tensor eos = reshape(slice(x, 1, L - 1, L), {1, d_model});
    return l2_normalize(matmul(eos, proj));
  }

  // Encodes a batch of prompts, deduplicating repeated texts: each unique
  // prompt is encoded once and shared rows reuse (and backprop into) the
  // same forward pass.
  Tensor encode(const std::vector<std::string>& prompts,
                std::vector<RouterOutput>* routers = nullptr) const {
    require(!prompts.empty(), ErrorCode::kContract, "no prompts to encode");
    std::map<std::string, Index> uniq;
    std::vector<std::string> texts;
    std::vector<Index> which(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      auto [it, inserted] =
          uniq.try_emplace(prompts[i], static_cast<Index>(texts.size()));
      if (inserted) texts.push_back(prompts[i]);
      which[i] = it->second;
    }
    Tensor all;
    for (std::size_t u = 0; u < texts.size(); ++u) {
      Tensor e = encode_one(texts[u], routers);
      all = u == 0 ? e : concat(all, e, 0);
    }
    if (texts.size() == prompts.size()) return all;
    return index_select(all, which);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".tok_embed", tok_embed);
    out.emplace_back(prefix + ".pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    out.emplace_back(prefix + ".final_ln_g", final_ln_g);
    out.emplace_back(prefix + ".final_ln_b", final_ln_b);
    out.emplace_back(prefix + ".proj", proj);
  }
};

// ---------------------------------------------------------------------------
// Dual encoder and losses
// ---------------------------------------------------------------------------

struct SimilarityMatrix {
  Tensor s;  // [N, M], scaled cosine similarities
};

inline SimilarityMatrix similarity_matrix(const Tensor& img_emb,
                                          const Tensor& txt_emb,
                                          const Tensor& logit_scale) {
  require(img_emb.ndim() == 2 && txt_emb.ndim() == 2 &&
              img_emb.dim(1) == txt_emb.dim(1),
          ErrorCode::kDimension, "embedding dims do not match");
  Tensor raw = matmul(img_emb, transpose(txt_emb, 0, 1));
  return {mul(raw, exp(logit_scale))};
}

// Contrastive cross-entropy over the similarity matrix, image-to-text
// direction; the symmetric variant averages in the transposed direction.
inline Tensor contrastive_ce_loss(const Tensor& s, bool symmetric = false) {
  require(s.ndim() == 2 && s.dim(0) == s.dim(1), ErrorCode::kContract,
          "contrastive loss needs a square similarity matrix");
  Index n = s.dim(0);
  std::vector<double> eye(static_cast<std::size_t>(n * n), 0.0);
  for (Index i = 0; i < n; ++i) eye[static_cast<std::size_t>(i * n + i)] = 1.0;
  Tensor mask = Tensor::from_data({n, n}, std::move(eye));
  Tensor diag = sum(mul(s, mask), 1);
  Tensor loss = scale(sum_all(sub(logsumexp(s, 1), diag)),
                      1.0 / static_cast<double>(n));
  if (!symmetric) return loss;
  Tensor diag_t = sum(mul(s, mask), 0);
  Tensor loss_t = scale(sum_all(sub(logsumexp(s, 0), diag_t)),
                        1.0 / static_cast<double>(n));
  return scale(add(loss, loss_t), 0.5);
}

struct LossBundle {
  Tensor l_ce, l_z, l_b, total;
  double alpha = 1.0, beta = 1e-3, gamma = 1e-2;
};

inline LossBundle total_loss(const Tensor& l_ce, const Tensor& l_z,
                             const Tensor& l_b, double alpha = 1.0,
                             double beta = 1e-3, double gamma = 1e-2) {
  require(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0, ErrorCode::kConfig,
          "loss coefficients must be nonnegative");
  LossBundle out;
  out.l_ce = l_ce;
  out.l_z = l_z;
  out.l_b = l_b;
  out.alpha = alpha;
  out.beta = beta;
  out.gamma = gamma;
  out.total = add(add(scale(l_ce, alpha), scale(l_z, beta)), scale(l_b, gamma));
  return out;
}

struct DualEncoder {
  VisionEncoder vision;
  TextEncoder text;
  Tensor logit_scale;  // learnable, clamped to <= ln 100 after updates

  static DualEncoder init(Index image_size, Index channels, Index patch,
                          Index d_model, Index n_heads, Index vision_blocks,
                          Index text_blocks, Index ffn_hidden, Index d_embed,
                          Index max_len, Rng& rng) {
    DualEncoder m;
    Rng vr = rng.split("vision");
    Rng tr = rng.split("text");
    m.vision = VisionEncoder::init(image_size, channels, patch, d_model,
                                   n_heads, vision_blocks, ffn_hidden, d_embed,
                                   vr);
    m.text = TextEncoder::init(max_len, d_model, n_heads, text_blocks,
                               ffn_hidden, d_embed, tr);
    m.logit_scale = Tensor::scalar(std::log(1.0 / 0.07), true);
    return m;
  }

  NamedParams parameters() const {
    NamedParams out;
    vision.collect("vision", out);
    text.collect("text", out);
    out.emplace_back("logit_scale", logit_scale);
    return out;
  }
};

// Aggregated auxiliary losses over every SUE layer touched by a forward
// pass, averaged by layer count so coefficients stay comparable across
// placement ablations. Returns zero scalars when no SUE layer exists.
inline std::pair<Tensor, Tensor> aux_losses(
    const std::vector<RouterOutput>& routers) {
  if (routers.empty())
    return {Tensor::scalar(0.0), Tensor::scalar(0.0)};
  Tensor lz, lb;
  for (std::size_t i = 0; i < routers.size(); ++i) {
    Tensor z = router_z_loss(routers[i].logits);
    Tensor b = load_balance_loss(routers[i].probs, routers[i].selected,
                                 routers[i].n_experts);
    lz = i == 0 ? z : add(lz, z);
    lb = i == 0 ? b : add(lb, b);
  }
  double inv = 1.0 / static_cast<double>(routers.size());
  return {scale(lz, inv), scale(lb, inv)};
}

// Converts the chosen vision-branch blocks' FFN slots into SUE layers.
// `inherit_shared` realizes the warm-up-then-convert scheme: the shared
// expert deep-copies the trained FFN of each converted block.
inline void convert_vision_blocks(DualEncoder& model,
                                  const std::vector<Index>& layers,
                                  Index n_experts, Index k, bool with_shared,
                                  bool inherit_shared, Rng& rng) {
  for (Index i : layers) {
    require(i >= 0 && i < static_cast<Index>(model.vision.blocks.size()),
            ErrorCode::kConfig,
            "vision SUE layer index " + std::to_string(i) + " out of range");
    Rng r = rng.split(static_cast<std::uint64_t>(i));
    model.vision.blocks[static_cast<std::size_t>(i)].convert_to_sue(
        n_experts, k, with_shared, inherit_shared, r);
  }
}

inline void convert_text_blocks(DualEncoder& model,
                                const std::vector<Index>& layers,
                                Index n_experts, Index k, bool with_shared,
                                bool inherit_shared, Rng& rng) {
  for (Index i : layers) {
    require(i >= 0 && i < static_cast<Index>(model.text.blocks.size()),
            ErrorCode::kConfig,
            "text SUE layer index " + std::to_string(i) + " out of range");
    Rng r = rng.split(static_cast<std::uint64_t>(i) + 1000);
    model.text.blocks[static_cast<std::size_t>(i)].convert_to_sue(
        n_experts, k, with_shared, inherit_shared, r);
  }
}

// Zeroes the output layer of every routed expert in the model, forcing all
// routed contributions to the zero map. Diagnostic for equivalence checks.
inline void zero_routed_experts(DualEncoder& model) {
  for (auto* enc_blocks : {&model.vision.blocks, &model.text.blocks})
    for (TransformerBlock& b : *enc_blocks)
      if (b.is_sue)
        for (ExpertFfn& e : b.sue.routed) e.zero_output();
}

// The classification rule on per-class similarities: softmax over the two
// class maxima, evaluated at the fake class.
inline double fake_score(double s_real, double s_fake) {
  double m = std::max(s_real, s_fake);
  double er = std::exp(s_real - m), ef = std::exp(s_fake - m);
  return ef / (er + ef);
}

// Fake-score of images against the prompt bank: softmax over the per-class
// max similarity, taken at the fake class.
inline std::vector<double> classify(const DualEncoder& model,
                                    const Tensor& patches,
                                    const PromptBank& bank) {
  bank.validate();
  NoGradGuard guard;
  Tensor img = model.vision.encode(patches);
  Tensor real_emb = model.text.encode(bank.real);
  Tensor fake_emb = model.text.encode(bank.fake_class());
  double ls = std::exp(model.logit_scale.item());

  Index n = img.dim(0), de = img.dim(1);
  std::vector<double> scores(static_cast<std::size_t>(n));
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
    scores[static_cast<std::size_t>(i)] =
        fake_score(max_sim(real_emb, i), max_sim(fake_emb, i));
  return scores;
}

}  // namespace suede
