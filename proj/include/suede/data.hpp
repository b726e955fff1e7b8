#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "suede/errors.hpp"
#include "suede/prompts.hpp"
#include "suede/rng.hpp"
#include "suede/tensor.hpp"

namespace suede {

enum class Label { kBonafide, kAttack };
enum class Family { kLive, kPhysical, kDigital };

inline const char* label_name(Label l) {
  return l == Label::kBonafide ? "bonafide" : "attack";
}
inline const char* family_name(Family f) {
  switch (f) {
    case Family::kLive: return "live";
    case Family::kPhysical: return "physical";
    case Family::kDigital: return "digital";
  }
  return "?";
}

// Attack-type ids: 0 none (live); 1 grid overlay, 2 halftone dots (physical,
// global texture cues); 3 patch splice, 4 blended swap, 5 local blur,
// 6 checker artifact (digital, local cues).
constexpr int kNumAttackTypes = 6;
constexpr Index kImageSize = 32;

inline Family family_of_type(int attack_type) {
  if (attack_type == 0) return Family::kLive;
  if (attack_type <= 2) return Family::kPhysical;
  return Family::kDigital;
}

struct LabeledSample {
  Tensor image;  // [1, 32, 32] in [0,1]
  Label label = Label::kBonafide;
  Family family = Family::kLive;
  int attack_type = 0;  // 0 = none
  Index subject_id = 0;
  std::uint64_t seed = 0;
};

namespace datagen {

struct SubjectGeometry {
  double cx, cy, rx, ry, face_level, bg_level, tilt;
};

inline SubjectGeometry subject_geometry(Index subject_id) {
  Rng rng = Rng(0x5eedface).split(static_cast<std::uint64_t>(subject_id));
  SubjectGeometry g;
  g.cx = rng.uniform(0.40, 0.60) * kImageSize;
  g.cy = rng.uniform(0.42, 0.58) * kImageSize;
  g.rx = rng.uniform(0.26, 0.38) * kImageSize;
  g.ry = rng.uniform(0.32, 0.44) * kImageSize;
  g.face_level = rng.uniform(0.55, 0.85);
  g.bg_level = rng.uniform(0.15, 0.38);
  g.tilt = rng.uniform(-0.15, 0.15);
  return g;
}

// Smooth radial-gradient "face": background gradient, elliptic blob with a
// soft edge, two eye spots and a mouth bar, plus low per-sample noise.
inline std::vector<double> live_pixels(Index subject_id, Rng& noise_rng) {
  SubjectGeometry g = subject_geometry(subject_id);
  const Index n = kImageSize;
  std::vector<double> img(static_cast<std::size_t>(n * n));
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      double bg = g.bg_level + 0.08 * (double(y) / n);
      double dx = (x - g.cx + g.tilt * (y - g.cy)) / g.rx;
      double dy = (y - g.cy) / g.ry;
      double d = std::sqrt(dx * dx + dy * dy);
      double t = std::clamp((1.05 - d) / 0.35, 0.0, 1.0);
      double s = t * t * (3.0 - 2.0 * t);
      double v = bg + (g.face_level - bg) * s;

      auto spot = [&](double sx, double sy, double sigma, double depth) {
        double ddx = x - sx, ddy = y - sy;
        v -= depth * std::exp(-(ddx * ddx + ddy * ddy) / (2 * sigma * sigma));
      };
      spot(g.cx - 0.42 * g.rx, g.cy - 0.22 * g.ry, 1.3, 0.22);
      spot(g.cx + 0.42 * g.rx, g.cy - 0.22 * g.ry, 1.3, 0.22);
      // mouth: wider, shallower
      double mdx = (x - g.cx) / (0.45 * g.rx), mdy = (y - (g.cy + 0.45 * g.ry)) / 1.1;
      v -= 0.16 * std::exp(-(mdx * mdx + mdy * mdy) / 2.0);

      img[static_cast<std::size_t>(y * n + x)] = v;
    }
  for (double& v : img) v += 0.02 * noise_rng.normal();
  return img;
}

inline void clamp01(std::vector<double>& img) {
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
}

// physical 1: global periodic grid overlay
inline void apply_grid(std::vector<double>& img, Rng& rng) {
  const Index n = kImageSize;
  double amp = rng.uniform(0.10, 0.16);
  double fx = 4 + static_cast<double>(rng.below(4));
  double fy = 4 + static_cast<double>(rng.below(4));
  double p1 = rng.uniform(0, 2 * M_PI), p2 = rng.uniform(0, 2 * M_PI);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x)
      img[static_cast<std::size_t>(y * n + x)] +=
          amp * std::sin(2 * M_PI * fx * x / n + p1) *
          std::sin(2 * M_PI * fy * y / n + p2);
}

// physical 2: halftone dot lattice with alternating polarity
inline void apply_halftone(std::vector<double>& img, Rng& rng) {
  const Index n = kImageSize;
  double amp = rng.uniform(0.13, 0.19);
  Index spacing = 4 + static_cast<Index>(rng.below(2));
  Index ox = static_cast<Index>(rng.below(static_cast<std::uint64_t>(spacing)));
  Index oy = static_cast<Index>(rng.below(static_cast<std::uint64_t>(spacing)));
  for (Index gy = 0;; ++gy) {
    Index cy = oy + gy * spacing;
    if (cy >= n) break;
    for (Index gx = 0;; ++gx) {
      Index cx = ox + gx * spacing;
      if (cx >= n) break;
      double sign = ((gx + gy) % 2 == 0) ? 1.0 : -1.0;
      for (Index y = std::max<Index>(0, cy - 2); y < std::min(n, cy + 3); ++y)
        for (Index x = std::max<Index>(0, cx - 2); x < std::min(n, cx + 3);
             ++x) {
          double ddx = x - cx, ddy = y - cy;
          img[static_cast<std::size_t>(y * n + x)] +=
              sign * amp * std::exp(-(ddx * ddx + ddy * ddy) / 1.6);
        }
    }
  }
}

inline Index donor_subject(Index subject_id, Rng& rng) {
  Index donor = static_cast<Index>(rng.below(1 << 20));
  if (donor == subject_id) donor += 1;
  return donor;
}

// digital 3: hard rectangular splice from another subject's face
inline void apply_splice(std::vector<double>& img, Index subject_id, Rng& rng) {
  const Index n = kImageSize;
  Rng donor_noise = rng.split("donor");
  std::vector<double> donor = live_pixels(donor_subject(subject_id, rng),
                                          donor_noise);
  Index w = 8 + static_cast<Index>(rng.below(7));
  Index h = 8 + static_cast<Index>(rng.below(7));
  Index x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - w)));
  Index y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - h)));
  for (Index y = y0; y < y0 + h; ++y)
    for (Index x = x0; x < x0 + w; ++x)
      img[static_cast<std::size_t>(y * n + x)] =
          donor[static_cast<std::size_t>(y * n + x)];
}

// digital 4: donor face region blended in with a soft radial boundary
inline void apply_blended_swap(std::vector<double>& img, Index subject_id,
                               Rng& rng) {
  const Index n = kImageSize;
  Rng donor_noise = rng.split("donor");
  std::vector<double> donor = live_pixels(donor_subject(subject_id, rng),
                                          donor_noise);
  SubjectGeometry g = subject_geometry(subject_id);
  double rx = 0.72 * g.rx, ry = 0.72 * g.ry;
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      double dx = (x - g.cx) / rx, dy = (y - g.cy) / ry;
      double d = std::sqrt(dx * dx + dy * dy);
      double a = std::clamp((1.0 - d) / 0.45, 0.0, 1.0);
      a = a * a * (3.0 - 2.0 * a);
      std::size_t i = static_cast<std::size_t>(y * n + x);
      img[i] = (1.0 - a) * img[i] + a * donor[i];
    }
}

// digital 5: box-blur a local rectangle until it is visibly inconsistent
inline void apply_local_blur(std::vector<double>& img, Rng& rng) {
  const Index n = kImageSize;
  Index w = 10 + static_cast<Index>(rng.below(7));
  Index h = 10 + static_cast<Index>(rng.below(7));
  Index x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - w)));
  Index y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - h)));
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<double> copy = img;
    for (Index y = y0; y < y0 + h; ++y)
      for (Index x = x0; x < x0 + w; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (Index yy = std::max<Index>(0, y - 1); yy <= std::min(n - 1, y + 1);
             ++yy)
          for (Index xx = std::max<Index>(0, x - 1);
               xx <= std::min(n - 1, x + 1); ++xx) {
            acc += copy[static_cast<std::size_t>(yy * n + xx)];
            ++cnt;
          }
        img[static_cast<std::size_t>(y * n + x)] = acc / cnt;
      }
  }
}

// digital 6: pixel-scale checkerboard added in a local rectangle
inline void apply_checker(std::vector<double>& img, Rng& rng) {
  const Index n = kImageSize;
  double amp = rng.uniform(0.10, 0.16);
  Index w = 8 + static_cast<Index>(rng.below(7));
  Index h = 8 + static_cast<Index>(rng.below(7));
  Index x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - w)));
  Index y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - h)));
  for (Index y = y0; y < y0 + h; ++y)
    for (Index x = x0; x < x0 + w; ++x)
      img[static_cast<std::size_t>(y * n + x)] +=
          ((x + y) % 2 == 0 ? amp : -amp);
}

}  // namespace datagen

// Deterministic procedural sample: same arguments, bit-identical image.
inline LabeledSample generate_sample(Family family, int attack_type,
                                     Index subject_id, std::uint64_t seed) {
  require(attack_type >= 0 && attack_type <= kNumAttackTypes,
          ErrorCode::kContract, "attack type out of range");
  require(family_of_type(attack_type) == family, ErrorCode::kContract,
          std::string("attack type ") + std::to_string(attack_type) +
              " inconsistent with family " + family_name(family));

  Rng rng = Rng(seed).split("sample");
  Rng noise = rng.split("noise");
  std::vector<double> img = datagen::live_pixels(subject_id, noise);
  Rng art = rng.split("artifact");
  switch (attack_type) {
    case 0: break;
    case 1: datagen::apply_grid(img, art); break;
    case 2: datagen::apply_halftone(img, art); break;
    case 3: datagen::apply_splice(img, subject_id, art); break;
    case 4: datagen::apply_blended_swap(img, subject_id, art); break;
    case 5: datagen::apply_local_blur(img, art); break;
    case 6: datagen::apply_checker(img, art); break;
  }
  datagen::clamp01(img);

  LabeledSample s;
  s.image = Tensor::from_data({1, kImageSize, kImageSize}, std::move(img));
  s.label = attack_type == 0 ? Label::kBonafide : Label::kAttack;
  s.family = family;
  s.attack_type = attack_type;
  s.subject_id = subject_id;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------
// Protocol splits
// ---------------------------------------------------------------------------

enum class Protocol { kP1, kP2_1, kP2_2 };

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kP1: return "p1";
    case Protocol::kP2_1: return "p2.1";
    case Protocol::kP2_2: return "p2.2";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "p1" || s == "P1") return Protocol::kP1;
  if (s == "p2.1" || s == "P2.1") return Protocol::kP2_1;
  if (s == "p2.2" || s == "P2.2") return Protocol::kP2_2;
  fail(ErrorCode::kConfig, "unknown protocol '" + s + "'");
}

struct DataCounts {
  Index train = 1200, dev = 300, test = 600;
  double bonafide_fraction = 0.5;
  Index subjects_train = 60, subjects_dev = 15, subjects_test = 30;
};

struct ProtocolSplit {
  Protocol protocol = Protocol::kP1;
  std::vector<LabeledSample> train, dev, test;
  std::set<int> held_out_types;
};

// Held-out attack types for the unseen-attack protocols. Defaults mirror the
// source protocols: the whole physical family for P2.1, the whole digital
// family for P2.2; P1 holds out nothing.
inline std::set<int> default_held_out(Protocol p) {
  switch (p) {
    case Protocol::kP1: return {};
    case Protocol::kP2_1: return {1, 2};
    case Protocol::kP2_2: return {3, 4, 5, 6};
  }
  return {};
}

namespace datagen {

inline std::vector<LabeledSample> build_split(
    Index count, double bona_frac, const std::vector<int>& attack_types,
    Index subject_base, Index subject_count, Rng& rng) {
  Index n_bona = static_cast<Index>(std::llround(bona_frac * count));
  Index n_att = count - n_bona;
  std::vector<LabeledSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < n_bona; ++i) {
    Index subj = subject_base + static_cast<Index>(rng.below(
                                    static_cast<std::uint64_t>(subject_count)));
    out.push_back(generate_sample(Family::kLive, 0, subj, rng.next_u64()));
  }
  for (Index i = 0; i < n_att; ++i) {
    int type = attack_types[static_cast<std::size_t>(i % attack_types.size())];
    Index subj = subject_base + static_cast<Index>(rng.below(
                                    static_cast<std::uint64_t>(subject_count)));
    out.push_back(
        generate_sample(family_of_type(type), type, subj, rng.next_u64()));
  }
  // seeded Fisher-Yates
  for (Index i = static_cast<Index>(out.size()) - 1; i > 0; --i) {
    Index j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(out[static_cast<std::size_t>(i)],
              out[static_cast<std::size_t>(j)]);
  }
  return out;
}

}  // namespace datagen

// Builds a protocol split: disjoint subject pools, seeded composition and
// shuffling. Regenerating with the same arguments is bit-identical.
inline ProtocolSplit build_protocol(Protocol protocol, const DataCounts& counts,
                                    std::set<int> held_out,
                                    std::uint64_t master_seed) {
  require(counts.train >= 1 && counts.dev >= 1 && counts.test >= 1,
          ErrorCode::kConfig, "split sizes must be >= 1");

  std::vector<int> all_types;
  for (int t = 1; t <= kNumAttackTypes; ++t) all_types.push_back(t);

  std::vector<int> seen_types, test_types;
  if (protocol == Protocol::kP1) {
    require(held_out.empty(), ErrorCode::kConfig,
            "protocol 1 does not hold out attack types");
    seen_types = all_types;
    test_types = all_types;
  } else {
    Family held_family =
        protocol == Protocol::kP2_1 ? Family::kPhysical : Family::kDigital;
    require(!held_out.empty(), ErrorCode::kConfig,
            "unseen-attack protocols need at least one held-out type");
    for (int t : held_out) {
      require(t >= 1 && t <= kNumAttackTypes, ErrorCode::kConfig,
              "held-out type out of range");
      require(family_of_type(t) == held_family, ErrorCode::kConfig,
              std::string("held-out type ") + std::to_string(t) +
                  " is not a " + family_name(held_family) + " attack");
    }
    for (int t : all_types)
      if (!held_out.count(t)) seen_types.push_back(t);
    test_types.assign(held_out.begin(), held_out.end());
    require(!seen_types.empty(), ErrorCode::kConfig,
            "partition leaves the training set without any attack type");
  }

  Rng rng = Rng(master_seed).split(protocol_name(protocol));
  ProtocolSplit split;
  split.protocol = protocol;
  split.held_out_types = held_out;

  Rng train_rng = rng.split("train");
  Rng dev_rng = rng.split("dev");
  Rng test_rng = rng.split("test");
  Index sub_dev_base = counts.subjects_train;
  Index sub_test_base = counts.subjects_train + counts.subjects_dev;
  split.train = datagen::build_split(counts.train, counts.bonafide_fraction,
                                     seen_types, 0, counts.subjects_train,
                                     train_rng);
  split.dev = datagen::build_split(counts.dev, counts.bonafide_fraction,
                                   seen_types, sub_dev_base,
                                   counts.subjects_dev, dev_rng);
  split.test = datagen::build_split(counts.test, counts.bonafide_fraction,
                                    test_types, sub_test_base,
                                    counts.subjects_test, test_rng);
  return split;
}

inline ProtocolSplit build_protocol(Protocol protocol, const DataCounts& counts,
                                    std::uint64_t master_seed) {
  return build_protocol(protocol, counts, default_held_out(protocol),
                        master_seed);
}

// Deterministic prompt pairing: bonafide samples draw from the real-class
// prompts, attacks prefer a family-specific prompt when the bank has one.
inline std::string prompt_for(const LabeledSample& sample,
                              const PromptBank& bank) {
  bank.validate();
  const std::vector<std::string>* pool = nullptr;
  if (sample.label == Label::kBonafide) {
    pool = &bank.real;
  } else if (sample.family == Family::kPhysical && !bank.fake_physical.empty()) {
    pool = &bank.fake_physical;
  } else if (sample.family == Family::kDigital && !bank.fake_digital.empty()) {
    pool = &bank.fake_digital;
  } else if (!bank.fake.empty()) {
    pool = &bank.fake;
  } else {
    // fall back to any fake-class prompt
    static thread_local std::vector<std::string> all;
    all = bank.fake_class();
    pool = &all;
  }
  Rng pick = Rng(sample.seed).split("prompt");
  return (*pool)[static_cast<std::size_t>(
      pick.below(static_cast<std::uint64_t>(pool->size())))];
}

// ---------------------------------------------------------------------------
// Split export: one binary image per sample plus a manifest
// ---------------------------------------------------------------------------

namespace datagen {

constexpr char kImageMagic[8] = {'S', 'U', 'E', 'D', 'I', 'M', 'G', '1'};

inline void write_image_file(const std::string& path, const Tensor& image) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write " + path);
  out.write(kImageMagic, sizeof(kImageMagic));
  std::uint32_t dims[3] = {static_cast<std::uint32_t>(image.dim(0)),
                           static_cast<std::uint32_t>(image.dim(1)),
                           static_cast<std::uint32_t>(image.dim(2))};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  for (double v : image.data()) {
    float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
  require(out.good(), ErrorCode::kIo, "short write to " + path);
}

inline Tensor read_image_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in.gcount() == 8 && std::equal(magic, magic + 8, kImageMagic),
          ErrorCode::kIo, path + " is not an image file");
  std::uint32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  require(in.good(), ErrorCode::kIo, path + " truncated");
  Index n = static_cast<Index>(dims[0]) * dims[1] * dims[2];
  std::vector<double> data(static_cast<std::size_t>(n));
  for (double& v : data) {
    float f;
    in.read(reinterpret_cast<char*>(&f), sizeof(f));
    require(in.gcount() == sizeof(f), ErrorCode::kIo, path + " truncated");
    v = f;
  }
  return Tensor::from_data(
      {static_cast<Index>(dims[0]), static_cast<Index>(dims[1]),
       static_cast<Index>(dims[2])},
      std::move(data));
}

}  // namespace datagen

inline void export_split_part(const std::vector<LabeledSample>& samples,
                              const std::string& dir,
                              const std::string& part) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/" + part + "_manifest.jsonl");
  require(manifest.good(), ErrorCode::kIo, "cannot write manifest in " + dir);
  char name[64];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "%s_%05zu.img", part.c_str(), i);
    datagen::write_image_file(dir + "/" + name, samples[i].image);
    manifest << "{\"path\":\"" << name << "\",\"label\":\""
             << label_name(samples[i].label) << "\",\"family\":\""
             << family_name(samples[i].family)
             << "\",\"attack_type\":" << samples[i].attack_type
             << ",\"subject_id\":" << samples[i].subject_id << "}\n";
  }
}

inline void export_split(const ProtocolSplit& split, const std::string& dir) {
  export_split_part(split.train, dir, "train");
  export_split_part(split.dev, dir, "dev");
  export_split_part(split.test, dir, "test");
}

}  // namespace suede
