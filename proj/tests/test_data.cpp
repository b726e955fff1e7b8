#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "suede/data.hpp"

using namespace suede;

namespace {

std::set<int> types_in(const std::vector<LabeledSample>& v, bool attacks_only) {
  std::set<int> t;
  for (const auto& s : v)
    if (!attacks_only || s.label == Label::kAttack) t.insert(s.attack_type);
  return t;
}

std::set<Index> subjects_in(const std::vector<LabeledSample>& v) {
  std::set<Index> s;
  for (const auto& x : v) s.insert(x.subject_id);
  return s;
}

double bonafide_fraction(const std::vector<LabeledSample>& v) {
  double n = 0;
  for (const auto& s : v) n += s.label == Label::kBonafide ? 1.0 : 0.0;
  return n / static_cast<double>(v.size());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("generate_sample is deterministic and respects invariants") {
  LabeledSample a = generate_sample(Family::kDigital, 4, 11, 1234);
  LabeledSample b = generate_sample(Family::kDigital, 4, 11, 1234);
  CHECK(a.image.data() == b.image.data());

  LabeledSample live = generate_sample(Family::kLive, 0, 5, 77);
  CHECK(live.attack_type == 0);
  CHECK(live.label == Label::kBonafide);
  CHECK(live.family == Family::kLive);
  for (double v : live.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CHECK_THROWS_AS(generate_sample(Family::kLive, 3, 5, 77), Error);
  CHECK_THROWS_AS(generate_sample(Family::kPhysical, 0, 5, 77), Error);
  CHECK_THROWS_AS(generate_sample(Family::kDigital, 2, 5, 77), Error);
}

TEST_CASE("live vs type-1 mean pixel difference (frozen regression value)") {
  LabeledSample live = generate_sample(Family::kLive, 0, 3, 42);
  LabeledSample grid = generate_sample(Family::kPhysical, 1, 3, 42);
  double mad = 0;
  for (std::size_t i = 0; i < live.image.data().size(); ++i)
    mad += std::abs(live.image.data()[i] - grid.image.data()[i]);
  mad /= static_cast<double>(live.image.data().size());
  CHECK(mad > 0.01);
  CHECK(mad == Catch::Approx(0.061430623858367353).margin(1e-15));
}

TEST_CASE("P1: every attack type appears in train and test") {
  DataCounts counts;
  counts.train = 120;
  counts.dev = 40;
  counts.test = 60;
  ProtocolSplit split = build_protocol(Protocol::kP1, counts, 9001);
  std::set<int> expect{1, 2, 3, 4, 5, 6};
  CHECK(types_in(split.train, true) == expect);
  CHECK(types_in(split.test, true) == expect);
  // both families present in all splits
  for (const auto* part : {&split.train, &split.dev, &split.test}) {
    bool has_phys = false, has_dig = false, has_live = false;
    for (const auto& s : *part) {
      has_phys |= s.family == Family::kPhysical;
      has_dig |= s.family == Family::kDigital;
      has_live |= s.family == Family::kLive;
    }
    CHECK(has_phys);
    CHECK(has_dig);
    CHECK(has_live);
  }
}

TEST_CASE("P2.1 with one held-out physical type") {
  DataCounts counts;
  counts.train = 100;
  counts.dev = 30;
  counts.test = 50;
  ProtocolSplit split = build_protocol(Protocol::kP2_1, counts, {2}, 5);
  for (const auto& s : split.test)
    if (s.label == Label::kAttack) CHECK(s.attack_type == 2);
  // train and dev contain zero held-out samples
  for (const auto* part : {&split.train, &split.dev})
    for (const auto& s : *part) CHECK(s.attack_type != 2);
  // bonafide present everywhere
  for (const auto* part : {&split.train, &split.dev, &split.test})
    CHECK(bonafide_fraction(*part) > 0.0);
}

TEST_CASE("default P2 partitions hold out the whole family") {
  DataCounts counts;
  counts.train = 80;
  counts.dev = 24;
  counts.test = 40;
  ProtocolSplit p21 = build_protocol(Protocol::kP2_1, counts, 7);
  for (const auto& s : p21.test)
    if (s.label == Label::kAttack) CHECK(s.family == Family::kPhysical);
  for (const auto& s : p21.train) CHECK(s.family != Family::kPhysical);

  ProtocolSplit p22 = build_protocol(Protocol::kP2_2, counts, 7);
  for (const auto& s : p22.test)
    if (s.label == Label::kAttack) CHECK(s.family == Family::kDigital);
  for (const auto& s : p22.train) CHECK(s.family != Family::kDigital);
}

TEST_CASE("subjects are disjoint across splits; balance within tolerance") {
  DataCounts counts;
  ProtocolSplit split = build_protocol(Protocol::kP1, counts, 321);
  auto st = subjects_in(split.train), sd = subjects_in(split.dev),
       se = subjects_in(split.test);
  for (Index s : sd) CHECK_FALSE(st.count(s));
  for (Index s : se) {
    CHECK_FALSE(st.count(s));
    CHECK_FALSE(sd.count(s));
  }
  for (const auto* part : {&split.train, &split.dev, &split.test})
    CHECK(std::abs(bonafide_fraction(*part) - 0.5) <= 0.05);
}

TEST_CASE("regeneration is bit-identical") {
  DataCounts counts;
  counts.train = 50;
  counts.dev = 20;
  counts.test = 30;
  ProtocolSplit a = build_protocol(Protocol::kP2_2, counts, 42);
  ProtocolSplit b = build_protocol(Protocol::kP2_2, counts, 42);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].image.data() == b.train[i].image.data());
    CHECK(a.train[i].attack_type == b.train[i].attack_type);
    CHECK(a.train[i].subject_id == b.train[i].subject_id);
  }
}

TEST_CASE("invalid partitions are config errors") {
  DataCounts counts;
  // held-out type of the wrong family
  CHECK_THROWS_AS(build_protocol(Protocol::kP2_1, counts, {3}, 1), Error);
  CHECK_THROWS_AS(build_protocol(Protocol::kP2_2, counts, {1}, 1), Error);
  // P2 without any held-out type
  CHECK_THROWS_AS(build_protocol(Protocol::kP2_1, counts, std::set<int>{}, 1),
                  Error);
  // P1 must not hold out
  CHECK_THROWS_AS(build_protocol(Protocol::kP1, counts, {1}, 1), Error);
}

TEST_CASE("prompt pairing rules") {
  PromptBank bank = PromptBank::defaults();
  LabeledSample live = generate_sample(Family::kLive, 0, 1, 10);
  CHECK(prompt_for(live, bank) == "a photo of a real face");

  LabeledSample phys = generate_sample(Family::kPhysical, 1, 1, 11);
  CHECK(prompt_for(phys, bank) == "a printed photo attack of a face");

  LabeledSample dig = generate_sample(Family::kDigital, 5, 1, 12);
  CHECK(prompt_for(dig, bank) == "a digitally manipulated face");

  // single-prompt bank: that prompt regardless of family
  PromptBank single;
  single.real = {"real"};
  single.fake = {"the only fake prompt"};
  CHECK(prompt_for(phys, single) == "the only fake prompt");
  CHECK(prompt_for(dig, single) == "the only fake prompt");

  // deterministic given the sample
  CHECK(prompt_for(dig, bank) == prompt_for(dig, bank));
}

TEST_CASE("split export: manifest, byte-identical re-export, f32 round trip") {
  namespace fs = std::filesystem;
  DataCounts counts;
  counts.train = 6;
  counts.dev = 4;
  counts.test = 4;
  ProtocolSplit split = build_protocol(Protocol::kP1, counts, 77);
  std::string dir = (fs::temp_directory_path() / "suede_export_test").string();
  fs::remove_all(dir);
  export_split(split, dir);

  // record count
  std::ifstream manifest(dir + "/train_manifest.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(manifest, line)) ++rows;
  CHECK(rows == 6);

  // re-export is byte-identical
  std::string img0 = slurp(dir + "/train_00000.img");
  std::string man0 = slurp(dir + "/train_manifest.jsonl");
  export_split(split, dir);
  CHECK(slurp(dir + "/train_00000.img") == img0);
  CHECK(slurp(dir + "/train_manifest.jsonl") == man0);

  // pixels round-trip at f32 precision
  Tensor back = datagen::read_image_file(dir + "/train_00000.img");
  REQUIRE(back.shape() == split.train[0].image.shape());
  for (std::size_t i = 0; i < back.data().size(); ++i)
    CHECK(back.data()[i] ==
          static_cast<double>(static_cast<float>(split.train[0].image.data()[i])));
  fs::remove_all(dir);
}
