#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "aatr/container.hpp"
#include "aatr/dataset_forge.hpp"
#include "test_util.hpp"

using namespace aatr;
using aatr::testing::affine_model;

namespace {

// Predicts class 0 iff x0 >= 0.25 (ties go to class 0).
Victim threshold_victim(std::string hash = "h0") {
  return {ArchitectureId::VictimA, affine_model({{1, 0}, {0, 0}}, {-0.25f, 0}), std::move(hash)};
}

// Synthetic filtered dataset over 2-d inputs. Sample i has mean_abs = mags[i].
AdvDataset fake_dataset(const AttackSpec& attack, ArchitectureId victim, std::size_t n_train,
                        std::size_t n_test, std::vector<double> mags = {}) {
  AdvDataset d;
  d.meta.source_id = "synthetic";
  d.meta.attack = attack;
  d.meta.victim = victim;
  d.meta.victim_checkpoint_hash = "h0";
  d.meta.attempted_train = n_train;
  d.meta.attempted_test = n_test;
  d.meta.retained_train = n_train;
  d.meta.retained_test = n_test;
  d.meta.filtered = true;
  const std::size_t n = n_train + n_test;
  std::vector<float> x;
  for (std::size_t i = 0; i < n; ++i) {
    x.push_back(static_cast<float>(i));
    x.push_back(0.0f);
    d.y_true.push_back(0);
    d.victim_pred.push_back(1);
    const double m = mags.empty() ? 0.5 : mags[i];
    d.norms.push_back({m, 2 * m, m});
    d.source_index.push_back(static_cast<std::uint32_t>(1000 + i));
    d.split.push_back(i < n_train ? Split::Train : Split::Test);
  }
  d.x_adv = Tensor({n, 2}, std::move(x));
  return d;
}

AdvDataset unfiltered_from_x0(const std::vector<float>& x0) {
  AdvDataset d = fake_dataset(AttackSpec::fgsm(Norm::Linf, 0.1), ArchitectureId::VictimA, x0.size(), 0);
  d.meta.filtered = false;
  d.meta.retained_train = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) d.x_adv[2 * i] = x0[i];
  return d;
}

}  // namespace

TEST(Grid, DefaultGridHas21AttacksAnd63Cells) {
  const GridConfig cfg;
  EXPECT_EQ(cfg.attack_specs().size(), 21u);
  EXPECT_EQ(cfg.expected_cells(), 63u);
  const auto cells = grid_cells(cfg);
  ASSERT_EQ(cells.size(), 63u);
  std::set<std::string> ids;
  for (const auto& c : cells) ids.insert(c.id());
  EXPECT_EQ(ids.size(), 63u);
  std::map<std::string, int> per_family;
  for (const auto& c : cells) per_family[to_string(c.attack.algorithm) + "-" + to_string(c.attack.norm)]++;
  EXPECT_EQ(per_family, (std::map<std::string, int>{{"CW-L2", 27}, {"DeepFool-L2", 9}, {"DeepFool-Linf", 9}, {"FGSM-L2", 9}, {"FGSM-Linf", 9}}));
  EXPECT_EQ(cells.front().id(), "FGSM-L2-eps1-VictimA");
}

TEST(Grid, ThreeByThreeCw) {
  GridConfig cfg;
  cfg.families = {{Algorithm::CW, Norm::L2, {0.1, 0.2, 0.5}, {0.01, 0.1, 1.0}}};
  cfg.victims = {ArchitectureId::VictimB};
  EXPECT_EQ(grid_cells(cfg).size(), 9u);
}

TEST(Grid, EmptyHyperparameterListGivesNoCells) {
  GridConfig cfg;
  cfg.families = {{Algorithm::FGSM, Norm::L2, {}, {}}};
  EXPECT_EQ(grid_cells(cfg).size(), 0u);
}

TEST(Grid, CwWithLinfIsRejected) {
  GridConfig cfg;
  cfg.families = {{Algorithm::CW, Norm::Linf, {0.1}, {0.1}}};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Grid, FilterTokensAreSubstrings) {
  EXPECT_TRUE(cell_matches("FGSM-Linf-eps0.2-VictimA", ""));
  EXPECT_TRUE(cell_matches("FGSM-Linf-eps0.2-VictimA", "CW,Linf-eps0.2"));
  EXPECT_FALSE(cell_matches("FGSM-Linf-eps0.2-VictimA", "VictimB,DeepFool"));
  GridConfig cfg;
  cfg.only = "FGSM-Linf,VictimC";
  const auto cells = grid_cells(cfg);
  // 3 FGSM-Linf on A and B, plus all 21 attacks on VictimC.
  EXPECT_EQ(cells.size(), 6u + 21u);
  cfg.only = "FGSM-Linf";
  EXPECT_EQ(grid_cells(cfg).size(), 9u);
}

TEST(Grid, JsonRoundTrip) {
  GridConfig cfg;
  cfg.train_attempts = 7;
  cfg.only = "CW";
  const GridConfig back = GridConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.families, cfg.families);
  EXPECT_EQ(back.victims, cfg.victims);
  EXPECT_EQ(back.train_attempts, 7u);
  EXPECT_EQ(back.only, "CW");
}

TEST(Filter, AllFooledKeepsEverything) {
  const AdvDataset d = unfiltered_from_x0(std::vector<float>(100, 0.0f));
  const AdvDataset f = filter_successful(threshold_victim(), d);
  EXPECT_EQ(f.size(), 100u);
  EXPECT_TRUE(f.meta.filtered);
  EXPECT_TRUE(f.meta.effective);
}

TEST(Filter, NoneFooledIsEmptyAndIneffective) {
  const AdvDataset d = unfiltered_from_x0(std::vector<float>(100, 1.0f));
  const AdvDataset f = filter_successful(threshold_victim(), d);
  EXPECT_EQ(f.size(), 0u);
  EXPECT_EQ(f.meta.attempted(), 100u);
  EXPECT_FALSE(f.meta.effective);
}

TEST(Filter, KeepsFooledSamplesInOrder) {
  std::vector<float> x0;
  std::vector<std::uint32_t> expect;
  for (std::size_t i = 0; i < 100; ++i) {
    const bool fooled = i % 5 < 3;  // 60 of 100
    x0.push_back(fooled ? 0.0f : 1.0f);
    if (fooled) expect.push_back(static_cast<std::uint32_t>(1000 + i));
  }
  const AdvDataset f = filter_successful(threshold_victim(), unfiltered_from_x0(x0));
  EXPECT_EQ(f.size(), 60u);
  EXPECT_EQ(f.source_index, expect);
  EXPECT_EQ(f.meta.retained(), 60u);
  EXPECT_TRUE(f.meta.effective);
  EXPECT_FALSE(filter_successful(threshold_victim(), unfiltered_from_x0(x0), 0.7).meta.effective);
}

TEST(Filter, BoundaryTieCountsAsCorrect) {
  const AdvDataset f = filter_successful(threshold_victim(), unfiltered_from_x0({0.25f, 0.2499f}));
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f.source_index[0], 1001u);
}

TEST(Filter, WrongCheckpointIsRejected) {
  const AdvDataset d = unfiltered_from_x0({0.0f});
  EXPECT_THROW(filter_successful(threshold_victim("other"), d), CheckpointMismatchError);
  Victim b = threshold_victim();
  b.arch = ArchitectureId::VictimB;
  EXPECT_THROW(filter_successful(b, d), CheckpointMismatchError);
}

TEST(Tasks, BalancesToSmallestClass) {
  const std::vector<AdvDataset> ds = {
      fake_dataset(AttackSpec::fgsm(Norm::Linf, 0.1), ArchitectureId::VictimA, 120, 30),
      fake_dataset(AttackSpec::deepfool(Norm::Linf, 0.1), ArchitectureId::VictimA, 80, 40),
      fake_dataset(AttackSpec::carlini_wagner(0.1, 0.1), ArchitectureId::VictimA, 100, 50)};
  const AttributionTask t = assemble_task(ds, TaskKind::AttackAlgorithm, 1);
  EXPECT_EQ(t.n_classes(), 3u);
  EXPECT_EQ(t.train.size(), 240u);
  EXPECT_EQ(t.test.size(), 90u);
  EXPECT_EQ(t.train.x.shape(), (Shape{240, 2}));
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(std::count(t.train.labels.begin(), t.train.labels.end(), c), 80);
    EXPECT_EQ(std::count(t.test.labels.begin(), t.test.labels.end(), c), 30);
  }
  EXPECT_EQ(t.class_labels, (std::vector<std::string>{"FGSM-Linf", "DeepFool-Linf", "CW-L2"}));
  EXPECT_DOUBLE_EQ(t.chance(), 1.0 / 3.0);
}

TEST(Tasks, SeededAndCapped) {
  const std::vector<AdvDataset> ds = {
      fake_dataset(AttackSpec::fgsm(Norm::Linf, 0.1), ArchitectureId::VictimA, 50, 20),
      fake_dataset(AttackSpec::fgsm(Norm::Linf, 0.2), ArchitectureId::VictimA, 50, 20)};
  const AttributionTask a = assemble_task(ds, TaskKind::Hyperparameter, 5, {10, 4});
  const AttributionTask b = assemble_task(ds, TaskKind::Hyperparameter, 5, {10, 4});
  const AttributionTask c = assemble_task(ds, TaskKind::Hyperparameter, 6, {10, 4});
  EXPECT_EQ(a.train.size(), 20u);
  EXPECT_EQ(a.test.size(), 8u);
  EXPECT_EQ(a.train.source_index, b.train.source_index);
  EXPECT_TRUE(bit_identical(a.train.x, b.train.x));
  EXPECT_NE(a.train.source_index, c.train.source_index);
  EXPECT_EQ(a.class_labels, (std::vector<std::string>{"eps=0.1", "eps=0.2"}));
}

// Each split draws only from the same split of every dataset, never twice.
TEST(TaskProperty, SplitsDrawOnlyFromTheirOwnSide) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n_train = 10 + seed * 3, n_test = 5 + seed;
    const std::vector<AdvDataset> ds = {
        fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, n_train, n_test),
        fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimB, n_train + 7, n_test + 2)};
    const AttributionTask t = assemble_task(ds, TaskKind::Model, seed);
    for (std::uint32_t s : t.train.source_index) EXPECT_LT(s, 1000u + n_train + 7);
    for (std::size_t i = 0; i < t.test.size(); ++i) {
      const std::uint32_t s = t.test.source_index[i];
      const std::size_t limit = t.test.labels[i] == 0 ? n_train : n_train + 7;
      EXPECT_GE(s, 1000u + limit);
    }
    std::set<std::pair<int, std::uint32_t>> train_keys, test_keys;
    for (std::size_t i = 0; i < t.train.size(); ++i) train_keys.insert({t.train.labels[i], t.train.source_index[i]});
    for (std::size_t i = 0; i < t.test.size(); ++i) test_keys.insert({t.test.labels[i], t.test.source_index[i]});
    EXPECT_EQ(train_keys.size(), t.train.size());
    EXPECT_EQ(test_keys.size(), t.test.size());
    for (const auto& k : test_keys) EXPECT_FALSE(train_keys.count(k));
    EXPECT_EQ(std::count(t.train.labels.begin(), t.train.labels.end(), 0),
              std::count(t.train.labels.begin(), t.train.labels.end(), 1));
  }
}

TEST(Tasks, IncompatibleMixesAreRejected) {
  const auto fg = [](double e, ArchitectureId v) {
    return fake_dataset(AttackSpec::fgsm(Norm::Linf, e), v, 5, 5);
  };
  const std::vector<AdvDataset> two_victims = {fg(0.1, ArchitectureId::VictimA), fg(0.2, ArchitectureId::VictimB)};
  EXPECT_THROW(assemble_task(two_victims, TaskKind::Hyperparameter, 0), ConfigError);
  EXPECT_THROW(assemble_task(two_victims, TaskKind::Model, 0), ConfigError);
  const std::vector<AdvDataset> same = {fg(0.1, ArchitectureId::VictimA), fg(0.1, ArchitectureId::VictimA)};
  EXPECT_THROW(assemble_task(same, TaskKind::Hyperparameter, 0), ConfigError);
  const std::vector<AdvDataset> one = {fg(0.1, ArchitectureId::VictimA)};
  EXPECT_THROW(assemble_task(one, TaskKind::Hyperparameter, 0), ConfigError);

  std::vector<AdvDataset> unfiltered = {fg(0.1, ArchitectureId::VictimA), fg(0.2, ArchitectureId::VictimA)};
  unfiltered[1].meta.filtered = false;
  EXPECT_THROW(assemble_task(unfiltered, TaskKind::Hyperparameter, 0), ConfigError);

  std::vector<AdvDataset> no_test = {fg(0.1, ArchitectureId::VictimA),
                                     fake_dataset(AttackSpec::fgsm(Norm::Linf, 0.2), ArchitectureId::VictimA, 5, 0)};
  EXPECT_THROW(assemble_task(no_test, TaskKind::Hyperparameter, 0), ConfigError);
}

TEST(Tasks, IneffectiveDatasetIsWarnedAbout) {
  std::vector<AdvDataset> ds = {
      fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, 5, 5),
      fake_dataset(AttackSpec::fgsm(Norm::Linf, 0.1), ArchitectureId::VictimA, 5, 5)};
  ds[0].meta.effective = false;
  const AttributionTask t = assemble_task(ds, TaskKind::Norm, 0);
  ASSERT_EQ(t.warnings.size(), 1u);
  EXPECT_NE(t.warnings[0].find("FGSM-L2-eps1-VictimA"), std::string::npos);
}

TEST(Tasks, NegativeControlSplitsOneDatasetInHalves) {
  const AdvDataset d = fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, 41, 20);
  const AttributionTask t = assemble_negative_control(d, 3);
  EXPECT_EQ(t.kind, TaskKind::NegativeControl);
  EXPECT_EQ(t.train.size(), 40u);
  EXPECT_EQ(t.test.size(), 20u);
  std::set<std::uint32_t> seen(t.train.source_index.begin(), t.train.source_index.end());
  EXPECT_EQ(seen.size(), 40u);
}

TEST(Bins, OneSamplePerBin) {
  const std::vector<AdvDataset> ds = {
      fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, 3, 0, {0.1, 0.5, 0.9})};
  const std::vector<double> edges = {0.0, 0.33, 0.66, 1.0};
  const MagnitudeBins bins = bin_by_magnitude(ds, edges);
  EXPECT_EQ(bins.occupancy[0], (std::vector<std::size_t>{1, 1, 1}));
  EXPECT_EQ(bins.flagged, (std::vector<bool>{false, false, false}));
  EXPECT_EQ(bins.slices[0][1].norms[0].mean_abs, 0.5);
}

TEST(Bins, LeftClosedEdgesAndClosedLastBin) {
  const std::vector<AdvDataset> ds = {
      fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, 2, 0, {0.33, 1.0})};
  const std::vector<double> edges = {0.0, 0.33, 0.66, 1.0};
  const MagnitudeBins bins = bin_by_magnitude(ds, edges);
  EXPECT_EQ(bins.occupancy[0], (std::vector<std::size_t>{0, 1, 1}));
  EXPECT_EQ(bins.flagged, (std::vector<bool>{true, false, false}));
  EXPECT_EQ(bins.report().at("flagged")[0], true);
}

TEST(Bins, BadEdgesAreRejected) {
  const std::vector<AdvDataset> ds = {
      fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, 1, 0, {2.0})};
  const std::vector<double> descending = {1.0, 0.5};
  const std::vector<double> narrow = {0.0, 1.0};
  EXPECT_THROW(bin_by_magnitude(ds, descending), ConfigError);
  EXPECT_THROW(bin_by_magnitude(ds, narrow), ConfigError);
}

TEST(Persistence, RoundTripIsBitExact) {
  AdvDataset d = fake_dataset(AttackSpec::carlini_wagner(0.1, 0.01), ArchitectureId::VictimC, 4, 3,
                              {0.1, 1e-7, 3.0, 0.25, 0.5, 0.75, 1.0 / 3.0});
  d.x_adv[1] = -0.0f;
  d.x_adv[3] = 1.17549435e-38f;
  d.x_orig = d.x_adv;
  (*d.x_orig)[0] = 42.0f;
  const auto dir = std::filesystem::temp_directory_path() / "aatr_dataset_test";
  std::filesystem::remove_all(dir);
  const std::string hash = save_dataset(d, dir / "cell.aatr");
  EXPECT_EQ(hash, fnv1a_hex(read_binary_file(dir / "cell.aatr")));
  const AdvDataset back = load_dataset(dir / "cell.aatr");
  EXPECT_TRUE(back == d);
  EXPECT_EQ(encode_dataset(back), encode_dataset(d));
  std::filesystem::remove_all(dir);
}

TEST(Persistence, CorruptFilesAreRejected) {
  const std::string bytes =
      encode_dataset(fake_dataset(AttackSpec::fgsm(Norm::L2, 1.0), ArchitectureId::VictimA, 3, 2));
  EXPECT_THROW(decode_dataset("ZZZZ1" + bytes.substr(5)), BadFormatError);
  EXPECT_THROW(decode_dataset(bytes.substr(0, bytes.size() - 4)), TruncatedError);
  EXPECT_THROW(decode_dataset(encode_container({{"format", "something-else"}}, std::vector<float>{})),
               BadFormatError);
  Container c = decode_container(bytes);
  c.payload.resize(c.payload.size() - 2);
  EXPECT_THROW(decode_dataset(encode_container(c.meta, c.payload)), BadFormatError);
}

TEST(Generate, GridIsDeterministicAcrossJobCounts) {
  const SourceData source = synthetic_digits(60, 30, 1);
  std::vector<Victim> victims;
  for (ArchitectureId a : {ArchitectureId::VictimA, ArchitectureId::VictimC}) {
    victims.push_back({a, build_model(a, source.train.sample_shape(), 10, 3), "h-" + to_string(a)});
  }
  GridConfig cfg;
  cfg.families = {{Algorithm::FGSM, Norm::Linf, {0.1, 0.2}, {}}, {Algorithm::DeepFool, Norm::L2, {0.1}, {}}};
  cfg.victims = {ArchitectureId::VictimA, ArchitectureId::VictimC};
  cfg.train_attempts = 4;
  cfg.test_attempts = 2;
  cfg.deepfool_max_iter = 5;
  cfg.keep_originals = true;

  std::vector<std::string> seen;
  GenerateOptions opt{7, 1, "cfg", [&](const AdvDataset& d) { seen.push_back(d.meta.cell_id()); }};
  const auto serial = generate_grid(cfg, victims, source, opt);
  opt.jobs = 3;
  opt.on_cell = nullptr;
  const auto parallel = generate_grid(cfg, victims, source, opt);
  ASSERT_EQ(serial.size(), 6u);
  ASSERT_EQ(parallel.size(), 6u);
  const auto cells = grid_cells(cfg);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_TRUE(serial[i] == parallel[i]) << cells[i].id();
    EXPECT_EQ(serial[i].meta.cell_id(), cells[i].id());
    EXPECT_EQ(seen[i], cells[i].id());
    EXPECT_TRUE(serial[i].meta.filtered);
    EXPECT_LE(serial[i].meta.attempted_train, 4u);
    EXPECT_EQ(serial[i].meta.config_hash, "cfg");
    for (std::size_t k = 0; k < serial[i].size(); ++k) {
      EXPECT_NE(serial[i].victim_pred[k], serial[i].y_true[k]);
      EXPECT_EQ(source.train.labels.size() + source.test.labels.size() > serial[i].source_index[k], true);
    }
  }

  std::vector<Victim> only_a = {victims[0]};
  EXPECT_THROW(generate_grid(cfg, only_a, source, opt), ConfigError);
}
