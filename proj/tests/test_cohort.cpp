#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "retfusion/cohort.hpp"

using namespace retfusion;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream out(p);
  out << body;
}

// Synthesizes patient records directly (no images on disk).
std::vector<cohort::PatientRecord> make_records(int n, double htn_rate, double dm_rate,
                                                std::uint64_t seed) {
  std::vector<cohort::PatientRecord> recs;
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < n; ++i) {
    cohort::PatientRecord r;
    char id[16];
    std::snprintf(id, sizeof(id), "P%05d", i);
    r.patient_id = id;
    r.age = 40 + 40 * u(rng);
    r.gender = u(rng) < 0.5 ? cohort::Gender::male : cohort::Gender::female;
    r.hypertension = u(rng) < htn_rate;
    r.diabetes = u(rng) < dm_rate;
    r.images.push_back({std::string(id) + "_1", r.patient_id, cohort::Eye::left,
                        "images/" + std::string(id) + "_1.ppm"});
    recs.push_back(r);
  }
  return recs;
}

}  // namespace

TEST_CASE("manifest parsing groups rows per patient") {
  fs::path dir = temp_dir("cohort_manifest");
  write_file(dir / "manifest.csv",
             "patient_id,image_path,eye,age,gender,hypertension,diabetes\n"
             "P1,img/a.ppm,L,63.5,female,1,0\n"
             "P1,img/b.ppm,R,63.5,female,1,0\n"
             "P2,img/c.ppm,U,51.25,male,0,1\n");
  auto recs = cohort::load_manifest((dir / "manifest.csv").string(), false);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].patient_id == "P1");
  CHECK(recs[0].images.size() == 2);
  CHECK(recs[0].age == doctest::Approx(63.5));
  CHECK(recs[0].gender == cohort::Gender::female);
  CHECK(recs[0].hypertension);
  CHECK_FALSE(recs[0].diabetes);
  CHECK(recs[0].images[0].image_id == "a");
  CHECK(recs[0].images[1].eye == cohort::Eye::right);
  CHECK(recs[1].diabetes);
}

TEST_CASE("manifest validation errors") {
  fs::path dir = temp_dir("cohort_manifest_bad");
  const std::string header = "patient_id,image_path,eye,age,gender,hypertension,diabetes\n";
  SUBCASE("bad header") {
    write_file(dir / "m.csv", "id,path\nP1,a.ppm\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), false), ValidationError);
  }
  SUBCASE("non-positive age") {
    write_file(dir / "m.csv", header + "P1,a.ppm,L,0,male,0,0\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), false), ValidationError);
  }
  SUBCASE("unknown gender") {
    write_file(dir / "m.csv", header + "P1,a.ppm,L,50,unknown,0,0\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), false), ValidationError);
  }
  SUBCASE("non-binary label") {
    write_file(dir / "m.csv", header + "P1,a.ppm,L,50,male,2,0\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), false), ValidationError);
  }
  SUBCASE("duplicate image id") {
    write_file(dir / "m.csv", header + "P1,a.ppm,L,50,male,0,0\nP1,x/a.ppm,R,50,male,0,0\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), false), ValidationError);
  }
  SUBCASE("conflicting demographics for one patient") {
    write_file(dir / "m.csv", header + "P1,a.ppm,L,50,male,0,0\nP1,b.ppm,R,51,male,0,0\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), false), ValidationError);
  }
  SUBCASE("missing image file when checking") {
    write_file(dir / "m.csv", header + "P1,nowhere.ppm,L,50,male,0,0\n");
    CHECK_THROWS_AS(cohort::load_manifest((dir / "m.csv").string(), true), ValidationError);
  }
}

TEST_CASE("manifest write/load round trip") {
  fs::path dir = temp_dir("cohort_roundtrip");
  auto recs = make_records(20, 0.4, 0.3, 1);
  cohort::write_manifest((dir / "m.csv").string(), recs);
  auto back = cohort::load_manifest((dir / "m.csv").string(), false);
  REQUIRE(back.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].patient_id == recs[i].patient_id);
    CHECK(back[i].hypertension == recs[i].hypertension);
    CHECK(back[i].gender == recs[i].gender);
  }
}

TEST_CASE("split reproduces the 1243 -> 745/249/249 sizing") {
  auto recs = make_records(1243, 0.45, 0.5, 2);
  auto split = cohort::stratified_patient_split(recs, {0.6, 0.2, 0.2}, 11);
  int n[3] = {0, 0, 0};
  for (const auto& [id, s] : split.subset_of) ++n[static_cast<int>(s)];
  CHECK(n[0] == 745);
  CHECK(n[1] == 249);
  CHECK(n[2] == 249);
}

TEST_CASE("split is a deterministic partition with bounded prevalence drift") {
  auto recs = make_records(600, 0.4, 0.35, 3);
  auto split = cohort::stratified_patient_split(recs, {0.6, 0.2, 0.2}, 7);
  auto split2 = cohort::stratified_patient_split(recs, {0.6, 0.2, 0.2}, 7);
  CHECK(split.subset_of == split2.subset_of);
  auto split3 = cohort::stratified_patient_split(recs, {0.6, 0.2, 0.2}, 8);
  CHECK(split.subset_of != split3.subset_of);

  // exhaustive partition
  REQUIRE(split.subset_of.size() == recs.size());
  double global_htn = 0;
  for (const auto& r : recs) global_htn += r.hypertension;
  global_htn /= recs.size();
  for (int s = 0; s < 3; ++s) {
    double n = 0, htn = 0;
    for (const auto& r : recs)
      if (static_cast<int>(split.subset_of.at(r.patient_id)) == s) {
        ++n;
        htn += r.hypertension;
      }
    REQUIRE(n > 0);
    CHECK(std::abs(htn / n - global_htn) <= 0.02);
  }
}

TEST_CASE("split csv round trip and subset_records") {
  fs::path dir = temp_dir("cohort_split");
  auto recs = make_records(50, 0.5, 0.5, 4);
  auto split = cohort::stratified_patient_split(recs, {0.6, 0.2, 0.2}, 1);
  cohort::write_split_csv((dir / "split.csv").string(), split);
  auto back = cohort::read_split_csv((dir / "split.csv").string());
  CHECK(back.subset_of == split.subset_of);

  auto train = cohort::subset_records(recs, split, cohort::Subset::train);
  auto val = cohort::subset_records(recs, split, cohort::Subset::validation);
  auto test = cohort::subset_records(recs, split, cohort::Subset::test);
  CHECK(train.size() + val.size() + test.size() == recs.size());
  std::set<std::string> seen;
  for (const auto* grp : {&train, &val, &test})
    for (const auto& r : *grp) CHECK(seen.insert(r.patient_id).second);
}

TEST_CASE("tiny stratum yields a warning, not an error") {
  auto recs = make_records(10, 0.0, 0.0, 5);
  recs[0].hypertension = true;  // a stratum of size 1
  auto split = cohort::stratified_patient_split(recs, {0.6, 0.2, 0.2}, 1);
  CHECK(split.subset_of.size() == 10);
  CHECK(!split.warnings.empty());
}

TEST_CASE("cohort summary cell statistics match hand-computed values") {
  // five male non-HTN patients with known ages
  std::vector<cohort::PatientRecord> recs;
  const double ages[5] = {52.0, 61.5, 47.25, 70.0, 58.0};
  for (int i = 0; i < 5; ++i) {
    cohort::PatientRecord r;
    r.patient_id = "P" + std::to_string(i);
    r.age = ages[i];
    r.gender = cohort::Gender::male;
    r.hypertension = false;
    r.diabetes = i < 2;
    recs.push_back(r);
  }
  auto s = cohort::cohort_summary(recs);
  const auto& cell = s.cell(0, 0);  // HTN-negative, male
  REQUIRE(cell.n == 5);
  CHECK(*cell.age_mean == doctest::Approx(57.75).epsilon(1e-12));
  CHECK(*cell.age_std == doctest::Approx(8.7678389583750906).epsilon(1e-12));
  CHECK(cell.age_ci->first == doctest::Approx(50.06465030073452).epsilon(1e-9));
  CHECK(cell.age_ci->second == doctest::Approx(65.435349699265473).epsilon(1e-9));
  CHECK(cell.diabetes_count == 2);
  CHECK(cell.diabetes_pct == doctest::Approx(40.0));
  // single-patient cell has no std/CI
  recs[0].gender = cohort::Gender::female;
  auto s2 = cohort::cohort_summary(recs);
  CHECK(s2.cell(0, 1).n == 1);
  CHECK(s2.cell(0, 1).age_mean.has_value());
  CHECK_FALSE(s2.cell(0, 1).age_std.has_value());
  CHECK_FALSE(s2.cell(0, 1).age_ci.has_value());
  CHECK(s2.cell(2, 2).n == 5);  // the all/all margin
}

TEST_CASE("synthetic cohort generation is byte-deterministic") {
  fs::path a = temp_dir("cohort_syn_a");
  fs::path b = temp_dir("cohort_syn_b");
  cohort::SyntheticConfig cfg;
  cfg.n_patients = 12;
  cfg.image_size = 24;
  cfg.seed = 9;
  auto ra = cohort::generate_synthetic_cohort(cfg, a.string());
  auto rb = cohort::generate_synthetic_cohort(cfg, b.string());
  REQUIRE(ra.size() == 12);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(a / "manifest.csv") != "");
  // manifests byte-identical up to the differing directory prefix
  std::string ma = slurp(a / "manifest.csv"), mb = slurp(b / "manifest.csv");
  std::string pa = a.string(), pb = b.string();
  size_t pos;
  while ((pos = ma.find(pa)) != std::string::npos) ma.replace(pos, pa.size(), "@");
  while ((pos = mb.find(pb)) != std::string::npos) mb.replace(pos, pb.size(), "@");
  CHECK(ma == mb);
  // image bytes identical too
  CHECK(slurp(a / "images" / (ra[0].images[0].image_id + ".ppm")) ==
        slurp(b / "images" / (rb[0].images[0].image_id + ".ppm")));
  // loading back gives the generated records
  auto loaded = cohort::load_manifest((a / "manifest.csv").string(), true);
  REQUIRE(loaded.size() == ra.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(loaded[i].hypertension == ra[i].hypertension);
    CHECK(loaded[i].images.size() == ra[i].images.size());
  }
}

TEST_CASE("planted image signal raises lesion-region intensity for positives") {
  fs::path dir = temp_dir("cohort_syn_signal");
  cohort::SyntheticConfig cfg;
  cfg.n_patients = 80;
  cfg.image_size = 32;
  cfg.image_signal = 1.5;
  cfg.seed = 13;
  auto recs = cohort::generate_synthetic_cohort(cfg, dir.string());
  double pos_mean = 0, neg_mean = 0;
  int pos_n = 0, neg_n = 0;
  for (const auto& r : recs) {
    Image img = read_ppm(r.images[0].path);
    double m = 0;
    for (double v : img.data) m += v;
    m /= static_cast<double>(img.data.size());
    if (r.hypertension) {
      pos_mean += m;
      ++pos_n;
    } else {
      neg_mean += m;
      ++neg_n;
    }
  }
  REQUIRE(pos_n > 5);
  REQUIRE(neg_n > 5);
  CHECK(pos_mean / pos_n > neg_mean / neg_n);
}
