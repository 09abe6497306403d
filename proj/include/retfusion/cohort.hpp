#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "retfusion/common.hpp"
#include "retfusion/image.hpp"

namespace retfusion::cohort {

enum class Gender { male, female };
enum class Eye { left, right, unknown };
enum class Subset { train, validation, test };

std::string to_string(Subset s);
Subset subset_from_string(const std::string& s);

struct ImageSample {
  std::string image_id;
  std::string patient_id;
  Eye eye = Eye::unknown;
  std::string path;
};

struct PatientRecord {
  std::string patient_id;
  double age = 0;
  Gender gender = Gender::male;
  bool hypertension = false;
  bool diabetes = false;
  std::vector<ImageSample> images;
};

// Model input coding for gender: male -> 0, female -> 1.
inline double gender_code(Gender g) { return g == Gender::female ? 1.0 : 0.0; }

// CSV manifest, one row per image:
//   patient_id,image_path,eye,age,gender,hypertension,diabetes
// Rows of one patient are grouped into a single record. When check_files is
// set, every image_path must exist on disk.
std::vector<PatientRecord> load_manifest(const std::string& path, bool check_files = true);
void write_manifest(const std::string& path, const std::vector<PatientRecord>& records);

struct SplitAssignment {
  std::map<std::string, Subset> subset_of;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{};  // train, validation, test
  std::vector<std::string> warnings;
};

// Patient-level split stratified on (hypertension x diabetes). Validation and
// test sizes are the nearest integers to n*ratio; remaining patients go to
// train. Deterministic in (records, ratios, seed).
SplitAssignment stratified_patient_split(const std::vector<PatientRecord>& records,
                                         const std::array<double, 3>& ratios,
                                         std::uint64_t seed);

void write_split_csv(const std::string& path, const SplitAssignment& split);
SplitAssignment read_split_csv(const std::string& path);

std::vector<PatientRecord> subset_records(const std::vector<PatientRecord>& records,
                                          const SplitAssignment& split, Subset which);

struct CellStats {
  int n = 0;
  std::optional<double> age_mean;
  std::optional<double> age_std;  // sample std, absent when n < 2
  std::optional<std::pair<double, double>> age_ci;  // mean +/- 1.96*std/sqrt(n)
  int diabetes_count = 0;
  double diabetes_pct = 0;
};

// Cells over hypertension status {negative, positive, all} x gender
// {male, female, all}; index 2 means "all".
struct CohortSummary {
  std::array<std::array<CellStats, 3>, 3> cells;  // [htn][gender]
  int total = 0;

  const CellStats& cell(int htn, int gender) const { return cells[htn][gender]; }
};

CohortSummary cohort_summary(const std::vector<PatientRecord>& records);
std::string summary_table(const CohortSummary& s);

struct SyntheticConfig {
  int n_patients = 100;
  double image_signal = 1.0;  // strength of the label-linked lesion intensity
  double age_signal = 1.0;    // strength of the label-linked age shift
  double htn_rate = 0.5;
  double dm_given_htn = 0.8;
  double dm_given_no_htn = 0.2;
  double female_rate = 0.5;
  int image_size = 64;
  int min_images_per_patient = 1;
  int max_images_per_patient = 2;
  std::uint64_t seed = 0;
};

// Emits ppm "fundus" images (disc + vessel strokes + label-linked lesions)
// under out_dir/images and a manifest at out_dir/manifest.csv. Byte-identical
// output for identical config.
std::vector<PatientRecord> generate_synthetic_cohort(const SyntheticConfig& cfg,
                                                     const std::string& out_dir,
                                                     bool write_images = true);

}  // namespace retfusion::cohort
