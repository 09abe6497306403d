#include "retfusion/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace retfusion::cohort {

std::string to_string(Subset s) {
  switch (s) {
    case Subset::train: return "train";
    case Subset::validation: return "validation";
    case Subset::test: return "test";
  }
  return "?";
}

Subset subset_from_string(const std::string& s) {
  if (s == "train") return Subset::train;
  if (s == "validation") return Subset::validation;
  if (s == "test") return Subset::test;
  throw ValidationError("unknown subset name: " + s);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_bool01(const std::string& s, const std::string& field, int line_no) {
  if (s == "0") return false;
  if (s == "1") return true;
  throw ValidationError("line " + std::to_string(line_no) + ": field " + field +
                        " must be 0 or 1, got '" + s + "'");
}

}  // namespace

std::vector<PatientRecord> load_manifest(const std::string& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty manifest: " + path);
  const std::string expected = "patient_id,image_path,eye,age,gender,hypertension,diabetes";
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != expected)
    throw ValidationError("manifest header mismatch, expected '" + expected + "'");

  std::vector<PatientRecord> records;
  std::map<std::string, size_t> index_of;
  std::map<std::string, int> image_ids;
  fs::path base = fs::path(path).parent_path();
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != 7)
      throw ValidationError("line " + std::to_string(line_no) + ": expected 7 fields, got " +
                            std::to_string(f.size()));
    PatientRecord rec;
    rec.patient_id = f[0];
    if (rec.patient_id.empty())
      throw ValidationError("line " + std::to_string(line_no) + ": empty patient_id");
    double age;
    try {
      age = std::stod(f[3]);
    } catch (const std::exception&) {
      throw ValidationError("line " + std::to_string(line_no) + ": bad age '" + f[3] + "'");
    }
    if (!(age > 0) || !std::isfinite(age))
      throw ValidationError("line " + std::to_string(line_no) + ": age must be finite and positive, got " + f[3]);
    rec.age = age;
    if (f[4] == "male") rec.gender = Gender::male;
    else if (f[4] == "female") rec.gender = Gender::female;
    else throw ValidationError("line " + std::to_string(line_no) + ": bad gender '" + f[4] + "'");
    rec.hypertension = parse_bool01(f[5], "hypertension", line_no);
    rec.diabetes = parse_bool01(f[6], "diabetes", line_no);

    ImageSample img;
    img.patient_id = rec.patient_id;
    img.path = f[1];
    if (f[2] == "L") img.eye = Eye::left;
    else if (f[2] == "R") img.eye = Eye::right;
    else if (f[2] == "U") img.eye = Eye::unknown;
    else throw ValidationError("line " + std::to_string(line_no) + ": eye must be L, R or U");
    img.image_id = fs::path(img.path).stem().string();
    if (++image_ids[img.image_id] > 1)
      throw ValidationError("duplicate image_id: " + img.image_id);
    if (check_files) {
      fs::path p = img.path;
      if (p.is_relative()) p = base / p;
      if (!fs::exists(p)) throw ValidationError("missing image file: " + img.path);
      img.path = p.string();
    }

    auto it = index_of.find(rec.patient_id);
    if (it == index_of.end()) {
      index_of[rec.patient_id] = records.size();
      rec.images.push_back(img);
      records.push_back(std::move(rec));
    } else {
      PatientRecord& prev = records[it->second];
      if (prev.age != rec.age || prev.gender != rec.gender ||
          prev.hypertension != rec.hypertension || prev.diabetes != rec.diabetes)
        throw ValidationError("duplicate patient_id with conflicting attributes: " + rec.patient_id);
      prev.images.push_back(img);
    }
  }
  if (records.empty()) throw ValidationError("manifest has no rows: " + path);
  return records;
}

void write_manifest(const std::string& path, const std::vector<PatientRecord>& records) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write manifest: " + path);
  out << "patient_id,image_path,eye,age,gender,hypertension,diabetes\n";
  char agebuf[32];
  for (const auto& rec : records) {
    std::snprintf(agebuf, sizeof(agebuf), "%.2f", rec.age);
    for (const auto& img : rec.images) {
      out << rec.patient_id << ',' << img.path << ','
          << (img.eye == Eye::left ? 'L' : img.eye == Eye::right ? 'R' : 'U') << ',' << agebuf
          << ',' << (rec.gender == Gender::male ? "male" : "female") << ','
          << (rec.hypertension ? 1 : 0) << ',' << (rec.diabetes ? 1 : 0) << '\n';
    }
  }
}

SplitAssignment stratified_patient_split(const std::vector<PatientRecord>& records,
                                         const std::array<double, 3>& ratios,
                                         std::uint64_t seed) {
  if (records.empty()) throw ValidationError("cannot split an empty cohort");
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw ValidationError("split ratios must sum to 1, got " + std::to_string(sum));
  for (double r : ratios)
    if (r < 0) throw ValidationError("split ratios must be non-negative");

  const auto n = static_cast<long>(records.size());
  long t_val = std::llround(n * ratios[1]);
  long t_test = std::llround(n * ratios[2]);
  if (t_val + t_test > n) t_test = n - t_val;

  // Strata over (hypertension, diabetes), fixed order.
  std::array<std::vector<size_t>, 4> strata;
  for (size_t i = 0; i < records.size(); ++i) {
    int s = (records[i].hypertension ? 2 : 0) + (records[i].diabetes ? 1 : 0);
    strata[s].push_back(i);
  }
  for (int s = 0; s < 4; ++s) {
    Rng rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
    std::shuffle(strata[s].begin(), strata[s].end(), rng);
  }

  // Largest-remainder apportionment per subset against the global targets.
  std::array<long, 4> val_cnt{}, test_cnt{};
  auto apportion = [&strata](long target, const std::array<long, 4>& taken,
                             std::array<long, 4>& out) {
    std::array<double, 4> quota;
    long assigned = 0;
    long total = 0;
    for (int s = 0; s < 4; ++s) total += static_cast<long>(strata[s].size());
    long grand = 0;
    for (int s = 0; s < 4; ++s) grand += static_cast<long>(strata[s].size());
    for (int s = 0; s < 4; ++s) {
      quota[s] = grand ? static_cast<double>(strata[s].size()) * target / grand : 0.0;
      long cap = static_cast<long>(strata[s].size()) - taken[s];
      out[s] = std::min(static_cast<long>(std::floor(quota[s])), cap);
      assigned += out[s];
    }
    std::array<int, 4> order{0, 1, 2, 3};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      double fa = quota[a] - std::floor(quota[a]);
      double fb = quota[b] - std::floor(quota[b]);
      if (fa != fb) return fa > fb;
      return a < b;
    });
    while (assigned < target) {
      bool progressed = false;
      for (int s : order) {
        if (assigned >= target) break;
        long cap = static_cast<long>(strata[s].size()) - taken[s];
        if (out[s] < cap) {
          ++out[s];
          ++assigned;
          progressed = true;
        }
      }
      if (!progressed) break;  // no capacity anywhere
    }
  };
  std::array<long, 4> none{};
  apportion(t_val, none, val_cnt);
  std::array<long, 4> taken = val_cnt;
  apportion(t_test, taken, test_cnt);

  SplitAssignment split;
  split.seed = seed;
  split.ratios = ratios;
  for (int s = 0; s < 4; ++s) {
    const auto& idx = strata[s];
    for (size_t k = 0; k < idx.size(); ++k) {
      Subset sub;
      if (static_cast<long>(k) < val_cnt[s]) sub = Subset::validation;
      else if (static_cast<long>(k) < val_cnt[s] + test_cnt[s]) sub = Subset::test;
      else sub = Subset::train;
      split.subset_of[records[idx[k]].patient_id] = sub;
    }
    long train_s = static_cast<long>(idx.size()) - val_cnt[s] - test_cnt[s];
    if (!idx.empty() &&
        ((ratios[0] > 0 && train_s == 0) || (ratios[1] > 0 && val_cnt[s] == 0) ||
         (ratios[2] > 0 && test_cnt[s] == 0)))
      split.warnings.push_back("stratum " + std::to_string(s) +
                               " too small to cover every subset (" +
                               std::to_string(idx.size()) + " patients)");
  }
  return split;
}

void write_split_csv(const std::string& path, const SplitAssignment& split) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write split file: " + path);
  out << "patient_id,subset\n";
  for (const auto& [pid, sub] : split.subset_of) out << pid << ',' << to_string(sub) << '\n';
}

SplitAssignment read_split_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open split file: " + path);
  std::string line;
  std::getline(in, line);
  SplitAssignment split;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != 2) throw ValidationError("bad split row: " + line);
    split.subset_of[f[0]] = subset_from_string(f[1]);
  }
  return split;
}

std::vector<PatientRecord> subset_records(const std::vector<PatientRecord>& records,
                                          const SplitAssignment& split, Subset which) {
  std::vector<PatientRecord> out;
  for (const auto& rec : records) {
    auto it = split.subset_of.find(rec.patient_id);
    if (it == split.subset_of.end())
      throw ValidationError("patient missing from split assignment: " + rec.patient_id);
    if (it->second == which) out.push_back(rec);
  }
  return out;
}

CohortSummary cohort_summary(const std::vector<PatientRecord>& records) {
  if (records.empty()) throw ValidationError("cohort_summary needs a non-empty cohort");
  CohortSummary s;
  s.total = static_cast<int>(records.size());
  std::array<std::array<std::vector<double>, 3>, 3> ages;
  for (const auto& rec : records) {
    int h = rec.hypertension ? 1 : 0;
    int g = rec.gender == Gender::male ? 0 : 1;
    for (int hi : {h, 2})
      for (int gi : {g, 2}) {
        CellStats& c = s.cells[hi][gi];
        ++c.n;
        if (rec.diabetes) ++c.diabetes_count;
        ages[hi][gi].push_back(rec.age);
      }
  }
  for (int hi = 0; hi < 3; ++hi)
    for (int gi = 0; gi < 3; ++gi) {
      CellStats& c = s.cells[hi][gi];
      if (c.n > 0) c.diabetes_pct = 100.0 * c.diabetes_count / c.n;
      const auto& a = ages[hi][gi];
      if (a.empty()) continue;
      double mean = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
      c.age_mean = mean;
      if (a.size() >= 2) {
        double ss = 0;
        for (double v : a) ss += (v - mean) * (v - mean);
        double sd = std::sqrt(ss / (a.size() - 1));
        c.age_std = sd;
        double half = 1.96 * sd / std::sqrt(static_cast<double>(a.size()));
        c.age_ci = {mean - half, mean + half};
      }
    }
  return s;
}

std::string summary_table(const CohortSummary& s) {
  std::ostringstream out;
  auto cell_line = [&out](const std::string& label, const CellStats& c) {
    out << "  " << label << ": n=" << c.n;
    if (c.age_mean) {
      char buf[96];
      if (c.age_std && c.age_ci)
        std::snprintf(buf, sizeof(buf), ", age %.1f±%.1f [%.1f, %.1f]", *c.age_mean,
                      *c.age_std, c.age_ci->first, c.age_ci->second);
      else
        std::snprintf(buf, sizeof(buf), ", age %.1f", *c.age_mean);
      out << buf;
    }
    char dbuf[48];
    std::snprintf(dbuf, sizeof(dbuf), ", diabetes %d (%.1f%%)", c.diabetes_count, c.diabetes_pct);
    out << dbuf << '\n';
  };
  static const char* htn_names[3] = {"non-hypertensive", "hypertensive", "all"};
  static const char* gender_names[3] = {"male", "female", "all"};
  out << "Cohort summary (" << s.total << " patients)\n";
  for (int hi : {1, 0, 2}) {
    out << htn_names[hi] << ":\n";
    for (int gi : {0, 1, 2}) cell_line(gender_names[gi], s.cell(hi, gi));
  }
  return out.str();
}

namespace {

void draw_disc(Image& img, double cx, double cy, double r, double intensity) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double d = std::hypot(x - cx, y - cy);
      if (d < r) {
        double f = intensity * (1.0 - d / r * 0.5);
        img.at(0, y, x) = std::min(1.0, img.at(0, y, x) + f);
        img.at(1, y, x) = std::min(1.0, img.at(1, y, x) + f * 0.85);
        img.at(2, y, x) = std::min(1.0, img.at(2, y, x) + f * 0.4);
      }
    }
}

void draw_stroke(Image& img, double x0, double y0, double x1, double y1, double width,
                 double darken) {
  int steps = static_cast<int>(std::hypot(x1 - x0, y1 - y0)) * 2 + 2;
  for (int i = 0; i <= steps; ++i) {
    double t = static_cast<double>(i) / steps;
    double px = x0 + t * (x1 - x0);
    double py = y0 + t * (y1 - y0);
    int lo = static_cast<int>(-width), hi = static_cast<int>(width);
    for (int dy = lo; dy <= hi; ++dy)
      for (int dx = lo; dx <= hi; ++dx) {
        int x = static_cast<int>(px) + dx, y = static_cast<int>(py) + dy;
        if (x >= 0 && x < img.width && y >= 0 && y < img.height && dx * dx + dy * dy <= width * width) {
          img.at(0, y, x) = std::max(0.0, img.at(0, y, x) - darken);
          img.at(1, y, x) = std::max(0.0, img.at(1, y, x) - darken * 0.6);
        }
      }
  }
}

}  // namespace

std::vector<PatientRecord> generate_synthetic_cohort(const SyntheticConfig& cfg,
                                                     const std::string& out_dir,
                                                     bool write_images) {
  if (cfg.n_patients < 2) throw ValidationError("synthetic cohort needs at least 2 patients");
  if (cfg.image_size < 8) throw ValidationError("synthetic image size too small");
  if (cfg.min_images_per_patient < 1 || cfg.max_images_per_patient < cfg.min_images_per_patient)
    throw ValidationError("invalid images-per-patient range");
  for (double p : {cfg.htn_rate, cfg.dm_given_htn, cfg.dm_given_no_htn, cfg.female_rate})
    if (p < 0 || p > 1) throw ValidationError("synthetic rates must lie in [0, 1]");

  fs::create_directories(fs::path(out_dir) / "images");
  std::vector<PatientRecord> records;
  records.reserve(cfg.n_patients);
  int sz = cfg.image_size;
  for (int i = 0; i < cfg.n_patients; ++i) {
    Rng rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    PatientRecord rec;
    char pid[16];
    std::snprintf(pid, sizeof(pid), "P%05d", i);
    rec.patient_id = pid;
    rec.hypertension = unif(rng) < cfg.htn_rate;
    rec.gender = unif(rng) < cfg.female_rate ? Gender::female : Gender::male;
    rec.diabetes = unif(rng) < (rec.hypertension ? cfg.dm_given_htn : cfg.dm_given_no_htn);
    double age = 55.0 + 8.0 * gauss(rng) + cfg.age_signal * (rec.hypertension ? 6.0 : -6.0);
    rec.age = std::clamp(age, 18.0, 95.0);

    std::uniform_int_distribution<int> n_img_dist(cfg.min_images_per_patient,
                                                  cfg.max_images_per_patient);
    int n_img = n_img_dist(rng);
    for (int j = 0; j < n_img; ++j) {
      Rng irng = make_rng(derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)),
                                      1000 + static_cast<std::uint64_t>(j)));
      std::uniform_real_distribution<double> iu(0.0, 1.0);
      std::normal_distribution<double> ig(0.0, 1.0);

      Image img(3, sz, sz);
      for (int y = 0; y < sz; ++y)
        for (int x = 0; x < sz; ++x) {
          double vign = 1.0 - 0.6 * std::hypot(x - sz / 2.0, y - sz / 2.0) / (sz / 1.4);
          img.at(0, y, x) = 0.30 * vign;
          img.at(1, y, x) = 0.12 * vign;
          img.at(2, y, x) = 0.05 * vign;
        }
      // optic disc
      double dcx = sz * (0.25 + 0.5 * iu(irng)), dcy = sz * (0.35 + 0.3 * iu(irng));
      draw_disc(img, dcx, dcy, sz / 8.0, 0.45);
      // vessel strokes radiating from the disc
      int n_vessels = 3 + static_cast<int>(iu(irng) * 3);
      for (int v = 0; v < n_vessels; ++v) {
        double ang = iu(irng) * 2 * M_PI;
        double len = sz * (0.3 + 0.4 * iu(irng));
        draw_stroke(img, dcx, dcy, dcx + len * std::cos(ang), dcy + len * std::sin(ang), 1.0,
                    0.10);
      }
      // label-linked lesion blobs
      double lesion = 0.20 + cfg.image_signal * (rec.hypertension ? 0.35 : 0.0) +
                      0.05 * ig(irng);
      for (int b = 0; b < 3; ++b) {
        double bx = sz * (0.15 + 0.7 * iu(irng)), by = sz * (0.15 + 0.7 * iu(irng));
        double br = sz * (0.04 + 0.04 * iu(irng));
        for (int y = 0; y < sz; ++y)
          for (int x = 0; x < sz; ++x) {
            double d = std::hypot(x - bx, y - by);
            if (d < br) {
              double f = std::max(0.0, lesion) * (1.0 - d / br);
              img.at(0, y, x) = std::clamp(img.at(0, y, x) + f, 0.0, 1.0);
              img.at(1, y, x) = std::clamp(img.at(1, y, x) + f * 0.8, 0.0, 1.0);
            }
          }
      }
      // sensor noise
      for (double& v : img.data) v = std::clamp(v + 0.02 * ig(irng), 0.0, 1.0);

      ImageSample sample;
      char iid[24];
      std::snprintf(iid, sizeof(iid), "P%05d_%d", i, j);
      sample.image_id = iid;
      sample.patient_id = rec.patient_id;
      sample.eye = j % 2 == 0 ? Eye::left : Eye::right;
      sample.path = (fs::path(out_dir) / "images" / (std::string(iid) + ".ppm")).string();
      if (write_images) write_ppm(sample.path, img);
      rec.images.push_back(sample);
    }
    records.push_back(std::move(rec));
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), records);
  return records;
}

}  // namespace retfusion::cohort
