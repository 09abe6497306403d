#include <doctest.h>

#include <filesystem>

#include "retfusion/fusion.hpp"

using namespace retfusion;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fusion::Sample make_sample(const std::string& id, int size, int label, std::uint64_t seed) {
  fusion::Sample s;
  s.image_id = id;
  s.patient_id = "pat_" + id;
  s.image = Image(3, size, size);
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : s.image.data) v = u(rng);
  // positives carry a brighter top-left block so tiny models can learn
  if (label == 1)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size / 2; ++y)
        for (int x = 0; x < size / 2; ++x) s.image.at(c, y, x) += 2.0;
  s.demo.age_std = label == 1 ? 1.0 + 0.2 * u(rng) : -1.0 + 0.2 * u(rng);
  s.demo.gender_code = (seed % 2) ? 1.0 : 0.0;
  s.label = label;
  s.diabetes = static_cast<int>(seed % 2);
  return s;
}

std::vector<fusion::Sample> make_batch(int n, int size, std::uint64_t seed) {
  std::vector<fusion::Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(make_sample("s" + std::to_string(i), size, i % 2, seed + i));
  return out;
}

fusion::FusionSpec tiny_spec(fusion::Strategy strategy) {
  fusion::FusionSpec spec;
  spec.strategy = strategy;
  spec.encoder.image_size = 12;
  return spec;
}

}  // namespace

TEST_CASE("strategy and head-kind names round trip") {
  using fusion::Strategy;
  for (Strategy s : {Strategy::intermediate, Strategy::prediction, Strategy::late,
                     Strategy::voting, Strategy::unimodal_fundus, Strategy::unimodal_demographic})
    CHECK(fusion::strategy_from_string(fusion::to_string(s)) == s);
  using fusion::HeadKind;
  for (HeadKind k : {HeadKind::fcnn, HeadKind::gradient_boosted_trees,
                     HeadKind::support_vector_machine, HeadKind::soft_vote})
    CHECK(fusion::head_kind_from_string(fusion::to_string(k)) == k);
  CHECK_THROWS_AS(fusion::strategy_from_string("bogus"), ValidationError);
}

TEST_CASE("spec check rejects inconsistent combinations") {
  auto spec = tiny_spec(fusion::Strategy::intermediate);
  spec.head_kind = fusion::HeadKind::soft_vote;  // only valid for voting
  CHECK_THROWS_AS(spec.check(), ValidationError);
  auto late = tiny_spec(fusion::Strategy::late);
  late.fundus_model_dir = "";  // prerequisite missing
  CHECK_THROWS_AS(late.check(), ValidationError);
  auto vote = tiny_spec(fusion::Strategy::voting);
  vote.head_kind = fusion::HeadKind::soft_vote;
  vote.fundus_model_dir = "a";
  vote.demographic_model_dir = "b";
  CHECK_THROWS_AS(vote.check(), ValidationError);  // intermediate dir missing
}

TEST_CASE("sigmoid is stable and exact at the center") {
  CHECK(fusion::sigmoid(0.0) == 0.5);
  CHECK(fusion::sigmoid(1000.0) == doctest::Approx(1.0));
  CHECK(fusion::sigmoid(-1000.0) == doctest::Approx(0.0));
  CHECK(fusion::sigmoid(2.0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
}

TEST_CASE("soft vote is the exact arithmetic mean") {
  CHECK(fusion::soft_vote(0.1, 0.5, 0.9) == (0.1 + 0.5 + 0.9) / 3.0);
}

TEST_CASE("train age stats use the sample standard deviation") {
  std::vector<cohort::PatientRecord> recs(5);
  const double ages[5] = {52.0, 61.5, 47.25, 70.0, 58.0};
  for (int i = 0; i < 5; ++i) {
    recs[static_cast<size_t>(i)].patient_id = "P" + std::to_string(i);
    recs[static_cast<size_t>(i)].age = ages[i];
  }
  auto [mean, sd] = fusion::train_age_stats(recs);
  CHECK(mean == doctest::Approx(57.75).epsilon(1e-12));
  CHECK(sd == doctest::Approx(8.7678389583750906).epsilon(1e-12));
}

TEST_CASE("intermediate fusion concatenation width is 40 (8 + 32)") {
  fusion::NeuralModel model(tiny_spec(fusion::Strategy::intermediate), 1);
  auto fusion_params = model.parameters_of("fusion");
  REQUIRE(!fusion_params.empty());
  CHECK(fusion_params[0]->value.rows() == 40);  // first linear layer input width
}

TEST_CASE("prediction fusion concatenation width is 2") {
  fusion::NeuralModel model(tiny_spec(fusion::Strategy::prediction), 1);
  auto fusion_params = model.parameters_of("fusion");
  REQUIRE(!fusion_params.empty());
  CHECK(fusion_params[0]->value.rows() == 2);
}

TEST_CASE("neural model forward shape and gradient routing") {
  fusion::NeuralModel model(tiny_spec(fusion::Strategy::intermediate), 2);
  auto batch = make_batch(4, 12, 10);
  nn::Matrix logits = model.forward(batch, true, nullptr);
  REQUIRE(logits.rows() == 4);
  REQUIRE(logits.cols() == 1);
  for (auto* p : model.parameters()) p->zero_grad();
  model.backward(nn::Matrix::Ones(4, 1));
  for (const char* block : {"fundus", "demographic", "fusion"}) {
    double g = 0;
    for (auto* p : model.parameters_of(block)) g += p->grad.norm();
    CHECK(g > 0);
  }
}

TEST_CASE("untrained models refuse to predict") {
  fusion::NeuralModel model(tiny_spec(fusion::Strategy::unimodal_demographic), 3);
  auto batch = make_batch(2, 12, 20);
  CHECK_THROWS_AS(model.predict_proba(batch), RuntimeFailure);
  model.mark_trained();
  auto preds = model.predict_proba(batch);
  REQUIRE(preds.size() == 2);
  for (const auto& r : preds) {
    CHECK(r.probability >= 0.0);
    CHECK(r.probability <= 1.0);
  }
}

TEST_CASE("neural model save/load preserves predictions exactly") {
  fs::path dir = temp_dir("fusion_saveload");
  fusion::NeuralModel model(tiny_spec(fusion::Strategy::intermediate), 4);
  model.stats().age_mean = 60;
  model.stats().age_std = 9;
  model.stats().preprocess.image_size = 12;
  model.mark_trained();
  auto batch = make_batch(3, 12, 30);
  auto before = model.predict_proba(batch);
  model.save((dir / "model").string());
  auto loaded = fusion::NeuralModel::load((dir / "model").string());
  CHECK(loaded->stats().age_mean == 60);
  CHECK(loaded->stats().preprocess.image_size == 12);
  auto after = loaded->predict_proba(batch);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(after[i].probability == before[i].probability);
}

TEST_CASE("tabular heads separate a linearly separable problem") {
  Rng rng = make_rng(40);
  std::uniform_real_distribution<double> u(-1, 1);
  nn::Matrix x(120, 3);
  std::vector<int> y(120);
  for (int i = 0; i < 120; ++i) {
    double noise = 0.1 * u(rng);
    y[static_cast<size_t>(i)] = i % 2;
    x(i, 0) = (i % 2 ? 1.0 : -1.0) + noise;
    x(i, 1) = u(rng);
    x(i, 2) = u(rng);
  }
  paths::PathConfig cfg;
  for (auto kind : {fusion::HeadKind::fcnn, fusion::HeadKind::gradient_boosted_trees,
                    fusion::HeadKind::support_vector_machine}) {
    CAPTURE(fusion::to_string(kind));
    auto head = fusion::make_tabular_head(kind, 3, cfg);
    head->fit(x, y, 7);
    auto probs = head->predict_proba(x);
    int correct = 0;
    for (int i = 0; i < 120; ++i) {
      CHECK(probs[static_cast<size_t>(i)] >= 0.0);
      CHECK(probs[static_cast<size_t>(i)] <= 1.0);
      correct += (probs[static_cast<size_t>(i)] >= 0.5) == (y[static_cast<size_t>(i)] == 1);
    }
    CHECK(correct >= 108);  // >= 90%
  }
}

TEST_CASE("tabular head save/load round trip") {
  fs::path dir = temp_dir("fusion_head_rt");
  Rng rng = make_rng(41);
  std::uniform_real_distribution<double> u(-1, 1);
  nn::Matrix x(60, 3);
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) {
    y[static_cast<size_t>(i)] = i % 2;
    x(i, 0) = (i % 2 ? 1.0 : -1.0) + 0.1 * u(rng);
    x(i, 1) = u(rng);
    x(i, 2) = u(rng);
  }
  paths::PathConfig cfg;
  for (auto kind : {fusion::HeadKind::fcnn, fusion::HeadKind::gradient_boosted_trees,
                    fusion::HeadKind::support_vector_machine}) {
    CAPTURE(fusion::to_string(kind));
    auto head = fusion::make_tabular_head(kind, 3, cfg);
    head->fit(x, y, 3);
    std::string base = (dir / ("head_" + fusion::to_string(kind))).string();
    std::string path = kind == fusion::HeadKind::fcnn ? base + ".bin" : base + ".json";
    head->save(path);
    auto back = fusion::load_tabular_head(path, cfg);
    auto p1 = head->predict_proba(x);
    auto p2 = back->predict_proba(x);
    for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-12));
  }
}

TEST_CASE("late and voting systems assemble, predict and round trip") {
  fs::path dir = temp_dir("fusion_wrappers");
  auto train_batch = make_batch(24, 12, 100);
  auto test_batch = make_batch(6, 12, 500);

  // three trained neural prerequisites (weights arbitrary; marked trained)
  auto make_trained = [&](fusion::Strategy strategy, const std::string& name) {
    fusion::NeuralModel m(tiny_spec(strategy), 11);
    m.stats().preprocess.image_size = 12;
    m.mark_trained();
    m.save((dir / name).string());
    return fusion::NeuralModel::load((dir / name).string());
  };
  auto fundus = make_trained(fusion::Strategy::unimodal_fundus, "fundus");
  auto demo = make_trained(fusion::Strategy::unimodal_demographic, "demo");
  auto inter = make_trained(fusion::Strategy::intermediate, "inter");

  SUBCASE("late fusion") {
    paths::PathConfig cfg;
    fusion::LateModel late(std::move(fundus), fusion::HeadKind::fcnn, cfg);
    late.fit(train_batch, 5);
    auto preds = late.predict_proba(test_batch);
    REQUIRE(preds.size() == 6);
    late.save((dir / "late").string());
    auto any = fusion::AnyModel::load((dir / "late").string());
    auto preds2 = any.predict_proba(test_batch);
    for (size_t i = 0; i < preds.size(); ++i)
      CHECK(preds[i].probability == doctest::Approx(preds2[i].probability).epsilon(1e-12));
  }

  SUBCASE("soft voting equals the mean of the three member probabilities") {
    paths::PathConfig cfg;
    auto f2 = fusion::NeuralModel::load((dir / "fundus").string());
    auto d2 = fusion::NeuralModel::load((dir / "demo").string());
    auto i2 = fusion::NeuralModel::load((dir / "inter").string());
    fusion::VotingModel vote(std::move(fundus), std::move(demo), std::move(inter),
                             fusion::HeadKind::soft_vote, cfg);
    auto preds = vote.predict_proba(test_batch);
    auto pf = f2->predict_proba(test_batch);
    auto pd = d2->predict_proba(test_batch);
    auto pi = i2->predict_proba(test_batch);
    for (size_t i = 0; i < preds.size(); ++i)
      CHECK(preds[i].probability ==
            fusion::soft_vote(pf[i].probability, pd[i].probability, pi[i].probability));
    vote.save((dir / "vote").string());
    auto any = fusion::AnyModel::load((dir / "vote").string());
    auto preds2 = any.predict_proba(test_batch);
    for (size_t i = 0; i < preds.size(); ++i)
      CHECK(preds2[i].probability == preds[i].probability);
  }

  SUBCASE("voting with a fitted head") {
    paths::PathConfig cfg;
    fusion::VotingModel vote(std::move(fundus), std::move(demo), std::move(inter),
                             fusion::HeadKind::support_vector_machine, cfg);
    vote.fit(train_batch, 5);
    auto preds = vote.predict_proba(test_batch);
    REQUIRE(preds.size() == 6);
    vote.save((dir / "vote_svm").string());
    auto any = fusion::AnyModel::load((dir / "vote_svm").string());
    auto preds2 = any.predict_proba(test_batch);
    for (size_t i = 0; i < preds.size(); ++i)
      CHECK(preds[i].probability == doctest::Approx(preds2[i].probability).epsilon(1e-12));
  }
}

TEST_CASE("build_samples standardizes age with the training statistics") {
  std::vector<cohort::PatientRecord> recs(1);
  recs[0].patient_id = "P0";
  recs[0].age = 70;
  recs[0].gender = cohort::Gender::female;
  recs[0].hypertension = true;
  recs[0].diabetes = false;
  // a real image on disk
  fs::path dir = temp_dir("fusion_build");
  Image img(3, 8, 8);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i) / img.data.size();
  write_ppm((dir / "img.ppm").string(), img);
  recs[0].images.push_back({"img", "P0", cohort::Eye::left, (dir / "img.ppm").string()});

  fusion::NormalizationStats stats;
  stats.preprocess.image_size = 8;
  stats.age_mean = 60;
  stats.age_std = 5;
  auto samples = fusion::build_samples(recs, stats);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].demo.age_std == doctest::Approx(2.0));
  CHECK(samples[0].demo.gender_code == 1.0);
  CHECK(samples[0].label == 1);
  CHECK(samples[0].image.height == 8);
}
