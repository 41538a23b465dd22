#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ptld/eval.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace ptld;
using namespace ptld::eval;
using plant::PlantParams;
using plant::Task;

namespace {

struct Still : Controller {
  std::size_t dim;
  explicit Still(std::size_t d) : dim(d) {}
  void reset(const plant::ObservationBundle&) override {}
  std::vector<double> act(const plant::ObservationBundle&, int) override { return std::vector<double>(dim, 0.0); }
};

// Holds still and counts the steps it was asked for.
struct Counting : Still {
  int calls = 0;
  using Still::Still;
  void reset(const plant::ObservationBundle&) override { calls = 0; }
  std::vector<double> act(const plant::ObservationBundle& o, int k) override {
    ++calls;
    return Still::act(o, k);
  }
};

plant::GraspCache cache_for(const PlantParams& p) {
  std::mt19937_64 rng(2);
  return plant::generate_grasp_cache(p, rng, 8);
}

MetricReport synthetic(const std::string& name, std::uint64_t hash, std::vector<double> values) {
  MetricReport r;
  r.name = name;
  r.plant_hash = hash;
  r.metrics = {"TTF", "RotP"};
  for (double v : values) r.rows.push_back({v, v});
  return r;
}

Eigen::Quaterniond quat(const rotmath::Rotation& r) { return Eigen::Quaterniond(r.matrix); }

}  // namespace

TEST_CASE("a hand holding still earns no rotation and never drops") {
  const PlantParams p = PlantParams::defaults(Task::Rotation);
  const auto cache = cache_for(p);
  Still ctrl(static_cast<std::size_t>(p.action_dim()));
  EvalOptions o;
  o.trials = 3;
  MetricReport r = eval_rotation(ctrl, p, &cache, o);
  REQUIRE(r.trials() == 3u);
  for (std::size_t t = 0; t < r.trials(); ++t) {
    CHECK(r.value(t, "RotR") == 0.0);
    CHECK(r.value(t, "TTF") == 1.0);
    CHECK(r.value(t, "TotalRotation") == 0.0);
  }
}

TEST_CASE("time to fall is the completed fraction before the drop") {
  PlantParams p = PlantParams::defaults(Task::Rotation);
  const auto cache = cache_for(p);
  // A hold margin no grip can meet makes the object sink out of the hand.
  p.N_min = 100.0;
  Counting ctrl(static_cast<std::size_t>(p.action_dim()));
  EvalOptions o;
  o.trials = 1;
  MetricReport r = eval_rotation(ctrl, p, &cache, o);
  REQUIRE(ctrl.calls < p.max_steps);
  CHECK(r.value(0, "TTF") == doctest::Approx(static_cast<double>(ctrl.calls) / p.max_steps).epsilon(1e-12));
  CHECK(r.value(0, "TTF") > 0.0);
  CHECK(r.value(0, "TTF") < 1.0);
  CHECK(r.value(0, "VerticalDrift") > 0.0);
}

TEST_CASE("rotation reward integrates the spin rate") {
  RotationTally t;
  const double c = 0.7, dt = 0.05;
  const int T = 120;
  for (int k = 0; k < T; ++k) t.step(c, 0.01, dt, false);
  CHECK(t.rot_r == doctest::Approx(c * T * dt).epsilon(1e-12));
  CHECK(t.rot_p == doctest::Approx(0.01 * T).epsilon(1e-12));
  CHECK(t.ttf(T) == 1.0);

  RotationTally d;
  for (int k = 0; k < 40; ++k) d.step(0.0, 0.0, dt, k == 24);
  CHECK(d.drop_step == 25);
  CHECK(d.ttf(200) == doctest::Approx(25.0 / 200.0));
}

TEST_CASE("reorientation counts goals and reports time to fall in seconds") {
  PlantParams p = PlantParams::defaults(Task::Reorientation);
  p.max_steps = 40;
  const auto cache = cache_for(p);
  Still ctrl(static_cast<std::size_t>(p.action_dim()));
  EvalOptions o;
  o.trials = 2;
  MetricReport held = eval_reorientation(ctrl, p, &cache, o);
  for (std::size_t t = 0; t < held.trials(); ++t) {
    CHECK(held.value(t, "TTF") == doctest::Approx(40 * p.dt_control));
    CHECK(held.value(t, "N_goals") >= 0.0);
    CHECK(held.value(t, "N_goals") == std::floor(held.value(t, "N_goals")));
  }
  // Every orientation is within tolerance: one goal per step.
  p.success_tol = 4.0;
  MetricReport all = eval_reorientation(ctrl, p, &cache, o);
  for (std::size_t t = 0; t < all.trials(); ++t) {
    CHECK(all.value(t, "N_goals") == doctest::Approx(all.value(t, "TTF") / p.dt_control));
  }
}

TEST_CASE("relaxed goal threshold is thirty degrees") {
  CHECK(kRelaxedGoalTolerance == doctest::Approx(30.0 * M_PI / 180.0).epsilon(1e-15));
}

TEST_CASE("metrics are deterministic and aggregates recompute from rows") {
  const PlantParams p = PlantParams::defaults(Task::Rotation, true);
  const auto cache = cache_for(PlantParams::defaults(Task::Rotation));
  policy::NetConfig n;
  n.encoder_hidden = {16};
  n.pi_hidden = {16};
  n.value_hidden = {16};
  n.frames = 2;
  auto net = policy::make_policy(PlantParams::defaults(Task::Rotation), policy::ObsView::ProprioPose, n, 3);
  EvalOptions o;
  o.trials = 10;
  o.seed = 4;
  o.max_steps = 30;
  o.name = "pose";
  MetricReport a = eval_policy(net, p, &cache, o);
  MetricReport b = eval_policy(net, p, &cache, o);
  CHECK(a.rows == b.rows);
  REQUIRE(a.trials() == 10u);
  for (const auto& m : a.metrics) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t t = 0; t < a.trials(); ++t) s += a.value(t, m);
    const double mean = s / 10.0;
    for (std::size_t t = 0; t < a.trials(); ++t) s2 += (a.value(t, m) - mean) * (a.value(t, m) - mean);
    CHECK(a.mean(m) == doctest::Approx(mean));
    CHECK(a.std(m) == doctest::Approx(std::sqrt(s2 / 10.0)));
  }
  const auto j = a.to_json();
  CHECK(j.at("trials") == 10);
  CHECK(j.at("aggregate").at("TTF").contains("std"));

  const auto dir = std::filesystem::temp_directory_path() / "ptld_eval_test";
  std::filesystem::create_directories(dir);
  a.write_csv(dir / "a.csv");
  a.write_jsonl(dir / "a.jsonl");
  a.write_long_csv(dir / "a_long.csv");
  std::ifstream is(dir / "a.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "trial,RotR,TTF,RotP,TotalRotation,VerticalDrift");
  std::ifstream js(dir / "a.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(js, l);) ++lines;
  CHECK(lines == 11u);

  auto wrong = policy::make_policy(PlantParams::defaults(Task::Reorientation), policy::ObsView::ProprioPose, n, 3);
  CHECK_THROWS_AS(eval_policy(wrong, p, &cache, o), TaskMismatch);
  Still ctrl(6);
  CHECK_THROWS_AS(eval_reorientation(ctrl, p, &cache, o), TaskMismatch);
}

TEST_CASE("run comparison ranks by mean and refuses mixed plants") {
  auto one = compare_runs({synthetic("a", 1, {0.5, 0.7})});
  REQUIRE(one.size() == 2u);
  CHECK(one[0].rank == 1);

  auto rows = compare_runs({synthetic("low", 1, {0.1, 0.2}), synthetic("high", 1, {0.8, 0.9}),
                            synthetic("mid", 1, {0.4, 0.6})});
  std::vector<std::string> ttf, rotp;
  for (const auto& r : rows) (r.metric == "TTF" ? ttf : rotp).push_back(r.run);
  CHECK(ttf == std::vector<std::string>{"high", "mid", "low"});
  CHECK(rotp == std::vector<std::string>{"low", "mid", "high"});
  CHECK(rows[0].mean == doctest::Approx(0.85));
  CHECK(rows[0].std == doctest::Approx(0.05));

  CHECK_THROWS_AS(compare_runs({synthetic("a", 1, {1}), synthetic("b", 2, {1})}), ConfigMismatch);
  CHECK(format_rank_table(rows).find("high") != std::string::npos);
}

TEST_CASE("composed error matches step-by-step quaternion composition") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<rotmath::Rotation> p, q;
    Eigen::Quaterniond qp = Eigen::Quaterniond::Identity(), qq = Eigen::Quaterniond::Identity();
    for (int k = 0; k < 30; ++k) {
      std::normal_distribution<double> g(0.0, 0.1);
      const auto a = rotmath::exp_map(rotmath::Vec3(g(rng), g(rng), g(rng)));
      const auto b = rotmath::exp_map(rotmath::Vec3(g(rng), g(rng), g(rng)));
      p.push_back(a);
      q.push_back(b);
      qp = quat(a) * qp;
      qq = quat(b) * qq;
    }
    const double oracle = qp.angularDistance(qq);
    CHECK(composed_error(p, q) == doctest::Approx(oracle).epsilon(1e-9));
  }
}

TEST_CASE("pose decoder learns an identity target and leaves the encoder frozen") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  LatentDataset d;
  const auto id6 = rotmath::rot6d_from_matrix(rotmath::Rotation::identity());
  for (int e = 0; e < 10; ++e) {
    d.episodes.push_back({d.latents.size(), 40});
    for (int t = 0; t < 40; ++t) {
      d.latents.push_back({g(rng), g(rng), g(rng), g(rng)});
      d.truth.push_back(id6);
      d.slip.push_back(0.0);
    }
  }
  PoseProbeConfig cfg;
  cfg.epochs = 40;
  auto res = train_pose_decoder(d, cfg, 1);
  CHECK(res.report.step_error < 0.05);
  CHECK(res.report.cumulative_error < 0.5);
  CHECK(res.report.windows > 0u);

  LatentDataset empty;
  CHECK_THROWS_AS(train_pose_decoder(empty, cfg, 1), MissingGroundTruth);
  cfg.H = 0;
  CHECK_THROWS_AS(train_pose_decoder(d, cfg, 1), ConfigError);
}

TEST_CASE("relative targets are increments over H steps") {
  LatentDataset d;
  for (int t = 0; t < 6; ++t) {
    d.latents.push_back({0.0});
    d.truth.push_back(rotmath::rot6d_from_matrix(rotmath::rot_z(0.1 * t)));
  }
  d.episodes.push_back({0, 6});
  PoseProbeConfig cfg;
  cfg.H = 2;
  CHECK_FALSE(pose_target(d, d.episodes[0], 1, cfg).has_value());
  const auto inc = *pose_target(d, d.episodes[0], 4, cfg);
  CHECK(rotmath::geodesic_distance(inc, rotmath::rot_z(0.2)) < 1e-12);
  cfg.param = PoseParam::Absolute;
  CHECK(rotmath::geodesic_distance(*pose_target(d, d.episodes[0], 3, cfg), rotmath::rot_z(0.3)) < 1e-12);
}

TEST_CASE("probes on encoder latents do not touch the encoder") {
  const PlantParams train = PlantParams::defaults(Task::Rotation);
  const PlantParams deploy = PlantParams::defaults(Task::Rotation, true);
  const auto cache = cache_for(train);
  policy::NetConfig n;
  n.encoder_hidden = {16};
  n.pi_hidden = {16};
  n.value_hidden = {16};
  n.frames = 2;
  n.tc_window_steps = 2;
  n.tc_embed = 8;
  n.tc_channels = {8};
  n.tc_head_hidden = {16};
  auto teacher = policy::make_policy(train, policy::ObsView::ProprioPose, n, 2);
  distill::CollectOptions co;
  co.episodes = 4;
  co.max_steps = 40;
  auto data = distill::deploy_and_collect(deploy, &cache, teacher, co);
  std::mt19937_64 rng(1);
  auto enc = policy::Encoder::build(distill::student_layout(deploy, teacher, {}), n, rng);
  const auto before = enc.params.value_hash();
  LatentDataset lat = latents_of(enc, data, false);
  CHECK(lat.latents.size() == data.size());
  PoseProbeConfig cfg;
  cfg.epochs = 2;
  train_pose_decoder(lat, cfg, 1);
  slip_probe(lat, 1);
  CHECK(enc.params.value_hash() == before);
}

TEST_CASE("slip probe separates a linearly separable flag") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  LatentDataset d;
  for (int e = 0; e < 10; ++e) {
    d.episodes.push_back({d.latents.size(), 50});
    for (int t = 0; t < 50; ++t) {
      const double y = (t % 4 == 0) ? 1.0 : 0.0;
      d.latents.push_back({g(rng), 3.0 * y + 0.3 * g(rng), g(rng)});
      d.slip.push_back(y);
      d.truth.push_back(rotmath::rot6d_from_matrix(rotmath::Rotation::identity()));
    }
  }
  auto r = slip_probe(d, 1);
  CHECK(r.balanced_accuracy > 0.95);

  CHECK(balanced_accuracy({1, 0, 0, 0}, {1, 0, 0, 0}) == 1.0);
  CHECK(balanced_accuracy({0, 0, 0, 0}, {1, 0, 0, 0}) == 0.5);
  CHECK(balanced_accuracy({1, 1, 0, 0}, {1, 0, 1, 0}) == 0.5);
}
