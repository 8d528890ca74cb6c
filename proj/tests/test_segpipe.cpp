#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "headseg/featio.hpp"
#include "headseg/segpipe.hpp"
#include "headseg/synthgen.hpp"
#include "support.hpp"

using namespace headseg;
using namespace headseg::segpipe;
namespace fs = std::filesystem;

namespace {

// Small generated dataset shared by the pipeline tests.
const fs::path& dataset_root()
{
    static const fs::path root = [] {
        auto r = fs::temp_directory_path() / "headseg_segpipe_ds";
        fs::remove_all(r);
        synthgen::generate_dataset(r, 6, 500, synthgen::Profile{}, false);
        return r;
    }();
    return root;
}

PipelineConfig small_config()
{
    PipelineConfig c;
    c.eig_k = 24;
    c.network.k = 24;
    c.network.width = 8;
    c.network.epochs = 3;
    return c;
}

// Fresh copy of one sample so cache manipulation does not leak across tests.
fs::path scratch_sample(const std::string& tag)
{
    const auto dir = fs::temp_directory_path() / ("headseg_segpipe_" + tag) / "sample";
    fs::remove_all(dir.parent_path());
    fs::create_directories(dir.parent_path());
    fs::copy(dataset_root() / synthgen::sample_dir_name(0), dir, fs::copy_options::recursive);
    fs::remove_all(dir / "cache");
    return dir;
}

std::set<std::string> listing(const fs::path& dir)
{
    std::set<std::string> names;
    if (!fs::exists(dir)) return names;
    for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
    return names;
}

std::map<std::string, fs::file_time_type> stamps(const fs::path& dir)
{
    std::map<std::string, fs::file_time_type> out;
    for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = e.last_write_time();
    return out;
}

double oracle_miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth)
{
    double total = 0.0;
    for (int c = 0; c < 2; ++c) {
        long long inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == c, t = truth[i] == c;
            inter += p && t;
            uni += p || t;
        }
        total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return total / 2.0;
}

std::vector<std::uint8_t> flipped(std::vector<std::uint8_t> v)
{
    for (auto& x : v) x = 1 - x;
    return v;
}

diffnet::DiffusionNetParams constant_params(int input_dim, int k, float skin_bias)
{
    diffnet::NetShape shape{2, 8, input_dim, k};
    diffnet::DiffusionNetParams p{shape, Eigen::VectorXf::Zero(diffnet::param_count(shape))};
    for (const auto& e : diffnet::param_layout(shape)) {
        if (e.name == "output.bias") p.values[e.offset + 1] = skin_bias;
    }
    return p;
}

} // namespace

TEST_CASE("miou on hand-enumerated cases")
{
    const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{1, 0, 1, 0};
    CHECK(metrics::miou(a, a) == 1.0);
    CHECK(metrics::miou(a, flipped(a)) == 0.0);
    CHECK(metrics::miou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    // Class 0 absent from both contributes 1.
    const std::vector<std::uint8_t> ones{1, 1, 1};
    CHECK(metrics::miou(ones, ones) == 1.0);
    CHECK(metrics::miou(std::vector<std::uint8_t>{1, 1, 0}, ones) == doctest::Approx((2.0 / 3.0 + 0.0) / 2.0));
    CHECK_THROWS_AS(metrics::miou(a, std::vector<std::uint8_t>{1, 0}), ArgumentError);
    CHECK_THROWS_AS(metrics::miou(a, std::vector<std::uint8_t>{1, 0, 2, 0}), ArgumentError);
}

TEST_CASE("miou matches a confusion oracle and is flip symmetric")
{
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(200);
        const double p_skin = rng.uniform();
        const double agree = rng.uniform();
        std::vector<std::uint8_t> truth(n), pred(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = rng.uniform() < p_skin;
            pred[i] = rng.uniform() < agree ? truth[i] : static_cast<std::uint8_t>(rng.uniform() < 0.5);
        }
        const double m = metrics::miou(pred, truth);
        REQUIRE(std::abs(m - oracle_miou(pred, truth)) <= 1e-12);
        REQUIRE(std::abs(m - metrics::miou(flipped(pred), flipped(truth))) <= 1e-12);
        REQUIRE(m >= 0.0);
        REQUIRE(m <= 1.0);
    }
}

TEST_CASE("d_surface statistics")
{
    Rng rng(3);
    const auto grid = testing::random_grid(8, 8, rng, 0.2, 0.0);  // the z = 0 plane

    SUBCASE("points on the surface")
    {
        std::vector<Vec3> pts;
        for (const auto& f : grid.faces) {
            const double u = rng.uniform(), v = rng.uniform() * (1 - u);
            pts.push_back((1 - u - v) * grid.positions[f[0]] + u * grid.positions[f[1]] + v * grid.positions[f[2]]);
        }
        const auto s = d_surface(pts, grid);
        CHECK(s.mean <= 1e-12);
        CHECK(s.stddev <= 1e-12);
        CHECK(s.count == pts.size());
    }
    SUBCASE("single point above a plane")
    {
        const auto s = d_surface({Vec3(3.5, 3.5, 2.0)}, grid);
        CHECK(s.mean == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(s.stddev == 0.0);
    }
    SUBCASE("random points against brute force")
    {
        const auto surface = testing::bumpy_sphere(2, rng, 0.1, 10.0);
        std::vector<Vec3> pts;
        std::vector<double> brute;
        for (int i = 0; i < 2000; ++i) {
            const Vec3 p(rng.uniform(-15, 15), rng.uniform(-15, 15), rng.uniform(-15, 15));
            double best = std::numeric_limits<double>::infinity();
            for (const auto& f : surface.faces) {
                const Vec3 q = synthgen::closest_point_on_triangle(p, surface.positions[f[0]], surface.positions[f[1]],
                                                                   surface.positions[f[2]]);
                best = std::min(best, (p - q).norm());
            }
            pts.push_back(p);
            brute.push_back(best);
        }
        double mean = 0.0;
        for (double d : brute) mean += d;
        mean /= static_cast<double>(brute.size());
        double var = 0.0;
        for (double d : brute) var += (d - mean) * (d - mean);
        const auto s = d_surface(pts, surface);
        CHECK(std::abs(s.mean - mean) <= 1e-9);
        CHECK(std::abs(s.stddev - std::sqrt(var / static_cast<double>(brute.size()))) <= 1e-9);
    }
    CHECK_THROWS_AS(d_surface({}, grid), ArgumentError);
}

TEST_CASE("config parsing")
{
    const auto defaults = parse_config("{}");
    CHECK(defaults.fusion == Fusion::vis_mean_var);
    CHECK(defaults.geom.sigma30);
    CHECK(defaults.label_threshold == 1.5);

    const auto c = parse_config(R"({"id":"x","featureSource":"fmapFiles","fusion":"mean+var",
        "geomFeatures":["hks","color"],"eigK":64,"hksT":8,"labelThreshold":2.0,
        "network":{"learningRate":0.01,"epochs":7,"width":16,"blocks":3,"seed":9,"validationFraction":0.2}})");
    CHECK(c.feature_source == FeatureSource::fmap_files);
    CHECK(c.fusion == Fusion::mean_var);
    CHECK(c.geom.hks);
    CHECK(c.geom.color);
    CHECK_FALSE(c.geom.sigma30);
    CHECK(c.network.k == 64);
    CHECK(c.network.epochs == 7);
    CHECK(c.network.seed == 9);
    CHECK(c.validation_fraction == 0.2);
    CHECK(config_to_json(parse_config(config_to_json(c))) == config_to_json(c));

    for (const char* bad : {R"({"fusion":"median"})", R"({"unknown":1})", R"({"network":{"lr":1}})",
                            R"({"labelThreshold":0})", R"({"labelThreshold":"1.5"})", R"({"geomFeatures":["hks","hks"]})",
                            R"({"geomFeatures":["curvature"]})", R"({"fusion":"none","geomFeatures":[]})",
                            R"({"network":{"adamBeta1":1.0}})", R"({"eigK":0})", R"({"network":{"epochs":0}})", "[1]",
                            "{not json"}) {
        CAPTURE(bad);
        CHECK_THROWS_AS(parse_config(bad), ConfigError);
    }

    auto base = parse_config("{}");
    CHECK(input_dim(base, 12) == 2 * 12 + 2 + 1);
    base.fusion = Fusion::mean;
    base.geom = {true, true, true};
    CHECK(input_dim(base, 12) == 12 + 2 + 1 + base.hks_t + 3);
    base.fusion = Fusion::none;
    CHECK(input_dim(base, 12) == 1 + base.hks_t + 3);
}

TEST_CASE("ablation plan parsing")
{
    const auto plan = parse_ablation_plan(R"({"configs":[{"id":"a"},{"id":"b","fusion":"mean"}],"seeds":[0,1,2]})");
    CHECK(plan.configs.size() == 2);
    CHECK(plan.configs[1].fusion == Fusion::mean);
    CHECK(plan.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK_THROWS_AS(parse_ablation_plan(R"({"configs":[{"id":"a"},{"id":"a"}]})"), ConfigError);
    CHECK_THROWS_AS(parse_ablation_plan(R"({"configs":[{"fusion":"mean"}]})"), ConfigError);
    CHECK_THROWS_AS(parse_ablation_plan(R"({"configs":[]})"), ConfigError);
    CHECK_THROWS_AS(parse_ablation_plan(R"({"configs":[{"id":"a"}],"seeds":[]})"), ConfigError);

    std::vector<AblationRow> rows{{"a", "test", 0.5, 0.25, 0.125, 3, ""},
                                  {"b", "test", std::nan(""), std::nan(""), std::nan(""), 4, "boom"}};
    CHECK(ablation_tsv(rows) ==
          "config_id\tsplit\tmIoU\td_mean_mm\td_std_mm\tseed\n"
          "a\ttest\t0.500000\t0.250000\t0.125000\t3\n"
          "b\ttest\tnan\tnan\tnan\t4\n");
}

TEST_CASE("precompute is idempotent and keyed by content")
{
    const auto dir = scratch_sample("idem");
    const auto config = small_config();

    const auto first = precompute(dir, config);
    CHECK(first.eigensolves == 1);
    CHECK(first.files_written > 0);
    const auto before = stamps(dir / "cache");

    const auto second = precompute(dir, config);
    CHECK(second.eigensolves == 0);
    CHECK(second.files_written == 0);
    CHECK(stamps(dir / "cache") == before);

    for (const auto& e : fs::directory_iterator(dir / "cache")) {
        if (e.path().filename().string().rfind("basis-", 0) == 0) fs::remove(e.path());
    }
    const auto third = precompute(dir, config);
    CHECK(third.eigensolves == 1);
    CHECK(third.files_written == 1);

    // Changing an input that only the labels depend on leaves the basis alone.
    auto relabel = config;
    relabel.label_threshold = 2.0;
    const auto fourth = precompute(dir, relabel);
    CHECK(fourth.eigensolves == 0);
    CHECK(fourth.files_written == 1);
}

TEST_CASE("precompute rejects bad inputs without partial caches")
{
    const auto config = small_config();

    SUBCASE("corrupted scan")
    {
        const auto dir = scratch_sample("corrupt");
        precompute(dir, config);
        const auto before = listing(dir / "cache");
        {
            std::ofstream out(dir / "scan.ply", std::ios::binary | std::ios::trunc);
            out << "ply\nformat binary_little_endian 1.0\nelement vertex 100\nproperty float x\nend_header\n\x01\x02";
        }
        CHECK_THROWS_AS(precompute(dir, config), ValidationError);
        CHECK(listing(dir / "cache") == before);
    }
    SUBCASE("corrupted scan before any cache exists")
    {
        const auto dir = scratch_sample("corrupt_fresh");
        {
            std::ofstream out(dir / "scan.ply", std::ios::trunc);
            out << "garbage";
        }
        CHECK_THROWS_AS(precompute(dir, config), ValidationError);
        CHECK(listing(dir / "cache").empty());
    }
    SUBCASE("missing files are named")
    {
        const auto dir = scratch_sample("missing");
        fs::remove(dir / "view_03.ppm");
        try {
            precompute(dir, config);
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("view_03") != std::string::npos);
        }
        CHECK(listing(dir / "cache").empty());
        fs::remove(dir / "cameras.json");
        try {
            precompute(dir, config);
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("cameras.json") != std::string::npos);
        }
    }
    SUBCASE("geometry-only configs do not need images")
    {
        const auto dir = scratch_sample("noimages");
        for (int v = 0; v < 13; ++v) fs::remove(synthgen::view_image_path(dir, v));
        auto geom = config;
        geom.fusion = Fusion::none;
        CHECK_NOTHROW(precompute(dir, geom));
        CHECK_THROWS_AS(precompute(dir, config), ValidationError);
    }
    CHECK_THROWS_AS(precompute(fs::temp_directory_path() / "headseg_no_such_sample", config), ValidationError);
}

TEST_CASE("prepared samples")
{
    const auto config = small_config();
    const auto dir = dataset_root() / synthgen::sample_dir_name(1);
    const auto s = prepare(dir, config);
    CHECK(s.features.cols() == input_dim(config, featio::kHandcraftedChannels));
    CHECK(s.features.rows() == static_cast<Eigen::Index>(s.scan.num_vertices()));
    CHECK(s.features.allFinite());
    CHECK(s.labels == synthgen::read_labels(dir / "labels.bin"));
    CHECK(s.ops->basis.cols() == config.eig_k);

    SUBCASE("feature files reproduce handcrafted features")
    {
        const auto copy = scratch_sample("fmapfiles");
        const auto handcrafted = prepare(copy, config);
        fs::create_directories(copy / "features");
        for (int v = 0; v < 13; ++v) {
            char name[32];
            std::snprintf(name, sizeof name, "view_%02d.fmap", v);
            featio::write_fmap(featio::handcrafted_features(featio::read_image(synthgen::view_image_path(copy, v))),
                               copy / "features" / name);
        }
        auto files = config;
        files.feature_source = FeatureSource::fmap_files;
        const auto from_files = prepare(copy, files);
        CHECK(from_files.features == handcrafted.features);
        fs::remove(copy / "features" / "view_05.fmap");
        CHECK_THROWS_AS(prepare(copy, files), ValidationError);
    }
    SUBCASE("visibility-aware and plain lifting differ only in image channels")
    {
        auto plain = config;
        plain.fusion = Fusion::mean_var;
        const auto p = prepare(dir, plain);
        REQUIRE(p.features.cols() == s.features.cols());
        const auto last = s.features.cols() - 1;
        CHECK(p.features.col(last) == s.features.col(last));
        CHECK((p.features.leftCols(last) - s.features.leftCols(last)).norm() > 0);
    }
}

TEST_CASE("lifted feature variance is higher on non-skin vertices")
{
    const auto config = small_config();
    const auto C = featio::kHandcraftedChannels;
    double var[2] = {0, 0};
    double n[2] = {0, 0};
    for (int i = 0; i < 6; ++i) {
        const auto s = prepare(dataset_root() / synthgen::sample_dir_name(i), config);
        for (Eigen::Index v = 0; v < s.features.rows(); ++v) {
            const int l = s.labels[static_cast<std::size_t>(v)];
            var[l] += s.features.row(v).segment(C, C).mean();
            n[l] += 1;
        }
    }
    MESSAGE("mean variance non-skin " << var[0] / n[0] << ", skin " << var[1] / n[1]);
    CHECK(var[synthgen::kNonSkin] / n[synthgen::kNonSkin] > var[synthgen::kSkin] / n[synthgen::kSkin]);
}

TEST_CASE("inference with constant checkpoints")
{
    const auto config = small_config();
    const auto s = prepare(dataset_root() / synthgen::sample_dir_name(2), config);
    const int D = static_cast<int>(s.features.cols());

    const auto skin = infer(constant_params(D, config.eig_k, 1.0f), s);
    CHECK(std::all_of(skin.labels.begin(), skin.labels.end(), [](auto l) { return l == synthgen::kSkin; }));
    // Equal logits resolve to non-skin.
    const auto tie = infer(constant_params(D, config.eig_k, 0.0f), s);
    CHECK(std::all_of(tie.labels.begin(), tie.labels.end(), [](auto l) { return l == synthgen::kNonSkin; }));

    CHECK_THROWS_AS(infer(constant_params(D + 1, config.eig_k, 1.0f), s), ConfigError);
    CHECK_THROWS_AS(infer(constant_params(D, config.eig_k + 1, 1.0f), s), ConfigError);

    const auto report = evaluate(constant_params(D, config.eig_k, 1.0f), {s});
    CHECK(report.miou == doctest::Approx(metrics::miou(skin.labels, s.labels)).epsilon(1e-15));
    // Predicting everything as skin scores d_surface over all scan vertices.
    CHECK(report.distance.count == s.scan.num_vertices());
    const auto all = d_surface(s.scan.positions, s.reference);
    CHECK(report.distance.mean == doctest::Approx(all.mean).epsilon(1e-12));

    // Ground-truth skin lies closer to the reference than the full scan.
    std::vector<Vec3> truth_skin;
    for (std::size_t v = 0; v < s.labels.size(); ++v) {
        if (s.labels[v] == synthgen::kSkin) truth_skin.push_back(s.scan.positions[v]);
    }
    CHECK(d_surface(truth_skin, s.reference).mean <= all.mean);

    const auto none = evaluate(constant_params(D, config.eig_k, -1.0f), {s});
    CHECK(none.distance.count == 0);
    CHECK(std::isnan(none.distance.mean));
    CHECK(report_to_json(none).find("\"meanMm\": null") != std::string::npos);
}

TEST_CASE("training is deterministic and folding is exact")
{
    auto config = small_config();
    const auto& root = dataset_root();
    const auto split = synthgen::read_split(root);
    const auto train_set = prepare_all(root, {split.train[0], split.train[1], split.train[2]}, config);
    const auto val_set = prepare_all(root, {split.train[3]}, config);

    set_thread_count(1);
    const auto a = train_model(train_set, val_set, config);
    set_thread_count(3);
    const auto b = train_model(train_set, val_set, config);
    set_thread_count(0);
    CHECK(a.params.values == b.params.values);
    CHECK(a.result.log.size() == 3);
    for (std::size_t e = 0; e < a.result.log.size(); ++e) {
        CHECK(a.result.log[e].train_loss == b.result.log[e].train_loss);
        CHECK(a.result.log[e].validation_miou == b.result.log[e].validation_miou);
    }

    // The folded checkpoint on raw features reproduces the unfolded network on
    // standardized features.
    const Eigen::Index D = train_set[0].features.cols();
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(D), sq = Eigen::VectorXd::Zero(D);
    double n = 0;
    for (const auto& s : train_set) {
        sum += s.features.colwise().sum().transpose();
        n += static_cast<double>(s.features.rows());
    }
    const Eigen::VectorXd mean = sum / n;
    for (const auto& s : train_set) sq += (s.features.rowwise() - mean.transpose()).colwise().squaredNorm().transpose();
    Eigen::VectorXd scale = (sq / n).cwiseSqrt();
    for (Eigen::Index c = 0; c < D; ++c) {
        if (!(scale[c] > 1e-12)) scale[c] = 1.0;
    }
    const auto& s = val_set[0];
    const Eigen::MatrixXd z = (s.features.rowwise() - mean.transpose()) * scale.cwiseInverse().asDiagonal();
    const Eigen::MatrixXf expected = diffnet::forward<float>(a.params.shape, a.result.params.values, *s.ops, z.cast<float>());
    const Eigen::MatrixXf folded = infer(a.params, s).logits;
    CHECK((folded - expected).cwiseAbs().maxCoeff() <= 1e-3f * (1.0f + expected.cwiseAbs().maxCoeff()));

    const auto r1 = evaluate(a.params, val_set);
    const auto r2 = evaluate(b.params, val_set);
    CHECK(report_to_json(r1) == report_to_json(r2));
}

TEST_CASE("ablation runs")
{
    auto config = small_config();
    config.id = "single";
    const auto& root = dataset_root();
    const auto split = synthgen::read_split(root);

    AblationPlan plan;
    plan.configs = {config};
    plan.seeds = {4};
    const auto rows = run_ablation(root, plan);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].error.empty());
    CHECK(rows[0].config_id == "single");
    CHECK(rows[0].seed == 4);

    // A grid of one reproduces a direct train and evaluate.
    auto direct_cfg = config;
    direct_cfg.network.seed = 4;
    const auto model = train_model(root, split.train, direct_cfg);
    const auto report = evaluate(model.params, root, split.test, direct_cfg);
    CHECK(rows[0].miou == report.miou);
    CHECK(rows[0].d_mean_mm == report.distance.mean);
    CHECK(rows[0].d_std_mm == report.distance.stddev);
    CHECK(model.validation_names == std::vector<std::string>{split.train.back()});

    // A failing configuration reports its error and the rest still run.
    auto broken = config;
    broken.id = "broken";
    broken.feature_source = FeatureSource::fmap_files;
    plan.configs = {broken, config};
    std::vector<std::string> seen;
    const auto mixed = run_ablation(root, plan, [&](const AblationRow& r) { seen.push_back(r.config_id); });
    REQUIRE(mixed.size() == 2);
    CHECK(seen == std::vector<std::string>{"broken", "single"});
    CHECK(mixed[0].error.find("fmap") != std::string::npos);
    CHECK(std::isnan(mixed[0].miou));
    CHECK(mixed[1].error.empty());
    CHECK(mixed[1].miou == rows[0].miou);
}
