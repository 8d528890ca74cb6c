#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <filesystem>

#include "headseg/diffnet.hpp"
#include "support.hpp"

using namespace headseg;
using namespace headseg::diffnet;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    mesh::TriMesh mesh;
    spectral::SpectralBasis basis;
    TangentFrames frames;
};

Fixture small_fixture(std::uint64_t seed, int k = 16)
{
    Rng rng(seed);
    Fixture f;
    f.mesh = testing::random_grid(10, 5, rng, 0.2, 0.4);
    f.basis = spectral::compute_basis(f.mesh, k);
    f.frames = build_tangent_frames(f.mesh);
    return f;
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

std::vector<std::uint8_t> random_labels(std::size_t n, Rng& rng)
{
    std::vector<std::uint8_t> l(n);
    for (auto& v : l) v = static_cast<std::uint8_t>(rng.below(2));
    return l;
}

Eigen::VectorXd random_params(const NetShape& shape, Rng& rng)
{
    auto p = initialize(shape, rng.next_u64(), 0.05, 2.0).values.cast<double>().eval();
    // Spread the weights so that every nonlinearity is exercised off its linear regime.
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += 0.3 * rng.normal();
    return p;
}

double loss_of(const NetShape& shape, const Eigen::VectorXd& p, const Operators<double>& ops, const Eigen::MatrixXd& x,
               const std::vector<std::uint8_t>& labels, const std::array<double, 2>& w)
{
    return cross_entropy<double>(forward<double>(shape, p, ops, x), labels, w).value;
}

std::complex<double> apply_row(const TangentFrames& fr, int v, const Eigen::VectorXd& f)
{
    std::complex<double> g = 0.0;
    for (decltype(fr.gradient)::InnerIterator it(fr.gradient, v); it; ++it) g += it.value() * f[it.col()];
    return g;
}

TrainSample make_sample(const mesh::TriMesh& m, int k, const Eigen::MatrixXf& x, std::vector<std::uint8_t> labels,
                        std::string name)
{
    const auto basis = spectral::compute_basis(m, k);
    return TrainSample{std::move(name), std::make_shared<const Operators<float>>(make_operators<float>(basis, build_tangent_frames(m), k)),
                       x, std::move(labels)};
}

// Label: upper cap of a bumpy sphere. Features: height plus noise and a
// constant channel, so the task is learnable but not trivially linear at
// every vertex.
TrainSample cap_sample(std::uint64_t seed, int k = 32)
{
    Rng rng(seed);
    const auto m = testing::bumpy_sphere(3, rng, 0.05, 20.0);
    const Eigen::Index V = static_cast<Eigen::Index>(m.num_vertices());
    Eigen::MatrixXf x(V, 3);
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(V));
    for (Eigen::Index v = 0; v < V; ++v) {
        const double z = m.positions[static_cast<std::size_t>(v)].z() / 20.0;
        x(v, 0) = static_cast<float>(z + 0.3 * rng.normal());
        x(v, 1) = static_cast<float>(rng.normal());
        x(v, 2) = 1.0f;
        labels[static_cast<std::size_t>(v)] = z > 0.3 ? 1 : 0;
    }
    return make_sample(m, k, x, std::move(labels), "cap" + std::to_string(seed));
}

} // namespace

TEST_CASE("tangent frames are orthonormal and gradients reproduce linear functions")
{
    Rng rng(1);
    const auto sphere = testing::bumpy_sphere(3, rng, 0.1);
    const auto fr = build_tangent_frames(sphere);
    for (std::size_t v = 0; v < sphere.num_vertices(); ++v) {
        CHECK(std::abs(fr.e1[v].norm() - 1) <= 1e-8);
        CHECK(std::abs(fr.e2[v].norm() - 1) <= 1e-8);
        CHECK(std::abs(fr.e1[v].dot(fr.e2[v])) <= 1e-8);
        CHECK(std::abs(fr.e1[v].dot(fr.normal[v])) <= 1e-8);
        CHECK(std::abs(fr.e2[v].dot(fr.normal[v])) <= 1e-8);
    }

    const auto grid = testing::random_grid(8, 8, rng, 0.25, 0.0);
    const auto gf = build_tangent_frames(grid);
    Eigen::VectorXd lin(64), constant = Eigen::VectorXd::Constant(64, 7.5);
    for (int v = 0; v < 64; ++v) lin[v] = 3 * grid.positions[v].x() + 4 * grid.positions[v].y();
    const Vec3 grad(3, 4, 0);
    for (int v = 0; v < 64; ++v) {
        const auto g = apply_row(gf, v, lin);
        CHECK(std::abs(std::abs(g) - 5.0) <= 1e-9);
        CHECK(std::abs(g - std::complex<double>(grad.dot(gf.e1[v]), grad.dot(gf.e2[v]))) <= 1e-9);
        CHECK(std::abs(apply_row(gf, v, constant)) <= 1e-9);
    }
}

TEST_CASE("gradient operator matches a per-vertex least-squares oracle")
{
    Rng rng(2);
    const auto m = testing::bumpy_sphere(2, rng, 0.2, 3.0);
    const auto fr = build_tangent_frames(m);
    const auto nbrs = mesh::vertex_neighbors(m);
    const Eigen::VectorXd f = random_matrix(static_cast<Eigen::Index>(m.num_vertices()), 1, rng);
    double worst = 0.0;
    for (std::size_t v = 0; v < m.num_vertices(); ++v) {
        Eigen::Matrix2d N = Eigen::Matrix2d::Zero();
        Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
        for (int j : nbrs[v]) {
            const Vec3 d = m.positions[j] - m.positions[v];
            const Eigen::Vector2d a(d.dot(fr.e1[v]), d.dot(fr.e2[v]));
            N += a * a.transpose();
            rhs += a * (f[j] - f[static_cast<Eigen::Index>(v)]);
        }
        const Eigen::Vector2d g = N.fullPivLu().solve(rhs);
        worst = std::max(worst, std::abs(apply_row(fr, static_cast<int>(v), f) - std::complex<double>(g[0], g[1])));

        int count = 0;
        for (decltype(fr.gradient)::InnerIterator it(fr.gradient, static_cast<Eigen::Index>(v)); it; ++it) {
            const bool in_ring = it.col() == static_cast<Eigen::Index>(v) ||
                                 std::binary_search(nbrs[v].begin(), nbrs[v].end(), static_cast<int>(it.col()));
            CHECK(in_ring);
            ++count;
        }
        CHECK(count == static_cast<int>(nbrs[v].size()) + 1);
    }
    CHECK(worst <= 1e-8);

    auto lonely = m;
    lonely.positions.emplace_back(10, 10, 10);
    const auto lf = build_tangent_frames(lonely);
    const int last = static_cast<int>(lonely.num_vertices()) - 1;
    CHECK(lf.isolated[static_cast<std::size_t>(last)]);
    CHECK(lf.gradient.row(last).nonZeros() == 0);
    CHECK_FALSE(lf.isolated[0]);
}

TEST_CASE("parameter layout")
{
    const NetShape s{2, 8, 5, 16};
    const std::size_t C = 8, D = 5, B = 2;
    CHECK(param_count(s) == C * (D + 1) + B * (6 * C * C + 3 * C) + 2 * C + 2);
    const auto layout = param_layout(s);
    std::size_t next = 0;
    for (const auto& e : layout) {
        CHECK(e.offset == next);
        next += static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols);
    }
    CHECK(next == param_count(s));
    CHECK_THROWS_AS(param_count(NetShape{2, 0, 5, 16}), ArgumentError);
}

TEST_CASE("constant network outputs its bias")
{
    const auto fx = small_fixture(3);
    const NetShape s{2, 8, 4, 16};
    const auto ops = make_operators<double>(fx.basis, fx.frames, 16);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(param_count(s)));
    const auto out_b = param_layout(s).back();
    p[static_cast<Eigen::Index>(out_b.offset)] = -0.25;
    p[static_cast<Eigen::Index>(out_b.offset) + 1] = 1.5;
    Rng rng(3);
    const Eigen::MatrixXd logits = forward<double>(s, p, ops, random_matrix(50, 4, rng));
    CHECK((logits.col(0).array() == -0.25).all());
    CHECK((logits.col(1).array() == 1.5).all());
    CHECK_THROWS_AS(forward<double>(s, p, ops, random_matrix(50, 3, rng)), ArgumentError);
    CHECK_THROWS_AS(forward<double>(NetShape{2, 8, 4, 12}, p, ops, random_matrix(50, 4, rng)), ArgumentError);
}

TEST_CASE("backward matches central finite differences")
{
    const auto fx = small_fixture(4);
    const NetShape s{2, 8, 4, 16};
    const auto ops = make_operators<double>(fx.basis, fx.frames, 16);
    Rng rng(4);
    const Eigen::MatrixXd x = random_matrix(50, 4, rng);
    const auto labels = random_labels(50, rng);
    const std::array<double, 2> w{0.7, 1.3};
    const Eigen::VectorXd p = random_params(s, rng);

    ForwardCache<double> cache;
    const auto loss = cross_entropy<double>(forward<double>(s, p, ops, x, &cache), labels, w);
    const Eigen::VectorXd grad = backward<double>(s, p, ops, cache, loss.d_logits);

    // One parameter from every layout entry, then random ones up to 25.
    std::vector<Eigen::Index> picks;
    for (const auto& e : param_layout(s)) {
        picks.push_back(static_cast<Eigen::Index>(e.offset + rng.below(static_cast<std::uint64_t>(e.rows * e.cols))));
    }
    while (picks.size() < 25) picks.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.size()))));

    const double h = 1e-3;
    for (auto i : picks) {
        Eigen::VectorXd plus = p, minus = p;
        plus[i] += h;
        minus[i] -= h;
        const double fd = (loss_of(s, plus, ops, x, labels, w) - loss_of(s, minus, ops, x, labels, w)) / (2 * h);
        const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-7});
        INFO("parameter " << i << " analytic " << grad[i] << " numeric " << fd);
        CHECK(rel <= 1e-4);
    }

    CHECK(backward<double>(s, p, ops, cache, Eigen::MatrixXd::Zero(50, 2)).isZero(0.0));
}

TEST_CASE("gradient features and logits are invariant to the tangent gauge")
{
    const auto fx = small_fixture(5);
    const NetShape s{2, 8, 4, 16};
    Rng rng(5);
    const Eigen::VectorXd p = random_params(s, rng);
    const Eigen::MatrixXd x = random_matrix(50, 4, rng);

    auto rotated = fx.frames;
    for (Eigen::Index v = 0; v < rotated.gradient.outerSize(); ++v) {
        const double theta = rng.uniform(0, 2 * std::numbers::pi);
        const auto i = static_cast<std::size_t>(v);
        const Vec3 e1 = std::cos(theta) * rotated.e1[i] + std::sin(theta) * rotated.e2[i];
        rotated.e2[i] = rotated.normal[i].cross(e1);
        rotated.e1[i] = e1;
        for (decltype(rotated.gradient)::InnerIterator it(rotated.gradient, v); it; ++it) {
            it.valueRef() *= std::polar(1.0, -theta);
        }
    }
    ForwardCache<double> ca, cb;
    const Eigen::MatrixXd a = forward<double>(s, p, make_operators<double>(fx.basis, fx.frames, 16), x, &ca);
    const Eigen::MatrixXd b = forward<double>(s, p, make_operators<double>(fx.basis, rotated, 16), x, &cb);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-5);
    for (std::size_t k = 0; k < ca.blocks.size(); ++k) CHECK((ca.blocks[k].w - cb.blocks[k].w).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("forward is equivariant to vertex permutation")
{
    const auto fx = small_fixture(6);
    const NetShape s{2, 8, 4, 16};
    Rng rng(6);
    const Eigen::VectorXd p = random_params(s, rng);
    const Eigen::MatrixXd x = random_matrix(50, 4, rng);
    const auto perm = testing::random_permutation(50, rng);
    Eigen::PermutationMatrix<Eigen::Dynamic> P(50);
    for (int i = 0; i < 50; ++i) P.indices()[i] = perm[static_cast<std::size_t>(i)];

    auto basis = fx.basis;
    basis.eigenvectors = P * fx.basis.eigenvectors;
    basis.mass = P * fx.basis.mass;
    auto frames = fx.frames;
    frames.gradient = (P * fx.frames.gradient * P.transpose()).eval();

    const Eigen::MatrixXd a = forward<double>(s, p, make_operators<double>(fx.basis, fx.frames, 16), x);
    const Eigen::MatrixXd b = forward<double>(s, p, make_operators<double>(basis, frames, 16), P * x);
    CHECK(((P * a) - b).cwiseAbs().maxCoeff() <= 1e-12 * (1 + a.cwiseAbs().maxCoeff()));
}

TEST_CASE("forward is bitwise reproducible")
{
    const auto fx = small_fixture(7);
    const NetShape s{2, 8, 4, 16};
    const auto p = initialize(s, 7, 0.05, 2.0);
    const auto ops = make_operators<float>(fx.basis, fx.frames, 16);
    Rng rng(7);
    const Eigen::MatrixXf x = random_matrix(50, 4, rng).cast<float>();
    const Eigen::MatrixXf a = forward<float>(s, p.values, ops, x);
    const Eigen::MatrixXf b = forward<float>(s, p.values, ops, x);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0);
    CHECK(initialize(s, 7, 0.05, 2.0).values == p.values);
}

TEST_CASE("cross entropy")
{
    const std::array<double, 2> unit{1.0, 1.0};
    const auto zero = cross_entropy<double>(Eigen::MatrixXd::Zero(4, 2), {0, 1, 1, 0}, unit);
    CHECK(zero.value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Eigen::MatrixXd sat(1, 2);
    sat << 100, -100;
    CHECK(cross_entropy<double>(sat, {0}, unit).value <= 1e-12);
    CHECK(cross_entropy<double>(sat, {1}, unit).value == doctest::Approx(200.0));

    Rng rng(8);
    const Eigen::MatrixXd logits = 3.0 * random_matrix(20, 2, rng);
    const auto labels = random_labels(20, rng);
    const std::array<double, 2> w{0.4, 2.5};
    const auto ce = cross_entropy<double>(logits, labels, w);
    double direct = 0.0;
    for (int v = 0; v < 20; ++v) {
        const double p = std::exp(logits(v, labels[v])) / (std::exp(logits(v, 0)) + std::exp(logits(v, 1)));
        direct += -w[labels[v]] * std::log(p);
    }
    CHECK(std::abs(ce.value - direct / 20) <= 1e-6);
    const double h = 1e-3;
    for (int v = 0; v < 20; ++v) {
        for (int c = 0; c < 2; ++c) {
            Eigen::MatrixXd plus = logits, minus = logits;
            plus(v, c) += h;
            minus(v, c) -= h;
            const double fd = (cross_entropy<double>(plus, labels, w).value - cross_entropy<double>(minus, labels, w).value) / (2 * h);
            CHECK(std::abs(fd - ce.d_logits(v, c)) <= 1e-4 * std::max(1e-3, std::abs(fd)));
        }
    }
    CHECK_THROWS_AS(cross_entropy<double>(logits, {0, 1}, w), ArgumentError);
}

TEST_CASE("adam")
{
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    Eigen::VectorXd p(3);
    p << 1, -2, 3;
    const Eigen::VectorXd start = p;
    AdamState<double> st;
    for (int i = 0; i < 10; ++i) adam_step<double>(p, Eigen::VectorXd::Zero(3), st, cfg);
    CHECK(p == start);

    AdamState<double> st2;
    Eigen::VectorXd q = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd g(2);
    g << 4.0, -0.001;
    Eigen::VectorXd prev = q;
    for (int i = 0; i < 500; ++i) {
        prev = q;
        adam_step<double>(q, g, st2, cfg);
    }
    CHECK((prev - q)[0] == doctest::Approx(0.01).epsilon(1e-3));
    CHECK((q - prev)[1] == doctest::Approx(0.01).epsilon(1e-2));

    // Quadratic bowl 0.5 * sum a_i x_i^2.
    const Eigen::Vector3d a(1.0, 2.0, 0.5);
    Eigen::VectorXd x(3);
    x << 5, -3, 8;
    AdamState<double> st3;
    double last = 0.5 * x.cwiseProduct(x).dot(a);
    for (int i = 1; i <= 100; ++i) {
        adam_step<double>(x, a.cwiseProduct(x), st3, cfg);
        const double now = 0.5 * x.cwiseProduct(x).dot(a);
        if (i > 5) CHECK(now < last);
        last = now;
    }
}

TEST_CASE("argmax ties go to non-skin")
{
    Eigen::MatrixXf logits(3, 2);
    logits << 0.5, 0.5, 1, 2, 3, -1;
    CHECK(predict_labels(logits) == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("checkpoint round trip and normalization folding")
{
    const auto fx = small_fixture(9);
    const NetShape s{2, 8, 4, 16};
    auto p = initialize(s, 9, 0.05, 2.0);
    const auto path = fs::temp_directory_path() / "headseg_test.dnet";
    save_params(p, path);
    const auto q = load_params(path);
    CHECK(q.shape == s);
    CHECK(q.values == p.values);

    auto bytes = bin::read_file(path);
    bytes[0] = 'X';
    bin::write_file_atomic(path, bytes);
    CHECK_THROWS_AS(load_params(path), FormatError);
    bytes[0] = 'D';
    bytes.resize(bytes.size() - 3);
    bin::write_file_atomic(path, bytes);
    CHECK_THROWS_AS(load_params(path), FormatError);

    Rng rng(9);
    const Eigen::MatrixXd raw = 10.0 * random_matrix(50, 4, rng);
    Eigen::VectorXd mean(4), scale(4);
    mean << 1, -2, 0.5, 3;
    scale << 2, 0.5, 4, 1;
    const Eigen::MatrixXd standardized = (raw.rowwise() - mean.transpose()) * scale.cwiseInverse().asDiagonal();
    const auto ops = make_operators<float>(fx.basis, fx.frames, 16);
    const Eigen::MatrixXf expected = forward<float>(s, p.values, ops, standardized.cast<float>());
    fold_input_normalization(p, mean, scale);
    const Eigen::MatrixXf got = forward<float>(s, p.values, ops, raw.cast<float>());
    CHECK((expected - got).cwiseAbs().maxCoeff() <= 1e-3f * (1.0f + expected.cwiseAbs().maxCoeff()));
}

TEST_CASE("gradient accumulation sums over meshes")
{
    const auto sample = cap_sample(10);
    const NetShape s{2, 8, 3, 32};
    const auto p = initialize(s, 10, 1.0, 100.0);
    const std::array<double, 2> w{1.0, 1.0};
    double single_loss = 0, double_loss = 0;
    const auto one = accumulate_gradients(p, {&sample}, w, &single_loss);
    const auto two = accumulate_gradients(p, {&sample, &sample}, w, &double_loss);
    CHECK(two == (2.0f * one).eval());
    CHECK(double_loss == 2 * single_loss);
}

TEST_CASE("training fits a simple cap, is reproducible, and rejects non-finite losses")
{
    const std::vector<TrainSample> train_set{cap_sample(11), cap_sample(12), cap_sample(13)};
    const std::vector<TrainSample> val{cap_sample(14)};
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.width = 8;
    cfg.blocks = 2;
    cfg.k = 32;
    cfg.adam.learning_rate = 1e-2;
    cfg.seed = 3;
    const auto a = train(train_set, val, cfg);
    REQUIRE(a.log.size() == 40);
    CHECK(a.log.back().train_loss < a.log.front().train_loss);
    CHECK(a.log[static_cast<std::size_t>(a.best_epoch - 1)].validation_miou >= 0.8);
    for (int c = 0; c < 2; ++c) CHECK(a.class_weights[static_cast<std::size_t>(c)] > 0);

    const auto b = train(train_set, val, cfg);
    REQUIRE(b.log.size() == a.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].train_loss == b.log[i].train_loss);
        CHECK(a.log[i].validation_miou == b.log[i].validation_miou);
    }
    CHECK(a.params.values == b.params.values);

    auto broken = train_set;
    broken[1].features(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(train(broken, val, cfg), TrainingError);
    CHECK_THROWS_AS(train({}, val, cfg), ArgumentError);
}
