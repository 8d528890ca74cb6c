#include "headseg/diffnet.hpp"

#include <cmath>
#include <type_traits>

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

namespace headseg::diffnet {

namespace {

struct BlockOffsets {
    std::size_t log_time, mix_re, mix_im, w1, b1, w2, b2;
};

struct Offsets {
    std::size_t in_w, in_b;
    std::vector<BlockOffsets> blocks;
    std::size_t out_w, out_b, total;
};

Offsets offsets(const NetShape& s)
{
    const auto C = static_cast<std::size_t>(s.width);
    const auto D = static_cast<std::size_t>(s.input_dim);
    Offsets o;
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
        const std::size_t start = at;
        at += n;
        return start;
    };
    o.in_w = take(C * D);
    o.in_b = take(C);
    for (int b = 0; b < s.blocks; ++b) {
        BlockOffsets bo;
        bo.log_time = take(C);
        bo.mix_re = take(C * C);
        bo.mix_im = take(C * C);
        bo.w1 = take(C * 3 * C);
        bo.b1 = take(C);
        bo.w2 = take(C * C);
        bo.b2 = take(C);
        o.blocks.push_back(bo);
    }
    o.out_w = take(2 * C);
    o.out_b = take(2);
    o.total = at;
    return o;
}

void check_shape(const NetShape& s)
{
    if (s.blocks < 0 || s.width < 1 || s.input_dim < 1 || s.k < 1) {
        throw ArgumentError("invalid network shape: blocks=" + std::to_string(s.blocks) + " width=" +
                            std::to_string(s.width) + " input_dim=" + std::to_string(s.input_dim) +
                            " k=" + std::to_string(s.k));
    }
}

template <typename T>
auto cmat(const Vec<T>& p, std::size_t offset, Eigen::Index rows, Eigen::Index cols)
{
    return Eigen::Map<const Mat<T>>(p.data() + offset, rows, cols);
}

template <typename T>
auto mmat(Vec<T>& p, std::size_t offset, Eigen::Index rows, Eigen::Index cols)
{
    return Eigen::Map<Mat<T>>(p.data() + offset, rows, cols);
}

template <typename T>
auto cvec(const Vec<T>& p, std::size_t offset, Eigen::Index n)
{
    return Eigen::Map<const Vec<T>>(p.data() + offset, n);
}

template <typename T>
auto mvec(Vec<T>& p, std::size_t offset, Eigen::Index n)
{
    return Eigen::Map<Vec<T>>(p.data() + offset, n);
}

// Float training drifts into denormal activations whose arithmetic is an
// order of magnitude slower on x86. The guard flushes them to zero on the
// calling thread for 32-bit passes; 64-bit passes keep IEEE semantics so the
// gradient checks stay exact.
template <typename T>
class DenormalGuard {
public:
    DenormalGuard()
    {
#if defined(__SSE2__)
        if constexpr (std::is_same_v<T, float>) {
            saved_ = _mm_getcsr();
            _mm_setcsr(saved_ | kFlushBits);
        }
#endif
    }
    ~DenormalGuard()
    {
#if defined(__SSE2__)
        if constexpr (std::is_same_v<T, float>) _mm_setcsr(saved_);
#endif
    }
    DenormalGuard(const DenormalGuard&) = delete;
    DenormalGuard& operator=(const DenormalGuard&) = delete;

private:
    static constexpr unsigned kFlushBits = 0x8040;  // FTZ | DAZ
    unsigned saved_ = 0;
};

template <typename T>
T sigmoid(T x)
{
    return T(1) / (T(1) + std::exp(-x));
}

} // namespace

std::size_t param_count(const NetShape& shape)
{
    check_shape(shape);
    return offsets(shape).total;
}

std::vector<ParamEntry> param_layout(const NetShape& shape)
{
    check_shape(shape);
    const auto o = offsets(shape);
    const int C = shape.width;
    std::vector<ParamEntry> out{{"input.weight", o.in_w, C, shape.input_dim}, {"input.bias", o.in_b, C, 1}};
    for (int b = 0; b < shape.blocks; ++b) {
        const auto& bo = o.blocks[static_cast<std::size_t>(b)];
        const std::string p = "block" + std::to_string(b) + ".";
        out.push_back({p + "log_time", bo.log_time, C, 1});
        out.push_back({p + "mix_re", bo.mix_re, C, C});
        out.push_back({p + "mix_im", bo.mix_im, C, C});
        out.push_back({p + "mlp1.weight", bo.w1, C, 3 * C});
        out.push_back({p + "mlp1.bias", bo.b1, C, 1});
        out.push_back({p + "mlp2.weight", bo.w2, C, C});
        out.push_back({p + "mlp2.bias", bo.b2, C, 1});
    }
    out.push_back({"output.weight", o.out_w, 2, C});
    out.push_back({"output.bias", o.out_b, 2, 1});
    return out;
}

DiffusionNetParams initialize(const NetShape& shape, std::uint64_t seed, double time_min, double time_max)
{
    if (!(time_min > 0) || !(time_max >= time_min)) throw ArgumentError("initialize: invalid diffusion time range");
    DiffusionNetParams p{shape, Eigen::VectorXf::Zero(static_cast<Eigen::Index>(param_count(shape)))};
    Rng rng(seed);
    for (const auto& e : param_layout(shape)) {
        float* data = p.values.data() + e.offset;
        const std::size_t n = static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols);
        if (e.name.ends_with("log_time")) {
            for (std::size_t i = 0; i < n; ++i) {
                data[i] = static_cast<float>(rng.uniform(std::log(time_min), std::log(time_max)));
            }
            continue;
        }
        // Biases share the fan-in of their weight matrix.
        int fan_in = e.cols;
        if (e.cols == 1) {
            if (e.name == "input.bias") fan_in = shape.input_dim;
            else if (e.name.ends_with("mlp1.bias")) fan_in = 3 * shape.width;
            else fan_in = shape.width;
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(rng.uniform(-bound, bound));
    }
    return p;
}

template <typename T>
Mat<T> forward(const NetShape& shape, const Vec<T>& params, const Operators<T>& ops, const Mat<T>& x,
               ForwardCache<T>* cache)
{
    const DenormalGuard<T> guard;
    check_shape(shape);
    const auto o = offsets(shape);
    const Eigen::Index V = ops.num_vertices();
    const Eigen::Index C = shape.width;
    if (static_cast<std::size_t>(params.size()) != o.total) {
        throw ArgumentError("forward: expected " + std::to_string(o.total) + " parameters, got " +
                            std::to_string(params.size()));
    }
    if (x.rows() != V || x.cols() != shape.input_dim) {
        throw ArgumentError("forward: features are " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                            ", expected " + std::to_string(V) + "x" + std::to_string(shape.input_dim));
    }
    if (ops.basis.cols() != shape.k) {
        throw ArgumentError("forward: operators carry " + std::to_string(ops.basis.cols()) + " eigenpairs, network expects " +
                            std::to_string(shape.k));
    }

    Mat<T> u = (x * cmat(params, o.in_w, C, shape.input_dim).transpose()).rowwise() +
               cvec(params, o.in_b, C).transpose();
    if (cache) {
        cache->input = x;
        cache->blocks.assign(static_cast<std::size_t>(shape.blocks), {});
    }
    for (int b = 0; b < shape.blocks; ++b) {
        const auto& bo = o.blocks[static_cast<std::size_t>(b)];
        const Vec<T> times = cvec(params, bo.log_time, C).array().exp();
        const Mat<T> spec = ops.basis_mass_t * u;
        const Mat<T> decay = (-(ops.eigenvalues * times.transpose()).array()).exp().matrix();
        const Mat<T> diffused = ops.basis * spec.cwiseProduct(decay);

        const Mat<T> z_re = ops.grad_re * diffused;
        const Mat<T> z_im = ops.grad_im * diffused;
        const auto A_re = cmat(params, bo.mix_re, C, C);
        const auto A_im = cmat(params, bo.mix_im, C, C);
        const Mat<T> y_re = z_re * A_re.transpose() - z_im * A_im.transpose();
        const Mat<T> y_im = z_re * A_im.transpose() + z_im * A_re.transpose();
        const Mat<T> w = (z_re.cwiseProduct(y_re) + z_im.cwiseProduct(y_im)).array().tanh().matrix();

        Mat<T> hidden(V, 3 * C);
        hidden << u, diffused, w;
        const Mat<T> pre = (hidden * cmat(params, bo.w1, C, 3 * C).transpose()).rowwise() +
                           cvec(params, bo.b1, C).transpose();
        const Mat<T> act = pre.unaryExpr([](T a) { return a * sigmoid(a); });
        const Mat<T> out = (act * cmat(params, bo.w2, C, C).transpose()).rowwise() + cvec(params, bo.b2, C).transpose();

        if (cache) {
            auto& cb = cache->blocks[static_cast<std::size_t>(b)];
            cb.u_in = u;
            cb.spectral = spec;
            cb.decay = decay;
            cb.diffused = diffused;
            cb.z_re = z_re;
            cb.z_im = z_im;
            cb.y_re = y_re;
            cb.y_im = y_im;
            cb.w = w;
            cb.hidden = std::move(hidden);
            cb.pre_act = pre;
            cb.act = act;
        }
        u += out;
    }
    if (cache) cache->final = u;
    return (u * cmat(params, o.out_w, 2, C).transpose()).rowwise() + cvec(params, o.out_b, 2).transpose();
}

template <typename T>
Vec<T> backward(const NetShape& shape, const Vec<T>& params, const Operators<T>& ops, const ForwardCache<T>& cache,
                const Mat<T>& d_logits)
{
    const DenormalGuard<T> guard;
    const auto o = offsets(shape);
    const Eigen::Index C = shape.width;
    if (d_logits.rows() != ops.num_vertices() || d_logits.cols() != 2) {
        throw ArgumentError("backward: logit gradient must be V x 2");
    }
    if (cache.blocks.size() != static_cast<std::size_t>(shape.blocks)) {
        throw ArgumentError("backward: cache does not match the network shape");
    }
    Vec<T> grad = Vec<T>::Zero(params.size());

    mmat(grad, o.out_w, 2, C) = d_logits.transpose() * cache.final;
    mvec(grad, o.out_b, 2) = d_logits.colwise().sum().transpose();
    Mat<T> du = d_logits * cmat(params, o.out_w, 2, C);

    for (int b = shape.blocks - 1; b >= 0; --b) {
        const auto& bo = o.blocks[static_cast<std::size_t>(b)];
        const auto& cb = cache.blocks[static_cast<std::size_t>(b)];

        // Residual: du flows both to the block input and into the MLP output.
        const Mat<T>& d_out = du;
        mmat(grad, bo.w2, C, C) = d_out.transpose() * cb.act;
        mvec(grad, bo.b2, C) = d_out.colwise().sum().transpose();
        const Mat<T> d_act = d_out * cmat(params, bo.w2, C, C);
        const Mat<T> d_pre = d_act.binaryExpr(cb.pre_act, [](T g, T a) {
            const T s = sigmoid(a);
            return g * s * (T(1) + a * (T(1) - s));
        });
        mmat(grad, bo.w1, C, 3 * C) = d_pre.transpose() * cb.hidden;
        mvec(grad, bo.b1, C) = d_pre.colwise().sum().transpose();
        const Mat<T> d_hidden = d_pre * cmat(params, bo.w1, C, 3 * C);

        Mat<T> d_u = du + d_hidden.leftCols(C);
        Mat<T> d_diffused = d_hidden.middleCols(C, C);
        const Mat<T> d_wpre = d_hidden.rightCols(C).cwiseProduct((T(1) - cb.w.array().square()).matrix());

        const Mat<T> d_yre = d_wpre.cwiseProduct(cb.z_re);
        const Mat<T> d_yim = d_wpre.cwiseProduct(cb.z_im);
        const auto A_re = cmat(params, bo.mix_re, C, C);
        const auto A_im = cmat(params, bo.mix_im, C, C);
        mmat(grad, bo.mix_re, C, C) = d_yre.transpose() * cb.z_re + d_yim.transpose() * cb.z_im;
        mmat(grad, bo.mix_im, C, C) = d_yim.transpose() * cb.z_re - d_yre.transpose() * cb.z_im;
        const Mat<T> d_zre = d_wpre.cwiseProduct(cb.y_re) + d_yre * A_re + d_yim * A_im;
        const Mat<T> d_zim = d_wpre.cwiseProduct(cb.y_im) - d_yre * A_im + d_yim * A_re;
        d_diffused += ops.grad_re.transpose() * d_zre + ops.grad_im.transpose() * d_zim;

        // diffused = basis * (spectral .* decay), decay = exp(-lambda t).
        const Mat<T> d_scaled = ops.basis.transpose() * d_diffused;
        const Mat<T> d_spec = d_scaled.cwiseProduct(cb.decay);
        const Vec<T> times = cvec(params, bo.log_time, C).array().exp();
        const Mat<T> d_decay_dt = -(ops.eigenvalues.asDiagonal() * cb.decay);
        mvec(grad, bo.log_time, C) =
            (d_scaled.cwiseProduct(cb.spectral).cwiseProduct(d_decay_dt)).colwise().sum().transpose().cwiseProduct(times);
        d_u += ops.basis_mass_t.transpose() * d_spec;
        du = std::move(d_u);
    }

    mmat(grad, o.in_w, C, shape.input_dim) = du.transpose() * cache.input;
    mvec(grad, o.in_b, C) = du.colwise().sum().transpose();
    return grad;
}

template <typename T>
Loss<T> cross_entropy(const Mat<T>& logits, const std::vector<std::uint8_t>& labels, const std::array<double, 2>& class_weights)
{
    if (logits.cols() != 2 || static_cast<std::size_t>(logits.rows()) != labels.size()) {
        throw ArgumentError("cross_entropy: " + std::to_string(logits.rows()) + "x" + std::to_string(logits.cols()) +
                            " logits for " + std::to_string(labels.size()) + " labels");
    }
    const Eigen::Index V = logits.rows();
    Loss<T> out{T(0), Mat<T>(V, 2)};
    if (V == 0) return out;
    double total = 0.0;
    const T inv_n = T(1) / static_cast<T>(V);
    for (Eigen::Index v = 0; v < V; ++v) {
        const std::uint8_t y = labels[static_cast<std::size_t>(v)];
        if (y > 1) throw ArgumentError("cross_entropy: label " + std::to_string(y) + " at vertex " + std::to_string(v));
        const T m = std::max(logits(v, 0), logits(v, 1));
        const T e0 = std::exp(logits(v, 0) - m), e1 = std::exp(logits(v, 1) - m);
        const T sum = e0 + e1;
        const T lse = m + std::log(sum);
        const T w = static_cast<T>(class_weights[y]);
        total += static_cast<double>(w * (lse - logits(v, y)));
        out.d_logits(v, 0) = w * inv_n * (e0 / sum - (y == 0 ? T(1) : T(0)));
        out.d_logits(v, 1) = w * inv_n * (e1 / sum - (y == 1 ? T(1) : T(0)));
    }
    out.value = static_cast<T>(total / static_cast<double>(V));
    return out;
}

template <typename T>
void adam_step(Vec<T>& params, const Vec<T>& grads, AdamState<T>& state, const AdamConfig& config)
{
    if (grads.size() != params.size()) throw ArgumentError("adam_step: gradient and parameter sizes differ");
    if (state.m.size() != params.size()) {
        state.m = Vec<T>::Zero(params.size());
        state.v = Vec<T>::Zero(params.size());
        state.step = 0;
    }
    ++state.step;
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const T lr = static_cast<T>(config.learning_rate / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(config.epsilon);
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
        params[i] -= lr * state.m[i] / (std::sqrt(state.v[i] * inv_c2) + eps);
    }
}

std::vector<std::uint8_t> predict_labels(const Eigen::MatrixXf& logits)
{
    std::vector<std::uint8_t> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index v = 0; v < logits.rows(); ++v) out[static_cast<std::size_t>(v)] = logits(v, 1) > logits(v, 0) ? 1 : 0;
    return out;
}

void fold_input_normalization(DiffusionNetParams& params, const Eigen::VectorXd& mean, const Eigen::VectorXd& scale)
{
    const auto& s = params.shape;
    if (mean.size() != s.input_dim || scale.size() != s.input_dim) {
        throw ArgumentError("fold_input_normalization: statistics do not match the input dimension");
    }
    const auto o = offsets(s);
    Eigen::MatrixXd W = Eigen::Map<const Eigen::MatrixXf>(params.values.data() + o.in_w, s.width, s.input_dim).cast<double>();
    Eigen::VectorXd bias = Eigen::Map<const Eigen::VectorXf>(params.values.data() + o.in_b, s.width).cast<double>();
    W = W * scale.cwiseInverse().asDiagonal();
    bias -= W * mean;
    Eigen::Map<Eigen::MatrixXf>(params.values.data() + o.in_w, s.width, s.input_dim) = W.cast<float>();
    Eigen::Map<Eigen::VectorXf>(params.values.data() + o.in_b, s.width) = bias.cast<float>();
}

void save_params(const DiffusionNetParams& params, const std::filesystem::path& path)
{
    if (static_cast<std::size_t>(params.values.size()) != param_count(params.shape)) {
        throw ArgumentError("save_params: parameter vector does not match the layout");
    }
    std::vector<char> out;
    bin::put_magic(out, "DNET");
    bin::put_u32(out, 1);
    for (int v : {params.shape.blocks, params.shape.width, params.shape.input_dim, params.shape.k}) {
        bin::put_u32(out, static_cast<std::uint32_t>(v));
    }
    for (Eigen::Index i = 0; i < params.values.size(); ++i) bin::put_f32(out, params.values[i]);
    bin::write_file_atomic(path, out);
}

DiffusionNetParams load_params(const std::filesystem::path& path)
{
    bin::Reader r(bin::read_file(path), path.string());
    r.expect_magic("DNET");
    const auto version = r.u32();
    if (version != 1) throw FormatError(path.string() + ": unsupported DNET version " + std::to_string(version));
    DiffusionNetParams p;
    p.shape.blocks = static_cast<int>(r.u32());
    p.shape.width = static_cast<int>(r.u32());
    p.shape.input_dim = static_cast<int>(r.u32());
    p.shape.k = static_cast<int>(r.u32());
    std::size_t n = 0;
    try {
        n = param_count(p.shape);
    } catch (const ArgumentError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    r.need(4 * n, "parameters");
    p.values.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const float v = r.f32();
        if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite parameter " + std::to_string(i));
        p.values[static_cast<Eigen::Index>(i)] = v;
    }
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after parameters");
    return p;
}

#define HEADSEG_INSTANTIATE(T)                                                                                     \
    template Mat<T> forward<T>(const NetShape&, const Vec<T>&, const Operators<T>&, const Mat<T>&, ForwardCache<T>*); \
    template Vec<T> backward<T>(const NetShape&, const Vec<T>&, const Operators<T>&, const ForwardCache<T>&,         \
                                const Mat<T>&);                                                                     \
    template Loss<T> cross_entropy<T>(const Mat<T>&, const std::vector<std::uint8_t>&, const std::array<double, 2>&); \
    template void adam_step<T>(Vec<T>&, const Vec<T>&, AdamState<T>&, const AdamConfig&);

HEADSEG_INSTANTIATE(float)
HEADSEG_INSTANTIATE(double)
#undef HEADSEG_INSTANTIATE

} // namespace headseg::diffnet
