#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "headseg/mesh.hpp"
#include "headseg/spectral.hpp"

namespace headseg::diffnet {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct TangentFrames {
    std::vector<Vec3> e1, e2, normal;
    /// Row v maps a vertex function f to <grad f, e1> + i <grad f, e2> at v.
    Eigen::SparseMatrix<std::complex<double>, Eigen::RowMajor> gradient;
    std::vector<bool> isolated;
};

/// e1 is the tangent projection of the x axis (y axis when that is shorter
/// than 1e-3); the gradient row of each vertex is the least-squares fit of its
/// one-ring edge differences in the (e1, e2) plane. Isolated vertices get an
/// arbitrary frame and an empty row.
TangentFrames build_tangent_frames(const mesh::TriMesh& mesh);

/// Constant per-mesh operators in the working precision.
template <typename T>
struct Operators {
    Mat<T> basis;           // V x k
    Mat<T> basis_mass_t;    // k x V, basis^T M
    Vec<T> eigenvalues;     // k
    Eigen::SparseMatrix<T, Eigen::RowMajor> grad_re, grad_im;

    Eigen::Index num_vertices() const { return basis.rows(); }
};

/// Uses the first k eigenpairs of the basis.
template <typename T>
Operators<T> make_operators(const spectral::SpectralBasis& basis, const TangentFrames& frames, int k);

struct NetShape {
    int blocks = 2;
    int width = 32;
    int input_dim = 0;
    int k = 128;

    bool operator==(const NetShape&) const = default;
};

struct ParamEntry {
    std::string name;
    std::size_t offset;
    int rows, cols;
};

/// Flat layout: input weight (C x D) and bias, then per block
/// log diffusion times (C), gradient mix real and imaginary parts (C x C each),
/// first MLP layer (C x 3C) and bias, second MLP layer (C x C) and bias, then
/// output weight (2 x C) and bias. Matrices are column-major.
std::vector<ParamEntry> param_layout(const NetShape& shape);
/// C(D + 1) + B(6C^2 + 3C) + 2C + 2.
std::size_t param_count(const NetShape& shape);

struct DiffusionNetParams {
    NetShape shape;
    Eigen::VectorXf values;
};

/// Linear layers uniform in +-1/sqrt(fan_in); diffusion times log-uniform in
/// [time_min, time_max].
DiffusionNetParams initialize(const NetShape& shape, std::uint64_t seed, double time_min, double time_max);

template <typename T>
struct ForwardCache {
    Mat<T> input;
    struct Block {
        Mat<T> u_in, spectral, decay, diffused, z_re, z_im, y_re, y_im, w, hidden, pre_act, act;
    };
    std::vector<Block> blocks;
    Mat<T> final;
};

/// Logits, V x 2. Pass a cache to enable backward.
template <typename T>
Mat<T> forward(const NetShape& shape, const Vec<T>& params, const Operators<T>& ops, const Mat<T>& x,
               ForwardCache<T>* cache = nullptr);

/// Gradient of a scalar loss with respect to every parameter, given its
/// gradient with respect to the logits.
template <typename T>
Vec<T> backward(const NetShape& shape, const Vec<T>& params, const Operators<T>& ops, const ForwardCache<T>& cache,
                const Mat<T>& d_logits);

template <typename T>
struct Loss {
    T value;
    Mat<T> d_logits;
};

/// Mean over vertices of class-weighted negative log-softmax of the true class.
template <typename T>
Loss<T> cross_entropy(const Mat<T>& logits, const std::vector<std::uint8_t>& labels, const std::array<double, 2>& class_weights);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
    Vec<T> m, v;
    long long step = 0;
};

template <typename T>
void adam_step(Vec<T>& params, const Vec<T>& grads, AdamState<T>& state, const AdamConfig& config);

/// Argmax per vertex; ties go to class 0 (non-skin).
std::vector<std::uint8_t> predict_labels(const Eigen::MatrixXf& logits);

struct TrainConfig {
    AdamConfig adam;
    int epochs = 150;
    int batch_size = 1;
    std::uint64_t seed = 0;
    int width = 32;
    int blocks = 2;
    int k = 128;
    bool balance_classes = true;
};

struct TrainSample {
    std::string name;
    std::shared_ptr<const Operators<float>> ops;
    Eigen::MatrixXf features;
    std::vector<std::uint8_t> labels;
};

struct EpochLog {
    int epoch;
    double train_loss;
    double validation_miou;
};

struct TrainResult {
    DiffusionNetParams params;
    std::vector<EpochLog> log;
    int best_epoch = -1;
    std::array<double, 2> class_weights{};
};

struct TrainingError : Error {
    using Error::Error;
};

/// w_c = N / (2 N_c) over all training vertices; 1 for an absent class.
std::array<double, 2> inverse_frequency_weights(const std::vector<TrainSample>& samples);

/// Seeded shuffle each epoch, one Adam step per batch of meshes. Returns the
/// parameters of the epoch with the best validation mIoU (training mIoU when
/// the validation set is empty; earliest epoch on ties). A non-finite loss
/// throws TrainingError.
TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& validation_set,
                  const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch = {});

/// Sum of per-mesh gradients of the weighted loss; meshes may be processed in
/// parallel but are reduced in order.
Eigen::VectorXf accumulate_gradients(const DiffusionNetParams& params, const std::vector<const TrainSample*>& batch,
                                     const std::array<double, 2>& class_weights, double* loss_sum = nullptr);

/// Rewrites the input layer so the network accepts raw features x where it was
/// trained on (x - mean) / scale.
void fold_input_normalization(DiffusionNetParams& params, const Eigen::VectorXd& mean, const Eigen::VectorXd& scale);

// DNET checkpoint: "DNET", u32 version, u32 blocks, width, input_dim, k, then
// the f32 parameter vector; little-endian.
void save_params(const DiffusionNetParams& params, const std::filesystem::path& path);
DiffusionNetParams load_params(const std::filesystem::path& path);

} // namespace headseg::diffnet
