#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "headseg/diffnet.hpp"
#include "headseg/mesh.hpp"
#include "headseg/metrics.hpp"
#include "headseg/mview.hpp"
#include "headseg/spectral.hpp"

namespace headseg::segpipe {

enum class FeatureSource { handcrafted, fmap_files };

/// Image-feature lifting. `mean` weights every view that sees the vertex
/// inside its frustum equally, occlusion ignored; the `vis` variants use the
/// visibility weights. `none` drops image features entirely.
enum class Fusion { none, mean, mean_var, vis_mean, vis_mean_var };

struct GeomSelection {
    bool hks = false;
    bool sigma30 = true;
    bool color = false;
};

struct PipelineConfig {
    std::string id = "default";
    FeatureSource feature_source = FeatureSource::handcrafted;
    Fusion fusion = Fusion::vis_mean_var;
    GeomSelection geom;
    diffnet::TrainConfig network;
    /// Fraction of the training list (taken from its end) held out for
    /// checkpoint selection.
    double validation_fraction = 0.15;
    int eig_k = 128;
    int hks_t = 16;
    double label_threshold = 1.5;
};

std::string to_string(Fusion f);
Fusion fusion_from_string(const std::string& s);

/// Strict JSON parsing: unknown keys and out-of-range values raise ConfigError.
/// Missing keys keep the defaults above.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const PipelineConfig& config);

/// Per-vertex input width implied by the configuration.
int input_dim(const PipelineConfig& config, int feature_channels);

struct PrecomputeStats {
    int eigensolves = 0;
    int files_written = 0;
};

/// Builds every cache the configuration needs under <sample>/cache. Cache
/// files are named by a content hash of their inputs, so unchanged inputs
/// cause no work and no writes. All inputs are validated and all artifacts
/// computed before anything is written.
PrecomputeStats precompute(const std::filesystem::path& sample_dir, const PipelineConfig& config);

/// One sample with everything the network and the metrics need.
struct PreparedSample {
    std::string name;
    mesh::TriMesh scan;
    mesh::TriMesh reference;
    std::vector<std::uint8_t> labels;
    Eigen::MatrixXd features;  // V x input_dim, unnormalized
    std::shared_ptr<const diffnet::Operators<float>> ops;
};

/// Runs precompute, then loads the sample from its caches.
PreparedSample prepare(const std::filesystem::path& sample_dir, const PipelineConfig& config,
                       PrecomputeStats* stats = nullptr);

std::vector<PreparedSample> prepare_all(const std::filesystem::path& root, const std::vector<std::string>& names,
                                        const PipelineConfig& config, PrecomputeStats* stats = nullptr);

struct TrainOutcome {
    diffnet::DiffusionNetParams params;  // accepts raw features
    diffnet::TrainResult result;
    std::vector<std::string> train_names, validation_names;
};

/// Standardizes features with training statistics, trains, and folds the
/// statistics into the returned parameters.
TrainOutcome train_model(const std::vector<PreparedSample>& train_set, const std::vector<PreparedSample>& validation_set,
                         const PipelineConfig& config,
                         const std::function<void(const diffnet::EpochLog&)>& on_epoch = {});

/// Holds out the validation fraction from the end of train_names.
TrainOutcome train_model(const std::filesystem::path& root, const std::vector<std::string>& train_names,
                         const PipelineConfig& config,
                         const std::function<void(const diffnet::EpochLog&)>& on_epoch = {});

struct Inference {
    std::vector<std::uint8_t> labels;
    Eigen::MatrixXf logits;
};

/// Throws ConfigError when the checkpoint shape does not fit the configured
/// features or basis size.
Inference infer(const diffnet::DiffusionNetParams& params, const PreparedSample& sample);
Inference infer(const diffnet::DiffusionNetParams& params, const std::filesystem::path& sample_dir,
                const PipelineConfig& config);

struct DistanceStats {
    double mean = 0;
    double stddev = 0;
    std::size_t count = 0;
};

/// Point-to-surface distance statistics (population standard deviation).
DistanceStats d_surface(const std::vector<Vec3>& points, const mesh::TriMesh& surface);

struct SampleReport {
    std::string name;
    double miou;
    DistanceStats distance;  // over predicted-skin vertices
};

struct EvalReport {
    double miou = 0;          // mean of per-sample mIoU
    DistanceStats distance;   // pooled over predicted-skin vertices of all samples
    std::vector<SampleReport> samples;
};

EvalReport evaluate(const diffnet::DiffusionNetParams& params, const std::vector<PreparedSample>& samples);
EvalReport evaluate(const diffnet::DiffusionNetParams& params, const std::filesystem::path& root,
                    const std::vector<std::string>& names, const PipelineConfig& config);
std::string report_to_json(const EvalReport& report);

struct AblationRow {
    std::string config_id;
    std::string split;
    double miou;
    double d_mean_mm;
    double d_std_mm;
    std::uint64_t seed;
    std::string error;  // empty on success
};

struct AblationPlan {
    std::vector<PipelineConfig> configs;
    std::vector<std::uint64_t> seeds{0};
};

/// {"configs": [...], "seeds": [...]}; each config entry is a PipelineConfig
/// object with an "id".
AblationPlan parse_ablation_plan(const std::string& json_text);
AblationPlan load_ablation_plan(const std::filesystem::path& path);

/// One train and test evaluation per (config, seed); the seed replaces the
/// network seed. A failing configuration yields a row with its error and the
/// others still run.
std::vector<AblationRow> run_ablation(const std::filesystem::path& root, const AblationPlan& plan,
                                      const std::function<void(const AblationRow&)>& on_row = {});

/// Columns: config_id, split, mIoU, d_mean_mm, d_std_mm, seed.
std::string ablation_tsv(const std::vector<AblationRow>& rows);

} // namespace headseg::segpipe
