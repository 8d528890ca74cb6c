#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "headseg/segpipe.hpp"
#include "headseg/synthgen.hpp"

namespace headseg::segpipe {

namespace fs = std::filesystem;

namespace {

std::vector<diffnet::TrainSample> to_train_samples(const std::vector<PreparedSample>& samples, const Eigen::VectorXd& mean,
                                                   const Eigen::VectorXd& scale)
{
    std::vector<diffnet::TrainSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        const Eigen::MatrixXd z = (s.features.rowwise() - mean.transpose()) * scale.cwiseInverse().asDiagonal();
        out.push_back({s.name, s.ops, z.cast<float>(), s.labels});
    }
    return out;
}

void check_compatible(const diffnet::DiffusionNetParams& params, const PreparedSample& s)
{
    if (params.shape.input_dim != s.features.cols()) {
        throw ConfigError("checkpoint expects " + std::to_string(params.shape.input_dim) +
                          " input channels but the configuration produces " + std::to_string(s.features.cols()) +
                          " for " + s.name + "; use the config the checkpoint was trained with");
    }
    if (params.shape.k != s.ops->basis.cols()) {
        throw ConfigError("checkpoint uses " + std::to_string(params.shape.k) + " eigenpairs but the configuration has eigK " +
                          std::to_string(s.ops->basis.cols()));
    }
}

DistanceStats stats_of(const std::vector<double>& d)
{
    DistanceStats s;
    s.count = d.size();
    if (d.empty()) {
        s.mean = s.stddev = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    double sum = 0.0;
    for (double v : d) sum += v;
    s.mean = sum / static_cast<double>(d.size());
    double sq = 0.0;
    for (double v : d) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(d.size()));
    return s;
}

std::string format_number(double v)
{
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

TrainOutcome train_model(const std::vector<PreparedSample>& train_set, const std::vector<PreparedSample>& validation_set,
                         const PipelineConfig& config, const std::function<void(const diffnet::EpochLog&)>& on_epoch)
{
    if (train_set.empty()) throw ValidationError("training list is empty");
    const Eigen::Index D = train_set.front().features.cols();
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

    diffnet::TrainConfig net = config.network;
    net.k = config.eig_k;
    TrainOutcome out;
    out.result = diffnet::train(to_train_samples(train_set, mean, scale), to_train_samples(validation_set, mean, scale), net,
                                on_epoch);
    out.params = out.result.params;
    diffnet::fold_input_normalization(out.params, mean, scale);
    for (const auto& s : train_set) out.train_names.push_back(s.name);
    for (const auto& s : validation_set) out.validation_names.push_back(s.name);
    return out;
}

TrainOutcome train_model(const fs::path& root, const std::vector<std::string>& train_names, const PipelineConfig& config,
                         const std::function<void(const diffnet::EpochLog&)>& on_epoch)
{
    if (train_names.empty()) throw ValidationError("training list is empty");
    std::size_t n_val = 0;
    if (config.validation_fraction > 0 && train_names.size() >= 2) {
        n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.validation_fraction * train_names.size())));
        n_val = std::min(n_val, train_names.size() - 1);
    }
    const std::vector<std::string> fit(train_names.begin(), train_names.end() - static_cast<std::ptrdiff_t>(n_val));
    const std::vector<std::string> val(train_names.end() - static_cast<std::ptrdiff_t>(n_val), train_names.end());
    return train_model(prepare_all(root, fit, config), prepare_all(root, val, config), config, on_epoch);
}

Inference infer(const diffnet::DiffusionNetParams& params, const PreparedSample& sample)
{
    check_compatible(params, sample);
    Inference out;
    out.logits = diffnet::forward<float>(params.shape, params.values, *sample.ops, sample.features.cast<float>());
    out.labels = diffnet::predict_labels(out.logits);
    return out;
}

Inference infer(const diffnet::DiffusionNetParams& params, const fs::path& sample_dir, const PipelineConfig& config)
{
    return infer(params, prepare(sample_dir, config));
}

DistanceStats d_surface(const std::vector<Vec3>& points, const mesh::TriMesh& surface)
{
    if (points.empty()) throw ArgumentError("d_surface: no points to evaluate");
    return stats_of(synthgen::SurfaceIndex(surface).distances(points));
}

EvalReport evaluate(const diffnet::DiffusionNetParams& params, const std::vector<PreparedSample>& samples)
{
    if (samples.empty()) throw ValidationError("evaluation list is empty");
    EvalReport report;
    report.samples.resize(samples.size());
    std::vector<std::vector<double>> distances(samples.size());
    for (const auto& s : samples) check_compatible(params, s);
    parallel_for(samples.size(), [&](std::size_t i) {
        const auto& s = samples[i];
        const auto inf = infer(params, s);
        std::vector<Vec3> skin;
        for (std::size_t v = 0; v < inf.labels.size(); ++v) {
            if (inf.labels[v] == synthgen::kSkin) skin.push_back(s.scan.positions[v]);
        }
        distances[i] = skin.empty() ? std::vector<double>{} : synthgen::SurfaceIndex(s.reference).distances(skin);
        report.samples[i] = {s.name, metrics::miou(inf.labels, s.labels), stats_of(distances[i])};
    });
    std::vector<double> pooled;
    double miou_sum = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        pooled.insert(pooled.end(), distances[i].begin(), distances[i].end());
        miou_sum += report.samples[i].miou;
    }
    report.miou = miou_sum / static_cast<double>(samples.size());
    report.distance = stats_of(pooled);
    return report;
}

EvalReport evaluate(const diffnet::DiffusionNetParams& params, const fs::path& root, const std::vector<std::string>& names,
                    const PipelineConfig& config)
{
    return evaluate(params, prepare_all(root, names, config));
}

std::string report_to_json(const EvalReport& report)
{
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : report.samples) {
        samples.push_back({{"name", s.name},
                           {"mIoU", s.miou},
                           {"dMeanMm", num(s.distance.mean)},
                           {"dStdMm", num(s.distance.stddev)},
                           {"skinVertices", s.distance.count}});
    }
    const nlohmann::json j{{"mIoU", report.miou},
                           {"dSurface", {{"meanMm", num(report.distance.mean)},
                                         {"stdMm", num(report.distance.stddev)},
                                         {"points", report.distance.count}}},
                           {"samples", samples}};
    return j.dump(2) + "\n";
}

std::vector<AblationRow> run_ablation(const fs::path& root, const AblationPlan& plan,
                                      const std::function<void(const AblationRow&)>& on_row)
{
    const auto split = synthgen::read_split(root);
    std::vector<AblationRow> rows;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (const auto& config : plan.configs) {
        std::vector<PreparedSample> fit, val, test;
        std::string setup_error;
        try {
            std::size_t n_val = 0;
            if (config.validation_fraction > 0 && split.train.size() >= 2) {
                n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.validation_fraction * split.train.size())));
                n_val = std::min(n_val, split.train.size() - 1);
            }
            const auto cut = split.train.end() - static_cast<std::ptrdiff_t>(n_val);
            fit = prepare_all(root, {split.train.begin(), cut}, config);
            val = prepare_all(root, {cut, split.train.end()}, config);
            test = prepare_all(root, split.test, config);
        } catch (const Error& e) {
            setup_error = e.what();
        }
        for (auto seed : plan.seeds) {
            AblationRow row{config.id, "test", nan, nan, nan, seed, setup_error};
            if (setup_error.empty()) {
                try {
                    auto c = config;
                    c.network.seed = seed;
                    const auto model = train_model(fit, val, c);
                    const auto report = evaluate(model.params, test);
                    row.miou = report.miou;
                    row.d_mean_mm = report.distance.mean;
                    row.d_std_mm = report.distance.stddev;
                } catch (const Error& e) {
                    row.error = e.what();
                }
            }
            rows.push_back(row);
            if (on_row) on_row(row);
        }
    }
    return rows;
}

std::string ablation_tsv(const std::vector<AblationRow>& rows)
{
    std::string out = "config_id\tsplit\tmIoU\td_mean_mm\td_std_mm\tseed\n";
    for (const auto& r : rows) {
        out += r.config_id + "\t" + r.split + "\t" + format_number(r.miou) + "\t" + format_number(r.d_mean_mm) + "\t" +
               format_number(r.d_std_mm) + "\t" + std::to_string(r.seed) + "\n";
    }
    return out;
}

} // namespace headseg::segpipe
