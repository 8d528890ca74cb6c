#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "headseg/segpipe.hpp"

namespace headseg::segpipe {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError("unknown key \"" + key + "\" in " + where);
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + " has the wrong type (" + j.at(key).dump() + ")");
    }
}

void require(bool ok, const std::string& what)
{
    if (!ok) throw ConfigError(what);
}

void parse_network(const json& j, PipelineConfig& c)
{
    const std::string where = "network";
    reject_unknown(j,
                   {"learningRate", "adamBeta1", "adamBeta2", "epsilon", "epochs", "batchSize", "seed", "width",
                    "blocks", "validationFraction", "balanceClasses"},
                   where);
    auto& n = c.network;
    read(j, "learningRate", n.adam.learning_rate, where);
    read(j, "adamBeta1", n.adam.beta1, where);
    read(j, "adamBeta2", n.adam.beta2, where);
    read(j, "epsilon", n.adam.epsilon, where);
    read(j, "epochs", n.epochs, where);
    read(j, "batchSize", n.batch_size, where);
    read(j, "seed", n.seed, where);
    read(j, "width", n.width, where);
    read(j, "blocks", n.blocks, where);
    read(j, "validationFraction", c.validation_fraction, where);
    read(j, "balanceClasses", n.balance_classes, where);
}

PipelineConfig parse_object(const json& j)
{
    PipelineConfig c;
    const std::string where = "config";
    reject_unknown(j, {"id", "featureSource", "fusion", "geomFeatures", "network", "eigK", "hksT", "labelThreshold"}, where);
    read(j, "id", c.id, where);
    if (j.contains("featureSource")) {
        std::string s;
        read(j, "featureSource", s, where);
        if (s == "handcrafted") c.feature_source = FeatureSource::handcrafted;
        else if (s == "fmapFiles") c.feature_source = FeatureSource::fmap_files;
        else throw ConfigError("featureSource must be \"handcrafted\" or \"fmapFiles\", got \"" + s + "\"");
    }
    if (j.contains("fusion")) {
        std::string s;
        read(j, "fusion", s, where);
        c.fusion = fusion_from_string(s);
    }
    if (j.contains("geomFeatures")) {
        std::vector<std::string> names;
        read(j, "geomFeatures", names, where);
        c.geom = GeomSelection{false, false, false};
        std::set<std::string> seen;
        for (const auto& name : names) {
            if (!seen.insert(name).second) throw ConfigError("geomFeatures lists \"" + name + "\" twice");
            if (name == "hks") c.geom.hks = true;
            else if (name == "sigma30") c.geom.sigma30 = true;
            else if (name == "color") c.geom.color = true;
            else throw ConfigError("unknown geometric feature \"" + name + "\" (expected hks, sigma30 or color)");
        }
    }
    if (j.contains("network")) parse_network(j.at("network"), c);
    read(j, "eigK", c.eig_k, where);
    read(j, "hksT", c.hks_t, where);
    read(j, "labelThreshold", c.label_threshold, where);

    require(!c.id.empty() && c.id.find_first_of("\t\n") == std::string::npos, "id must be non-empty without tabs or newlines");
    require(c.eig_k >= 1, "eigK must be at least 1");
    require(c.hks_t >= 1, "hksT must be at least 1");
    require(c.label_threshold > 0, "labelThreshold must be positive");
    const auto& n = c.network;
    require(n.adam.learning_rate > 0, "network.learningRate must be positive");
    require(n.adam.beta1 >= 0 && n.adam.beta1 < 1, "network.adamBeta1 must lie in [0, 1)");
    require(n.adam.beta2 >= 0 && n.adam.beta2 < 1, "network.adamBeta2 must lie in [0, 1)");
    require(n.adam.epsilon > 0, "network.epsilon must be positive");
    require(n.epochs >= 1, "network.epochs must be at least 1");
    require(n.batch_size >= 1, "network.batchSize must be at least 1");
    require(n.width >= 1, "network.width must be at least 1");
    require(n.blocks >= 0, "network.blocks must be non-negative");
    require(c.validation_fraction >= 0 && c.validation_fraction < 1, "network.validationFraction must lie in [0, 1)");
    require(c.fusion != Fusion::none || c.geom.hks || c.geom.sigma30 || c.geom.color,
            "fusion \"none\" with no geomFeatures leaves the network without inputs");
    c.network.k = c.eig_k;
    return c;
}

json to_json_object(const PipelineConfig& c)
{
    std::vector<std::string> geom;
    if (c.geom.hks) geom.push_back("hks");
    if (c.geom.sigma30) geom.push_back("sigma30");
    if (c.geom.color) geom.push_back("color");
    const auto& n = c.network;
    return json{{"id", c.id},
                {"featureSource", c.feature_source == FeatureSource::handcrafted ? "handcrafted" : "fmapFiles"},
                {"fusion", to_string(c.fusion)},
                {"geomFeatures", geom},
                {"network",
                 {{"learningRate", n.adam.learning_rate},
                  {"adamBeta1", n.adam.beta1},
                  {"adamBeta2", n.adam.beta2},
                  {"epsilon", n.adam.epsilon},
                  {"epochs", n.epochs},
                  {"batchSize", n.batch_size},
                  {"seed", n.seed},
                  {"width", n.width},
                  {"blocks", n.blocks},
                  {"validationFraction", c.validation_fraction},
                  {"balanceClasses", n.balance_classes}}},
                {"eigK", c.eig_k},
                {"hksT", c.hks_t},
                {"labelThreshold", c.label_threshold}};
}

json parse_text(const std::string& text, const std::string& source)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(source + ": invalid JSON: " + e.what());
    }
}

std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

std::string to_string(Fusion f)
{
    switch (f) {
    case Fusion::none: return "none";
    case Fusion::mean: return "mean";
    case Fusion::mean_var: return "mean+var";
    case Fusion::vis_mean: return "visMean";
    case Fusion::vis_mean_var: return "visMean+var";
    }
    return "?";
}

Fusion fusion_from_string(const std::string& s)
{
    for (auto f : {Fusion::none, Fusion::mean, Fusion::mean_var, Fusion::vis_mean, Fusion::vis_mean_var}) {
        if (to_string(f) == s) return f;
    }
    throw ConfigError("fusion must be one of none, mean, mean+var, visMean, visMean+var; got \"" + s + "\"");
}

PipelineConfig parse_config(const std::string& json_text)
{
    return parse_object(parse_text(json_text, "config"));
}

PipelineConfig load_config(const std::filesystem::path& path)
{
    return parse_object(parse_text(read_text(path), path.string()));
}

std::string config_to_json(const PipelineConfig& config)
{
    return to_json_object(config).dump(2) + "\n";
}

int input_dim(const PipelineConfig& config, int feature_channels)
{
    int d = 0;
    switch (config.fusion) {
    case Fusion::none: break;
    case Fusion::mean:
    case Fusion::vis_mean: d += feature_channels + 2; break;
    case Fusion::mean_var:
    case Fusion::vis_mean_var: d += 2 * feature_channels + 2; break;
    }
    if (config.geom.sigma30) d += 1;
    if (config.geom.hks) d += config.hks_t;
    if (config.geom.color) d += 3;
    return d;
}

AblationPlan parse_ablation_plan(const std::string& json_text)
{
    const json j = parse_text(json_text, "ablation plan");
    reject_unknown(j, {"configs", "seeds"}, "ablation plan");
    if (!j.contains("configs") || !j.at("configs").is_array() || j.at("configs").empty()) {
        throw ConfigError("ablation plan needs a non-empty \"configs\" array");
    }
    AblationPlan plan;
    std::set<std::string> ids;
    for (const auto& entry : j.at("configs")) {
        auto c = parse_object(entry);
        if (!entry.contains("id")) throw ConfigError("every ablation config needs an \"id\"");
        if (!ids.insert(c.id).second) throw ConfigError("duplicate ablation config id \"" + c.id + "\"");
        plan.configs.push_back(std::move(c));
    }
    read(j, "seeds", plan.seeds, "ablation plan");
    if (plan.seeds.empty()) throw ConfigError("ablation plan \"seeds\" must not be empty");
    return plan;
}

AblationPlan load_ablation_plan(const std::filesystem::path& path)
{
    return parse_ablation_plan(read_text(path));
}

} // namespace headseg::segpipe
