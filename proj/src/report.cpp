#include "qmerge/report.hpp"

#include <algorithm>
#include <cmath>

namespace qmerge {

using nlohmann::json;

json config_to_json(const PipelineConfig& cfg) {
    json j;
    j["alpha"] = cfg.alpha;
    j["tau"] = cfg.tau;
    j["epsilon"] = cfg.epsilon;
    j["delta"] = cfg.delta;
    j["k_max"] = cfg.k_max ? json(*cfg.k_max) : json(nullptr);
    j["k_min"] = cfg.k_min;
    j["invert_entropy"] = cfg.invert_entropy;
    j["cluster"] = std::string(cluster_method_name(cfg.cluster_method));
    j["knn_neighbors"] = cfg.knn_neighbors;
    j["seed"] = cfg.seed;
    j["hard_selection"] = cfg.hard_selection;
    return j;
}

json prior_config_to_json(const PriorConfig& cfg) {
    return {{"layers", cfg.layers},         {"model_dim", cfg.model_dim}, {"heads", cfg.heads},
            {"context", cfg.context},       {"ffn_mult", cfg.ffn_mult},   {"learn_rate", cfg.learn_rate},
            {"momentum", cfg.momentum},     {"epochs", cfg.epochs},       {"seed", cfg.seed},
            {"residual_input", cfg.residual_input}};
}

json synthetic_to_json(const SyntheticSpec& spec, const std::vector<std::size_t>& assignment) {
    return {{"n", spec.n},           {"d", spec.d},         {"layers", spec.layers},
            {"clusters", spec.clusters}, {"noise", spec.noise}, {"seed", spec.seed},
            {"assignment", assignment}};
}

json run_item_json(const RunResult& r, std::size_t index, std::size_t dim) {
    const auto& f = r.fidelity;
    json j;
    j["index"] = index;
    j["n"] = f.n;
    j["k"] = f.k;
    j["d"] = dim;
    j["comp_rate"] = f.comp_rate;
    j["gamma"] = f.gamma;
    j["lhs"] = f.lhs;
    j["rhs_bound"] = f.rhs_bound;
    j["cluster_spread"] = f.cluster_spread;
    j["bound_holds"] = f.bound_holds;
    j["flops_full"] = f.flops.flops_full;
    j["flops_merged"] = f.flops.flops_merged;
    j["flop_speedup"] = f.flops.speedup;
    const auto& t = r.timings;
    j["timings_ms"] = {{"saliency", t.saliency_ms}, {"budget", t.budget_ms}, {"selection", t.selection_ms},
                       {"cluster", t.cluster_ms},   {"merge", t.merge_ms},   {"fidelity", t.fidelity_ms},
                       {"decode", t.decode_ms},     {"total", t.total_ms}};
    return j;
}

json saliency_json(const SaliencyProfile& p) {
    json entropies = json::array();
    for (std::size_t l = 0; l < p.entropies.rows(); ++l) {
        auto row = p.entropies.row(l);
        entropies.push_back(std::vector<double>(row.begin(), row.end()));
    }
    std::vector<bool> degenerate(p.ned_degenerate.begin(), p.ned_degenerate.end());
    return {{"entropies", entropies}, {"saliency", p.saliency},   {"ned", p.ned},
            {"ned_degenerate", degenerate}, {"sigma2", p.sigma2}, {"column_mean", p.column_mean},
            {"proxy", p.proxy}};
}

json build_report(std::string_view command, const json& config, const std::vector<json>& items) {
    json doc;
    doc["schema_version"] = std::string(kReportSchemaVersion);
    doc["command"] = std::string(command);
    doc["config"] = config;
    doc["items"] = items;
    json agg = json::object();
    static const char* fields[] = {"n",  "k", "comp_rate", "gamma", "lhs", "rhs_bound", "cluster_spread",
                                   "flops_full", "flops_merged", "flop_speedup"};
    for (const char* field : fields) {
        if (items.empty()) {
            agg[field] = {{"mean", 0.0}, {"stddev", 0.0}};
            continue;
        }
        // Shifted by the first value so identical items give exactly zero spread.
        const double shift = items.front().at(field).get<double>();
        double sum = 0.0, sq = 0.0;
        for (const auto& it : items) {
            const double d = it.at(field).get<double>() - shift;
            sum += d;
            sq += d * d;
        }
        const double count = static_cast<double>(items.size());
        const double mean_shift = sum / count;
        const double var = std::max(0.0, sq / count - mean_shift * mean_shift);
        agg[field] = {{"mean", shift + mean_shift}, {"stddev", std::sqrt(var)}};
    }
    std::size_t holds = 0;
    for (const auto& it : items) holds += it.at("bound_holds").get<bool>() ? 1 : 0;
    agg["bound_holds_fraction"] = items.empty() ? 0.0 : static_cast<double>(holds) / static_cast<double>(items.size());
    doc["aggregate"] = agg;
    return doc;
}

json strip_timings(json doc) {
    if (doc.is_object()) {
        doc.erase("timings_ms");
        for (auto& [key, value] : doc.items()) value = strip_timings(value);
    } else if (doc.is_array()) {
        for (auto& value : doc) value = strip_timings(value);
    }
    return doc;
}

std::string check_report_shape(const json& doc) {
    if (!doc.is_object()) return "document is not an object";
    for (const char* key : {"schema_version", "command", "config", "items", "aggregate"})
        if (!doc.contains(key)) return std::string("missing top-level key ") + key;
    if (doc["schema_version"] != std::string(kReportSchemaVersion)) return "unexpected schema_version";
    if (!doc["command"].is_string()) return "command must be a string";
    if (!doc["config"].is_object()) return "config must be an object";
    if (!doc["items"].is_array()) return "items must be an array";
    static const char* numeric[] = {"comp_rate", "gamma", "lhs", "rhs_bound", "cluster_spread",
                                    "flops_full", "flops_merged", "flop_speedup"};
    for (const auto& it : doc["items"]) {
        for (const char* key : {"index", "n", "k", "d"})
            if (!it.contains(key) || !it[key].is_number_unsigned()) return std::string("item field ") + key + " must be a count";
        for (const char* key : numeric)
            if (!it.contains(key) || !it[key].is_number()) return std::string("item field ") + key + " must be a number";
        if (!it.contains("bound_holds") || !it["bound_holds"].is_boolean()) return "item field bound_holds must be a boolean";
        if (it["k"].get<std::size_t>() < 1 || it["k"].get<std::size_t>() > it["n"].get<std::size_t>()) return "item k outside [1, n]";
        const double gamma = it["gamma"].get<double>();
        if (gamma < 0.0 || gamma > 1.0) return "item gamma outside [0, 1]";
        if (it["comp_rate"].get<double>() < 1.0) return "item comp_rate below 1";
        if (it.contains("timings_ms") && !it["timings_ms"].is_object()) return "timings_ms must be an object";
    }
    if (!doc["aggregate"].is_object()) return "aggregate must be an object";
    return {};
}

}  // namespace qmerge
