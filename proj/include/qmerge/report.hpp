#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qmerge/ar_prior.hpp"
#include "qmerge/pipeline.hpp"
#include "qmerge/synthetic.hpp"

namespace qmerge {

inline constexpr std::string_view kReportSchemaVersion = "1.0";

nlohmann::json config_to_json(const PipelineConfig& cfg);
nlohmann::json prior_config_to_json(const PriorConfig& cfg);
nlohmann::json synthetic_to_json(const SyntheticSpec& spec, const std::vector<std::size_t>& assignment);

/// Per-item record: sizes, fidelity fields, FLOP model and stage timings.
nlohmann::json run_item_json(const RunResult& r, std::size_t index, std::size_t dim);

nlohmann::json saliency_json(const SaliencyProfile& p);

/// Report document with items and aggregate mean/stddev of every numeric
/// item field except timings.
nlohmann::json build_report(std::string_view command, const nlohmann::json& config,
                            const std::vector<nlohmann::json>& items);

/// Copy with every "timings_ms" member removed, for reproducibility checks.
nlohmann::json strip_timings(nlohmann::json doc);

/// Structural check against the shipped schema; returns the first violation
/// or an empty string.
std::string check_report_shape(const nlohmann::json& doc);

}  // namespace qmerge
