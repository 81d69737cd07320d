#include "malaria/errors.hpp"
#include "malaria/pipeline.hpp"

namespace malaria {

nlohmann::json to_json(const SlideReport& report) {
    nlohmann::json counts = nlohmann::json::object();
    for (auto s : kStageOrder) counts[std::string(to_string(s))] = report.per_stage_counts[stage_index(s)];
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : report.entries) {
        nlohmann::json probs = nlohmann::json::object();
        for (auto s : kStageOrder) probs[std::string(to_string(s))] = e.stage_probabilities[stage_index(s)];
        entries.push_back({{"bbox", to_json(e.bbox)},
                           {"detector_score", e.detector_score},
                           {"stage_probabilities", probs},
                           {"stage", to_string(e.stage)},
                           {"provenance", e.provenance}});
    }
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : report.failures) {
        failures.push_back({{"bbox", to_json(f.bbox)}, {"detector_score", f.detector_score}, {"reason", f.reason}});
    }
    return {{"image_id", report.image_id},
            {"mode", report.mode},
            {"infected_cell_count", report.infected_cell_count},
            {"per_stage_counts", counts},
            {"entries", entries},
            {"failures", failures},
            {"config_fingerprint", report.config_fingerprint}};
}

SlideReport slide_report_from_json(const nlohmann::json& doc) {
    SlideReport r;
    try {
        r.image_id = doc.at("image_id").get<std::string>();
        r.mode = doc.at("mode").get<std::string>();
        r.infected_cell_count = doc.at("infected_cell_count").get<std::size_t>();
        r.config_fingerprint = doc.at("config_fingerprint").get<std::string>();
        for (auto s : kStageOrder) {
            r.per_stage_counts[stage_index(s)] = doc.at("per_stage_counts").at(std::string(to_string(s))).get<std::size_t>();
        }
        for (const auto& e : doc.at("entries")) {
            ReportEntry entry;
            entry.bbox = bbox_from_json(e.at("bbox"));
            entry.detector_score = e.at("detector_score").get<double>();
            for (auto s : kStageOrder) {
                entry.stage_probabilities[stage_index(s)] =
                    e.at("stage_probabilities").at(std::string(to_string(s))).get<double>();
            }
            const auto stage = parse_stage(e.at("stage").get<std::string>());
            if (!stage) throw ParseError("slide report entry has unknown stage " + e.at("stage").dump());
            entry.stage = *stage;
            entry.provenance = e.at("provenance").get<std::string>();
            r.entries.push_back(entry);
        }
        for (const auto& f : doc.at("failures")) {
            r.failures.push_back({bbox_from_json(f.at("bbox")), f.at("detector_score").get<double>(),
                                  f.at("reason").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed slide report: ") + e.what());
    }
    return r;
}

} // namespace malaria
