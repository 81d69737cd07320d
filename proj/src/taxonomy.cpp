#include "malaria/taxonomy.hpp"

#include <algorithm>
#include <string>

#include "malaria/errors.hpp"

namespace malaria {

BoundingBox BoundingBox::clipped_to(int image_height, int image_width) const {
    return BoundingBox{std::max(min_row, 0), std::max(min_col, 0), std::min(max_row, image_height),
                       std::min(max_col, image_width)};
}

std::string_view to_string(CellCategory c) {
    switch (c) {
    case CellCategory::red_blood_cell: return "red_blood_cell";
    case CellCategory::leukocyte: return "leukocyte";
    case CellCategory::gametocyte: return "gametocyte";
    case CellCategory::ring: return "ring";
    case CellCategory::trophozoite: return "trophozoite";
    case CellCategory::schizont: return "schizont";
    case CellCategory::difficult: return "difficult";
    }
    return "unknown";
}

std::string_view to_string(InfectionLabel l) {
    return l == InfectionLabel::infected ? "infected" : "uninfected";
}

std::string_view to_string(StageLabel s) {
    switch (s) {
    case StageLabel::gametocyte: return "gametocyte";
    case StageLabel::ring: return "ring";
    case StageLabel::schizont: return "schizont";
    case StageLabel::trophozoite: return "trophozoite";
    }
    return "unknown";
}

std::string_view display_name(StageLabel s) {
    switch (s) {
    case StageLabel::gametocyte: return "Gametocyte";
    case StageLabel::ring: return "Ring";
    case StageLabel::schizont: return "Schizont";
    case StageLabel::trophozoite: return "Trophozoite";
    }
    return "Unknown";
}

std::optional<CellCategory> parse_category(std::string_view text) {
    std::string normalized(text);
    std::replace(normalized.begin(), normalized.end(), ' ', '_');
    for (auto c : kAllCategories) {
        if (normalized == to_string(c)) return c;
    }
    return std::nullopt;
}

std::optional<StageLabel> parse_stage(std::string_view text) {
    for (auto s : kStageOrder) {
        if (text == to_string(s)) return s;
    }
    return std::nullopt;
}

std::optional<InfectionLabel> parse_infection(std::string_view text) {
    if (text == "infected") return InfectionLabel::infected;
    if (text == "uninfected") return InfectionLabel::uninfected;
    return std::nullopt;
}

TaxonomyLabel map_taxonomy(CellCategory category) {
    switch (category) {
    case CellCategory::red_blood_cell:
    case CellCategory::leukocyte:
        return {InfectionLabel::uninfected, std::nullopt, false};
    case CellCategory::gametocyte: return {InfectionLabel::infected, StageLabel::gametocyte, false};
    case CellCategory::ring: return {InfectionLabel::infected, StageLabel::ring, false};
    case CellCategory::trophozoite: return {InfectionLabel::infected, StageLabel::trophozoite, false};
    case CellCategory::schizont: return {InfectionLabel::infected, StageLabel::schizont, false};
    case CellCategory::difficult: return {InfectionLabel::uninfected, std::nullopt, true};
    }
    throw ValidationError("map_taxonomy: category out of range");
}

TaxonomyLabel map_taxonomy(std::string_view category) {
    const auto parsed = parse_category(category);
    if (!parsed) throw ValidationError("unknown cell category '" + std::string(category) + "'");
    return map_taxonomy(*parsed);
}

} // namespace malaria
