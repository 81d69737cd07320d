#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace malaria {

/// Axis-aligned pixel box in (row, col) order. Min bounds are inclusive,
/// max bounds exclusive, so the area is (max_row - min_row) * (max_col - min_col).
struct BoundingBox {
    int min_row{0};
    int min_col{0};
    int max_row{0};
    int max_col{0};

    [[nodiscard]] int height() const { return max_row - min_row; }
    [[nodiscard]] int width() const { return max_col - min_col; }
    [[nodiscard]] std::int64_t area() const {
        return is_valid() ? std::int64_t{height()} * width() : 0;
    }
    [[nodiscard]] bool is_valid() const {
        return min_row >= 0 && min_col >= 0 && min_row < max_row && min_col < max_col;
    }
    [[nodiscard]] bool fits_within(int image_height, int image_width) const {
        return is_valid() && max_row <= image_height && max_col <= image_width;
    }
    /// Intersection with the image rectangle; may come back invalid (empty).
    [[nodiscard]] BoundingBox clipped_to(int image_height, int image_width) const;

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Raw dataset categories.
enum class CellCategory {
    red_blood_cell,
    leukocyte,
    gametocyte,
    ring,
    trophozoite,
    schizont,
    difficult,
};

inline constexpr std::array<CellCategory, 7> kAllCategories{
    CellCategory::red_blood_cell, CellCategory::leukocyte, CellCategory::gametocyte,
    CellCategory::ring,           CellCategory::trophozoite, CellCategory::schizont,
    CellCategory::difficult};

enum class InfectionLabel { infected, uninfected };

/// Parasite life-cycle stage. The enumerator order is the canonical class
/// order used by the classifier outputs, confusion matrices and reports.
enum class StageLabel { gametocyte = 0, ring = 1, schizont = 2, trophozoite = 3 };

inline constexpr std::size_t kNumStages = 4;
inline constexpr std::array<StageLabel, kNumStages> kStageOrder{
    StageLabel::gametocyte, StageLabel::ring, StageLabel::schizont, StageLabel::trophozoite};

[[nodiscard]] constexpr std::size_t stage_index(StageLabel s) { return static_cast<std::size_t>(s); }

/// Lower-case identifier, e.g. "red_blood_cell".
[[nodiscard]] std::string_view to_string(CellCategory c);
[[nodiscard]] std::string_view to_string(InfectionLabel l);
[[nodiscard]] std::string_view to_string(StageLabel s);
/// Capitalized name used in rendered reports ("Ring").
[[nodiscard]] std::string_view display_name(StageLabel s);

/// Accepts the dataset spelling ("red blood cell") as well as the identifier form.
[[nodiscard]] std::optional<CellCategory> parse_category(std::string_view text);
[[nodiscard]] std::optional<StageLabel> parse_stage(std::string_view text);
[[nodiscard]] std::optional<InfectionLabel> parse_infection(std::string_view text);

} // namespace malaria
