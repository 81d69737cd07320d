#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "malaria/annotations.hpp"

namespace malaria {

struct Rgb {
    std::uint8_t r{0};
    std::uint8_t g{0};
    std::uint8_t b{0};
};

/// Marker drawn inside a cell; the four stages each get a different one.
enum class MarkerShape {
    none,
    ring_annulus,    ///< thin circle
    filled_disc,     ///< solid blob
    dot_cluster,     ///< several small dots around a centre dot
    elongated_band,  ///< long thin ellipse at a random angle
};

struct CellStyle {
    int min_radius{10};
    int max_radius{14};
    Rgb fill;
    MarkerShape marker{MarkerShape::none};
};

/// Synthetic slide recipe. Only the six drawable categories may appear in
/// `counts` and `styles` (no `difficult`).
struct SynthSpec {
    int height{256};
    int width{256};
    std::map<CellCategory, std::size_t> counts;
    std::map<CellCategory, CellStyle> styles;
    Rgb background{235, 225, 215};
    Rgb marker_color{80, 20, 110};
    int noise_amplitude{6};
    int min_gap{3};
    std::uint64_t seed{0};
};

inline constexpr int kPlacementAttempts = 10000;

/// 256x256 slides with 8 RBCs, 1 leukocyte and one cell of each stage.
SynthSpec default_synth_spec();

/// Throws ValidationError on negative sizes, radii that cannot fit, missing
/// styles or stage markers that are not pairwise distinct.
void validate(const SynthSpec& spec);

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& doc);

struct SyntheticSlide {
    cv::Mat image;  ///< 8-bit BGR
    SlideRecord record;
};

/// Render one slide. Cells are placed by seeded rejection sampling so their
/// boxes, grown by min_gap, never touch; annotations are the exact cell discs'
/// boxes. Throws CapacityError if a cell cannot be placed within
/// kPlacementAttempts tries.
SyntheticSlide generate_slide(const SynthSpec& spec, const std::string& image_id = "slide");

struct CorpusSummary {
    std::filesystem::path annotations;
    std::size_t slides{0};
    std::map<CellCategory, std::size_t> totals;
};

/// Writes images/slide_NNNN.png, annotations.json (ingestion schema) and
/// manifest.json (spec, per-slide seeds, totals) under `out_dir`.
/// Slide i uses seed derive_seed(seed, i).
CorpusSummary generate_corpus(std::size_t n, const SynthSpec& spec_template, std::uint64_t seed,
                              const std::filesystem::path& out_dir);

} // namespace malaria
