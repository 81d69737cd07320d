#include "malaria/synth.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "malaria/errors.hpp"
#include "malaria/rng.hpp"
#include "malaria/taxonomy.hpp"

namespace malaria {

namespace {

cv::Scalar bgr(const Rgb& c) { return cv::Scalar(c.b, c.g, c.r); }

std::string_view marker_name(MarkerShape m) {
    switch (m) {
    case MarkerShape::none: return "none";
    case MarkerShape::ring_annulus: return "ring_annulus";
    case MarkerShape::filled_disc: return "filled_disc";
    case MarkerShape::dot_cluster: return "dot_cluster";
    case MarkerShape::elongated_band: return "elongated_band";
    }
    return "none";
}

MarkerShape marker_from_name(const std::string& name) {
    for (auto m : {MarkerShape::none, MarkerShape::ring_annulus, MarkerShape::filled_disc,
                   MarkerShape::dot_cluster, MarkerShape::elongated_band}) {
        if (name == marker_name(m)) return m;
    }
    throw ParseError("unknown marker shape '" + name + "'");
}

bool separated(const BoundingBox& a, const BoundingBox& b, int gap) {
    return a.max_row + gap <= b.min_row || b.max_row + gap <= a.min_row || a.max_col + gap <= b.min_col ||
           b.max_col + gap <= a.min_col;
}

void draw_marker(cv::Mat& image, cv::Point center, int radius, MarkerShape marker, const cv::Scalar& color,
                 Rng& rng) {
    auto offset = [&](int extent) {
        const int room = std::max(0, std::min(radius - extent - 3, static_cast<int>(0.2 * radius)));
        return cv::Point(center.x + rng.uniform_int(-room, room), center.y + rng.uniform_int(-room, room));
    };
    switch (marker) {
    case MarkerShape::none: return;
    case MarkerShape::ring_annulus: {
        const int rr = std::max(3, static_cast<int>(std::lround(0.45 * radius)));
        cv::circle(image, offset(rr + 1), rr, color, 2, cv::LINE_8);
        return;
    }
    case MarkerShape::filled_disc: {
        const int rr = std::max(3, static_cast<int>(std::lround(0.4 * radius)));
        cv::circle(image, offset(rr), rr, color, cv::FILLED, cv::LINE_8);
        return;
    }
    case MarkerShape::dot_cluster: {
        const int k = rng.uniform_int(5, 8);
        const double spread = 0.45 * radius;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        cv::circle(image, center, 2, color, cv::FILLED, cv::LINE_8);
        for (int i = 0; i < k; ++i) {
            const double a = phase + 2.0 * std::numbers::pi * i / k;
            const cv::Point p(center.x + static_cast<int>(std::lround(spread * std::cos(a))),
                              center.y + static_cast<int>(std::lround(spread * std::sin(a))));
            cv::circle(image, p, 2, color, cv::FILLED, cv::LINE_8);
        }
        return;
    }
    case MarkerShape::elongated_band: {
        const cv::Size axes(std::max(3, static_cast<int>(std::lround(0.7 * radius))),
                            std::max(2, static_cast<int>(std::lround(0.22 * radius))));
        cv::ellipse(image, center, axes, rng.uniform(0.0, 180.0), 0.0, 360.0, color, cv::FILLED, cv::LINE_8);
        return;
    }
    }
}

nlohmann::json rgb_json(const Rgb& c) { return nlohmann::json::array({c.r, c.g, c.b}); }

Rgb rgb_from_json(const nlohmann::json& j) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 3) throw ParseError("colors must be [r, g, b]");
    for (int x : v) {
        if (x < 0 || x > 255) throw ParseError("color channel out of range");
    }
    return {static_cast<std::uint8_t>(v[0]), static_cast<std::uint8_t>(v[1]), static_cast<std::uint8_t>(v[2])};
}

} // namespace

SynthSpec default_synth_spec() {
    SynthSpec spec;
    spec.counts = {{CellCategory::red_blood_cell, 8}, {CellCategory::leukocyte, 1},
                   {CellCategory::gametocyte, 1},     {CellCategory::ring, 1},
                   {CellCategory::trophozoite, 1},    {CellCategory::schizont, 1}};
    const Rgb rbc{215, 140, 150};
    spec.styles = {{CellCategory::red_blood_cell, {11, 15, rbc, MarkerShape::none}},
                   {CellCategory::leukocyte, {16, 20, {150, 120, 200}, MarkerShape::none}},
                   {CellCategory::gametocyte, {13, 16, rbc, MarkerShape::elongated_band}},
                   {CellCategory::ring, {12, 16, rbc, MarkerShape::ring_annulus}},
                   {CellCategory::trophozoite, {12, 16, rbc, MarkerShape::filled_disc}},
                   {CellCategory::schizont, {13, 16, rbc, MarkerShape::dot_cluster}}};
    return spec;
}

void validate(const SynthSpec& spec) {
    if (spec.height <= 0 || spec.width <= 0) throw ValidationError("synth: image dimensions must be positive");
    if (spec.min_gap < 0) throw ValidationError("synth: min_gap must be non-negative");
    if (spec.noise_amplitude < 0 || spec.noise_amplitude > 127) {
        throw ValidationError("synth: noise_amplitude must lie in [0, 127]");
    }
    std::set<MarkerShape> stage_markers;
    for (const auto& [category, count] : spec.counts) {
        if (category == CellCategory::difficult) throw ValidationError("synth: 'difficult' cells cannot be drawn");
        if (count == 0) continue;
        const auto style = spec.styles.find(category);
        if (style == spec.styles.end()) {
            throw ValidationError("synth: no style for " + std::string(to_string(category)));
        }
        const auto& s = style->second;
        if (s.min_radius < 3 || s.max_radius < s.min_radius) {
            throw ValidationError("synth: bad radius range for " + std::string(to_string(category)));
        }
        if (2 * s.max_radius + 1 > std::min(spec.height, spec.width)) {
            throw ValidationError("synth: " + std::string(to_string(category)) + " radius does not fit the image");
        }
    }
    for (const auto& [category, style] : spec.styles) {
        const auto label = map_taxonomy(category);
        if (!label.stage) continue;
        if (style.marker == MarkerShape::none || !stage_markers.insert(style.marker).second) {
            throw ValidationError("synth: stage classes need pairwise-distinct markers (" +
                                  std::string(to_string(category)) + ")");
        }
    }
}

SyntheticSlide generate_slide(const SynthSpec& spec, const std::string& image_id) {
    validate(spec);
    Rng rng(spec.seed);
    SyntheticSlide slide;
    slide.image = cv::Mat(spec.height, spec.width, CV_8UC3, bgr(spec.background));
    slide.record.image_id = image_id;
    slide.record.image_path = "/images/" + image_id + ".png";
    slide.record.height = spec.height;
    slide.record.width = spec.width;

    struct Placed {
        CellCategory category;
        cv::Point center;
        int radius;
    };
    std::vector<Placed> placed;
    for (auto category : kAllCategories) {
        const auto it = spec.counts.find(category);
        if (it == spec.counts.end()) continue;
        const auto& style = spec.styles.at(category);
        for (std::size_t k = 0; k < it->second; ++k) {
            bool ok = false;
            for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
                const int r = rng.uniform_int(style.min_radius, style.max_radius);
                const int cy = rng.uniform_int(r, spec.height - 1 - r);
                const int cx = rng.uniform_int(r, spec.width - 1 - r);
                const BoundingBox box{cy - r, cx - r, cy + r + 1, cx + r + 1};
                ok = std::all_of(slide.record.annotations.begin(), slide.record.annotations.end(),
                                 [&](const CellAnnotation& a) { return separated(a.bbox, box, spec.min_gap); });
                if (ok) {
                    slide.record.annotations.push_back({box, category});
                    placed.push_back({category, {cx, cy}, r});
                }
            }
            if (!ok) {
                throw CapacityError("synth: could not place " + std::string(to_string(category)) + " cell #" +
                                    std::to_string(k) + " within " + std::to_string(kPlacementAttempts) +
                                    " attempts (min_gap " + std::to_string(spec.min_gap) + ", image " +
                                    std::to_string(spec.height) + "x" + std::to_string(spec.width) + ")");
            }
        }
    }

    for (const auto& p : placed) {
        const auto& style = spec.styles.at(p.category);
        cv::circle(slide.image, p.center, p.radius, bgr(style.fill), cv::FILLED, cv::LINE_8);
        draw_marker(slide.image, p.center, p.radius, style.marker, bgr(spec.marker_color), rng);
    }

    if (spec.noise_amplitude > 0) {
        for (int r = 0; r < slide.image.rows; ++r) {
            auto* px = slide.image.ptr<cv::Vec3b>(r);
            for (int c = 0; c < slide.image.cols; ++c) {
                for (int ch = 0; ch < 3; ++ch) {
                    px[c][ch] = cv::saturate_cast<std::uint8_t>(
                        px[c][ch] + rng.uniform_int(-spec.noise_amplitude, spec.noise_amplitude));
                }
            }
        }
    }
    return slide;
}

nlohmann::json to_json(const SynthSpec& spec) {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [c, n] : spec.counts) counts[std::string(to_string(c))] = n;
    nlohmann::json styles = nlohmann::json::object();
    for (const auto& [c, s] : spec.styles) {
        styles[std::string(to_string(c))] = {{"min_radius", s.min_radius},
                                             {"max_radius", s.max_radius},
                                             {"fill", rgb_json(s.fill)},
                                             {"marker", marker_name(s.marker)}};
    }
    return {{"height", spec.height},
            {"width", spec.width},
            {"counts", counts},
            {"styles", styles},
            {"background", rgb_json(spec.background)},
            {"marker_color", rgb_json(spec.marker_color)},
            {"noise_amplitude", spec.noise_amplitude},
            {"min_gap", spec.min_gap},
            {"seed", spec.seed}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& doc) {
    static const std::set<std::string> kKeys{"height", "width", "counts", "styles", "background",
                                             "marker_color", "noise_amplitude", "min_gap", "seed"};
    if (!doc.is_object()) throw ParseError("synth spec must be a JSON object");
    SynthSpec spec = default_synth_spec();
    try {
        for (const auto& [key, value] : doc.items()) {
            if (!kKeys.contains(key)) throw ParseError("synth spec: unknown key '" + key + "'");
        }
        if (doc.contains("height")) spec.height = doc["height"].get<int>();
        if (doc.contains("width")) spec.width = doc["width"].get<int>();
        auto category = [](const std::string& name) {
            const auto c = parse_category(name);
            if (!c) throw ParseError("synth spec: unknown category '" + name + "'");
            return *c;
        };
        if (doc.contains("counts")) {
            spec.counts.clear();
            for (const auto& [name, n] : doc["counts"].items()) spec.counts[category(name)] = n.get<std::size_t>();
        }
        if (doc.contains("styles")) {
            for (const auto& [name, s] : doc["styles"].items()) {
                CellStyle style;
                style.min_radius = s.at("min_radius").get<int>();
                style.max_radius = s.at("max_radius").get<int>();
                style.fill = rgb_from_json(s.at("fill"));
                style.marker = marker_from_name(s.value("marker", std::string("none")));
                spec.styles[category(name)] = style;
            }
        }
        if (doc.contains("background")) spec.background = rgb_from_json(doc["background"]);
        if (doc.contains("marker_color")) spec.marker_color = rgb_from_json(doc["marker_color"]);
        if (doc.contains("noise_amplitude")) spec.noise_amplitude = doc["noise_amplitude"].get<int>();
        if (doc.contains("min_gap")) spec.min_gap = doc["min_gap"].get<int>();
        if (doc.contains("seed")) spec.seed = doc["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("synth spec: ") + e.what());
    }
    validate(spec);
    return spec;
}

CorpusSummary generate_corpus(std::size_t n, const SynthSpec& spec_template, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
    if (n == 0) throw ValidationError("generate_corpus: need at least one slide");
    validate(spec_template);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

    CorpusSummary summary;
    summary.annotations = out_dir / "annotations.json";
    summary.slides = n;
    std::vector<SlideRecord> records;
    nlohmann::json slides = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) {
        SynthSpec spec = spec_template;
        spec.seed = derive_seed(seed, i);
        char name[32];
        std::snprintf(name, sizeof name, "slide_%04zu", i);
        auto slide = generate_slide(spec, name);
        const auto path = out_dir / "images" / (std::string(name) + ".png");
        if (!cv::imwrite(path.string(), slide.image)) throw IoError("cannot write " + path.string());
        for (const auto& a : slide.record.annotations) ++summary.totals[a.category];
        slides.push_back({{"image_id", name}, {"seed", spec.seed}});
        records.push_back(std::move(slide.record));
    }
    write_annotations(summary.annotations, records);

    nlohmann::json totals = nlohmann::json::object();
    for (const auto& [c, count] : summary.totals) totals[std::string(to_string(c))] = count;
    const nlohmann::json manifest{{"spec", to_json(spec_template)},
                                  {"seed", seed},
                                  {"slides", slides},
                                  {"totals", totals}};
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
    return summary;
}

} // namespace malaria
