#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "malaria/types.hpp"

namespace malaria {

struct CellAnnotation {
    BoundingBox bbox;
    CellCategory category{CellCategory::red_blood_cell};

    friend bool operator==(const CellAnnotation&, const CellAnnotation&) = default;
};

/// One smear image and its cell annotations. `image_path` keeps the
/// `pathname` string exactly as written in the annotation file.
struct SlideRecord {
    std::string image_id;
    std::string image_path;
    int height{0};
    int width{0};
    std::vector<CellAnnotation> annotations;

    friend bool operator==(const SlideRecord&, const SlideRecord&) = default;
};

/// Parse a BBBC041-style annotation array. Throws IoError if the file cannot
/// be read and ParseError/ValidationError naming the entry index otherwise.
std::vector<SlideRecord> parse_annotations(const std::filesystem::path& path);

/// Same as parse_annotations, from an already-loaded document.
std::vector<SlideRecord> parse_annotations_json(const nlohmann::json& doc);

nlohmann::json to_annotation_json(const std::vector<SlideRecord>& records);
void write_annotations(const std::filesystem::path& path, const std::vector<SlideRecord>& records);

/// Image identifier derived from a pathname: its file stem.
std::string image_id_from_path(const std::string& pathname);

/// Resolve a record's pathname against the directory holding the
/// annotation file. Leading slashes are treated as dataset-root relative.
std::filesystem::path resolve_image_path(const std::filesystem::path& image_root,
                                         const SlideRecord& record);

} // namespace malaria
