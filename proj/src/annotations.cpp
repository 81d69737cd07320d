#include "malaria/annotations.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "malaria/errors.hpp"

namespace malaria {

namespace {

using nlohmann::json;

class EntryContext {
public:
    explicit EntryContext(std::size_t entry) : prefix_("entry " + std::to_string(entry)) {}
    EntryContext(std::size_t entry, std::size_t object)
        : prefix_("entry " + std::to_string(entry) + ", object " + std::to_string(object)) {}

    [[noreturn]] void fail(const std::string& field, const std::string& what) const {
        throw ParseError(prefix_ + ": field '" + field + "': " + what);
    }
    [[noreturn]] void invalid(const std::string& what) const {
        throw ValidationError(prefix_ + ": " + what);
    }

    const json& member(const json& parent, const char* key, const std::string& path) const {
        if (!parent.is_object()) fail(path, "expected an object");
        const auto it = parent.find(key);
        if (it == parent.end()) fail(path.empty() ? key : path + "." + key, "missing");
        return *it;
    }

    int integer(const json& parent, const char* key, const std::string& path) const {
        const json& v = member(parent, key, path);
        const std::string full = path.empty() ? key : path + "." + key;
        if (!v.is_number_integer()) fail(full, "expected an integer");
        const auto value = v.get<long long>();
        if (value < 0 || value > std::numeric_limits<int>::max()) fail(full, "out of range");
        return static_cast<int>(value);
    }

private:
    std::string prefix_;
};

CellAnnotation parse_object(const json& obj, std::size_t entry, std::size_t index) {
    const EntryContext ctx(entry, index);
    if (!obj.is_object()) ctx.fail("objects[" + std::to_string(index) + "]", "expected an object");

    const json& category = ctx.member(obj, "category", "");
    if (!category.is_string()) ctx.fail("category", "expected a string");
    const auto parsed = parse_category(category.get<std::string>());
    if (!parsed) ctx.fail("category", "unknown category '" + category.get<std::string>() + "'");

    const json& bbox = ctx.member(obj, "bounding_box", "");
    const json& lo = ctx.member(bbox, "minimum", "bounding_box");
    const json& hi = ctx.member(bbox, "maximum", "bounding_box");
    CellAnnotation ann;
    ann.category = *parsed;
    ann.bbox.min_row = ctx.integer(lo, "r", "bounding_box.minimum");
    ann.bbox.min_col = ctx.integer(lo, "c", "bounding_box.minimum");
    ann.bbox.max_row = ctx.integer(hi, "r", "bounding_box.maximum");
    ann.bbox.max_col = ctx.integer(hi, "c", "bounding_box.maximum");
    if (ann.bbox.max_row <= ann.bbox.min_row || ann.bbox.max_col <= ann.bbox.min_col) {
        ctx.invalid("bounding box requires minimum < maximum on both axes");
    }
    return ann;
}

SlideRecord parse_entry(const json& entry, std::size_t index) {
    const EntryContext ctx(index);
    if (!entry.is_object()) ctx.fail("", "expected an object");

    const json& image = ctx.member(entry, "image", "");
    const json& pathname = ctx.member(image, "pathname", "image");
    if (!pathname.is_string() || pathname.get<std::string>().empty()) {
        ctx.fail("image.pathname", "expected a non-empty string");
    }
    const json& shape = ctx.member(image, "shape", "image");

    SlideRecord record;
    record.image_path = pathname.get<std::string>();
    record.image_id = image_id_from_path(record.image_path);
    record.height = ctx.integer(shape, "r", "image.shape");
    record.width = ctx.integer(shape, "c", "image.shape");
    if (shape.contains("channels")) ctx.integer(shape, "channels", "image.shape");
    if (record.height == 0 || record.width == 0) ctx.invalid("image shape must be positive");

    const json& objects = ctx.member(entry, "objects", "");
    if (!objects.is_array()) ctx.fail("objects", "expected an array");
    record.annotations.reserve(objects.size());
    for (std::size_t i = 0; i < objects.size(); ++i) {
        CellAnnotation ann = parse_object(objects[i], index, i);
        if (!ann.bbox.fits_within(record.height, record.width)) {
            EntryContext(index, i).invalid("bounding box exceeds image shape");
        }
        record.annotations.push_back(ann);
    }
    return record;
}

} // namespace

std::string image_id_from_path(const std::string& pathname) {
    return std::filesystem::path(pathname).stem().string();
}

std::filesystem::path resolve_image_path(const std::filesystem::path& image_root,
                                         const SlideRecord& record) {
    std::string relative = record.image_path;
    while (!relative.empty() && (relative.front() == '/' || relative.front() == '\\')) {
        relative.erase(relative.begin());
    }
    return image_root / relative;
}

std::vector<SlideRecord> parse_annotations_json(const nlohmann::json& doc) {
    if (!doc.is_array()) throw ParseError("annotation document must be a top-level array");
    std::vector<SlideRecord> records;
    records.reserve(doc.size());
    std::set<std::string> seen;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        records.push_back(parse_entry(doc[i], i));
        if (!seen.insert(records.back().image_id).second) {
            throw ValidationError("entry " + std::to_string(i) + ": duplicate image id '" +
                                  records.back().image_id + "'");
        }
    }
    return records;
}

std::vector<SlideRecord> parse_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read annotation file " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": invalid JSON: " + e.what());
    }
    return parse_annotations_json(doc);
}

nlohmann::json to_annotation_json(const std::vector<SlideRecord>& records) {
    json doc = json::array();
    for (const auto& r : records) {
        json objects = json::array();
        for (const auto& a : r.annotations) {
            std::string category(to_string(a.category));
            if (a.category == CellCategory::red_blood_cell) category = "red blood cell";
            objects.push_back({{"category", category},
                               {"bounding_box",
                                {{"minimum", {{"r", a.bbox.min_row}, {"c", a.bbox.min_col}}},
                                 {"maximum", {{"r", a.bbox.max_row}, {"c", a.bbox.max_col}}}}}});
        }
        doc.push_back({{"image",
                        {{"pathname", r.image_path},
                         {"shape", {{"r", r.height}, {"c", r.width}, {"channels", 3}}}}},
                       {"objects", std::move(objects)}});
    }
    return doc;
}

void write_annotations(const std::filesystem::path& path, const std::vector<SlideRecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write annotation file " + path.string());
    out << to_annotation_json(records).dump(1) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

} // namespace malaria
