#include "malaria/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "malaria/errors.hpp"
#include "malaria/rng.hpp"
#include "malaria/taxonomy.hpp"

namespace malaria {

namespace {

std::array<std::vector<std::size_t>, kNumStages> indices_by_class(const std::vector<LabeledCrop>& items) {
    std::array<std::vector<std::size_t>, kNumStages> by_class;
    for (std::size_t i = 0; i < items.size(); ++i) by_class[stage_index(items[i].label)].push_back(i);
    return by_class;
}

ClassifierDataset from_indices(const std::vector<LabeledCrop>& items, std::vector<std::size_t> keep,
                               std::uint64_t seed) {
    std::sort(keep.begin(), keep.end());
    ClassifierDataset out;
    out.seed = seed;
    out.items.reserve(keep.size());
    for (auto i : keep) out.items.push_back(items[i]);
    out.per_class_counts = count_per_class(out.items);
    return out;
}

} // namespace

std::vector<LabeledCrop> stage_crops_from_records(const std::vector<SlideRecord>& records,
                                                  std::size_t* difficult_count) {
    std::vector<LabeledCrop> items;
    std::size_t difficult = 0;
    for (const auto& record : records) {
        for (std::size_t i = 0; i < record.annotations.size(); ++i) {
            const auto& ann = record.annotations[i];
            const auto label = map_taxonomy(ann.category);
            if (label.excluded) {
                ++difficult;
                continue;
            }
            if (!label.stage) continue;
            items.push_back({{record.image_id, i, ann.bbox}, *label.stage});
        }
    }
    if (difficult_count) *difficult_count = difficult;
    return items;
}

StageCounts count_per_class(const std::vector<LabeledCrop>& items) {
    StageCounts counts{};
    for (const auto& item : items) ++counts[stage_index(item.label)];
    return counts;
}

ClassifierDataset balanced_subset(const std::vector<LabeledCrop>& items, std::size_t cap,
                                  std::uint64_t seed) {
    if (items.empty()) throw ValidationError("balanced_subset: empty input");
    if (cap == 0) throw ValidationError("balanced_subset: cap must be positive");

    const auto by_class = indices_by_class(items);
    std::vector<std::size_t> keep;
    std::vector<std::string> warnings;
    for (std::size_t c = 0; c < kNumStages; ++c) {
        auto pool = by_class[c];
        const auto name = std::string(to_string(kStageOrder[c]));
        if (pool.size() < cap) {
            warnings.push_back("class '" + name + "' has " + std::to_string(pool.size()) +
                               " items, fewer than cap " + std::to_string(cap) + "; keeping all");
            keep.insert(keep.end(), pool.begin(), pool.end());
            continue;
        }
        // Partial Fisher-Yates: the first `cap` slots are a uniform sample.
        Rng rng(derive_seed(seed, c));
        for (std::size_t i = 0; i < cap; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        keep.insert(keep.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cap));
    }
    auto out = from_indices(items, std::move(keep), seed);
    out.warnings = std::move(warnings);
    return out;
}

DatasetSplit stratified_split(const ClassifierDataset& dataset, double train_fraction,
                              std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ValidationError("stratified_split: train_fraction must lie in (0, 1)");
    }
    const auto by_class = indices_by_class(dataset.items);
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    for (std::size_t c = 0; c < kNumStages; ++c) {
        auto pool = by_class[c];
        if (pool.empty()) continue;
        if (pool.size() < 2) {
            throw ValidationError("stratified_split: class '" + std::string(to_string(kStageOrder[c])) +
                                  "' has fewer than 2 items and cannot be split");
        }
        Rng rng(derive_seed(seed, 100 + c));
        rng.shuffle(pool);
        auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(pool.size()) + 1e-9));
        n_train = std::clamp<std::size_t>(n_train, 1, pool.size() - 1);
        train.insert(train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
        test.insert(test.end(), pool.begin() + static_cast<std::ptrdiff_t>(n_train), pool.end());
    }
    DatasetSplit split{from_indices(dataset.items, std::move(train), seed),
                       from_indices(dataset.items, std::move(test), seed)};
    split.train.warnings = dataset.warnings;
    split.test.warnings = dataset.warnings;
    return split;
}

nlohmann::json dataset_metadata(const ClassifierDataset& dataset) {
    nlohmann::json counts = nlohmann::json::object();
    for (auto s : kStageOrder) counts[std::string(to_string(s))] = dataset.per_class_counts[stage_index(s)];
    return {{"class_counts", counts},
            {"total", dataset.items.size()},
            {"seed", dataset.seed},
            {"warnings", dataset.warnings}};
}

nlohmann::json to_json(const ClassifierDataset& dataset) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& item : dataset.items) {
        const auto& b = item.source.bbox;
        items.push_back({{"image_id", item.source.image_id},
                         {"annotation_index", item.source.annotation_index},
                         {"bbox", {{"min_row", b.min_row}, {"min_col", b.min_col},
                                   {"max_row", b.max_row}, {"max_col", b.max_col}}},
                         {"label", to_string(item.label)}});
    }
    return {{"seed", dataset.seed}, {"items", items}};
}

ClassifierDataset classifier_dataset_from_json(const nlohmann::json& doc) {
    ClassifierDataset out;
    try {
        out.seed = doc.at("seed").get<std::uint64_t>();
        for (const auto& item : doc.at("items")) {
            const auto& b = item.at("bbox");
            const auto label = parse_stage(item.at("label").get<std::string>());
            if (!label) throw ParseError("dataset item has unknown label " + item.at("label").dump());
            out.items.push_back({{item.at("image_id").get<std::string>(),
                                  item.at("annotation_index").get<std::size_t>(),
                                  {b.at("min_row").get<int>(), b.at("min_col").get<int>(),
                                   b.at("max_row").get<int>(), b.at("max_col").get<int>()}},
                                 *label});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed dataset document: ") + e.what());
    }
    out.per_class_counts = count_per_class(out.items);
    return out;
}

void write_dataset(const std::filesystem::path& path, const ClassifierDataset& dataset,
                   const nlohmann::json& extra_metadata) {
    auto write = [](const std::filesystem::path& p, const nlohmann::json& doc) {
        std::ofstream out(p);
        if (!out) throw IoError("cannot write " + p.string());
        out << doc.dump(2) << '\n';
    };
    write(path, to_json(dataset));
    auto meta = dataset_metadata(dataset);
    for (const auto& [key, value] : extra_metadata.items()) meta[key] = value;
    auto sidecar = path;
    sidecar.replace_filename(path.stem().string() + ".meta.json");
    write(sidecar, meta);
}

} // namespace malaria
