#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "malaria/annotations.hpp"
#include "malaria/types.hpp"

namespace malaria {

/// Where a classifier crop comes from: one annotation of one slide.
struct CropRef {
    std::string image_id;
    std::size_t annotation_index{0};
    BoundingBox bbox;

    friend bool operator==(const CropRef&, const CropRef&) = default;
};

struct LabeledCrop {
    CropRef source;
    StageLabel label{StageLabel::gametocyte};

    friend bool operator==(const LabeledCrop&, const LabeledCrop&) = default;
};

using StageCounts = std::array<std::size_t, kNumStages>;

struct ClassifierDataset {
    std::vector<LabeledCrop> items;
    StageCounts per_class_counts{};
    std::uint64_t seed{0};
    std::vector<std::string> warnings;

    [[nodiscard]] std::size_t size() const { return items.size(); }
};

/// Stage-labelled crop references from ground-truth annotations. Uninfected
/// and difficult annotations are skipped; `difficult_count` receives the
/// number of difficult annotations seen, if given.
std::vector<LabeledCrop> stage_crops_from_records(const std::vector<SlideRecord>& records,
                                                  std::size_t* difficult_count = nullptr);

StageCounts count_per_class(const std::vector<LabeledCrop>& items);

/// Keep min(cap, available) items per class by seeded sampling without
/// replacement. Selected items keep their input order. A class with fewer
/// than `cap` items (including none) adds a warning rather than failing.
ClassifierDataset balanced_subset(const std::vector<LabeledCrop>& items, std::size_t cap,
                                  std::uint64_t seed);

struct DatasetSplit {
    ClassifierDataset train;
    ClassifierDataset test;
};

/// Per-class split with floor(train_fraction * n_class) items in train.
/// Throws ValidationError if a present class has fewer than two items.
DatasetSplit stratified_split(const ClassifierDataset& dataset, double train_fraction,
                              std::uint64_t seed);

nlohmann::json to_json(const ClassifierDataset& dataset);
ClassifierDataset classifier_dataset_from_json(const nlohmann::json& doc);

/// Metadata sidecar: class counts, seed and warnings.
nlohmann::json dataset_metadata(const ClassifierDataset& dataset);

/// Writes `<path>` and its sidecar `<stem>.meta.json` next to it.
void write_dataset(const std::filesystem::path& path, const ClassifierDataset& dataset,
                   const nlohmann::json& extra_metadata = nlohmann::json::object());

} // namespace malaria
