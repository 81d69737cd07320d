#pragma once

#include <string>

#include <opencv2/core.hpp>

#include "malaria/types.hpp"

namespace malaria {

inline constexpr int kDefaultCropSize = 224;

/// Fixed-size cell crop: CV_32FC3, RGB channel order, values in [0, 1].
struct CellCrop {
    cv::Mat pixels;
    std::string source_image_id;
    BoundingBox source_bbox;
};

/// Clip `bbox` to the image (no margin), cut it out and stretch it bilinearly
/// to target x target. `image` is 8-bit BGR as loaded from disk.
/// Throws ValidationError if nothing of the box remains after clipping.
CellCrop extract_crop(const cv::Mat& image, const BoundingBox& bbox, int target,
                      const std::string& image_id = {});

/// 8-bit BGR copy of a crop, for audit exports.
cv::Mat crop_to_bgr8(const CellCrop& crop);

} // namespace malaria
