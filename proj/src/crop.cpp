#include "malaria/crop.hpp"

#include <opencv2/imgproc.hpp>

#include "malaria/errors.hpp"

namespace malaria {

CellCrop extract_crop(const cv::Mat& image, const BoundingBox& bbox, int target, const std::string& image_id) {
    if (target <= 0) throw ValidationError("extract_crop: target size must be positive");
    if (image.empty() || image.type() != CV_8UC3) {
        throw ValidationError("extract_crop: expected a non-empty 8-bit 3-channel image");
    }
    if (bbox.max_row <= bbox.min_row || bbox.max_col <= bbox.min_col) {
        throw ValidationError("extract_crop: degenerate box");
    }
    const BoundingBox clipped = bbox.clipped_to(image.rows, image.cols);
    if (!clipped.is_valid()) throw ValidationError("extract_crop: box lies outside the image");

    const cv::Mat region = image(cv::Rect(clipped.min_col, clipped.min_row, clipped.width(), clipped.height()));
    cv::Mat rgb;
    cv::cvtColor(region, rgb, cv::COLOR_BGR2RGB);
    cv::Mat scaled;
    rgb.convertTo(scaled, CV_32FC3, 1.0 / 255.0);

    CellCrop crop;
    cv::resize(scaled, crop.pixels, cv::Size(target, target), 0, 0, cv::INTER_LINEAR);
    crop.source_image_id = image_id;
    crop.source_bbox = clipped;
    return crop;
}

cv::Mat crop_to_bgr8(const CellCrop& crop) {
    cv::Mat rgb8;
    crop.pixels.convertTo(rgb8, CV_8UC3, 255.0);
    cv::Mat bgr;
    cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

} // namespace malaria
