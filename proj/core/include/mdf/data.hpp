#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mdf/metrics.hpp"
#include "mdf/tensor.hpp"

namespace mdf {

/// Interleaved 8-bit RGB, row-major.
struct Image {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
    [[nodiscard]] std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
    friend bool operator==(const Image&, const Image&) = default;
};

struct LabeledBox {
    int class_id = 0;
    double cx = 0, cy = 0, w = 0, h = 0;
    friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct LabeledImage {
    Image image;
    std::vector<LabeledBox> boxes;
};

inline const std::vector<std::string> kDefaultClassNames{"no_issues", "broken", "flashover_damage"};

/// "<class> <cx> <cy> <w> <h>"; errors field_count, non_numeric, out_of_range.
LabeledBox parse_yolo_label(std::string_view line);
/// Six decimal places.
std::string format_yolo_label(const LabeledBox& box);

std::vector<LabeledBox> read_label_file(const std::filesystem::path& path);
void write_label_file(const std::filesystem::path& path, const std::vector<LabeledBox>& boxes);

std::string encode_ppm(const Image& img);
Image decode_ppm(std::string_view bytes);
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

struct DatasetSpec {
    std::filesystem::path yaml_path;
    std::filesystem::path train, val, test;  // image directories, absolute
    std::vector<std::string> names = kDefaultClassNames;
    std::size_t image_size = 64;

    [[nodiscard]] const std::filesystem::path& split_dir(std::string_view split) const;
};

/// Keys train/val/test (relative to the YAML file), names, nc, optional imgsz.
DatasetSpec load_dataset_yaml(const std::filesystem::path& path);
void write_dataset_yaml(const std::filesystem::path& path, const DatasetSpec& spec);

/// ".../images/<split>/x.ppm" -> ".../labels/<split>/x.txt".
std::filesystem::path label_path_for(const std::filesystem::path& image);

/// Images of one split in file-name order with their labels. Class ids must be
/// below the spec's class count.
std::vector<LabeledImage> load_split(const DatasetSpec& spec, std::string_view split);
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);
/// A single image, a directory of images, or a dataset YAML (its test split).
std::vector<std::filesystem::path> resolve_source(const std::filesystem::path& source);

struct AugmentParams {
    double hsv_h = 0, hsv_s = 0, hsv_v = 0;
    double mosaic = 0, mixup = 0;
    double degrees = 0, translate = 0;
    [[nodiscard]] bool all_zero() const;
};

inline constexpr double kMinBoxAreaFraction = 0.2;
inline constexpr std::uint8_t kFillValue = 114;

/// Scale hue, saturation and value by the given gains (hue wraps).
void hsv_gain(Image& img, double gain_h, double gain_s, double gain_v);
/// Shift by (dx, dy) as fractions of the image size; boxes clipped.
LabeledImage translate(const LabeledImage& item, double dx, double dy);
/// Rotate about the centre by `degrees` (counter-clockwise); boxes re-fitted
/// to the rotated corners and clipped.
LabeledImage rotate(const LabeledImage& item, double degrees);
/// 2x2 grid of half-scale copies in reading order.
LabeledImage mosaic4(std::span<const LabeledImage, 4> items);
/// Pixel blend a*lam + b*(1-lam) with the union of boxes.
LabeledImage mixup(const LabeledImage& a, const LabeledImage& b, double lam);

/// Mosaic and mixup partners are drawn from `pool`. All-zero parameters return
/// the item unchanged.
LabeledImage augment(const LabeledImage& item, const AugmentParams& params, std::mt19937_64& rng,
                     std::span<const LabeledImage> pool);

struct SyntheticSpec {
    std::size_t train = 120, val = 40, test = 40;
    std::size_t image_size = 64;
    std::size_t min_objects = 1, max_objects = 3;
    double texture = 18.0;  // background noise amplitude in grey levels
    std::uint64_t seed = 0;
    std::vector<std::string> names = kDefaultClassNames;
};

/// Deterministic image for (seed, split, index).
LabeledImage synthesize_image(const SyntheticSpec& spec, std::string_view split, std::size_t index);

/// Writes images/<split>/*.ppm, labels/<split>/*.txt and data.yaml under `out`.
DatasetSpec generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out);

std::array<std::uint8_t, 3> class_color(int class_id);

/// 1-pixel class-coloured rectangles plus a 2x2 corner marker whose
/// brightness encodes confidence.
Image render_annotations(const Image& image, const std::vector<Detection>& detections);
void write_annotations(const std::filesystem::path& path, const Image& image, const std::vector<Detection>& detections);

/// (B, 3, H, W) tensor scaled to [0, 1].
Tensor images_to_tensor(std::span<const LabeledImage* const> items);

std::vector<GroundTruth> to_ground_truth(const std::vector<LabeledBox>& boxes, std::size_t image);

}  // namespace mdf
