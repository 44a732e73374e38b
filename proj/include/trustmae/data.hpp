#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "trustmae/image_io.hpp"
#include "trustmae/rng.hpp"
#include "trustmae/tensor.hpp"

namespace tmae {

enum class TextureKind { stripes, checker, bandlimited_noise, blobs };
enum class DefectShape { blob, scratch, discoloration };

std::string to_string(TextureKind k);
TextureKind parse_texture_kind(const std::string& s);
std::string to_string(DefectShape s);
DefectShape parse_defect_shape(const std::string& s);

struct Sample {
    Tensor image;               // [C, H, W] in [-1, 1]
    bool is_defective = false;
    std::optional<Tensor> mask; // [H, W] in {0, 1}
    std::string source_id;
    std::string group;          // folder the sample lives in: "good", "defect", ...
};

struct DefectParams {
    std::size_t min_size = 6;   // pixels, extent of the defect footprint
    std::size_t max_size = 16;
    double min_contrast = 0.15;  // in image units ([-1, 1] range)
    double max_contrast = 0.4;
    std::vector<DefectShape> shapes{DefectShape::blob, DefectShape::scratch, DefectShape::discoloration};
};

struct DatasetSpec {
    TextureKind texture = TextureKind::stripes;
    std::size_t image_size = 64;
    std::size_t channels = 1;
    std::size_t n_train = 100;
    std::size_t n_test_normal = 50;
    std::size_t n_test_defective = 50;
    double noise_fraction = 0.0;
    DefectParams defect;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t defective_train_count() const;
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

// Deterministic in the spec; every sample uses its own derived stream.
Dataset generate_dataset(const DatasetSpec& spec);

// Defect-free texture of the given kind. Values lie on the 8-bit grid
// q / 127.5 - 1 so PNG round-trips are exact.
Tensor generate_texture(const DatasetSpec& spec, std::uint64_t stream_seed);

// Injects one defect; returns the mask. Masked pixels move by exactly the
// drawn contrast (rounded to the 8-bit grid), unmasked pixels are untouched.
Tensor inject_defect(Tensor& image, const DefectParams& params, Rng& rng);

// MVTec-style layout: root/category/{train/good, test/good, test/defect,
// ground_truth/defect} plus manifest.csv (source_id,split,is_defective).
void write_folder_dataset(const Dataset& data, const std::filesystem::path& root, const std::string& category);

// Loads the layout above. target_size 0 keeps the stored resolution.
Dataset load_folder_dataset(const std::filesystem::path& root, const std::string& category,
                            std::size_t target_size = 0);

// Bilinear resize to target x target and the affine [0,255] -> [-1,1] map.
Tensor preprocess(const Raster& image, std::size_t target_size);
// Nearest-neighbour resize, re-binarized.
Tensor preprocess_mask(const Raster& mask, std::size_t target_size);

struct AugmentPolicy {
    bool hflip = false;
    bool vflip = false;
    bool rot90 = false;
};

Tensor flip_horizontal(const Tensor& t);
Tensor flip_vertical(const Tensor& t);
// Counter-clockwise by k quarter turns; square images only.
Tensor rotate90(const Tensor& t, int k);

// Stacks the images of the selected samples into [N, C, H, W].
Tensor batch_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

// Each enabled transform fires with probability 1/2 (rotation picks a
// uniform quarter turn); image and mask move together.
Sample augment(const Sample& sample, const AugmentPolicy& policy, Rng& rng);

}  // namespace tmae
