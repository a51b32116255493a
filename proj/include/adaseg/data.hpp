#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adaseg/tensor.hpp"

namespace adaseg {

struct PairEntry {
    std::string image;  // path relative to the dataset root
    std::string mask;   // empty = no ground truth
};

struct DatasetManifest {
    std::filesystem::path root;
    int dimensionality = 2;
    std::string domain_tag;
    long num_classes = 0;
    std::array<real, 2> intensity_range{real(0), real(1)};
    std::vector<PairEntry> train, test;

    const std::vector<PairEntry>& split(const std::string& name) const;
};

// Synthetic appearance shift applied image-wise in the fixed order
// gamma -> contrast -> blur -> downsample/upsample -> noise (masks untouched).
struct ShiftSpec {
    real gamma = 1;
    real contrast_scale = 1;
    real blur_sigma = 0;
    real noise_std = 0;
    long downsample_factor = 1;

    void validate() const;
};

// Deterministic procedural datasets: overlapping tubular structures for 2D,
// nested blobs for 3D. Spatial dims must be divisible by 16.
DatasetManifest synth_base_dataset(const std::filesystem::path& root, long n_train, long n_test,
                                   const Shape& size, long num_classes, std::uint64_t seed,
                                   const std::string& domain_tag = "synthetic/base");

DatasetManifest apply_domain_shift(const DatasetManifest& src, const ShiftSpec& spec,
                                   std::uint64_t seed, const std::string& new_tag,
                                   const std::filesystem::path& dst_root);

void save_manifest(const DatasetManifest& m);
DatasetManifest load_dataset(const std::filesystem::path& root);

Tensor load_image(const DatasetManifest& m, const PairEntry& e);
ByteTensor load_mask(const DatasetManifest& m, const PairEntry& e);

// Shift a single image (used by apply_domain_shift and directly in tests).
Tensor shift_image(const Tensor& image, const ShiftSpec& spec, std::uint64_t seed);

// Calibrated named presets (committed together with their calibration runs).
const std::map<std::string, ShiftSpec>& shift_presets();

// Stacks (C,*sp) images into a (B,C,*sp) batch.
Tensor stack_images(const std::vector<Tensor>& images);

}  // namespace adaseg
