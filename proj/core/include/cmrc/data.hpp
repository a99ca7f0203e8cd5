#pragma once

#include "cmrc/rng.hpp"
#include "cmrc/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cmrc {

struct SpotRecord {
    std::string spot_id;
    std::int64_t x = 0;
    std::int64_t y = 0;
    std::size_t patch_index = 0;
};

/// One tissue sample: spot table, expression matrix (raw counts at ingestion,
/// processed after preprocess()), gene names and patch images.
struct SampleDataset {
    std::string sample_id;
    std::vector<SpotRecord> spots;
    std::vector<double> expr; // n_spots x gene count, row-major
    std::vector<std::string> gene_names;
    std::vector<bool> marker_flags;
    std::vector<float> patches; // n_spots x H x W x 3, values k/255
    std::size_t patch_size = 0;

    std::size_t n_spots() const { return spots.size(); }
    std::size_t n_genes() const { return gene_names.size(); }

    double* expr_row(std::size_t spot) { return expr.data() + spot * n_genes(); }
    const double* expr_row(std::size_t spot) const { return expr.data() + spot * n_genes(); }
    const float* patch(std::size_t index) const {
        return patches.data() + index * patch_size * patch_size * 3;
    }

    void validate() const; // throws DataError on inconsistent row counts
};

struct SyntheticSpec {
    std::size_t n_samples = 4;
    std::size_t spots_per_sample = 256;
    std::size_t genes = 64;
    std::size_t latent_dim = 6;
    std::size_t patch_size = 64;
    double noise_sd = 0.05;
    double count_scale = 20.0;
    std::size_t marker_count = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct FoldPlan {
    struct Fold {
        std::vector<std::string> train_sample_ids;
        std::string test_sample_id;
    };
    std::vector<Fold> folds;
};

/// Latent-factor generator: per spot, z ~ N(0, I); counts are Poisson with
/// log-linear rates in z (shared gene loading matrix, largest-norm rows
/// assigned to the marker genes), and patch channel means are an affine image
/// of the same z plus pixel noise. Identical spec + seed reproduces the
/// datasets bit for bit.
std::vector<SampleDataset> generate_synthetic(const SyntheticSpec& spec);

/// Rescale each row of a counts matrix to sum to target_sum.
void normalize_total_counts(std::vector<double>& expr, std::size_t n_rows, std::size_t n_genes,
                            double target_sum = 1e4);

/// Elementwise log1p.
void log_transform(std::vector<double>& expr);

/// Fixed preprocessing order: total-count normalization, then log transform.
void preprocess(SampleDataset& sample, double target_sum = 1e4);

/// Indices of the k genes with the largest per-gene variance, descending,
/// ties broken by lower gene index. k > d returns all genes.
std::vector<std::size_t> select_hvgs(const std::vector<double>& expr, std::size_t n_rows,
                                     std::size_t n_genes, std::size_t k);

/// Among hvg_indices, the k genes with the largest mean expression.
std::vector<std::size_t> select_hegs(const std::vector<double>& expr, std::size_t n_rows,
                                     std::size_t n_genes,
                                     const std::vector<std::size_t>& hvg_indices, std::size_t k);

/// Union of per-sample top-k HVG selections, ordered by first appearance.
std::vector<std::size_t> hvg_union(const std::vector<const SampleDataset*>& samples,
                                   std::size_t k);

/// Train-time augmentation: each flip with probability 1/2, then a rotation
/// drawn uniformly from {0, 90, 180, 270} degrees. In-place on one patch.
void augment_patch(float* patch, std::size_t size, Rng& rng);

/// Leave-one-sample-out plan; requires at least two samples.
FoldPlan make_folds(const std::vector<SampleDataset>& samples);

/// Directory layout, one subdirectory per sample:
///   genes.txt    gene name per line, optional "\tMARKER" suffix
///   spots.csv    header spot_id,x,y,patch_index
///   expr.csv     header of gene names, one row of counts per spot
///   patches.bin  magic CMRP, u32 version/count/H/W/C, u8 pixel data
void save_dataset(const std::vector<SampleDataset>& datasets,
                  const std::filesystem::path& dir);
std::vector<SampleDataset> load_dataset(const std::filesystem::path& dir);

} // namespace cmrc
