#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "metamd/models.hpp"
#include "metamd/numerics.hpp"
#include "metamd/rng.hpp"

namespace metamd {

/// min theta'Q theta - b'theta with Q = C C' for a lower-triangular C.
struct QuadraticTask {
  Matrix c;
  Matrix q;
  Vector b;
  Vector theta_star;  // solves 2 Q theta = b

  BaseModel model() const { return BaseModel::quadratic(q, b); }
  double min_loss() const;
};

/// Spread of the lower-triangular factor. Diagonal entries are drawn around
/// sqrt(mean_q00), sqrt(mean_q11) with relative spread diag_rel_std.
struct QuadraticFamily {
  double mean_q00 = 0.3;
  double mean_q11 = 14.0;
  double offdiag_std = 0.1;
  double diag_rel_std = 0.1;
  double min_eigenvalue = 1e-8;
};

/// Deterministic construction from a given factor and linear term.
QuadraticTask make_quadratic_task(const Matrix& c, const Vector& b);

/// b ~ N([1,1], I). Resamples up to 100 times for the eigenvalue floor.
QuadraticTask sample_quadratic(RngStream& rng, const QuadraticFamily& family = {});
QuadraticTask sample_quadratic(RngStream& rng, double mean_q00, double mean_q11);

/// (1 - x)^2 + 100 (y - x^2)^2.
BaseModel rosenbrock_task();

enum class Provenance { kIdxFile, kSynthetic };

/// Rows of `images` are flattened examples. For IDX images width is the
/// side length; synthetic feature vectors have width 0.
struct DomainDataset {
  Matrix images;
  std::vector<int> labels;
  std::string tag;
  Provenance provenance = Provenance::kSynthetic;
  int width = 0;
  int height = 0;

  Batch as_batch() const { return {images, labels}; }
  int class_count() const;
};

/// Raw IDX array: dimension sizes and unsigned-byte payload.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

/// Parses 00 00 08 <ndim>, ndim big-endian u32 sizes, then the payload.
/// Throws FormatError carrying the offending byte offset.
IdxArray parse_idx(const std::string& bytes, int expected_ndim = -1);
std::string write_idx(const IdxArray& a);

/// Images (3-D IDX) and labels (1-D IDX); pixels scaled to [0, 1].
DomainDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       const std::string& tag = "idx");
DomainDataset decode_idx(const std::string& image_bytes, const std::string& label_bytes,
                         const std::string& tag = "idx");
/// Inverse of decode_idx for [0, 1] pixel data (rounded to the nearest byte).
std::string encode_idx_images(const DomainDataset& d);
std::string encode_idx_labels(const DomainDataset& d);

/// Rotates every image about its centre (bilinear, zero outside the frame).
/// Positive angles turn the picture counter-clockwise as displayed.
DomainDataset rotate_dataset(const DomainDataset& d, double degrees);

/// Area-averaging resize of square images to side `out_width`.
DomainDataset downsample(const DomainDataset& d, int out_width);

/// Gaussian class blobs shared by all domains; domain d rotates every sample
/// by its own random orthogonal matrix. Class means sit at least 6 noise
/// standard deviations apart.
std::vector<DomainDataset> synthetic_domains(RngStream& rng, int n_domains, int n_classes, int dim,
                                             int samples_per_class);

/// Applies an explicit rotation to the blob samples drawn from `rng`.
DomainDataset synthetic_domain(RngStream& rng, const Matrix& rotation, int n_classes, int samples_per_class,
                               const std::string& tag);

/// Haar-distributed orthogonal matrix.
Matrix random_rotation(RngStream& rng, int dim);

/// Deterministic split: the last `fraction` of a seeded permutation.
struct TrainValidation {
  DomainDataset train;
  DomainDataset validation;
};
TrainValidation split_validation(const DomainDataset& d, double fraction, RngStream& rng);

struct MetaSplit {
  std::vector<std::string> train_domains;
  std::string test_domain;
};

std::vector<MetaSplit> leave_one_out_splits(const std::vector<std::string>& domains);

/// Manifest lines: `tag images_path labels_path`, '#' comments. Relative
/// paths resolve against `root`.
struct ManifestEntry {
  std::string tag;
  std::filesystem::path images;
  std::filesystem::path labels;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path, const std::filesystem::path& root);

}  // namespace metamd
