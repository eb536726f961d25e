#include "metamd/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "metamd/errors.hpp"
#include "metamd/io.hpp"

namespace metamd {

double QuadraticTask::min_loss() const { return theta_star.dot(q * theta_star) - b.dot(theta_star); }

QuadraticTask make_quadratic_task(const Matrix& c, const Vector& b) {
  if (c.rows() != c.cols() || c.rows() != b.size()) throw ArgumentError("quadratic task: C must be square and match b");
  if (!c.isLowerTriangular()) throw ArgumentError("quadratic task: C must be lower-triangular");
  QuadraticTask t;
  t.c = c;
  t.q = c * c.transpose();
  t.q = 0.5 * (t.q + t.q.transpose());
  t.b = b;
  t.theta_star = (2.0 * t.q).ldlt().solve(b);
  return t;
}

QuadraticTask sample_quadratic(RngStream& rng, const QuadraticFamily& family) {
  if (!(family.mean_q00 > 0.0) || !(family.mean_q11 > 0.0)) {
    throw ArgumentError("sample_quadratic: diagonal means must be positive");
  }
  const double s0 = std::sqrt(family.mean_q00);
  const double s1 = std::sqrt(family.mean_q11);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Matrix c = Matrix::Zero(2, 2);
    c(0, 0) = s0 + family.diag_rel_std * s0 * rng.normal();
    c(1, 0) = family.offdiag_std * rng.normal();
    c(1, 1) = s1 + family.diag_rel_std * s1 * rng.normal();
    Vector b(2);
    b[0] = 1.0 + rng.normal();
    b[1] = 1.0 + rng.normal();
    const Matrix q = c * c.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> es(q, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() > family.min_eigenvalue) return make_quadratic_task(c, b);
  }
  throw NumericalError("sample_quadratic: eigenvalue floor not met after 100 draws");
}

QuadraticTask sample_quadratic(RngStream& rng, double mean_q00, double mean_q11) {
  QuadraticFamily f;
  f.mean_q00 = mean_q00;
  f.mean_q11 = mean_q11;
  return sample_quadratic(rng, f);
}

BaseModel rosenbrock_task() { return BaseModel::rosenbrock(); }

int DomainDataset::class_count() const {
  int mx = -1;
  for (int y : labels) mx = std::max(mx, y);
  return mx + 1;
}

// ---------------------------------------------------------------------------
// IDX

IdxArray parse_idx(const std::string& bytes, int expected_ndim) {
  io::ByteReader r(bytes);
  if (r.u8("IDX magic") != 0 || r.u8("IDX magic") != 0) throw FormatError("bad IDX magic", r.offset() - 1);
  if (r.u8("IDX type") != 0x08) throw FormatError("unsupported IDX element type (want unsigned byte)", 2);
  const int ndim = r.u8("IDX dimension count");
  if (ndim == 0 || (expected_ndim >= 0 && ndim != expected_ndim)) {
    throw FormatError("unexpected IDX dimension count " + std::to_string(ndim), 3);
  }
  IdxArray a;
  std::uint64_t total = 1;
  for (int d = 0; d < ndim; ++d) {
    const std::uint32_t n = r.be32("IDX dimension size");
    a.dims.push_back(n);
    total *= n;
    if (total > bytes.size()) break;  // certainly truncated; avoid overflow
  }
  if (a.dims.size() != static_cast<std::size_t>(ndim) || total > r.remaining()) {
    throw FormatError("truncated IDX payload", bytes.size());
  }
  if (total < r.remaining()) throw FormatError("IDX payload longer than its header declares", r.offset() + total);
  const auto payload = r.take(total, "IDX payload");
  a.data.assign(payload.begin(), payload.end());
  return a;
}

std::string write_idx(const IdxArray& a) {
  io::ByteWriter w;
  w.u8(0);
  w.u8(0);
  w.u8(0x08);
  w.u8(static_cast<std::uint8_t>(a.dims.size()));
  for (auto d : a.dims) w.be32(d);
  w.bytes(std::string_view(reinterpret_cast<const char*>(a.data.data()), a.data.size()));
  return w.take();
}

DomainDataset decode_idx(const std::string& image_bytes, const std::string& label_bytes, const std::string& tag) {
  const IdxArray img = parse_idx(image_bytes, 3);
  const IdxArray lab = parse_idx(label_bytes, 1);
  if (img.dims[0] != lab.dims[0]) throw FormatError("label count does not match image count", 4);
  DomainDataset d;
  d.tag = tag;
  d.provenance = Provenance::kIdxFile;
  d.height = static_cast<int>(img.dims[1]);
  d.width = static_cast<int>(img.dims[2]);
  const Eigen::Index n = img.dims[0];
  const Eigen::Index pixels = static_cast<Eigen::Index>(img.dims[1]) * img.dims[2];
  d.images.resize(n, pixels);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index p = 0; p < pixels; ++p)
      d.images(i, p) = img.data[static_cast<std::size_t>(i * pixels + p)] / 255.0;
  d.labels.assign(lab.data.begin(), lab.data.end());
  return d;
}

DomainDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       const std::string& tag) {
  return decode_idx(io::read_file(images), io::read_file(labels), tag);
}

std::string encode_idx_images(const DomainDataset& d) {
  if (d.width <= 0 || d.height <= 0 || d.images.cols() != static_cast<Eigen::Index>(d.width) * d.height) {
    throw ArgumentError("encode_idx_images: dataset has no image geometry");
  }
  IdxArray a;
  a.dims = {static_cast<std::uint32_t>(d.images.rows()), static_cast<std::uint32_t>(d.height),
            static_cast<std::uint32_t>(d.width)};
  a.data.reserve(static_cast<std::size_t>(d.images.size()));
  for (Eigen::Index i = 0; i < d.images.rows(); ++i)
    for (Eigen::Index p = 0; p < d.images.cols(); ++p)
      a.data.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(d.images(i, p), 0.0, 1.0) * 255.0)));
  return write_idx(a);
}

std::string encode_idx_labels(const DomainDataset& d) {
  IdxArray a;
  a.dims = {static_cast<std::uint32_t>(d.labels.size())};
  for (int y : d.labels) {
    if (y < 0 || y > 255) throw ArgumentError("encode_idx_labels: label outside a byte");
    a.data.push_back(static_cast<std::uint8_t>(y));
  }
  return write_idx(a);
}

// ---------------------------------------------------------------------------
// Image transforms

DomainDataset rotate_dataset(const DomainDataset& d, double degrees) {
  if (d.width <= 0 || d.width != d.height) throw ArgumentError("rotate_dataset: images must be square");
  const int w = d.width;
  const double centre = 0.5 * (w - 1);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);

  DomainDataset out = d;
  out.tag = d.tag + "@" + io::format_double(degrees);
  if (degrees == 0.0) return out;
  for (Eigen::Index n = 0; n < d.images.rows(); ++n) {
    auto pixel = [&](int row, int col) -> double {
      if (row < 0 || row >= w || col < 0 || col >= w) return 0.0;
      return d.images(n, row * w + col);
    };
    for (int row = 0; row < w; ++row) {
      for (int col = 0; col < w; ++col) {
        const double dx = col - centre, dy = row - centre;
        const double sx = centre + dx * cs - dy * sn;
        const double sy = centre + dx * sn + dy * cs;
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const double fx = sx - x0, fy = sy - y0;
        const double v = (1 - fy) * ((1 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1)) +
                         fy * ((1 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
        out.images(n, row * w + col) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

DomainDataset downsample(const DomainDataset& d, int out_width) {
  if (d.width <= 0 || d.width != d.height) throw ArgumentError("downsample: images must be square");
  if (out_width < 1 || out_width > d.width) throw ArgumentError("downsample: bad output width");
  const int in = d.width;
  const double scale = static_cast<double>(in) / out_width;
  Matrix weights = Matrix::Zero(out_width, in);
  for (int o = 0; o < out_width; ++o) {
    const double lo = o * scale, hi = (o + 1) * scale;
    for (int i = 0; i < in; ++i) {
      const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0) weights(o, i) = overlap / scale;
    }
  }
  DomainDataset out = d;
  out.width = out.height = out_width;
  out.images.resize(d.images.rows(), out_width * out_width);
  for (Eigen::Index n = 0; n < d.images.rows(); ++n) {
    Matrix img(in, in);
    for (int r = 0; r < in; ++r)
      for (int c = 0; c < in; ++c) img(r, c) = d.images(n, r * in + c);
    const Matrix small = weights * img * weights.transpose();
    for (int r = 0; r < out_width; ++r)
      for (int c = 0; c < out_width; ++c) out.images(n, r * out_width + c) = small(r, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic domains

Matrix random_rotation(RngStream& rng, int dim) {
  Matrix g(dim, dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix rr = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < dim; ++c) {
    if (rr(c, c) < 0) q.col(c) *= -1.0;
  }
  return q;
}

DomainDataset synthetic_domain(RngStream& rng, const Matrix& rotation, int n_classes, int samples_per_class,
                               const std::string& tag) {
  const int dim = static_cast<int>(rotation.rows());
  if (n_classes < 2 || samples_per_class < 1 || dim < 1 || rotation.cols() != dim) {
    throw ArgumentError("synthetic_domain: bad arguments");
  }
  constexpr double kMinSeparation = 6.0;
  const double spread = 8.0 / std::sqrt(2.0 * dim);
  Matrix means(n_classes, dim);
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw NumericalError("synthetic_domain: could not separate class means");
    for (int k = 0; k < n_classes; ++k)
      for (int i = 0; i < dim; ++i) means(k, i) = std::max(spread, 1.0) * rng.normal();
    bool ok = true;
    for (int a = 0; a < n_classes && ok; ++a)
      for (int b = a + 1; b < n_classes && ok; ++b) ok = (means.row(a) - means.row(b)).norm() >= kMinSeparation;
    if (ok) break;
  }
  DomainDataset d;
  d.tag = tag;
  d.provenance = Provenance::kSynthetic;
  d.images.resize(static_cast<Eigen::Index>(n_classes) * samples_per_class, dim);
  for (int k = 0; k < n_classes; ++k) {
    for (int s = 0; s < samples_per_class; ++s) {
      Eigen::RowVectorXd x(dim);
      for (int i = 0; i < dim; ++i) x[i] = means(k, i) + rng.normal();
      d.images.row(static_cast<Eigen::Index>(k) * samples_per_class + s) = x * rotation.transpose();
      d.labels.push_back(k);
    }
  }
  return d;
}

std::vector<DomainDataset> synthetic_domains(RngStream& rng, int n_domains, int n_classes, int dim,
                                             int samples_per_class) {
  if (n_domains < 1) throw ArgumentError("synthetic_domains: need at least one domain");
  const RngStream blobs = rng.split(0);
  std::vector<DomainDataset> out;
  for (int d = 0; d < n_domains; ++d) {
    RngStream rot_rng = rng.split(static_cast<std::uint64_t>(d) + 1);
    RngStream sample_rng = blobs;
    out.push_back(synthetic_domain(sample_rng, random_rotation(rot_rng, dim), n_classes, samples_per_class,
                                   "blob" + std::to_string(d)));
  }
  return out;
}

TrainValidation split_validation(const DomainDataset& d, double fraction, RngStream& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ArgumentError("split_validation: fraction must lie in (0, 1)");
  const auto n = static_cast<std::size_t>(d.images.rows());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * n)));
  if (n_val >= n) throw ArgumentError("split_validation: dataset too small");
  auto subset = [&](std::size_t from, std::size_t to, const std::string& suffix) {
    DomainDataset s = d;
    s.tag = d.tag + suffix;
    s.images.resize(static_cast<Eigen::Index>(to - from), d.images.cols());
    s.labels.clear();
    for (std::size_t i = from; i < to; ++i) {
      s.images.row(static_cast<Eigen::Index>(i - from)) = d.images.row(static_cast<Eigen::Index>(idx[i]));
      s.labels.push_back(d.labels[idx[i]]);
    }
    return s;
  };
  return {subset(0, n - n_val, ":train"), subset(n - n_val, n, ":val")};
}

std::vector<MetaSplit> leave_one_out_splits(const std::vector<std::string>& domains) {
  if (domains.size() < 2) throw ArgumentError("leave_one_out_splits: need at least two domains");
  if (std::set<std::string>(domains.begin(), domains.end()).size() != domains.size()) {
    throw ArgumentError("leave_one_out_splits: domain tags must be distinct");
  }
  std::vector<MetaSplit> splits;
  for (std::size_t held = 0; held < domains.size(); ++held) {
    MetaSplit s;
    s.test_domain = domains[held];
    for (std::size_t i = 0; i < domains.size(); ++i) {
      if (i != held) s.train_domains.push_back(domains[i]);
    }
    splits.push_back(std::move(s));
  }
  return splits;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path, const std::filesystem::path& root) {
  std::istringstream in(io::read_file(path));
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ManifestEntry e;
    std::string images, labels, extra;
    if (!(ls >> e.tag)) continue;
    if (!(ls >> images >> labels) || (ls >> extra)) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'tag images labels'");
    }
    e.images = std::filesystem::path(images).is_absolute() ? std::filesystem::path(images) : root / images;
    e.labels = std::filesystem::path(labels).is_absolute() ? std::filesystem::path(labels) : root / labels;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace metamd
