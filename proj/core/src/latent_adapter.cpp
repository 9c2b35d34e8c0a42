#include "gnr/latent_adapter.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "binary_io.hpp"
#include "gnr/error.hpp"

namespace gnr {

namespace {

constexpr char kMagic[8] = {'G', 'N', 'R', 'A', 'D', 'P', 'T', '\0'};

// Patch vector layout is (channel, dy, dx).
void gather_patch(const Tensor& image, int c_count, int w, int py, int px, double* out) {
  int k = 0;
  for (int c = 0; c < c_count; ++c) {
    for (int dy = 0; dy < PatchPcaCodec::kPatch; ++dy) {
      for (int dx = 0; dx < PatchPcaCodec::kPatch; ++dx) {
        const int y = py * PatchPcaCodec::kPatch + dy, x = px * PatchPcaCodec::kPatch + dx;
        const int h = image.dim(1);
        out[k++] = image[static_cast<std::size_t>((c * h + y) * w + x)];
      }
    }
  }
}

}  // namespace

PatchPcaCodec::PatchPcaCodec(int image_channels, int height, int width, Tensor mean, Tensor basis, Tensor scale,
                             double psnr_floor)
    : channels_(image_channels),
      height_(height),
      width_(width),
      mean_(std::move(mean)),
      basis_(std::move(basis)),
      scale_(std::move(scale)),
      psnr_floor_(psnr_floor) {
  const int dim = channels_ * kPatch * kPatch;
  if (height_ % kPatch || width_ % kPatch) throw ConfigError("patch codec needs even image sizes");
  if (mean_.shape() != Shape{dim} || basis_.rank() != 2 || basis_.dim(1) != dim ||
      scale_.shape() != Shape{basis_.dim(0)}) {
    throw ConsistencyError("patch codec parameters have inconsistent shapes");
  }
}

Shape PatchPcaCodec::latent_shape() const { return {basis_.dim(0), height_ / kPatch, width_ / kPatch}; }

PatchPcaCodec PatchPcaCodec::fit(const std::vector<Tensor>& images, int components) {
  if (images.empty()) throw ArgumentError("patch codec fit needs at least one image");
  const Shape shape = images.front().shape();
  if (shape.size() != 3) throw ArgumentError("patch codec expects (C, H, W) images");
  const int c = shape[0], h = shape[1], w = shape[2];
  const int dim = c * kPatch * kPatch;
  if (components < 1 || components > dim) throw ArgumentError("patch codec component count out of range");
  const int per_image = (h / kPatch) * (w / kPatch);

  Eigen::MatrixXd patches(static_cast<Eigen::Index>(images.size()) * per_image, dim);
  Eigen::Index row = 0;
  for (const Tensor& img : images) {
    if (img.shape() != shape) throw ArgumentError("patch codec fit: images differ in shape");
    for (int py = 0; py < h / kPatch; ++py) {
      for (int px = 0; px < w / kPatch; ++px) {
        Eigen::RowVectorXd p(dim);
        gather_patch(img, c, w, py, px, p.data());
        patches.row(row++) = p;
      }
    }
  }
  const Eigen::RowVectorXd mu = patches.colwise().mean();
  const Eigen::MatrixXd centered = patches.rowwise() - mu;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(patches.rows());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);

  Tensor mean({dim}), basis({components, dim}), scale({components});
  for (int i = 0; i < dim; ++i) mean[static_cast<std::size_t>(i)] = mu(i);
  for (int k = 0; k < components; ++k) {
    const Eigen::Index col = dim - 1 - k;  // eigenvalues ascend
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (int i = 0; i < dim; ++i) basis[static_cast<std::size_t>(k * dim + i)] = v(i);
    scale[static_cast<std::size_t>(k)] = std::sqrt(std::max(eig.eigenvalues()(col), 1e-12));
  }
  return PatchPcaCodec(c, h, w, std::move(mean), std::move(basis), std::move(scale), 0.0);
}

Tensor PatchPcaCodec::encode(const Tensor& image) const {
  if (image.shape() != image_shape()) {
    throw ArgumentError("image shape " + shape_str(image.shape()) + " does not match codec " +
                        shape_str(image_shape()));
  }
  Tensor x = image;
  if (const std::size_t n = clip_image(x); n > 0) {
    warn("encode: clipped " + std::to_string(n) + " values outside [-1, 1]");
  }
  const int k_count = basis_.dim(0), dim = basis_.dim(1);
  const int lh = height_ / kPatch, lw = width_ / kPatch;
  Tensor z({k_count, lh, lw});
  std::vector<double> p(static_cast<std::size_t>(dim));
  for (int py = 0; py < lh; ++py) {
    for (int px = 0; px < lw; ++px) {
      gather_patch(x, channels_, width_, py, px, p.data());
      for (int k = 0; k < k_count; ++k) {
        double s = 0.0;
        for (int i = 0; i < dim; ++i) {
          s += basis_[static_cast<std::size_t>(k * dim + i)] * (p[static_cast<std::size_t>(i)] - mean_[static_cast<std::size_t>(i)]);
        }
        z[static_cast<std::size_t>((k * lh + py) * lw + px)] = s / scale_[static_cast<std::size_t>(k)];
      }
    }
  }
  return z;
}

Tensor PatchPcaCodec::decode(const Tensor& latent) const {
  if (latent.shape() != latent_shape()) {
    throw ArgumentError("latent shape " + shape_str(latent.shape()) + " does not match codec " +
                        shape_str(latent_shape()));
  }
  const int k_count = basis_.dim(0), dim = basis_.dim(1);
  const int lh = height_ / kPatch, lw = width_ / kPatch;
  Tensor img({channels_, height_, width_});
  std::vector<double> p(static_cast<std::size_t>(dim));
  for (int py = 0; py < lh; ++py) {
    for (int px = 0; px < lw; ++px) {
      for (int i = 0; i < dim; ++i) p[static_cast<std::size_t>(i)] = mean_[static_cast<std::size_t>(i)];
      for (int k = 0; k < k_count; ++k) {
        const double coef =
            latent[static_cast<std::size_t>((k * lh + py) * lw + px)] * scale_[static_cast<std::size_t>(k)];
        for (int i = 0; i < dim; ++i) p[static_cast<std::size_t>(i)] += coef * basis_[static_cast<std::size_t>(k * dim + i)];
      }
      int i = 0;
      for (int c = 0; c < channels_; ++c) {
        for (int dy = 0; dy < kPatch; ++dy) {
          for (int dx = 0; dx < kPatch; ++dx) {
            const int y = py * kPatch + dy, x = px * kPatch + dx;
            img[static_cast<std::size_t>((c * height_ + y) * width_ + x)] = p[static_cast<std::size_t>(i++)];
          }
        }
      }
    }
  }
  return img;
}

double psnr(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  const double mse = squared_norm(a - b) / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(4.0 / mse);
}

LatentAdapter::LatentAdapter(PatchPcaCodec codec, ToyUNet denoiser)
    : codec_(std::move(codec)), denoiser_(std::move(denoiser)) {
  if (codec_.latent_shape() != denoiser_.latent_shape()) {
    throw ConsistencyError("codec latent shape " + shape_str(codec_.latent_shape()) +
                           " does not match denoiser input " + shape_str(denoiser_.latent_shape()));
  }
}

std::vector<std::uint8_t> LatentAdapter::serialize() const {
  detail::ByteWriter w;
  for (char ch : kMagic) w.put<char>(ch);
  w.put<std::uint32_t>(kFormatVersion);
  const Shape img = codec_.image_shape();
  for (int d : img) w.put<std::int32_t>(d);
  w.put_tensor(codec_.mean());
  w.put_tensor(codec_.basis());
  w.put_tensor(codec_.scale());
  w.put<double>(codec_.psnr_floor());
  const std::vector<std::uint8_t> net = denoiser_.serialize();
  w.put<std::uint64_t>(net.size());
  w.put_raw(net);
  return w.take();
}

LatentAdapter LatentAdapter::deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic(kMagic, "adapter");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw ConsistencyError("adapter format version " + std::to_string(version) + " is not supported");
  }
  const int c = r.get<std::int32_t>(), h = r.get<std::int32_t>(), w = r.get<std::int32_t>();
  Tensor mean = r.get_tensor();
  Tensor basis = r.get_tensor();
  Tensor scale = r.get_tensor();
  const double floor_db = r.get<double>();
  const auto n = r.get<std::uint64_t>();
  if (n > bytes.size()) throw ConsistencyError("corrupt blob: truncated");
  std::vector<std::uint8_t> net(n);
  for (auto& b : net) b = r.get<std::uint8_t>();
  if (!r.at_end()) throw ConsistencyError("adapter blob: trailing bytes");
  return LatentAdapter(PatchPcaCodec(c, h, w, std::move(mean), std::move(basis), std::move(scale), floor_db),
                       ToyUNet::deserialize(net));
}

LatentAdapter LatentAdapter::load(const std::filesystem::path& path) { return deserialize(detail::read_file(path)); }

void LatentAdapter::save(const std::filesystem::path& path) const { detail::write_file(path, serialize()); }

}  // namespace gnr
