#pragma once

#include "pidg/ad/tape.hpp"
#include "pidg/common/image.hpp"

namespace pidg::train {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

// Mean SSIM between a rendered {H, W, C} image and a constant target of the
// same shape, with a normalized Gaussian window and zero padding.
ad::Var ssim(const ad::Var& image, const ad::Tensor& target, const SsimOptions& options = {});
double ssim(const Image& a, const Image& b, const SsimOptions& options = {});

// (1 - lambda) mean |x - y| + lambda (1 - SSIM) / 2.
ad::Var renders_loss(const ad::Var& image, const ad::Tensor& target, double lambda_dssim = 0.2);

// 10 log10(1 / MSE) for images in [0,1], capped at 99 dB.
inline constexpr double kPsnrCap = 99.0;
double psnr(const ad::Tensor& a, const ad::Tensor& b);
double psnr(const Image& a, const Image& b);

// {H, W, 3} tensor view of an image, and back.
ad::Tensor image_tensor(const Image& image);
Image tensor_image(const ad::Tensor& t);

struct LossWeights {
  double dssim = 0.2;
  double cmr = 0.1;
  double lpfm = 0.01;
  double flow_gaussian = 0.5;
  double flow_velocity = 0.5;
};

// L_renders + w_cmr L_cmr + w_lpfm L_lpfm, throwing NonFiniteError naming the
// first non-finite component.
double total_loss(double renders, double cmr, double lpfm, const LossWeights& weights);

}  // namespace pidg::train
