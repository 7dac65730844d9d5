#pragma once

#include <vector>

#include "geomamba/imgproc.hpp"
#include "geomamba/ops.hpp"

namespace geomamba::losses {

struct LossWeights {
  double lambda_tri = 1.0;
  double margin = 0.3;
  double lambda_gcc = 10.0;
  double lambda_deep = 1.0;
  double lambda_shallow = 0.5;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double label_smoothing = 0.1;

  void validate() const {
    if (lambda_tri < 0 || margin < 0 || lambda_gcc < 0 || lambda_deep < 0 || lambda_shallow < 0 || focal_alpha < 0 ||
        focal_alpha > 1 || focal_gamma < 0 || label_smoothing < 0 || label_smoothing >= 1)
      throw std::invalid_argument("LossWeights: weights must be non-negative (alpha, smoothing within [0,1))");
  }
};

struct TripletResult {
  Tensor loss;                     // scalar
  std::size_t valid_anchors = 0;   // anchors with both a positive and a negative
  bool degenerate = false;         // true when no anchor was valid; loss is then 0
};

/// Batch-hard triplet loss: mean over valid anchors of
/// max(0, d(a, hardest positive) - d(a, hardest negative) + margin).
/// Anchors lacking a positive (other than themselves) or a negative are skipped.
inline TripletResult triplet_loss(const Tensor& features, const std::vector<int>& labels, double margin) {
  if (features.ndim() != 2 || features.dim(0) != labels.size())
    throw ShapeError("triplet_loss", features.shape(), {labels.size()}, "expected [N,D] features and N labels");
  const std::size_t n = labels.size();
  Tensor dist = l2_distance_matrix(features);
  auto dv = dist.data();
  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < n; ++i) {
    std::ptrdiff_t pos = -1, neg = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = dv[i * n + j];
      if (labels[j] == labels[i]) {
        if (pos < 0 || d > dv[i * n + static_cast<std::size_t>(pos)]) pos = static_cast<std::ptrdiff_t>(j);
      } else if (neg < 0 || d < dv[i * n + static_cast<std::size_t>(neg)]) {
        neg = static_cast<std::ptrdiff_t>(j);
      }
    }
    if (pos < 0 || neg < 0) continue;
    pos_idx.push_back(i * n + static_cast<std::size_t>(pos));
    neg_idx.push_back(i * n + static_cast<std::size_t>(neg));
  }
  TripletResult r;
  r.valid_anchors = pos_idx.size();
  if (pos_idx.empty()) {
    r.degenerate = true;
    r.loss = mul(sum(features), Tensor::zeros({1}));  // keeps the graph connected with zero gradient
    return r;
  }
  Tensor hinge = relu(add_scalar(sub(gather(dist, pos_idx), gather(dist, neg_idx)), margin));
  r.loss = mean(hinge);
  return r;
}

/// Mean label-smoothed cross-entropy.
inline Tensor identity_loss(const Tensor& logits, const std::vector<int>& labels, double smoothing) {
  return cross_entropy_logits(logits, labels, smoothing);
}

/// Mean sigmoid focal loss: -alpha_t (1 - p_t)^gamma log p_t over all elements.
/// `targets` holds 0/1 values aligned with `logits`.
inline Tensor focal_loss(const Tensor& logits, const std::vector<double>& targets, double alpha, double gamma) {
  if (targets.size() != logits.numel())
    throw ShapeError("focal_loss", logits.shape(), {targets.size()}, "target count must equal logit count");
  const std::size_t n = targets.size();
  auto lv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = targets[i] > 0.5 ? 1.0 : -1.0;
    const double a_t = s > 0 ? alpha : 1.0 - alpha;
    const double log_pt = -softplus_scalar(-s * lv[i]);
    const double pt = std::exp(log_pt);
    total += -a_t * std::pow(1.0 - pt, gamma) * log_pt;
  }
  return make_result("focal_loss", {1}, {total / static_cast<double>(n)}, {logits},
                     [n, alpha, gamma, targets](detail::Node& self) {
                       auto* g = detail::grad_of(self.inputs[0]);
                       if (!g) return;
                       const auto& lv = self.inputs[0]->data;
                       const double scale = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double s = targets[i] > 0.5 ? 1.0 : -1.0;
                         const double a_t = s > 0 ? alpha : 1.0 - alpha;
                         const double log_pt = -softplus_scalar(-s * lv[i]);
                         const double pt = std::exp(log_pt);
                         const double q = 1.0 - pt;
                         // d/dz of -a_t q^gamma log pt, with dpt/dz = s pt q
                         const double d = s * a_t * std::pow(q, gamma) * (gamma * pt * log_pt - q);
                         (*g)[i] += scale * d;
                       }
                     });
}

/// Binary masks of one batch flattened into 0/1 targets, downsampled (max-pool)
/// from their own resolution to `h` x `w`.
inline std::vector<double> mask_targets(const std::vector<imgproc::BinaryMask>& masks, std::size_t h, std::size_t w) {
  std::vector<double> out;
  out.reserve(masks.size() * h * w);
  for (const auto& m : masks) {
    if (m.height % h != 0 || m.width % w != 0 || m.height / h != m.width / w)
      throw ShapeError("mask_targets", {m.height, m.width}, {h, w}, "mask not an integer multiple of map size");
    const auto small = imgproc::downsample_mask(m, m.height / h);
    for (auto b : small.bits) out.push_back(b ? 1.0 : 0.0);
  }
  return out;
}

/// Predicted single-channel logit maps [N,1,h,w] at the shallow and deep stage.
struct DsMasks {
  Tensor opt_shallow, opt_deep, sar_shallow, sar_deep;
};

struct GccTerms {
  Tensor opt_deep, opt_shallow, sar_deep, sar_shallow;  // individual focal terms
  Tensor total;
};

/// sum over m in {opt, sar} of lambda_deep * focal(M_m^deep, Y_m) + lambda_shallow * focal(M_m^shallow, Y_m),
/// with Y_m max-pooled to each map's resolution.
inline GccTerms gcc_loss(const DsMasks& masks, const std::vector<imgproc::BinaryMask>& y_opt,
                         const std::vector<imgproc::BinaryMask>& y_sar, const LossWeights& w) {
  auto term = [&](const Tensor& logits, const std::vector<imgproc::BinaryMask>& y) {
    if (logits.ndim() != 4 || logits.dim(1) != 1 || logits.dim(0) != y.size())
      throw ShapeError("gcc_loss", logits.shape(), {y.size()}, "expected [N,1,h,w] logits and N masks");
    return focal_loss(logits, mask_targets(y, logits.dim(2), logits.dim(3)), w.focal_alpha, w.focal_gamma);
  };
  GccTerms t;
  t.opt_deep = term(masks.opt_deep, y_opt);
  t.opt_shallow = term(masks.opt_shallow, y_opt);
  t.sar_deep = term(masks.sar_deep, y_sar);
  t.sar_shallow = term(masks.sar_shallow, y_sar);
  const Tensor opt = add(scale(t.opt_deep, w.lambda_deep), scale(t.opt_shallow, w.lambda_shallow));
  const Tensor sar = add(scale(t.sar_deep, w.lambda_deep), scale(t.sar_shallow, w.lambda_shallow));
  t.total = add(opt, sar);
  return t;
}

/// L_id + lambda_tri * L_tri
inline Tensor retrieval_loss(const Tensor& id, const Tensor& tri, double lambda_tri) {
  return add(id, scale(tri, lambda_tri));
}

/// L_retrieval + lambda_gcc * L_gcc
inline Tensor total_loss(const Tensor& retrieval, const Tensor& gcc, double lambda_gcc) {
  return add(retrieval, scale(gcc, lambda_gcc));
}

}  // namespace geomamba::losses
