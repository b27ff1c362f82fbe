#pragma once

// Central finite-difference checks against the detector's analytic gradients.

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "iaqd/core.hpp"
#include "iaqd/data.hpp"
#include "iaqd/detector.hpp"
#include "iaqd/losses.hpp"
#include "iaqd/matcher.hpp"

namespace iaqd::testing {

/// 4 queries, 3 categories, 16x16 images.
inline DetectorSpec micro_spec() {
  DetectorSpec s;
  s.num_queries = 4;
  s.num_categories = 3;
  s.embed_dim = 8;
  s.num_heads = 2;
  s.ffn_dim = 12;
  s.decoder_layers = 2;
  s.image_size = 16;
  s.conv1_channels = 4;
  s.conv2_channels = 6;
  return s;
}

/// Returns the loss and, when `grad` is non-null, adds dL/d(output) into it.
using OutputLoss = std::function<double(const DetectorOutput&, OutputGradient*)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps entries that are zero up to
/// rounding from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline void note(GradCheckResult& r, const std::string& name, double analytic, double numeric) {
  const double e = relative_error(analytic, numeric);
  ++r.checked;
  if (e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst = name + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
  }
}

/// Perturbs logits and boxes of `base` directly.
inline GradCheckResult check_output_gradient(const DetectorOutput& base, const OutputLoss& loss, double eps = 1e-6) {
  OutputGradient g = OutputGradient::zeros(base.num_queries(), base.num_categories());
  loss(base, &g);
  GradCheckResult r;
  for (int which = 0; which < 2; ++which) {
    const Matrix& src = which == 0 ? base.logits() : base.boxes();
    const Matrix& analytic = which == 0 ? g.logits : g.boxes;
    for (Eigen::Index i = 0; i < src.rows(); ++i)
      for (Eigen::Index j = 0; j < src.cols(); ++j) {
        auto eval = [&](double delta) {
          Matrix logits = base.logits(), boxes = base.boxes();
          (which == 0 ? logits : boxes)(i, j) += delta;
          return loss(DetectorOutput(logits, boxes), nullptr);
        };
        const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
        note(r, std::string(which == 0 ? "logits" : "boxes") + "(" + std::to_string(i) + "," + std::to_string(j) + ")",
             analytic(i, j), numeric);
      }
  }
  return r;
}

/// Perturbs every detector parameter and backpropagates `loss` through the network.
inline GradCheckResult check_parameter_gradient(Detector& model, const Matrix& image, const OutputLoss& loss,
                                                double eps = 1e-5) {
  model.zero_grad();
  ForwardCache cache;
  const DetectorOutput out = model.forward(image, cache);
  OutputGradient g = OutputGradient::zeros(out.num_queries(), out.num_categories());
  loss(out, &g);
  model.backward(cache, g);

  std::vector<std::pair<std::string, const Matrix*>> grads;
  model.grads().visit([&](const std::string& name, const Matrix& m) { grads.emplace_back(name, &m); });
  GradCheckResult r;
  std::size_t k = 0;
  model.params().visit([&](const std::string& name, Matrix& p) {
    const Matrix& analytic = *grads[k++].second;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + eps;
      const double plus = loss(model.forward(image), nullptr);
      p.data()[i] = saved - eps;
      const double minus = loss(model.forward(image), nullptr);
      p.data()[i] = saved;
      note(r, name + "[" + std::to_string(i) + "]", analytic.data()[i], (plus - minus) / (2 * eps));
    }
  });
  return r;
}

/// Normal logits and boxes inside the unit square.
inline DetectorOutput random_output(std::mt19937_64& rng, int n, int c, double spread = 2.0) {
  std::normal_distribution<double> normal(0.0, spread);
  std::uniform_real_distribution<double> u(0.2, 0.8), s(0.05, 0.3);
  Matrix logits(n, c + 1), boxes(n, 4);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k <= c; ++k) logits(i, k) = normal(rng);
    boxes.row(i) << u(rng), u(rng), s(rng), s(rng);
  }
  return DetectorOutput(logits, boxes);
}

/// A 16x16 scene with two objects of categories 0 and 2.
inline SyntheticScene micro_scene() {
  SyntheticScene s;
  s.scene_id = 0;
  s.image_size = 16;
  s.annotations = {make_annotation(0, BoundingBox(0.3, 0.35, 0.3, 0.25), 3),
                   make_annotation(2, BoundingBox(0.7, 0.65, 0.25, 0.35), 3)};
  s.image = render_scene(s.annotations, 16, 7);
  return s;
}

struct NamedLoss {
  std::string name;
  OutputLoss loss;
};

/// detr_loss under a fixed Hungarian assignment, distill_hungarian and
/// iaqd_loss against `teacher` with old categories {0, 1}.
inline std::vector<NamedLoss> micro_losses(const DetectorOutput& student, const DetectorOutput& teacher,
                                           const AnnotationSet& targets) {
  const MatchAssignment assignment = hungarian_assign(build_cost_matrix(targets, student, {}));
  const CategorySet old{0, 1};
  const ProxyQuerySet proxy = select_proxy_queries(teacher, old, 0.1);
  return {
      {"detr_loss",
       [=](const DetectorOutput& o, OutputGradient* g) {
         const auto p = detr_loss(o, targets, assignment, {}, g);
         return p.cls + p.loc;
       }},
      {"distill_hungarian",
       [=](const DetectorOutput& o, OutputGradient* g) { return distill_hungarian(teacher, o, 0.5, 0.05, g).value; }},
      {"iaqd_loss",
       [=](const DetectorOutput& o, OutputGradient* g) {
         return iaqd_loss(teacher, o, proxy, old, 0.5, false, g).value;
       }},
  };
}

}  // namespace iaqd::testing
