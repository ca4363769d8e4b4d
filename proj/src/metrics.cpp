#include "topowmamba/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "topowmamba/ops.hpp"

namespace twm {

void LabelMask::validate(std::int64_t num_classes) const {
  if (h < 1 || w < 1 || static_cast<std::int64_t>(classes.size()) != h * w)
    throw ShapeError("LabelMask: size mismatch");
  if (spacing_r <= 0 || spacing_c <= 0) throw ConfigError("LabelMask: spacing must be positive");
  for (auto c : classes)
    if (c >= num_classes)
      throw ConfigError("LabelMask: class id " + std::to_string(int(c)) + " out of range [0," +
                        std::to_string(num_classes) + ")");
}

std::vector<std::pair<std::int64_t, std::int64_t>> extract_boundary(const std::vector<std::uint8_t>& mask,
                                                                    std::int64_t h, std::int64_t w) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  auto on = [&](std::int64_t r, std::int64_t c) -> bool {
    if (r < 0 || r >= h || c < 0 || c >= w) return false;
    return mask[static_cast<std::size_t>(r * w + c)] != 0;
  };
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c)
      if (on(r, c) && (!on(r - 1, c) || !on(r + 1, c) || !on(r, c - 1) || !on(r, c + 1))) out.emplace_back(r, c);
  return out;
}

namespace {

double nearest_rank_p95(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const auto n = static_cast<std::int64_t>(v.size());
  auto idx = static_cast<std::int64_t>(std::ceil(0.95 * static_cast<double>(n)));
  idx = std::max<std::int64_t>(1, std::min(idx, n));
  return v[static_cast<std::size_t>(idx - 1)];
}

std::vector<double> directed_min_distances(const std::vector<std::pair<std::int64_t, std::int64_t>>& from,
                                           const std::vector<std::pair<std::int64_t, std::int64_t>>& to,
                                           double sr, double sc) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from) {
    double best2 = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dr = static_cast<double>(p.first - q.first) * sr;
      const double dc = static_cast<double>(p.second - q.second) * sc;
      best2 = std::min(best2, dr * dr + dc * dc);
    }
    d.push_back(std::sqrt(best2));
  }
  return d;
}

}  // namespace

Hd95Result hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, std::int64_t h,
                std::int64_t w, double spacing_r, double spacing_c) {
  if (pred.size() != gt.size() || static_cast<std::int64_t>(pred.size()) != h * w)
    throw ShapeError("hd95: mask shapes disagree");
  const auto bp = extract_boundary(pred, h, w);
  const auto bg = extract_boundary(gt, h, w);
  Hd95Result res;
  if (bp.empty() && bg.empty()) {
    res.both_empty = true;
    res.mm = 0.0;
    return res;
  }
  if (bp.empty() || bg.empty()) {
    res.one_empty = true;
    const double dh = static_cast<double>(h) * spacing_r;
    const double dw = static_cast<double>(w) * spacing_c;
    res.mm = std::sqrt(dh * dh + dw * dw);
    return res;
  }
  auto d_ab = directed_min_distances(bp, bg, spacing_r, spacing_c);
  auto d_ba = directed_min_distances(bg, bp, spacing_r, spacing_c);
  res.mm = std::max(nearest_rank_p95(d_ab), nearest_rank_p95(d_ba));
  return res;
}

std::vector<ClassStats> overlap_metrics(const LabelMask& pred, const LabelMask& gt, std::int64_t num_classes) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("overlap_metrics: mask shapes disagree");
  pred.validate(num_classes);
  gt.validate(num_classes);
  std::vector<ClassStats> out;
  for (int cls = 1; cls < num_classes; ++cls) {
    ClassStats s;
    s.id = cls;
    std::int64_t inter = 0, np = 0, ng = 0, uni = 0;
    for (std::size_t i = 0; i < pred.classes.size(); ++i) {
      const bool a = pred.classes[i] == cls, b = gt.classes[i] == cls;
      inter += a && b;
      np += a;
      ng += b;
      uni += a || b;
    }
    s.support = ng;
    if (np == 0 && ng == 0) {
      s.both_empty = true;
      s.dice_pct = 100.0;
      s.iou_pct = 100.0;
    } else if (np == 0 || ng == 0) {
      s.one_empty = true;
      s.dice_pct = 0.0;
      s.iou_pct = 0.0;
    } else {
      s.dice_pct = 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
      s.iou_pct = 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
    }
    out.push_back(s);
  }
  return out;
}

std::vector<ClassStats> case_metrics(const LabelMask& pred, const LabelMask& gt, std::int64_t num_classes) {
  auto stats = overlap_metrics(pred, gt, num_classes);
  for (auto& s : stats) {
    std::vector<std::uint8_t> bp(pred.classes.size()), bg(gt.classes.size());
    for (std::size_t i = 0; i < pred.classes.size(); ++i) {
      bp[i] = pred.classes[i] == s.id;
      bg[i] = gt.classes[i] == s.id;
    }
    auto d = hd95(bp, bg, pred.h, pred.w, gt.spacing_r, gt.spacing_c);
    s.hd95_mm = d.mm;
    // flags already set by the overlap pass for pixel emptiness; boundary
    // emptiness coincides with it
  }
  return stats;
}

MetricsReport aggregate_metrics(const std::vector<std::vector<ClassStats>>& cases,
                                const std::vector<std::string>& class_names) {
  MetricsReport rep;
  rep.n_cases = static_cast<std::int64_t>(cases.size());
  if (cases.empty()) return rep;
  const auto n_fg = cases[0].size();
  for (std::size_t c = 0; c < n_fg; ++c) {
    PerClassReport pc;
    pc.id = cases[0][c].id;
    pc.name = pc.id < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(pc.id)]
                                                           : "class" + std::to_string(pc.id);
    for (const auto& one : cases) {
      const auto& s = one[c];
      pc.dice += s.dice_pct;
      pc.iou += s.iou_pct;
      pc.hd95 += s.hd95_mm;
      pc.support += s.support;
      pc.n_both_empty += s.both_empty;
      pc.n_one_empty += s.one_empty;
    }
    const auto n = static_cast<double>(cases.size());
    pc.dice /= n;
    pc.iou /= n;
    pc.hd95 /= n;
    rep.per_class.push_back(pc);
  }
  for (const auto& pc : rep.per_class) {
    rep.mean_dice += pc.dice;
    rep.mean_iou += pc.iou;
    rep.mean_hd95 += pc.hd95;
  }
  const auto k = static_cast<double>(rep.per_class.size());
  if (k > 0) {
    rep.mean_dice /= k;
    rep.mean_iou /= k;
    rep.mean_hd95 /= k;
  }
  return rep;
}

std::string MetricsReport::to_json_string(int indent) const {
  nlohmann::json j;
  j["per_class"] = nlohmann::json::array();
  for (const auto& pc : per_class) {
    nlohmann::json e;
    e["id"] = pc.id;
    e["name"] = pc.name;
    e["dice"] = pc.dice;
    e["hd95"] = pc.hd95;
    e["iou"] = pc.iou;
    e["support"] = pc.support;
    e["flags"] = {{"both_empty", pc.n_both_empty}, {"one_empty", pc.n_one_empty}};
    j["per_class"].push_back(e);
  }
  j["mean"] = {{"dice", mean_dice}, {"hd95", mean_hd95}, {"iou", mean_iou}};
  j["n_cases"] = n_cases;
  return j.dump(indent);
}

LabelMask downsample_labels(const LabelMask& mask, std::int64_t factor) {
  if (factor < 1 || mask.h % factor != 0 || mask.w % factor != 0)
    throw ShapeError("downsample_labels: extents not divisible by factor");
  LabelMask out;
  out.h = mask.h / factor;
  out.w = mask.w / factor;
  out.spacing_r = mask.spacing_r * static_cast<double>(factor);
  out.spacing_c = mask.spacing_c * static_cast<double>(factor);
  out.classes.resize(static_cast<std::size_t>(out.h * out.w));
  for (std::int64_t r = 0; r < out.h; ++r)
    for (std::int64_t c = 0; c < out.w; ++c)
      out.classes[static_cast<std::size_t>(r * out.w + c)] =
          mask.classes[static_cast<std::size_t>((r * factor) * mask.w + c * factor)];
  return out;
}

namespace {

// dice + CE for one output scale
template <typename T>
Tensor<T> scale_loss(const Tensor<T>& logits, const std::vector<LabelMask>& gt) {
  const auto n = logits.dim(0), nc = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (static_cast<std::int64_t>(gt.size()) != n) throw ShapeError("seg_loss: batch size mismatch");
  std::vector<T> onehot(static_cast<std::size_t>(n * h * w * nc), T(0));
  for (std::int64_t in = 0; in < n; ++in) {
    const auto& m = gt[static_cast<std::size_t>(in)];
    if (m.h != h || m.w != w)
      throw ShapeError("seg_loss: ground truth " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                       " does not match logits " + std::to_string(h) + "x" + std::to_string(w));
    m.validate(nc);
    for (std::int64_t p = 0; p < h * w; ++p)
      onehot[static_cast<std::size_t>((in * h * w + p) * nc + m.classes[static_cast<std::size_t>(p)])] = T(1);
  }
  auto y = Tensor<T>::from_data({n, h * w, nc}, std::move(onehot));

  auto nhwc = reshape(permute(logits, {0, 2, 3, 1}), {n, h * w, nc});
  auto logp = log_softmax(nhwc);
  auto ce = mul_scalar(sum(mul(y, logp)), T(-1) / static_cast<T>(n * h * w));

  const T eps = T(1e-5);
  auto p = softmax(nhwc);
  auto p_by_class = reshape(permute(p, {2, 0, 1}), {nc, n * h * w});
  auto y_by_class = reshape(permute(y, {2, 0, 1}), {nc, n * h * w});
  auto inter = sum_last(mul(p_by_class, y_by_class));
  auto denom = add(sum_last(p_by_class), sum_last(y_by_class));
  auto frac = div(add_scalar(mul_scalar(inter, T(2)), eps), add_scalar(denom, eps));
  // mean over classes of (1 - frac)
  auto dice = add_scalar(mul_scalar(sum(frac), T(-1) / static_cast<T>(nc)), T(1));
  return add(dice, ce);
}

}  // namespace

template <typename T>
Tensor<T> seg_loss(const SegOutput<T>& output, const std::vector<LabelMask>& gt) {
  if (!output.main.defined()) throw ShapeError("seg_loss: missing main logits");
  auto total = scale_loss(output.main, gt);
  const auto h = output.main.dim(2);
  for (const auto& aux : output.aux) {
    const auto factor = h / aux.dim(2);
    if (factor * aux.dim(2) != h) throw ShapeError("seg_loss: aux scale is not a power-of-two fraction");
    std::vector<LabelMask> gt_small;
    gt_small.reserve(gt.size());
    for (const auto& m : gt) gt_small.push_back(downsample_labels(m, factor));
    const T weight = static_cast<T>(std::pow(0.5, std::log2(static_cast<double>(factor))));
    total = add(total, mul_scalar(scale_loss(aux, gt_small), weight));
  }
  return total;
}

template Tensor<float> seg_loss<float>(const SegOutput<float>&, const std::vector<LabelMask>&);
template Tensor<double> seg_loss<double>(const SegOutput<double>&, const std::vector<LabelMask>&);

}  // namespace twm
