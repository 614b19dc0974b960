#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "urbansam/core/rng.hpp"
#include "urbansam/data/raster.hpp"

namespace urbansam {

enum class PromptKind { Mask, Point, Box };

inline std::string to_string(PromptKind k) {
    switch (k) {
        case PromptKind::Mask: return "mask";
        case PromptKind::Point: return "point";
        case PromptKind::Box: return "box";
    }
    return "?";
}

inline PromptKind prompt_kind_from(const std::string& s) {
    if (s == "mask") return PromptKind::Mask;
    if (s == "point") return PromptKind::Point;
    if (s == "box") return PromptKind::Box;
    throw ConfigError("unknown prompt kind '" + s + "' (mask|point|box)");
}

struct PromptSimSpec {
    PromptKind kind = PromptKind::Mask;
    int target_overlap = 100;  // percent, one of {100, 90, 70, 50}
    int num_points = 20;
    std::uint64_t seed = 0;

    void validate() const {
        if (target_overlap != 100 && target_overlap != 90 && target_overlap != 70 &&
            target_overlap != 50)
            throw ConfigError("prompt target_overlap must be one of {100,90,70,50}");
        if (num_points < 1) throw ConfigError("num_points must be >= 1");
    }
};

struct PointPrompt {
    Eigen::Index y = 0, x = 0;
    bool positive = true;
    bool matches_gt = true;
};

struct BoxPrompt {
    Eigen::Index r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive

    double area() const { return static_cast<double>((r1 - r0 + 1)) * static_cast<double>(c1 - c0 + 1); }
};

struct PromptResult {
    PromptKind kind = PromptKind::Mask;
    MaskU8 mask;                      // mask kind, and the rasterized box
    std::vector<PointPrompt> points;  // point kind
    BoxPrompt box;                    // box kind
    double achieved = 0.0;            // IoU for mask/box, match ratio for points
};

inline double mask_iou(const MaskU8& a, const MaskU8& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const bool pa = a.values[i] != 0, pb = b.values[i] != 0;
        inter += (pa && pb);
        uni += (pa || pb);
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

namespace prompt_detail {

// 3x3 square structuring element, applied only inside the window; out-of-image
// neighbors count as background.
inline void morph_window(MaskU8& m, Eigen::Index wy, Eigen::Index wx, Eigen::Index wh,
                         Eigen::Index ww, bool dilate) {
    const MaskU8 src = m;
    const Eigen::Index y1 = std::min(m.height, wy + wh), x1 = std::min(m.width, wx + ww);
    for (Eigen::Index y = std::max<Eigen::Index>(0, wy); y < y1; ++y)
        for (Eigen::Index x = std::max<Eigen::Index>(0, wx); x < x1; ++x) {
            std::uint8_t v = dilate ? 0 : 1;
            for (Eigen::Index dy = -1; dy <= 1; ++dy)
                for (Eigen::Index dx = -1; dx <= 1; ++dx) {
                    const Eigen::Index yy = y + dy, xx = x + dx;
                    const std::uint8_t nb =
                        (yy >= 0 && yy < m.height && xx >= 0 && xx < m.width) ? src.at(yy, xx) : 0;
                    if (dilate)
                        v = std::max(v, nb);
                    else
                        v = std::min(v, nb);
                }
            m.at(y, x) = v;
        }
}

inline BoxPrompt bounding_box(const MaskU8& m) {
    BoxPrompt b{m.height, m.width, -1, -1};
    for (Eigen::Index y = 0; y < m.height; ++y)
        for (Eigen::Index x = 0; x < m.width; ++x)
            if (m.at(y, x)) {
                b.r0 = std::min(b.r0, y);
                b.c0 = std::min(b.c0, x);
                b.r1 = std::max(b.r1, y);
                b.c1 = std::max(b.c1, x);
            }
    return b;
}

inline double box_iou(const BoxPrompt& a, const BoxPrompt& b) {
    const double ir0 = std::max(a.r0, b.r0), ic0 = std::max(a.c0, b.c0);
    const double ir1 = std::min(a.r1, b.r1), ic1 = std::min(a.c1, b.c1);
    const double ih = std::max(0.0, ir1 - ir0 + 1), iw = std::max(0.0, ic1 - ic0 + 1);
    const double inter = ih * iw;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline MaskU8 rasterize_box(const BoxPrompt& b, Eigen::Index h, Eigen::Index w) {
    MaskU8 m(h, w);
    for (Eigen::Index y = std::max<Eigen::Index>(0, b.r0); y <= std::min(h - 1, b.r1); ++y)
        for (Eigen::Index x = std::max<Eigen::Index>(0, b.c0); x <= std::min(w - 1, b.c1); ++x)
            m.at(y, x) = 1;
    return m;
}

}  // namespace prompt_detail

// Degrade a ground-truth mask into a prompt whose overlap with GT lands within
// +/-2 points of the target. Mask prompts use localized random erosion/dilation
// (IoU only decreases, so steps are retried at smaller windows on overshoot);
// box prompts search random corner offsets; point prompts hit the match ratio
// by construction. Reports the best achieved overlap if the target is
// unreachable within the iteration budget.
inline PromptResult simulate_prompt(const MaskU8& gt, const PromptSimSpec& spec) {
    spec.validate();
    const double target = static_cast<double>(spec.target_overlap) / 100.0;
    const double band = 0.02;
    Rng rng(Rng::mix(spec.seed, 0x9120ULL, static_cast<std::uint64_t>(spec.target_overlap)));
    PromptResult res;
    res.kind = spec.kind;

    if (spec.kind != PromptKind::Mask && gt.empty_mask())
        throw DataError("simulate_prompt: ground truth is empty");

    if (spec.kind == PromptKind::Mask) {
        res.mask = gt;
        res.achieved = 1.0;
        if (spec.target_overlap == 100) return res;
        if (gt.empty_mask()) throw DataError("simulate_prompt: cannot degrade an empty mask");
        MaskU8 cur = gt;
        double cur_iou = 1.0;
        double best_diff = std::abs(cur_iou - target);
        Eigen::Index win = std::max<Eigen::Index>(4, gt.height / 6);
        const int max_iters = 6000;
        for (int it = 0; it < max_iters; ++it) {
            MaskU8 next = cur;
            const Eigen::Index wy = rng.uniform_int(0, std::max<Eigen::Index>(0, gt.height - win));
            const Eigen::Index wx = rng.uniform_int(0, std::max<Eigen::Index>(0, gt.width - win));
            prompt_detail::morph_window(next, wy, wx, win, win, rng.coin());
            const double iou = mask_iou(next, gt);
            if (iou < target - band || next.empty_mask()) {
                // overshoot: drop this step and move more carefully
                win = std::max<Eigen::Index>(2, win - 1);
                continue;
            }
            cur = std::move(next);
            cur_iou = iou;
            const double diff = std::abs(cur_iou - target);
            if (diff < best_diff) {
                best_diff = diff;
                res.mask = cur;
                res.achieved = cur_iou;
            }
            if (diff <= band) return res;
        }
        throw DataError("simulate_prompt: target overlap " + std::to_string(spec.target_overlap) +
                        "% unreachable, best achieved " + std::to_string(res.achieved * 100.0) + "%");
    }

    if (spec.kind == PromptKind::Box) {
        const BoxPrompt gt_box = prompt_detail::bounding_box(gt);
        res.box = gt_box;
        res.achieved = 1.0;
        if (spec.target_overlap == 100) {
            res.mask = prompt_detail::rasterize_box(res.box, gt.height, gt.width);
            return res;
        }
        const Eigen::Index bw = gt_box.c1 - gt_box.c0 + 1, bh = gt_box.r1 - gt_box.r0 + 1;
        const auto max_off = static_cast<Eigen::Index>(
            std::ceil(std::max(bw, bh) * (1.0 / target - 1.0) * 1.5)) + 2;
        double best_diff = 1.0;
        bool found = false;
        auto consider = [&](const BoxPrompt& cand) {
            if (found || cand.r1 <= cand.r0 || cand.c1 <= cand.c0) return;
            const double iou = prompt_detail::box_iou(cand, gt_box);
            const double diff = std::abs(iou - target);
            if (diff < best_diff) {
                best_diff = diff;
                res.box = cand;
                res.achieved = iou;
            }
            if (diff <= band) found = true;
        };
        // deterministic sweeps first: shifts of the whole box along the eight
        // directions, then one- and two-sided edge offsets; integer grids can
        // make single-side steps coarse, so the pairs fill the gaps
        const Eigen::Index dirs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                         {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
        for (Eigen::Index t = 1; t <= max_off && !found; ++t)
            for (const auto& d : dirs)
                consider({gt_box.r0 + t * d[0], gt_box.c0 + t * d[1], gt_box.r1 + t * d[0],
                          gt_box.c1 + t * d[1]});
        const Eigen::Index side_max = std::max<Eigen::Index>(bw, bh);
        for (Eigen::Index a = 0; a <= side_max && !found; ++a)
            for (Eigen::Index b = 0; b <= side_max && !found; ++b) {
                consider({gt_box.r0 + a, gt_box.c0 + b, gt_box.r1, gt_box.c1});
                consider({gt_box.r0 - a, gt_box.c0 - b, gt_box.r1, gt_box.c1});
                consider({gt_box.r0 + a, gt_box.c0, gt_box.r1, gt_box.c1 - b});
                consider({gt_box.r0, gt_box.c0 + b, gt_box.r1 - a, gt_box.c1});
                consider({gt_box.r0, gt_box.c0, gt_box.r1 - a, gt_box.c1 - b});
            }
        // randomized corner offsets cover the remainder
        for (int it = 0; it < 4000 && !found; ++it)
            consider({gt_box.r0 + rng.uniform_int(-max_off, max_off),
                      gt_box.c0 + rng.uniform_int(-max_off, max_off),
                      gt_box.r1 + rng.uniform_int(-max_off, max_off),
                      gt_box.c1 + rng.uniform_int(-max_off, max_off)});
        if (found) {
            res.mask = prompt_detail::rasterize_box(res.box, gt.height, gt.width);
            return res;
        }
        throw DataError("simulate_prompt: box overlap " + std::to_string(spec.target_overlap) +
                        "% unreachable, best achieved " + std::to_string(res.achieved * 100.0) + "%");
    }

    // Point prompts: positive/negative cue points; a point "matches" when its
    // label agrees with the ground truth underneath. The match quota is exact.
    std::vector<std::pair<Eigen::Index, Eigen::Index>> fg, bg;
    for (Eigen::Index y = 0; y < gt.height; ++y)
        for (Eigen::Index x = 0; x < gt.width; ++x)
            (gt.at(y, x) ? fg : bg).emplace_back(y, x);
    if (bg.empty()) throw DataError("simulate_prompt: mask covers the whole scene");
    const int n = spec.num_points;
    const int n_match = static_cast<int>(std::lround(target * n));
    for (int i = 0; i < n; ++i) {
        const bool match = i < n_match;
        const bool positive = rng.coin();
        const bool on_fg = match == positive;
        const auto& pool = on_fg ? fg : bg;
        const auto pick = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
        res.points.push_back({pick.first, pick.second, positive, match});
    }
    res.achieved = static_cast<double>(n_match) / static_cast<double>(n);
    return res;
}

}  // namespace urbansam
