#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include <json.hpp>

#include "urbansam/core/tensor.hpp"

namespace urbansam {

// Confusion counts plus the derived segmentation metrics. Accumulation is
// count-additive, so merging batch reports in any order gives the pooled
// (micro) result exactly.
struct MetricsReport {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    bool undefined_precision = false;  // zero-denominator cases reported as 0
    bool undefined_recall = false;
    bool undefined_iou = false;

    std::uint64_t total() const { return tp + fp + fn + tn; }

    double oa() const { return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0; }
    double precision() const {
        return (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    }
    double recall() const {
        return (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    }
    double f1() const {
        const double p = precision(), r = recall();
        return (p + r > 0.0) ? 2.0 * p * r / (p + r) : 0.0;
    }
    double iou() const {
        return (tp + fp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn) : 0.0;
    }

    void merge(const MetricsReport& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        undefined_precision = (tp + fp) == 0;
        undefined_recall = (tp + fn) == 0;
        undefined_iou = (tp + fp + fn) == 0;
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"tp", tp},
                              {"fp", fp},
                              {"fn", fn},
                              {"tn", tn},
                              {"oa", oa()},
                              {"precision", precision()},
                              {"recall", recall()},
                              {"f1", f1()},
                              {"iou", iou()}};
    }

    static std::string csv_header() { return "tp,fp,fn,tn,oa,precision,recall,f1,iou"; }

    // Ratios printed as percentages with two decimals, matching report tables.
    std::string csv_row() const {
        std::ostringstream os;
        os << tp << ',' << fp << ',' << fn << ',' << tn;
        for (double v : {oa(), precision(), recall(), f1(), iou()}) {
            os << ',';
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
            os << buf;
        }
        return os.str();
    }
};

template <class S>
MetricsReport compute_metrics(const Tensor<S>& pred_binary, const Tensor<S>& gt_binary) {
    require_same_shape(pred_binary, gt_binary, "compute_metrics");
    MetricsReport r;
    for (Eigen::Index i = 0; i < pred_binary.numel(); ++i) {
        const S p = pred_binary[i], y = gt_binary[i];
        if ((p != S(0) && p != S(1)) || (y != S(0) && y != S(1)))
            throw ValidationError("compute_metrics: inputs must be binary");
        if (p == S(1) && y == S(1))
            ++r.tp;
        else if (p == S(1))
            ++r.fp;
        else if (y == S(1))
            ++r.fn;
        else
            ++r.tn;
    }
    r.undefined_precision = (r.tp + r.fp) == 0;
    r.undefined_recall = (r.tp + r.fn) == 0;
    r.undefined_iou = (r.tp + r.fp + r.fn) == 0;
    return r;
}

}  // namespace urbansam
