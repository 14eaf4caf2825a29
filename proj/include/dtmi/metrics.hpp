#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtmi {

struct MetricsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Grayscale maps for evaluation: prediction as doubles in [0,1] (after any
// resize) plus its 8-bit quantization, GT binarized at 128.
struct GrayMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // [0,1]

    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct BinaryMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;  // 0/1

    bool at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
    long foreground() const {
        long n = 0;
        for (auto v : values) n += v;
        return n;
    }
};

double mae(const GrayMap& pred, const GrayMap& gt);

// Counts of a 256-threshold sweep for one image: prediction binarized at
// S8 >= t for t in 0..255.
struct PrSweep {
    std::array<long, 256> tp{}, fp{}, fn{};
};

PrSweep pr_sweep(const std::vector<std::uint8_t>& pred8, const BinaryMap& gt);

// Precision/recall at one threshold; empty predictions use the convention
// (P, R) = (1, 0).
std::pair<double, double> pr_at_threshold(const PrSweep& sweep, int t);

double f_measure(double precision, double recall, double beta2 = 0.3);

// Per-image maximum F over all 256 thresholds.
double f_max_image(const std::vector<std::uint8_t>& pred8, const BinaryMap& gt);

// Structure measure (object- and region-aware similarity, alpha-blended,
// clamped below at zero). Degenerate GT: all-background scores 1 - mean(pred),
// all-foreground scores mean(pred).
double s_measure(const GrayMap& pred, const BinaryMap& gt, double alpha = 0.5);

struct PrPoint {
    int threshold;
    double precision;
    double recall;
};

struct EvalReport {
    double mae = 0.0;
    double f_max = 0.0;
    double s_measure = 0.0;
    int n_images = 0;
    std::vector<std::string> skipped;  // ids with empty GT (excluded from PR/F)
    std::vector<PrPoint> pr_curve;     // 256 rows, ascending threshold
};

// Evaluates <pred_dir>/<id>.png against <gt_dir>/<id>.png for every gt stem.
// Predictions are resized bilinearly to the GT resolution. MAE/S-measure are
// per-image means over all images; P and R are averaged per threshold over
// non-empty-GT images and F-max maximizes F over the averaged curve.
EvalReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir);

void write_report_json(const EvalReport& report, const std::string& dataset_name,
                       const std::string& json_path, const std::string& csv_path);
void write_pr_csv(const EvalReport& report, const std::string& csv_path);

}  // namespace dtmi
