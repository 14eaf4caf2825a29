#include "dtmi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "dtmi/data.hpp"
#include "dtmi/image.hpp"

namespace dtmi {

namespace fs = std::filesystem;

double mae(const GrayMap& pred, const GrayMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw MetricsError("mae: shape mismatch " + std::to_string(pred.width) + "x" +
                           std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                           std::to_string(gt.height));
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i)
        acc += std::abs(pred.values[i] - gt.values[i]);
    return acc / static_cast<double>(pred.values.size());
}

PrSweep pr_sweep(const std::vector<std::uint8_t>& pred8, const BinaryMap& gt) {
    if (pred8.size() != gt.values.size()) throw MetricsError("pr_sweep: size mismatch");
    // histogram of prediction levels over foreground / background
    std::array<long, 256> fg_hist{}, bg_hist{};
    long n_fg = 0;
    for (std::size_t i = 0; i < pred8.size(); ++i) {
        if (gt.values[i]) {
            ++fg_hist[pred8[i]];
            ++n_fg;
        } else {
            ++bg_hist[pred8[i]];
        }
    }
    if (n_fg == 0) throw MetricsError("pr_sweep: ground truth has no foreground");

    // binarization S8 >= t: cumulative sums from above
    PrSweep s;
    long fg_ge = 0, bg_ge = 0;
    for (int t = 255; t >= 0; --t) {
        fg_ge += fg_hist[static_cast<std::size_t>(t)];
        bg_ge += bg_hist[static_cast<std::size_t>(t)];
        s.tp[static_cast<std::size_t>(t)] = fg_ge;
        s.fp[static_cast<std::size_t>(t)] = bg_ge;
        s.fn[static_cast<std::size_t>(t)] = n_fg - fg_ge;
    }
    return s;
}

std::pair<double, double> pr_at_threshold(const PrSweep& sweep, int t) {
    const auto tu = static_cast<std::size_t>(t);
    const long tp = sweep.tp[tu], fp = sweep.fp[tu], fn = sweep.fn[tu];
    if (tp + fp == 0) return {1.0, 0.0};
    const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
    return {p, r};
}

double f_measure(double precision, double recall, double beta2) {
    const double den = beta2 * precision + recall;
    if (den == 0.0) return 0.0;
    return (1.0 + beta2) * precision * recall / den;
}

double f_max_image(const std::vector<std::uint8_t>& pred8, const BinaryMap& gt) {
    const auto sweep = pr_sweep(pred8, gt);
    double best = 0.0;
    for (int t = 0; t < 256; ++t) {
        const auto [p, r] = pr_at_threshold(sweep, t);
        best = std::max(best, f_measure(p, r));
    }
    return best;
}

namespace {

// --- structure measure internals (object/region similarity) ---

// Mean and sample standard deviation of pred over a mask. A region of one
// pixel (or none) has zero deviation.
struct MaskStats {
    double mean = 0.0;
    double sd = 0.0;
    long n = 0;
};

MaskStats masked_stats(const GrayMap& pred, const BinaryMap& gt, bool over_fg) {
    MaskStats st;
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i)
        if ((gt.values[i] != 0) == over_fg) {
            acc += pred.values[i];
            ++st.n;
        }
    if (st.n == 0) return st;
    st.mean = acc / static_cast<double>(st.n);
    if (st.n > 1) {
        double sq = 0.0;
        for (std::size_t i = 0; i < pred.values.size(); ++i)
            if ((gt.values[i] != 0) == over_fg) {
                const double d = pred.values[i] - st.mean;
                sq += d * d;
            }
        st.sd = std::sqrt(sq / static_cast<double>(st.n - 1));
    }
    return st;
}

double object_score(double mean, double sd) {
    return 2.0 * mean / (mean * mean + 1.0 + sd + std::numeric_limits<double>::epsilon());
}

double s_object(const GrayMap& pred, const BinaryMap& gt) {
    // foreground compared against pred, background against 1 - pred
    const auto fg = masked_stats(pred, gt, true);
    GrayMap inv = pred;
    for (auto& v : inv.values) v = 1.0 - v;
    const auto bg = masked_stats(inv, gt, false);
    const double u = static_cast<double>(gt.foreground()) / static_cast<double>(gt.values.size());
    return u * object_score(fg.mean, fg.sd) + (1.0 - u) * object_score(bg.mean, bg.sd);
}

// GT centroid, 1-based with round-half-away-from-zero (whole-map center for
// empty masks).
std::pair<int, int> centroid_1based(const BinaryMap& gt) {
    const long total = gt.foreground();
    if (total == 0)
        return {static_cast<int>(std::lround(gt.width / 2.0)),
                static_cast<int>(std::lround(gt.height / 2.0))};
    double sx = 0.0, sy = 0.0;
    for (int y = 0; y < gt.height; ++y)
        for (int x = 0; x < gt.width; ++x)
            if (gt.at(y, x)) {
                sx += x + 1;
                sy += y + 1;
            }
    return {static_cast<int>(std::lround(sx / static_cast<double>(total))),
            static_cast<int>(std::lround(sy / static_cast<double>(total)))};
}

struct Block {
    int y0, y1, x0, x1;  // half-open pixel ranges
    long area() const { return static_cast<long>(y1 - y0) * (x1 - x0); }
};

// SSIM-style similarity over one block; empty blocks score 0 (their area
// weight is 0), blocks of <=1 pixel have zero variance terms.
double block_ssim(const GrayMap& pred, const BinaryMap& gt, const Block& blk) {
    const long n = blk.area();
    if (n == 0) return 0.0;
    double mx = 0.0, my = 0.0;
    for (int y = blk.y0; y < blk.y1; ++y)
        for (int x = blk.x0; x < blk.x1; ++x) {
            mx += pred.at(y, x);
            my += gt.at(y, x) ? 1.0 : 0.0;
        }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double vx = 0.0, vy = 0.0, vxy = 0.0;
    if (n > 1) {
        for (int y = blk.y0; y < blk.y1; ++y)
            for (int x = blk.x0; x < blk.x1; ++x) {
                const double dx = pred.at(y, x) - mx;
                const double dy = (gt.at(y, x) ? 1.0 : 0.0) - my;
                vx += dx * dx;
                vy += dy * dy;
                vxy += dx * dy;
            }
        vx /= static_cast<double>(n - 1);
        vy /= static_cast<double>(n - 1);
        vxy /= static_cast<double>(n - 1);
    }
    const double alpha = 4.0 * mx * my * vxy;
    const double beta = (mx * mx + my * my) * (vx + vy);
    if (alpha != 0.0) return alpha / (beta + std::numeric_limits<double>::epsilon());
    if (beta == 0.0) return 1.0;
    return 0.0;
}

double s_region(const GrayMap& pred, const BinaryMap& gt) {
    const auto [cx, cy] = centroid_1based(gt);
    const int w = gt.width, h = gt.height;
    const Block lt{0, cy, 0, cx};
    const Block rt{0, cy, cx, w};
    const Block lb{cy, h, 0, cx};
    const Block rb{cy, h, cx, w};
    const double area = static_cast<double>(w) * h;
    const double w1 = static_cast<double>(lt.area()) / area;
    const double w2 = static_cast<double>(rt.area()) / area;
    const double w3 = static_cast<double>(lb.area()) / area;
    const double w4 = 1.0 - w1 - w2 - w3;
    return w1 * block_ssim(pred, gt, lt) + w2 * block_ssim(pred, gt, rt) +
           w3 * block_ssim(pred, gt, lb) + w4 * block_ssim(pred, gt, rb);
}

}  // namespace

double s_measure(const GrayMap& pred, const BinaryMap& gt, double alpha) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw MetricsError("s_measure: shape mismatch");
    const long fg = gt.foreground();
    const long total = static_cast<long>(gt.values.size());
    double mean_pred = 0.0;
    for (double v : pred.values) mean_pred += v;
    mean_pred /= static_cast<double>(total);

    if (fg == 0) return 1.0 - mean_pred;
    if (fg == total) return mean_pred;
    const double q = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt);
    return std::max(q, 0.0);
}

namespace {

GrayMap gray_from_image(const ImageU8& img) {
    GrayMap g;
    g.height = img.height;
    g.width = img.width;
    g.values.resize(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i)
        g.values[i] = static_cast<double>(img.data[i]) / 255.0;
    return g;
}

}  // namespace

EvalReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir) {
    if (!fs::is_directory(gt_dir)) throw MetricsError("gt directory missing: " + gt_dir);
    if (!fs::is_directory(pred_dir)) throw MetricsError("prediction directory missing: " + pred_dir);

    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(gt_dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
        ids.push_back(entry.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw MetricsError("no gt maps found under " + gt_dir);

    std::vector<std::string> missing;
    for (const auto& id : ids)
        if (!fs::exists(fs::path(pred_dir) / (id + ".png"))) missing.push_back(id);
    if (!missing.empty()) {
        std::string msg = "missing predictions for ids:";
        for (const auto& id : missing) msg += " " + id;
        throw MetricsError(msg);
    }

    EvalReport rep;
    double mae_acc = 0.0, s_acc = 0.0;
    std::array<double, 256> p_acc{}, r_acc{};
    long pr_images = 0;

    for (const auto& id : ids) {
        const ImageU8 gt_img = read_image((fs::path(gt_dir) / (id + ".png")).string());
        if (gt_img.channels != 1)
            throw MetricsError(id + ": gt must be single-channel grayscale");
        ImageU8 pred_img = read_image((fs::path(pred_dir) / (id + ".png")).string());
        if (pred_img.channels != 1)
            throw MetricsError(id + ": prediction must be single-channel grayscale");

        // resize prediction to GT resolution
        FloatPlanes pf = planes_from_image(pred_img);
        pf = resize_planes(pf, gt_img.height, gt_img.width);
        GrayMap pred;
        pred.height = gt_img.height;
        pred.width = gt_img.width;
        pred.values.assign(pf.data.begin(), pf.data.end());

        const GrayMap gt_gray = gray_from_image(gt_img);
        BinaryMap gt_bin;
        gt_bin.height = gt_img.height;
        gt_bin.width = gt_img.width;
        gt_bin.values.resize(gt_img.data.size());
        for (std::size_t i = 0; i < gt_img.data.size(); ++i)
            gt_bin.values[i] = gt_img.data[i] >= 128 ? 1 : 0;

        mae_acc += mae(pred, gt_gray);
        s_acc += s_measure(pred, gt_bin);

        if (gt_bin.foreground() == 0) {
            rep.skipped.push_back(id);
        } else {
            std::vector<std::uint8_t> pred8(pred.values.size());
            for (std::size_t i = 0; i < pred.values.size(); ++i)
                pred8[i] = static_cast<std::uint8_t>(
                    std::lround(255.0 * std::min(std::max(pred.values[i], 0.0), 1.0)));
            const auto sweep = pr_sweep(pred8, gt_bin);
            for (int t = 0; t < 256; ++t) {
                const auto [p, r] = pr_at_threshold(sweep, t);
                p_acc[static_cast<std::size_t>(t)] += p;
                r_acc[static_cast<std::size_t>(t)] += r;
            }
            ++pr_images;
        }
        ++rep.n_images;
    }

    rep.mae = mae_acc / rep.n_images;
    rep.s_measure = s_acc / rep.n_images;
    rep.pr_curve.resize(256);
    double best_f = 0.0;
    for (int t = 0; t < 256; ++t) {
        const double p = pr_images ? p_acc[static_cast<std::size_t>(t)] / pr_images : 0.0;
        const double r = pr_images ? r_acc[static_cast<std::size_t>(t)] / pr_images : 0.0;
        rep.pr_curve[static_cast<std::size_t>(t)] = {t, p, r};
        best_f = std::max(best_f, f_measure(p, r));
    }
    rep.f_max = pr_images ? best_f : 0.0;
    return rep;
}

void write_pr_csv(const EvalReport& report, const std::string& csv_path) {
    std::ofstream out(csv_path);
    if (!out) throw MetricsError("cannot write " + csv_path);
    out << "threshold,precision,recall\n";
    char line[96];
    for (const auto& pt : report.pr_curve) {
        std::snprintf(line, sizeof(line), "%d,%.9f,%.9f\n", pt.threshold, pt.precision, pt.recall);
        out << line;
    }
}

void write_report_json(const EvalReport& report, const std::string& dataset_name,
                       const std::string& json_path, const std::string& csv_path) {
    write_pr_csv(report, csv_path);
    nlohmann::json j;
    j["dataset"] = dataset_name;
    j["n_images"] = report.n_images;
    j["mae"] = report.mae;
    j["f_max"] = report.f_max;
    j["s_measure"] = report.s_measure;
    j["skipped"] = report.skipped;
    j["pr_curve_csv"] = csv_path;
    std::ofstream out(json_path);
    if (!out) throw MetricsError("cannot write " + json_path);
    out << j.dump(2) << "\n";
}

}  // namespace dtmi
