#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace flowbench::util {

// Self-contained SVG line charts: one curve per series with an optional
// shaded min/max-free standard-deviation band across seeds. No plotting
// dependency; output is plain XML.
class SvgChart {
public:
    struct Series {
        std::string label;
        std::vector<double> x;
        std::vector<double> mean;
        std::vector<double> sd;  // empty or same length: band half-width
    };

    SvgChart(std::string title, std::string x_label, std::string y_label, int smooth_window = 1)
        : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)),
          smooth_(smooth_window < 1 ? 1 : smooth_window) {}

    void add_series(Series s) { series_.push_back(std::move(s)); }

    void write_file(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("svg: cannot write " + path);
        f << render();
    }

    std::string render() const {
        const int W = 760, H = 460, ml = 70, mr = 20, mt = 40, mb = 55;
        double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
        std::vector<Series> smoothed;
        for (const auto& s : series_) smoothed.push_back(smooth_series(s));
        for (const auto& s : smoothed) {
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                double sd = s.sd.empty() ? 0.0 : s.sd[i];
                x0 = std::min(x0, s.x[i]);
                x1 = std::max(x1, s.x[i]);
                y0 = std::min(y0, s.mean[i] - sd);
                y1 = std::max(y1, s.mean[i] + sd);
            }
        }
        if (x0 > x1) {
            x0 = 0;
            x1 = 1;
            y0 = 0;
            y1 = 1;
        }
        if (y1 - y0 < 1e-12) {
            y0 -= 0.5;
            y1 += 0.5;
        }
        double pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;

        auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
        auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };

        static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                       "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
        std::string out;
        out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
        out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
               "\" height=\"" + std::to_string(H) + "\" viewBox=\"0 0 " + std::to_string(W) + " " +
               std::to_string(H) + "\">\n";
        out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        out += text(W / 2, 22, title_ + " (smoothing window " + std::to_string(smooth_) + ")", 15, "middle");
        out += text(W / 2, H - 12, x_label_, 12, "middle");
        out += "<g transform=\"rotate(-90 16 " + std::to_string(H / 2) + ")\">" +
               text(16, H / 2, y_label_, 12, "middle") + "</g>\n";

        // axes with a handful of ticks
        out += line(ml, H - mb, W - mr, H - mb) + line(ml, mt, ml, H - mb);
        for (int i = 0; i <= 4; ++i) {
            double xv = x0 + (x1 - x0) * i / 4.0;
            double yv = y0 + (y1 - y0) * i / 4.0;
            out += line(px(xv), H - mb, px(xv), H - mb + 4);
            out += text(px(xv), H - mb + 18, format_num(xv), 10, "middle");
            out += line(ml - 4, py(yv), ml, py(yv));
            out += text(ml - 8, py(yv) + 3, format_num(yv), 10, "end");
        }

        for (std::size_t si = 0; si < smoothed.size(); ++si) {
            const Series& s = smoothed[si];
            const char* color = colors[si % 8];
            if (!s.sd.empty() && s.x.size() > 1) {
                std::string band = "<path d=\"M";
                for (std::size_t i = 0; i < s.x.size(); ++i)
                    band += format_num(px(s.x[i])) + "," + format_num(py(s.mean[i] + s.sd[i])) + " L";
                for (std::size_t i = s.x.size(); i-- > 0;)
                    band += format_num(px(s.x[i])) + "," + format_num(py(s.mean[i] - s.sd[i])) +
                            (i == 0 ? "" : " L");
                band += " Z\" fill=\"";
                band += color;
                band += "\" opacity=\"0.15\" stroke=\"none\"/>\n";
                out += band;
            }
            std::string path = "<polyline fill=\"none\" stroke=\"";
            path += color;
            path += "\" stroke-width=\"1.6\" points=\"";
            for (std::size_t i = 0; i < s.x.size(); ++i)
                path += format_num(px(s.x[i])) + "," + format_num(py(s.mean[i])) + " ";
            path += "\"/>\n";
            out += path;
            // legend entry
            double ly = mt + 16.0 * static_cast<double>(si);
            out += "<rect x=\"" + std::to_string(W - mr - 150) + "\" y=\"" + format_num(ly) +
                   "\" width=\"12\" height=\"4\" fill=\"" + color + "\"/>\n";
            out += text(W - mr - 132, ly + 6, s.label, 11, "start");
        }
        out += "</svg>\n";
        return out;
    }

private:
    Series smooth_series(const Series& s) const {
        if (smooth_ <= 1 || s.x.size() < 2) return s;
        Series out = s;
        for (std::size_t i = 0; i < s.mean.size(); ++i) {
            std::size_t lo = i >= static_cast<std::size_t>(smooth_ - 1) ? i - (smooth_ - 1) : 0;
            double m = 0.0, sd = 0.0;
            long n = 0;
            for (std::size_t j = lo; j <= i; ++j) {
                m += s.mean[j];
                if (!s.sd.empty()) sd += s.sd[j];
                ++n;
            }
            out.mean[i] = m / n;
            if (!s.sd.empty()) out.sd[i] = sd / n;
        }
        return out;
    }

    static std::string format_num(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%g", v);
        return buf;
    }
    static std::string line(double x1, double y1, double x2, double y2) {
        return "<line x1=\"" + format_num(x1) + "\" y1=\"" + format_num(y1) + "\" x2=\"" + format_num(x2) +
               "\" y2=\"" + format_num(y2) + "\" stroke=\"#333\" stroke-width=\"1\"/>\n";
    }
    static std::string text(double x, double y, const std::string& t, int size, const char* anchor) {
        std::string esc;
        for (char c : t) {
            if (c == '&') esc += "&amp;";
            else if (c == '<') esc += "&lt;";
            else if (c == '>') esc += "&gt;";
            else esc += c;
        }
        return "<text x=\"" + format_num(x) + "\" y=\"" + format_num(y) + "\" font-family=\"sans-serif\" font-size=\"" +
               std::to_string(size) + "\" text-anchor=\"" + anchor + "\">" + esc + "</text>\n";
    }

    std::string title_, x_label_, y_label_;
    int smooth_;
    std::vector<Series> series_;
};

}  // namespace flowbench::util
