#include "pci_oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>

using namespace i2p;

namespace test {

namespace {

double lerp_curve(const std::vector<std::pair<double, double>>& pts, double x, bool log_axis) {
    auto tx = [&](double v) { return log_axis ? std::log10(v) : v; };
    if (x <= pts.front().first) return pts.front().second;
    if (x >= pts.back().first) return pts.back().second;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (x <= pts[i].first) {
            const double a = tx(pts[i - 1].first), b = tx(pts[i].first);
            const double t = (tx(x) - a) / (b - a);
            return pts[i - 1].second + t * (pts[i].second - pts[i - 1].second);
        }
    }
    return pts.back().second;
}

std::vector<std::pair<double, double>> pairs(const Curve& c) {
    std::vector<std::pair<double, double>> out;
    for (const auto& p : c) out.emplace_back(p.x, p.y);
    return out;
}

constexpr std::array<DistressType, 5> kTypes{DistressType::Alligator, DistressType::Block, DistressType::Longitudinal,
                                             DistressType::Patch, DistressType::Transverse};

} // namespace

double brute_force_pci(const std::vector<DistressRecord>& records, double area, const DeductCurveSet& curves) {
    std::vector<double> dv;
    for (const auto& r : records) {
        const double density = 100.0 * r.extent / area;
        dv.push_back(lerp_curve(pairs(curves.deduct_curves().at({r.distress_type, r.severity})), density, true));
    }
    // Selection sort, descending; equal values keep input order.
    for (std::size_t i = 0; i < dv.size(); ++i) {
        std::size_t best = i;
        for (std::size_t j = i + 1; j < dv.size(); ++j)
            if (dv[j] > dv[best]) best = j;
        const double v = dv[best];
        dv.erase(dv.begin() + static_cast<std::ptrdiff_t>(best));
        dv.insert(dv.begin() + static_cast<std::ptrdiff_t>(i), v);
    }
    int above = 0;
    for (double d : dv) above += d > 2.0;
    double max_cdv = 0.0;
    if (above == 0) {
        for (double d : dv) max_cdv += d;
    } else {
        const double m = std::min(10.0, 1.0 + 9.0 / 98.0 * (100.0 - dv[0]));
        if (dv.size() > m) {
            const int whole = static_cast<int>(m);
            dv[static_cast<std::size_t>(whole)] *= m - whole;
            dv.resize(static_cast<std::size_t>(whole) + 1);
        }
        for (;;) {
            int q = 0;
            double tdv = 0.0;
            for (double d : dv) {
                q += d > 2.0;
                tdv += d;
            }
            const auto& corr = curves.correction_curves();
            const Curve& c = corr.count(q) ? corr.at(q) : corr.rbegin()->second;
            max_cdv = std::max(max_cdv, lerp_curve(pairs(c), tdv, false));
            if (q <= 1) break;
            int smallest = -1;
            for (int i = 0; i < static_cast<int>(dv.size()); ++i)
                if (dv[static_cast<std::size_t>(i)] > 2.0) smallest = i;
            dv[static_cast<std::size_t>(smallest)] = 2.0;
        }
    }
    return std::clamp(100.0 - max_cdv, 0.0, 100.0);
}

DistressRecord random_record(i2p::Rng& rng, double area) {
    DistressRecord r;
    r.distress_type = kTypes[static_cast<std::size_t>(rng.uniform_int(0, 4))];
    r.severity = kAllSeverities[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    r.extent = area / 100.0 * std::pow(10.0, rng.uniform(-2.0, 2.3));
    return r;
}

AppendCase cap_counterexample() {
    // Patch/high: deduct 80 at 10^(5/3)% and 90 at 100%.
    const DistressRecord eighty{DistressType::Patch, Severity::High, 0.25 * std::pow(10.0, 5.0 / 3.0)};
    return {std::vector<DistressRecord>(3, eighty), {DistressType::Patch, Severity::High, 25.0}};
}

} // namespace test
