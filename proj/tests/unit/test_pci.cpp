#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "image2pci/errors.hpp"
#include "image2pci/pci.hpp"
#include "pci_oracle.hpp"
#include "support.hpp"

using namespace i2p;

namespace {

const DeductCurveSet& synthetic() {
    static const DeductCurveSet c = DeductCurveSet::load(test::fixture("curves_synthetic.json"));
    return c;
}

} // namespace

TEST_CASE("density") {
    CHECK(density({DistressType::Patch, Severity::Low, 2.5}, 25.0) == 10.0);
    CHECK(density({DistressType::Patch, Severity::Low, 0.0001}, 25.0) == doctest::Approx(0.0004).epsilon(1e-12));
    CHECK(density({DistressType::Patch, Severity::Low, 25.0}, 25.0) == 100.0);
    CHECK_THROWS(density({DistressType::Patch, Severity::Low, 1.0}, 0.0));
}

TEST_CASE("deduct_value interpolates in log density and clamps") {
    const auto& c = synthetic();
    CHECK(deduct_value(c, DistressType::Block, Severity::Low, std::sqrt(10.0)) == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(deduct_value(c, DistressType::Block, Severity::Low, 0.5) == 10.0);
    CHECK(deduct_value(c, DistressType::Block, Severity::Low, 50.0) == 40.0);
    CHECK(deduct_value(c, DistressType::Block, Severity::Low, 0.0) == 10.0);
    const DeductCurveSet missing({{{DistressType::Patch, Severity::Low}, {{1, 1}, {10, 5}}}}, {{1, {{0, 0}, {100, 100}}}}, "t");
    CHECK_THROWS_AS(deduct_value(missing, DistressType::Block, Severity::High, 3.0), ConfigError);
}

TEST_CASE("compute_pci hand-stepped examples") {
    const auto& c = synthetic();
    SUBCASE("no records") {
        const auto r = compute_pci({}, 25.0, c);
        CHECK(r.pci == 100.0);
        CHECK(r.iterations.empty());
        CHECK(r.rating == "good");
    }
    // Low curve {(1,10),(10,40)}: density 10^((d-10)/30) gives deduct d.
    auto record_for = [](double deduct) {
        return DistressRecord{DistressType::Longitudinal, Severity::Low, 0.25 * std::pow(10.0, (deduct - 10.0) / 30.0)};
    };
    SUBCASE("single deduct 30") {
        const std::vector<DistressRecord> recs{record_for(30)};
        const auto r = compute_pci(recs, 25.0, c);
        CHECK(r.deducts[0] == doctest::Approx(30.0).epsilon(1e-12));
        REQUIRE(r.iterations.size() == 1);
        CHECK(r.iterations[0].q == 1);
        CHECK(r.max_cdv == doctest::Approx(30.0).epsilon(1e-12));
        CHECK(r.pci == doctest::Approx(70.0).epsilon(1e-12));
    }
    SUBCASE("two deducts 30 and 20") {
        const std::vector<DistressRecord> recs{record_for(20), record_for(30)};
        const auto r = compute_pci(recs, 25.0, c);
        REQUIRE(r.iterations.size() == 2);
        CHECK(r.iterations[0].q == 2);
        CHECK(r.iterations[0].tdv == doctest::Approx(50.0).epsilon(1e-12));
        CHECK(r.iterations[0].cdv == doctest::Approx(35.0).epsilon(1e-12));
        CHECK(r.iterations[1].q == 1);
        CHECK(r.iterations[1].tdv == doctest::Approx(32.0).epsilon(1e-12));
        CHECK(r.iterations[1].cdv == doctest::Approx(32.0).epsilon(1e-12));
        CHECK(r.max_cdv == doctest::Approx(35.0).epsilon(1e-12));
        CHECK(r.pci == doctest::Approx(65.0).epsilon(1e-12));
    }
    SUBCASE("negligible deducts sum without iterating") {
        const DeductCurveSet tiny({{{DistressType::Patch, Severity::Low}, {{1, 0.5}, {10, 1.5}}}},
                                  {{1, {{0, 0}, {100, 100}}}}, "t");
        const std::vector<DistressRecord> recs{{DistressType::Patch, Severity::Low, 0.25},
                                               {DistressType::Patch, Severity::Low, 2.5}};
        const auto r = compute_pci(recs, 25.0, tiny);
        CHECK(r.iterations.empty());
        CHECK(r.max_cdv == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(r.pci == doctest::Approx(98.0).epsilon(1e-12));
    }
}

TEST_CASE("allowable deducts and fractional reduction") {
    CHECK(allowable_deducts(100.0) == 1.0);
    CHECK(allowable_deducts(2.0) == 10.0);
    CHECK(allowable_deducts(0.0) == 10.0);
    CHECK(allowable_deducts(51.0) == doctest::Approx(1.0 + 9.0 / 98.0 * 49.0).epsilon(1e-15));

    // Three high-severity records at 100% density (deduct 90 each) -> m = 1 + 90/98.
    const auto& c = synthetic();
    std::vector<DistressRecord> recs(3, {DistressType::Patch, Severity::High, 25.0});
    const auto r = compute_pci(recs, 25.0, c);
    const double m = 1.0 + 9.0 / 98.0 * 10.0;
    CHECK(r.allowed_deducts == doctest::Approx(m).epsilon(1e-15));
    REQUIRE(r.iterations.front().deducts.size() == 2);
    CHECK(r.iterations.front().deducts[1] == doctest::Approx(90.0 * (m - 1.0)).epsilon(1e-12));
}

TEST_CASE("compute_pci matches the brute-force oracle") {
    const auto& c = synthetic();
    i2p::Rng rng(1234);
    const double area = 25.0;
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<DistressRecord> recs;
        const auto n = rng.uniform_int(0, 4);
        for (int i = 0; i < n; ++i) recs.push_back(test::random_record(rng, area));
        const double expected = test::brute_force_pci(recs, area, c);
        CHECK(std::abs(compute_pci(recs, area, c).pci - expected) <= 1e-9);
    }
}

namespace {

// True when the allowable-deduct cap keeps every deduct of the report.
bool cap_keeps_all(const PciReport& r) {
    return r.iterations.empty() || static_cast<double>(r.deducts.size()) <= r.allowed_deducts;
}

} // namespace

TEST_CASE("PCI bounds and permutation invariance") {
    const auto& c = synthetic();
    i2p::Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<DistressRecord> recs;
        const auto n = rng.uniform_int(0, 8);
        for (int i = 0; i < n; ++i) recs.push_back(test::random_record(rng, 25.0));
        const auto base = compute_pci(recs, 25.0, c);
        CHECK(base.pci >= 0.0);
        CHECK(base.pci <= 100.0);
        CHECK(base.iterations.empty() ==
              std::none_of(base.deducts.begin(), base.deducts.end(), [](double d) { return d > kNegligibleDeduct; }));
        auto shuffled = recs;
        rng.shuffle(shuffled);
        CHECK(compute_pci(shuffled, 25.0, c).pci == doctest::Approx(base.pci).epsilon(1e-12));
    }
}

TEST_CASE("appending or raising severity never increases PCI while the cap drops nothing") {
    const auto& c = synthetic();
    i2p::Rng rng(78);
    int checked_append = 0, checked_raise = 0;
    for (int trial = 0; trial < 3000; ++trial) {
        std::vector<DistressRecord> recs;
        const auto n = rng.uniform_int(0, 6);
        for (int i = 0; i < n; ++i) recs.push_back(test::random_record(rng, 25.0));
        const auto base = compute_pci(recs, 25.0, c);

        auto grown = recs;
        grown.push_back(test::random_record(rng, 25.0));
        const auto after = compute_pci(grown, 25.0, c);
        if (cap_keeps_all(base) && cap_keeps_all(after)) {
            CHECK(after.pci <= base.pci + 1e-9);
            ++checked_append;
        }

        if (recs.empty()) continue;
        auto raised = recs;
        auto& r = raised[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
        if (r.severity == Severity::High) continue;
        r.severity = static_cast<Severity>(static_cast<int>(r.severity) + 1);
        const auto up = compute_pci(raised, 25.0, c);
        if (cap_keeps_all(base) && cap_keeps_all(up)) {
            CHECK(up.pci <= base.pci + 1e-9);
            ++checked_raise;
        }
    }
    CHECK(checked_append > 1500);
    CHECK(checked_raise > 1000);
}

TEST_CASE("the allowable-deduct cap can raise PCI when a larger deduct is appended") {
    const auto& c = synthetic();
    const auto ce = test::cap_counterexample();
    std::vector<DistressRecord> recs = ce.base;
    // m = 1 + 9/98 * 20: {80, 80, 66.94} sums past 200, q=3 saturates at 95.
    const auto before = compute_pci(recs, 25.0, c);
    CHECK(before.max_cdv == doctest::Approx(95.0).epsilon(1e-12));
    CHECK(before.pci == doctest::Approx(5.0).epsilon(1e-12));
    // m = 1 + 9/98 * 10 keeps {90, 73.47}; the q=1 pass gives 92.
    recs.push_back(ce.appended);
    const auto after = compute_pci(recs, 25.0, c);
    CHECK(after.max_cdv == doctest::Approx(92.0).epsilon(1e-12));
    CHECK(after.pci == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("curve set validation") {
    const Curve identity{{0, 0}, {100, 100}};
    const Curve ok{{1, 5}, {10, 20}};
    using K = DeductCurveSet::DeductKey;
    auto make = [&](Curve low) {
        return DeductCurveSet({{K{DistressType::Patch, Severity::Low}, low}}, {{1, identity}}, "t");
    };
    CHECK_NOTHROW(make(ok));
    CHECK_THROWS_AS(make({{1, 5}}), ConfigError);
    CHECK_THROWS_AS(make({{1, 5}, {1, 6}}), ConfigError);
    CHECK_THROWS_AS(make({{1, 5}, {10, 4}}), ConfigError);
    CHECK_THROWS_AS(make({{1, 5}, {10, 120}}), ConfigError);
    CHECK_THROWS_AS(make({{0, 5}, {10, 20}}), ConfigError);
    CHECK_THROWS_AS(DeductCurveSet({{K{DistressType::Patch, Severity::Low}, ok}}, {{2, identity}}, "t"), ConfigError);
    CHECK_THROWS_AS(DeductCurveSet({{K{DistressType::Patch, Severity::Low}, ok}}, {{1, {{0, 0}, {100, 90}}}}, "t"),
                    ConfigError);
    CHECK_THROWS_AS(DeductCurveSet({{K{DistressType::Patch, Severity::Low}, {{1, 10}, {10, 30}}},
                                    {K{DistressType::Patch, Severity::Medium}, {{1, 5}, {10, 40}}}},
                                   {{1, identity}}, "t"),
                    ConfigError);

    const auto& s = synthetic();
    const auto again = DeductCurveSet::from_json(s.to_json());
    CHECK(again.to_json() == s.to_json());
    CHECK(&s.correction_curve(9) == &s.correction_curves().rbegin()->second);
    CHECK_NOTHROW(DeductCurveSet::load(test::source_dir() / "data" / "curves_d6433_approx.json"));
}

TEST_CASE("image labeling") {
    const auto& c = synthetic();
    ImageAnnotation img{"a", 100, 100, {5000.0, 5000.0}, {}, std::nullopt};
    CHECK(image_pci(img, c).pci == 100.0);

    // Full-footprint high-severity patch: density 100%, deduct 90 under the synthetic curves.
    img.annotations.push_back({{{0, 0}, {100, 0}, {100, 100}, {0, 100}}, DistressType::Patch, Severity::High});
    const auto records = distress_records(img);
    REQUIRE(records.size() == 1);
    CHECK(records[0].extent == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(image_pci(img, c).pci == doctest::Approx(100.0 - deduct_value(c, DistressType::Patch, Severity::High, 100.0)));

    // A crack polygon 50 px long at 50 mm/px -> 2.5 m.
    ImageAnnotation crack{"b", 100, 100, {5000.0, 5000.0}, {}, std::nullopt};
    crack.annotations.push_back({{{10, 10}, {12, 10}, {12, 50}, {10, 50}}, DistressType::Longitudinal, Severity::Low});
    crack.annotations.push_back({{{60, 60}, {70, 60}, {70, 70}}, DistressType::Manhole, std::nullopt});
    const auto cr = distress_records(crack);
    REQUIRE(cr.size() == 1);
    CHECK(cr[0].extent == doctest::Approx(std::hypot(2.0, 40.0) * 50.0 / 1000.0).epsilon(1e-12));

    crack.annotations[0].severity.reset();
    CHECK_THROWS_AS(distress_records(crack), DataError);

    const auto labeled = label_dataset({img}, c);
    CHECK(labeled[0].pci_label == image_pci(img, c).pci);
}
