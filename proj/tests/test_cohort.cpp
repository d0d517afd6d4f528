#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include <fedseg/cohort.hpp>
#include <fedseg/rng.hpp>

using namespace fedseg;

namespace {

std::vector<subject> small_cohort(int n, std::uint64_t seed) {
    return generate_cohort(n, {generation_profile{}}, seed, 4, 20, 20);
}

bool same_sample(const seg_sample& a, const seg_sample& b) {
    return a.h == b.h && a.w == b.w && a.image == b.image && a.mask == b.mask;
}

} // namespace

TEST_CASE("cohort generation is deterministic per seed") {
    auto a = small_cohort(6, 42);
    auto b = small_cohort(6, 42);
    auto c = small_cohort(6, 43);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].subject_id == b[i].subject_id);
        REQUIRE(a[i].slices.size() == 4);
        for (std::size_t s = 0; s < 4; ++s) CHECK(same_sample(a[i].slices[s], b[i].slices[s]));
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size() && !any_diff; ++i)
        for (std::size_t s = 0; s < 4 && !any_diff; ++s)
            any_diff = !same_sample(a[i].slices[s], c[i].slices[s]);
    CHECK(any_diff);
}

TEST_CASE("generated slices are well-formed") {
    auto cohort = small_cohort(8, 7);
    std::size_t lesion_pixels = 0;
    for (const auto& subj : cohort)
        for (const auto& sl : subj.slices) {
            REQUIRE(sl.image.size() == 20u * 20u);
            REQUIRE(sl.mask.size() == sl.image.size());
            for (float v : sl.image) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
            for (auto m : sl.mask) CHECK((m == 0 || m == 1));
            for (auto m : sl.mask) lesion_pixels += m;
        }
    CHECK(lesion_pixels > 0);
}

TEST_CASE("lesions are brighter than their surroundings on average") {
    auto cohort = generate_cohort(10, {generation_profile{}}, 11, 4, 32, 32);
    double in_sum = 0, out_sum = 0;
    std::size_t in_n = 0, out_n = 0;
    for (const auto& subj : cohort)
        for (const auto& sl : subj.slices)
            for (std::size_t i = 0; i < sl.image.size(); ++i) {
                if (sl.mask[i]) {
                    in_sum += sl.image[i];
                    ++in_n;
                } else {
                    out_sum += sl.image[i];
                    ++out_n;
                }
            }
    REQUIRE(in_n > 0);
    CHECK(in_sum / in_n > out_sum / out_n + 0.15);
}

TEST_CASE("holdout split is disjoint, exhaustive, and deterministic") {
    auto cohort = small_cohort(20, 3);
    auto [train, hold] = split_holdout(cohort, 6, 99);
    CHECK(train.size() == 14);
    CHECK(hold.size() == 6);
    std::set<int> ids;
    for (const auto& s : train) ids.insert(s.subject_id);
    for (const auto& s : hold) ids.insert(s.subject_id);
    CHECK(ids.size() == 20);

    auto [train2, hold2] = split_holdout(cohort, 6, 99);
    for (std::size_t i = 0; i < hold.size(); ++i)
        CHECK(hold[i].subject_id == hold2[i].subject_id);

    CHECK_THROWS_AS(split_holdout(cohort, 25, 1), config_error);
    CHECK_THROWS_AS(split_holdout(cohort, -1, 1), config_error);
}

TEST_CASE("scheme-based holdout defaults") {
    partition_scheme real;
    real.kind = partition_kind::real_profile;
    CHECK(real.effective_holdout() == 45);
    partition_scheme flat;
    flat.kind = partition_kind::simulated_balanced;
    CHECK(flat.effective_holdout() == 32);
    flat.holdout_count = 5;
    CHECK(flat.effective_holdout() == 5);

    auto cohort = small_cohort(12, 5);
    auto [train, hold] = split_holdout(cohort, flat, 1);
    CHECK(hold.size() == 5);
    CHECK(train.size() == 7);
}

TEST_CASE("fixed-profile partition reproduces the published shard sizes") {
    auto cohort = generate_cohort(210, {generation_profile{}}, 1, 2, 20, 20);
    partition_scheme scheme;
    scheme.kind = partition_kind::real_profile;
    auto [train, hold] = split_holdout(cohort, scheme, 1);
    REQUIRE(train.size() == 165);
    REQUIRE(hold.size() == 45);

    auto shards = partition(train, scheme, 1);
    const std::vector<int> expect = {70, 27, 17, 12, 11, 9, 6, 6, 4, 3};
    REQUIRE(shards.size() == expect.size());
    for (std::size_t i = 0; i < shards.size(); ++i) {
        CHECK(shards[i].institution_id == static_cast<int>(i));
        const int total = static_cast<int>(shards[i].train_subjects.size() +
                                           shards[i].val_subjects.size());
        CHECK(total == expect[i]);
        // local validation reserves ceil(12.5%), at least one subject
        const int want_val = std::max(1, (expect[i] + 7) / 8);
        CHECK(static_cast<int>(shards[i].val_subjects.size()) == want_val);
    }

    // any other training count is refused
    auto short_train = std::vector<subject>(train.begin(), train.end() - 1);
    CHECK_THROWS_AS(partition(short_train, scheme, 1), config_error);
}

TEST_CASE("balanced partition sizes differ by at most one and hit the published means") {
    auto cohort = generate_cohort(210, {generation_profile{}}, 2, 2, 20, 20);
    partition_scheme scheme;
    scheme.kind = partition_kind::simulated_balanced;
    auto [train, hold] = split_holdout(cohort, scheme, 2);
    REQUIRE(train.size() == 178);

    const std::map<int, double> mean_for = {
        {4, 44.5}, {8, 22.25}, {16, 11.125}, {32, 5.5625}};
    for (const auto& [k, want_mean] : mean_for) {
        scheme.institutions = k;
        auto shards = partition(train, scheme, 2);
        REQUIRE(static_cast<int>(shards.size()) == k);
        int lo = 1 << 30, hi = 0, total = 0;
        for (const auto& sh : shards) {
            const int n =
                static_cast<int>(sh.train_subjects.size() + sh.val_subjects.size());
            lo = std::min(lo, n);
            hi = std::max(hi, n);
            total += n;
        }
        CHECK(hi - lo <= 1);
        CHECK(static_cast<double>(total) / k == want_mean);
    }
}

TEST_CASE("partitions are disjoint and exhaustive") {
    auto cohort = small_cohort(30, 9);
    partition_scheme scheme;
    scheme.kind = partition_kind::simulated_balanced;
    scheme.institutions = 7;
    auto [train, hold] = split_holdout(cohort, 4, 9);
    auto shards = partition(train, scheme, 9);

    std::set<int> seen;
    std::size_t total = 0;
    for (const auto& sh : shards) {
        for (const auto& s : sh.train_subjects) CHECK(seen.insert(s.subject_id).second);
        for (const auto& s : sh.val_subjects) CHECK(seen.insert(s.subject_id).second);
        total += sh.train_subjects.size() + sh.val_subjects.size();
    }
    CHECK(total == train.size());
}

TEST_CASE("profile-affinity placement keeps shards on their own distribution") {
    auto profiles = make_heterogeneous_profiles(generation_profile{}, 4, 1.0);
    auto cohort = generate_cohort(40, profiles, 21, 2, 32, 32);
    partition_scheme scheme;
    scheme.kind = partition_kind::simulated_balanced;
    scheme.institutions = 4;
    scheme.by_profile = true;
    auto [train, hold] = split_holdout(cohort, 4, 21);
    auto shards = partition(train, scheme, 21);

    for (const auto& sh : shards) {
        int own = 0, total = 0;
        auto count = [&](const std::vector<subject>& v) {
            for (const auto& s : v) {
                own += s.profile_id == sh.institution_id ? 1 : 0;
                ++total;
            }
        };
        count(sh.train_subjects);
        count(sh.val_subjects);
        CHECK(own * 2 > total); // majority from the matching profile
    }
}

TEST_CASE("heterogeneity spread follows the symmetric ramp") {
    generation_profile base;
    base.seed = 77;
    auto ps = make_heterogeneous_profiles(base, 3, 1.0);
    REQUIRE(ps.size() == 3);
    CHECK(ps[0].intensity_bias == Catch::Approx(-0.1).margin(1e-12));
    CHECK(ps[1].intensity_bias == Catch::Approx(0.0).margin(1e-12));
    CHECK(ps[2].intensity_bias == Catch::Approx(0.1).margin(1e-12));
    CHECK(ps[0].lesion_radius_min == Catch::Approx(1.5).margin(1e-12));
    CHECK(ps[0].lesion_radius_max == Catch::Approx(6.5).margin(1e-12));
    CHECK(ps[2].lesion_radius_min == Catch::Approx(4.5).margin(1e-12));
    CHECK(ps[2].lesion_radius_max == Catch::Approx(9.5).margin(1e-12));
    CHECK(ps[0].seed != ps[1].seed);
    CHECK(ps[1].seed != ps[2].seed);

    // zero heterogeneity only reseeds
    auto flat = make_heterogeneous_profiles(base, 3, 0.0);
    for (const auto& p : flat) {
        CHECK(p.intensity_bias == base.intensity_bias);
        CHECK(p.lesion_radius_min == base.lesion_radius_min);
        CHECK(p.lesion_radius_max == base.lesion_radius_max);
    }

    // radius floor clamps and keeps min < max
    generation_profile tight;
    tight.lesion_radius_min = 1.2;
    tight.lesion_radius_max = 2.0;
    auto clamped = make_heterogeneous_profiles(tight, 2, 1.0);
    CHECK(clamped[0].lesion_radius_min == 1.0);
    CHECK(clamped[0].lesion_radius_max >= clamped[0].lesion_radius_min + 0.5);

    auto one = make_heterogeneous_profiles(base, 1, 1.0);
    CHECK(one[0].intensity_bias == base.intensity_bias);

    CHECK_THROWS_AS(make_heterogeneous_profiles(base, 0, 0.5), config_error);
    CHECK_THROWS_AS(make_heterogeneous_profiles(base, 2, 1.5), config_error);
}

TEST_CASE("cohort files round-trip exactly") {
    auto cohort = small_cohort(5, 33);
    cohort_file cf;
    cf.height = 20;
    cf.width = 20;
    cf.subjects = cohort;
    cf.val_flag = {0, 1, 0, 0, 1};

    const std::string path = "roundtrip.coht";
    write_cohort_file(path, cf);
    auto rd = read_cohort_file(path);
    std::remove(path.c_str());

    CHECK(rd.height == 20);
    CHECK(rd.width == 20);
    REQUIRE(rd.subjects.size() == 5);
    CHECK(rd.val_flag == cf.val_flag);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(rd.subjects[i].subject_id == cohort[i].subject_id);
        REQUIRE(rd.subjects[i].slices.size() == cohort[i].slices.size());
        for (std::size_t s = 0; s < cohort[i].slices.size(); ++s)
            CHECK(same_sample(rd.subjects[i].slices[s], cohort[i].slices[s]));
    }

    auto shard = shard_from_file(rd, 3);
    CHECK(shard.institution_id == 3);
    CHECK(shard.train_subjects.size() == 3);
    CHECK(shard.val_subjects.size() == 2);
}

TEST_CASE("cohort files reject dim mismatches and truncation") {
    auto cohort = small_cohort(3, 9);
    cohort_file cf;
    cf.height = 16; // slices are 20x20
    cf.width = 16;
    cf.subjects = cohort;
    cf.val_flag = {0, 0, 1};
    CHECK_THROWS_AS(write_cohort_file("mismatch.coht", cf), config_error);
    std::remove("mismatch.coht");

    cf.height = 20;
    cf.width = 20;
    const std::string path = "trunc.coht";
    write_cohort_file(path, cf);
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    in.close();
    const auto whole = buf.str();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(whole.data(), static_cast<std::streamsize>(whole.size() / 2));
    out.close();
    CHECK_THROWS_AS(read_cohort_file(path), config_error);
    std::remove(path.c_str());
}

TEST_CASE("slice flattening matches subject totals") {
    auto cohort = small_cohort(4, 13);
    institution_shard sh;
    sh.institution_id = 0;
    sh.train_subjects = {cohort[0], cohort[1], cohort[2]};
    sh.val_subjects = {cohort[3]};
    CHECK(sh.train_slice_count() == 12);
    CHECK(sh.val_slice_count() == 4);
    CHECK(sh.train_slices().size() == 12);
    CHECK(sh.val_slices().size() == 4);
}
