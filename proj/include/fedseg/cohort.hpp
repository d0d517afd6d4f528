#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "fedseg/errors.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

// Axis-aligned ellipse in pixel coordinates (generation metadata).
struct ellipse_param {
    double cx = 0, cy = 0, a = 1, b = 1;

    bool contains(double x, double y) const {
        const double dx = (x - cx) / a, dy = (y - cy) / b;
        return dx * dx + dy * dy <= 1.0;
    }
};

// One 2D grayscale slice plus its binary ground-truth mask.
struct seg_sample {
    int h = 0, w = 0;
    std::vector<float> image;       // intensities in [0,1]
    std::vector<std::uint8_t> mask; // 0/1
    std::vector<ellipse_param> lesions; // how the mask was made; not serialized
};

struct subject {
    int subject_id = 0;
    int profile_id = 0; // which generation profile produced it
    std::vector<seg_sample> slices;
};

// Controls the synthetic distribution one simulated institution draws from.
struct generation_profile {
    double intensity_bias = 0.0;
    int lesion_count_min = 1;
    int lesion_count_max = 3;
    double lesion_radius_min = 3.0;
    double lesion_radius_max = 8.0;
    double noise_sigma = 0.08;
    std::uint64_t seed = 0;
    double weight = 1.0; // share of subjects generated from this profile
};

enum class partition_kind { data_sharing, simulated_balanced, real_profile };

inline constexpr std::array<int, 10> real_profile_counts = {70, 27, 17, 12,
                                                            11, 9, 6, 6, 4, 3};
inline constexpr int real_profile_total = 165;

struct partition_scheme {
    partition_kind kind = partition_kind::data_sharing;
    int institutions = 1;   // simulated_balanced only
    int holdout_count = -1; // -1 = default for the kind (32, or 45 for real)
    bool by_profile = false; // align shards with generation profiles (non-IID)

    int effective_holdout() const {
        if (holdout_count >= 0) return holdout_count;
        return kind == partition_kind::real_profile ? 45 : 32;
    }

    int institution_count() const {
        switch (kind) {
            case partition_kind::data_sharing: return 1;
            case partition_kind::simulated_balanced: return institutions;
            case partition_kind::real_profile:
                return static_cast<int>(real_profile_counts.size());
        }
        return 1;
    }
};

// A disjoint subject-level subset of the cohort owned by one institution,
// with its own local train/validation split.
struct institution_shard {
    int institution_id = 0;
    std::vector<subject> train_subjects;
    std::vector<subject> val_subjects;

    std::vector<const seg_sample*> train_slices() const { return flatten(train_subjects); }
    std::vector<const seg_sample*> val_slices() const { return flatten(val_subjects); }

    std::size_t train_slice_count() const { return count(train_subjects); }
    std::size_t val_slice_count() const { return count(val_subjects); }

    static std::vector<const seg_sample*> flatten(const std::vector<subject>& subjects) {
        std::vector<const seg_sample*> out;
        for (const auto& s : subjects)
            for (const auto& sl : s.slices) out.push_back(&sl);
        return out;
    }

private:
    static std::size_t count(const std::vector<subject>& subjects) {
        std::size_t n = 0;
        for (const auto& s : subjects) n += s.slices.size();
        return n;
    }
};

namespace detail {

// Bilinearly interpolated coarse noise grid: smooth per-slice background
// variation, cell size 8 px.
inline void add_smooth_noise(std::vector<float>& img, int h, int w, double sigma,
                             rng_stream& rng) {
    const int cell = 8;
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
    for (auto& g : grid) g = rng.normal(0.0, sigma);
    for (int y = 0; y < h; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(fy);
        const double ty = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(fx);
            const double tx = fx - x0;
            const double v00 = grid[static_cast<std::size_t>(y0) * gw + x0];
            const double v01 = grid[static_cast<std::size_t>(y0) * gw + x0 + 1];
            const double v10 = grid[static_cast<std::size_t>(y0 + 1) * gw + x0];
            const double v11 = grid[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
            const double v = (1 - ty) * ((1 - tx) * v00 + tx * v01) +
                             ty * ((1 - tx) * v10 + tx * v11);
            img[static_cast<std::size_t>(y) * w + x] += static_cast<float>(v);
        }
    }
}

} // namespace detail

// Rasterizes an ellipse into a mask, scanning only its bounding box.
inline void rasterize_ellipse(std::vector<std::uint8_t>& mask, int h, int w,
                              const ellipse_param& e) {
    const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.b)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(e.cy + e.b)));
    const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.a)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(e.cx + e.a)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (e.contains(x, y)) mask[static_cast<std::size_t>(y) * w + x] = 1;
}

inline seg_sample generate_slice(int h, int w, const generation_profile& prof,
                                 rng_stream& rng) {
    seg_sample s;
    s.h = h;
    s.w = w;
    s.image.assign(static_cast<std::size_t>(h) * w,
                   static_cast<float>(0.30 + prof.intensity_bias));
    s.mask.assign(static_cast<std::size_t>(h) * w, 0);

    if (prof.noise_sigma > 0) {
        detail::add_smooth_noise(s.image, h, w, prof.noise_sigma, rng);
        for (auto& v : s.image)
            v += static_cast<float>(rng.normal(0.0, prof.noise_sigma * 0.5));
    }

    const int span = prof.lesion_count_max - prof.lesion_count_min;
    const int count = prof.lesion_count_min +
                      (span > 0 ? static_cast<int>(rng.uniform_int(span + 1)) : 0);
    for (int i = 0; i < count; ++i) {
        ellipse_param e;
        e.a = rng.uniform(prof.lesion_radius_min, prof.lesion_radius_max);
        e.b = rng.uniform(prof.lesion_radius_min, prof.lesion_radius_max);
        e.cx = rng.uniform(e.a, w - 1 - e.a);
        e.cy = rng.uniform(e.b, h - 1 - e.b);
        const double brightness = rng.uniform(0.35, 0.55);
        rasterize_ellipse(s.mask, h, w, e);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (e.contains(x, y))
                    s.image[static_cast<std::size_t>(y) * w + x] +=
                        static_cast<float>(brightness);
        s.lesions.push_back(e);
    }
    for (auto& v : s.image) v = std::clamp(v, 0.0f, 1.0f);
    return s;
}

namespace detail {

inline void validate_profile(const generation_profile& p, int h, int w) {
    if (p.lesion_radius_min <= 0 || p.lesion_radius_max < p.lesion_radius_min)
        throw config_error("generation profile: degenerate lesion radius range");
    if (2 * p.lesion_radius_max >= std::min(h, w))
        throw config_error("generation profile: lesion radius does not fit the image");
    if (p.noise_sigma < 0) throw config_error("generation profile: negative noise sigma");
    if (p.lesion_count_min < 0 || p.lesion_count_max < p.lesion_count_min)
        throw config_error("generation profile: bad lesion count range");
}

// Largest-remainder apportionment of `total` across profile weights.
inline std::vector<int> apportion(const std::vector<double>& weights, int total) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<int> counts(weights.size(), 0);
    std::vector<std::pair<double, std::size_t>> rema;
    int assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = total * weights[i] / wsum;
        counts[i] = static_cast<int>(std::floor(exact));
        assigned += counts[i];
        rema.emplace_back(exact - counts[i], i);
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int i = 0; assigned < total; ++assigned, ++i) counts[rema[i % rema.size()].second]++;
    return counts;
}

} // namespace detail

// Deterministic synthetic cohort. Subjects are apportioned across profiles by
// weight; each subject draws from its own derived stream, so cohorts are
// reproducible bit-for-bit regardless of generation order.
inline std::vector<subject> generate_cohort(int total_subjects,
                                            const std::vector<generation_profile>& profiles,
                                            std::uint64_t master_seed,
                                            int slices_per_subject = 8, int h = 32,
                                            int w = 32) {
    if (total_subjects < 1) throw config_error("generate_cohort: need at least 1 subject");
    if (profiles.empty()) throw config_error("generate_cohort: no generation profiles");
    for (const auto& p : profiles) detail::validate_profile(p, h, w);

    std::vector<double> weights;
    for (const auto& p : profiles) weights.push_back(p.weight);
    const auto counts = detail::apportion(weights, total_subjects);

    std::vector<subject> cohort;
    cohort.reserve(total_subjects);
    int sid = 0;
    for (std::size_t pi = 0; pi < profiles.size(); ++pi) {
        for (int k = 0; k < counts[pi]; ++k, ++sid) {
            subject subj;
            subj.subject_id = sid;
            subj.profile_id = static_cast<int>(pi);
            rng_stream rng(derive_seed(master_seed ^ profiles[pi].seed, "subject", sid));
            for (int s = 0; s < slices_per_subject; ++s)
                subj.slices.push_back(generate_slice(h, w, profiles[pi], rng));
            cohort.push_back(std::move(subj));
        }
    }
    return cohort;
}

// Uniform random subject-level holdout split: {training, holdout}.
inline std::pair<std::vector<subject>, std::vector<subject>>
split_holdout(const std::vector<subject>& cohort, int holdout_count, std::uint64_t seed) {
    if (holdout_count < 0) throw config_error("split_holdout: negative holdout count");
    if (holdout_count >= static_cast<int>(cohort.size()))
        throw config_error("split_holdout: holdout " + std::to_string(holdout_count) +
                           " >= cohort size " + std::to_string(cohort.size()));
    std::vector<std::size_t> idx(cohort.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng_stream rng(derive_seed(seed, "holdout"));
    rng.shuffle(idx.begin(), idx.end());
    std::pair<std::vector<subject>, std::vector<subject>> out;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (i < static_cast<std::size_t>(holdout_count))
            out.second.push_back(cohort[idx[i]]);
        else
            out.first.push_back(cohort[idx[i]]);
    }
    return out;
}

inline std::pair<std::vector<subject>, std::vector<subject>>
split_holdout(const std::vector<subject>& cohort, const partition_scheme& scheme,
              std::uint64_t seed) {
    return split_holdout(cohort, scheme.effective_holdout(), seed);
}

// Spreads one base profile into k institution-specific variants whose
// intensity bias and lesion size range shift linearly across institutions.
// `heterogeneity` 0 keeps every variant equal to the base; 1 spans bias
// offsets of +-0.1 and radius shifts of +-1.5 pixels.
inline std::vector<generation_profile> make_heterogeneous_profiles(
    const generation_profile& base, int k, double heterogeneity) {
    if (k < 1) throw config_error("make_heterogeneous_profiles: k must be >= 1");
    if (heterogeneity < 0 || heterogeneity > 1)
        throw config_error("make_heterogeneous_profiles: heterogeneity must be in [0,1]");
    std::vector<generation_profile> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
        const double f =
            k == 1 ? 0.0 : heterogeneity * (2.0 * i / (k - 1) - 1.0);
        generation_profile p = base;
        p.intensity_bias = base.intensity_bias + 0.1 * f;
        p.lesion_radius_min = std::max(1.0, base.lesion_radius_min + 1.5 * f);
        p.lesion_radius_max = std::max(p.lesion_radius_min + 0.5,
                                       base.lesion_radius_max + 1.5 * f);
        p.seed = derive_seed(base.seed, "hetero", static_cast<std::uint64_t>(i));
        p.weight = 1.0;
        out.push_back(p);
    }
    return out;
}

namespace detail {

inline std::vector<int> shard_sizes(const partition_scheme& scheme, int n_subjects) {
    switch (scheme.kind) {
        case partition_kind::data_sharing:
            return {n_subjects};
        case partition_kind::simulated_balanced: {
            const int k = scheme.institutions;
            if (k < 1) throw config_error("partition: institution count must be >= 1");
            if (k > n_subjects)
                throw config_error("partition: " + std::to_string(k) +
                                   " institutions but only " + std::to_string(n_subjects) +
                                   " subjects");
            std::vector<int> sizes(k, n_subjects / k);
            for (int i = 0; i < n_subjects % k; ++i) sizes[i]++; // remainder to low indices
            return sizes;
        }
        case partition_kind::real_profile: {
            if (n_subjects != real_profile_total)
                throw config_error("partition: real_profile needs exactly " +
                                   std::to_string(real_profile_total) +
                                   " training subjects, got " + std::to_string(n_subjects));
            return std::vector<int>(real_profile_counts.begin(), real_profile_counts.end());
        }
    }
    throw config_error("partition: unknown scheme kind");
}

} // namespace detail

// Splits training subjects into institutional shards. Balanced shards differ
// by at most one subject; real_profile reproduces its fixed counts exactly.
// With by_profile set, institution i is filled from subjects generated by
// profile i first (the non-IID mode), then topped up from the leftover pool.
// Each shard reserves ceil(12.5%) of its subjects (at least one) as its local
// validation subset.
inline std::vector<institution_shard> partition(const std::vector<subject>& training,
                                                const partition_scheme& scheme,
                                                std::uint64_t seed) {
    const auto sizes = detail::shard_sizes(scheme, static_cast<int>(training.size()));
    const int k = static_cast<int>(sizes.size());

    std::vector<std::size_t> order(training.size());
    std::iota(order.begin(), order.end(), 0);
    rng_stream rng(derive_seed(seed, "partition"));
    rng.shuffle(order.begin(), order.end());

    std::vector<std::vector<std::size_t>> assigned(k);
    if (scheme.by_profile) {
        std::vector<char> taken(training.size(), 0);
        for (int inst = 0; inst < k; ++inst) {
            for (std::size_t oi : order) {
                if (static_cast<int>(assigned[inst].size()) >= sizes[inst]) break;
                if (!taken[oi] && training[oi].profile_id == inst) {
                    assigned[inst].push_back(oi);
                    taken[oi] = 1;
                }
            }
        }
        std::size_t cursor = 0;
        for (int inst = 0; inst < k; ++inst) {
            while (static_cast<int>(assigned[inst].size()) < sizes[inst]) {
                while (taken[order[cursor]]) ++cursor;
                assigned[inst].push_back(order[cursor]);
                taken[order[cursor]] = 1;
            }
        }
    } else {
        std::size_t cursor = 0;
        for (int inst = 0; inst < k; ++inst)
            for (int j = 0; j < sizes[inst]; ++j) assigned[inst].push_back(order[cursor++]);
    }

    std::vector<institution_shard> shards(k);
    for (int inst = 0; inst < k; ++inst) {
        shards[inst].institution_id = inst;
        const int n = static_cast<int>(assigned[inst].size());
        const int val_n = n > 0 ? std::max(1, static_cast<int>(std::ceil(n * 0.125))) : 0;
        for (int j = 0; j < n; ++j) {
            const subject& s = training[assigned[inst][j]];
            if (j < n - val_n)
                shards[inst].train_subjects.push_back(s);
            else
                shards[inst].val_subjects.push_back(s);
        }
    }
    return shards;
}

// ---------------------------------------------------------------------------
// Cohort file format (little-endian throughout):
//   magic "COHT" | version u32 | subject_count u32 | height u32 | width u32
//   per subject: subject_id u32 | profile_id u32 | flags u8 (bit0: local val)
//                | slice_count u32 | slices (image f32*h*w, mask u8*h*w)
// ---------------------------------------------------------------------------

struct cohort_file {
    int height = 0, width = 0;
    std::vector<subject> subjects;
    std::vector<std::uint8_t> val_flag; // parallel to subjects
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4] = {};
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

inline float get_f32(std::istream& is) {
    const std::uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

} // namespace detail

inline void write_cohort_file(const std::string& path, const cohort_file& cf) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw config_error("cannot open " + path + " for writing");
    os.write("COHT", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(cf.subjects.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(cf.height));
    detail::put_u32(os, static_cast<std::uint32_t>(cf.width));
    const std::size_t hw = static_cast<std::size_t>(cf.height) * cf.width;
    for (std::size_t i = 0; i < cf.subjects.size(); ++i) {
        const subject& s = cf.subjects[i];
        for (const auto& sl : s.slices)
            if (sl.h != cf.height || sl.w != cf.width || sl.image.size() != hw ||
                sl.mask.size() != hw)
                throw config_error(path + ": slice dims do not match the declared cohort dims");
        detail::put_u32(os, static_cast<std::uint32_t>(s.subject_id));
        detail::put_u32(os, static_cast<std::uint32_t>(s.profile_id));
        const char flags = static_cast<char>(i < cf.val_flag.size() ? cf.val_flag[i] : 0);
        os.write(&flags, 1);
        detail::put_u32(os, static_cast<std::uint32_t>(s.slices.size()));
        for (const auto& sl : s.slices) {
            for (float v : sl.image) detail::put_f32(os, v);
            os.write(reinterpret_cast<const char*>(sl.mask.data()),
                     static_cast<std::streamsize>(sl.mask.size()));
        }
    }
    if (!os) throw config_error("write failed for " + path);
}

inline cohort_file read_cohort_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw config_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "COHT", 4) != 0)
        throw config_error(path + ": not a cohort file (bad magic)");
    const std::uint32_t version = detail::get_u32(is);
    if (version != 1)
        throw config_error(path + ": unsupported cohort version " + std::to_string(version));
    cohort_file cf;
    const std::uint32_t n = detail::get_u32(is);
    cf.height = static_cast<int>(detail::get_u32(is));
    cf.width = static_cast<int>(detail::get_u32(is));
    if (cf.height <= 0 || cf.width <= 0)
        throw config_error(path + ": bad image dims in header");
    const std::size_t hw = static_cast<std::size_t>(cf.height) * cf.width;
    if (hw > (std::size_t{1} << 26))
        throw config_error(path + ": image dims in header exceed the sanity cap");
    for (std::uint32_t i = 0; i < n; ++i) {
        subject s;
        s.subject_id = static_cast<int>(detail::get_u32(is));
        s.profile_id = static_cast<int>(detail::get_u32(is));
        char flags = 0;
        is.read(&flags, 1);
        const std::uint32_t slices = detail::get_u32(is);
        for (std::uint32_t j = 0; j < slices; ++j) {
            seg_sample sl;
            sl.h = cf.height;
            sl.w = cf.width;
            sl.image.resize(hw);
            for (auto& v : sl.image) v = detail::get_f32(is);
            sl.mask.resize(hw);
            is.read(reinterpret_cast<char*>(sl.mask.data()),
                    static_cast<std::streamsize>(hw));
            if (!is) throw config_error(path + ": truncated cohort file");
            s.slices.push_back(std::move(sl));
        }
        if (!is) throw config_error(path + ": truncated cohort file");
        cf.subjects.push_back(std::move(s));
        cf.val_flag.push_back(static_cast<std::uint8_t>(flags));
    }
    return cf;
}

// Reassembles an institution shard from an exported shard file.
inline institution_shard shard_from_file(const cohort_file& cf, int institution_id) {
    institution_shard sh;
    sh.institution_id = institution_id;
    for (std::size_t i = 0; i < cf.subjects.size(); ++i) {
        if (cf.val_flag[i] & 1)
            sh.val_subjects.push_back(cf.subjects[i]);
        else
            sh.train_subjects.push_back(cf.subjects[i]);
    }
    return sh;
}

} // namespace fedseg
