#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mixedsim/rng.hpp"

namespace mixedsim {

struct Dataset {
    int height = 16;
    int width = 16;
    int channels = 1;
    int classes = 10;
    std::vector<double> images;  // n * height * width * channels, values in [0, 1]
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_dim() const {
        return static_cast<std::size_t>(height) * width * channels;
    }
    const double* sample(std::size_t i) const { return images.data() + i * sample_dim(); }
};

// Synthetic 10-class image set: each class is a fixed constellation of
// Gaussian blobs; samples jitter the centers and amplitudes and add
// pixel noise. Classes are separable by construction.
inline Dataset make_blob_dataset(std::size_t n, std::uint64_t seed, std::uint64_t split_tag,
                                 int height = 16, int width = 16, int classes = 10) {
    if (n == 0) throw std::invalid_argument("dataset must be nonempty");
    Dataset ds;
    ds.height = height;
    ds.width = width;
    ds.classes = classes;
    ds.images.resize(n * ds.sample_dim());
    ds.labels.resize(n);

    constexpr int kBlobs = 3;
    CounterRng proto(seed, rng_stream::kDataset);
    // class prototypes are shared across splits (same seed, no split tag)
    std::vector<double> pcx(classes * kBlobs), pcy(classes * kBlobs), psg(classes * kBlobs);
    for (int c = 0; c < classes; ++c) {
        for (int b = 0; b < kBlobs; ++b) {
            const std::uint64_t k = static_cast<std::uint64_t>(c) * kBlobs + b;
            pcx[k] = 2.0 + proto.uniform(3 * k + 0) * (height - 4);
            pcy[k] = 2.0 + proto.uniform(3 * k + 1) * (width - 4);
            psg[k] = 1.2 + 1.3 * proto.uniform(3 * k + 2);
        }
    }

    CounterRng rng(seed ^ CounterRng::mix(split_tag), rng_stream::kDataset + 1);
    std::uint64_t ctr = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % classes);
        ds.labels[i] = label;
        double* img = ds.images.data() + i * ds.sample_dim();
        double cx[kBlobs], cy[kBlobs], amp[kBlobs];
        for (int b = 0; b < kBlobs; ++b) {
            const std::uint64_t k = static_cast<std::uint64_t>(label) * kBlobs + b;
            cx[b] = pcx[k] + rng.normal(ctr++, 0.0, 1.8);
            cy[b] = pcy[k] + rng.normal(ctr++, 0.0, 1.8);
            amp[b] = 0.45 + 0.75 * rng.uniform(ctr++);
        }
        for (int r = 0; r < height; ++r) {
            for (int c2 = 0; c2 < width; ++c2) {
                double v = 0.0;
                for (int b = 0; b < kBlobs; ++b) {
                    const std::uint64_t k = static_cast<std::uint64_t>(label) * kBlobs + b;
                    const double dx = r - cx[b], dy = c2 - cy[b];
                    v += amp[b] * std::exp(-(dx * dx + dy * dy) / (2.0 * psg[k] * psg[k]));
                }
                v += rng.normal(ctr++, 0.0, 0.12);
                img[r * width + c2] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return ds;
}

struct DatasetSplits {
    Dataset train, val, test;
};

inline DatasetSplits make_blob_splits(std::uint64_t seed, std::size_t n_train = 2000,
                                      std::size_t n_val = 500, std::size_t n_test = 500) {
    DatasetSplits s;
    s.train = make_blob_dataset(n_train, seed, 1);
    s.val = make_blob_dataset(n_val, seed, 2);
    s.test = make_blob_dataset(n_test, seed, 3);
    return s;
}

}  // namespace mixedsim
