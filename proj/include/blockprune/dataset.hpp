#pragma once

// Synthetic image classification data: each class is a Gaussian blob at a
// class-specific position overlaid with class-specific stripes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace blockprune {

/// One image per row of `images` (image_size * image_size pixels, row-major).
struct Batch {
	Matrix images;
	std::vector<int> labels;
	std::size_t image_size = 0;

	std::size_t size() const noexcept { return labels.size(); }

	Batch subset(std::span<const std::size_t> idx) const {
		Batch b;
		b.image_size = image_size;
		b.images = Matrix(idx.size(), images.cols());
		b.labels.reserve(idx.size());
		for (std::size_t i = 0; i < idx.size(); ++i) {
			require(idx[i] < size(), "batch subset index out of range");
			std::copy(images.row(idx[i]).begin(), images.row(idx[i]).end(), b.images.row(i).begin());
			b.labels.push_back(labels[idx[i]]);
		}
		return b;
	}

	Batch slice(std::size_t begin, std::size_t count) const {
		std::vector<std::size_t> idx(count);
		for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
		return subset(idx);
	}

	void validate(int num_classes) const {
		require(size() >= 1, "batch is empty");
		require(images.rows() == size() && images.cols() == image_size * image_size, "batch images do not match labels");
		for (int l : labels) require(l >= 0 && l < num_classes, "label out of range: " + std::to_string(l));
	}
};

struct DatasetSplit {
	Batch train;
	Batch test;
};

namespace detail {

inline Batch render_split(int num_classes, int samples_per_class, std::size_t image_size, Rng& rng) {
	const auto s = static_cast<double>(image_size);
	const std::size_t n = static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(samples_per_class);
	std::vector<int> labels;
	labels.reserve(n);
	for (int c = 0; c < num_classes; ++c)
		for (int i = 0; i < samples_per_class; ++i) labels.push_back(c);
	std::shuffle(labels.begin(), labels.end(), rng);

	std::normal_distribution<double> noise(0.0, 0.25);
	std::uniform_real_distribution<double> jitter(-1.0, 1.0);
	std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

	Batch b;
	b.image_size = image_size;
	b.images = Matrix(n, image_size * image_size);
	for (std::size_t i = 0; i < n; ++i) {
		const int c = labels[i];
		const double angle = 2.0 * std::numbers::pi * c / num_classes;
		const double cx = s / 2.0 + (s / 4.0) * std::cos(angle) + jitter(rng);
		const double cy = s / 2.0 + (s / 4.0) * std::sin(angle) + jitter(rng);
		const double freq = 1.0 + (c % 4);
		const double theta = std::numbers::pi * (c % 3) / 3.0;
		const double ph = phase(rng);
		const double sigma = 0.12 * s;
		auto row = b.images.row(i);
		for (std::size_t y = 0; y < image_size; ++y)
			for (std::size_t x = 0; x < image_size; ++x) {
				const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
				const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
				const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
				const double stripes = 0.3 * std::cos(2.0 * std::numbers::pi * freq * u / s + ph);
				row[y * image_size + x] = static_cast<float>(blob + stripes + noise(rng));
			}
	}
	b.labels = std::move(labels);
	return b;
}

} // namespace detail

/// Deterministic for a fixed seed; train and test draw from separate streams.
inline DatasetSplit synth_dataset(int num_classes, int samples_per_class, std::size_t image_size, std::uint64_t seed) {
	require(num_classes >= 1 && samples_per_class >= 1 && image_size >= 1, "dataset counts must be >= 1");
	Rng train_rng = make_rng(seed, "data.train");
	Rng test_rng = make_rng(seed, "data.test");
	return {detail::render_split(num_classes, samples_per_class, image_size, train_rng),
	        detail::render_split(num_classes, samples_per_class, image_size, test_rng)};
}

} // namespace blockprune
