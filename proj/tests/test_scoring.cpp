#include <catch_amalgamated.hpp>

#include <set>

#include "support.hpp"

using namespace blockprune;

namespace {

BlockScore random_scores(std::size_t br, std::size_t bc, std::mt19937_64& rng, int levels = 0) {
	BlockScore s{br, bc, std::vector<double>(br * bc)};
	std::uniform_real_distribution<double> ud(0.0, 1.0);
	for (auto& v : s.values) v = levels > 0 ? static_cast<double>(rng() % static_cast<unsigned>(levels)) : ud(rng);
	return s;
}

std::set<std::size_t> pruned_set(const BlockMask& m) {
	std::set<std::size_t> out;
	for (std::size_t i = 0; i < m.num_blocks(); ++i)
		if (!m.kept(i)) out.insert(i);
	return out;
}

} // namespace

TEST_CASE("taylor_score examples") {
	CHECK(taylor_score(Matrix::from_rows({{1, -2}}), Matrix::from_rows({{-3, 4}})) == Matrix::from_rows({{3, 8}}));
	std::mt19937_64 rng(1);
	const Matrix g = support::random_matrix(5, 6, rng);
	CHECK(taylor_score(Matrix(5, 6), g) == Matrix(5, 6));

	const Matrix w = support::random_matrix(5, 6, rng);
	const Matrix s = taylor_score(w, g);
	for (std::size_t r = 0; r < 5; ++r)
		for (std::size_t c = 0; c < 6; ++c) CHECK(s(r, c) == std::fabs(w(r, c) * g(r, c)));
	CHECK_THROWS_AS(taylor_score(w, Matrix(6, 5)), precondition_error);
}

TEST_CASE("block_pool examples") {
	const BlockScore c = block_pool(Matrix(4, 6, 2.5f), {2, 3});
	for (double v : c.values) CHECK(v == 2.5);

	Matrix one_tile(4, 4);
	for (std::size_t r = 0; r < 2; ++r)
		for (std::size_t k = 0; k < 2; ++k) one_tile(r, k) = 4.0f;
	CHECK(block_pool(one_tile, {2, 2}).values == std::vector<double>{4, 0, 0, 0});

	std::mt19937_64 rng(2);
	Matrix s = support::random_matrix(8, 8, rng);
	for (auto& v : s.data()) v = std::fabs(v);
	const BlockScore p = block_pool(s, {4, 2});
	REQUIRE(p.block_rows == 2);
	REQUIRE(p.block_cols == 4);
	for (std::size_t br = 0; br < 2; ++br)
		for (std::size_t bc = 0; bc < 4; ++bc) {
			double sum = 0.0;
			for (std::size_t r = 0; r < 4; ++r)
				for (std::size_t k = 0; k < 2; ++k) sum += s(br * 4 + r, bc * 2 + k);
			CHECK(p.values[br * 4 + bc] == Catch::Approx(sum / 8.0).epsilon(1e-12));
			CHECK(p.values[br * 4 + bc] >= 0.0);
		}
	CHECK_THROWS_AS(block_pool(s, {3, 2}), precondition_error);
}

TEST_CASE("mask_at_ratio examples") {
	const BlockScore s{2, 2, {4, 0, 0, 0}};
	CHECK(mask_at_ratio(s, 0.0) == BlockMask::ones(2, 2));
	CHECK(mask_at_ratio(s, 1.0) == BlockMask::zeros(2, 2));
	CHECK(mask_at_ratio(s, 0.5) == BlockMask::from_bits(2, 2, {1, 0, 0, 1}));
	CHECK_THROWS_AS(mask_at_ratio(s, 1.5), precondition_error);
	CHECK_THROWS_AS(mask_at_ratio(s, -0.1), precondition_error);
}

TEST_CASE("pruned_count rounds half away from zero") {
	CHECK(pruned_count(10, 0.25) == 3);
	CHECK(pruned_count(10, 0.24) == 2);
	CHECK(pruned_count(4, 0.125) == 1);
	CHECK(pruned_count(4, 0.375) == 2);
	CHECK(pruned_count(7, 1.0) == 7);
	CHECK(pruned_count(0, 0.5) == 0);
}

TEST_CASE("prune_order examples") {
	std::vector<std::size_t> id(6);
	std::iota(id.begin(), id.end(), std::size_t{0});
	CHECK(prune_order({2, 3, {1, 2, 3, 4, 5, 6}}) == id);
	CHECK(prune_order({2, 3, {7, 7, 7, 7, 7, 7}}) == id);
	CHECK(prune_order({1, 4, {3, 1, 1, 0}}) == std::vector<std::size_t>{3, 1, 2, 0});
}

TEST_CASE("order, masks and ratios agree on random scores") {
	std::mt19937_64 rng(3);
	for (int t = 0; t < 200; ++t) {
		const std::size_t br = 1 + rng() % 6, bc = 1 + rng() % 6;
		const BlockScore s = random_scores(br, bc, rng, t % 2 ? 4 : 0);
		const auto order = prune_order(s);

		// Oracle: sort (score, index) pairs.
		std::vector<std::pair<double, std::size_t>> pairs;
		for (std::size_t i = 0; i < s.values.size(); ++i) pairs.emplace_back(s.values[i], i);
		std::sort(pairs.begin(), pairs.end());
		for (std::size_t i = 0; i < pairs.size(); ++i) CHECK(order[i] == pairs[i].second);

		BlockScore scaled = s;
		for (auto& v : scaled.values) v *= 3.7;
		CHECK(prune_order(scaled) == order);

		std::set<std::size_t> previous;
		for (int k = 0; k <= 20; ++k) {
			const double alpha = k / 20.0;
			const BlockMask m = mask_at_ratio(s, alpha);
			const std::size_t cut = pruned_count(s.num_blocks(), alpha);
			CHECK(m == mask_from_order(br, bc, order, cut));
			CHECK(pruned_set(m) == std::set<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut)));
			CHECK(m.kept_count() == s.num_blocks() - cut);
			CHECK(m.density() == Catch::Approx(1.0 - static_cast<double>(cut) / static_cast<double>(s.num_blocks())).epsilon(1e-15));
			const auto now = pruned_set(m);
			CHECK(std::includes(now.begin(), now.end(), previous.begin(), previous.end()));
			previous = now;
		}
	}
}
