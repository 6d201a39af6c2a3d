#pragma once

// `.bpmodel` container:
//   8-byte magic "BPRUNE01"
//   u64 little-endian header length, then that many bytes of UTF-8 JSON:
//     {"meta": {...}, "tensors": [{"name","rows","cols","offset"}, ...]}
//   zero padding up to the next 64-byte boundary (the payload base)
//   raw little-endian float32 payloads; each offset is relative to the
//   payload base and is a multiple of 64.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <unordered_set>
#include <vector>

#include "model.hpp"

namespace blockprune {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'B', 'P', 'R', 'U', 'N', 'E', '0', '1'};
inline constexpr std::size_t kPayloadAlign = 64;

struct NamedTensor {
	std::string name;
	Matrix value;
};

struct Container {
	nlohmann::json meta = nlohmann::json::object();
	std::vector<NamedTensor> tensors;

	const Matrix& get(const std::string& name) const {
		for (const auto& t : tensors)
			if (t.name == name) return t.value;
		throw precondition_error("container has no tensor named '" + name + "'");
	}
};

namespace detail {

inline std::size_t align_up(std::size_t v) { return (v + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign; }

} // namespace detail

inline void write_container(const std::filesystem::path& path, const Container& c) {
	nlohmann::json manifest = nlohmann::json::array();
	std::size_t offset = 0;
	std::unordered_set<std::string> seen;
	for (const auto& t : c.tensors) {
		require(seen.insert(t.name).second, "duplicate tensor name '" + t.name + "'");
		manifest.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"offset", offset}});
		offset = detail::align_up(offset + t.value.size() * sizeof(float));
	}
	const std::string header = nlohmann::json{{"meta", c.meta}, {"tensors", manifest}}.dump();

	std::ofstream os(path, std::ios::binary | std::ios::trunc);
	require(static_cast<bool>(os), "cannot open '" + path.string() + "' for writing");
	os.write(kContainerMagic, sizeof(kContainerMagic));
	const std::uint64_t len = header.size();
	os.write(reinterpret_cast<const char*>(&len), sizeof(len));
	os.write(header.data(), static_cast<std::streamsize>(header.size()));
	const std::size_t base = detail::align_up(sizeof(kContainerMagic) + sizeof(len) + header.size());
	std::size_t pos = sizeof(kContainerMagic) + sizeof(len) + header.size();
	const std::vector<char> zeros(kPayloadAlign, 0);
	auto pad_to = [&](std::size_t target) {
		while (pos < target) {
			const std::size_t n = std::min(target - pos, zeros.size());
			os.write(zeros.data(), static_cast<std::streamsize>(n));
			pos += n;
		}
	};
	pad_to(base);
	for (std::size_t i = 0; i < c.tensors.size(); ++i) {
		pad_to(base + manifest[i]["offset"].get<std::size_t>());
		const auto d = c.tensors[i].value.data();
		os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
		pos += d.size() * sizeof(float);
	}
	pad_to(base + offset);
	require(static_cast<bool>(os), "failed writing '" + path.string() + "'");
}

inline Container read_container(const std::filesystem::path& path) {
	std::ifstream is(path, std::ios::binary);
	require(static_cast<bool>(is), "cannot open '" + path.string() + "'");
	std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
	const std::string where = "'" + path.string() + "': ";
	require(bytes.size() >= 16 && std::memcmp(bytes.data(), kContainerMagic, 8) == 0, where + "not a .bpmodel file (bad magic)");
	std::uint64_t len = 0;
	std::memcpy(&len, bytes.data() + 8, sizeof(len));
	require(len <= bytes.size() - 16, where + "truncated header");
	nlohmann::json header;
	try {
		header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
	} catch (const nlohmann::json::exception& e) {
		throw precondition_error(where + "malformed header: " + e.what());
	}
	require(header.contains("tensors") && header["tensors"].is_array(), where + "header lacks a tensor manifest");
	const std::size_t base = detail::align_up(16 + static_cast<std::size_t>(len));

	Container c;
	c.meta = header.value("meta", nlohmann::json::object());
	std::unordered_set<std::string> seen;
	for (const auto& e : header["tensors"]) {
		const auto name = e.at("name").get<std::string>();
		const auto rows = e.at("rows").get<std::size_t>(), cols = e.at("cols").get<std::size_t>();
		const auto off = e.at("offset").get<std::size_t>();
		require(seen.insert(name).second, where + "duplicate tensor '" + name + "'");
		require(off % kPayloadAlign == 0, where + "tensor '" + name + "' is not 64-byte aligned");
		const std::size_t nbytes = rows * cols * sizeof(float);
		require(base + off + nbytes <= bytes.size(), where + "tensor '" + name + "' runs past end of file");
		std::vector<float> data(rows * cols);
		std::memcpy(data.data(), bytes.data() + base + off, nbytes);
		for (float v : data) require(std::isfinite(v), where + "tensor '" + name + "' holds a non-finite value");
		c.tensors.push_back({name, Matrix(rows, cols, std::move(data))});
	}
	return c;
}

inline nlohmann::json to_json(const ToyViTConfig& c) {
	return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
	        {"num_heads", c.num_heads},   {"depth", c.depth},           {"mlp_ratio", c.mlp_ratio},
	        {"num_classes", c.num_classes}, {"seed", c.seed}};
}

inline ToyViTConfig toy_config_from_json(const nlohmann::json& j) {
	ToyViTConfig c;
	c.image_size = j.value("image_size", c.image_size);
	c.patch_size = j.value("patch_size", c.patch_size);
	c.embed_dim = j.value("embed_dim", c.embed_dim);
	c.num_heads = j.value("num_heads", c.num_heads);
	c.depth = j.value("depth", c.depth);
	c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
	c.num_classes = j.value("num_classes", c.num_classes);
	c.seed = j.value("seed", c.seed);
	c.validate();
	return c;
}

/// A model on disk: parameters plus the block shape its masks are stored at.
struct ModelFile {
	ParamSet params;
	std::optional<BlockShape> block_shape;
};

inline void save_model(const std::filesystem::path& path, const ParamSet& params,
                       std::optional<BlockShape> block_shape = std::nullopt) {
	params.validate();
	Container c;
	c.meta["config"] = to_json(params.config);
	c.meta["block_shape"] = block_shape ? nlohmann::json(block_shape->str()) : nlohmann::json(nullptr);
	params.for_each_tensor([&](const std::string& name, const Matrix& m) { c.tensors.push_back({name, m}); });
	write_container(path, c);
}

/// Loads and re-validates a model: tensor names, order and shapes must match
/// the stored config exactly.
inline ModelFile load_model(const std::filesystem::path& path) {
	const Container c = read_container(path);
	require(c.meta.contains("config"), "'" + path.string() + "': header has no model config");
	ModelFile mf;
	mf.params = init_params(toy_config_from_json(c.meta["config"]));
	std::size_t i = 0;
	mf.params.for_each_tensor([&](const std::string& name, Matrix& m) {
		require(i < c.tensors.size() && c.tensors[i].name == name,
		        "'" + path.string() + "': expected tensor '" + name + "' at position " + std::to_string(i));
		require(c.tensors[i].value.rows() == m.rows() && c.tensors[i].value.cols() == m.cols(),
		        "'" + path.string() + "': tensor '" + name + "' has shape " + c.tensors[i].value.shape_str() + ", expected " +
		            m.shape_str());
		m = c.tensors[i].value;
		++i;
	});
	require(i == c.tensors.size(), "'" + path.string() + "': unexpected extra tensors");
	mf.params.validate();
	if (c.meta.contains("block_shape") && c.meta["block_shape"].is_string())
		mf.block_shape = parse_block_shape(c.meta["block_shape"].get<std::string>());
	return mf;
}

} // namespace blockprune
