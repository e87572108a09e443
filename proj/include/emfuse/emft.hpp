#pragma once

// EMFT tensor dump format: magic "EMFT", u32 rank, u32 dims, then the values
// as little-endian f64. A checkpoint is a sequence of records plus a JSON
// manifest listing record names and shapes in order.

#include "emfuse/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace emfuse {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
    os.write(reinterpret_cast<const char*>(buf), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw std::runtime_error("emft: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, const double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &data[i], 8);
        unsigned char buf[8];
        for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xffu);
        os.write(reinterpret_cast<const char*>(buf), 8);
    }
}

inline void read_f64(std::istream& is, double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        unsigned char buf[8];
        is.read(reinterpret_cast<char*>(buf), 8);
        if (!is) throw std::runtime_error("emft: truncated payload");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        std::memcpy(&data[i], &bits, 8);
    }
}

}  // namespace detail

inline void emft_write_record(std::ostream& os, const Tensor& t) {
    os.write("EMFT", 4);
    detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(d));
    detail::write_f64(os, t.data(), static_cast<std::size_t>(t.numel()));
}

inline Tensor emft_read_record(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "EMFT", 4) != 0) throw std::runtime_error("emft: bad magic");
    const std::uint32_t rank = detail::read_u32(is);
    if (rank > 8) throw std::runtime_error("emft: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(detail::read_u32(is));
    check_shape_valid(shape);
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    detail::read_f64(is, values.data(), values.size());
    return Tensor::from(std::move(shape), std::move(values));
}

inline void emft_save(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("emft: cannot open " + path + " for writing");
    emft_write_record(os, t);
}

inline Tensor emft_load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("emft: cannot open " + path);
    return emft_read_record(is);
}

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Checkpoint container: records in manifest order in `<path>`, manifest JSON
// alongside in `<path>.json`.
inline void emft_save_container(const std::string& path, const std::vector<NamedTensor>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("emft: cannot open " + path + " for writing");
    nlohmann::json manifest = nlohmann::json::array();
    for (const NamedTensor& e : entries) {
        emft_write_record(os, e.tensor);
        manifest.push_back({{"name", e.name}, {"shape", e.tensor.shape()}});
    }
    std::ofstream ms(path + ".json");
    if (!ms) throw std::runtime_error("emft: cannot open " + path + ".json for writing");
    ms << manifest.dump(2) << "\n";
}

inline std::vector<NamedTensor> emft_load_container(const std::string& path) {
    std::ifstream ms(path + ".json");
    if (!ms) throw std::runtime_error("emft: missing manifest " + path + ".json");
    nlohmann::json manifest = nlohmann::json::parse(ms);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("emft: cannot open " + path);
    std::vector<NamedTensor> entries;
    for (const auto& item : manifest) {
        NamedTensor e;
        e.name = item.at("name").get<std::string>();
        e.tensor = emft_read_record(is);
        const Shape expect = item.at("shape").get<Shape>();
        if (e.tensor.shape() != expect) {
            throw std::runtime_error("emft: manifest shape mismatch for " + e.name);
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace emfuse
