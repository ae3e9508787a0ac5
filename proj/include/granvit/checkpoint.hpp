#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "granvit/errors.hpp"
#include "granvit/tensor.hpp"

namespace granvit {

// Single-file checkpoint: 8-byte magic, little-endian u64 manifest length,
// JSON manifest (meta + name/shape/offset per tensor), then raw little-endian
// doubles. Round-trips are byte-exact.
struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;

    static constexpr char kMagic[8] = {'G', 'V', 'C', 'K', 'P', 'T', '0', '1'};

    void save(const std::filesystem::path& path) const {
        nlohmann::json manifest;
        manifest["meta"] = meta;
        auto& list = manifest["tensors"] = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& [name, t] : tensors) {
            nlohmann::json entry;
            entry["name"] = name;
            entry["shape"] = t.shape();
            entry["offset"] = offset;
            list.push_back(std::move(entry));
            offset += t.size() * sizeof(double);
        }
        const std::string mjson = manifest.dump();

        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("checkpoint save: cannot open " + path.string());
        out.write(kMagic, sizeof(kMagic));
        write_u64_le(out, mjson.size());
        out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
        for (const auto& [name, t] : tensors) {
            for (double v : t.data()) {
                char buf[8];
                encode_f64_le(v, buf);
                out.write(buf, 8);
            }
        }
        if (!out) throw IoError("checkpoint save: short write to " + path.string());
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("checkpoint load: cannot open " + path.string());
        char magic[8];
        in.read(magic, 8);
        if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
            throw IoError("checkpoint load: bad magic in " + path.string());
        const std::uint64_t mlen = read_u64_le(in);
        std::string mjson(mlen, '\0');
        in.read(mjson.data(), static_cast<std::streamsize>(mlen));
        if (in.gcount() != static_cast<std::streamsize>(mlen))
            throw IoError("checkpoint load: truncated manifest in " + path.string());
        nlohmann::json manifest = nlohmann::json::parse(mjson, nullptr, /*allow_exceptions=*/false);
        if (manifest.is_discarded()) throw IoError("checkpoint load: malformed manifest");

        Checkpoint ck;
        ck.meta = manifest.value("meta", nlohmann::json::object());
        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            Shape shape = entry.at("shape").get<Shape>();
            const std::size_t n = shape_numel(shape);
            std::vector<double> data(n);
            for (std::size_t i = 0; i < n; ++i) {
                char buf[8];
                in.read(buf, 8);
                if (in.gcount() != 8) throw IoError("checkpoint load: truncated data in " + path.string());
                data[i] = decode_f64_le(buf);
            }
            ck.tensors.emplace(name, Tensor::from_data(std::move(shape), std::move(data)));
        }
        return ck;
    }

private:
    static void write_u64_le(std::ofstream& out, std::uint64_t v) {
        char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out.write(buf, 8);
    }

    static std::uint64_t read_u64_le(std::ifstream& in) {
        unsigned char buf[8];
        in.read(reinterpret_cast<char*>(buf), 8);
        if (in.gcount() != 8) throw IoError("checkpoint load: truncated header");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return v;
    }

    static void encode_f64_le(double v, char* buf) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    }

    static double decode_f64_le(const char* buf) {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

}  // namespace granvit
