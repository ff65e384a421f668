#include "csm/harness/checkpoint.h"

#include "csm/errors.h"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace csm {


namespace {

void put_u32(std::vector<std::uint8_t> & out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t> & out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

double get_f64(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

Shape parse_shape(const std::string & s) {
    Shape shape;
    if (s == "scalar") return shape;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        if (part.empty()) throw CorruptFileError("checkpoint manifest: bad shape '" + s + "'");
        shape.push_back(std::stoull(part));
    }
    return shape;
}

std::string format_shape(const Shape & shape) {
    if (shape.empty()) return "scalar";
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += 'x';
        s += std::to_string(shape[i]);
    }
    return s;
}

} // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

std::string encode_manifest(const ParamVector & params, const CheckpointMetadata & metadata) {
    std::ostringstream m;
    m << "spec_hash " << std::hex << std::setw(16) << std::setfill('0') << params.spec_hash << std::dec << '\n';
    for (const auto & [key, value] : metadata) {
        if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
            throw ContractError("checkpoint metadata keys must not contain spaces or newlines: " + key);
        }
        m << "meta " << key << ' ' << value << '\n';
    }
    for (const auto & s : params.layout.slots()) {
        m << "tensor " << s.name << ' ' << format_shape(s.shape) << ' ' << s.offset * 8 << ' ' << s.numel() << '\n';
    }
    return m.str();
}

std::vector<std::uint8_t> encode_checkpoint(const ParamVector & params, const CheckpointMetadata & metadata) {
    if (params.layout.total() != params.size()) throw LayoutMismatchError("checkpoint: layout does not cover the data");
    const std::string manifest = encode_manifest(params, metadata);
    std::vector<std::uint8_t> out;
    out.reserve(12 + manifest.size() + params.size() * 8 + 4);
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(manifest.size()));
    out.insert(out.end(), manifest.begin(), manifest.end());
    const std::size_t payload_start = out.size();
    for (double v : params.data) put_f64(out, v);
    put_u32(out, crc32_of(std::span<const std::uint8_t>(out).subspan(payload_start)));
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) throw CorruptFileError("checkpoint too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CorruptFileError("checkpoint: bad magic");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kCheckpointVersion) throw CorruptFileError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t manifest_len = get_u32(bytes, 8);
    if (12ull + manifest_len + 4 > bytes.size()) throw CorruptFileError("checkpoint: manifest overruns file");
    const std::string manifest(reinterpret_cast<const char *>(bytes.data() + 12), manifest_len);
    const std::size_t payload_start = 12 + manifest_len;
    const std::size_t payload_len = bytes.size() - payload_start - 4;
    if (payload_len % 8 != 0) throw CorruptFileError("checkpoint: payload is not a whole number of f64 values");

    const auto payload = bytes.subspan(payload_start, payload_len);
    if (crc32_of(payload) != get_u32(bytes, bytes.size() - 4)) throw CorruptFileError("checkpoint: CRC mismatch");

    Checkpoint ck;
    std::vector<LayerSlot> slots;
    bool have_hash = false;
    std::istringstream in(manifest);
    std::string line;
    std::size_t expected_offset = 0;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string kind;
            ls >> kind;
            if (kind == "spec_hash") {
                std::string hex;
                ls >> hex;
                ck.params.spec_hash = std::stoull(hex, nullptr, 16);
                have_hash = true;
            } else if (kind == "meta") {
                std::string key;
                ls >> key;
                std::string value;
                std::getline(ls, value);
                if (!value.empty() && value.front() == ' ') value.erase(0, 1);
                ck.metadata[key] = value;
            } else if (kind == "tensor") {
                std::string name, shape;
                std::size_t offset = 0, count = 0;
                if (!(ls >> name >> shape >> offset >> count)) throw CorruptFileError("checkpoint manifest: bad tensor line");
                LayerSlot s{name, parse_shape(shape), offset / 8};
                if (offset != expected_offset || offset % 8 != 0 || s.numel() != count) {
                    throw CorruptFileError("checkpoint manifest: tensor " + name + " is not contiguous");
                }
                expected_offset += count * 8;
                slots.push_back(std::move(s));
            } else {
                throw CorruptFileError("checkpoint manifest: unknown record '" + kind + "'");
            }
        }
    } catch (const std::invalid_argument &) {
        throw CorruptFileError("checkpoint manifest: malformed number");
    } catch (const std::out_of_range &) {
        throw CorruptFileError("checkpoint manifest: number out of range");
    }
    if (!have_hash) throw CorruptFileError("checkpoint manifest: missing spec_hash");
    if (expected_offset != payload_len) throw CorruptFileError("checkpoint: manifest does not cover the payload");

    ck.params.layout = Layout(std::move(slots));
    ck.params.data.resize(payload_len / 8);
    for (std::size_t i = 0; i < ck.params.data.size(); ++i) ck.params.data[i] = get_f64(payload, i * 8);
    return ck;
}

void save_checkpoint(const ParamVector & params, const std::filesystem::path & path, const CheckpointMetadata & metadata) {
    const auto bytes = encode_checkpoint(params, metadata);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing " + path.string());
}

Checkpoint load_checkpoint_with_metadata(const std::filesystem::path & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const CorruptFileError & e) {
        throw CorruptFileError(path.string() + ": " + e.what());
    }
}

ParamVector load_checkpoint(const std::filesystem::path & path) {
    return load_checkpoint_with_metadata(path).params;
}

} // namespace csm
