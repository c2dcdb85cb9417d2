#include "xmod/io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace xmod::io {

static_assert(std::endian::native == std::endian::little, "byte layouts assume a little-endian host");

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

template <typename T>
T get(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void put(std::uint8_t* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

int bytes_per_voxel(std::int16_t datatype) {
    switch (datatype) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kFloat32: return 4;
    default: return 0;
    }
}

NiftiHeaderSubset parse_header(const std::vector<std::uint8_t>& bytes, const std::string& where) {
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) {
        throw CompressedFileError(where + ": gzip-compressed NIfTI is not supported, decompress it first");
    }
    if (bytes.size() < kHeaderSize) throw TruncatedFileError(where + ": file ends inside the 348-byte header");
    const std::uint8_t* p = bytes.data();
    const auto sizeof_hdr = get<std::int32_t>(p);
    if (sizeof_hdr != 348) {
        if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == 348u) throw NiftiError(where + ": big-endian NIfTI is not supported");
        throw MagicMismatchError(where + ": sizeof_hdr is " + std::to_string(sizeof_hdr) + ", not 348");
    }
    NiftiHeaderSubset h;
    std::memcpy(h.magic.data(), p + 344, 4);
    if (!(h.magic[0] == 'n' && h.magic[1] == '+' && h.magic[2] == '1' && h.magic[3] == '\0')) {
        throw MagicMismatchError(where + ": magic is not \"n+1\" (only single-file NIfTI-1 is supported)");
    }
    for (int i = 0; i < 4; ++i) h.dim[static_cast<std::size_t>(i)] = get<std::int16_t>(p + 40 + 2 * i);
    h.datatype = get<std::int16_t>(p + 70);
    for (int i = 0; i < 3; ++i) h.pixdim[static_cast<std::size_t>(i)] = get<float>(p + 80 + 4 * i);
    h.vox_offset = get<float>(p + 108);
    h.scl_slope = get<float>(p + 112);
    h.scl_inter = get<float>(p + 116);
    if (h.dim[0] != 2 && h.dim[0] != 3) throw NiftiError(where + ": dim[0] must be 2 or 3, got " + std::to_string(h.dim[0]));
    for (int i = 1; i <= h.dim[0]; ++i) {
        if (h.dim[static_cast<std::size_t>(i)] < 1) throw NiftiError(where + ": non-positive dimension");
    }
    if (bytes_per_voxel(h.datatype) == 0) {
        throw UnsupportedDatatypeError(where + ": datatype " + std::to_string(h.datatype) +
                                       " is not supported (uint8, int16, float32)");
    }
    if (!(h.vox_offset >= static_cast<float>(kHeaderSize)) || h.vox_offset != std::floor(h.vox_offset)) {
        throw NiftiError(where + ": invalid vox_offset");
    }
    return h;
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

NiftiHeaderSubset read_nifti_header(const std::filesystem::path& path) {
    return parse_header(read_file(path), path.string());
}

volume::Volume read_nifti(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    const auto h = parse_header(bytes, path.string());
    const std::int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[0] == 3 ? h.dim[3] : 1;
    const std::int64_t count = nx * ny * nz;
    const auto offset = static_cast<std::size_t>(h.vox_offset);
    const std::size_t need = offset + static_cast<std::size_t>(count * bytes_per_voxel(h.datatype));
    if (bytes.size() < need) {
        throw TruncatedFileError(path.string() + ": expected " + std::to_string(need) + " bytes, found " +
                                 std::to_string(bytes.size()));
    }
    // A zero (or non-finite) slope switches scaling off entirely, intercept included.
    const bool scaled = h.scl_slope != 0.0f && std::isfinite(h.scl_slope);
    const double slope = scaled ? h.scl_slope : 1.0;
    const double inter = scaled && std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
    volume::Volume v;
    v.data = Tensor<double>(Shape{nz, ny, nx});
    const std::uint8_t* src = bytes.data() + offset;
    for (std::int64_t i = 0; i < count; ++i) {
        double stored = 0.0;
        switch (h.datatype) {
        case kUint8: stored = src[i]; break;
        case kInt16: stored = get<std::int16_t>(src + 2 * i); break;
        case kFloat32: stored = get<float>(src + 4 * i); break;
        }
        v.data[i] = slope * stored + inter;
    }
    auto spacing = [](float s) { return s > 0.0f && std::isfinite(s) ? static_cast<double>(s) : 1.0; };
    v.spacing = {spacing(h.pixdim[0]), spacing(h.pixdim[1]), h.dim[0] == 3 ? spacing(h.pixdim[2]) : 1.0};
    v.meta = {volume::IntensityKind::RawHU, 0.0, 0.0};
    return v;
}

namespace {

std::vector<std::uint8_t> make_header(const std::array<std::int16_t, 4>& dim, std::int16_t datatype,
                                      const std::array<float, 3>& pixdim, float slope, float inter) {
    std::vector<std::uint8_t> out(kDataOffset, 0);
    std::uint8_t* p = out.data();
    put<std::int32_t>(p, 348);
    p[38] = 'r';  // regular
    for (int i = 0; i < 4; ++i) put<std::int16_t>(p + 40 + 2 * i, dim[static_cast<std::size_t>(i)]);
    for (int i = 4; i < 8; ++i) put<std::int16_t>(p + 40 + 2 * i, 1);
    put<std::int16_t>(p + 70, datatype);
    put<std::int16_t>(p + 72, static_cast<std::int16_t>(8 * bytes_per_voxel(datatype)));
    put<float>(p + 76, 1.0f);  // qfac
    for (int i = 0; i < 3; ++i) put<float>(p + 80 + 4 * i, pixdim[static_cast<std::size_t>(i)]);
    put<float>(p + 108, static_cast<float>(kDataOffset));
    put<float>(p + 112, slope);
    put<float>(p + 116, inter);
    p[123] = 2;  // millimetres
    const char descrip[] = "xmod";
    std::memcpy(p + 148, descrip, sizeof(descrip));
    std::memcpy(p + 344, "n+1\0", 4);
    return out;
}

}  // namespace

void write_nifti(const volume::Volume& v, const std::filesystem::path& path) {
    v.validate();
    const auto nz = v.slices(), ny = v.height(), nx = v.width();
    const std::int64_t lim = std::numeric_limits<std::int16_t>::max();
    if (nz > lim || ny > lim || nx > lim) throw NiftiError("volume too large for NIfTI-1 dimensions");
    const std::array<std::int16_t, 4> dim{3, static_cast<std::int16_t>(nx), static_cast<std::int16_t>(ny),
                                          static_cast<std::int16_t>(nz)};
    const std::array<float, 3> pix{static_cast<float>(v.spacing[0]), static_cast<float>(v.spacing[1]),
                                   static_cast<float>(v.spacing[2])};
    auto bytes = make_header(dim, kFloat32, pix, 1.0f, 0.0f);
    bytes.resize(kDataOffset + 4 * static_cast<std::size_t>(v.data.size()));
    for (std::int64_t i = 0; i < v.data.size(); ++i) put<float>(bytes.data() + kDataOffset + 4 * i, static_cast<float>(v.data[i]));
    write_file(path, bytes);
}

void write_nifti_raw(const std::vector<double>& stored, const std::array<std::int16_t, 4>& dim, std::int16_t datatype,
                     const std::array<float, 3>& pixdim, float scl_slope, float scl_inter,
                     const std::filesystem::path& path) {
    const int bpv = bytes_per_voxel(datatype);
    if (bpv == 0) throw UnsupportedDatatypeError("cannot write datatype " + std::to_string(datatype));
    auto bytes = make_header(dim, datatype, pixdim, scl_slope, scl_inter);
    bytes.resize(kDataOffset + static_cast<std::size_t>(bpv) * stored.size());
    std::uint8_t* dst = bytes.data() + kDataOffset;
    for (std::size_t i = 0; i < stored.size(); ++i) {
        const double x = stored[i];
        switch (datatype) {
        case kUint8: dst[i] = static_cast<std::uint8_t>(std::clamp(std::round(x), 0.0, 255.0)); break;
        case kInt16: put<std::int16_t>(dst + 2 * i, static_cast<std::int16_t>(std::clamp(std::round(x), -32768.0, 32767.0))); break;
        default: put<float>(dst + 4 * i, static_cast<float>(x)); break;
        }
    }
    write_file(path, bytes);
}

// ---- checkpoint ----

namespace {

class Writer {
  public:
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
  public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::uint64_t u64() { return take<std::uint64_t>(); }
    std::string str() {
        const auto len = u32();
        need(len);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
        pos_ += len;
        return s;
    }
    const std::uint8_t* bytes(std::size_t len) {
        need(len);
        const auto* r = p_ + pos_;
        pos_ += len;
        return r;
    }
    bool done() const { return pos_ == n_; }

  private:
    template <typename T>
    T take() {
        need(sizeof(T));
        T v = get<T>(p_ + pos_);
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t len) const {
        if (len > n_ - pos_) throw CheckpointError("checkpoint is truncated");
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in pieces.
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) { return crc_of(bytes.data(), bytes.size()); }

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.raw("XMOD", 4);
    w.u32(kCheckpointVersion);
    w.str(ckpt.config.to_text());
    w.str(NoiseSchedule::parse(ckpt.schedule).descriptor());
    w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, v] : ckpt.params.entries()) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(v.shape().size()));
        for (auto d : v.shape()) w.u64(static_cast<std::uint64_t>(d));
        w.raw(v.value().ptr(), 4 * static_cast<std::size_t>(v.value().size()));
    }
    w.u32(crc_of(w.out.data(), w.out.size()));
    return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "XMOD", 4) != 0) throw CheckpointError("not an XMOD checkpoint");
    const std::size_t body = bytes.size() - 4;
    if (get<std::uint32_t>(bytes.data() + body) != crc_of(bytes.data(), body)) {
        throw CheckpointError("checkpoint checksum mismatch");
    }
    Reader r(bytes.data() + 4, body - 4);
    const auto version = r.u32();
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.config = nets::ArchConfig::from_text(r.str());
    c.config.validate();
    c.schedule = NoiseSchedule::parse(r.str()).descriptor();
    const auto specs = nets::declare_params(c.config);
    const auto count = r.u32();
    if (count != specs.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, config declares " +
                              std::to_string(specs.size()));
    }
    for (const auto& spec : specs) {
        const auto name = r.str();
        if (name != spec.name) throw CheckpointError("tensor '" + name + "' where '" + spec.name + "' was expected");
        const auto rank = r.u32();
        if (rank > 8) throw CheckpointError("tensor '" + name + "' has an implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::int64_t>(r.u64());
        if (shape != spec.shape) {
            throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(spec.shape));
        }
        Tensor<float> t(shape);
        std::memcpy(t.ptr(), r.bytes(4 * static_cast<std::size_t>(t.size())), 4 * static_cast<std::size_t>(t.size()));
        c.params.add(name, std::move(t));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after the tensor table");
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return decode_checkpoint(read_file(path));
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace xmod::io
