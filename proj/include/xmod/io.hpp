#pragma once

// Single-file NIfTI-1 volumes and the XMOD checkpoint container. All multi-byte fields are little-endian.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmod/nets.hpp"
#include "xmod/schedule.hpp"
#include "xmod/volume.hpp"

namespace xmod::io {

class NiftiError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class MagicMismatchError : public NiftiError {
  public:
    using NiftiError::NiftiError;
};
class UnsupportedDatatypeError : public NiftiError {
  public:
    using NiftiError::NiftiError;
};
class TruncatedFileError : public NiftiError {
  public:
    using NiftiError::NiftiError;
};
class CompressedFileError : public NiftiError {
  public:
    using NiftiError::NiftiError;
};

enum NiftiDatatype : std::int16_t { kUint8 = 2, kInt16 = 4, kFloat32 = 16 };

// The header fields this reader interprets.
struct NiftiHeaderSubset {
    std::array<std::int16_t, 4> dim{};  // dim[0] is the rank (2 or 3)
    std::int16_t datatype = kFloat32;
    std::array<float, 3> pixdim{1.0f, 1.0f, 1.0f};
    float vox_offset = 352.0f;
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
    std::array<char, 4> magic{'n', '+', '1', '\0'};
};

NiftiHeaderSubset read_nifti_header(const std::filesystem::path& path);

// Applies scl_slope / scl_inter; a zero slope disables scaling, intercept included. The result is
// tagged RawHU; callers decide which intensity convention the file follows.
volume::Volume read_nifti(const std::filesystem::path& path);

// float32 with identity scaling, vox_offset 352, no extensions.
void write_nifti(const volume::Volume& v, const std::filesystem::path& path);

// Raw writer for other datatypes, used to build fixtures; values are rounded and saturated.
void write_nifti_raw(const std::vector<double>& stored, const std::array<std::int16_t, 4>& dim,
                     std::int16_t datatype, const std::array<float, 3>& pixdim, float scl_slope, float scl_inter,
                     const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    nets::ArchConfig config;
    std::string schedule = "cosine";
    nets::ParamTree<float> params;
};

constexpr std::uint32_t kCheckpointVersion = 1;

// "XMOD", version u32, config text, schedule descriptor, tensor table (name, rank, dims, float32 data),
// then the CRC-32 of every preceding byte.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Verifies the checksum and that the tensor table matches the parameters the config declares.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
// zlib CRC-32.
std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);

}  // namespace xmod::io
