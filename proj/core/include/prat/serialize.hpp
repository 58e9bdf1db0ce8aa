#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "prat/nn.hpp"
#include "prat/tensor.hpp"

namespace prat::io {

// Little-endian primitives. Readers throw FormatError with the byte offset
// on truncation.
void write_u8(std::ostream& os, uint8_t v);
void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f32(std::ostream& os, float v);
void write_bytes(std::ostream& os, const void* data, size_t n);

uint8_t read_u8(std::istream& is);
uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
void read_bytes(std::istream& is, void* data, size_t n);

using Metadata = std::map<std::string, std::string>;

// Checkpoint envelope shared by PRM1 / GLF1 / PRC1:
//   magic(4) version(u16) metadata entries, then named tensors as
//   name-length + name + shape + float32 little-endian values.
void write_checkpoint(const std::filesystem::path& path, const char magic[4],
                      const Metadata& meta, const nn::ParamStore& params);

// Loads into an already-built model: every stored tensor must match an
// existing parameter's name and shape.
Metadata read_checkpoint(const std::filesystem::path& path, const char magic[4],
                         nn::ParamStore& params);

// Reads only the metadata block.
Metadata read_checkpoint_meta(const std::filesystem::path& path, const char magic[4]);

uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 14695981039346656037ULL);
uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(uint64_t v);

// Write-to-temp-then-rename so concurrent readers never see partial files.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

}  // namespace prat::io
