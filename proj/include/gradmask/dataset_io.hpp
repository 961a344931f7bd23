#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "gradmask/error.hpp"
#include "gradmask/signal.hpp"

namespace gradmask {

enum class DatasetFormat { kCsvDir, kBinaryRecords };

DatasetFormat parse_dataset_format(std::string_view text);

// Ingestion problems, reported with the file and record position.
class DataError : public ValidationError {
 public:
  DataError(const std::filesystem::path& file, const std::string& position,
            const std::string& what);
};

// csv_dir: <dir>/manifest.json, <dir>/signals/<id>.csv, optional
// <dir>/masks/<id>.json. binary_records: a single GMSK file.
DatasetManifest load_dataset(const std::filesystem::path& path,
                             DatasetFormat format);
void save_dataset(const DatasetManifest& manifest,
                  const std::filesystem::path& path, DatasetFormat format);

// Picks the format from the path: a directory is csv_dir, a file is binary.
DatasetManifest load_dataset(const std::filesystem::path& path);

// GMSK byte encoding. Samples are stored as float32, so a manifest survives
// the round trip exactly only if its samples are float32-representable.
std::string encode_binary(const DatasetManifest& manifest);
DatasetManifest decode_binary(std::string_view bytes,
                              const std::filesystem::path& origin = {});

// FNV-1a over the binary encoding, as 16 hex digits.
std::string fingerprint(const DatasetManifest& manifest);
std::uint64_t fnv1a(std::string_view bytes);

}  // namespace gradmask
