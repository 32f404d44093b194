#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ltn/synthbench/generator.hpp"

// On-disk dataset layout:
//   manifest.json            schema version, generator config, seed, archetypes, scene list per split
//   images/<id>.pgm          binary 8-bit PGM (P5)
//   train.jsonl, val.jsonl   one annotation record per line
//   distractors.jsonl        unannotated look-alikes, same record format
namespace ltn::synth {

inline constexpr int kDatasetSchemaVersion = 1;

std::string encode_pgm(const GrayImage& image);

/// Throws DataError on anything but a binary P5 image with maxval 255.
GrayImage decode_pgm(const std::string& bytes);

void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

void save_dataset(const SyntheticDataset& dataset, const SynthConfig& config, std::uint64_t seed,
                  const std::filesystem::path& dir);

struct LoadedDataset {
  SyntheticDataset dataset;
  SynthConfig config;
  std::uint64_t seed = 0;
};

/// Throws DataError on missing files, malformed records or inconsistent ids.
LoadedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace ltn::synth
